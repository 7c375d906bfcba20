"""Stage-0 concept pretraining and the three-stage adapter curriculum.

Stage 0 trains the base model on concept prompts only and stands in for a
pretrained concept segmenter; afterwards the base weights are frozen for good.
Stage 1 trains the S adapters on simple instructions, stage 2 copies S into C
and trains C on complex instructions, stage 3 fine-tunes both with the
alignment and hard-region terms switched on.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Adam, ParameterGroup, Tensor, load_checkpoint, save_checkpoint
from .losses import CSV_COLUMNS, LossBreakdown, active_breakdown, active_terms, hard_region_loss, kl_align, seg_loss
from .model import ModelConfig, PisModel, adapter_names, base_names, init_params
from .scenes import DatasetRecord, object_masks, render

log = logging.getLogger(__name__)

STAGE_LEVEL = {0: "concept", 1: "simple", 2: "complex", 3: "paired"}
GENERIC_CONCEPT = "object"


class StageOrderError(RuntimeError):
    """A stage was requested before its prerequisite stages ran."""


@dataclass
class StageConfig:
    stage: int
    steps: int
    learning_rate: float = 1e-3
    batch_size: int = 16
    seed: int = 0
    align: bool | None = None
    hard: bool | None = None
    train_s_in_stage2: bool = False

    @property
    def loss_flags(self) -> tuple[bool, bool]:
        return active_terms(self.stage, self.align, self.hard)


def freeze_set(stage: int, params: ParameterGroup, train_s_in_stage2: bool = False) -> set[str]:
    """Names trainable in ``stage``."""
    if stage == 0:
        return set(base_names(params))
    if stage == 1:
        return set(adapter_names(params, "S"))
    if stage == 2:
        names = set(adapter_names(params, "C"))
        if train_s_in_stage2:
            names |= set(adapter_names(params, "S"))
        return names
    if stage == 3:
        return set(adapter_names(params, "S")) | set(adapter_names(params, "C"))
    raise ValueError(f"unknown stage {stage}")


def inherit_c_from_s(params: ParameterGroup) -> None:
    """Overwrite every C-adapter tensor with a copy of its S counterpart."""
    for name in adapter_names(params, "C"):
        params[name].data = params[name.replace(".C.", ".S.")].data.copy()


# -- data ------------------------------------------------------------------------

class TrainingData:
    """Images, masks and prompts of a record list, ready for batching."""

    def __init__(self, records: list[DatasetRecord]):
        if not records:
            raise ValueError("empty dataset")
        self.records = records
        self.images = np.stack([render(r.scene) for r in records])
        self.masks = [object_masks(r.scene) for r in records]
        self.targets = np.stack([m[r.target_id] for r, m in zip(records, self.masks)]).astype(np.float32)
        self._features: tuple[str, np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self.records)

    def concept_target(self, i: int, concept: str) -> np.ndarray:
        scene = self.records[i].scene
        hit = [o.id for o in scene.objects if concept == GENERIC_CONCEPT or o.concept == concept]
        out = np.zeros(self.targets.shape[1:], dtype=np.float32)
        for oid in hit:
            out[self.masks[i][oid]] = 1.0
        return out

    def frozen_features(self, model: PisModel) -> np.ndarray:
        """Backbone features for all images, cached on the vision weights."""
        key = "".join(model.params.digest(n) for n in model.params.names("vision.*"))
        if self._features is None or self._features[0] != key:
            feats = [model.image_features(self.images[i:i + 64]).data
                     for i in range(0, len(self), 64)]
            self._features = (key, np.concatenate(feats))
        return self._features[1]


def _pick(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def make_batch(data: TrainingData, stage: int, rng, batch_size: int) -> dict:
    idx = rng.integers(len(data), size=batch_size)
    batch: dict = {"index": idx, "level": STAGE_LEVEL[stage]}
    if stage == 0:
        texts, gts = [], []
        for i in idx:
            scene = data.records[i].scene
            concept = GENERIC_CONCEPT if rng.random() < 0.1 else _pick(rng, scene.objects).concept
            texts.append(concept)
            gts.append(data.concept_target(i, concept))
        batch.update(texts=texts, gt=np.stack(gts))
    elif stage in (1, 2):
        level = STAGE_LEVEL[stage]
        batch.update(texts=[_pick(rng, data.records[i].instructions(level)).text for i in idx],
                     gt=data.targets[idx])
    else:
        batch.update(simple=[_pick(rng, data.records[i].instructions("simple")).text for i in idx],
                     complex=[_pick(rng, data.records[i].instructions("complex")).text for i in idx],
                     gt=data.targets[idx])
    return batch


# -- training --------------------------------------------------------------------

@dataclass
class TrainState:
    params: ParameterGroup
    cfg: ModelConfig = field(default_factory=ModelConfig)
    completed: list[int] = field(default_factory=list)
    step: int = 0
    log: list[list] = field(default_factory=list)
    optimizer: Adam | None = None

    @property
    def model(self) -> PisModel:
        return PisModel(self.params, self.cfg)

    def meta(self) -> dict:
        return {"completed": list(self.completed), "step": self.step, "model": self.cfg.to_dict()}


def new_state(seed: int = 0, cfg: ModelConfig = ModelConfig()) -> TrainState:
    return TrainState(init_params(cfg, seed), cfg)


def load_state(path) -> TrainState:
    params, meta = load_checkpoint(path)
    cfg = ModelConfig.from_dict(meta["model"]) if "model" in meta else ModelConfig()
    return TrainState(params, cfg, list(meta.get("completed", [])), int(meta.get("step", 0)))


def train_step(batch: dict, stage: int, state: TrainState, cfg: StageConfig,
               features: np.ndarray | None = None) -> LossBreakdown:
    """One optimizer step on ``batch``; returns the loss breakdown.

    Stages 0-2 optimise the segmentation loss of the branch matching the
    stage. Stage 3 averages the simple and complex segmentation losses and
    adds the active alignment terms.
    """
    if batch["level"] != STAGE_LEVEL[stage]:
        raise ValueError(f"stage {stage} expects {STAGE_LEVEL[stage]} batches, got {batch['level']}")
    model = state.model
    if features is None:
        raise ValueError("features are required")
    feats = features if isinstance(features, Tensor) else Tensor(features[batch["index"]])
    gt = batch["gt"]
    if stage < 3:
        p = model.forward(feats, batch["texts"], STAGE_LEVEL[stage])
        l_seg = seg_loss(p, gt)
        loss = l_seg
        parts = LossBreakdown(l_seg=l_seg.item())
    else:
        use_align, use_hard = cfg.loss_flags
        p_s = model.forward(feats, batch["simple"], "simple")
        p_c = model.forward(feats, batch["complex"], "complex")
        l_seg = (seg_loss(p_s, gt) + seg_loss(p_c, gt)) * 0.5
        loss = l_seg
        parts = LossBreakdown(l_seg=l_seg.item())
        if use_align:
            l_align = kl_align(p_s, p_c)
            loss = loss + l_align
            parts.l_align = l_align.item()
        if use_hard:
            l_hard = hard_region_loss(p_s, p_c)
            loss = loss + l_hard
            parts.l_hard = l_hard.item()
    loss.backward()
    state.optimizer.step()
    state.params.zero_grad()
    state.step += 1
    return active_breakdown(parts, stage, *cfg.loss_flags)


def check_prerequisites(stage: int, completed: list[int], skip_stage1: bool = False,
                        skip_stage2: bool = False) -> None:
    need = {1: [0], 2: [0, 1], 3: [0, 1, 2]}.get(stage, [])
    skipped = {1} if skip_stage1 else set()
    if skip_stage2:
        skipped.add(2)
    missing = [s for s in need if s not in completed and s not in skipped]
    if missing:
        raise StageOrderError(f"stage {stage} needs completed stages {missing} "
                              f"(or an explicit skip flag)")


def run_stage(cfg: StageConfig, data: TrainingData, state: TrainState, out_dir=None,
              skip_stage1: bool = False, skip_stage2: bool = False) -> TrainState:
    """Run one curriculum stage in place; optionally write ``stage{N}.ckpt`` and its log."""
    stage = cfg.stage
    check_prerequisites(stage, state.completed, skip_stage1, skip_stage2)
    params = state.params
    if stage == 2 or (stage == 3 and 2 not in state.completed):
        inherit_c_from_s(params)
    params.set_trainable(freeze_set(stage, params, cfg.train_s_in_stage2))
    state.optimizer = Adam(params, lr=cfg.learning_rate)
    rng = np.random.default_rng([cfg.seed, stage])
    model = state.model

    rows = []
    for _ in range(cfg.steps):
        batch = make_batch(data, stage, rng, cfg.batch_size)
        if stage == 0:
            feats = model.image_features(data.images[batch["index"]])
        else:
            feats = data.frozen_features(model)
        parts = train_step(batch, stage, state, cfg, feats)
        rows.append(parts.row(state.step, stage))
    state.log.extend(rows)
    state.completed = sorted(set(state.completed) | {stage})
    params.set_trainable(())
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(params, out / f"stage{stage}.ckpt", state.meta())
        write_log(rows, out / f"stage{stage}_log.csv")
    return state


def format_log(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for step, stage, *vals in rows:
        w.writerow([step, stage, *(f"{v:.8g}" for v in vals)])
    return buf.getvalue()


def write_log(rows, path) -> None:
    Path(path).write_text(format_log(rows))


@dataclass
class Curriculum:
    """Step counts and switches for a full 0 -> 3 run."""

    steps: tuple[int, int, int, int] = (600, 500, 500, 400)
    learning_rate: float = 1e-3
    batch_size: int = 16
    seed: int = 0
    skip_stage1: bool = False
    skip_stage2: bool = False
    align: bool | None = None
    hard: bool | None = None
    train_s_in_stage2: bool = False

    def stage_config(self, stage: int) -> StageConfig:
        return StageConfig(stage, self.steps[stage], self.learning_rate, self.batch_size, self.seed,
                           self.align if stage == 3 else None, self.hard if stage == 3 else None,
                           self.train_s_in_stage2)

    def stages(self) -> list[int]:
        out = [0]
        if not self.skip_stage1:
            out.append(1)
        if not self.skip_stage2:
            out.append(2)
        return out + [3]


def run_curriculum(cur: Curriculum, data: TrainingData, state: TrainState | None = None,
                   out_dir=None, from_stage: int = 0) -> TrainState:
    state = state or new_state(cur.seed)
    for stage in cur.stages():
        if stage < from_stage:
            continue
        log.info("stage %d: %d steps", stage, cur.steps[stage])
        run_stage(cur.stage_config(stage), data, state, out_dir, cur.skip_stage1, cur.skip_stage2)
    return state
