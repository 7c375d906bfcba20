"""Annotation, inspection and human-correction loop for dataset records.

An annotator proposes the nine texts of a record (concept NP, four positive
and four negative instructions). An inspector then sees all eight
instructions in shuffled order and must pick out exactly the positives. Any
wrong judgment rejects the whole set and the annotator starts over. After
``max_rounds`` failed rounds the sample waits in a human queue, which is
exported as JSONL and re-imported with corrections or discard markers.

Agents come in three kinds: ``oracle`` (the scene graph), ``noisy:EPS`` (the
oracle with independent per-item corruption) and ``remote:URL`` (a JSON-over-
HTTP service).
"""

from __future__ import annotations

import base64
import json
import logging
import os
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io import blend_overlay, dumps, encode_pnm, read_jsonl, write_jsonl
from .scenes import (
    AmbiguityError,
    DatasetRecord,
    Instruction,
    Scene,
    flip_predicate,
    footprint,
    identifies,
    instruction_text,
    instructions_for,
    object_masks,
    render,
    satisfies,
)

log = logging.getLogger(__name__)

PENDING, ACCEPTED, HUMAN_QUEUE, DISCARDED = "Pending", "Accepted", "HumanQueue", "Discarded"
STATUSES = (PENDING, ACCEPTED, HUMAN_QUEUE, DISCARDED)
DEFAULT_MAX_ROUNDS = 10
DEFAULT_TIMEOUT = 30.0
DEFAULT_RETRIES = 2


class AgentError(RuntimeError):
    """An agent could not be reached or returned an unusable reply."""


class SchemaError(AgentError):
    """A remote reply did not match the wire contract."""


class ImportRejected(ValueError):
    pass


# -- samples and tasks -----------------------------------------------------------

@dataclass
class EngineSample:
    sample_id: int
    scene: Scene
    target_id: int
    seed: int = 0
    record: DatasetRecord | None = None
    round: int = 0
    status: str = PENDING
    history: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "seed": self.seed,
            "target_id": self.target_id,
            "scene": self.scene.to_dict(),
            "round": self.round,
            "status": self.status,
            "history": self.history,
            "candidate": self.record.to_dict() if self.record else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> EngineSample:
        rec = DatasetRecord.from_dict(d["candidate"]) if d.get("candidate") else None
        return cls(int(d["sample_id"]), Scene.from_dict(d["scene"]), int(d["target_id"]),
                   int(d.get("seed", 0)), rec, int(d.get("round", 0)), d.get("status", PENDING),
                   list(d.get("history", [])))


def sample_from_record(sample_id: int, record: DatasetRecord, seed: int = 0) -> EngineSample:
    """A fresh Pending sample for the scene and target of ``record``."""
    return EngineSample(sample_id, record.scene, record.target_id, seed)


@dataclass
class InspectionTask:
    choices: list[Instruction]
    answer_key: frozenset[int]
    scene: Scene
    target_id: int

    def __post_init__(self):
        if len(self.choices) != 8 or len(self.answer_key) != 4:
            raise ValueError(f"inspection needs 8 choices and 4 keys, got "
                             f"{len(self.choices)} and {len(self.answer_key)}")


def make_task(record: DatasetRecord, rng) -> InspectionTask:
    items = [(i, True) for i in record.positives] + [(i, False) for i in record.negatives]
    order = rng.permutation(len(items))
    choices = [items[k][0] for k in order]
    key = frozenset(n for n, k in enumerate(order) if items[k][1])
    return InspectionTask(choices, key, record.scene, record.target_id)


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    wrong_indices: tuple[int, ...] = ()


def judge(task: InspectionTask, selected) -> Verdict:
    """Accept iff the selected set equals the answer key exactly."""
    wrong = tuple(sorted(set(selected) ^ task.answer_key))
    return Verdict(not wrong, wrong)


def oracle_judgments(task: InspectionTask) -> list[bool]:
    """Does each choice describe the target and nothing else in the scene?"""
    return [bool(c.semantics) and identifies(task.scene, c.semantics, task.target_id)
            for c in task.choices]


# -- agents ----------------------------------------------------------------------

@dataclass(frozen=True)
class AgentEndpointSpec:
    kind: str = "oracle"
    epsilon: float = 0.0
    url: str = ""
    timeout: float = DEFAULT_TIMEOUT
    retries: int = DEFAULT_RETRIES

    def __post_init__(self):
        if self.kind not in ("oracle", "noisy", "remote"):
            raise ValueError(f"unknown agent kind {self.kind!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.kind == "remote" and not self.url:
            raise ValueError("remote agent needs a URL")

    @classmethod
    def parse(cls, text: str) -> AgentEndpointSpec:
        """``oracle``, ``noisy:EPS`` or ``remote:URL``."""
        kind, _, arg = text.strip().partition(":")
        if kind == "oracle" and not arg:
            return cls("oracle")
        if kind == "noisy":
            try:
                return cls("noisy", epsilon=float(arg))
            except ValueError as e:
                raise ValueError(f"bad noisy agent {text!r}: {e}") from None
        if kind == "remote":
            timeout = float(os.environ.get("PIS_REMOTE_TIMEOUT", DEFAULT_TIMEOUT))
            return cls("remote", url=arg, timeout=timeout)
        raise ValueError(f"unknown agent spec {text!r} (expected oracle, noisy:EPS or remote:URL)")


def parse_agents(text: str) -> tuple[AgentEndpointSpec, AgentEndpointSpec]:
    """``SPEC`` for both roles, or ``ANNOTATOR,INSPECTOR``."""
    parts = text.split(",")
    if len(parts) == 1:
        spec = AgentEndpointSpec.parse(parts[0])
        return spec, spec
    if len(parts) == 2:
        return AgentEndpointSpec.parse(parts[0]), AgentEndpointSpec.parse(parts[1])
    raise ValueError(f"expected one or two agent specs, got {text!r}")


def _corrupt(instr: Instruction, rng) -> Instruction:
    """Change one predicate of ``instr`` to a different value, keeping its label.

    A corrupted positive no longer describes the target. A corrupted negative
    either stays false or, when the already-flipped predicate is hit, turns
    true while still labelled negative.
    """
    sem = [dict(p) for p in instr.semantics]
    k = int(rng.integers(len(sem)))
    sem[k] = flip_predicate(sem[k], rng)
    return Instruction(instruction_text(sem, instr.level, instr.form), instr.level, instr.form,
                       instr.polarity, instr.target_id, sem)


class OracleAgent:
    """Annotates from the scene graph and inspects by checking semantics."""

    def annotate(self, sample: EngineSample, rng) -> DatasetRecord:
        return instructions_for(sample.scene, sample.target_id, int(rng.integers(2**31)))

    def inspect(self, task: InspectionTask, rng) -> list[int]:
        return [i for i, ok in enumerate(oracle_judgments(task)) if ok]


class NoisyAgent(OracleAgent):
    """The oracle with each output item independently corrupted with probability ``eps``."""

    def __init__(self, eps: float):
        if not 0.0 <= eps <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {eps}")
        self.eps = eps

    def annotate(self, sample, rng):
        rec = super().annotate(sample, rng)
        flip = rng.random(8) < self.eps
        pool = rec.positives + rec.negatives
        pool = [_corrupt(i, rng) if f else i for i, f in zip(pool, flip)]
        rec.positives, rec.negatives = pool[:4], pool[4:]
        return rec

    def inspect(self, task, rng):
        judgments = np.array(oracle_judgments(task))
        judgments ^= rng.random(len(judgments)) < self.eps
        return [int(i) for i in np.flatnonzero(judgments)]


def _b64(img) -> str:
    return base64.b64encode(encode_pnm(img)).decode("ascii")


class RemoteAgent:
    """JSON-over-HTTP agent: ``POST {url}/annotate`` and ``POST {url}/inspect``."""

    def __init__(self, url: str, timeout: float = DEFAULT_TIMEOUT, retries: int = DEFAULT_RETRIES):
        self.url = url.rstrip("/")
        self.timeout = timeout
        self.retries = retries

    def _post(self, route: str, payload: dict) -> dict:
        body = json.dumps(payload).encode("utf-8")
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            req = urllib.request.Request(f"{self.url}/{route}", data=body, method="POST",
                                         headers={"Content-Type": "application/json"})
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    return json.loads(resp.read().decode("utf-8"))
            except (urllib.error.URLError, OSError, json.JSONDecodeError, UnicodeDecodeError) as e:
                last = e
                log.warning("%s/%s attempt %d failed: %s", self.url, route, attempt + 1, e)
        raise AgentError(f"{route} failed after {self.retries + 1} attempts: {last}")

    def annotate(self, sample: EngineSample, rng) -> DatasetRecord:
        scene = sample.scene
        image = render(scene)
        mask = object_masks(scene)[sample.target_id]
        rows, cols = footprint(scene, scene.by_id(sample.target_id))
        target = scene.by_id(sample.target_id)
        reply = self._post("annotate", {
            "image_b64": _b64(image),
            "overlay_b64": _b64(blend_overlay(image, mask)),
            "crop_b64": _b64(image[rows, cols]),
            "class_label": target.shape,
            "few_shot": [],
        })
        return parse_annotation(reply, scene, sample.target_id)

    def inspect(self, task: InspectionTask, rng) -> list[int]:
        image = render(task.scene)
        mask = object_masks(task.scene)[task.target_id]
        reply = self._post("inspect", {
            "image_b64": _b64(image),
            "mask_b64": _b64(mask),
            "choices": [c.text for c in task.choices],
        })
        sel = reply.get("selected_indices") if isinstance(reply, dict) else None
        if not isinstance(sel, list) or not all(isinstance(i, int) and 0 <= i < 8 for i in sel) \
                or len(set(sel)) != len(sel):
            raise SchemaError(f"bad selected_indices: {sel!r}")
        return sel


def _parse_instruction(d, polarity: str, target_id: int) -> Instruction:
    if not isinstance(d, dict) or not isinstance(d.get("text"), str):
        raise SchemaError(f"instruction must be an object with a text field, got {d!r}")
    level, form = d.get("level"), d.get("form")
    if level not in ("simple", "complex") or form not in ("declarative", "question"):
        raise SchemaError(f"bad level/form in {d!r}")
    sem = d.get("semantics", [])
    if not isinstance(sem, list) or not all(isinstance(p, dict) and "attr" in p and "value" in p for p in sem):
        raise SchemaError(f"bad semantics in {d!r}")
    return Instruction(d["text"], level, form, polarity, target_id, [dict(p) for p in sem])


def parse_annotation(reply, scene: Scene, target_id: int) -> DatasetRecord:
    """Validate a remote ``/annotate`` reply against the 4 + 4 + 1 contract."""
    if not isinstance(reply, dict):
        raise SchemaError("annotation reply must be a JSON object")
    pos, neg, np_ = reply.get("positives"), reply.get("negatives"), reply.get("concept_np")
    if not isinstance(np_, str) or not np_.strip():
        raise SchemaError("concept_np missing")
    if not isinstance(pos, list) or not isinstance(neg, list) or len(pos) != 4 or len(neg) != 4:
        n = (len(pos) if isinstance(pos, list) else 0) + (len(neg) if isinstance(neg, list) else 0)
        raise SchemaError(f"need 4 positives and 4 negatives, got {n} instructions")
    target = scene.by_id(target_id)
    return DatasetRecord(scene, target_id, target.shape, np_,
                         [_parse_instruction(d, "positive", target_id) for d in pos],
                         [_parse_instruction(d, "negative", target_id) for d in neg])


def make_agent(spec: AgentEndpointSpec):
    if spec.kind == "oracle":
        return OracleAgent()
    if spec.kind == "noisy":
        return NoisyAgent(spec.epsilon)
    return RemoteAgent(spec.url, spec.timeout, spec.retries)


def annotate(sample: EngineSample, agent, rng) -> DatasetRecord:
    return agent.annotate(sample, rng)


def inspect(task: InspectionTask, agent, rng) -> Verdict:
    return judge(task, agent.inspect(task, rng))


# -- the loop --------------------------------------------------------------------

def run_loop(sample: EngineSample, annotator, inspector, max_rounds: int = DEFAULT_MAX_ROUNDS) -> EngineSample:
    """Annotate and inspect until accepted or ``max_rounds`` rounds have failed.

    Each round regenerates the full set of nine texts. Agent failures count
    as failed rounds. The sample is updated in place and returned.
    """
    if sample.status != PENDING:
        raise ValueError(f"sample {sample.sample_id} is {sample.status}, not Pending")
    if max_rounds < 1:
        raise ValueError("max_rounds must be at least 1")
    for r in range(1, max_rounds + 1):
        sample.round = r
        rng = np.random.default_rng([sample.seed, sample.sample_id, r])
        try:
            record = annotate(sample, annotator, rng)
            sample.record = record
            verdict = inspect(make_task(record, rng), inspector, rng)
        except (AgentError, AmbiguityError) as e:
            sample.history.append({"round": r, "error": str(e)})
            continue
        if verdict.accepted:
            sample.status = ACCEPTED
            return sample
        sample.history.append({"round": r, "wrong_indices": list(verdict.wrong_indices)})
    sample.status = HUMAN_QUEUE
    return sample


@dataclass
class EngineStats:
    total: int
    accepted: int
    queued: int
    discarded: int
    rounds: dict[int, int]

    @property
    def acceptance(self) -> float:
        return self.accepted / self.total if self.total else 0.0

    def summary(self) -> str:
        hist = " ".join(f"{r}:{n}" for r, n in sorted(self.rounds.items()))
        return (f"samples={self.total} accepted={self.accepted} queued={self.queued} "
                f"discarded={self.discarded} accepted_rounds[{hist}]")


def engine_stats(samples: list[EngineSample]) -> EngineStats:
    rounds: dict[int, int] = {}
    for s in samples:
        if s.status == ACCEPTED:
            rounds[s.round] = rounds.get(s.round, 0) + 1
    count = lambda st: sum(s.status == st for s in samples)  # noqa: E731
    return EngineStats(len(samples), count(ACCEPTED), count(HUMAN_QUEUE), count(DISCARDED), rounds)


def run_engine(samples: list[EngineSample], annotator, inspector,
               max_rounds: int = DEFAULT_MAX_ROUNDS) -> list[EngineSample]:
    for s in samples:
        run_loop(s, annotator, inspector, max_rounds)
    return samples


# -- record contract and the human queue ------------------------------------------

def validate_record(record: DatasetRecord) -> list[str]:
    """Reasons ``record`` breaks the dataset contract; empty when it is valid."""
    problems = []
    if len(record.positives) != 4 or len(record.negatives) != 4:
        problems.append(f"expected 4 positives and 4 negatives, got "
                        f"{len(record.positives)} and {len(record.negatives)}")
    if not record.concept_np.strip():
        problems.append("empty concept NP")
    scene, tid = record.scene, record.target_id
    try:
        target = scene.by_id(tid)
    except (KeyError, ValueError):
        return problems + [f"target {tid} not in scene"]
    for i in record.positives:
        if not i.semantics or not identifies(scene, i.semantics, tid):
            problems.append(f"positive does not single out the target: {i.text!r}")
        words = set(i.text.lower().replace("?", " ").split())
        if i.level == "complex" and target.shape in words:
            problems.append(f"complex positive names the shape: {i.text!r}")
        if i.level == "simple" and target.shape not in words:
            problems.append(f"simple positive lacks the shape noun: {i.text!r}")
    for i in record.negatives:
        if not i.semantics or all(satisfies(scene, target, p) for p in i.semantics):
            problems.append(f"negative is true of the target: {i.text!r}")
    return problems


def export_human_queue(samples: list[EngineSample], path) -> Path:
    """Write every HumanQueue sample, with its candidate and failure history, as JSONL."""
    return write_jsonl(path, (s.to_dict() for s in samples if s.status == HUMAN_QUEUE))


def import_corrections(samples: list[EngineSample], path) -> tuple[list[EngineSample], list[dict]]:
    """Apply a corrections file to ``samples``.

    Each line carries ``sample_id`` and either ``"discard": true`` or a
    corrected ``record``. Corrected records are revalidated against the
    scene graph; failures are returned as ``{sample_id, reason}`` and leave
    the sample queued.
    """
    by_id = {s.sample_id: s for s in samples}
    rejected = []
    for row in read_jsonl(path):
        sid = row.get("sample_id")
        s = by_id.get(sid)
        if s is None or s.status != HUMAN_QUEUE:
            rejected.append({"sample_id": sid, "reason": "no such queued sample"})
            continue
        if row.get("discard"):
            s.status = DISCARDED
            continue
        try:
            rec = DatasetRecord.from_dict(row["record"])
        except (KeyError, TypeError, ValueError) as e:
            rejected.append({"sample_id": sid, "reason": f"malformed record: {e}"})
            continue
        if dumps(rec.scene.to_dict()) != dumps(s.scene.to_dict()) or rec.target_id != s.target_id:
            rejected.append({"sample_id": sid, "reason": "record describes a different scene or target"})
            continue
        problems = validate_record(rec)
        if problems:
            rejected.append({"sample_id": sid, "reason": "; ".join(problems)})
            continue
        s.record, s.status = rec, ACCEPTED
    return samples, rejected
