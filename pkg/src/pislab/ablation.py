"""Stage-3 ablations that share their common prefix.

The variants of one seed differ only from stage 3 on (or, for
``skip_stage2``, from stage 2 on). Stages are deterministic given the seed,
so training the shared prefix once and cloning the state gives exactly the
weights a separate ``run_curriculum`` call would produce.
"""

from __future__ import annotations

import logging
from dataclasses import replace

from .trainer import Curriculum, TrainingData, TrainState, new_state, run_stage

log = logging.getLogger(__name__)

VARIANTS = {
    "full": {},
    "no_align": {"align": False},
    "no_hard": {"hard": False},
    "skip_stage2": {"skip_stage2": True},
}


def clone_state(state: TrainState) -> TrainState:
    return TrainState(state.params.copy(), state.cfg, list(state.completed), state.step, list(state.log))


def run_variants(base: Curriculum, data: TrainingData, variants=None) -> dict[str, TrainState]:
    """Train every variant in ``variants`` (name -> Curriculum overrides).

    Also returns the stage-0 state under the key ``"stage0"``.
    """
    variants = VARIANTS if variants is None else variants
    for name, over in variants.items():
        if set(over) - {"align", "hard", "skip_stage2"}:
            raise ValueError(f"variant {name} changes more than stage 3 or the stage-2 skip")
    state = new_state(base.seed)
    out = {}
    run_stage(base.stage_config(0), data, state)
    out["stage0"] = clone_state(state)
    run_stage(base.stage_config(1), data, state)
    after1 = clone_state(state)
    run_stage(base.stage_config(2), data, state)
    for name, over in variants.items():
        cur = replace(base, **over)
        s = clone_state(after1 if cur.skip_stage2 else state)
        log.info("variant %s: stage 3", name)
        run_stage(cur.stage_config(3), data, s, skip_stage2=cur.skip_stage2)
        out[name] = s
    return out
