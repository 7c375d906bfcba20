"""Command-line entry point.

Every command writes ``manifest.json`` into its output directory. The
manifest holds the exact argument vector, the working directory and the
sha256 of every file the command produced, so ``pislab replay`` can run it
again and report whether the bytes match.

Exit codes: 0 success, 1 usage error, 2 data or contract error, 3 external
agent failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from collections import Counter
from pathlib import Path

from . import __version__
from .autodiff import CheckpointError, file_digest
from .engine import (
    AgentError,
    EngineSample,
    engine_stats,
    export_human_queue,
    import_corrections,
    make_agent,
    parse_agents,
    run_loop,
    sample_from_record,
)
from .io import dumps, read_dataset, read_jsonl, render_overlay, write_dataset, write_jsonl, write_pnm
from .metrics import evaluate_model, evaluate_np_baseline, format_report
from .model import PisModel
from .scenes import SceneConfig, make_record, object_masks, render
from .trainer import (
    Curriculum,
    StageOrderError,
    TrainingData,
    load_state,
    new_state,
    run_stage,
)

log = logging.getLogger("pislab")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_AGENT = 0, 1, 2, 3
LEVELS = ("concept", "simple", "complex")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- manifest --------------------------------------------------------------------

def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def output_hashes(out: Path) -> dict[str, str]:
    return {str(p.relative_to(out)): _sha(p) for p in sorted(out.rglob("*"))
            if p.is_file() and p.name != "manifest.json"}


def write_manifest(out: Path, argv: list[str], args: argparse.Namespace, inputs: dict[str, str]) -> dict:
    config = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    outputs = output_hashes(out)
    manifest = {
        "tool_version": __version__,
        "command": argv,
        "cwd": os.getcwd(),
        "seed": getattr(args, "seed", None),
        "config_hash": hashlib.sha256(dumps(config).encode()).hexdigest(),
        "inputs": inputs,
        "checkpoints": {k: v for k, v in outputs.items() if k.endswith(".ckpt")},
        "outputs": outputs,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _data_file(path: str) -> Path:
    p = Path(path)
    return p / "dataset.jsonl" if p.is_dir() else p


def _load_records(path: str):
    f = _data_file(path)
    if not f.exists():
        raise FileNotFoundError(f"no dataset at {f}")
    records = read_dataset(f)
    if not records:
        raise ValueError(f"{f} holds no records")
    return records, {str(f): file_digest(f)}


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands --------------------------------------------------------------------

def cmd_datagen(args) -> tuple[int, dict]:
    if args.count <= 0:
        raise UsageError("--count must be positive")
    out = _out(args)
    cfg = SceneConfig(num_objects=args.objects, ensure_duplicate_concepts=args.duplicates)
    records = []
    for i in range(args.count):
        rec = make_record(args.seed * 1_000_003 + i, cfg)
        image = render(rec.scene)
        rec.image_path = f"images/{i:05d}.ppm"
        rec.mask_path = f"masks/{i:05d}.pgm"
        write_pnm(out / rec.image_path, image)
        write_pnm(out / rec.mask_path, object_masks(rec.scene)[rec.target_id])
        records.append(rec)
    write_dataset(out / "dataset.jsonl", records)
    counts = Counter()
    for r in records:
        for i in r.positives + r.negatives:
            counts[(i.level, i.form, i.polarity)] += 1
    print(f"records={len(records)} positives={sum(len(r.positives) for r in records)} "
          f"negatives={sum(len(r.negatives) for r in records)} concept_nps={len(records)}")
    for (level, form, pol), n in sorted(counts.items()):
        print(f"  {level:8s} {form:12s} {pol:8s} {n}")
    return EXIT_OK, {}


def cmd_engine(args) -> tuple[int, dict]:
    records, inputs = _load_records(args.data)
    specs = parse_agents(args.agents)
    annotator, inspector = make_agent(specs[0]), make_agent(specs[1])
    out = _out(args)
    samples = [sample_from_record(i, r, args.seed) for i, r in enumerate(records)]
    for s in samples:
        run_loop(s, annotator, inspector, args.max_rounds)
    _write_engine_outputs(out, samples)
    stats = engine_stats(samples)
    print(stats.summary())
    failures = sum(1 for s in samples for h in s.history if "error" in h)
    if failures:
        log.error("%d agent calls failed; affected samples were queued", failures)
        return EXIT_AGENT, inputs
    return EXIT_OK, inputs


def _write_engine_outputs(out: Path, samples: list[EngineSample]) -> None:
    write_jsonl(out / "samples.jsonl", (s.to_dict() for s in samples))
    write_dataset(out / "dataset.jsonl", [s.record for s in samples if s.status == "Accepted"])
    export_human_queue(samples, out / "human_queue.jsonl")
    stats = engine_stats(samples)
    (out / "stats.json").write_text(dumps({
        "total": stats.total, "accepted": stats.accepted, "queued": stats.queued,
        "discarded": stats.discarded, "rounds": {str(k): v for k, v in sorted(stats.rounds.items())},
    }) + "\n")


def cmd_corrections(args) -> tuple[int, dict]:
    state = Path(args.state)
    samples = [EngineSample.from_dict(d) for d in read_jsonl(state / "samples.jsonl")]
    samples, rejected = import_corrections(samples, args.file)
    out = _out(args)
    _write_engine_outputs(out, samples)
    write_jsonl(out / "rejected.jsonl", rejected)
    print(engine_stats(samples).summary() + f" rejected_imports={len(rejected)}")
    for r in rejected:
        print(f"  sample {r['sample_id']}: {r['reason']}")
    inputs = {str(state / "samples.jsonl"): file_digest(state / "samples.jsonl"),
              str(args.file): file_digest(args.file)}
    return (EXIT_DATA if rejected else EXIT_OK), inputs


def _steps(text: str) -> tuple[int, int, int, int]:
    try:
        steps = tuple(int(s) for s in text.split(","))
    except ValueError:
        raise UsageError(f"--steps expects four integers, got {text!r}") from None
    if len(steps) != 4 or min(steps) < 0:
        raise UsageError(f"--steps expects four non-negative integers, got {text!r}")
    return steps


def cmd_train(args) -> tuple[int, dict]:
    records, inputs = _load_records(args.data)
    data = TrainingData(records)
    cur = Curriculum(steps=_steps(args.steps), learning_rate=args.lr, batch_size=args.batch_size,
                     seed=args.seed, skip_stage1=args.skip_stage1, skip_stage2=args.skip_stage2,
                     align=False if args.no_align else None, hard=False if args.no_hard else None,
                     train_s_in_stage2=args.stage2_train_s)
    if args.ckpt_in:
        state = load_state(args.ckpt_in)
        inputs[args.ckpt_in] = file_digest(args.ckpt_in)
    elif args.stage in ("all", "0"):
        state = new_state(args.seed)
    else:
        raise StageOrderError(f"stage {args.stage} needs --ckpt-in from the previous stage")
    stages = cur.stages() if args.stage == "all" else [int(args.stage)]
    out = _out(args)
    for stage in stages:
        run_stage(cur.stage_config(stage), data, state, out, cur.skip_stage1, cur.skip_stage2)
        final = f"{state.log[-1][-1]:.6f}" if cur.steps[stage] else "n/a"
        print(f"stage {stage}: steps={cur.steps[stage]} final_l_train={final}")
    return EXIT_OK, inputs


def _model(path: str) -> PisModel:
    return load_state(path).model


def _levels(text: str) -> list[str]:
    levels = [s.strip() for s in text.split(",") if s.strip()]
    bad = [lv for lv in levels if lv not in LEVELS]
    if bad or not levels:
        raise UsageError(f"unknown levels {bad or text!r}; choose from {', '.join(LEVELS)}")
    return levels


def _print_table(rows: list[list]) -> None:
    print(f"{'level':8s} {'n':>6s} {'gIoU':>6s} {'P@50':>6s}  model")
    for level, n, giou, p50, tag in rows:
        print(f"{level:8s} {n:>6d} {giou:>6s} {p50:>6s}  {tag}")


def cmd_eval(args) -> tuple[int, dict]:
    records, inputs = _load_records(args.data)
    inputs[args.ckpt] = file_digest(args.ckpt)
    model = _model(args.ckpt)
    data = TrainingData(records)
    rows = [evaluate_model(model, data, lv).row(args.tag) for lv in _levels(args.levels)]
    out = _out(args)
    (out / "report.csv").write_text(format_report(rows))
    _print_table(rows)
    return EXIT_OK, inputs


def cmd_compare(args) -> tuple[int, dict]:
    records, inputs = _load_records(args.data)
    data = TrainingData(records)
    levels = _levels(args.levels)
    rows = []
    first = None
    for item in args.ckpt:
        tag, sep, path = item.partition("=")
        if not sep:
            tag, path = Path(item).stem, item
        inputs[path] = file_digest(path)
        model = _model(path)
        first = first or model
        rows += [evaluate_model(model, data, lv).row(tag) for lv in levels]
    if args.baseline == "np-collapse":
        rows += [evaluate_np_baseline(first, data, lv).row("np-collapse") for lv in levels]
    out = _out(args)
    (out / "compare.csv").write_text(format_report(rows))
    _print_table(rows)
    return EXIT_OK, inputs


def cmd_overlay(args) -> tuple[int, dict]:
    records, inputs = _load_records(args.data)
    if not 0 <= args.index < len(records):
        raise UsageError(f"--index must lie in [0, {len(records)})")
    rec = records[args.index]
    image = render(rec.scene)
    if args.ckpt:
        inputs[args.ckpt] = file_digest(args.ckpt)
        model = _model(args.ckpt)
        if args.level == "concept":
            text = rec.concept_np
        else:
            choices = rec.instructions(args.level)
            text = choices[args.instruction % len(choices)].text
        mask = model.predict(image[None], [text], args.level)[0] >= 0.5
        print(f"prompt: {text}")
    else:
        mask = object_masks(rec.scene)[rec.target_id]
    out = _out(args)
    path = render_overlay(image, mask, out / f"overlay_{args.index:05d}.ppm")
    print(path)
    return EXIT_OK, inputs


def cmd_logcols(args) -> tuple[int, dict]:
    """CSV training log -> whitespace-separated columns for gnuplot."""
    lines = Path(args.log).read_text().splitlines()
    if not lines:
        raise ValueError(f"{args.log} is empty")
    body = ["# " + " ".join(lines[0].split(","))] + [" ".join(ln.split(",")) for ln in lines[1:]]
    out = _out(args)
    (out / (Path(args.log).stem + ".dat")).write_text("\n".join(body) + "\n")
    return EXIT_OK, {args.log: file_digest(args.log)}


def cmd_replay(args) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    argv = list(manifest["command"])
    if args.out:
        argv = _replace_out(argv, args.out)
    prev = os.getcwd()
    os.chdir(manifest.get("cwd", prev))
    try:
        code = main(argv)
        out = Path(_find_out(argv))
        fresh = output_hashes(out)
    finally:
        os.chdir(prev)
    same = fresh == manifest["outputs"]
    diff = sorted(k for k in set(fresh) | set(manifest["outputs"])
                  if fresh.get(k) != manifest["outputs"].get(k))
    print(f"replay exit={code} identical={'yes' if same else 'no'} files={len(fresh)}")
    for k in diff:
        print(f"  differs: {k}")
    if code != EXIT_OK:
        return code
    return EXIT_OK if same else EXIT_DATA


def _find_out(argv: list[str]) -> str:
    for i, a in enumerate(argv):
        if a == "--out":
            return argv[i + 1]
        if a.startswith("--out="):
            return a.split("=", 1)[1]
    raise UsageError("manifest command has no --out")


def _replace_out(argv: list[str], new: str) -> list[str]:
    out = list(argv)
    for i, a in enumerate(out):
        if a == "--out":
            out[i + 1] = str(Path(new).resolve())
            return out
        if a.startswith("--out="):
            out[i] = "--out=" + str(Path(new).resolve())
            return out
    raise UsageError("manifest command has no --out")


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pislab", description="Instruction segmentation lab on synthetic scenes.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        return sp

    sp = command("datagen", cmd_datagen, "generate scenes, masks and instruction records")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--objects", type=int, default=5)
    sp.add_argument("--duplicates", action="store_true", help="force two objects to share shape and colour")
    sp.add_argument("--out", required=True)

    sp = command("engine", cmd_engine, "run the annotate/inspect loop over a dataset")
    sp.add_argument("--data", required=True)
    sp.add_argument("--agents", default="oracle", help="SPEC or ANNOTATOR,INSPECTOR; SPEC is "
                    "oracle, noisy:EPS or remote:URL")
    sp.add_argument("--max-rounds", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = command("corrections", cmd_corrections, "apply human corrections to an engine run")
    sp.add_argument("--state", required=True, help="engine output directory")
    sp.add_argument("--file", required=True, help="JSONL with discard markers or corrected records")
    sp.add_argument("--out", required=True)

    sp = command("train", cmd_train, "run one curriculum stage or the whole chain")
    sp.add_argument("--data", required=True)
    sp.add_argument("--stage", choices=["0", "1", "2", "3", "all"], default="all")
    sp.add_argument("--ckpt-in")
    sp.add_argument("--steps", default="600,500,500,400", help="steps for stages 0,1,2,3")
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--batch-size", type=int, default=16)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--skip-stage1", action="store_true")
    sp.add_argument("--skip-stage2", action="store_true")
    sp.add_argument("--no-align", action="store_true")
    sp.add_argument("--no-hard", action="store_true")
    sp.add_argument("--stage2-train-s", action="store_true")
    sp.add_argument("--out", required=True)

    sp = command("eval", cmd_eval, "score a checkpoint per instruction level")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--levels", default=",".join(LEVELS))
    sp.add_argument("--tag", default="model")
    sp.add_argument("--out", required=True)

    sp = command("compare", cmd_compare, "side-by-side table of several checkpoints")
    sp.add_argument("--ckpt", action="append", required=True, help="TAG=PATH, repeatable")
    sp.add_argument("--data", required=True)
    sp.add_argument("--levels", default=",".join(LEVELS))
    sp.add_argument("--baseline", choices=["np-collapse"])
    sp.add_argument("--out", required=True)

    sp = command("overlay", cmd_overlay, "write a mask overlay as PPM")
    sp.add_argument("--data", required=True)
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--ckpt", help="overlay the predicted mask instead of the ground truth")
    sp.add_argument("--level", choices=LEVELS, default="simple")
    sp.add_argument("--instruction", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = command("logcols", cmd_logcols, "convert a training log CSV to gnuplot columns")
    sp.add_argument("log")
    sp.add_argument("--out", required=True)

    sp = command("replay", None, "re-run a command from its manifest and compare outputs")
    sp.add_argument("manifest")
    sp.add_argument("--out", help="write into this directory instead of the original")
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "replay":
            return cmd_replay(args)
        code, inputs = args.func(args)
        write_manifest(Path(args.out), argv, args, inputs)
        return code
    except UsageError as e:
        print(f"pislab: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except AgentError as e:
        print(f"pislab: agent failure: {e}", file=sys.stderr)
        return EXIT_AGENT
    except (ValueError, KeyError, OSError, CheckpointError, StageOrderError) as e:
        print(f"pislab: error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
