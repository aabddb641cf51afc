"""Command-line entry point: ``colld <subcommand> ...``.

Query subcommands print one JSON document to stdout. Exit codes: 0 success,
1 numeric failure (or a failed gradient check), 2 bad configuration or usage.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, indent=None, sort_keys=False)
    sys.stdout.write("\n")


def cmd_map(args) -> int:
    from .mapping import layer_map
    lmap = layer_map(args.student, args.teacher)
    _emit({"student_layers": lmap.student_layers, "teacher_layers": lmap.teacher_layers,
           "pairs": [list(p) for p in lmap.pairs]})
    return 0


def cmd_mask_stats(args) -> int:
    from .masking import empirical_coverage, expected_coverage
    from .rng import stream
    utterances = max(1, math.ceil(args.n / args.frames))
    emp = empirical_coverage(args.frames, args.p, args.span, range(utterances),
                             rng_factory=lambda i: stream(args.seed, "mask", i))
    _emit({"p": args.p, "span": args.span, "n": utterances * args.frames, "empirical_coverage": emp,
           "expected_coverage": expected_coverage(args.p, args.span)})
    return 0


def cmd_cost(args) -> int:
    from .cost import FRAME_RATE_HZ, estimate_macs, param_count
    from .encoder import preset
    overrides = {k: v for k, v in (("layers", args.layers), ("dim", args.dim), ("ffn", args.ffn)) if v is not None}
    config = preset(args.preset, **overrides)
    macs = estimate_macs(config, args.seconds)
    _emit({"preset": args.preset, "config": config.to_dict(), "seconds": args.seconds,
           "frames": int(round(args.seconds * FRAME_RATE_HZ)), "param_count": param_count(config),
           "macs": macs, "gmacs": macs / 1e9})
    return 0


def cmd_grad_check(args) -> int:
    from .gradcheck import case_names, run_case
    names = args.case or case_names()
    results = {}
    for name in names:
        worst, failed_seeds = 0.0, []
        for seed in range(args.seeds):
            report = run_case(name, seed, tolerance=args.tolerance)
            worst = max(worst, report.max_error)
            if not report.passed:
                failed_seeds.append(seed)
        results[name] = {"max_error": worst, "seeds": args.seeds, "failed_seeds": failed_seeds,
                         "passed": not failed_seeds}
    ok = all(r["passed"] for r in results.values())
    _emit({"tolerance": args.tolerance, "cases": results, "passed": ok})
    return 0 if ok else 1


def cmd_synth_data(args) -> int:
    from .features import Manifest, ManifestEntry, synth_features, write_features, write_manifest
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([args.seed, 17])
    entries = []
    for i in range(args.num_utterances):
        uid = f"utt-{i:05d}"
        frames = int(rng.integers(args.min_frames, args.max_frames + 1))
        seq, labels = synth_features(args.seed * 1_000_003 + i, frames, args.dim, args.num_classes,
                                     class_seed=args.class_seed, class_scale=args.class_scale, noise=args.noise,
                                     smoothing=args.smoothing, min_segment=args.min_segment,
                                     max_segment=args.max_segment)
        write_features(seq, out / f"{uid}.clld")
        np.save(out / f"{uid}.labels.npy", labels.astype(np.int32))
        entries.append(ManifestEntry(uid, f"{uid}.clld", seq.frames, seq.dim, f"{uid}.labels.npy"))
    write_manifest(Manifest(entries, root=str(out)), out / "manifest.jsonl")
    _emit({"manifest": str(out / "manifest.jsonl"), "num_utterances": len(entries),
           "frames": int(sum(e.frames for e in entries))})
    return 0


def _probe_encoder(args):
    from .checkpoint import load_checkpoint
    from .encoder import EncoderConfig, build_encoder, encoder_from_state, preset
    from .exceptions import ConfigurationError
    if args.checkpoint:
        header, tensors = load_checkpoint(args.checkpoint)
        config = EncoderConfig.from_dict(header["config"])
        prefix = "student/" if header.get("kind") == "train_state" else ""
        return encoder_from_state(config, tensors, header.get("seed", 0), prefix=prefix)
    if args.preset:
        overrides = {"layers": args.layers} if args.layers else {}
        return build_encoder(preset(args.preset, **overrides), seed=args.init_seed)
    raise ConfigurationError("give --checkpoint or --preset", key="--checkpoint")


def cmd_probe(args) -> int:
    from .config import load_run_config
    from .data import ManifestCorpus
    from .exceptions import ConfigurationError
    from .features import read_manifest
    from .probe import extract_frozen, train_linear_probe
    if args.manifest:
        corpus = ManifestCorpus(read_manifest(args.manifest), stack_factor=args.stack_factor)
    elif args.config:
        corpus = load_run_config(args.config).build_corpus()
    else:
        raise ConfigurationError("give --manifest or --config for probe data", key="--manifest")
    encoder = _probe_encoder(args)
    layer = args.layer or encoder.config.layers
    reps, labels = extract_frozen(encoder, corpus, layer)
    if any(lab is None for lab in labels):
        raise ConfigurationError("probe data has utterances without labels", key="labels")
    result = train_linear_probe(reps, labels, seed=args.seed, layer=layer, test_fraction=args.test_fraction)
    _emit(result.to_dict())
    return 0


def cmd_distill(args) -> int:
    from .config import load_run_config
    from .distiller import distill, load_train_state
    from .exceptions import ConfigurationError
    run = load_run_config(args.config)
    run_dir = Path(args.output_dir or run.resolve_path(run.output_dir))
    metrics_path = run_dir / "metrics.jsonl"
    corpus = run.build_corpus()
    teacher = run.build_encoder("teacher")
    state = None
    if args.resume:
        state = load_train_state(args.resume)
        if state.cfg != run.distill or state.root_seed != run.seed:
            raise ConfigurationError("checkpoint was written under a different distill config or seed",
                                     key="--resume")
        student = state.student
        # drop records past the checkpoint so the log matches an uninterrupted run
        if metrics_path.exists():
            kept = [ln for ln in metrics_path.read_text().splitlines() if json.loads(ln)["step"] <= state.step]
            metrics_path.write_text("".join(ln + "\n" for ln in kept))
    else:
        if metrics_path.exists() and metrics_path.stat().st_size:
            raise ConfigurationError(f"{metrics_path} already exists; use a fresh output_dir or --resume",
                                     key="output_dir")
        student = run.build_encoder("student")
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(run.to_dict(), indent=2) + "\n")
    (run_dir / "run.json").write_text(json.dumps({
        "tool_version": __version__, "python": platform.python_version(), "numpy": np.__version__,
        "argv": args.argv}, indent=2) + "\n")
    remaining = run.steps - (state.step if state else 0)
    if remaining < 0:
        raise ConfigurationError(f"checkpoint is at step {state.step}, past steps={run.steps}", key="steps")
    state = distill(run.distill, teacher, student, corpus, remaining, root_seed=run.seed, run_dir=run_dir,
                    state=state)
    last = state.history[-1] if state.history else None
    _emit({"run_dir": str(run_dir), "step": state.step, "final_loss": last["loss"] if last else None})
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="colld", description="Contrastive layer-to-layer distillation toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("distill", help="run distillation from a JSON config")
    d.add_argument("--config", required=True)
    d.add_argument("--output-dir", help="override the config's output_dir")
    d.add_argument("--resume", help="training checkpoint to continue from")
    d.set_defaults(func=cmd_distill)

    m = sub.add_parser("map", help="student-to-teacher layer assignment")
    m.add_argument("--student", type=int, required=True)
    m.add_argument("--teacher", type=int, required=True)
    m.set_defaults(func=cmd_map)

    ms = sub.add_parser("mask-stats", help="span-mask coverage, empirical vs closed form")
    ms.add_argument("--p", type=float, default=0.065)
    ms.add_argument("--span", type=int, default=10)
    ms.add_argument("--n", type=int, default=100_000, help="total frames to sample")
    ms.add_argument("--frames", type=int, default=1000, help="frames per sampled utterance")
    ms.add_argument("--seed", type=int, default=0)
    ms.set_defaults(func=cmd_mask_stats)

    c = sub.add_parser("cost", help="parameter count and forward MACs")
    c.add_argument("--preset", required=True)
    c.add_argument("--seconds", type=float, default=20.0)
    c.add_argument("--layers", type=int)
    c.add_argument("--dim", type=int)
    c.add_argument("--ffn", type=int)
    c.set_defaults(func=cmd_cost)

    pr = sub.add_parser("probe", help="frozen linear probe on encoder representations")
    pr.add_argument("--checkpoint", help="encoder or training checkpoint (student is used)")
    pr.add_argument("--preset", help="probe a randomly initialized encoder instead")
    pr.add_argument("--layers", type=int)
    pr.add_argument("--init-seed", type=int, default=0)
    pr.add_argument("--manifest", help="manifest.jsonl whose entries carry labels")
    pr.add_argument("--config", help="run config whose data block supplies the utterances")
    pr.add_argument("--stack-factor", type=int, default=2)
    pr.add_argument("--layer", type=int, help="block to probe (default: last)")
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--test-fraction", type=float, default=0.2)
    pr.set_defaults(func=cmd_probe)

    g = sub.add_parser("grad-check", help="finite-difference gradient checks")
    g.add_argument("--case", action="append", help="case name (repeatable; default all)")
    g.add_argument("--seeds", type=int, default=10)
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.set_defaults(func=cmd_grad_check)

    s = sub.add_parser("synth-data", help="write synthetic feature files and a manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--num-utterances", type=int, default=32)
    s.add_argument("--min-frames", type=int, default=320)
    s.add_argument("--max-frames", type=int, default=480)
    s.add_argument("--dim", type=int, default=80)
    s.add_argument("--num-classes", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--class-seed", type=int, default=0)
    s.add_argument("--class-scale", type=float, default=1.0)
    s.add_argument("--noise", type=float, default=1.0)
    s.add_argument("--smoothing", type=int, default=3)
    s.add_argument("--min-segment", type=int, default=20)
    s.add_argument("--max-segment", type=int, default=60)
    s.set_defaults(func=cmd_synth_data)
    return p


def run(argv=None) -> int:
    from .exceptions import ConfigurationError, FormatError, NumericError, UsageError
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = list(argv) if argv is not None else sys.argv[1:]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"colld: numeric error: {exc}", file=sys.stderr)
        return 1
    except (ConfigurationError, FormatError, UsageError) as exc:
        print(f"colld: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"colld: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
