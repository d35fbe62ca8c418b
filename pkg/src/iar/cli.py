"""``iar`` command line: tokenize, fuzz-invariance, synth, train, sample, eval.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from .config import ConfigError, RunConfig
from .molio import ALL_TEMPLATES, DEFAULT_TEMPLATES, XYZError, read_xyz_file, synth_dataset, write_xyz_file

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("iar")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_tokenize(args) -> int:
    from .canon import tokenize

    seq = tokenize(read_xyz_file(args.input))
    if seq.fallback:
        print("warning: no valid anchor atom; axis signs set by the fallback rule", file=sys.stderr)
    if args.json:
        text = json.dumps(
            [{"charge": t, "x": float(c[0]), "y": float(c[1]), "z": float(c[2])} for t, c in seq.tokens()],
            indent=2,
        )
    else:
        text = "\n".join(f"{t} {c[0]:.6f} {c[1]:.6f} {c[2]:.6f}" for t, c in seq.tokens())
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


def cmd_fuzz(args) -> int:
    from .canon import fuzz_invariance

    report = fuzz_invariance(read_xyz_file(args.input), args.trials, args.seed)
    if report.skipped:
        print(f"skipped: {report.skipped}; fallback frame in use, invariance holds only up to that convention")
        return EXIT_OK
    ok = report.passed(args.tol)
    print(
        f"{'PASS' if ok else 'FAIL'} trials={report.trials} "
        f"max_deviation={report.max_deviation:.3e} order_mismatches={report.order_mismatches}"
    )
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mols = synth_dataset(args.seed, args.count, args.templates, args.jitter)
    for i, m in enumerate(mols):
        write_xyz_file(out / f"mol_{i:04d}.xyz", m)
    print(f"wrote {len(mols)} molecules to {out}")
    return EXIT_OK


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig.from_dict({})
    return cfg


def cmd_train(args) -> int:
    from .pipeline import plot_trace, train_run, write_trace

    cfg = _load_config(args)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result, seqs = train_run(cfg)
    write_checkpoint(out / "model.iar", result.model, cfg.schedule(), cfg.guidance())
    write_trace(out / "loss.csv", result.trace)
    if result.trace:
        plot_trace(out / "loss.png", result.trace)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    first, last = result.trace[0] if result.trace else None, result.trace[-1] if result.trace else None
    print(f"trained on {len(seqs)} molecules for {cfg.steps} steps -> {out / 'model.iar'}")
    if first and last:
        print(f"loss {first[1] + first[2]:.4f} -> {last[1] + last[2]:.4f}")
    return EXIT_OK


def cmd_sample(args) -> int:
    from .pipeline import generate, write_samples

    cfg = _load_config(args)
    ckpt = read_checkpoint(args.checkpoint)
    n = args.n if args.n is not None else cfg.n_samples
    class_id = args.class_id if args.class_id is not None else cfg.class_id
    if class_id is not None and class_id not in ckpt.model.cfg.class_ids:
        raise ConfigError(f"class id {class_id} is not known to this checkpoint")
    scale = args.scale if args.scale is not None else cfg.guidance_scale
    if scale < 0:
        raise UsageError("--scale must be >= 0")
    temperature = args.temperature if args.temperature is not None else cfg.temperature
    if temperature < 0:
        raise UsageError("--temperature must be >= 0")
    mols = generate(ckpt.model, n, cfg.seed, class_id, scale, ckpt.schedule, cfg.max_len, temperature)
    out = Path(args.out or Path(cfg.out_dir) / "samples")
    write_samples(out, mols, cfg.seed)
    print(f"wrote {len(mols)} samples to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import evaluate
    from .pipeline import read_xyz_dir

    report = evaluate(read_xyz_dir(args.samples), args.target_class)
    out = Path(args.json) if args.json else Path(args.samples) / "report.json"
    out.write_text(report.to_json() + "\n")
    print(report.table())
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="iar", description="Inertial-frame autoregressive 3D molecule generation.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("tokenize", help="print the canonical token sequence of an XYZ file")
    s.add_argument("input", help="input .xyz file")
    s.add_argument("--json", action="store_true", help="emit a JSON array of {charge, x, y, z}")
    s.add_argument("--out", help="write to this file instead of stdout")
    s.set_defaults(func=cmd_tokenize)

    s = sub.add_parser("fuzz-invariance", help="check tokenization under random rigid motions and permutations")
    s.add_argument("input", help="input .xyz file")
    s.add_argument("--trials", type=_positive_int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=1e-6, help="max coordinate deviation in Angstrom")
    s.set_defaults(func=cmd_fuzz)

    s = sub.add_parser("synth", help="write a jittered synthetic dataset as XYZ files")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--count", type=_positive_int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--jitter", type=float, default=0.02)
    s.add_argument("--templates", nargs="+", choices=ALL_TEMPLATES, default=list(DEFAULT_TEMPLATES))
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model; writes model.iar, loss.csv, loss.png")
    s.add_argument("--config", help="JSON run config (defaults when omitted)")
    s.add_argument("--out", help="output directory (default: out_dir from the config)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="sample molecules from a checkpoint into sample_<seed>_<idx>.xyz")
    s.add_argument("--config", help="JSON run config (seed, n_samples, max_len, ...)")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", help="output directory (default: <out_dir>/samples)")
    s.add_argument("--n", type=_positive_int, help="number of samples")
    s.add_argument("--class-id", type=int, help="target class id (omit for unconditional)")
    s.add_argument("--scale", type=float, help="guidance scale s")
    s.add_argument("--temperature", type=float, help="type sampling temperature (0 is greedy)")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("eval", help="evaluate a directory of XYZ samples")
    s.add_argument("samples", help="directory of .xyz files")
    s.add_argument("--target-class", type=int, help="also report the hit rate for this class id")
    s.add_argument("--json", help="report path (default: <samples>/report.json)")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    from .armodel import DivergenceError
    from .metrics import UnknownClassError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"iar: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, FloatingPointError) as exc:
        print(f"iar: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except UnknownClassError as exc:
        print(f"iar: unknown class id {exc.args[0]}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, XYZError, ConfigError, CheckpointError, KeyError, ValueError) as exc:
        print(f"iar: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
