"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 self-test failure.
A ``--config FILE`` of ``key = value`` lines supplies defaults; flags win.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .checkpoint import CorruptCheckpoint, MissingCheckpoint, Model, load_model, save_model
from .geometry import Scenario
from .global_register import TrainConfig, train_stage1, write_history_csv
from .harness import (DEFAULT_ANGLES, FORMATS, ConfigInvalid, ExperimentConfig, UnknownFormat,
                      report_format, report_from_json, run_experiment, selftest)
from .local_register import FineTrainConfig, train_stage2
from .shapes import ShapeModel, generate_dataset

EXIT_OK, EXIT_CONFIG, EXIT_SELFTEST = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _angles(text):
    try:
        vals = tuple(float(x) for x in str(text).replace(" ", "").split(",") if x)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad angle list {text!r}") from None
    return vals


def _bool(text):
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def read_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigInvalid(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="equireg", description="Coarse-to-fine equivariant point-cloud registration.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p.subcommands = sub.choices

    def common(sp):
        sp.add_argument("--config", help="key = value file; explicit flags override it")
        sp.add_argument("--seed", type=int, default=0)
        return sp

    g = common(sub.add_parser("gen-data", help="write procedural shapes as text files"))
    g.add_argument("--count", type=int, default=20)
    g.add_argument("--split", choices=("train", "test"), default="train")
    g.add_argument("--out", required=True, help="output directory")

    def data_args(sp):
        sp.add_argument("--data", help="directory of shape files (default: generate --count shapes)")
        sp.add_argument("--count", type=int, default=20)
        sp.add_argument("--steps", type=int, default=200)
        sp.add_argument("--lr", type=float)  # per-stage default set below
        sp.add_argument("--scenario", choices=[s.value for s in Scenario], default="noisy")
        sp.add_argument("--max-angle", type=float, default=180.0)
        sp.add_argument("--max-trans", type=float, default=0.5)
        sp.add_argument("--save", required=True, help="checkpoint to write")
        sp.add_argument("--out", help="training log CSV")

    t1 = common(sub.add_parser("train-coarse", help="stage 1: extractor + occupancy decoder"))
    data_args(t1)
    t1.set_defaults(lr=TrainConfig.lr)
    t1.add_argument("--lam", type=float, default=0.5)
    t1.add_argument("--checkpoint", help="optional starting weights")

    t2 = common(sub.add_parser("train-fine", help="stage 2: fine register, extractor frozen"))
    data_args(t2)
    t2.set_defaults(lr=FineTrainConfig.lr)
    t2.add_argument("--checkpoint", required=True, help="stage-1 checkpoint")

    e = common(sub.add_parser("eval", help="recall sweep over angle ranges"))
    e.add_argument("--scenario", choices=[s.value for s in Scenario], default="clean")
    e.add_argument("--max-angle", type=_angles, default=DEFAULT_ANGLES,
                   help="comma-separated angle maxima in degrees")
    e.add_argument("--max-trans", type=float, default=0.5)
    e.add_argument("--instances", type=int, default=200)
    e.add_argument("--stage", choices=("coarse", "full"), default="coarse")
    e.add_argument("--fallback-scorer", type=_bool, nargs="?", const=True, default=False)
    e.add_argument("--checkpoint")
    e.add_argument("--crop", choices=("fps", "halfspace"), default="fps")
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--timing", type=_bool, nargs="?", const=True, default=False,
                   help="include wall-clock per instance (breaks byte-identical reports)")
    e.add_argument("--format", choices=FORMATS, default="table")
    e.add_argument("--out")

    s = common(sub.add_parser("selftest", help="run the property suites"))
    s.add_argument("--checkpoint", help="also verify this checkpoint file")

    r = common(sub.add_parser("report", help="re-format a JSON report"))
    r.add_argument("--in", dest="input", required=True)
    r.add_argument("--format", default="table")
    r.add_argument("--out")
    return p


def _parse(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        values = read_config(args.config)
        sp = parser.subcommands[args.command]
        dests = {a.dest for a in sp._actions}
        unknown = sorted(set(values) - dests)
        if unknown:
            raise ConfigInvalid(f"unknown config keys: {', '.join(unknown)}")
        sp.set_defaults(**values)
        args = parser.parse_args(argv)
    return args


def _emit(text, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _dataset(args):
    if args.data:
        files = sorted(Path(args.data).glob("*.txt"))
        if not files:
            raise ConfigInvalid(f"no shape files in {args.data}")
        return [ShapeModel.from_text(f.read_text()) for f in files]
    return generate_dataset(args.count, args.seed, "train")


def cmd_gen_data(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, shape in enumerate(generate_dataset(args.count, args.seed, args.split)):
        (out / f"shape_{i:04d}.txt").write_text(shape.to_text())
    return EXIT_OK


def cmd_train_coarse(args):
    cfg = TrainConfig(lr=args.lr, steps=args.steps, lam=args.lam, scenario=args.scenario,
                      max_angle_deg=args.max_angle, max_translation=args.max_trans, seed=args.seed)
    start = load_model(args.checkpoint) if args.checkpoint else Model()
    result = train_stage1(_dataset(args), cfg, start.net, start.decoder)
    save_model(args.save, Model(result.net, result.decoder, start.fine))
    if args.out:
        write_history_csv(args.out, result.history)
    return EXIT_OK


def cmd_train_fine(args):
    model = load_model(args.checkpoint)
    if model.net is None:
        raise ConfigInvalid(f"{args.checkpoint} holds no extractor weights")
    cfg = FineTrainConfig(lr=args.lr, steps=args.steps, scenario=args.scenario,
                          max_angle_deg=args.max_angle, max_translation=args.max_trans,
                          seed=args.seed)
    before = model.net.checksum()
    result = train_stage2(_dataset(args), model.net, cfg, model.fine)
    if model.net.checksum() != before:
        raise RuntimeError("extractor weights changed during stage 2")
    save_model(args.save, Model(model.net, model.decoder, result.weights))
    if args.out:
        write_history_csv(args.out, result.history)
    return EXIT_OK


def cmd_eval(args):
    cfg = ExperimentConfig(scenario=args.scenario, angles=args.max_angle,
                           max_translation=args.max_trans, instances=args.instances,
                           stage=args.stage, seed=args.seed, checkpoint=args.checkpoint,
                           fallback_scorer=args.fallback_scorer, crop_method=args.crop,
                           workers=args.workers)
    _emit(report_format(run_experiment(cfg), args.format, include_timing=args.timing), args.out)
    return EXIT_OK


def cmd_selftest(args):
    results = selftest(args.seed, args.checkpoint)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<13} {r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_SELFTEST


def cmd_report(args):
    report = report_from_json(Path(args.input).read_text())
    _emit(report_format(report, args.format), args.out)
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train-coarse": cmd_train_coarse,
            "train-fine": cmd_train_fine, "eval": cmd_eval, "selftest": cmd_selftest,
            "report": cmd_report}


def main(argv=None) -> int:
    try:
        try:
            args = _parse(argv)
        except SystemExit as exc:  # usage errors and --help
            return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except (ConfigInvalid, MissingCheckpoint, CorruptCheckpoint, UnknownFormat,
            FileNotFoundError, ValueError) as exc:
        print(f"equireg: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
