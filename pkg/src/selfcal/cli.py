"""``selfcal`` command line.

Subcommands follow an experiment's life cycle::

    selfcal simulate --config scenario.toml --out sim/
    selfcal calibrate --robot sim/robot_nominal.json --dataset sim/dataset.jsonl --kinds sc,so --out run/
    selfcal observability --robot run/robot_calibrated.json --dataset sim/dataset.jsonl --out run/
    selfcal evaluate --robot sim/robot_nominal.json --dataset sim/dataset.jsonl --split 0.8 --out run/
    selfcal campaign --robot sim/robot_nominal.json --dataset sim/dataset.jsonl --split 0.8 --out camp/

Exit codes: 0 success, 1 usage/config/data error, 2 degraded success (partial
simulated dataset, solver stopped on an iteration or damping limit, or
measurements excluded at the solution).  ``SELFCAL_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .estimator import SolverError, Termination
from .kinecore import ModelError
from .measurements import DatasetError, load_dataset, save_dataset
from .robotio import load_robot, save_robot
from .runner import (
    ConfigError,
    RunConfig,
    calibrate,
    evaluate,
    file_digest,
    observability_section,
    run_campaign,
    to_json,
    train_test,
)
from .simlab import ScenarioSpec, synthesize

log = logging.getLogger("selfcal")

OK, USER_ERROR, DEGRADED = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; here 2 means degraded success
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USER_ERROR, f"{self.prog}: error: {message}\n")


def _write(out: Path, name: str, doc) -> Path:
    path = out / name
    path.write_text(doc if isinstance(doc, str) else to_json(doc))
    log.info("wrote %s", path)
    return path


def _common(p: argparse.ArgumentParser, split_default=None) -> None:
    p.add_argument("--config", help="run configuration (TOML or JSON); flags override it")
    p.add_argument("--robot", help="robot description JSON")
    p.add_argument("--dataset", help="measurement dataset (.jsonl)")
    p.add_argument("--truth", help="ground-truth robot JSON, enables parameter-error fields")
    p.add_argument("--mask", nargs="+", metavar="PATTERN", help="free parameter slots (fnmatch patterns)")
    p.add_argument("--kinds", help="closure kinds to use, e.g. sc,so")
    p.add_argument("--split", type=float, default=split_default, help="train fraction, e.g. 0.8")
    p.add_argument("--split-mode", choices=("random", "workspace"))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--jacobian", choices=("forward", "central"))
    p.add_argument("--robust", metavar="huber:DELTA")
    p.add_argument("--max-iterations", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="selfcal", description="Kinematic calibration by chain closure.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="synthesize nominal/true robots and a noisy dataset")
    p.add_argument("--config", help="scenario file (TOML or JSON); defaults to the desk rig")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default=".")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("calibrate", help="estimate parameters on the (train part of the) dataset")
    _common(p)
    p = sub.add_parser("observability", help="singular-value analysis of the identification Jacobian")
    _common(p)
    p = sub.add_parser("evaluate", help="calibrate on a train split, score on the held-out part")
    _common(p, split_default=None)
    p.add_argument("--calibrated", help="use this calibrated robot instead of calibrating")
    p = sub.add_parser("campaign", help="compare kind sets at a matched measurement count")
    _common(p, split_default=None)
    p.add_argument("--jobs", type=int)
    p.add_argument("--total", type=int, help="training records per kind set")
    return parser


def run_config(args) -> RunConfig:
    doc = {}
    if getattr(args, "config", None):
        doc = RunConfig.load(args.config).__dict__.copy()
        doc["kinds"] = [k.value for k in doc["kinds"]]
    for name in ("robot", "dataset", "truth", "mask", "kinds", "split", "split_mode", "seed", "out", "jobs"):
        value = getattr(args, name, None)
        if value is not None:
            doc[name] = value
    solve = dict(doc.get("solve") or {})
    if getattr(args, "jacobian", None):
        solve["jacobian_mode"] = args.jacobian
    if getattr(args, "robust", None):
        solve["robust"] = args.robust
    if getattr(args, "max_iterations", None) is not None:
        solve["max_iterations"] = args.max_iterations
    doc["solve"] = solve
    return RunConfig.from_dict(doc)


def _inputs(cfg: RunConfig) -> dict:
    return {
        "config": cfg.to_dict(),
        "sha256": {k: file_digest(getattr(cfg, k)) for k in ("robot", "dataset", "truth")},
    }


def _load(cfg: RunConfig):
    cfg.check_paths()
    model = load_robot(cfg.robot)
    if cfg.mask:
        model = model.with_mask(cfg.mask)
    dataset = load_dataset(cfg.dataset, model).filter_kinds(cfg.kinds)
    if len(dataset) == 0:
        raise ConfigError(f"kinds: no measurements of kind(s) {[k.value for k in cfg.kinds]} in {cfg.dataset}")
    truth = load_robot(cfg.truth).with_mask(model.mask) if cfg.truth else None
    return model, dataset, truth


def _degraded(result) -> bool:
    return result.termination in (Termination.MAX_ITERATIONS, Termination.DAMPING_OVERFLOW) or result.n_excluded > 0


def cmd_simulate(args) -> int:
    spec = ScenarioSpec.load(args.config) if args.config else ScenarioSpec()
    if args.seed is not None:
        spec.seed = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    nominal, true, dataset, report = synthesize(spec, workers=max(1, args.jobs))
    save_robot(nominal, out / "robot_nominal.json")
    save_robot(true, out / "robot_true.json")
    save_dataset(dataset, out / "dataset.jsonl")
    _write(out, "provenance.json", {
        **dataset.provenance,
        "scenario": spec.to_dict(),
        "requested": report.requested,
        "generated": report.generated,
    })
    if report.partial:
        log.warning("partial dataset, shortfall per kind: %s", report.shortfall)
        return DEGRADED
    return OK


def cmd_calibrate(args) -> int:
    cfg = run_config(args)
    model, dataset, truth = _load(cfg)
    train, test = train_test(dataset, model, cfg.split, cfg.split_mode, cfg.seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    result, report = calibrate(model, train, cfg.solve_options(), truth)
    report["inputs"] = _inputs(cfg)
    report["n_train"], report["n_test"] = len(train), (len(test) if test is not None else 0)
    _write(out, "report.json", report)
    save_robot(result.model_opt, out / "robot_calibrated.json")
    print(f"cost {result.initial_cost:.6g} -> {result.final_cost:.6g} "
          f"after {result.iterations} iterations ({result.termination.value})")
    return DEGRADED if _degraded(result) else OK


def cmd_observability(args) -> int:
    cfg = run_config(args)
    model, dataset, _ = _load(cfg)
    train, _ = train_test(dataset, model, cfg.split, cfg.split_mode, cfg.seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    section = observability_section(model, train)
    _write(out, "observability.json", {"observability": section, "inputs": _inputs(cfg)})
    print(f"O1 {section['O1']:.6g}  O2 {section['O2']:.6g}  O3 {section['O3']:.6g}  O4 {section['O4']:.6g}  "
          f"unidentifiable {len(section['unidentifiable'])}")
    return OK


def cmd_evaluate(args) -> int:
    cfg = run_config(args)
    if cfg.split is None:
        cfg.split = 0.8
    model, dataset, truth = _load(cfg)
    train, test = train_test(dataset, model, cfg.split, cfg.split_mode, cfg.seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    status = OK
    if args.calibrated:
        calibrated = load_robot(args.calibrated).with_mask(model.mask)
        section = observability_section(calibrated, train)
    else:
        result, calib_report = calibrate(model, train, cfg.solve_options(), truth)
        calibrated = result.model_opt
        section = calib_report["observability"]
        save_robot(calibrated, out / "robot_calibrated.json")
        status = DEGRADED if _degraded(result) else OK
    report = evaluate(model, calibrated, train, test, truth)
    report["observability"] = section
    report["inputs"] = _inputs(cfg)
    _write(out, "evaluation.json", report)
    for kind, value in report["test"]["calibrated"].items():
        print(f"test {kind}: nominal {report['test']['nominal'][kind]:.6g} -> calibrated {value:.6g}")
    return status


def cmd_campaign(args) -> int:
    cfg = run_config(args)
    model, dataset, truth = _load(cfg)
    train, test = train_test(dataset, model, cfg.split, cfg.split_mode, cfg.seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = run_campaign(model, train, test, cfg.solve_options(), truth, total=args.total, jobs=cfg.jobs)
    csv_text = doc.pop("_csv")
    runs = doc.pop("runs")
    for label, rep in runs.items():
        sub = out / label
        sub.mkdir(exist_ok=True)
        _write(sub, "report.json", rep)
    doc["inputs"] = _inputs(cfg)
    _write(out, "campaign.json", doc)
    _write(out, "campaign.csv", csv_text)
    print(csv_text, end="")
    return OK


COMMANDS = {
    "simulate": cmd_simulate,
    "calibrate": cmd_calibrate,
    "observability": cmd_observability,
    "evaluate": cmd_evaluate,
    "campaign": cmd_campaign,
}


def main(argv=None) -> int:
    level = os.environ.get("SELFCAL_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ModelError, DatasetError, SolverError, OSError, ValueError) as exc:
        print(f"selfcal {args.command}: error: {exc}", file=sys.stderr)
        return USER_ERROR


if __name__ == "__main__":
    sys.exit(main())
