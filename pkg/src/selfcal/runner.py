"""Calibration runs, held-out evaluation and kind-set campaigns.

These are the library halves of the ``selfcal`` subcommands; the CLI only
parses flags into a :class:`RunConfig` and writes the returned dictionaries.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .estimator import (
    CalibrationResult,
    SolveOptions,
    build_system,
    evaluate_rms,
    lm_solve,
    parse_robust,
    workspace_key,
)
from .kinecore import RobotModel, parameter_error
from .measurements import KIND_ORDER, Dataset, Kind, parse_kinds, split
from .observability import compare_campaigns, observability_indices
from .simlab import ConfigError

log = logging.getLogger(__name__)


@dataclass
class RunConfig:
    robot: str | None = None
    dataset: str | None = None
    truth: str | None = None
    mask: list[str] | None = None
    solve: dict = field(default_factory=dict)
    kinds: tuple[Kind, ...] = KIND_ORDER
    split: float | None = None
    split_mode: str = "random"
    seed: int = 0
    out: str = "."
    jobs: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        for k in d:
            if k not in known:
                raise ConfigError(f"{k}: unknown run option")
        cfg = cls(**d)
        cfg.normalize()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            if path.suffix == ".toml":
                try:
                    import tomllib
                except ModuleNotFoundError:  # Python < 3.11
                    import tomli as tomllib
                doc = tomllib.loads(path.read_text())
            else:
                doc = json.loads(path.read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"{path}: cannot read config ({exc})") from None
        for k in ("robot", "dataset", "truth"):
            if doc.get(k) and not Path(doc[k]).is_absolute():
                doc[k] = str(path.parent / doc[k])
        return cls.from_dict(doc)

    def normalize(self) -> None:
        try:
            self.kinds = parse_kinds(self.kinds)
        except ValueError as exc:
            raise ConfigError(f"kinds: {exc}") from None
        if self.split is not None and not 0.0 < float(self.split) < 1.0:
            raise ConfigError("split: fraction must be in (0, 1)")
        if self.split_mode not in ("random", "workspace"):
            raise ConfigError("split_mode: must be 'random' or 'workspace'")
        if int(self.jobs) < 1:
            raise ConfigError("jobs: must be >= 1")
        try:
            self.solve_options()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"solve: {exc}") from None

    def check_paths(self, need_dataset: bool = True) -> None:
        for name in ("robot", "dataset") if need_dataset else ("robot",):
            value = getattr(self, name)
            if value is None:
                raise ConfigError(f"{name}: required")
        for name in ("robot", "dataset", "truth"):
            value = getattr(self, name)
            if value is not None and not Path(value).is_file():
                raise ConfigError(f"{name}: file not found: {value}")

    def solve_options(self) -> SolveOptions:
        opts = dict(self.solve)
        robust = opts.pop("robust", None)
        if robust is not None:
            loss, delta = parse_robust(robust)
            opts["robust_loss"], opts["huber_delta"] = loss, delta
        return SolveOptions.from_dict(opts)

    def to_dict(self) -> dict:
        return {
            "robot": self.robot, "dataset": self.dataset, "truth": self.truth, "mask": self.mask,
            "solve": self.solve, "kinds": [k.value for k in self.kinds], "split": self.split,
            "split_mode": self.split_mode, "seed": self.seed,
        }


def file_digest(path) -> str | None:
    if path is None:
        return None
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _jsonable(x):
    if isinstance(x, dict):
        return {str(getattr(k, "value", k)): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, float) and not np.isfinite(x):
        return None
    return x


def train_test(dataset: Dataset, model: RobotModel, fraction: float | None, mode: str,
               seed: int) -> tuple[Dataset, Dataset | None]:
    if fraction is None:
        return dataset, None
    key = workspace_key(model) if mode == "workspace" else None
    return split(dataset, fraction, seed, mode, key)


def observability_section(model: RobotModel, dataset: Dataset, jacobian_mode: str = "central") -> dict:
    """Indices of the weighted Jacobian of ``dataset`` evaluated at ``model``.

    Central differences by default: the forward-difference truncation error
    (about 1e-8 of sigma_1 on the desk rig) sits right at the rank tolerance
    and can hide gauge directions.
    """
    system = build_system(model, None, dataset, jacobian_mode)
    rep = observability_indices(system.J, names=[s.key for s in model.free_slots])
    return rep.to_dict()


def calibrate(model: RobotModel, train: Dataset, opts: SolveOptions, truth: RobotModel | None = None
              ) -> tuple[CalibrationResult, dict]:
    """Run the solver and assemble the JSON report body."""
    result = lm_solve(model, train, opts=opts)
    report = result.to_dict()
    report["counts"] = {k.value: n for k, n in train.counts().items()}
    report["observability"] = observability_section(result.model_opt, train)
    report["parameter_error"] = parameter_errors(model, result.model_opt, truth)
    return result, report


def parameter_errors(nominal: RobotModel, calibrated: RobotModel, truth: RobotModel | None) -> dict:
    """Per-unit RMS parameter error before and after; every value is null without ground truth."""
    if truth is None:
        empty = {"length": None, "angle": None, "overall": None}
        return {"initial": dict(empty), "final": dict(empty)}
    slots = nominal.free_slots
    return {"initial": parameter_error(nominal, truth, slots), "final": parameter_error(calibrated, truth, slots)}


def evaluate(nominal: RobotModel, calibrated: RobotModel, train: Dataset, test: Dataset,
             truth: RobotModel | None = None) -> dict:
    """Per-kind RMS (native units) on train and held-out test, nominal vs calibrated."""
    if len(test) == 0:
        raise ConfigError("split: the held-out test set is empty")
    return {
        "train": {"nominal": evaluate_rms(nominal, train), "calibrated": evaluate_rms(calibrated, train)},
        "test": {"nominal": evaluate_rms(nominal, test), "calibrated": evaluate_rms(calibrated, test)},
        "parameter_error": parameter_errors(nominal, calibrated, truth),
        "n_train": len(train),
        "n_test": len(test),
    }


# campaigns -----------------------------------------------------------------------

def default_kind_sets(kinds: Sequence[Kind]) -> list[tuple[Kind, ...]]:
    """Every single kind, every pair, and all kinds together."""
    kinds = [k for k in KIND_ORDER if k in kinds]
    sets = [(k,) for k in kinds] + list(itertools.combinations(kinds, 2))
    if len(kinds) > 2:
        sets.append(tuple(kinds))
    return sets


def matched_subset(train: Dataset, kinds: Sequence[Kind], total: int) -> Dataset:
    """``total // len(kinds)`` records of each kind, taken in dataset order."""
    per = total // len(kinds)
    keep, seen = [], {k: 0 for k in kinds}
    for i, m in enumerate(train.measurements):
        if m.kind in seen and seen[m.kind] < per:
            seen[m.kind] += 1
            keep.append(i)
    short = [k.value for k in kinds if seen[k] < per]
    if short:
        raise ConfigError(f"not enough training records of kind(s) {short} for {per} each")
    sub = train.subset(keep, f"campaign {'+'.join(k.value for k in kinds)} matched total {total}")
    return sub.with_sigmas({k: train.sigmas[k] for k in kinds})


def _campaign_member(args):
    model, train, test, kinds, total, opts, truth = args
    sub = matched_subset(train, kinds, total)
    result, report = calibrate(model, sub, opts, truth)
    report["kinds"] = [k.value for k in kinds]
    if test is not None and len(test):
        report["test_rms"] = evaluate_rms(result.model_opt, test)
        report["test_rms_nominal"] = evaluate_rms(model, test)
    system = build_system(result.model_opt, None, sub, "central")
    return report, system.J


def run_campaign(model: RobotModel, train: Dataset, test: Dataset | None, opts: SolveOptions,
                 truth: RobotModel | None = None, kind_sets: Sequence[Sequence[Kind]] | None = None,
                 total: int | None = None, jobs: int = 1) -> dict:
    """Calibrate every kind set on a matched number of training records and rank them.

    ``total`` defaults to the largest count every set can supply.  Runs are
    independent, so ``jobs > 1`` gives the same report as a serial run.
    """
    present = train.kinds()
    kind_sets = [tuple(k for k in KIND_ORDER if k in set(ks)) for ks in
                 (kind_sets if kind_sets is not None else default_kind_sets(present))]
    if not kind_sets:
        raise ConfigError("kinds: campaign needs at least one kind present in the dataset")
    counts = train.counts()
    if total is None:
        total = min(len(ks) * min(counts.get(k, 0) for k in ks) for ks in kind_sets)
        # a common multiple of all set sizes keeps the per-kind share exact
        lcm = int(np.lcm.reduce([len(ks) for ks in kind_sets]))
        total -= total % lcm
    if total <= 0:
        raise ConfigError("campaign: no training records available for a matched comparison")
    tasks = [(model, train, test, ks, total, opts, truth) for ks in kind_sets]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as pool:
            outputs = list(pool.map(_campaign_member, tasks))
    else:
        outputs = [_campaign_member(t) for t in tasks]
    labels = ["+".join(k.value for k in ks) for ks in kind_sets]
    reports = {lab: observability_indices(J) for lab, (_, J) in zip(labels, outputs)}
    metrics = {}
    for lab, (rep, _) in zip(labels, outputs):
        row = {"final_cost": rep["final_cost"]}
        pe = rep["parameter_error"]["final"]
        row["param_rms"] = pe["overall"]
        row["param_rms_length"], row["param_rms_angle"] = pe["length"], pe["angle"]
        for kind, v in (rep.get("test_rms") or {}).items():
            row[f"test_rms_{kind}"] = v
        metrics[lab] = row
    table = compare_campaigns(reports, metrics)
    return {
        "total_per_set": total,
        "kind_sets": labels,
        "ranking": table.to_dicts(),
        "multi_dominates_single": table.multi_dominates_single,
        "runs": {lab: rep for lab, (rep, _) in zip(labels, outputs)},
        "_csv": table.to_csv(),
    }


def to_json(doc) -> str:
    return json.dumps(_jsonable(doc), indent=2, sort_keys=False) + "\n"
