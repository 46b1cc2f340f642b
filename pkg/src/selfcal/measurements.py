"""Chain-closure measurements, datasets and their JSON Lines files.

Dataset file layout: the first line is a header object
``{"schema": "selfcal-dataset", "version": 1, "sigmas": {...}, "provenance": {...}}``,
then one measurement object per line, for example::

    {"kind": "sc", "q": [...], "point": "L_tip", "patch": "R_skin", "taxel": 3}
    {"kind": "sc", "q": [...], "point": "L_tip", "target_point": "R_tip", "offset": 0.01}
    {"kind": "pl", "q": [...], "point": "L_tip", "plane": "table"}
    {"kind": "so", "q": [...], "camera": "head", "marker": "L_hand", "pixel": [u, v]}
    {"kind": "ext", "q": [...], "point": "R_tip", "device": "tracker", "position": [x, y, z]}

``q`` is always the full joint vector of the robot (radians), pixels are image
coordinates with the origin top-left, 3D quantities are meters.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, ClassVar, Iterable, NamedTuple, Sequence

import numpy as np

SCHEMA = "selfcal-dataset"
VERSION = 1


class Kind(str, Enum):
    SELF_CONTACT = "sc"
    PLANE = "pl"
    SELF_OBSERVATION = "so"
    EXTERNAL = "ext"

    @property
    def dim(self) -> int:
        return RESIDUAL_DIM[self]


RESIDUAL_DIM = {Kind.SELF_CONTACT: 3, Kind.PLANE: 1, Kind.SELF_OBSERVATION: 2, Kind.EXTERNAL: 3}
KIND_ORDER = (Kind.SELF_CONTACT, Kind.PLANE, Kind.SELF_OBSERVATION, Kind.EXTERNAL)
UNITS = {Kind.SELF_CONTACT: "m", Kind.PLANE: "m", Kind.SELF_OBSERVATION: "px", Kind.EXTERNAL: "m"}


def parse_kinds(text: str | Iterable) -> tuple[Kind, ...]:
    """``"sc,so"`` or an iterable of names -> kinds in canonical order."""
    items = text.split(",") if isinstance(text, str) else list(text)
    kinds = {Kind(str(getattr(k, "value", k)).strip()) for k in items if str(getattr(k, "value", k)).strip()}
    if not kinds:
        raise ValueError("kind filter must not be empty")
    return tuple(k for k in KIND_ORDER if k in kinds)


def _q_tuple(q) -> tuple[float, ...]:
    return tuple(float(x) for x in np.asarray(q, dtype=float).ravel())


@dataclass(frozen=True)
class Measurement:
    q: tuple[float, ...]
    kind: ClassVar[Kind]

    def __post_init__(self):
        object.__setattr__(self, "q", _q_tuple(self.q))

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class SelfContact(Measurement):
    """Effector ``point`` touches either a taxel (``patch``/``taxel``) or ``target_point``."""

    point: str = ""
    patch: str | None = None
    taxel: int | None = None
    target_point: str | None = None
    offset: float | None = None
    kind: ClassVar[Kind] = Kind.SELF_CONTACT

    def to_dict(self):
        d = {"kind": self.kind.value, "q": list(self.q), "point": self.point}
        if self.patch is not None:
            d["patch"] = self.patch
            d["taxel"] = self.taxel
        if self.target_point is not None:
            d["target_point"] = self.target_point
        if self.offset is not None:
            d["offset"] = self.offset
        return d


@dataclass(frozen=True)
class PlaneContact(Measurement):
    point: str = ""
    plane: str = ""
    kind: ClassVar[Kind] = Kind.PLANE

    def to_dict(self):
        return {"kind": self.kind.value, "q": list(self.q), "point": self.point, "plane": self.plane}


@dataclass(frozen=True)
class SelfObservation(Measurement):
    camera: str = ""
    marker: str = ""
    pixel: tuple[float, float] = (0.0, 0.0)
    kind: ClassVar[Kind] = Kind.SELF_OBSERVATION

    def __post_init__(self):
        super().__post_init__()
        object.__setattr__(self, "pixel", tuple(float(x) for x in self.pixel))

    def to_dict(self):
        return {"kind": self.kind.value, "q": list(self.q), "camera": self.camera,
                "marker": self.marker, "pixel": list(self.pixel)}


@dataclass(frozen=True)
class ExternalPoint(Measurement):
    """3D position of ``point`` measured in the frame of ``device``."""

    point: str = ""
    device: str = ""
    position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    kind: ClassVar[Kind] = Kind.EXTERNAL

    def __post_init__(self):
        super().__post_init__()
        object.__setattr__(self, "position", tuple(float(x) for x in self.position))

    def to_dict(self):
        return {"kind": self.kind.value, "q": list(self.q), "point": self.point,
                "device": self.device, "position": list(self.position)}


CLASSES = {c.kind: c for c in (SelfContact, PlaneContact, SelfObservation, ExternalPoint)}


@dataclass(frozen=True, eq=False)
class Dataset:
    measurements: tuple[Measurement, ...]
    sigmas: dict[Kind, float]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "measurements", tuple(self.measurements))
        object.__setattr__(self, "sigmas", {Kind(k): float(v) for k, v in dict(self.sigmas).items()})

    def __len__(self) -> int:
        return len(self.measurements)

    def __iter__(self):
        return iter(self.measurements)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.measurements == other.measurements and self.sigmas == other.sigmas
                and self.provenance == other.provenance)

    def kinds(self) -> tuple[Kind, ...]:
        present = {m.kind for m in self.measurements}
        return tuple(k for k in KIND_ORDER if k in present)

    def counts(self) -> dict[Kind, int]:
        out = {k: 0 for k in self.kinds()}
        for m in self.measurements:
            out[m.kind] += 1
        return out

    def subset(self, indices: Sequence[int], note: str | None = None) -> "Dataset":
        prov = dict(self.provenance)
        if note:
            prov["subset"] = note
        return Dataset(tuple(self.measurements[i] for i in indices), dict(self.sigmas), prov)

    def filter_kinds(self, kinds: Iterable[Kind]) -> "Dataset":
        keep = set(parse_kinds(kinds))
        idx = [i for i, m in enumerate(self.measurements) if m.kind in keep]
        return self.subset(idx)

    def with_sigmas(self, sigmas) -> "Dataset":
        return Dataset(self.measurements, {**self.sigmas, **{Kind(k): v for k, v in sigmas.items()}},
                       dict(self.provenance))


class Issue(NamedTuple):
    index: int | None
    field: str
    message: str

    def __str__(self):
        where = "header" if self.index is None else f"record {self.index}"
        return f"{where}: {self.field}: {self.message}"


class DatasetError(ValueError):
    """Dataset failed validation; ``issues`` lists every problem found."""

    def __init__(self, issues: list[Issue]):
        self.issues = list(issues)
        shown = "; ".join(str(i) for i in self.issues[:10])
        more = f" (+{len(self.issues) - 10} more)" if len(self.issues) > 10 else ""
        super().__init__(f"{len(self.issues)} dataset issue(s): {shown}{more}")


def validate_dataset(dataset: Dataset, model=None) -> list[Issue]:
    """Collect every problem in ``dataset``; with ``model``, also resolve all ids."""
    issues: list[Issue] = []
    if len(dataset) == 0:
        issues.append(Issue(None, "measurements", "dataset must be non-empty"))
    for k in dataset.kinds():
        s = dataset.sigmas.get(k)
        if s is None or not (s > 0 and math.isfinite(s)):
            issues.append(Issue(None, f"sigmas.{k.value}", f"sigma must be > 0 for present kind, got {s}"))

    def has(kind: str, name) -> bool:
        try:
            model.sensor(kind, name)
            return True
        except ValueError:
            return False

    for i, m in enumerate(dataset.measurements):
        if not all(math.isfinite(x) for x in m.q):
            issues.append(Issue(i, "q", "joint values must be finite"))
        if model is None:
            continue
        if len(m.q) != model.n_joints:
            issues.append(Issue(i, "q", f"expected {model.n_joints} joint values, got {len(m.q)}"))
        if isinstance(m, (SelfContact, PlaneContact, ExternalPoint)) and not has("marker", m.point):
            issues.append(Issue(i, "point", f"unknown point id {m.point!r}"))
        if isinstance(m, SelfContact):
            if (m.patch is None) == (m.target_point is None):
                issues.append(Issue(i, "target", "give exactly one of patch/taxel or target_point"))
            elif m.patch is not None:
                if not has("patch", m.patch):
                    issues.append(Issue(i, "patch", f"unknown patch id {m.patch!r}"))
                elif m.taxel is None or int(m.taxel) not in model.patch(m.patch).taxel_ids:
                    issues.append(Issue(i, "taxel", f"unknown taxel id {m.taxel!r} on patch {m.patch!r}"))
            elif not has("marker", m.target_point):
                issues.append(Issue(i, "target_point", f"unknown point id {m.target_point!r}"))
            if m.offset is not None and not math.isfinite(m.offset):
                issues.append(Issue(i, "offset", "contact offset must be finite"))
        elif isinstance(m, PlaneContact):
            if not has("plane", m.plane):
                issues.append(Issue(i, "plane", f"unknown plane id {m.plane!r}"))
        elif isinstance(m, SelfObservation):
            if not has("camera", m.camera):
                issues.append(Issue(i, "camera", f"unknown camera id {m.camera!r}"))
            elif not model.camera(m.camera).contains(m.pixel):
                issues.append(Issue(i, "pixel", f"pixel {m.pixel} outside camera {m.camera!r} resolution"))
            if not has("marker", m.marker):
                issues.append(Issue(i, "marker", f"unknown marker id {m.marker!r}"))
        elif isinstance(m, ExternalPoint):
            if not has("device", m.device):
                issues.append(Issue(i, "device", f"unknown device id {m.device!r}"))
            if not all(math.isfinite(x) for x in m.position):
                issues.append(Issue(i, "position", "measured position must be finite"))
    return issues


def check_dataset(dataset: Dataset, model=None) -> Dataset:
    issues = validate_dataset(dataset, model)
    if issues:
        raise DatasetError(issues)
    return dataset


# file I/O -------------------------------------------------------------------

_REQUIRED = {
    Kind.SELF_CONTACT: ("point",),
    Kind.PLANE: ("point", "plane"),
    Kind.SELF_OBSERVATION: ("camera", "marker", "pixel"),
    Kind.EXTERNAL: ("point", "device", "position"),
}


def measurement_from_dict(d: dict, index: int, issues: list[Issue]) -> Measurement | None:
    try:
        kind = Kind(d.get("kind"))
    except ValueError:
        issues.append(Issue(index, "kind", f"unknown measurement kind {d.get('kind')!r}"))
        return None
    missing = [f for f in ("q", *_REQUIRED[kind]) if f not in d]
    if missing:
        for f in missing:
            issues.append(Issue(index, f, "missing field"))
        return None
    kwargs = {k: v for k, v in d.items() if k != "kind"}
    try:
        if kind is Kind.SELF_CONTACT and kwargs.get("taxel") is not None:
            kwargs["taxel"] = int(kwargs["taxel"])
        m = CLASSES[kind](**kwargs)
    except TypeError as exc:
        issues.append(Issue(index, "record", str(exc)))
        return None
    except ValueError as exc:
        issues.append(Issue(index, "record", f"bad value ({exc})"))
        return None
    return m


def save_dataset(dataset: Dataset, path) -> None:
    header = {
        "schema": SCHEMA,
        "version": VERSION,
        "sigmas": {k.value: dataset.sigmas[k] for k in KIND_ORDER if k in dataset.sigmas},
        "provenance": dataset.provenance,
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for m in dataset.measurements:
            fh.write(json.dumps(m.to_dict()) + "\n")


def load_dataset(path, model=None) -> Dataset:
    """Read a ``.jsonl`` dataset; every malformed record is reported at once."""
    issues: list[Issue] = []
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise DatasetError([Issue(None, "header", "empty file")])
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetError([Issue(None, "header", f"invalid JSON ({exc})")]) from None
    if header.get("schema") != SCHEMA:
        issues.append(Issue(None, "schema", f"expected {SCHEMA!r}, got {header.get('schema')!r}"))
    if header.get("version") != VERSION:
        issues.append(Issue(None, "version", f"unsupported schema version {header.get('version')!r}"))
    sigmas = {}
    for k, v in header.get("sigmas", {}).items():
        try:
            sigmas[Kind(k)] = float(v)
        except ValueError:
            issues.append(Issue(None, f"sigmas.{k}", "unknown kind or non-numeric sigma"))
    measurements = []
    for i, line in enumerate(lines[1:]):
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            issues.append(Issue(i, "json", str(exc)))
            continue
        m = measurement_from_dict(d, i, issues)
        if m is not None:
            measurements.append(m)
    ds = Dataset(tuple(measurements), sigmas, header.get("provenance", {}))
    if not issues:
        issues = validate_dataset(ds, model)
    if issues:
        raise DatasetError(issues)
    return ds


def import_external_csv(path, point: str, device: str) -> list[ExternalPoint]:
    """Convert ``q1..qn, x, y, z`` rows into External measurements."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                vals = [float(c) for c in row]
            except ValueError:
                continue  # header row
            if len(vals) < 4:
                raise ValueError(f"{path}: need at least one joint value and x, y, z")
            out.append(ExternalPoint(tuple(vals[:-3]), point=point, device=device, position=tuple(vals[-3:])))
    return out


# splitting ---------------------------------------------------------------

def _train_sizes(counts: dict[Kind, int], fraction: float) -> dict[Kind, int]:
    """Per-kind floors, topped up by largest remainder to floor(n * fraction)."""
    sizes = {k: math.floor(n * fraction) for k, n in counts.items()}
    target = math.floor(sum(counts.values()) * fraction)
    rema = sorted(counts, key=lambda k: (-(counts[k] * fraction - sizes[k]), KIND_ORDER.index(k)))
    for k in rema:
        if sum(sizes.values()) >= target:
            break
        if sizes[k] < counts[k]:
            sizes[k] += 1
    return sizes


def split(dataset: Dataset, fraction: float, seed: int = 0, mode: str = "random",
          key: Callable[[Measurement], float] | None = None) -> tuple[Dataset, Dataset]:
    """Stratified train/test partition.

    ``mode="random"`` permutes each kind with ``seed``.  ``mode="workspace"``
    sorts each kind by ``key`` (default: the first joint angle) and puts the
    low end in train, so the test records come from a region of the workspace
    the calibration never saw.
    """
    if not (0.0 < fraction < 1.0):
        raise ValueError(f"split fraction must be in (0, 1), got {fraction}")
    if mode not in ("random", "workspace"):
        raise ValueError(f"unknown split mode {mode!r}")
    key = key or (lambda m: m.q[0])
    by_kind: dict[Kind, list[int]] = {}
    for i, m in enumerate(dataset.measurements):
        by_kind.setdefault(m.kind, []).append(i)
    sizes = _train_sizes({k: len(v) for k, v in by_kind.items()}, fraction)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for k in KIND_ORDER:
        idx = by_kind.get(k, [])
        if not idx:
            continue
        if mode == "random":
            order = [idx[j] for j in rng.permutation(len(idx))]
        else:
            order = sorted(idx, key=lambda i: (key(dataset.measurements[i]), i))
        train.extend(order[: sizes[k]])
        test.extend(order[sizes[k]:])
    note = f"{mode} split fraction={fraction} seed={seed}"
    return (dataset.subset(sorted(train), note + " train"),
            dataset.subset(sorted(test), note + " test"))
