"""Singular-value analysis of the identification Jacobian.

Indices (``sigma`` sorted descending, ``N`` parameters, ``m`` rows):

* O1 = (sigma_1 ... sigma_N)^(1/N) / sqrt(m)   (geometric mean)
* O2 = sigma_N / sigma_1                       (inverse condition number)
* O3 = sigma_N                                 (minimum singular value)
* O4 = sigma_N^2 / sigma_1                     (noise amplification)
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg


@dataclass(eq=False)
class ObservabilityReport:
    singular_values: np.ndarray
    O1: float
    O2: float
    O3: float
    O4: float
    m: int
    rank_tol: float
    unidentifiable: list[tuple[tuple[int, ...], np.ndarray]] = field(default_factory=list)
    degenerate: bool = False
    names: list[str] | None = None

    @property
    def n_parameters(self) -> int:
        return len(self.singular_values)

    def to_dict(self) -> dict:
        def label(i):
            return self.names[i] if self.names else i

        return {
            "singular_values": [float(s) for s in self.singular_values],
            "O1": self.O1, "O2": self.O2, "O3": self.O3, "O4": self.O4,
            "m": self.m,
            "rank_tol": self.rank_tol,
            "degenerate": self.degenerate,
            "unidentifiable": [
                {"parameters": [label(i) for i in idx],
                 "direction": [float(v) for v in direction]}
                for idx, direction in self.unidentifiable
            ],
        }


def singular_values(J) -> np.ndarray:
    """All N singular values of J, descending, zero-padded when rows < N.

    Values at the rounding floor of the SVD (``eps * max(m, N) * sigma_1``)
    are set to exactly zero, so a rank-deficient J gives O1 = O3 = 0 whatever
    the row order.
    """
    J = np.asarray(J, dtype=float)
    n = J.shape[1]
    s = np.linalg.svd(J, compute_uv=False) if J.size else np.zeros(0)
    if s.size:
        s[s <= np.finfo(float).eps * max(J.shape) * s[0]] = 0.0
    return np.concatenate([s, np.zeros(n - s.size)])


def _null_basis(J: np.ndarray, rank_tol: float) -> np.ndarray:
    n = J.shape[1]
    if J.shape[0] == 0:
        return np.eye(n)
    _, s, Vt = np.linalg.svd(J, full_matrices=True)
    s = np.concatenate([s, np.zeros(n - s.size)])
    smax = s[0] if s.size else 0.0
    small = s <= rank_tol * smax if smax > 0 else np.ones(n, dtype=bool)
    return Vt[small].T


def _sparsify(N: np.ndarray) -> np.ndarray:
    """Rotate a null-space basis so that each vector is anchored on its own
    pivot parameter (column-pivoted QR picks the pivots)."""
    k = N.shape[1]
    if k <= 1:
        return N
    _, _, piv = scipy.linalg.qr(N.T, pivoting=True, mode="economic")
    P = N[piv[:k], :]
    B = N @ np.linalg.solve(P, np.eye(k))
    B[np.abs(B) < 1e-12] = 0.0
    return B / np.linalg.norm(B, axis=0, keepdims=True)


def find_unidentifiable(J, rank_tol: float = 1e-8, dominance: float = 0.1) -> list[tuple[tuple[int, ...], np.ndarray]]:
    """Parameter combinations the data cannot determine.

    Returns ``(indices, direction)`` pairs, one per right singular vector with
    ``sigma <= rank_tol * sigma_1``; ``indices`` are the components with
    ``|v_i| > dominance * max|v|``.
    """
    J = np.asarray(J, dtype=float)
    if J.ndim != 2:
        raise ValueError("J must be a matrix")
    N = _sparsify(_null_basis(J, rank_tol))
    out = []
    for j in range(N.shape[1]):
        v = N[:, j]
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        idx = tuple(int(i) for i in np.flatnonzero(np.abs(v) > dominance * np.max(np.abs(v))))
        out.append((idx, v))
    return out


def observability_indices(J, m: int | None = None, rank_tol: float = 1e-8,
                          names: Sequence[str] | None = None) -> ObservabilityReport:
    J = np.asarray(J, dtype=float)
    if J.ndim != 2 or J.shape[1] < 1:
        raise ValueError("J must be a matrix with at least one column")
    if not np.all(np.isfinite(J)):
        raise ValueError("J must be finite")
    m = J.shape[0] if m is None else int(m)
    s = singular_values(J)
    n = s.size
    s1, sn = float(s[0]), float(s[-1])
    if s1 == 0.0:
        return ObservabilityReport(s, 0.0, 0.0, 0.0, 0.0, m, rank_tol,
                                   find_unidentifiable(J, rank_tol), True,
                                   list(names) if names else None)
    o1 = float(np.exp(np.mean(np.log(s))) / np.sqrt(m)) if sn > 0 else 0.0
    return ObservabilityReport(
        singular_values=s,
        O1=o1,
        O2=sn / s1,
        O3=sn,
        O4=sn * sn / s1,
        m=m,
        rank_tol=rank_tol,
        unidentifiable=find_unidentifiable(J, rank_tol) if sn <= rank_tol * s1 else [],
        names=list(names) if names else None,
    )


def eliminate_columns(J, nuisance: Sequence[int]) -> np.ndarray:
    """Project nuisance columns out of J.

    Returns the Jacobian of the remaining parameters after the nuisance
    parameters have been optimized away (``(I - P_n) J_k`` with ``P_n`` the
    orthogonal projector onto the nuisance column space).
    """
    J = np.asarray(J, dtype=float)
    nuisance = list(nuisance)
    keep = [j for j in range(J.shape[1]) if j not in set(nuisance)]
    Jk = J[:, keep]
    if not nuisance:
        return Jk
    Jn = J[:, nuisance]
    U, s, _ = np.linalg.svd(Jn, full_matrices=False)
    U = U[:, s > 1e-12 * (s[0] if s.size else 0.0)]
    return Jk - U @ (U.T @ Jk)


@dataclass
class CampaignRow:
    label: str
    kinds: tuple[str, ...]
    O1: float
    O2: float
    O3: float
    O4: float
    rank: int
    metrics: dict = field(default_factory=dict)


@dataclass
class CampaignTable:
    rows: list[CampaignRow]
    multi_dominates_single: bool

    def to_dicts(self) -> list[dict]:
        return [{"rank": r.rank, "label": r.label, "kinds": list(r.kinds), "O1": r.O1, "O2": r.O2,
                 "O3": r.O3, "O4": r.O4, **r.metrics} for r in self.rows]

    def to_csv(self) -> str:
        rows = self.to_dicts()
        extra = sorted({k for r in rows for k in r} - {"rank", "label", "kinds", "O1", "O2", "O3", "O4"})
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rank", "label", "O1", "O2", "O3", "O4", *extra])
        for r in rows:
            w.writerow([r["rank"], r["label"], *(repr(float(r[k])) for k in ("O1", "O2", "O3", "O4")),
                        *[r.get(k) for k in extra]])
        return buf.getvalue()


# closure kinds in their conventional order; unknown labels sort after them
_KIND_ORDER = ("sc", "pl", "so", "ext")


def _kinds_of(key) -> tuple[str, ...]:
    if isinstance(key, str):
        parts = key.replace("+", ",").split(",")
    else:
        parts = [getattr(k, "value", k) for k in key]
    order = {k: i for i, k in enumerate(_KIND_ORDER)}
    return tuple(sorted((str(p).strip() for p in parts if str(p).strip()), key=lambda k: (order.get(k, 99), k)))


def compare_campaigns(reports: Mapping, metrics: Mapping | None = None) -> CampaignTable:
    """Rank campaigns by O1, then O3 (both descending; ties keep input order).

    ``reports`` maps a kind set (``"sc+so"``, a tuple or frozenset of kinds) to
    its ObservabilityReport.  ``multi_dominates_single`` tells whether every
    multi-kind campaign beats every single-kind one on both O1 and O3.
    """
    items = list(reports.items())
    dims = {r.n_parameters for _, r in items}
    if len(dims) > 1:
        raise ValueError(f"reports have mismatched parameter dimensions {sorted(dims)}")
    rows = []
    for key, rep in items:
        kinds = _kinds_of(key)
        label = "+".join(kinds)
        rows.append(CampaignRow(label, kinds, float(rep.O1), float(rep.O2), float(rep.O3), float(rep.O4), 0,
                                dict((metrics or {}).get(key, {}))))
    order = sorted(range(len(rows)), key=lambda i: (-rows[i].O1, -rows[i].O3))
    ranked = []
    for rank, i in enumerate(order, start=1):
        rows[i].rank = rank
        ranked.append(rows[i])
    singles = [r for r in rows if len(r.kinds) == 1]
    multis = [r for r in rows if len(r.kinds) > 1]
    dominates = bool(singles and multis) and all(
        mr.O1 > sr.O1 and mr.O3 > sr.O3 for mr in multis for sr in singles
    )
    return CampaignTable(ranked, dominates)
