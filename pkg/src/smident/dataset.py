"""Regressor matrices for multi-step ARX predictors.

A predictor with horizon p and model order o maps the regressor

    phi_p(k) = [y(k), ..., y(k-o+1), u(k+p-1), ..., u(k-o+1)]

to the target y(k+p).  Rows are collected for every admissible time index
of a record, giving the data matrices all estimation and identification
routines operate on.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError
from .lti_sim import IORecord


@dataclass(frozen=True)
class RegressorLayout:
    """Index bookkeeping for the regressor of a horizon-p, order-o predictor."""

    o: int
    p: int

    def __post_init__(self):
        if self.o < 1 or self.p < 1:
            raise ConfigError("model order and horizon must be >= 1")

    @property
    def dim(self) -> int:
        return 2 * self.o + self.p - 1

    @property
    def y_slice(self) -> slice:
        """Positions of the past-output block [y(k), ..., y(k-o+1)]."""
        return slice(0, self.o)

    @property
    def u_slice(self) -> slice:
        """Positions of the input block [u(k+p-1), ..., u(k-o+1)]."""
        return slice(self.o, self.dim)


@dataclass
class SampleSet:
    """Stacked regressors and targets for one (o, p) pair.

    phi has one row per admissible base index k and `layout.dim` columns;
    targets[i] is the measured output p steps after row i's base index.
    first_k records the base index of row 0 within the source record.
    """

    layout: RegressorLayout
    phi: np.ndarray
    targets: np.ndarray
    first_k: int = 0
    meta: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.phi = np.ascontiguousarray(self.phi, dtype=float)
        self.targets = np.asarray(self.targets, dtype=float).reshape(-1)
        if self.phi.ndim != 2 or self.phi.shape[1] != self.layout.dim:
            raise ConfigError(f"phi must have {self.layout.dim} columns for layout {self.layout}")
        if self.phi.shape[0] != self.targets.size:
            raise ConfigError("row count mismatch between phi and targets")
        if self.phi.shape[0] < 1:
            raise ConfigError("sample set needs at least one row")

    @property
    def n_rows(self) -> int:
        return self.phi.shape[0]

    def content_hash(self) -> str:
        h = self._cache.get("content_hash")
        if h is None:
            m = hashlib.sha256()
            m.update(self.phi.tobytes())
            m.update(self.targets.tobytes())
            m.update(f"{self.layout.o},{self.layout.p}".encode())
            h = self._cache["content_hash"] = m.hexdigest()
        return h

    def take(self, idx) -> "SampleSet":
        """Row-subset copy (used for subsampling experiments)."""
        idx = np.asarray(idx)
        return SampleSet(layout=self.layout, phi=self.phi[idx].copy(),
                         targets=self.targets[idx].copy(), first_k=self.first_k,
                         meta=dict(self.meta, subset=True))

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "target"] + [f"phi_{j}" for j in range(self.layout.dim)])
            for i in range(self.n_rows):
                row = [self.first_k + i, f"{self.targets[i]:.17g}"]
                row += [f"{v:.17g}" for v in self.phi[i]]
                w.writerow(row)


def build_sample_set(rec: IORecord, o: int, p: int) -> SampleSet:
    """All admissible regressor rows of `rec` for order o and horizon p.

    Base indices run over k = o-1, ..., N-1-p, giving N-o-p+1 rows; the
    record must therefore contain at least o+p samples.
    """
    layout = RegressorLayout(o=o, p=p)
    n = len(rec)
    n_rows = n - o - p + 1
    if n_rows < 1:
        raise ConfigError(f"record of length {n} too short for o={o}, p={p} (needs >= {o + p})")
    wy = sliding_window_view(rec.y, o)          # wy[j] = y[j : j+o]
    wu = sliding_window_view(rec.u, o + p - 1)  # wu[j] = u[j : j+o+p-1]
    idx = np.arange(n_rows)
    phi = np.hstack([wy[idx][:, ::-1], wu[idx][:, ::-1]])
    ks = idx + o - 1
    targets = rec.y[ks + p]
    return SampleSet(layout=layout, phi=phi, targets=targets, first_k=o - 1,
                     meta={"n_record": n})


class SampleCache:
    """Build-on-demand store of sample sets for one record.

    The estimation procedures query many (o, p) pairs; regressor matrices
    are cheap to rebuild but the residual-margin LP result attached to each
    set is not, so sets are kept until their order is dropped explicitly.
    """

    def __init__(self, rec: IORecord):
        self.rec = rec
        self._sets: dict = {}

    def get(self, o: int, p: int) -> SampleSet:
        key = (o, p)
        S = self._sets.get(key)
        if S is None:
            S = self._sets[key] = build_sample_set(self.rec, o, p)
        return S

    def drop_order(self, o: int) -> None:
        for key in [k for k in self._sets if k[0] == o]:
            del self._sets[key]


def split(rec: IORecord, n_id: int, n_val: int):
    """Cut a record into contiguous identification and validation segments.

    The segments are [0, n_id) and [n_id, n_id+n_val); both restart their
    sample index at zero.
    """
    if n_id < 1 or n_val < 1:
        raise ConfigError("segment lengths must be positive")
    if n_id + n_val > len(rec):
        raise ConfigError(f"record of length {len(rec)} cannot supply {n_id}+{n_val} samples")
    return (rec.segment(0, n_id, label="identification"),
            rec.segment(n_id, n_id + n_val, label="validation"))
