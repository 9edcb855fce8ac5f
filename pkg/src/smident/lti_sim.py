"""Continuous-time benchmark systems, ZOH sampling and noisy data generation.

The identification experiments in this package start from a strictly proper
continuous-time transfer function.  This module discretizes it exactly under
a zero-order hold, simulates it on piecewise-constant excitation signals and
produces input/output records where the measured output is the noise-free
response plus bounded measurement noise.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import signal

from .errors import ConfigError

# Poles with real part above this are rejected as unstable.
STABILITY_TOL = 1e-9


@dataclass(frozen=True)
class ContinuousTF:
    """Strictly proper continuous-time transfer function num(s)/den(s).

    Coefficients are in descending powers of s.  The denominator leading
    coefficient must be nonzero; the numerator degree must be strictly
    smaller than the denominator degree.
    """

    num: np.ndarray
    den: np.ndarray

    def __post_init__(self):
        num = np.atleast_1d(np.asarray(self.num, dtype=float))
        den = np.atleast_1d(np.asarray(self.den, dtype=float))
        object.__setattr__(self, "num", num)
        object.__setattr__(self, "den", den)
        if den.size < 2 or den[0] == 0.0:
            raise ConfigError("denominator must have nonzero leading coefficient and degree >= 1")
        num_trim = np.trim_zeros(num, "f")
        if num_trim.size >= den.size:
            raise ConfigError("transfer function must be strictly proper")

    @property
    def order(self) -> int:
        return self.den.size - 1

    def poles(self) -> np.ndarray:
        return np.roots(self.den)

    def is_stable(self) -> bool:
        return bool(np.all(self.poles().real < -STABILITY_TOL))

    def dc_gain(self) -> float:
        return float(self.num[-1] / self.den[-1])


@dataclass(frozen=True)
class DiscreteSS:
    """Discrete-time state-space realization (A, B, C, zero feedthrough)."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    ts: float

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float).reshape(-1)
        C = np.asarray(self.C, dtype=float).reshape(-1)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        n = A.shape[0]
        if A.shape != (n, n) or B.size != n or C.size != n:
            raise ConfigError("inconsistent state-space dimensions")
        if self.ts <= 0:
            raise ConfigError("sampling time must be positive")

    @property
    def order(self) -> int:
        return self.A.shape[0]

    def spectral_radius(self) -> float:
        return float(np.abs(np.linalg.eigvals(self.A)).max())

    def settling_steps(self) -> int:
        """Samples until the slowest mode decays by a factor e^-5 (~1%)."""
        rho = self.spectral_radius()
        if rho >= 1.0:
            raise ConfigError("settling time undefined for a marginal or unstable system")
        if rho == 0.0:
            return 1
        return int(np.ceil(-5.0 / np.log(rho)))

    def arx_parameters(self) -> np.ndarray:
        """One-step ARX parameter vector [a_1..a_n, b_1..b_n] of this realization.

        Satisfies z(k+1) = sum_i a_i z(k+1-i) + sum_i b_i u(k+1-i) exactly for
        the noise-free output z of `simulate` (zero initial state or not, after
        the first n samples).
        """
        num, den = signal.ss2tf(self.A, self.B.reshape(-1, 1), self.C.reshape(1, -1), [[0.0]])
        den = np.asarray(den, dtype=float).reshape(-1)
        num = np.asarray(num, dtype=float).reshape(-1)
        # den is monic of length n+1; num has length n+1 with zero leading term
        return np.concatenate([-den[1:], num[1:]])


def discretize_zoh(tf: ContinuousTF, ts: float, allow_marginal: bool = False) -> DiscreteSS:
    """Sample a continuous transfer function exactly under a zero-order hold.

    Builds a controllable canonical realization and computes the discrete
    (A, B) pair through the augmented matrix exponential, which is exact for
    piecewise-constant inputs.

    Parameters
    ----------
    tf : ContinuousTF
    ts : float
        Sampling time, > 0.
    allow_marginal : bool
        Skip the stability check.  Intended for tests with marginally
        stable systems such as an integrator; production configurations
        should leave this off.
    """
    if ts <= 0:
        raise ConfigError("sampling time must be positive")
    if not allow_marginal and not tf.is_stable():
        raise ConfigError(f"continuous poles not strictly stable: {tf.poles()}")
    A, B, C, D = signal.tf2ss(tf.num, tf.den)
    Ad, Bd, Cd, Dd, _ = signal.cont2discrete((A, B, C, D), ts, method="zoh")
    return DiscreteSS(A=Ad, B=Bd, C=Cd, ts=ts)


def random_step_input(levels: Sequence[float], hold_time: float, n_samples: int,
                      ts: float, seed: int) -> np.ndarray:
    """Piecewise-constant excitation: i.i.d. uniform draws from `levels`,
    each held for `hold_time` time units.

    `hold_time` must be an integer multiple of `ts` (within 1e-9 relative
    tolerance), so every level change falls on a sample instant.
    """
    if n_samples <= 0:
        raise ConfigError("n_samples must be positive")
    if not levels:
        raise ConfigError("need at least one input level")
    hold_samples = hold_time / ts
    hold_int = int(round(hold_samples))
    if hold_int < 1 or abs(hold_samples - hold_int) > 1e-9 * max(1.0, hold_samples):
        raise ConfigError(f"hold time {hold_time} is not a multiple of the sampling time {ts}")
    rng = np.random.default_rng(seed)
    n_windows = -(-n_samples // hold_int)
    draws = rng.choice(np.asarray(levels, dtype=float), size=n_windows)
    return np.repeat(draws, hold_int)[:n_samples]


def simulate(ss: DiscreteSS, u: np.ndarray, x0: Optional[np.ndarray] = None) -> np.ndarray:
    """Noise-free output of the sampled system driven by `u`.

    Convention: z[k] = C x[k] is read out before the state update, so z[0]
    depends only on the initial state (zero by default).
    """
    u = np.asarray(u, dtype=float).reshape(-1)
    n = ss.order
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).reshape(n).copy()
    z = np.empty(u.size)
    A, B, C = ss.A, ss.B, ss.C
    for k in range(u.size):
        z[k] = C @ x
        x = A @ x + B * u[k]
    return z


def add_noise(z: np.ndarray, dbar0: float, seed: int) -> np.ndarray:
    """Measured output y = z + d with d uniform on [-dbar0, dbar0]."""
    if dbar0 < 0:
        raise ConfigError("noise bound must be nonnegative")
    rng = np.random.default_rng(seed)
    return np.asarray(z, dtype=float) + rng.uniform(-dbar0, dbar0, size=np.shape(z))


@dataclass
class IORecord:
    """A sampled input/output record.

    Fields
    ------
    u : input sequence
    z : noise-free output, None when unknown (externally measured data)
    y : measured output
    ts : sampling time
    meta : free-form provenance (seed, noise bound, source system, ...)
    """

    u: np.ndarray
    y: np.ndarray
    ts: float
    z: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float).reshape(-1)
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        if self.z is not None:
            self.z = np.asarray(self.z, dtype=float).reshape(-1)
            if self.z.size != self.u.size:
                raise ConfigError("u and z lengths differ")
        if self.y.size != self.u.size:
            raise ConfigError("u and y lengths differ")
        if self.ts <= 0:
            raise ConfigError("sampling time must be positive")

    def __len__(self) -> int:
        return self.u.size

    @property
    def dbar0(self) -> Optional[float]:
        return self.meta.get("dbar0")

    def output_scale(self) -> float:
        """Magnitude reference for zero tests, never below 1e-12."""
        return max(float(np.abs(self.y).max(initial=0.0)), 1e-12)

    def segment(self, start: int, stop: int, label: str = "") -> "IORecord":
        """Contiguous sub-record; timestamps restart at zero."""
        if not (0 <= start < stop <= len(self)):
            raise ConfigError(f"invalid segment [{start}, {stop}) of record length {len(self)}")
        meta = dict(self.meta)
        if label:
            meta["segment"] = label
        meta["segment_range"] = [int(start), int(stop)]
        z = None if self.z is None else self.z[start:stop].copy()
        return IORecord(u=self.u[start:stop].copy(), y=self.y[start:stop].copy(),
                        ts=self.ts, z=z, meta=meta)

    def to_csv(self, path) -> None:
        """Write columns k,u,z,y plus a .json sidecar with the metadata.

        Unknown z is written as empty cells.
        """
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "u", "z", "y"])
            for k in range(len(self)):
                zval = "" if self.z is None else f"{self.z[k]:.17g}"
                w.writerow([k, f"{self.u[k]:.17g}", zval, f"{self.y[k]:.17g}"])
        sidecar = {"ts": self.ts, "n_samples": len(self)}
        sidecar.update(self.meta)
        with path.with_suffix(path.suffix + ".json").open("w") as fh:
            json.dump(sidecar, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_csv(cls, path) -> "IORecord":
        path = Path(path)
        u, z, y = [], [], []
        with path.open(newline="") as fh:
            r = csv.reader(fh)
            header = next(r)
            if [h.strip().lower() for h in header] != ["k", "u", "z", "y"]:
                raise ConfigError(f"unexpected CSV header {header}, want k,u,z,y")
            for row in r:
                u.append(float(row[1]))
                z.append(float(row[2]) if row[2] != "" else np.nan)
                y.append(float(row[3]))
        sidecar_path = path.with_suffix(path.suffix + ".json")
        meta = {}
        ts = 1.0
        if sidecar_path.exists():
            with sidecar_path.open() as fh:
                meta = json.load(fh)
            ts = float(meta.pop("ts", 1.0))
            meta.pop("n_samples", None)
        z_arr = np.asarray(z)
        z_opt = None if np.isnan(z_arr).any() else z_arr
        return cls(u=np.asarray(u), y=np.asarray(y), ts=ts, z=z_opt, meta=meta)


def generate_record(tf: ContinuousTF, ts: float, n_samples: int, levels: Sequence[float],
                    hold_time: float, dbar0: float, seed: int,
                    warmup: Optional[int] = None) -> IORecord:
    """Simulate the sampled system on a random step input and add bounded noise.

    A warm-up prefix (default: twice the settling time of the sampled system)
    is simulated and discarded so the retained record carries no zero-state
    transient.  Input and noise streams use child seeds spawned from `seed`,
    so the record is a pure function of the arguments.
    """
    ss = discretize_zoh(tf, ts)
    if warmup is None:
        warmup = 2 * ss.settling_steps()
    total = warmup + n_samples
    seed_u, seed_d = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(2)]
    u = random_step_input(levels, hold_time, total, ts, seed_u)
    z = simulate(ss, u)
    y = add_noise(z, dbar0, seed_d)
    meta = {
        "seed": int(seed),
        "dbar0": float(dbar0),
        "tf_num": [float(v) for v in tf.num],
        "tf_den": [float(v) for v in tf.den],
        "levels": [float(v) for v in levels],
        "hold_time": float(hold_time),
        "warmup": int(warmup),
    }
    rec = IORecord(u=u[warmup:], y=y[warmup:], ts=ts, z=z[warmup:], meta=meta)
    return rec
