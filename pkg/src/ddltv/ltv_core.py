"""Discrete-time LTV plant models, simulation and periodic-system utilities.

A plant is a pair of step-indexed matrices ``A(k)`` (n x n) and ``B(k)``
(n x m) driving ``x(k+1) = A(k) x(k) + B(k) u(k) + d(k)``.  Plants can be
defined by closures or by tabulated matrix sequences; the tabulated form is
the canonical one for serialization.  Noise enters as an additive process
term ``d(k)`` and as measurement corruption ``zeta(k) = x(k) + v(k)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "ContractViolation",
    "LtvDynamics",
    "NoiseModel",
    "Trajectory",
    "step",
    "simulate",
    "monodromy",
    "spectral_radius",
]

#: spectral-radius threshold below which a loop is declared stable;
#: marginal loops (rho within 1e-9 of 1) are not called stable.
STABILITY_MARGIN = 1e-9


class ContractViolation(ValueError):
    """An argument violated a documented precondition (dimension, range, ...)."""


def _as_matrix(value, rows, cols, what, k=None):
    mat = np.atleast_2d(np.asarray(value, dtype=float))
    if mat.shape != (rows, cols):
        where = f" at k={k}" if k is not None else ""
        raise ContractViolation(
            f"{what}{where} has shape {mat.shape}, expected {(rows, cols)}"
        )
    return mat


def _as_vector(value, dim, what):
    vec = np.asarray(value, dtype=float).reshape(-1)
    if vec.shape != (dim,):
        raise ContractViolation(f"{what} has shape {np.shape(value)}, expected ({dim},)")
    return vec


@dataclass(frozen=True)
class LtvDynamics:
    """Time-indexed plant ``(A(k), B(k))`` with optional period.

    ``a_of_k``/``b_of_k`` map a step index ``k >= 0`` to the system matrices.
    If ``period`` is set the maps must be periodic with that period; tabulated
    constructors enforce this by construction (lookup is modulo the period).
    """

    n: int
    m: int
    a_of_k: Callable[[int], np.ndarray]
    b_of_k: Callable[[int], np.ndarray]
    period: int | None = None
    label: str = "ltv"

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ContractViolation("state and input dimensions must be positive")
        if self.period is not None and self.period < 1:
            raise ContractViolation("period must be a positive integer")

    def a(self, k: int) -> np.ndarray:
        return _as_matrix(self.a_of_k(k), self.n, self.n, "A(k)", k)

    def b(self, k: int) -> np.ndarray:
        return _as_matrix(self.b_of_k(k), self.n, self.m, "B(k)", k)

    @classmethod
    def from_tables(cls, a_seq, b_seq, period=None, label="ltv"):
        """Plant from tabulated matrix sequences.

        Without a period, ``a_seq[k]`` is used for ``k < len(a_seq)`` and the
        last entry is held beyond the table.  With a period the tables must
        cover exactly one period and lookup wraps around.
        """
        a_tab = [np.atleast_2d(np.asarray(a, dtype=float)) for a in a_seq]
        b_tab = [np.atleast_2d(np.asarray(b, dtype=float)) for b in b_seq]
        if not a_tab or not b_tab:
            raise ContractViolation("matrix tables must be non-empty")
        n = a_tab[0].shape[0]
        m = b_tab[0].shape[1]
        if period is not None and (len(a_tab) != period or len(b_tab) != period):
            raise ContractViolation("periodic tables must cover exactly one period")

        if period is not None:
            a_fn = lambda k: a_tab[k % period]
            b_fn = lambda k: b_tab[k % period]
        else:
            a_fn = lambda k: a_tab[min(k, len(a_tab) - 1)]
            b_fn = lambda k: b_tab[min(k, len(b_tab) - 1)]
        return cls(n=n, m=m, a_of_k=a_fn, b_of_k=b_fn, period=period, label=label)

    @classmethod
    def lti(cls, a, b, label="lti"):
        a = np.atleast_2d(np.asarray(a, dtype=float))
        b = np.atleast_2d(np.asarray(b, dtype=float))
        if b.shape[0] != a.shape[0]:
            b = b.reshape(a.shape[0], -1)
        return cls.from_tables([a], [b], period=1, label=label)

    def tabulate(self, horizon: int):
        """Return ``(A(0..horizon-1), B(0..horizon-1))`` as stacked arrays."""
        a = np.stack([self.a(k) for k in range(horizon)])
        b = np.stack([self.b(k) for k in range(horizon)])
        return a, b

    def to_json(self, horizon: int | None = None) -> dict:
        """Canonical tabulated serialization (row-major matrix payloads)."""
        if self.period is not None:
            horizon = self.period
        if horizon is None:
            raise ContractViolation("aperiodic plants need an explicit horizon to serialize")
        a, b = self.tabulate(horizon)
        return {
            "schema": "ddltv.plant.v1",
            "n": self.n,
            "m": self.m,
            "period": self.period,
            "label": self.label,
            "a": a.tolist(),
            "b": b.tolist(),
        }

    @classmethod
    def from_json(cls, payload: dict) -> "LtvDynamics":
        if payload.get("schema") != "ddltv.plant.v1":
            raise ContractViolation(f"unsupported plant schema: {payload.get('schema')!r}")
        return cls.from_tables(
            payload["a"], payload["b"], period=payload.get("period"),
            label=payload.get("label", "ltv"),
        )

    def save(self, path, horizon: int | None = None):
        with open(path, "w") as fh:
            json.dump(self.to_json(horizon), fh, indent=1)

    @classmethod
    def load(cls, path) -> "LtvDynamics":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def _noise_rng(seed, k, experiment, channel):
    # Per-call counter-based stream: deterministic in (seed, k, experiment,
    # channel) regardless of sampling order.
    return np.random.default_rng([seed, k, experiment, channel])


@dataclass(frozen=True)
class NoiseModel:
    """Deterministic per-step noise samplers for process and measurement noise.

    Each spec is ``None`` (channel off), ``("uniform", lo, hi)`` or
    ``("gauss", sigma)``.  Samples are fully determined by
    ``(seed, k, experiment, channel)``.
    """

    n: int
    seed: int
    process: tuple | None = None
    measurement: tuple | None = None

    def _sample(self, spec, k, experiment, channel):
        if spec is None:
            return np.zeros(self.n)
        rng = _noise_rng(self.seed, k, experiment, channel)
        kind = spec[0]
        if kind == "uniform":
            return rng.uniform(spec[1], spec[2], size=self.n)
        if kind == "gauss":
            return rng.normal(0.0, spec[1], size=self.n)
        raise ContractViolation(f"unknown noise spec {spec!r}")

    def process_sample(self, k: int, experiment: int = 0) -> np.ndarray:
        return self._sample(self.process, k, experiment, 0)

    def measurement_sample(self, k: int, experiment: int = 0) -> np.ndarray:
        return self._sample(self.measurement, k, experiment, 1)


@dataclass
class Trajectory:
    """State/input record of one simulated experiment.

    ``x`` has ``T+1`` rows and ``u`` has ``T`` rows.  When simulated with a
    noise model, ``zeta`` holds the noisy measurements fed to the policy and
    ``d``/``v`` store the realized noise samples.
    """

    x: np.ndarray
    u: np.ndarray
    zeta: np.ndarray | None = None
    d: np.ndarray | None = None
    v: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.u = np.atleast_2d(np.asarray(self.u, dtype=float))
        if len(self.x) != len(self.u) + 1:
            raise ContractViolation("trajectory needs |x| = |u| + 1")
        if self.zeta is not None and len(self.zeta) != len(self.x):
            raise ContractViolation("zeta must have one sample per state sample")

    @property
    def horizon(self) -> int:
        return len(self.u)

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.x, axis=1)

    def to_json(self) -> dict:
        doc = {"schema": "ddltv.trajectory.v1", "x": self.x.tolist(),
               "u": self.u.tolist()}
        for name in ("zeta", "d", "v"):
            val = getattr(self, name)
            doc[name] = None if val is None else np.asarray(val).tolist()
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "Trajectory":
        if doc.get("schema") != "ddltv.trajectory.v1":
            raise ContractViolation(f"unsupported trajectory schema {doc.get('schema')!r}")
        opt = {name: (None if doc.get(name) is None else np.asarray(doc[name], dtype=float))
               for name in ("zeta", "d", "v")}
        return cls(x=np.asarray(doc["x"], dtype=float),
                   u=np.asarray(doc["u"], dtype=float), **opt)


def step(sys: LtvDynamics, k: int, x, u, d=None) -> np.ndarray:
    """One plant step ``A(k) x + B(k) u + d``."""
    x = _as_vector(x, sys.n, "x")
    u = _as_vector(u, sys.m, "u")
    out = sys.a(k) @ x + sys.b(k) @ u
    if d is not None:
        out = out + _as_vector(d, sys.n, "d")
    return out


def simulate(
    sys: LtvDynamics,
    x0,
    policy: Callable[[int, np.ndarray], np.ndarray],
    T: int,
    noise: NoiseModel | None = None,
    experiment: int = 0,
) -> Trajectory:
    """Roll the plant forward for ``T`` steps under a measurement-feedback policy.

    The policy receives ``(k, zeta(k))`` where ``zeta(k) = x(k) + v(k)`` when a
    noise model is given and the true state otherwise.  Realized noise samples
    are stored in the returned trajectory.
    """
    if T < 1:
        raise ContractViolation("horizon T must be >= 1")
    x = np.zeros((T + 1, sys.n))
    u = np.zeros((T, sys.m))
    x[0] = _as_vector(x0, sys.n, "x0")
    zeta = v = d = None
    if noise is not None:
        zeta = np.zeros((T + 1, sys.n))
        v = np.zeros((T + 1, sys.n))
        d = np.zeros((T, sys.n))

    for k in range(T):
        if noise is not None:
            v[k] = noise.measurement_sample(k, experiment)
            zeta[k] = x[k] + v[k]
            measurement = zeta[k]
        else:
            measurement = x[k]
        u[k] = _as_vector(policy(k, measurement), sys.m, "policy output")
        dk = noise.process_sample(k, experiment) if noise is not None else None
        if dk is not None:
            d[k] = dk
        x[k + 1] = step(sys, k, x[k], u[k], dk)

    if noise is not None:
        v[T] = noise.measurement_sample(T, experiment)
        zeta[T] = x[T] + v[T]
    return Trajectory(x=x, u=u, zeta=zeta, d=d, v=v)


def zero_policy(sys: LtvDynamics) -> Callable[[int, np.ndarray], np.ndarray]:
    return lambda k, z: np.zeros(sys.m)


def spectral_radius(mat) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(np.atleast_2d(mat)))))


def monodromy(sys: LtvDynamics, gains, phi: int):
    """Closed-loop one-period transition matrix and its spectral radius.

    ``gains`` is anything exposing ``gain(k) -> m x n`` (a ``GainSchedule``)
    or a plain mapping ``k -> matrix``; gains must exist for ``k = 0..phi-1``.
    Returns ``(Pi, rho)`` with ``Pi = A_cl(phi-1) ... A_cl(0)``.
    """
    if sys.period is not None and sys.period != phi:
        raise ContractViolation(f"plant period {sys.period} does not match phi={phi}")
    pi = np.eye(sys.n)
    for k in range(phi):
        kk = _lookup_gain(gains, k)
        kk = _as_matrix(kk, sys.m, sys.n, "K(k)", k)
        pi = (sys.a(k) + sys.b(k) @ kk) @ pi
    return pi, spectral_radius(pi)


def is_stable(rho: float) -> bool:
    return rho < 1.0 - STABILITY_MARGIN


def _lookup_gain(gains, k):
    if hasattr(gains, "gain"):
        return gains.gain(k)
    if callable(gains):
        return gains(k)
    try:
        return gains[k]
    except KeyError as exc:
        raise ContractViolation(f"no gain stored for step k={k}") from exc
