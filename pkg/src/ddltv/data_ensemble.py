"""Ensembles of experiments and the per-step stacked data matrices.

An ensemble stacks ``L`` experiments column-wise per time step:
``X(k) = [x_1(k) ... x_L(k)]`` and ``U(k) = [u_1(k) ... u_L(k)]``.  For
noise-corrupted collection the measured stack ``Z(k) = X(k) + V(k)`` is stored
alongside (optionally) the unmeasured noise stacks used by test oracles.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .ltv_core import (
    ContractViolation,
    LtvDynamics,
    NoiseModel,
    Trajectory,
    _lookup_gain,
    simulate,
)

__all__ = [
    "DataEnsemble",
    "run_ensemble",
    "check_rank",
    "run_successive_ensemble",
    "fold_periodic",
    "unfold_periodic",
    "recover_g",
    "save_ensemble",
    "load_ensemble",
    "uniform_input_gen",
    "uniform_x0_gen",
]

#: relative singular-value threshold for the numerical rank test
RANK_REL_TOL = 1e-10

ENSEMBLE_SCHEMA = "ddltv.ensemble.v1"


@dataclass
class DataEnsemble:
    """Per-step stacked data matrices over a window ``[k_start, k_end]``.

    ``X[k]`` is defined for ``k_start <= k <= k_end`` and ``U[k]`` for
    ``k_start <= k <= k_end - 1``.  Column ``j`` of every stack belongs to
    experiment ``j``.  ``Z``/``V``/``D`` are present only for noisy
    collection (``Z = X + V``; ``D`` holds process-noise samples).
    """

    L: int
    k_start: int
    k_end: int
    X: dict
    U: dict
    Z: dict | None = None
    V: dict | None = None
    D: dict | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.L < 1:
            raise ContractViolation("ensemble needs L >= 1 experiments")
        if self.k_end <= self.k_start:
            raise ContractViolation("ensemble window is degenerate")
        for k in range(self.k_start, self.k_end + 1):
            if k not in self.X:
                raise ContractViolation(f"missing X({k}) in ensemble window")
        for k in range(self.k_start, self.k_end):
            if k not in self.U:
                raise ContractViolation(f"missing U({k}) in ensemble window")

    @property
    def n(self) -> int:
        return self.X[self.k_start].shape[0]

    @property
    def m(self) -> int:
        return self.U[self.k_start].shape[0]

    @property
    def steps(self):
        """Step indices carrying a (state, input, next-state) triple."""
        return range(self.k_start, self.k_end)

    def state_stack(self, k, use_noisy=False):
        src = self.Z if use_noisy else self.X
        if use_noisy and self.Z is None:
            raise ContractViolation("ensemble has no noisy measurement stacks")
        return src[k]

    def data_pair(self, k, use_noisy=False):
        return self.state_stack(k, use_noisy), self.U[k]

    def permuted(self, order) -> "DataEnsemble":
        """Same data with experiment columns reordered."""
        order = list(order)
        if sorted(order) != list(range(self.L)):
            raise ContractViolation("order must be a permutation of experiments")
        take = lambda d: None if d is None else {k: v[:, order] for k, v in d.items()}
        return DataEnsemble(
            L=self.L, k_start=self.k_start, k_end=self.k_end,
            X=take(self.X), U=take(self.U), Z=take(self.Z),
            V=take(self.V), D=take(self.D),
            provenance=dict(self.provenance, permuted=order),
        )


def uniform_input_gen(seed: int, m: int, lo: float = -1.0, hi: float = 1.0):
    """Exploring-input sampler ``(k, j) -> m-vector``, uniform on ``(lo, hi)``."""

    def gen(k, j):
        rng = np.random.default_rng([seed, k, j, 2])
        return rng.uniform(lo, hi, size=m)

    return gen


def uniform_x0_gen(seed: int, n: int, lo: float = -1.0, hi: float = 1.0):
    """Initial-condition sampler ``(j, attempt) -> n-vector``."""

    def gen(j, attempt=0):
        rng = np.random.default_rng([seed, j, attempt, 3])
        return rng.uniform(lo, hi, size=n)

    return gen


def _draw_distinct_x0(x0_gen, L, n, max_retries):
    """Distinct initial conditions per experiment (exact-equality rejection)."""
    seen = []
    out = []
    for j in range(L):
        for attempt in range(max_retries + 1):
            try:
                x0 = np.asarray(x0_gen(j, attempt), dtype=float).reshape(n)
            except TypeError:
                x0 = np.asarray(x0_gen(j), dtype=float).reshape(n)
                if any(np.array_equal(x0, s) for s in seen):
                    raise ContractViolation(
                        "x0 sampler repeats initial conditions and does not "
                        "accept a retry attempt argument"
                    )
            if not any(np.array_equal(x0, s) for s in seen):
                break
        else:
            raise ContractViolation(
                f"could not draw a distinct x0 for experiment {j} "
                f"within {max_retries} retries"
            )
        seen.append(x0)
        out.append(x0)
    return out


def _stack_trajectories(trajs, k_start, k_end, store_noise):
    X = {k: np.column_stack([t.x[k] for t in trajs]) for k in range(k_start, k_end + 1)}
    U = {k: np.column_stack([t.u[k] for t in trajs]) for k in range(k_start, k_end)}
    Z = V = D = None
    if trajs[0].zeta is not None:
        Z = {k: np.column_stack([t.zeta[k] for t in trajs]) for k in range(k_start, k_end + 1)}
        if store_noise:
            V = {k: np.column_stack([t.v[k] for t in trajs]) for k in range(k_start, k_end + 1)}
            D = {k: np.column_stack([t.d[k] for t in trajs]) for k in range(k_start, k_end)}
    return X, U, Z, V, D


def run_ensemble(
    sys: LtvDynamics,
    L: int,
    window,
    input_gen: Callable,
    x0_gen: Callable,
    noise: NoiseModel | None = None,
    store_noise: bool = True,
    max_retries: int = 100,
) -> DataEnsemble:
    """Run ``L`` independent open-loop experiments and stack their data.

    ``window = (k_start, k_end)`` selects the retained samples; experiments
    always start at ``k = 0``.  Initial conditions are forced distinct across
    experiments (resampled up to ``max_retries`` times).
    """
    k_start, k_end = window
    if k_start < 0 or k_end <= k_start:
        raise ContractViolation("window must satisfy 0 <= k_start < k_end")
    x0s = _draw_distinct_x0(x0_gen, L, sys.n, max_retries)
    trajs = []
    for j in range(L):
        policy = lambda k, z, j=j: input_gen(k, j)
        trajs.append(simulate(sys, x0s[j], policy, T=k_end, noise=noise, experiment=j))
    X, U, Z, V, D = _stack_trajectories(trajs, k_start, k_end, store_noise)
    prov = {
        "kind": "open_loop",
        "plant": sys.label,
        "L": L,
        "window": [k_start, k_end],
        "noise_seed": noise.seed if noise is not None else None,
    }
    return DataEnsemble(L=L, k_start=k_start, k_end=k_end, X=X, U=U, Z=Z, V=V, D=D,
                        provenance=prov)


def run_successive_ensemble(
    sys: LtvDynamics,
    prior_gains,
    interval,
    L: int,
    explore_gen: Callable,
    x0_gen: Callable,
    max_retries: int = 100,
) -> DataEnsemble:
    """Collect one successive ensemble for the interval ``[T_prev, T_i]``.

    Each experiment replays the previously designed feedback for
    ``k = 0..T_prev-2`` and switches to open-loop exploring inputs from
    ``k = T_prev-1`` (one step before the interval, so the experiments enter
    it at distinct states).  Only data on the interval is retained.
    """
    t_prev, t_i = interval
    if t_prev < 0 or t_i <= t_prev:
        raise ContractViolation("interval must satisfy 0 <= T_prev < T_i")
    if t_prev == 0:
        return run_ensemble(sys, L, (0, t_i), explore_gen, x0_gen,
                            max_retries=max_retries)
    if prior_gains is None:
        raise ContractViolation("prior gains are required when T_prev > 0")
    for k in range(t_prev - 1):
        _lookup_gain(prior_gains, k)  # fail fast on missing prefix gains

    def policy(k, z, j):
        if k <= t_prev - 2:
            return np.asarray(_lookup_gain(prior_gains, k)) @ z
        return explore_gen(k, j)

    x0s = _draw_distinct_x0(x0_gen, L, sys.n, max_retries)
    trajs = [
        simulate(sys, x0s[j], lambda k, z, j=j: policy(k, z, j), T=t_i, experiment=j)
        for j in range(L)
    ]
    X, U, Z, V, D = _stack_trajectories(trajs, t_prev, t_i, store_noise=False)
    prov = {"kind": "successive", "plant": sys.label, "L": L, "window": [t_prev, t_i]}
    return DataEnsemble(L=L, k_start=t_prev, k_end=t_i, X=X, U=U, Z=Z, V=V, D=D,
                        provenance=prov)


def check_rank(ens: DataEnsemble, use_noisy: bool = False, rel_tol: float = RANK_REL_TOL):
    """Per-step verdicts of ``rank [X(k); U(k)] = n + m`` (or ``[Z(k); U(k)]``).

    Numerical rank via singular values with the relative threshold
    ``sigma_min > max(n+m, L) * sigma_max * rel_tol``.
    """
    n_plus_m = ens.n + ens.m
    verdicts = {}
    for k in ens.steps:
        stacked = np.vstack(ens.data_pair(k, use_noisy))
        sv = np.linalg.svd(stacked, compute_uv=False)
        if ens.L < n_plus_m:
            verdicts[k] = False
            continue
        threshold = max(n_plus_m, ens.L) * sv[0] * rel_tol
        verdicts[k] = bool(sv[n_plus_m - 1] > threshold)
    return verdicts


def rank_ok(ens: DataEnsemble, use_noisy: bool = False) -> bool:
    return all(check_rank(ens, use_noisy).values())


def fold_periodic(traj: Trajectory, phi: int, L: int) -> DataEnsemble:
    """Fold one long trajectory of a ``phi``-periodic plant into ``L`` experiments.

    Experiment ``j`` contributes the samples at global steps
    ``k + (j-1) * phi`` for local ``k = 0..phi``; the window becomes
    ``[0, phi]``.  The trajectory must span ``k = 0..phi*L``.
    """
    if phi < 1 or L < 1:
        raise ContractViolation("phi and L must be positive")
    if traj.horizon < phi * L:
        raise ContractViolation(
            f"trajectory spans {traj.horizon} steps, need at least {phi * L}"
        )
    X = {k: np.column_stack([traj.x[k + j * phi] for j in range(L)]) for k in range(phi + 1)}
    U = {k: np.column_stack([traj.u[k + j * phi] for j in range(L)]) for k in range(phi)}
    Z = None
    if traj.zeta is not None:
        Z = {k: np.column_stack([traj.zeta[k + j * phi] for j in range(L)])
             for k in range(phi + 1)}
    V = D = None
    if traj.v is not None:
        V = {k: np.column_stack([traj.v[k + j * phi] for j in range(L)])
             for k in range(phi + 1)}
        D = {k: np.column_stack([traj.d[k + j * phi] for j in range(L)])
             for k in range(phi)}
    prov = {"kind": "folded", "phi": phi, "L": L}
    return DataEnsemble(L=L, k_start=0, k_end=phi, X=X, U=U, Z=Z, V=V, D=D,
                        provenance=prov)


def unfold_periodic(ens: DataEnsemble):
    """Inverse of :func:`fold_periodic`: recover the flat ``x``/``u`` sample arrays."""
    phi = ens.k_end - ens.k_start
    if ens.k_start != 0:
        raise ContractViolation("folded ensembles start at k = 0")
    total = phi * ens.L
    x = np.zeros((total + 1, ens.n))
    u = np.zeros((total, ens.m))
    for t in range(total + 1):
        j, k = divmod(t, phi)
        if j == ens.L:  # top boundary maps to the last experiment's final sample
            j, k = ens.L - 1, phi
        x[t] = ens.X[k][:, j]
        if t < total:
            u[t] = ens.U[k][:, j]
    return x, u


def recover_g(ens: DataEnsemble, gain, k: int, use_noisy: bool = False) -> np.ndarray:
    """Minimum-norm ``G(k)`` with ``[X(k); U(k)] G(k) = [I; K(k)]``.

    The identity is underdetermined for ``L > n + m``; the pseudo-inverse
    solution is the canonical representative used by tests.
    """
    gain = np.atleast_2d(np.asarray(gain, dtype=float))
    stacked = np.vstack(ens.data_pair(k, use_noisy))
    target = np.vstack([np.eye(ens.n), gain])
    g, *_ = np.linalg.lstsq(stacked, target, rcond=None)
    return g


# -- serialization ----------------------------------------------------------


def _encode_stack(stack, binary):
    if stack is None:
        return None
    out = {}
    for k, mat in stack.items():
        if binary:
            out[str(k)] = {
                "shape": list(mat.shape),
                "b64": base64.b64encode(np.ascontiguousarray(mat).tobytes()).decode(),
            }
        else:
            out[str(k)] = mat.tolist()
    return out


def _decode_stack(payload):
    if payload is None:
        return None
    out = {}
    for key, val in payload.items():
        if isinstance(val, dict):
            mat = np.frombuffer(base64.b64decode(val["b64"]), dtype=float)
            out[int(key)] = mat.reshape(val["shape"]).copy()
        else:
            out[int(key)] = np.asarray(val, dtype=float)
    return out


def save_ensemble(ens: DataEnsemble, path, binary: bool = True):
    """Lossless JSON round trip; ``binary`` base64-encodes the float payloads."""
    doc = {
        "schema": ENSEMBLE_SCHEMA,
        "L": ens.L,
        "k_start": ens.k_start,
        "k_end": ens.k_end,
        "binary": binary,
        "X": _encode_stack(ens.X, binary),
        "U": _encode_stack(ens.U, binary),
        "Z": _encode_stack(ens.Z, binary),
        "V": _encode_stack(ens.V, binary),
        "D": _encode_stack(ens.D, binary),
        "provenance": ens.provenance,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


class SchemaError(ValueError):
    """Ensemble file does not match the expected schema."""


def load_ensemble(path) -> DataEnsemble:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema") != ENSEMBLE_SCHEMA:
        raise SchemaError(f"unsupported ensemble schema: {doc.get('schema')!r}")
    if doc.get("L", 0) < 1:
        raise SchemaError("ensemble file declares L < 1")
    try:
        return DataEnsemble(
            L=doc["L"], k_start=doc["k_start"], k_end=doc["k_end"],
            X=_decode_stack(doc["X"]), U=_decode_stack(doc["U"]),
            Z=_decode_stack(doc["Z"]), V=_decode_stack(doc["V"]),
            D=_decode_stack(doc["D"]), provenance=doc.get("provenance", {}),
        )
    except (KeyError, ContractViolation) as exc:
        raise SchemaError(f"corrupt ensemble file: {exc}") from exc


def export_csv(ens: DataEnsemble, path):
    """Plotting-friendly CSV: one row per (step, experiment)."""
    n, m = ens.n, ens.m
    header = ["k", "experiment"] + [f"x{i}" for i in range(n)] + [f"u{i}" for i in range(m)]
    rows = []
    for k in range(ens.k_start, ens.k_end + 1):
        for j in range(ens.L):
            u = ens.U[k][:, j] if k < ens.k_end else np.full(m, np.nan)
            rows.append([k, j] + list(ens.X[k][:, j]) + list(u))
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")
