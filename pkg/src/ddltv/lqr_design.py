"""Finite-horizon and periodic LQR, both model-based (Riccati) and from data.

The model-based routines serve as validation oracles.  The data-driven
routines solve the trace-objective covariance-selection SDP whose optimal
gains coincide with the Riccati gains on noise-free, rank-satisfying data.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .data_ensemble import DataEnsemble
from .ltv_core import ContractViolation, LtvDynamics, Trajectory
from .sdp_backend import BlockExpr, LmiBuilder, SdpSolution, SdpStatus, SdpTolerances, solve
from .stability_design import GainSchedule, _require_rank

__all__ = [
    "LqrWeights",
    "LqrSolution",
    "RiccatiConvergenceError",
    "riccati_finite",
    "riccati_periodic",
    "lqr_data_finite",
    "lqr_data_periodic",
    "evaluate_cost",
    "sqrtm_psd",
]


class RiccatiConvergenceError(RuntimeError):
    """Backward Riccati iteration failed to reach a periodic fixed point."""


def _check_weight(mat, what, positive_definite=False):
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    if mat.shape[0] != mat.shape[1] or np.abs(mat - mat.T).max() > 1e-12 * max(1.0, np.abs(mat).max()):
        raise ContractViolation(f"{what} must be symmetric")
    lam = np.linalg.eigvalsh(mat)
    if positive_definite and lam.min() <= 0:
        raise ContractViolation(f"{what} must be positive definite")
    if not positive_definite and lam.min() < -1e-12 * max(1.0, lam.max()):
        raise ContractViolation(f"{what} must be positive semidefinite")
    return mat


@dataclass
class LqrWeights:
    """Quadratic stage weights ``Q(k)``, ``R(k)`` plus terminal ``Qf``.

    Either ``horizon`` (finite problem, with terminal weight) or ``period``
    (periodic infinite-horizon problem, weights repeat) is set, never both.
    """

    q_of_k: callable
    r_of_k: callable
    qf: np.ndarray | None = None
    horizon: int | None = None
    period: int | None = None

    def __post_init__(self):
        if (self.horizon is None) == (self.period is None):
            raise ContractViolation("set exactly one of horizon or period")
        if self.horizon is not None and self.horizon < 1:
            raise ContractViolation("horizon must be >= 1")
        if self.period is not None and self.period < 1:
            raise ContractViolation("period must be >= 1")
        if self.qf is not None:
            self.qf = _check_weight(self.qf, "Qf")

    def q(self, k: int) -> np.ndarray:
        k = k % self.period if self.period is not None else k
        return _check_weight(self.q_of_k(k), f"Q({k})")

    def r(self, k: int) -> np.ndarray:
        k = k % self.period if self.period is not None else k
        return _check_weight(self.r_of_k(k), f"R({k})", positive_definite=True)

    @classmethod
    def finite(cls, q, r, qf, horizon: int) -> "LqrWeights":
        q_tab = _as_table(q, horizon)
        r_tab = _as_table(r, horizon)
        return cls(q_of_k=lambda k: q_tab[min(k, horizon - 1)],
                   r_of_k=lambda k: r_tab[min(k, horizon - 1)],
                   qf=np.atleast_2d(np.asarray(qf, dtype=float)), horizon=horizon)

    @classmethod
    def periodic(cls, q, r, period: int) -> "LqrWeights":
        if callable(q) or callable(r):
            return cls(q_of_k=q if callable(q) else (lambda k: q),
                       r_of_k=r if callable(r) else (lambda k: r), period=period)
        q_tab = _as_table(q, period)
        r_tab = _as_table(r, period)
        return cls(q_of_k=lambda k: q_tab[k % period],
                   r_of_k=lambda k: r_tab[k % period], period=period)

    @classmethod
    def from_json(cls, doc: dict) -> "LqrWeights":
        if "period" in doc and doc["period"]:
            return cls.periodic(doc["q"], doc["r"], int(doc["period"]))
        return cls.finite(doc["q"], doc["r"], doc["qf"], int(doc["horizon"]))


def _as_table(val, count):
    arr = np.asarray(val, dtype=float)
    if arr.ndim <= 2:
        mat = np.atleast_2d(arr)
        return [mat] * count
    if arr.shape[0] < count:
        raise ContractViolation(f"weight table has {arr.shape[0]} entries, need {count}")
    return [np.atleast_2d(arr[k]) for k in range(count)]


def sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition."""
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    lam, vec = np.linalg.eigh((mat + mat.T) / 2.0)
    lam = np.clip(lam, 0.0, None)
    return (vec * np.sqrt(lam)) @ vec.T


def _riccati_step(a, b, q, r, p_next):
    btp = b.T @ p_next
    gram = r + btp @ b
    try:
        gain = -np.linalg.solve(gram, btp @ a)
    except np.linalg.LinAlgError as exc:
        raise ContractViolation("R + B'PB singular; check R > 0") from exc
    p_here = q + a.T @ p_next @ a + a.T @ btp.T @ gain
    return (p_here + p_here.T) / 2.0, gain


def riccati_finite(sys: LtvDynamics, w: LqrWeights):
    """Backward difference-Riccati recursion; returns the optimal schedule.

    ``schedule.certificate[k]`` stores the cost-to-go matrix, so the optimal
    cost from ``x0`` is ``x0' certificate[0] x0``.
    """
    if w.horizon is None:
        raise ContractViolation("riccati_finite needs finite-horizon weights")
    n_hor = w.horizon
    p_next = _check_weight(w.qf if w.qf is not None else np.zeros((sys.n, sys.n)), "Qf")
    pbar = {n_hor: p_next}
    gains = {}
    for k in range(n_hor - 1, -1, -1):
        p_next, gains[k] = _riccati_step(sys.a(k), sys.b(k), w.q(k), w.r(k), p_next)
        pbar[k] = p_next
    return GainSchedule(gains=gains, certificate=pbar,
                        meta={"design": "riccati_finite", "oracle": True})


def riccati_periodic(sys: LtvDynamics, w: LqrWeights, tol: float = 1e-10,
                     max_periods: int = 10000, p_start=None):
    """Periodic solution of the Riccati recursion by backward iteration.

    Sweeps backwards over whole periods until the cost-to-go table repeats
    period-to-period within ``tol``; requires a stabilizable/detectable
    periodic problem (asserted by the caller).
    """
    if w.period is None:
        raise ContractViolation("riccati_periodic needs periodic weights")
    phi = w.period
    if sys.period is not None and sys.period != phi:
        raise ContractViolation("plant period and weight period differ")
    a_tab = [sys.a(k) for k in range(phi)]
    b_tab = [sys.b(k) for k in range(phi)]
    q_tab = [w.q(k) for k in range(phi)]
    r_tab = [w.r(k) for k in range(phi)]

    p_next = (np.zeros((sys.n, sys.n)) if p_start is None
              else _check_weight(p_start, "p_start"))
    table = [None] * phi
    for sweep in range(max_periods):
        new_table = [None] * phi
        gains = [None] * phi
        for k in range(phi - 1, -1, -1):
            p_next, gains[k] = _riccati_step(a_tab[k], b_tab[k], q_tab[k], r_tab[k], p_next)
            new_table[k] = p_next
        if table[0] is not None:
            diff = max(np.abs(new_table[k] - table[k]).max() for k in range(phi))
            scale = 1.0 + max(np.abs(new_table[k]).max() for k in range(phi))
            if diff <= tol * scale:
                return GainSchedule(
                    gains={k: gains[k] for k in range(phi)}, periodic=phi,
                    certificate={k: new_table[k] for k in range(phi)},
                    meta={"design": "riccati_periodic", "oracle": True,
                          "sweeps": sweep + 1},
                )
        table = new_table
    raise RiccatiConvergenceError(
        f"no periodic fixed point within {max_periods} sweeps (tol={tol})"
    )


@dataclass
class LqrSolution:
    """Data-driven LQR outcome: gains, covariance certificates and slack traces."""

    status: SdpStatus
    gains: GainSchedule | None
    s: dict = field(default_factory=dict)
    o_trace: dict = field(default_factory=dict)
    objective: float | None = None
    solution: SdpSolution | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status.ok and self.gains is not None


def _add_lqr_step(b, ens, k, s_here, s_next, h_here, o_here, r_half):
    n, m = ens.n, ens.m
    lmi = BlockExpr.sym([n, n])
    lmi.const(0, 0, -np.eye(n)).term(0, 0, s_next)
    lmi.term(0, 1, h_here, left=ens.X[k + 1])
    lmi.term(1, 1, s_here)
    b.add_psd(lmi, name=f"cov{k}")
    lmi2 = BlockExpr.sym([m, n])
    lmi2.term(0, 0, o_here)
    lmi2.term(0, 1, h_here, left=r_half @ ens.U[k])
    lmi2.term(1, 1, s_here)
    b.add_psd(lmi2, name=f"slack{k}")
    eq = BlockExpr([n], [n])
    eq.term(0, 0, h_here, left=ens.X[k]).term(0, 0, s_here, scale=-1.0)
    b.add_eq(eq, name=f"data{k}")


def _extract_lqr(ens, sol, steps, s_index, periodic=None, meta=None):
    s_sol = {k: sol.values[f"S{s_index(k)}"] for k in list(steps) + [steps[-1] + 1]}
    h_sol = {k: sol.values[f"H{k}"] for k in steps}
    o_sol = {k: sol.values[f"O{k}"] for k in steps}
    from .stability_design import _gains_from_solution

    gains, max_cond = _gains_from_solution(
        (k, ens.U[k], h_sol[k], s_sol[k]) for k in steps
    )
    schedule = GainSchedule(
        gains=gains, periodic=periodic, certificate=s_sol, y_data=h_sol,
        meta=dict(meta or {}, max_certificate_cond=max_cond),
    )
    return schedule, s_sol, {k: float(np.trace(o_sol[k])) for k in steps}


def lqr_data_finite(ens: DataEnsemble, w: LqrWeights,
                    tol: SdpTolerances | None = None,
                    require_rank: bool = True) -> LqrSolution:
    """Finite-horizon LQR directly from noise-free data.

    Minimizes the covariance-selection trace objective subject to the
    data-parametrized step and slack LMIs; the optimal gains are
    ``K(k) = U(k) H(k) S(k)^{-1}``.
    """
    if w.horizon is None:
        raise ContractViolation("lqr_data_finite needs finite-horizon weights")
    n_hor = w.horizon
    if ens.k_start != 0:
        raise ContractViolation("LQR design expects data starting at k = 0")
    if ens.k_end < n_hor:
        warnings.warn(
            f"data window ends at {ens.k_end} < horizon {n_hor}; truncating horizon",
            stacklevel=2,
        )
        n_hor = ens.k_end
    verdicts = _require_rank(ens, require=require_rank, name="LQR window")
    n, m = ens.n, ens.m

    b = LmiBuilder()
    s_vars = {k: b.add_var(f"S{k}", n, n, symmetric=True) for k in range(n_hor + 1)}
    h_vars = {k: b.add_var(f"H{k}", ens.L, n) for k in range(n_hor)}
    o_vars = {k: b.add_var(f"O{k}", m, m, symmetric=True) for k in range(n_hor)}
    b.add_psd(BlockExpr.sym([n]).const(0, 0, -np.eye(n)).term(0, 0, s_vars[0]),
              name="S0_floor")
    for k in range(n_hor):
        _add_lqr_step(b, ens, k, s_vars[k], s_vars[k + 1], h_vars[k], o_vars[k],
                      sqrtm_psd(w.r(k)))
        b.add_objective_term(w.q(k), s_vars[k])
        b.add_objective_term(np.eye(m), o_vars[k])
    qf = w.qf if w.qf is not None else np.zeros((n, n))
    b.add_objective_term(qf, s_vars[n_hor])

    sol = solve(b.build(), tol)
    diag = {"rank": verdicts, "horizon": n_hor}
    if not sol.ok:
        return LqrSolution(sol.status, None, solution=sol, diagnostics=diag)
    schedule, s_sol, o_tr = _extract_lqr(ens, sol, list(range(n_hor)), lambda k: k,
                                         meta={"design": "lqr_data_finite"})
    return LqrSolution(sol.status, schedule, s_sol, o_tr, sol.objective, sol, diag)


def lqr_data_periodic(ens: DataEnsemble, w: LqrWeights,
                      tol: SdpTolerances | None = None,
                      require_rank: bool = True) -> LqrSolution:
    """Periodic infinite-horizon LQR from one period of data.

    Same per-step constraints over ``k = 0..phi-1`` with the closure
    ``S(phi) = S(0)``; the objective is the one-period optimal stage cost.
    """
    if w.period is None:
        raise ContractViolation("lqr_data_periodic needs periodic weights")
    phi = w.period
    if ens.k_start != 0 or ens.k_end < phi:
        raise ContractViolation(f"periodic LQR needs a data window covering [0, {phi}]")
    verdicts = _require_rank(ens, require=require_rank, name="periodic LQR window")
    n, m = ens.n, ens.m

    b = LmiBuilder()
    s_vars = {k: b.add_var(f"S{k}", n, n, symmetric=True) for k in range(phi)}
    h_vars = {k: b.add_var(f"H{k}", ens.L, n) for k in range(phi)}
    o_vars = {k: b.add_var(f"O{k}", m, m, symmetric=True) for k in range(phi)}
    b.add_psd(BlockExpr.sym([n]).const(0, 0, -np.eye(n)).term(0, 0, s_vars[0]),
              name="S0_floor")
    for k in range(phi):
        _add_lqr_step(b, ens, k, s_vars[k], s_vars[(k + 1) % phi], h_vars[k],
                      o_vars[k], sqrtm_psd(w.r(k)))
        b.add_objective_term(w.q(k), s_vars[k])
        b.add_objective_term(np.eye(m), o_vars[k])

    sol = solve(b.build(), tol)
    diag = {"rank": verdicts, "phi": phi}
    if not sol.ok:
        return LqrSolution(sol.status, None, solution=sol, diagnostics=diag)
    schedule, s_sol, o_tr = _extract_lqr(
        ens, sol, list(range(phi)), lambda k: k % phi, periodic=phi,
        meta={"design": "lqr_data_periodic"},
    )
    s_sol[phi] = s_sol[0]
    return LqrSolution(sol.status, schedule, s_sol, o_tr, sol.objective, sol, diag)


def evaluate_cost(traj: Trajectory, w: LqrWeights) -> float:
    """Quadratic cost of a trajectory.

    Finite weights: exact sum over the horizon plus the terminal term
    (trajectory must span the horizon).  Periodic weights: stage costs summed
    over the whole trajectory, truncating the infinite-horizon criterion at
    the trajectory length.
    """
    if w.horizon is not None:
        if traj.horizon < w.horizon:
            raise ContractViolation(
                f"trajectory spans {traj.horizon} steps, horizon needs {w.horizon}"
            )
        upto = w.horizon
    else:
        upto = traj.horizon
    total = 0.0
    for k in range(upto):
        x, u = traj.x[k], traj.u[k]
        total += float(x @ w.q(k) @ x + u @ w.r(k) @ u)
    if w.horizon is not None:
        qf = w.qf if w.qf is not None else np.zeros((traj.x.shape[1],) * 2)
        xf = traj.x[w.horizon]
        total += float(xf @ qf @ xf)
    return total
