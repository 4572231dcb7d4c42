"""Gain-schedule synthesis with trajectory-bound guarantees, from data only.

Feasible designs return a time-indexed state-feedback schedule together with
its Lyapunov-style certificate matrices and the ``(eta, rho)`` constants of
the closed-loop norm bound

    ||x(k)|| <= sqrt(rho/eta) * (1 - 1/rho)^(k/2) * ||x(0)||.

Variants cover a single data window, joint synthesis over successive data
windows, sequential extension of a previously certified schedule, and
periodic stabilization from one period of data.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla

from .data_ensemble import DataEnsemble, check_rank
from .ltv_core import ContractViolation
from .sdp_backend import (
    BlockExpr,
    LmiBuilder,
    SdpSolution,
    SdpStatus,
    SdpTolerances,
    solve,
)

__all__ = [
    "GainSchedule",
    "DesignResult",
    "RankConditionError",
    "BoundCurve",
    "trajectory_bound",
    "design_bounded",
    "design_bounded_successive",
    "extend_gain_sequential",
    "design_periodic_stabilizer",
]

GAIN_SCHEMA = "ddltv.gains.v1"


class RankConditionError(ContractViolation):
    """The per-step data rank condition fails on the design window."""


def _validate_eta_rho(eta, rho):
    if not (eta >= 1.0):
        raise ContractViolation(f"eta must satisfy eta >= 1, got {eta}")
    if not (rho > eta):
        raise ContractViolation(f"rho must satisfy rho > eta, got rho={rho}, eta={eta}")


@dataclass
class GainSchedule:
    """Time-indexed feedback gains plus certificates and bound constants.

    ``gains[k]`` is the m x n feedback applied at step ``k``; periodic
    schedules wrap the lookup modulo the period.  ``certificate`` holds the
    per-step certificate matrices (``P(k)`` for bound designs, ``S(k)`` for
    the optimal-control designs), ``y_data`` the raw solution matrices needed
    to extend the schedule, and ``boundary_gram`` the end-of-window matrix
    used by the sequential extension constraint.
    """

    gains: dict
    eta: float | None = None
    rho: float | None = None
    periodic: int | None = None
    certificate: dict = field(default_factory=dict)
    y_data: dict = field(default_factory=dict)
    boundary_gram: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.eta is not None and self.rho is not None:
            _validate_eta_rho(self.eta, self.rho)
            tol = 1e-6 * max(1.0, self.rho)
            for k, p in self.certificate.items():
                lam = np.linalg.eigvalsh((p + p.T) / 2.0)
                if lam.min() < self.eta - tol or lam.max() > self.rho + tol:
                    raise ContractViolation(
                        f"certificate P({k}) violates eta I <= P <= rho I"
                    )
        if self.periodic is not None:
            if sorted(self.gains) != list(range(self.periodic)):
                raise ContractViolation("periodic schedule must store gains for 0..phi-1")

    @property
    def window(self):
        ks = sorted(self.gains)
        return (ks[0], ks[-1] + 1)

    def gain(self, k: int) -> np.ndarray:
        if self.periodic is not None:
            return self.gains[k % self.periodic]
        try:
            return self.gains[k]
        except KeyError as exc:
            raise ContractViolation(f"no gain stored for step k={k}") from exc

    def policy(self):
        return lambda k, z: self.gain(k) @ z

    def to_json(self, include_certificates: bool = False) -> dict:
        doc = {
            "schema": GAIN_SCHEMA,
            "eta": self.eta,
            "rho": self.rho,
            "periodic": self.periodic,
            "window": list(self.window),
            "gains": {str(k): v.tolist() for k, v in sorted(self.gains.items())},
            "certificate_hashes": {
                str(k): _mat_hash(p) for k, p in sorted(self.certificate.items())
            },
            "meta": _json_safe(self.meta),
        }
        if include_certificates:
            doc["certificates"] = {
                str(k): p.tolist() for k, p in sorted(self.certificate.items())
            }
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "GainSchedule":
        if doc.get("schema") != GAIN_SCHEMA:
            raise ContractViolation(f"unsupported gain schema {doc.get('schema')!r}")
        gains = {int(k): np.asarray(v, dtype=float) for k, v in doc["gains"].items()}
        certs = {
            int(k): np.asarray(v, dtype=float)
            for k, v in doc.get("certificates", {}).items()
        }
        return cls(gains=gains, eta=doc.get("eta"), rho=doc.get("rho"),
                   periodic=doc.get("periodic"), certificate=certs,
                   meta=doc.get("meta", {}))

    def save(self, path, include_certificates: bool = False):
        with open(path, "w") as fh:
            json.dump(self.to_json(include_certificates), fh, indent=1)

    @classmethod
    def load(cls, path) -> "GainSchedule":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def _mat_hash(mat) -> str:
    return hashlib.sha256(np.ascontiguousarray(mat, dtype=float).tobytes()).hexdigest()


def _json_safe(value):
    """Keep only JSON-representable metadata (solver byproducts are dropped)."""
    if isinstance(value, dict):
        out = {}
        for key, val in value.items():
            safe = _json_safe(val)
            if safe is not _DROP:
                out[str(key)] = safe
        return out
    if isinstance(value, (list, tuple)):
        return [v for v in (_json_safe(x) for x in value) if v is not _DROP]
    if isinstance(value, (str, bool)) or value is None:
        return value
    if isinstance(value, (int, float, np.integer, np.floating)):
        return float(value) if isinstance(value, (float, np.floating)) else int(value)
    return _DROP


_DROP = object()


@dataclass
class DesignResult:
    """Outcome of one synthesis call; ``schedule`` is None unless feasible."""

    status: SdpStatus
    schedule: GainSchedule | None
    solution: SdpSolution | None
    diagnostics: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status.ok and self.schedule is not None


class BoundCurve:
    """Evaluation of the closed-loop trajectory bound as a function of ``k``."""

    def __init__(self, eta: float, rho: float, x0_norm: float):
        _validate_eta_rho(eta, rho)
        self.eta = eta
        self.rho = rho
        self.x0_norm = float(x0_norm)

    def __call__(self, k):
        k = np.asarray(k, dtype=float)
        return np.sqrt(self.rho / self.eta) * (1.0 - 1.0 / self.rho) ** (k / 2.0) * self.x0_norm


def trajectory_bound(eta: float, rho: float, x0_norm: float, k) -> float:
    """Closed-loop norm bound ``sqrt(rho/eta) (1 - 1/rho)^(k/2) ||x0||``."""
    return float(BoundCurve(eta, rho, x0_norm)(k))


def _spd_inverse_apply(p: np.ndarray, rhs_t: np.ndarray):
    """Solve ``P X = rhs_t`` for SPD ``P``; returns (X, cond(P))."""
    factor = sla.cho_factor((p + p.T) / 2.0)
    return sla.cho_solve(factor, rhs_t), float(np.linalg.cond(p))


def _require_rank(ens: DataEnsemble, use_noisy=False, require=True, name="ensemble"):
    verdicts = check_rank(ens, use_noisy=use_noisy)
    if require and not all(verdicts.values()):
        bad = [k for k, v in verdicts.items() if not v]
        raise RankConditionError(
            f"{name}: rank condition fails at steps {bad[:8]}{'...' if len(bad) > 8 else ''}"
        )
    return verdicts


def _boundary_gram(x_next, y_last, p_last):
    inv_apply, _ = _spd_inverse_apply(p_last, y_last.T @ x_next.T)
    gram = x_next @ y_last @ inv_apply
    return (gram + gram.T) / 2.0


def _gains_from_solution(pairs):
    """``K(k) = U(k) Y(k) P(k)^{-1}`` for (k, U, Y, P) tuples; logs max cond."""
    gains = {}
    max_cond = 0.0
    for k, u, y, p in pairs:
        inv_t, cond = _spd_inverse_apply(p, (u @ y).T)
        gains[k] = inv_t.T
        max_cond = max(max_cond, cond)
    return gains, max_cond


def tune_rho(
    design_fn,
    ens,
    eta: float = 1.0,
    grid=(2.0, 5.0, 10.0, 20.0, 50.0, 100.0),
    **kwargs,
) -> DesignResult:
    """Outer search over the bound constant: first feasible ``rho`` on a grid.

    ``design_fn`` is any of the bounded-design entry points taking
    ``(ens, eta, rho, ...)``.  Returns the first feasible result (smallest
    ``rho`` hence tightest decay bound), or the last attempt's result.
    """
    last = None
    for rho in grid:
        if rho <= eta:
            continue
        last = design_fn(ens, eta, rho, **kwargs)
        if last.ok:
            return last
    return last


def design_bounded(
    ens: DataEnsemble,
    eta: float = 1.0,
    rho: float = 10.0,
    tol: SdpTolerances | None = None,
    require_rank: bool = True,
) -> DesignResult:
    """Bounded-trajectory synthesis over one data window.

    Feasibility problem per window step ``k``: the 2x2-block LMI coupling
    ``P(k+1)`` and ``X(k+1) Y(k)``, the data equality ``X(k) Y(k) = P(k)``
    and the box ``eta I <= P(k) <= rho I``; gains are
    ``K(k) = U(k) Y(k) P(k)^{-1}``.

    ``require_rank=False`` attempts the solve even when the numerical rank
    test fails (used to reproduce the divergence failure mode on long
    open-loop windows); the guarantee is void in that case.
    """
    _validate_eta_rho(eta, rho)
    verdicts = _require_rank(ens, require=require_rank)
    n = ens.n

    b = LmiBuilder()
    p_vars = {k: b.add_var(f"P{k}", n, n, symmetric=True)
              for k in range(ens.k_start, ens.k_end + 1)}
    y_vars = {k: b.add_var(f"Y{k}", ens.L, n) for k in ens.steps}
    for k in ens.steps:
        _add_bound_step(b, ens.X[k + 1], ens.X[k], p_vars[k], p_vars[k + 1], y_vars[k], k)
    for k, p in p_vars.items():
        b.add_box(p, eta, rho)

    sol = solve(b.build(), tol)
    diag = {"rank": verdicts}
    if not sol.ok:
        return DesignResult(sol.status, None, sol, diag)
    return _bounded_schedule(ens, sol, eta, rho, diag)


def _add_bound_step(b, x_next, x_here, p_here, p_next, y_here, k):
    n = x_next.shape[0]
    lmi = BlockExpr.sym([n, n])
    lmi.const(0, 0, -np.eye(n)).term(0, 0, p_next)
    lmi.term(0, 1, y_here, left=x_next)
    lmi.term(1, 1, p_here)
    b.add_psd(lmi, name=f"bound{k}")
    eq = BlockExpr([n], [n])
    eq.term(0, 0, y_here, left=x_here).term(0, 0, p_here, scale=-1.0)
    b.add_eq(eq, name=f"data{k}")


def _bounded_schedule(ens, sol, eta, rho, diag, extra_meta=None):
    p_sol = {k: sol.values[f"P{k}"] for k in range(ens.k_start, ens.k_end + 1)}
    y_sol = {k: sol.values[f"Y{k}"] for k in ens.steps}
    gains, max_cond = _gains_from_solution(
        (k, ens.U[k], y_sol[k], p_sol[k]) for k in ens.steps
    )
    gram = _boundary_gram(ens.X[ens.k_end], y_sol[ens.k_end - 1], p_sol[ens.k_end - 1])
    meta = {"design": "bounded", "max_certificate_cond": max_cond}
    meta.update(extra_meta or {})
    schedule = GainSchedule(gains=gains, eta=eta, rho=rho, certificate=p_sol,
                            y_data=y_sol, boundary_gram=gram, meta=meta)
    return DesignResult(sol.status, schedule, sol, diag)


def _validate_chain(ens_list):
    if not ens_list:
        raise ContractViolation("need at least one ensemble")
    if ens_list[0].k_start != 0:
        raise ContractViolation("the first interval must start at k = 0")
    for prev, nxt in zip(ens_list, ens_list[1:]):
        if nxt.k_start != prev.k_end:
            raise ContractViolation(
                f"intervals must be contiguous: [{prev.k_start},{prev.k_end}] then "
                f"[{nxt.k_start},{nxt.k_end}]"
            )
        if (nxt.n, nxt.m) != (prev.n, prev.m):
            raise ContractViolation("all ensembles must share plant dimensions")


def design_bounded_successive(
    ens_list,
    eta: float = 1.0,
    rho: float = 10.0,
    tol: SdpTolerances | None = None,
    require_rank: bool = True,
) -> DesignResult:
    """Joint bounded-trajectory synthesis over successive data windows.

    One feasibility problem over the union of the intervals; step ``k`` uses
    the data matrices of the interval that owns it.  Reduces to
    :func:`design_bounded` for a single-ensemble list.
    """
    _validate_eta_rho(eta, rho)
    _validate_chain(ens_list)
    verdicts = {}
    for i, ens in enumerate(ens_list):
        verdicts[i] = _require_rank(ens, require=require_rank, name=f"interval {i + 1}")
    n = ens_list[0].n
    t_end = ens_list[-1].k_end

    b = LmiBuilder()
    p_vars = {k: b.add_var(f"P{k}", n, n, symmetric=True) for k in range(t_end + 1)}
    y_vars = {}
    for ens in ens_list:
        for k in ens.steps:
            y_vars[k] = b.add_var(f"Y{k}", ens.L, n)
            _add_bound_step(b, ens.X[k + 1], ens.X[k], p_vars[k], p_vars[k + 1],
                            y_vars[k], k)
    for p in p_vars.values():
        b.add_box(p, eta, rho)

    sol = solve(b.build(), tol)
    diag = {"rank": verdicts}
    if not sol.ok:
        return DesignResult(sol.status, None, sol, diag)

    p_sol = {k: sol.values[f"P{k}"] for k in range(t_end + 1)}
    y_sol = {k: sol.values[f"Y{k}"] for k in y_vars}
    pairs = []
    for ens in ens_list:
        pairs.extend((k, ens.U[k], y_sol[k], p_sol[k]) for k in ens.steps)
    gains, max_cond = _gains_from_solution(pairs)
    last = ens_list[-1]
    gram = _boundary_gram(last.X[t_end], y_sol[t_end - 1], p_sol[t_end - 1])
    schedule = GainSchedule(
        gains=gains, eta=eta, rho=rho, certificate=p_sol, y_data=y_sol,
        boundary_gram=gram,
        meta={"design": "bounded_successive", "intervals": len(ens_list),
              "max_certificate_cond": max_cond},
    )
    return DesignResult(sol.status, schedule, sol, diag)


def extend_gain_sequential(
    prev: GainSchedule,
    ens_l: DataEnsemble,
    eta: float | None = None,
    rho: float | None = None,
    tol: SdpTolerances | None = None,
    require_rank: bool = True,
) -> DesignResult:
    """Extend a certified schedule to the next interval, reusing its solution.

    Solves a feasibility problem over the new interval only, with the extra
    boundary LMI ``P(T_prev) - I - F_prev >= 0`` tying the new certificate to
    the previous window's closed loop (``F_prev`` is stored on the previous
    schedule).  More conservative than the joint problem: it can be
    infeasible even when the joint synthesis is feasible.
    """
    if prev is None or not prev.gains:
        raise ContractViolation("sequential extension needs a certified previous schedule")
    if prev.boundary_gram is None:
        raise ContractViolation("previous schedule does not carry a boundary matrix")
    eta = prev.eta if eta is None else eta
    rho = prev.rho if rho is None else rho
    if eta != prev.eta or rho != prev.rho:
        raise ContractViolation("sequential extension must reuse the previous (eta, rho)")
    _validate_eta_rho(eta, rho)
    t_prev = prev.window[1]
    if ens_l.k_start != t_prev:
        raise ContractViolation(
            f"new ensemble starts at {ens_l.k_start}, expected {t_prev}"
        )
    verdicts = _require_rank(ens_l, require=require_rank, name="extension interval")
    n = ens_l.n

    b = LmiBuilder()
    p_vars = {k: b.add_var(f"P{k}", n, n, symmetric=True)
              for k in range(t_prev, ens_l.k_end + 1)}
    y_vars = {k: b.add_var(f"Y{k}", ens_l.L, n) for k in ens_l.steps}
    for k in ens_l.steps:
        _add_bound_step(b, ens_l.X[k + 1], ens_l.X[k], p_vars[k], p_vars[k + 1],
                        y_vars[k], k)
    for p in p_vars.values():
        b.add_box(p, eta, rho)
    boundary = BlockExpr.sym([n])
    boundary.const(0, 0, -np.eye(n) - prev.boundary_gram).term(0, 0, p_vars[t_prev])
    b.add_psd(boundary, name="boundary")

    sol = solve(b.build(), tol)
    diag = {"rank": verdicts}
    if not sol.ok:
        return DesignResult(sol.status, None, sol, diag)

    p_new = {k: sol.values[f"P{k}"] for k in p_vars}
    y_new = {k: sol.values[f"Y{k}"] for k in y_vars}
    new_gains, max_cond = _gains_from_solution(
        (k, ens_l.U[k], y_new[k], p_new[k]) for k in ens_l.steps
    )
    gains = dict(prev.gains)
    gains.update(new_gains)
    certificate = dict(prev.certificate)
    certificate.update(p_new)
    y_all = dict(prev.y_data)
    y_all.update(y_new)
    gram = _boundary_gram(ens_l.X[ens_l.k_end], y_new[ens_l.k_end - 1],
                          p_new[ens_l.k_end - 1])
    schedule = GainSchedule(
        gains=gains, eta=eta, rho=rho, certificate=certificate, y_data=y_all,
        boundary_gram=gram,
        meta={"design": "bounded_sequential", "max_certificate_cond": max_cond},
    )
    return DesignResult(sol.status, schedule, sol, diag)


def design_periodic_stabilizer(
    ens: DataEnsemble,
    eta: float = 1.0,
    rho: float = 10.0,
    tol: SdpTolerances | None = None,
    require_rank: bool = True,
) -> DesignResult:
    """Exponentially stabilizing periodic gains from one period of data.

    The data window must cover ``[0, phi]`` (typically via
    ``fold_periodic``); the bound LMIs run over one period with the closure
    ``P(phi) = P(0)``, so the returned schedule repeats every ``phi`` steps.
    """
    _validate_eta_rho(eta, rho)
    if ens.k_start != 0:
        raise ContractViolation("periodic design expects a data window starting at 0")
    phi = ens.k_end
    verdicts = _require_rank(ens, require=require_rank, name="periodic window")
    n = ens.n

    b = LmiBuilder()
    p_vars = {k: b.add_var(f"P{k}", n, n, symmetric=True) for k in range(phi)}
    y_vars = {k: b.add_var(f"Y{k}", ens.L, n) for k in range(phi)}
    for k in range(phi):
        p_next = p_vars[(k + 1) % phi]
        _add_bound_step(b, ens.X[k + 1], ens.X[k], p_vars[k], p_next, y_vars[k], k)
    for p in p_vars.values():
        b.add_box(p, eta, rho)

    sol = solve(b.build(), tol)
    diag = {"rank": verdicts, "phi": phi}
    if not sol.ok:
        return DesignResult(sol.status, None, sol, diag)

    p_sol = {k: sol.values[f"P{k}"] for k in range(phi)}
    y_sol = {k: sol.values[f"Y{k}"] for k in range(phi)}
    gains, max_cond = _gains_from_solution(
        (k, ens.U[k], y_sol[k], p_sol[k]) for k in range(phi)
    )
    schedule = GainSchedule(
        gains=gains, eta=eta, rho=rho, periodic=phi, certificate=p_sol, y_data=y_sol,
        meta={"design": "periodic_stabilizer", "max_certificate_cond": max_cond},
    )
    return DesignResult(sol.status, schedule, sol, diag)
