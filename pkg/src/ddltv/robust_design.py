"""Synthesis from noisy data: robust boundedness, SNR designs, quadratic
robust performance via the data-dependent LFT, and H-infinity level search.

The uncertain ingredient throughout is the unmeasurable per-step residual
stack ``R(k) = A(k) V(k) - V(k+1) - D(k)`` relating the measured stacks to
the true ones.  Designs assume a user-supplied quadratic bound on ``R(k)``
and convexify with the full-block S-procedure; the resulting strict LMIs are
realized with an explicit positive margin.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data_ensemble import DataEnsemble
from .ltv_core import ContractViolation, LtvDynamics
from .sdp_backend import BlockExpr, LmiBuilder, SdpTolerances, solve
from .stability_design import (
    DesignResult,
    GainSchedule,
    _gains_from_solution,
    _require_rank,
    _validate_eta_rho,
    trajectory_bound,
)

__all__ = [
    "NoiseBound",
    "PerformanceIndex",
    "OutputMaps",
    "ResidualEnsemble",
    "residual_oracle",
    "check_noise_bound",
    "design_robust_bounded",
    "design_robust_snr",
    "iss_bound",
    "design_robust_performance",
    "design_robust_performance_periodic",
    "model_robust_performance",
    "check_model_performance",
    "performance_sum",
    "hinf_gamma_search",
    "BracketError",
    "GammaSearchResult",
]


def _measured(ens: DataEnsemble, k: int) -> np.ndarray:
    """Measured state stack: noisy ``Z(k)`` when collected, else exact ``X(k)``."""
    return ens.Z[k] if ens.Z is not None else ens.X[k]


def _measured_rank(ens: DataEnsemble, require=True, name="ensemble"):
    return _require_rank(ens, use_noisy=ens.Z is not None, require=require, name=name)


# -- residuals and their quadratic bounds ------------------------------------


@dataclass
class ResidualEnsemble:
    """Ground-truth residual stacks (test oracle; not available from data)."""

    r: dict
    v: dict
    d: dict

    @property
    def steps(self):
        return sorted(self.r)

    def max_norm(self) -> float:
        return max(np.linalg.norm(self.r[k], 2) for k in self.steps)


def residual_oracle(sys: LtvDynamics, ens: DataEnsemble) -> ResidualEnsemble:
    """``R(k) = A(k) V(k) - V(k+1) - D(k)`` from stored noise stacks.

    Noise-free ensembles yield identically zero residuals; noisy ensembles
    must have been collected with noise storage enabled.
    """
    if ens.Z is None:
        zero = {k: np.zeros((ens.n, ens.L)) for k in ens.steps}
        zeros_v = {k: np.zeros((ens.n, ens.L)) for k in range(ens.k_start, ens.k_end + 1)}
        return ResidualEnsemble(r=zero, v=zeros_v, d=dict(zero))
    if ens.V is None or ens.D is None:
        raise ContractViolation("ensemble was collected without noise storage")
    r = {k: sys.a(k) @ ens.V[k] - ens.V[k + 1] - ens.D[k] for k in ens.steps}
    return ResidualEnsemble(r=r, v=dict(ens.V), d=dict(ens.D))


@dataclass
class NoiseBound:
    """Quadratic residual bound ``[I, R] [[Q_r, S_r],[S_r', R_r]] [I; R'] >= 0``.

    ``R_r(k)`` must be negative definite.  Besides explicit per-step triples,
    two canonical forms are provided: the SNR form
    (``Q_r = Z(k+1) Z(k+1)'``, ``R_r = -gamma(k) I``) and the norm-ball form
    (``Q_r = radius^2 I``, ``R_r = -I``, i.e. ``||R(k)|| <= radius``).
    """

    kind: str
    q_r_of_k: callable | None = None
    s_r_of_k: callable | None = None
    r_r_of_k: callable | None = None
    gamma_of_k: callable | None = None
    radius: float | None = None
    scale: float = 1.0

    @classmethod
    def explicit(cls, q_r, s_r, r_r) -> "NoiseBound":
        wrap = lambda f: f if callable(f) else (lambda k: f)
        return cls("explicit", wrap(q_r), wrap(s_r), wrap(r_r))

    @classmethod
    def snr(cls, gamma) -> "NoiseBound":
        gamma_fn = gamma if callable(gamma) else (lambda k: gamma)
        return cls("snr", gamma_of_k=gamma_fn)

    @classmethod
    def ball(cls, radius: float, scale: float | None = None) -> "NoiseBound":
        """Norm-ball bound ``||R(k)|| <= radius``.

        The quadratic-bound statement is invariant under positive scaling of
        the triple, but the S-procedure LMIs are not; ``scale`` picks the
        multiplier.  The default ``1/max(radius, 1e-3)`` balances the two
        places the triple enters (``Q_r`` inflation versus multiplier-block
        magnitude, which also drives the strict-LMI margin).
        """
        if radius <= 0:
            raise ContractViolation("ball bound needs a positive radius")
        return cls("ball", radius=radius,
                   scale=(1.0 / max(radius, 1e-3)) if scale is None else float(scale))

    @classmethod
    def centered_ball(cls, center_of_k, radius: float, scale: float = 1.0) -> "NoiseBound":
        """Ball around a residual estimate: ``||R(k) - center(k)|| <= radius``.

        Expands to the general triple ``Q_r = scale (radius^2 I - C C')``,
        ``S_r = scale C``, ``R_r = -scale I`` with ``C = center(k)``.  Centers
        come from prior knowledge; benchmark harnesses use simulation ground
        truth and report the construction.
        """
        if radius <= 0:
            raise ContractViolation("centered ball needs a positive radius")
        center = center_of_k if callable(center_of_k) else (lambda k: center_of_k[k])

        def q_r(k):
            c_mat = np.atleast_2d(np.asarray(center(k), dtype=float))
            return scale * (radius ** 2 * np.eye(c_mat.shape[0]) - c_mat @ c_mat.T)

        def s_r(k):
            return scale * np.atleast_2d(np.asarray(center(k), dtype=float))

        def r_r(k):
            c_mat = np.atleast_2d(np.asarray(center(k), dtype=float))
            return -scale * np.eye(c_mat.shape[1])

        return cls("explicit", q_r, s_r, r_r)

    def triples(self, k: int, ens: DataEnsemble):
        n, big_l = ens.n, ens.L
        if self.kind == "explicit":
            q_r = np.atleast_2d(np.asarray(self.q_r_of_k(k), dtype=float))
            s_r = np.atleast_2d(np.asarray(self.s_r_of_k(k), dtype=float))
            r_r = np.atleast_2d(np.asarray(self.r_r_of_k(k), dtype=float))
        elif self.kind == "snr":
            z_next = _measured(ens, k + 1)
            q_r = z_next @ z_next.T
            s_r = np.zeros((n, big_l))
            r_r = -float(self.gamma_of_k(k)) * np.eye(big_l)
        elif self.kind == "ball":
            q_r = self.scale * self.radius ** 2 * np.eye(n)
            s_r = np.zeros((n, big_l))
            r_r = -self.scale * np.eye(big_l)
        else:
            raise ContractViolation(f"unknown noise bound kind {self.kind!r}")
        if q_r.shape != (n, n) or s_r.shape != (n, big_l) or r_r.shape != (big_l, big_l):
            raise ContractViolation(f"noise bound triples at k={k} have wrong shapes")
        if np.linalg.eigvalsh((r_r + r_r.T) / 2.0).max() >= 0:
            raise ContractViolation(f"R_r({k}) must be negative definite")
        return q_r, s_r, r_r


def check_noise_bound(res: ResidualEnsemble, bound: NoiseBound, ens: DataEnsemble,
                      tol: float = 1e-9, center=None):
    """Per-step verdicts of the quadratic residual bound, via eigenvalues.

    When a design recenters the uncertain residual (``residual_center``), pass
    the same ``center`` here so the bound is evaluated on the deviation.
    """
    verdicts = {}
    for k in res.steps:
        q_r, s_r, r_r = bound.triples(k, ens)
        rk = res.r[k]
        if center is not None:
            rk = rk - np.atleast_2d(np.asarray(center[k], dtype=float))
        form = q_r + rk @ s_r.T + s_r @ rk.T + rk @ r_r @ rk.T
        scale = max(1.0, np.abs(form).max())
        verdicts[k] = bool(np.linalg.eigvalsh((form + form.T) / 2.0).min() >= -tol * scale)
    return verdicts


# -- robust boundedness (noisy data) -----------------------------------------


def _multiplier_row_scale(r_r) -> float:
    # congruence normalization of the multiplier block: an equivalent LMI with
    # the block rescaled to unit magnitude, keeping margins and conditioning
    # meaningful when the bound triple carries a large multiplier weight
    return 1.0 / np.sqrt(max(1.0, float(np.linalg.norm(r_r, 2))))


def _add_robust_bound_step(b, ens, k, bound, p_here, p_next, y_here, center=None):
    n, big_l = ens.n, ens.L
    q_r, s_r, r_r = bound.triples(k, ens)
    t = _multiplier_row_scale(r_r)
    z_next = _measured(ens, k + 1)
    if center is not None:
        z_next = z_next + np.atleast_2d(np.asarray(center[k], dtype=float))
    lmi = BlockExpr.sym([n, big_l, n])
    lmi.const(0, 0, -np.eye(n) - q_r).term(0, 0, p_next)
    lmi.const(0, 1, -t * s_r)
    lmi.term(0, 2, y_here, left=z_next)
    lmi.const(1, 1, -t * t * r_r)
    lmi.term(1, 2, y_here, scale=t)
    lmi.term(2, 2, p_here)
    b.add_psd(lmi, strict=True, name=f"robust{k}")
    eq = BlockExpr([n], [n])
    eq.term(0, 0, y_here, left=_measured(ens, k)).term(0, 0, p_here, scale=-1.0)
    b.add_eq(eq, name=f"data{k}")


def design_robust_bounded(
    ens: DataEnsemble,
    bound: NoiseBound,
    eta: float = 1.0,
    rho: float = 10.0,
    tol: SdpTolerances | None = None,
    require_rank: bool = True,
    residual_center=None,
) -> DesignResult:
    """Bounded trajectories from noisy data under a quadratic residual bound.

    Strict 3x3-block LMIs (S-procedure against the residual bound) plus the
    measured-data equality ``Z(k) Y(k) = P(k)``; the returned feedback acts
    on the noisy measurement, ``u(k) = K(k) zeta(k)``.  The guarantee is
    void whenever the true residuals violate the bound.
    """
    _validate_eta_rho(eta, rho)
    verdicts = _measured_rank(ens, require=require_rank)
    n = ens.n

    b = LmiBuilder()
    p_vars = {k: b.add_var(f"P{k}", n, n, symmetric=True)
              for k in range(ens.k_start, ens.k_end + 1)}
    y_vars = {k: b.add_var(f"Y{k}", ens.L, n) for k in ens.steps}
    for k in ens.steps:
        _add_robust_bound_step(b, ens, k, bound, p_vars[k], p_vars[k + 1], y_vars[k],
                               center=residual_center)
    for p in p_vars.values():
        b.add_box(p, eta, rho)

    sol = solve(b.build(), tol)
    diag = {"rank": verdicts, "bound": bound.kind}
    if not sol.ok:
        return DesignResult(sol.status, None, sol, diag)
    p_sol = {k: sol.values[f"P{k}"] for k in p_vars}
    y_sol = {k: sol.values[f"Y{k}"] for k in y_vars}
    gains, max_cond = _gains_from_solution(
        (k, ens.U[k], y_sol[k], p_sol[k]) for k in ens.steps
    )
    schedule = GainSchedule(
        gains=gains, eta=eta, rho=rho, certificate=p_sol, y_data=y_sol,
        meta={"design": "robust_bounded", "bound": bound.kind,
              "max_certificate_cond": max_cond},
    )
    return DesignResult(sol.status, schedule, sol, diag)


def design_robust_snr(
    ens: DataEnsemble,
    eta: float = 1.0,
    rho: float = 10.0,
    tol: SdpTolerances | None = None,
    require_rank: bool = True,
):
    """Minimal-SNR robust boundedness: minimize ``sum_k a(k)``.

    The SNR-form LMIs carry a nonnegative scalar ``a(k)`` in place of a fixed
    SNR level; the returned schedule is guaranteed whenever the true per-step
    SNR satisfies ``gamma(k) >= a(k)``.  Returns ``(DesignResult, {k: a(k)})``.
    """
    _validate_eta_rho(eta, rho)
    verdicts = _measured_rank(ens, require=require_rank)
    n, big_l = ens.n, ens.L

    b = LmiBuilder()
    p_vars = {k: b.add_var(f"P{k}", n, n, symmetric=True)
              for k in range(ens.k_start, ens.k_end + 1)}
    y_vars = {k: b.add_var(f"Y{k}", ens.L, n) for k in ens.steps}
    a_vars = {k: b.add_var(f"a{k}", 1, 1, symmetric=True) for k in ens.steps}
    unit = np.eye(big_l)
    for k in ens.steps:
        z_next = _measured(ens, k + 1)
        lmi = BlockExpr.sym([n, big_l, n])
        lmi.const(0, 0, -np.eye(n) - z_next @ z_next.T).term(0, 0, p_vars[k + 1])
        lmi.term(0, 2, y_vars[k], left=z_next)
        for i in range(big_l):  # a(k) * I_L on the multiplier block
            lmi.term(1, 1, a_vars[k], left=unit[:, [i]], right=unit[[i], :])
        lmi.term(1, 2, y_vars[k])
        lmi.term(2, 2, p_vars[k])
        b.add_psd(lmi, strict=True, name=f"snr{k}")
        eq = BlockExpr([n], [n])
        eq.term(0, 0, y_vars[k], left=_measured(ens, k)).term(0, 0, p_vars[k], scale=-1.0)
        b.add_eq(eq, name=f"data{k}")
        b.add_psd(BlockExpr.sym([1]).term(0, 0, a_vars[k]), name=f"a{k}_nonneg")
        b.add_objective_term([[1.0]], a_vars[k])
    for p in p_vars.values():
        b.add_box(p, eta, rho)

    sol = solve(b.build(), tol)
    diag = {"rank": verdicts}
    if not sol.ok:
        return DesignResult(sol.status, None, sol, diag), {}
    a_sol = {k: float(sol.values[f"a{k}"][0, 0]) for k in ens.steps}
    p_sol = {k: sol.values[f"P{k}"] for k in p_vars}
    y_sol = {k: sol.values[f"Y{k}"] for k in y_vars}
    gains, max_cond = _gains_from_solution(
        (k, ens.U[k], y_sol[k], p_sol[k]) for k in ens.steps
    )
    schedule = GainSchedule(
        gains=gains, eta=eta, rho=rho, certificate=p_sol, y_data=y_sol,
        meta={"design": "robust_snr", "sum_a": sum(a_sol.values()),
              "max_certificate_cond": max_cond},
    )
    return DesignResult(sol.status, schedule, sol, diag), a_sol


def iss_bound(schedule: GainSchedule, b_max: float, v_sup: float, d_sup: float,
              k: int, x0_norm: float = 1.0) -> float:
    """Noise-aware trajectory bound: decaying term plus noise gain terms.

    ``b_max`` bounds ``||B(j)||`` over the window; ``v_sup``/``d_sup`` bound
    the measurement/process noise norms up to ``k-1``.  With both zero this
    reduces to the noise-free trajectory bound.
    """
    eta, rho = schedule.eta, schedule.rho
    if eta is None or rho is None:
        raise ContractViolation("schedule carries no (eta, rho) bound constants")
    _validate_eta_rho(eta, rho)
    base = trajectory_bound(eta, rho, x0_norm, k)
    decay = np.sqrt(rho / eta) * (1.0 - 1.0 / rho) ** (np.arange(k)[::-1] / 2.0)
    if k == 0:
        return base
    gain_norms = np.array([np.linalg.norm(schedule.gain(j), 2) for j in range(k)])
    gamma1 = b_max * float(decay @ gain_norms) * v_sup
    gamma2 = float(decay.sum()) * d_sup
    return base + gamma1 + gamma2


# -- robust quadratic performance ---------------------------------------------


@dataclass
class OutputMaps:
    """Performance-output maps ``z = C x + D_u u + D_d d`` plus terminal map."""

    c_of_k: callable
    du_of_k: callable
    dd_of_k: callable
    q: int
    c_terminal: np.ndarray | None = None

    @classmethod
    def constant(cls, c, du, dd, c_terminal=None) -> "OutputMaps":
        c = np.atleast_2d(np.asarray(c, dtype=float))
        du = np.atleast_2d(np.asarray(du, dtype=float))
        dd = np.atleast_2d(np.asarray(dd, dtype=float))
        term = c if c_terminal is None else np.atleast_2d(np.asarray(c_terminal, dtype=float))
        return cls(lambda k: c, lambda k: du, lambda k: dd, q=c.shape[0], c_terminal=term)

    def c(self, k):
        return np.atleast_2d(np.asarray(self.c_of_k(k), dtype=float))

    def du(self, k):
        return np.atleast_2d(np.asarray(self.du_of_k(k), dtype=float))

    def dd(self, k):
        return np.atleast_2d(np.asarray(self.dd_of_k(k), dtype=float))

    def terminal(self, n_hor):
        return self.c_terminal if self.c_terminal is not None else self.c(n_hor)

    def validate(self, n, m):
        c, du, dd = self.c(0), self.du(0), self.dd(0)
        if c.shape != (self.q, n) or du.shape != (self.q, m) or dd.shape != (self.q, n):
            raise ContractViolation(
                f"output maps have shapes C{c.shape}, Du{du.shape}, Dd{dd.shape}; "
                f"expected ({self.q},{n}), ({self.q},{m}), ({self.q},{n})"
            )


@dataclass
class PerformanceIndex:
    """Quadratic performance index on ``(w_bar, z)`` with its inverse blocks.

    The positivity constant ``eps`` of the criterion is folded into the
    ``w_bar`` block before inversion (``Q_p + eps I``).  The inverse blocks
    must exist with ``Q_p_tilde < 0``; both facts are checked.
    """

    q_p_of_k: callable
    s_p_of_k: callable
    r_p_of_k: callable
    n_w: int
    q: int
    eps: float = 1e-6

    @classmethod
    def constant(cls, q_p, s_p, r_p, eps: float = 1e-6) -> "PerformanceIndex":
        q_p = np.atleast_2d(np.asarray(q_p, dtype=float))
        s_p = np.atleast_2d(np.asarray(s_p, dtype=float))
        r_p = np.atleast_2d(np.asarray(r_p, dtype=float))
        return cls(lambda k: q_p, lambda k: s_p, lambda k: r_p,
                   n_w=q_p.shape[0], q=r_p.shape[0], eps=eps)

    @classmethod
    def hinf(cls, gamma: float, n_w: int, q: int, eps: float = 1e-6) -> "PerformanceIndex":
        """Disturbance-attenuation instantiation: ``Q_p = -gamma^2 I``, ``R_p = I``."""
        if gamma <= 0:
            raise ContractViolation("gamma must be positive")
        return cls.constant(-gamma ** 2 * np.eye(n_w), np.zeros((n_w, q)), np.eye(q),
                            eps=eps)

    def blocks(self, k):
        q_p = np.atleast_2d(np.asarray(self.q_p_of_k(k), dtype=float))
        s_p = np.atleast_2d(np.asarray(self.s_p_of_k(k), dtype=float))
        r_p = np.atleast_2d(np.asarray(self.r_p_of_k(k), dtype=float))
        if q_p.shape != (self.n_w, self.n_w) or s_p.shape != (self.n_w, self.q) \
                or r_p.shape != (self.q, self.q):
            raise ContractViolation(f"performance index blocks at k={k} have wrong shapes")
        if np.linalg.eigvalsh((r_p + r_p.T) / 2.0).min() < -1e-12:
            raise ContractViolation(f"R_p({k}) must be positive semidefinite")
        return q_p, s_p, r_p

    def inverse_blocks(self, k):
        q_p, s_p, r_p = self.blocks(k)
        big = np.block([[q_p + self.eps * np.eye(self.n_w), s_p], [s_p.T, r_p]])
        try:
            inv = np.linalg.inv(big)
        except np.linalg.LinAlgError as exc:
            raise ContractViolation(f"performance index at k={k} is not invertible") from exc
        qt = inv[: self.n_w, : self.n_w]
        st = inv[: self.n_w, self.n_w:]
        rt = inv[self.n_w:, self.n_w:]
        if np.linalg.eigvalsh((qt + qt.T) / 2.0).max() >= 0:
            raise ContractViolation(f"inverse index block Q_p_tilde({k}) must be negative definite")
        return qt, st, rt


def _add_performance_step(b, ens, k, maps, perf, bound, p_here, p_next, y_here, m_here,
                          center=None):
    """One step of the 5-block robust-performance LMI (measurement-noise path)
    or its 4-block reduction when ``m_here`` is None (process noise only).

    ``center`` recenters the uncertain residual: the dynamics-side stack
    becomes ``Z(k+1) + center(k)`` and the bound triple applies to the
    deviation from the center (an exact reparametrization that keeps the
    assembled blocks well scaled for residual estimates of any size).
    """
    n, m, big_l, q = ens.n, ens.m, ens.L, maps.q
    n_w = perf.n_w
    qt, st, rt = perf.inverse_blocks(k)
    q_r, s_r, r_r = bound.triples(k, ens)
    z_next = _measured(ens, k + 1)
    if center is not None:
        z_next = z_next + np.atleast_2d(np.asarray(center[k], dtype=float))
    c_k, du_k, dd_k = maps.c(k), maps.du(k), maps.dd(k)

    with_meas = m_here is not None
    if with_meas:
        if n_w != m + n:
            raise ContractViolation(f"performance index disturbance dim {n_w} != m+n")
        d_cl = np.hstack([du_k, dd_k])
        e_pick = np.vstack([np.eye(m), np.zeros((n, m))])  # embeds M' rows into w-bar dim
        ecl_const = np.vstack([np.zeros((m, n)), np.eye(n)])
    else:
        if n_w != n:
            raise ContractViolation(f"performance index disturbance dim {n_w} != n")
        d_cl = dd_k
        ecl_const = np.eye(n)

    t = _multiplier_row_scale(r_r)
    lmi = BlockExpr.sym([n, q, big_l, n_w, n])
    lmi.const(0, 0, -q_r).term(0, 0, p_next)
    lmi.const(1, 0, -st.T @ ecl_const)
    if with_meas:
        lmi.term(1, 0, m_here, left=-(st.T[:, :m]), right=z_next.T, transpose=True)
    lmi.const(1, 1, rt - d_cl @ st - st.T @ d_cl.T)
    lmi.const(2, 0, -t * s_r.T)
    if with_meas:
        lmi.term(2, 1, m_here, right=st[:m, :], scale=-t)
    lmi.const(2, 2, -t * t * r_r)
    lmi.const(3, 0, ecl_const)
    if with_meas:
        lmi.term(3, 0, m_here, left=e_pick, right=z_next.T, transpose=True)
    lmi.const(3, 1, d_cl.T)
    if with_meas:
        lmi.term(3, 2, m_here, left=e_pick, transpose=True, scale=t)
    lmi.const(3, 3, -np.linalg.inv(qt))
    lmi.term(4, 0, y_here, right=z_next.T, transpose=True)
    lmi.term(4, 1, p_here, right=c_k.T)
    lmi.term(4, 1, y_here, right=(du_k @ ens.U[k]).T, transpose=True)
    lmi.term(4, 2, y_here, transpose=True, scale=t)
    lmi.term(4, 4, p_here)
    b.add_psd(lmi, strict=True, name=f"perf{k}")

    eq = BlockExpr([n], [n])
    eq.term(0, 0, y_here, left=_measured(ens, k)).term(0, 0, p_here, scale=-1.0)
    b.add_eq(eq, name=f"dataP{k}")
    if with_meas:
        eq_m = BlockExpr([n, m], [m])
        eq_m.term(0, 0, m_here, left=_measured(ens, k))
        eq_m.term(1, 0, m_here, left=ens.U[k]).const(1, 0, -np.eye(m))
        b.add_eq(eq_m, name=f"dataM{k}")


def _extract_performance(ens, sol, steps, p_index, periodic, with_meas, meta):
    p_sol = {k: sol.values[f"P{p_index(k)}"] for k in list(steps) + [steps[-1] + 1]}
    y_sol = {k: sol.values[f"Y{k}"] for k in steps}
    gains, max_cond = _gains_from_solution(
        (k, ens.U[k], y_sol[k], p_sol[k]) for k in steps
    )
    extra = {"m_data": {k: sol.values[f"M{k}"] for k in steps}} if with_meas else {}
    schedule = GainSchedule(
        gains=gains, periodic=periodic, certificate=p_sol, y_data=y_sol,
        meta=dict(meta, max_certificate_cond=max_cond, **extra),
    )
    return schedule


def _square_data_inverse(ens, k):
    """Exact inverse of the square stacked data matrix (``L = n + m`` only)."""
    if ens.L != ens.n + ens.m:
        raise ContractViolation("condensed assembly needs L = n + m experiments")
    stacked = np.vstack([_measured(ens, k), ens.U[k]])
    return np.linalg.inv(stacked)


def _add_performance_step_condensed(b, ens, k, maps, perf, bound, p_here, p_next,
                                    v_here, center=None):
    """Square-data (``L = n+m``) robust-performance step in condensed variables.

    Exact reparametrization ``Y(k) = [Z(k);U(k)]^{-1} [P(k); V(k)]`` with
    ``V(k) = K(k) P(k)``, which absorbs the data equalities (and the then
    unique ``M(k)``) into precomputed coefficients.  Used when the explicit
    form is too ill-conditioned to solve (for data with near-collinear
    columns the explicit ``Y`` variables must take enormous values)."""
    n, m, big_l, q = ens.n, ens.m, ens.L, maps.q
    n_w = perf.n_w
    if n_w != m + n:
        raise ContractViolation("condensed path covers the measurement-noise channel")
    qt, st, rt = perf.inverse_blocks(k)
    q_r, s_r, r_r = bound.triples(k, ens)
    t = _multiplier_row_scale(r_r)
    inv_zu = _square_data_inverse(ens, k)
    m_fixed = inv_zu[:, n:]  # unique M(k): columns hitting the [0; I_m] target
    z_next = _measured(ens, k + 1)
    if center is not None:
        z_next = z_next + np.atleast_2d(np.asarray(center[k], dtype=float))
    c_k, du_k, dd_k = maps.c(k), maps.du(k), maps.dd(k)
    d_cl = np.hstack([du_k, dd_k])
    e_pick = np.vstack([np.eye(m), np.zeros((n, m))])
    ecl_const = np.vstack([np.zeros((m, n)), np.eye(n)])
    m_bar = np.hstack([m_fixed, np.zeros((big_l, n))])
    ecl_bar = np.hstack([z_next @ m_fixed, np.eye(n)])
    # Y(k) = inv_zu[:, :n] P(k) + inv_zu[:, n:] V(k)
    y_p, y_v = inv_zu[:, :n], inv_zu[:, n:]

    lmi = BlockExpr.sym([n, q, big_l, n_w, n])
    lmi.const(0, 0, -q_r).term(0, 0, p_next)
    lmi.const(1, 0, -st.T @ ecl_bar.T)
    lmi.const(1, 1, rt - d_cl @ st - st.T @ d_cl.T)
    lmi.const(2, 0, -t * s_r.T)
    lmi.const(2, 1, -t * m_bar @ st)
    lmi.const(2, 2, -t * t * r_r)
    lmi.const(3, 0, ecl_bar.T)
    lmi.const(3, 1, d_cl.T)
    lmi.const(3, 2, t * m_bar.T)
    lmi.const(3, 3, -np.linalg.inv(qt))
    lmi.term(4, 0, p_here, right=(z_next @ y_p).T)
    lmi.term(4, 0, v_here, right=(z_next @ y_v).T, transpose=True)
    lmi.term(4, 1, p_here, right=c_k.T)
    lmi.term(4, 1, v_here, right=du_k.T, transpose=True)
    lmi.term(4, 2, p_here, right=y_p.T, scale=t)
    lmi.term(4, 2, v_here, right=y_v.T, transpose=True, scale=t)
    lmi.term(4, 4, p_here)
    b.add_psd(lmi, strict=True, name=f"perf{k}")


def design_robust_performance(
    ens: DataEnsemble,
    maps: OutputMaps,
    perf: PerformanceIndex,
    bound: NoiseBound,
    n_hor: int,
    process_noise_only: bool = False,
    tol: SdpTolerances | None = None,
    require_rank: bool = True,
    residual_center=None,
) -> DesignResult:
    """Finite-horizon quadratic robust performance from noisy data.

    Joint strict LMIs in ``(Y(k), P(k), M(k))`` assembled from the
    data-dependent LFT of the noisy closed loop, the measured-data equalities
    and the terminal output condition.  With ``process_noise_only`` the input
    matrix representation ``M(k)`` is dropped and the disturbance reduces to
    the process noise channel.
    """
    maps.validate(ens.n, ens.m)
    if ens.k_start != 0 or ens.k_end < n_hor:
        raise ContractViolation(f"need a data window covering [0, {n_hor}]")
    verdicts = _measured_rank(ens, require=require_rank)
    n, m = ens.n, ens.m

    b = LmiBuilder()
    p_vars = {k: b.add_var(f"P{k}", n, n, symmetric=True) for k in range(n_hor + 1)}
    y_vars = {k: b.add_var(f"Y{k}", ens.L, n) for k in range(n_hor)}
    m_vars = None if process_noise_only else {
        k: b.add_var(f"M{k}", ens.L, m) for k in range(n_hor)
    }
    for k in range(n_hor):
        _add_performance_step(b, ens, k, maps, perf, bound, p_vars[k], p_vars[k + 1],
                              y_vars[k], None if process_noise_only else m_vars[k],
                              center=residual_center)
    c_term = maps.terminal(n_hor)
    term = BlockExpr.sym([maps.q])
    term.const(0, 0, np.eye(maps.q)).term(0, 0, p_vars[n_hor], left=c_term,
                                          right=c_term.T, scale=-1.0)
    b.add_psd(term, name="terminal")
    b.add_psd(BlockExpr.sym([n]).term(0, 0, p_vars[n_hor]), strict=True, name="P_final")

    sol = solve(b.build(), tol)
    diag = {"rank": verdicts, "horizon": n_hor}
    if not sol.ok:
        return DesignResult(sol.status, None, sol, diag)
    schedule = _extract_performance(
        ens, sol, list(range(n_hor)), lambda k: k, None, not process_noise_only,
        {"design": "robust_performance"},
    )
    return DesignResult(sol.status, schedule, sol, diag)


def design_robust_performance_periodic(
    ens: DataEnsemble,
    maps: OutputMaps,
    perf: PerformanceIndex,
    bound: NoiseBound,
    process_noise_only: bool = False,
    tol: SdpTolerances | None = None,
    require_rank: bool = True,
    residual_center=None,
    condensed: bool = False,
) -> DesignResult:
    """Infinite-horizon robust performance for a periodic plant and index.

    One period of constraints with the closure ``P(phi) = P(0)`` and no
    terminal condition; the data window must cover ``[0, phi]``.
    ``condensed`` switches to the square-data parametrization (``L = n+m``
    with measurement noise only), which is exactly equivalent but far better
    conditioned when the data has near-collinear experiment columns.
    """
    maps.validate(ens.n, ens.m)
    if ens.k_start != 0:
        raise ContractViolation("periodic design expects a data window starting at 0")
    phi = ens.k_end
    verdicts = _measured_rank(ens, require=require_rank)
    n, m = ens.n, ens.m

    b = LmiBuilder()
    p_vars = {k: b.add_var(f"P{k}", n, n, symmetric=True) for k in range(phi)}
    if condensed:
        if process_noise_only:
            raise ContractViolation("condensed path covers the measurement-noise channel")
        v_vars = {k: b.add_var(f"V{k}", m, n) for k in range(phi)}
        for k in range(phi):
            _add_performance_step_condensed(b, ens, k, maps, perf, bound, p_vars[k],
                                            p_vars[(k + 1) % phi], v_vars[k],
                                            center=residual_center)
    else:
        y_vars = {k: b.add_var(f"Y{k}", ens.L, n) for k in range(phi)}
        m_vars = None if process_noise_only else {
            k: b.add_var(f"M{k}", ens.L, m) for k in range(phi)
        }
        for k in range(phi):
            _add_performance_step(b, ens, k, maps, perf, bound, p_vars[k],
                                  p_vars[(k + 1) % phi], y_vars[k],
                                  None if process_noise_only else m_vars[k],
                                  center=residual_center)

    sol = solve(b.build(), tol)
    diag = {"rank": verdicts, "phi": phi, "condensed": condensed}
    if not sol.ok:
        return DesignResult(sol.status, None, sol, diag)
    if condensed:
        schedule = _extract_performance_condensed(
            ens, sol, list(range(phi)), lambda k: k % phi, phi,
            {"design": "robust_performance_periodic"},
        )
    else:
        schedule = _extract_performance(
            ens, sol, list(range(phi)), lambda k: k % phi, phi, not process_noise_only,
            {"design": "robust_performance_periodic"},
        )
    return DesignResult(sol.status, schedule, sol, diag)


def _extract_performance_condensed(ens, sol, steps, p_index, periodic, meta):
    from .stability_design import _spd_inverse_apply

    p_sol = {k: sol.values[f"P{p_index(k)}"] for k in list(steps) + [steps[-1] + 1]}
    gains, y_sol, max_cond = {}, {}, 0.0
    for k in steps:
        v_here = sol.values[f"V{k}"]
        inv_t, cond = _spd_inverse_apply(p_sol[k], v_here.T)
        gains[k] = inv_t.T
        max_cond = max(max_cond, cond)
        y_sol[k] = _square_data_inverse(ens, k) @ np.vstack([p_sol[k], v_here])
    return GainSchedule(
        gains=gains, periodic=periodic, certificate=p_sol, y_data=y_sol,
        meta=dict(meta, max_certificate_cond=max_cond, condensed=True),
    )


# -- model-based oracle and certificate checks --------------------------------


def _model_performance_step(b, sys, k, maps, perf, p_here, p_next, ym_here,
                            measurement_noise):
    n, m, q = sys.n, sys.m, maps.q
    qt, st, rt = perf.inverse_blocks(k)
    a_k, b_k = sys.a(k), sys.b(k)
    c_k, du_k, dd_k = maps.c(k), maps.du(k), maps.dd(k)
    if measurement_noise:
        e_cl = np.hstack([b_k, np.eye(n)])
        d_cl = np.hstack([du_k, dd_k])
    else:
        e_cl = np.eye(n)
        d_cl = dd_k
    if perf.n_w != e_cl.shape[1]:
        raise ContractViolation("performance index disturbance dim mismatch")

    lmi = BlockExpr.sym([n, q, perf.n_w, n])
    lmi.term(0, 0, p_next)
    lmi.const(1, 0, -st.T @ e_cl.T)
    lmi.const(1, 1, rt - d_cl @ st - st.T @ d_cl.T)
    lmi.const(2, 0, e_cl.T)
    lmi.const(2, 1, d_cl.T)
    lmi.const(2, 2, -np.linalg.inv(qt))
    lmi.term(3, 0, p_here, right=a_k.T)
    lmi.term(3, 0, ym_here, right=b_k.T, transpose=True)
    lmi.term(3, 1, p_here, right=c_k.T)
    lmi.term(3, 1, ym_here, right=du_k.T, transpose=True)
    lmi.term(3, 3, p_here)
    b.add_psd(lmi, strict=True, name=f"model_perf{k}")


def model_robust_performance(
    sys: LtvDynamics,
    maps: OutputMaps,
    perf: PerformanceIndex,
    n_hor: int | None = None,
    period: int | None = None,
    measurement_noise: bool = True,
    tol: SdpTolerances | None = None,
) -> DesignResult:
    """Ground-truth synthesis oracle for the quadratic performance criterion.

    Same dissipation conditions as the data-driven designs but assembled from
    the true ``A(k), B(k)`` with the classic change of variables
    ``Ym(k) = K(k) P(k)``; used to validate attainable performance levels.
    """
    maps.validate(sys.n, sys.m)
    if (n_hor is None) == (period is None):
        raise ContractViolation("set exactly one of n_hor or period")
    steps = n_hor if n_hor is not None else period
    n = sys.n

    b = LmiBuilder()
    count = steps + 1 if n_hor is not None else steps
    p_vars = {k: b.add_var(f"P{k}", n, n, symmetric=True) for k in range(count)}
    ym_vars = {k: b.add_var(f"Ym{k}", sys.m, n) for k in range(steps)}
    for k in range(steps):
        p_next = p_vars[k + 1] if n_hor is not None else p_vars[(k + 1) % steps]
        _model_performance_step(b, sys, k, maps, perf, p_vars[k], p_next, ym_vars[k],
                                measurement_noise)
    if n_hor is not None:
        c_term = maps.terminal(n_hor)
        term = BlockExpr.sym([maps.q])
        term.const(0, 0, np.eye(maps.q)).term(0, 0, p_vars[n_hor], left=c_term,
                                              right=c_term.T, scale=-1.0)
        b.add_psd(term, name="terminal")
        b.add_psd(BlockExpr.sym([n]).term(0, 0, p_vars[n_hor]), strict=True,
                  name="P_final")

    sol = solve(b.build(), tol)
    if not sol.ok:
        return DesignResult(sol.status, None, sol, {})
    from .stability_design import _spd_inverse_apply

    gains = {}
    for k in range(steps):
        inv_t, _ = _spd_inverse_apply(sol.values[f"P{k}"], sol.values[f"Ym{k}"].T)
        gains[k] = inv_t.T
    schedule = GainSchedule(
        gains=gains, periodic=period,
        certificate={k: sol.values[f"P{k}"] for k in range(count)},
        meta={"design": "model_robust_performance", "oracle": True},
    )
    return DesignResult(sol.status, schedule, sol, {})


def check_model_performance(
    sys: LtvDynamics,
    maps: OutputMaps,
    perf: PerformanceIndex,
    schedule: GainSchedule,
    steps,
    measurement_noise: bool = True,
):
    """Evaluate the model-based dissipation condition along a returned design.

    Assembles the quadratic-form condition from the true matrices, the
    schedule's gains and its certificates; returns the per-step minimum
    eigenvalue (positive means the condition holds strictly).
    """
    out = {}
    for k in steps:
        p_here = schedule.certificate[k]
        idx_next = k + 1
        if schedule.periodic is not None and idx_next not in schedule.certificate:
            idx_next = (k + 1) % schedule.periodic
        p_next = schedule.certificate[idx_next]
        qt, st, rt = perf.inverse_blocks(k)
        a_cl = sys.a(k) + sys.b(k) @ schedule.gain(k)
        c_cl = maps.c(k) + maps.du(k) @ schedule.gain(k)
        if measurement_noise:
            e_cl = np.hstack([sys.b(k), np.eye(sys.n)])
            d_cl = np.hstack([maps.du(k), maps.dd(k)])
        else:
            e_cl = np.eye(sys.n)
            d_cl = maps.dd(k)
        outer = np.vstack([
            np.hstack([a_cl.T, c_cl.T]),
            np.hstack([np.eye(sys.n), np.zeros((sys.n, maps.q))]),
            np.hstack([e_cl.T, d_cl.T]),
            np.hstack([np.zeros((maps.q, sys.n)), np.eye(maps.q)]),
        ])
        mid = np.zeros((2 * sys.n + perf.n_w + maps.q,) * 2)
        mid[: sys.n, : sys.n] = -p_here
        mid[sys.n: 2 * sys.n, sys.n: 2 * sys.n] = p_next
        sl = slice(2 * sys.n, 2 * sys.n + perf.n_w)
        sq = slice(2 * sys.n + perf.n_w, None)
        mid[sl, sl] = qt
        mid[sl, sq] = -st
        mid[sq, sl] = -st.T
        mid[sq, sq] = rt
        form = outer.T @ mid @ outer
        out[k] = float(np.linalg.eigvalsh((form + form.T) / 2.0).min())
    return out


def performance_sum(
    sys: LtvDynamics,
    schedule: GainSchedule,
    maps: OutputMaps,
    perf: PerformanceIndex,
    v_seq,
    d_seq,
    n_hor: int,
    x0=None,
    measurement_noise: bool = True,
    include_eps: bool = True,
    terminal: bool = True,
) -> float:
    """Truncated performance criterion along a simulated noisy closed loop.

    ``v_seq``/``d_seq`` are ``(n_hor, n)`` noise scripts; feasible designs
    make this sum nonpositive for square-summable disturbances when
    ``x0 = 0``.
    """
    x = np.zeros(sys.n) if x0 is None else np.asarray(x0, dtype=float)
    total = 0.0
    for k in range(n_hor):
        v = np.asarray(v_seq[k], dtype=float)
        d = np.asarray(d_seq[k], dtype=float)
        gain = schedule.gain(k)
        u = gain @ (x + v) if measurement_noise else gain @ x
        z = maps.c(k) @ x + maps.du(k) @ u + maps.dd(k) @ d
        w_bar = np.concatenate([gain @ v, d]) if measurement_noise else d
        q_p, s_p, r_p = perf.blocks(k)
        total += float(w_bar @ q_p @ w_bar + 2.0 * w_bar @ s_p @ z + z @ r_p @ z)
        if include_eps:
            total += perf.eps * float(w_bar @ w_bar)
        x = sys.a(k) @ x + sys.b(k) @ u + d
    if terminal:
        zf = maps.terminal(n_hor) @ x
        total += float(zf @ zf)
    return total


# -- H-infinity level search ---------------------------------------------------


class BracketError(RuntimeError):
    """The bisection bracket does not straddle the feasibility boundary."""


@dataclass
class GammaSearchResult:
    gamma: float
    result: DesignResult
    trace: list = field(default_factory=list)


def hinf_gamma_search(factory, lo: float = 1e-2, hi: float = 1e3,
                      tol: float = 0.05, max_steps: int = 40) -> GammaSearchResult:
    """Bisection for the smallest certified-feasible attenuation level.

    ``factory(gamma)`` must return a :class:`DesignResult`; the feasible set
    is assumed to grow with ``gamma``.  The bracket must straddle
    feasibility: ``hi`` feasible and ``lo`` infeasible, otherwise a
    :class:`BracketError` is raised (no extrapolation).  Statuses of every
    probe are recorded in the trace; numerical failures count as infeasible
    probes.
    """
    if not (0 < lo < hi):
        raise ContractViolation("need 0 < lo < hi")
    trace = []
    res_hi = factory(hi)
    trace.append((hi, res_hi.status.value))
    if not res_hi.ok:
        raise BracketError(f"upper bracket gamma={hi} is not feasible ({res_hi.status.value})")
    res_lo = factory(lo)
    trace.append((lo, res_lo.status.value))
    if res_lo.ok:
        raise BracketError(f"lower bracket gamma={lo} is already feasible")

    best = res_hi
    steps = 0
    while hi - lo > tol and steps < max_steps:
        mid = 0.5 * (lo + hi)
        res = factory(mid)
        trace.append((mid, res.status.value))
        if res.ok:
            hi, best = mid, res
        else:
            lo = mid
        steps += 1
    return GammaSearchResult(gamma=hi, result=best, trace=trace)
