"""Voltage-source converter benchmark plant.

Average single-phase converter model with DC-bus voltage and grid current as
states and the converter voltage as input; the grid-side current and voltage
enter as disturbances.  Linearizing about the periodic reference trajectory
and discretizing with forward Euler yields an open-loop unstable, periodically
time-varying plant (period = one grid cycle).  The nonlinear model is exposed
for generating data whose linearization defect acts as process noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ltv_core import ContractViolation, LtvDynamics, Trajectory

__all__ = [
    "ConverterParams",
    "reference_trajectory",
    "build_converter_ltv",
    "nonlinear_rhs",
    "simulate_converter_deviation",
]


@dataclass(frozen=True)
class ConverterParams:
    """Physical parameters; defaults reproduce the benchmark configuration."""

    resistance: float = 0.06        # grid-filter resistance [Ohm]
    inductance: float = 0.101e-3    # grid-filter inductance [H]
    capacitance: float = 0.89e-3    # DC-bus capacitance [F]
    v_dc_ref: float = 110.0         # DC-bus reference voltage [V]
    freq_hz: float = 50.0           # grid frequency [Hz]
    v_g_rms: float = 50.0           # grid RMS voltage [V]
    p_ref: float = 300.0            # active power setpoint [W]
    q_ref: float = 300.0            # reactive power setpoint [W]
    delta: float = 0.0005           # discretization step [s]
    phi: int = 40                   # steps per grid period

    def __post_init__(self):
        for name in ("resistance", "inductance", "capacitance", "v_dc_ref",
                     "freq_hz", "v_g_rms", "delta"):
            if getattr(self, name) <= 0:
                raise ContractViolation(f"converter parameter {name} must be positive")
        if self.phi != round(1.0 / (self.freq_hz * self.delta)):
            raise ContractViolation(
                f"phi={self.phi} inconsistent with 1/(freq*delta)="
                f"{1.0 / (self.freq_hz * self.delta):.3f}"
            )

    @property
    def omega(self) -> float:
        return 2.0 * math.pi * self.freq_hz


def reference_trajectory(p: ConverterParams, t: float) -> dict:
    """Reference signals (and the grid-current slope) at continuous time ``t``."""
    w = p.omega
    amp = math.sqrt(2.0) / p.v_g_rms
    i_lg = amp * (p.p_ref * math.cos(w * t) + p.q_ref * math.sin(w * t))
    di_lg = amp * w * (-p.p_ref * math.sin(w * t) + p.q_ref * math.cos(w * t))
    v_g = math.sqrt(2.0) * p.v_g_rms * math.cos(w * t)
    v_l = p.inductance * di_lg + p.resistance * i_lg + v_g
    i_s = i_lg * v_l / p.v_dc_ref  # keeps the DC-bus voltage constant
    return {"v_dc": p.v_dc_ref, "i_lg": i_lg, "v_g": v_g, "v_l": v_l, "i_s": i_s}


def converter_ab(p: ConverterParams, k: int):
    """Forward-Euler linearization ``(A(k), B(k))`` about the reference."""
    ref = reference_trajectory(p, k * p.delta)
    c, v = p.capacitance, p.v_dc_ref
    a11 = 1.0 + p.delta * ref["i_lg"] * ref["v_l"] / (c * v * v)
    a12 = -p.delta * ref["v_l"] / (c * v)
    a22 = 1.0 - p.delta * p.resistance / p.inductance
    a_mat = np.array([[a11, a12], [0.0, a22]])
    b_mat = np.array([[-p.delta * ref["i_lg"] / (c * v)], [p.delta / p.inductance]])
    return a_mat, b_mat


def build_converter_ltv(p: ConverterParams | None = None):
    """Return the periodic LTV deviation model and the nonlinear simulator handle.

    The LTV plant acts on deviations ``x = [dv_dc, di_lg]`` with input
    ``u = dv_l``; the handle is :func:`simulate_converter_deviation` bound to
    the same parameters.
    """
    p = p or ConverterParams()
    a_tab = []
    b_tab = []
    for k in range(p.phi):
        a_mat, b_mat = converter_ab(p, k)
        a_tab.append(a_mat)
        b_tab.append(b_mat)
    plant = LtvDynamics.from_tables(a_tab, b_tab, period=p.phi, label="converter")

    def handle(x0_dev, input_fn, horizon, **kwargs):
        return simulate_converter_deviation(p, x0_dev, input_fn, horizon, **kwargs)

    return plant, handle


def nonlinear_rhs(p: ConverterParams, state, v_l: float, i_s: float, v_g: float):
    """Continuous-time converter dynamics; guards the DC-bus voltage sign."""
    v_dc, i_lg = float(state[0]), float(state[1])
    if v_dc <= 0.0:
        raise ContractViolation("DC-bus voltage must stay positive")
    dv_dc = -i_lg * v_l / (p.capacitance * v_dc) + i_s / p.capacitance
    di_lg = (-p.resistance * i_lg + v_l - v_g) / p.inductance
    return np.array([dv_dc, di_lg])


def simulate_converter_deviation(
    p: ConverterParams,
    x0_dev,
    input_fn,
    horizon: int,
    i_s_dev_fn=None,
    v_g_dev_fn=None,
    substeps: int = 20,
) -> Trajectory:
    """Simulate the nonlinear converter and return deviation samples.

    ``input_fn(k)`` (or ``input_fn(k, deviation)`` for feedback) gives the
    converter-voltage deviation held over step ``k`` (zero-order hold);
    optional disturbance deviations are held the same way while the
    underlying reference signals vary continuously.  Integration is
    fixed-step RK4 with ``substeps`` stages per sample period, so runs are
    deterministic.
    """
    x0_dev = np.asarray(x0_dev, dtype=float).reshape(2)
    ref0 = reference_trajectory(p, 0.0)
    state = np.array([ref0["v_dc"] + x0_dev[0], ref0["i_lg"] + x0_dev[1]])
    dev = np.zeros((horizon + 1, 2))
    inputs = np.zeros((horizon, 1))
    dev[0] = x0_dev
    h = p.delta / substeps
    try:
        input_fn(0, np.zeros(2))
        takes_state = True
    except TypeError:
        takes_state = False
    for k in range(horizon):
        raw = input_fn(k, dev[k]) if takes_state else input_fn(k)
        du = float(np.asarray(raw).reshape(-1)[0])
        dis_i = float(i_s_dev_fn(k)) if i_s_dev_fn is not None else 0.0
        dis_v = float(v_g_dev_fn(k)) if v_g_dev_fn is not None else 0.0
        inputs[k, 0] = du
        t = k * p.delta
        for s in range(substeps):
            ts = t + s * h

            def rate(local_state, tau):
                ref = reference_trajectory(p, tau)
                return nonlinear_rhs(p, local_state, ref["v_l"] + du,
                                     ref["i_s"] + dis_i, ref["v_g"] + dis_v)

            k1 = rate(state, ts)
            k2 = rate(state + 0.5 * h * k1, ts + 0.5 * h)
            k3 = rate(state + 0.5 * h * k2, ts + 0.5 * h)
            k4 = rate(state + h * k3, ts + h)
            state = state + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        ref = reference_trajectory(p, (k + 1) * p.delta)
        dev[k + 1] = [state[0] - ref["v_dc"], state[1] - ref["i_lg"]]
    return Trajectory(x=dev, u=inputs)


def deviation_defects(p: ConverterParams, traj: Trajectory) -> np.ndarray:
    """Per-step defect ``d(k) = x(k+1) - A(k) x(k) - B(k) u(k)``.

    This is the exact process-noise sequence that makes the LTV deviation
    model reproduce a nonlinear run (higher-order plus discretization terms).
    """
    out = np.zeros((traj.horizon, 2))
    for k in range(traj.horizon):
        a_mat, b_mat = converter_ab(p, k)
        out[k] = traj.x[k + 1] - a_mat @ traj.x[k] - b_mat @ traj.u[k]
    return out
