"""Power and allotted-SINR-target dynamics.

Three modes share one integrator:

* ``fm``: the classic linear power update tracking fixed targets,
  dp_i/dt = k_i (-p_i + target_i * w_i), one independent copy per channel.
* ``theorem1``: the joint update, where each pair also steers its per-channel
  allotted targets so that their across-channel average approaches the
  required value while penalizing the per-channel SINR residual.
* ``theorem2``: the gated variant. A pair whose average gap is open while all
  of its target velocities sit at zero holds its power updates; target motion
  restarts from the pure average-tracking term. Target-update gains b_{i,k}
  adapt upward so the utility-decrease condition stays enforceable.

Gain-condition conventions
--------------------------
The decrease condition compares b*bracket^2 against a right-hand side that
reads 2*pdot*pddot^2 taken literally (``gain_rhs_squared=True``, the default
for the *recorded* condition flag); a sign-sensitive alternative 2*pdot*pddot
is selectable. Gain *adaptation* always enforces the sign-sensitive form:
the squared form is positive whenever the power moves at all, and once the
targets ride their fast manifold the bracket shrinks inversely with b, so
enforcing the squared form makes the required gain grow without bound. The
sign-sensitive form triggers exactly in the rising-and-accelerating power
episodes the gate is meant to resolve.

Integration is fixed-step RK4 (the model is a set of autonomous ODEs) with
powers clamped to [0, p_max] and targets to [0, inf) after every step.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernel
from .feasibility import InfeasibleError, equilibrium_powers, spectral_radius_many
from .model import (
    DerivedMetrics,
    NetworkSpec,
    SystemState,
    _float_array,
    derive_matrices,
    interference_matrix,
    shannon_rate,
)

__all__ = [
    "AlgorithmParams",
    "MonitorState",
    "Sample",
    "Trajectory",
    "DivergenceError",
    "MODES",
    "fm_derivative",
    "joint_derivatives",
    "gated_power_derivative",
    "adapt_b_gains",
    "step",
    "simulate",
    "utility_value",
    "utility_quadratic",
    "initial_state",
    "initial_monitor",
]

MODES = {"fm": _kernel.MODE_FM, "theorem1": _kernel.MODE_THEOREM1,
         "theorem2": _kernel.MODE_THEOREM2}
_TERMINATION = {_kernel.TERM_EQUILIBRIUM: "equilibrium",
                _kernel.TERM_MAX_TIME: "max_time",
                _kernel.TERM_DIVERGENCE: "divergence"}

EQUILIBRIUM_DWELL_STEPS = 100


class DivergenceError(RuntimeError):
    """The integrator produced non-finite or runaway values."""

    def __init__(self, message, step_index=None):
        super().__init__(message)
        self.step_index = step_index


@dataclass
class AlgorithmParams:
    """Gains, bounds and integrator settings for a run.

    Scalar gain entries broadcast to per-pair (k_gains, zeta, d_weights) or
    per-pair-per-channel (c_gains, b_gains) arrays when resolved against a
    network.
    """

    mode: str = "theorem1"
    k_gains: object = 1.0      # FM proportionality constants, per pair
    c_gains: object = 1.0      # power-update gains, per pair and channel
    b_gains: object = 200.0    # initial target-update gains, per pair and channel
    zeta: object = 20.0        # average-tracking weights, per pair
    d_weights: object = 1.0    # utility weights (monitoring only), per pair
    p_max: float = 1e6         # micro-watts
    step: float = 1e-3         # integrator step, seconds
    b_safety: float = 1.1      # multiplicative margin on adapted gains
    eq_tol: float = 1e-6       # equilibrium detection threshold on |pdot|, |xdot|
    x_dot_eps: float = 1e-9    # below this, a target velocity counts as zero
    gain_rhs_squared: bool = True  # convention for the recorded gain condition
    b_max: float = 1e12        # hard cap on adapted gains

    def resolve(self, spec: NetworkSpec) -> "_Resolved":
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {sorted(MODES)}")
        m, n = spec.pair_count, spec.channel_count
        kg = np.broadcast_to(_float_array(self.k_gains, "k_gains"), (m,)).copy()
        cg = np.broadcast_to(_float_array(self.c_gains, "c_gains"), (m, n)).copy()
        bg = np.broadcast_to(_float_array(self.b_gains, "b_gains"), (m, n)).copy()
        zeta = np.broadcast_to(_float_array(self.zeta, "zeta"), (m,)).copy()
        dwt = np.broadcast_to(_float_array(self.d_weights, "d_weights"), (m,)).copy()
        for name, arr in (("k_gains", kg), ("c_gains", cg), ("b_gains", bg),
                          ("zeta", zeta), ("d_weights", dwt)):
            if np.any(arr <= 0.0):
                raise ValueError(f"{name} must be strictly positive")
        if self.p_max <= 0.0 or self.step <= 0.0:
            raise ValueError("p_max and step must be positive")
        if self.b_safety <= 1.0:
            raise ValueError("b_safety must exceed 1")
        if self.eq_tol <= 0.0 or self.x_dot_eps <= 0.0:
            raise ValueError("eq_tol and x_dot_eps must be positive")
        if self.b_max < bg.max():
            raise ValueError("b_max must not undercut the initial b_gains")
        mode = MODES[self.mode]
        # the FM update tracks fixed targets with the per-pair constants
        cg_eff = np.repeat(kg[:, None], n, axis=1) if mode == _kernel.MODE_FM else cg
        return _Resolved(
            mode=mode, kg=kg, cg=cg_eff, b0=bg, zeta=zeta, dwt=dwt,
            gamma=spec.avg_targets.copy(),
            gn=np.ascontiguousarray(spec.coupling_stack()),
            nog=np.ascontiguousarray(spec.noise_over_gain()),
            h=float(self.step), p_max=float(self.p_max),
            eq_tol=float(self.eq_tol), x_dot_eps=float(self.x_dot_eps),
            b_safety=float(self.b_safety), b_max=float(self.b_max),
            squared=bool(self.gain_rhs_squared),
        )


@dataclass
class _Resolved:
    mode: int
    kg: np.ndarray
    cg: np.ndarray
    b0: np.ndarray
    zeta: np.ndarray
    dwt: np.ndarray
    gamma: np.ndarray
    gn: np.ndarray
    nog: np.ndarray
    h: float
    p_max: float
    eq_tol: float
    x_dot_eps: float
    b_safety: float
    b_max: float
    squared: bool


@dataclass
class MonitorState:
    """Derivative estimates and health metrics carried along a trajectory."""

    p_dot: np.ndarray            # current power derivatives (gated where applicable)
    p_ddot: np.ndarray           # backward-difference estimates of the second derivative
    theta: np.ndarray            # per-pair average-target gaps
    utility: float
    rho_per_channel: np.ndarray  # coupling radius at the current targets
    gain_ok: bool = False        # recorded gain condition (theorem2 only)
    b_gains: np.ndarray | None = None    # effective target-update gains this step
    b_request: np.ndarray | None = None  # ratcheted gain requests (persistent)


@dataclass(frozen=True)
class Sample:
    time: float
    state: SystemState
    metrics: DerivedMetrics
    monitor: MonitorState


@dataclass
class Trajectory:
    """Recorded run: uniformly spaced samples plus termination bookkeeping."""

    samples: list
    terminated_by: str           # equilibrium | max_time | divergence
    steps: int                   # integration steps taken (offending step if diverged)
    step_size: float
    record_stride: int
    utility_violations: int
    stall_events: int
    b_final: np.ndarray          # effective gains at termination
    b_request: np.ndarray | None = None  # ratcheted gain requests at termination

    @property
    def final(self) -> Sample:
        return self.samples[-1]

    def times(self) -> np.ndarray:
        return np.array([s.time for s in self.samples])


def _state_buffers(m, n):
    return (np.zeros((m, n)), np.zeros((m, n)), np.zeros(m),
            np.zeros((m, n)), np.zeros((m, n)), np.zeros((m, n)))


def _eval_field(rp: _Resolved, bg, p, x):
    """Kernel field evaluation returning fresh arrays."""
    w, resid, theta, pdot, xdot, bracket = _state_buffers(*p.shape)
    _kernel.field(rp.gn, rp.nog, rp.cg, bg, rp.zeta, rp.gamma, rp.mode,
                  rp.eq_tol, rp.x_dot_eps, p, x, w, resid, theta,
                  pdot, xdot, bracket)
    return w, resid, theta, pdot, xdot, bracket


def fm_derivative(spec: NetworkSpec, powers_column, targets_column, k_gains,
                  channel: int = 0) -> np.ndarray:
    """Fixed-target power update dp_i/dt = k_i (-p_i + target_i w_i)."""
    m = spec.pair_count
    p = np.broadcast_to(_float_array(powers_column, "powers"), (m,))
    targets = np.broadcast_to(_float_array(targets_column, "targets"), (m,))
    kg = np.broadcast_to(_float_array(k_gains, "k_gains"), (m,))
    w = spec.normalized_coupling(channel) @ p + spec.noise[:, channel] / spec.direct_gains(channel)
    return kg * (targets * w - p)


def joint_derivatives(spec: NetworkSpec, state: SystemState,
                      params: AlgorithmParams):
    """Ungated joint power/target derivatives (pdot, xdot), both (M, N)."""
    rp = params.resolve(spec)
    n = spec.channel_count
    w = interference_matrix(spec, state.powers)
    resid = state.targets * w - state.powers
    pdot = rp.cg * resid
    theta = rp.gamma - state.targets.mean(axis=1)
    bracket = (rp.zeta / n)[:, None] * theta[:, None] - w * resid
    xdot = rp.b0 * bracket
    if rp.mode == _kernel.MODE_FM:
        xdot = np.zeros_like(pdot)
    return pdot, xdot


def gated_power_derivative(spec: NetworkSpec, state: SystemState,
                           monitor: MonitorState | None,
                           params: AlgorithmParams) -> np.ndarray:
    """Power derivatives with rows held at zero where the gate is closed.

    The gate closes for pair i when its average gap exceeds eq_tol while
    every channel's target velocity is below x_dot_eps; the live gains from
    ``monitor`` are used when available.
    """
    rp = params.resolve(spec)
    bg = rp.b0 if monitor is None or monitor.b_gains is None else monitor.b_gains
    _, _, _, pdot, _, _ = _eval_field(rp, np.ascontiguousarray(bg, dtype=float),
                                      state.powers, state.targets)
    return pdot


def adapt_b_gains(spec: NetworkSpec, state: SystemState, monitor: MonitorState,
                  params: AlgorithmParams) -> np.ndarray:
    """One adaptation pass; returns the updated gain requests without
    mutating inputs. The effective per-step gain is the request clamped to
    the stability budget of the configured step size (never below the
    initial gains)."""
    rp = params.resolve(spec)
    b_req = np.array(rp.b0 if monitor.b_request is None else monitor.b_request,
                     dtype=float)
    bg = np.empty_like(b_req)
    w = interference_matrix(spec, state.powers)
    _kernel.budget_clamp(bg, b_req, rp.b0, w, rp.zeta, rp.h, rp.b_max)
    _, _, _, pdot, _, bracket = _eval_field(rp, bg, state.powers, state.targets)
    _kernel.adapt_gains(bg, b_req, bracket, pdot, monitor.p_ddot, w, rp.zeta,
                        rp.h, rp.b_safety, rp.b_max, rp.x_dot_eps)
    return b_req


def initial_state(spec: NetworkSpec, powers=None, targets=None, seed=None,
                  power_range=(0.01, 1.0), time: float = 0.0) -> SystemState:
    """Build a start state; random powers require a seed for reproducibility."""
    m, n = spec.pair_count, spec.channel_count
    if powers is None:
        if seed is None:
            raise ValueError("random initial powers require an explicit seed")
        lo, hi = power_range
        if not 0.0 <= lo < hi:
            raise ValueError("power_range must satisfy 0 <= low < high")
        powers = np.random.default_rng(int(seed)).uniform(lo, hi, size=(m, n))
    else:
        powers = np.broadcast_to(_float_array(powers, "powers"), (m, n)).copy()
    if targets is None:
        targets = np.repeat(spec.avg_targets[:, None], n, axis=1)
    else:
        targets = np.broadcast_to(_float_array(targets, "targets"), (m, n)).copy()
    return SystemState(powers=powers, targets=targets, time=time)


def _monitor_from_arrays(rp, spec, p, x, pdot, pddot, theta, u, gain_ok, bg, b_req):
    rho = _rho_stack(spec, x[None, :, :], rp.gn)[0]
    return MonitorState(p_dot=pdot.copy(), p_ddot=pddot.copy(), theta=theta.copy(),
                        utility=float(u), rho_per_channel=rho,
                        gain_ok=bool(gain_ok), b_gains=bg.copy(),
                        b_request=b_req.copy())


def _effective_gains(rp, b_req, w):
    """Requests clamped to the step-size stability budget (>= initial gains)."""
    bg = np.empty_like(b_req)
    if rp.mode == _kernel.MODE_THEOREM2:
        _kernel.budget_clamp(bg, b_req, rp.b0, w, rp.zeta, rp.h, rp.b_max)
    else:
        bg[:] = b_req
    return bg


def initial_monitor(spec: NetworkSpec, state: SystemState,
                    params: AlgorithmParams) -> MonitorState:
    """Monitor for a fresh trajectory (second-derivative estimates start at 0)."""
    rp = params.resolve(spec)
    b_req = rp.b0.copy()
    bg = _effective_gains(rp, b_req, interference_matrix(spec, state.powers))
    w, resid, theta, pdot, xdot, bracket = _eval_field(rp, bg, state.powers, state.targets)
    pddot = np.zeros_like(pdot)
    ok = (rp.mode == _kernel.MODE_THEOREM2
          and _kernel.gain_condition_ok(bg, bracket, pdot, pddot, rp.squared))
    u = _kernel.utility(rp.cg, rp.dwt, rp.zeta, theta, resid)
    return _monitor_from_arrays(rp, spec, state.powers, state.targets,
                                pdot, pddot, theta, u, ok, bg, b_req)


def step(spec: NetworkSpec, state: SystemState, params: AlgorithmParams,
         monitor: MonitorState | None = None):
    """Advance one RK4 step and refresh the monitor.

    Theorem-2 gain adaptation runs before the step (requests ratchet upward,
    the effective gains honor the stability budget); powers are clamped to
    [0, p_max] and targets to [0, inf) afterwards. Raises DivergenceError on
    non-finite values or powers beyond 10x the cap before clamping.
    """
    rp = params.resolve(spec)
    if monitor is None:
        monitor = initial_monitor(spec, state, params)
    b_req = np.array(monitor.b_request if monitor.b_request is not None else rp.b0,
                     dtype=float)
    pddot = np.array(monitor.p_ddot, dtype=float)
    m, n = spec.pair_count, spec.channel_count

    p = np.ascontiguousarray(state.powers, dtype=float).copy()
    x = np.ascontiguousarray(state.targets, dtype=float).copy()
    bg = _effective_gains(rp, b_req, interference_matrix(spec, p))
    w, resid, theta, pdot, xdot, bracket = _eval_field(rp, bg, p, x)
    if rp.mode == _kernel.MODE_THEOREM2:
        _kernel.adapt_gains(bg, b_req, bracket, pdot, pddot, w, rp.zeta, rp.h,
                            rp.b_safety, rp.b_max, rp.x_dot_eps)
        _kernel.budget_clamp(bg, b_req, rp.b0, w, rp.zeta, rp.h, rp.b_max)
        _kernel.eval_rates(rp.cg, bg, rp.zeta, rp.mode, rp.eq_tol, rp.x_dot_eps,
                           w, resid, theta, pdot, xdot, bracket)
        ok = _kernel.gain_condition_ok(bg, bracket, pdot, pddot, rp.squared)
    else:
        ok = False

    w2, resid2, theta2, k2p, k2x, br2 = _state_buffers(m, n)
    k3p, k3x, k4p, k4x, ps, xs = (np.zeros((m, n)) for _ in range(6))
    _kernel.rk4_advance(rp.gn, rp.nog, rp.cg, bg, rp.zeta, rp.gamma, rp.mode,
                        rp.eq_tol, rp.x_dot_eps, rp.h, p, x, pdot, xdot,
                        w2, resid2, theta2, br2, k2p, k2x, k3p, k3x, k4p, k4x, ps, xs)
    if not (np.all(np.isfinite(ps)) and np.all(np.isfinite(xs))) \
            or np.any(np.abs(ps) > 10.0 * rp.p_max):
        raise DivergenceError("integration step produced divergent values")
    p_new = np.clip(ps, 0.0, rp.p_max)
    x_new = np.maximum(xs, 0.0)

    wn, residn, thetan, pdotn, xdotn, brn = _eval_field(rp, bg, p_new, x_new)
    pddot_new = (pdotn - pdot) / rp.h
    u_new = _kernel.utility(rp.cg, rp.dwt, rp.zeta, thetan, residn)
    new_state = SystemState(powers=p_new, targets=x_new, time=state.time + rp.h)
    new_monitor = _monitor_from_arrays(rp, spec, p_new, x_new, pdotn, pddot_new,
                                       thetan, u_new, ok, bg, b_req)
    return new_state, new_monitor


def _rho_stack(spec: NetworkSpec, targets_3d: np.ndarray, gn: np.ndarray) -> np.ndarray:
    """Coupling radii for a (R, M, N) stack of target matrices -> (R, N)."""
    r, m, n = targets_3d.shape
    cs = targets_3d.transpose(0, 2, 1)[:, :, :, None] * gn[None, :, :, :]
    return spectral_radius_many(cs.reshape(r * n, m, m)).reshape(r, n)


def simulate(spec: NetworkSpec, start: SystemState, params: AlgorithmParams,
             max_time: float, record_stride: int = 1) -> Trajectory:
    """Integrate until equilibrium, divergence, or max_time.

    Equilibrium is declared once the largest derivative magnitude has stayed
    below eq_tol for 100 consecutive steps; equilibrium and max-time checks
    run at recording boundaries so samples stay uniformly spaced (the run
    length is rounded up to a whole number of strides).
    """
    if max_time <= 0.0:
        raise ValueError("max_time must be positive")
    if record_stride < 1:
        raise ValueError("record_stride must be at least 1")
    rp = params.resolve(spec)
    stride = int(record_stride)
    n_steps = int(np.ceil(max_time / rp.h))
    n_steps = ((n_steps + stride - 1) // stride) * stride
    n_rec_max = n_steps // stride + 1

    m, n = spec.pair_count, spec.channel_count
    p = np.ascontiguousarray(start.powers, dtype=float).copy()
    x = np.ascontiguousarray(start.targets, dtype=float).copy()
    b_req = rp.b0.copy()
    bg_out = rp.b0.copy()

    rec_t = np.zeros(n_rec_max)
    rec_p = np.zeros((n_rec_max, m, n))
    rec_x = np.zeros((n_rec_max, m, n))
    rec_pdot = np.zeros((n_rec_max, m, n))
    rec_pddot = np.zeros((n_rec_max, m, n))
    rec_b = np.zeros((n_rec_max, m, n))
    rec_u = np.zeros(n_rec_max)
    rec_ok = np.zeros(n_rec_max, dtype=np.uint8)

    status, final_step, n_rec, violations, stalls = _kernel.run_loop(
        rp.gn, rp.nog, rp.cg, b_req, rp.zeta, rp.gamma, rp.dwt, p, x,
        rp.mode, rp.h, n_steps, rp.p_max, rp.eq_tol, rp.x_dot_eps,
        rp.b_safety, rp.b_max, rp.squared, EQUILIBRIUM_DWELL_STEPS, stride,
        rec_t, rec_p, rec_x, rec_pdot, rec_pddot, rec_b, rec_u, rec_ok, bg_out)

    samples = _assemble_samples(spec, rp, start.time, n_rec, rec_t, rec_p, rec_x,
                                rec_pdot, rec_pddot, rec_b, rec_u, rec_ok)
    return Trajectory(
        samples=samples,
        terminated_by=_TERMINATION[status],
        steps=int(final_step),
        step_size=rp.h,
        record_stride=stride,
        utility_violations=int(violations),
        stall_events=int(stalls),
        b_final=bg_out,
        b_request=b_req,
    )


def _assemble_samples(spec, rp, t0, n_rec, rec_t, rec_p, rec_x,
                      rec_pdot, rec_pddot, rec_b, rec_u, rec_ok):
    p = rec_p[:n_rec]
    x = rec_x[:n_rec]
    w = np.einsum("kij,rjk->rik", rp.gn, p) + rp.nog[None, :, :]
    gammas = p / w
    rates = shannon_rate(gammas)
    theta = rp.gamma[None, :] - x.mean(axis=2)
    rho = _rho_stack(spec, x, rp.gn)

    samples = []
    for r in range(n_rec):
        state = SystemState(powers=p[r].copy(), targets=x[r].copy(),
                            time=t0 + float(rec_t[r]))
        metrics = DerivedMetrics(effective_interference=w[r], sinr=gammas[r],
                                 rates=rates[r], avg_target_gap=theta[r])
        monitor = MonitorState(p_dot=rec_pdot[r].copy(), p_ddot=rec_pddot[r].copy(),
                               theta=theta[r].copy(), utility=float(rec_u[r]),
                               rho_per_channel=rho[r].copy(),
                               gain_ok=bool(rec_ok[r]), b_gains=rec_b[r].copy())
        samples.append(Sample(time=t0 + float(rec_t[r]), state=state,
                              metrics=metrics, monitor=monitor))
    return samples


def utility_value(spec: NetworkSpec, state: SystemState,
                  params: AlgorithmParams) -> float:
    """Closed-form global utility at a state.

    Sum over pairs of d_i [zeta_i theta_i^2 + sum_k (c_{i,k}(x w - p))^2];
    zero exactly at a feasible fixed point.
    """
    rp = params.resolve(spec)
    w = interference_matrix(spec, state.powers)
    resid = state.targets * w - state.powers
    theta = rp.gamma - state.targets.mean(axis=1)
    return float(np.sum(rp.dwt * (rp.zeta * theta ** 2
                                  + np.sum((rp.cg * resid) ** 2, axis=1))))


def utility_quadratic(spec: NetworkSpec, state: SystemState,
                      params: AlgorithmParams) -> float:
    """Utility via the per-channel quadratic form around the equilibrium.

    Requires every channel's coupling radius at the current targets to be
    below one so the per-channel equilibrium p*(x_k) exists; then
    sum_k e_k^T A_k^T D A_k e_k with e_k = p_k - p*(x_k) reproduces the
    residual part of the closed form exactly.
    """
    rp = params.resolve(spec)
    theta = rp.gamma - state.targets.mean(axis=1)
    total = float(np.sum(rp.dwt * rp.zeta * theta ** 2))
    D = np.diag(rp.dwt)
    for k in range(spec.channel_count):
        targets = state.targets[:, k]
        mats = derive_matrices(spec, targets, k_gains=rp.cg[:, k], channel=k)
        if mats.rho >= 1.0:
            raise InfeasibleError(
                f"channel {k} has rho={mats.rho:.6g} >= 1; quadratic form undefined")
        p_star = equilibrium_powers(spec, targets, channel=k).p_star
        e = state.powers[:, k] - p_star
        ae = mats.A @ e
        total += float(ae @ D @ ae)
    return total
