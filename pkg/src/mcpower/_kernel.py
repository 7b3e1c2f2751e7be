"""Fixed-step integration core for the power/target dynamics.

Plain nested loops over small (pairs x channels) arrays, compiled with numba
when it is importable and run as ordinary Python otherwise. The public API in
:mod:`mcpower.dynamics` wraps these routines and owns all input validation;
nothing here checks its arguments.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - slow fallback, numba ships by default
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(func):
            return func

        return wrap


MODE_FM = 0
MODE_THEOREM1 = 1
MODE_THEOREM2 = 2

TERM_EQUILIBRIUM = 0
TERM_MAX_TIME = 1
TERM_DIVERGENCE = 2

# Tolerated relative per-step utility increase before a step counts as a
# monotonicity violation (integrator noise allowance).
U_INCREASE_RTOL = 1e-7


@njit(cache=True)
def eval_state(gn, nog, p, x, w, resid, theta, gamma):
    """Effective interference, target residuals and average gaps of a state."""
    m, n = p.shape
    for i in range(m):
        for k in range(n):
            s = nog[i, k]
            for j in range(m):
                s += gn[k, i, j] * p[j, k]
            w[i, k] = s
            resid[i, k] = x[i, k] * w[i, k] - p[i, k]
    for i in range(m):
        tot = 0.0
        for k in range(n):
            tot += x[i, k]
        theta[i] = gamma[i] - tot / n


@njit(cache=True)
def eval_rates(cg, bg, zeta, mode, eq_tol, x_dot_eps, w, resid, theta,
               pdot, xdot, bracket):
    """Mode-specific derivatives from precomputed state quantities.

    In the gated mode a pair whose average gap is open while every channel's
    target velocity sits below the zero threshold has its power updates held
    at zero; its target motion restarts from the pure average-tracking term.
    """
    m, n = pdot.shape
    for i in range(m):
        for k in range(n):
            pdot[i, k] = cg[i, k] * resid[i, k]
            if mode == MODE_FM:
                xdot[i, k] = 0.0
                bracket[i, k] = 0.0
            else:
                br = (zeta[i] / n) * theta[i] - w[i, k] * resid[i, k]
                bracket[i, k] = br
                xdot[i, k] = bg[i, k] * br
    if mode == MODE_THEOREM2:
        for i in range(m):
            if abs(theta[i]) > eq_tol:
                frozen = True
                for k in range(n):
                    if abs(xdot[i, k]) >= x_dot_eps:
                        frozen = False
                        break
                if frozen:
                    for k in range(n):
                        pdot[i, k] = 0.0
                        xdot[i, k] = bg[i, k] * (zeta[i] / n) * theta[i]


@njit(cache=True)
def field(gn, nog, cg, bg, zeta, gamma, mode, eq_tol, x_dot_eps,
          p, x, w, resid, theta, pdot, xdot, bracket):
    eval_state(gn, nog, p, x, w, resid, theta, gamma)
    eval_rates(cg, bg, zeta, mode, eq_tol, x_dot_eps, w, resid, theta,
               pdot, xdot, bracket)


@njit(cache=True)
def utility(cg, dwt, zeta, theta, resid):
    """Global utility: weighted average-gap and SINR-residual squares."""
    m, n = resid.shape
    total = 0.0
    for i in range(m):
        acc = zeta[i] * theta[i] * theta[i]
        for k in range(n):
            r = cg[i, k] * resid[i, k]
            acc += r * r
        total += dwt[i] * acc
    return total


@njit(cache=True)
def gain_condition_ok(bg, bracket, pdot, pddot, squared):
    """Whether the gain condition holds for every pair at this instant.

    Per pair: the per-channel inequality b*bracket^2 >= rhs must hold in at
    least one channel, and the pair-level decrease sum must be strictly
    negative. ``squared`` selects rhs = 2*pdot*pddot^2 versus 2*pdot*pddot.
    """
    m, n = bracket.shape
    for i in range(m):
        exists = False
        s = 0.0
        for k in range(n):
            br = bracket[i, k]
            lhs = bg[i, k] * br * br
            pd = pddot[i, k]
            if squared:
                rhs = 2.0 * pdot[i, k] * pd * pd
            else:
                rhs = 2.0 * pdot[i, k] * pd
            if lhs >= rhs:
                exists = True
            s += rhs - lhs
        if not exists or s >= 0.0:
            return False
    return True


# Fraction of the explicit-integrator stability limit (|lambda| h < 2.78 for
# RK4 on a decaying mode) that target-update gains may occupy.
_STAB_BUDGET = 0.5
_RK4_REAL_AXIS = 2.78


@njit(cache=True)
def budget_clamp(bg, b_req, b_init, w, zeta, h, b_max):
    """Effective gains: the ratcheted request capped by the stability budget.

    The local decay rate of the target equation is about b*(zeta/N^2 + w^2);
    a gain pushing rate*h past the RK4 stability interval would wreck the
    trajectory it is meant to certify, so requests apply only up to the
    budget at the current interference level. Never clamps below the
    initial gains.
    """
    m, n = bg.shape
    for i in range(m):
        for k in range(n):
            rate = zeta[i] / (n * n) + w[i, k] * w[i, k]
            lim = _STAB_BUDGET * _RK4_REAL_AXIS / (h * rate)
            if lim < b_init[i, k]:
                lim = b_init[i, k]
            if lim > b_max:
                lim = b_max
            v = b_req[i, k]
            bg[i, k] = v if v < lim else lim


@njit(cache=True)
def adapt_gains(bg, b_req, bracket, pdot, pddot, w, zeta, h, b_safety, b_max,
                x_dot_eps):
    """Raise requested gains where the pair-level decrease demands it.

    For each pair the sum over channels of (-b*bracket^2 + 2*pdot*pddot)
    must stay strictly negative; when it is not, the gain of the channel
    with the largest bracket magnitude (among those whose target velocity
    clears the zero threshold) is raised just far enough, times the safety
    margin. The sign-sensitive product 2*pdot*pddot means inflation can only
    trigger while some power is rising *and* accelerating; enforcing a
    per-channel inequality instead would chase its own tail, because once
    targets ride their fast manifold the bracket shrinks inversely with b.

    Raises b_req (the persistent ratchet, capped at b_max); the caller
    re-derives the effective gains through budget_clamp. Grants beyond the
    current stability budget are truncated to it.

    Returns 1 if the pair-level decrease stayed violated for some pair with
    rising power and no channel whose gain could be raised (a stall).
    """
    m, n = bg.shape
    stalls = 0
    for i in range(m):
        any_pos = False
        s = 0.0
        best = -1
        best_mag = 0.0
        for k in range(n):
            if pdot[i, k] > 0.0:
                any_pos = True
            br = bracket[i, k]
            s += 2.0 * pdot[i, k] * pddot[i, k] - bg[i, k] * br * br
            if abs(bg[i, k] * br) >= x_dot_eps and abs(br) > best_mag:
                best_mag = abs(br)
                best = k
        if s > 0.0:
            raised = False
            if best >= 0:
                br = bracket[i, best]
                need = b_safety * (s + bg[i, best] * br * br) / (br * br)
                rate = zeta[i] / (n * n) + w[i, best] * w[i, best]
                cap = _STAB_BUDGET * _RK4_REAL_AXIS / (h * rate)
                if cap > b_max:
                    cap = b_max
                if need > cap:
                    need = cap
                if need > b_req[i, best]:
                    b_req[i, best] = need
                    raised = True
            if not raised and any_pos:
                stalls += 1
    return stalls


@njit(cache=True)
def rk4_advance(gn, nog, cg, bg, zeta, gamma, mode, eq_tol, x_dot_eps,
                h, p, x, pdot, xdot,
                w2, resid2, theta2, br2, k2p, k2x, k3p, k3x, k4p, k4x, ps, xs):
    """One RK4 step; stage-1 slopes are the given pdot/xdot.

    Writes the unclamped candidate state into (ps, xs).
    """
    m, n = p.shape
    half = 0.5 * h
    for i in range(m):
        for k in range(n):
            ps[i, k] = p[i, k] + half * pdot[i, k]
            xs[i, k] = x[i, k] + half * xdot[i, k]
    field(gn, nog, cg, bg, zeta, gamma, mode, eq_tol, x_dot_eps,
          ps, xs, w2, resid2, theta2, k2p, k2x, br2)
    for i in range(m):
        for k in range(n):
            ps[i, k] = p[i, k] + half * k2p[i, k]
            xs[i, k] = x[i, k] + half * k2x[i, k]
    field(gn, nog, cg, bg, zeta, gamma, mode, eq_tol, x_dot_eps,
          ps, xs, w2, resid2, theta2, k3p, k3x, br2)
    for i in range(m):
        for k in range(n):
            ps[i, k] = p[i, k] + h * k3p[i, k]
            xs[i, k] = x[i, k] + h * k3x[i, k]
    field(gn, nog, cg, bg, zeta, gamma, mode, eq_tol, x_dot_eps,
          ps, xs, w2, resid2, theta2, k4p, k4x, br2)
    sixth = h / 6.0
    for i in range(m):
        for k in range(n):
            ps[i, k] = p[i, k] + sixth * (pdot[i, k] + 2.0 * (k2p[i, k] + k3p[i, k]) + k4p[i, k])
            xs[i, k] = x[i, k] + sixth * (xdot[i, k] + 2.0 * (k2x[i, k] + k3x[i, k]) + k4x[i, k])


@njit(cache=True)
def run_loop(gn, nog, cg, b_req, zeta, gamma, dwt, p, x,
             mode, h, n_steps, p_max, eq_tol, x_dot_eps,
             b_safety, b_max, squared, dwell_req, stride,
             rec_t, rec_p, rec_x, rec_pdot, rec_pddot, rec_b, rec_u, rec_ok,
             bg_out):
    """Integrate up to n_steps (a multiple of stride), recording at stride
    boundaries. Mutates p, x and b_req in place; bg_out receives the final
    effective gains.

    Returns (status, final_step, n_recorded, utility_violations, stalls).
    Equilibrium and max-time termination happen at recording boundaries so
    that samples stay uniformly spaced; divergence aborts immediately and the
    offending state is not committed.
    """
    m, n = p.shape
    w = np.zeros((m, n))
    resid = np.zeros((m, n))
    theta = np.zeros(m)
    pdot = np.zeros((m, n))
    xdot = np.zeros((m, n))
    bracket = np.zeros((m, n))
    w2 = np.zeros((m, n))
    resid2 = np.zeros((m, n))
    theta2 = np.zeros(m)
    br2 = np.zeros((m, n))
    k2p = np.zeros((m, n))
    k2x = np.zeros((m, n))
    k3p = np.zeros((m, n))
    k3x = np.zeros((m, n))
    k4p = np.zeros((m, n))
    k4x = np.zeros((m, n))
    ps = np.zeros((m, n))
    xs = np.zeros((m, n))
    pdot_prev = np.zeros((m, n))
    pddot = np.zeros((m, n))
    b_init = b_req.copy()
    bg = b_req.copy()

    violations = 0
    stalls = 0
    dwell = 0
    n_rec = 0
    status = TERM_MAX_TIME
    final_step = 0
    step_idx = 0
    u_prev = 0.0
    ok_prev = False
    while True:
        # full evaluation at the current state
        eval_state(gn, nog, p, x, w, resid, theta, gamma)
        if mode == MODE_THEOREM2:
            budget_clamp(bg, b_req, b_init, w, zeta, h, b_max)
        eval_rates(cg, bg, zeta, mode, eq_tol, x_dot_eps, w, resid, theta,
                   pdot, xdot, bracket)
        if step_idx > 0:
            for i in range(m):
                for k in range(n):
                    pddot[i, k] = (pdot[i, k] - pdot_prev[i, k]) / h
        if mode == MODE_THEOREM2:
            stalls += adapt_gains(bg, b_req, bracket, pdot, pddot, w, zeta, h,
                                  b_safety, b_max, x_dot_eps)
            budget_clamp(bg, b_req, b_init, w, zeta, h, b_max)
            eval_rates(cg, bg, zeta, mode, eq_tol, x_dot_eps, w, resid, theta,
                       pdot, xdot, bracket)
            ok = gain_condition_ok(bg, bracket, pdot, pddot, squared)
        else:
            ok = False
        u_cur = utility(cg, dwt, zeta, theta, resid)
        if step_idx > 0 and ok_prev and u_cur > u_prev * (1.0 + U_INCREASE_RTOL):
            violations += 1

        md = 0.0
        for i in range(m):
            for k in range(n):
                a = abs(pdot[i, k])
                if a > md:
                    md = a
                a = abs(xdot[i, k])
                if a > md:
                    md = a
        if md < eq_tol:
            dwell += 1
        else:
            dwell = 0

        if step_idx % stride == 0:
            rec_t[n_rec] = step_idx * h
            rec_p[n_rec] = p
            rec_x[n_rec] = x
            rec_pdot[n_rec] = pdot
            rec_pddot[n_rec] = pddot
            rec_b[n_rec] = bg
            rec_u[n_rec] = u_cur
            rec_ok[n_rec] = 1 if ok else 0
            n_rec += 1
            if step_idx > 0 and dwell >= dwell_req:
                status = TERM_EQUILIBRIUM
                final_step = step_idx
                break
            if step_idx >= n_steps:
                status = TERM_MAX_TIME
                final_step = step_idx
                break

        rk4_advance(gn, nog, cg, bg, zeta, gamma, mode, eq_tol, x_dot_eps,
                    h, p, x, pdot, xdot,
                    w2, resid2, theta2, br2, k2p, k2x, k3p, k3x, k4p, k4x, ps, xs)
        bad = False
        for i in range(m):
            for k in range(n):
                pn = ps[i, k]
                xn = xs[i, k]
                if not (np.isfinite(pn) and np.isfinite(xn)) or abs(pn) > 10.0 * p_max:
                    bad = True
        if bad:
            status = TERM_DIVERGENCE
            final_step = step_idx + 1
            break
        for i in range(m):
            for k in range(n):
                pn = ps[i, k]
                if pn < 0.0:
                    pn = 0.0
                elif pn > p_max:
                    pn = p_max
                p[i, k] = pn
                xn = xs[i, k]
                x[i, k] = xn if xn > 0.0 else 0.0
        step_idx += 1
        for i in range(m):
            for k in range(n):
                pdot_prev[i, k] = pdot[i, k]
        u_prev = u_cur
        ok_prev = ok

    for i in range(m):
        for k in range(n):
            bg_out[i, k] = bg[i, k]
    return status, final_step, n_rec, violations, stalls
