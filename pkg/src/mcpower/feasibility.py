"""Static feasibility analysis of a network instance.

Spectral-radius tests for the weighted coupling matrix, the Pareto-minimal
equilibrium power solve, construction of a diagonal Lyapunov certificate for
the linear power-control dynamics, and the multi-channel allotment check
(every channel's coupling radius below one, per-pair averages on target).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import NetworkSpec, derive_matrices, _float_array

__all__ = [
    "SpectralRadiusError",
    "InfeasibleError",
    "EquilibriumSolution",
    "LyapunovCertificate",
    "AllotmentReport",
    "spectral_radius",
    "spectral_radius_many",
    "is_feasible",
    "equilibrium_powers",
    "lyapunov_certificate",
    "allotment_feasible",
]


class SpectralRadiusError(RuntimeError):
    """Power iteration did not converge; carries the last estimate."""

    def __init__(self, message, estimate):
        super().__init__(message)
        self.estimate = estimate


class InfeasibleError(RuntimeError):
    """The requested operation needs a feasible instance (rho < 1)."""


@dataclass(frozen=True)
class EquilibriumSolution:
    """Pareto-minimal positive powers meeting all targets with equality."""

    eta: np.ndarray      # gamma_i nu_i / g_ii
    p_star: np.ndarray   # solves (I - C) p = eta
    residual: float      # max-norm of (I - C) p_star - eta


@dataclass(frozen=True)
class LyapunovCertificate:
    """Diagonal D with A^T D + D A positive definite, when one exists."""

    D: np.ndarray
    min_eig: float
    valid: bool
    reason: str = ""


@dataclass(frozen=True)
class AllotmentReport:
    """Outcome of the multi-channel allotment feasibility check."""

    feasible: bool
    rho_per_channel: np.ndarray
    avg_gap: np.ndarray


def _communicating_classes(C: np.ndarray):
    """Index groups that communicate through nonzero entries of C.

    The spectral radius of a nonnegative matrix is the largest radius over
    these diagonal blocks of its Frobenius normal form, and each block is
    irreducible, which is what guarantees the bracket iteration closes.
    """
    m = C.shape[0]
    reach = ((C > 0.0) | np.eye(m, dtype=bool)).astype(np.uint8)
    for _ in range(max(1, int(np.ceil(np.log2(m))) if m > 1 else 1)):
        reach = ((reach @ reach) > 0).astype(np.uint8)
    both = (reach & reach.T).astype(bool)
    seen = np.zeros(m, dtype=bool)
    classes = []
    for i in range(m):
        if not seen[i]:
            members = np.flatnonzero(both[i])
            seen[members] = True
            classes.append(members)
    return classes


_SQUARE_EVERY = 64   # bracket iterations between squaring escalations
_MAX_SQUARINGS = 50


def _irreducible_radius(C: np.ndarray, tol: float, max_iters: int) -> float:
    """Perron root of an irreducible nonnegative matrix.

    Iterates on B = C + eps*I, which shares eigenvectors with C and has
    Perron root rho(C) + eps, so the diagonal shift breaks periodicity (two
    pairs coupling only each other) and is removed exactly afterwards.
    Convergence is certified by the Collatz bracket: for any positive v the
    ratios (Bv)_i / v_i enclose the Perron root.

    Slowly separating spectra (nearly defective matrices, which arise
    whenever one pair's target is almost zero) are handled by periodically
    squaring the iterated matrix: rho(B^2) = rho(B)^2, and taking the
    2^level-th root of the bracket collapses any subexponential gap.
    """
    eps = 1e-2 * C.max()
    P = C + eps * np.eye(C.shape[0])

    level = 0            # P represents B^(2^level) scaled by exp(-cumlog)
    cumlog = 0.0
    v = np.ones(C.shape[0])
    estimate = 0.0
    for it in range(max_iters):
        pv = P @ v
        ratios = pv / v
        lo, hi = ratios.min(), ratios.max()
        rb_lo = np.exp((np.log(lo) + cumlog) / 2 ** level)
        rb_hi = np.exp((np.log(hi) + cumlog) / 2 ** level)
        estimate = 0.5 * (rb_lo + rb_hi) - eps
        if rb_hi - rb_lo <= tol:
            return max(estimate, 0.0)
        v = pv / np.linalg.norm(pv)
        if (it + 1) % _SQUARE_EVERY == 0 and level < _MAX_SQUARINGS:
            sigma = P.max()
            P = (P / sigma) @ (P / sigma)
            cumlog = 2.0 * (cumlog + np.log(sigma))
            level += 1
    raise SpectralRadiusError(
        f"power iteration did not reach tol={tol} in {max_iters} iterations",
        estimate=estimate,
    )


def spectral_radius(C: np.ndarray, tol: float = 1e-10, max_iters: int = 100_000) -> float:
    """Spectral radius of a nonnegative matrix by shifted power iteration.

    Reducible inputs (isolated pairs, zeroed targets) are split into their
    communicating classes first; the radius is the maximum over the
    irreducible blocks, each handled by the certified bracket iteration.
    """
    C = _float_array(C, "C")
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError("C must be square")
    if np.any(C < 0.0):
        raise ValueError("C must be nonnegative")
    if tol <= 0.0 or max_iters < 1:
        raise ValueError("tol and max_iters must be positive")

    best = 0.0
    for members in _communicating_classes(C):
        if members.size == 1:
            i = members[0]
            best = max(best, float(C[i, i]))
            continue
        block = C[np.ix_(members, members)]
        if block.max() > 0.0:
            best = max(best, _irreducible_radius(block, tol, max_iters))
    return best


def spectral_radius_many(Cs: np.ndarray, tol: float = 1e-10,
                         max_iters: int = 100_000) -> np.ndarray:
    """Spectral radii for a stack of nonnegative matrices, shape (K, M, M).

    Runs the shifted Collatz-bracket iteration on all matrices at once and
    falls back to :func:`spectral_radius` (with its squaring escalation) for
    the stragglers; used when monitoring rho along recorded trajectories.
    """
    Cs = _float_array(Cs, "Cs")
    if Cs.ndim != 3 or Cs.shape[1] != Cs.shape[2]:
        raise ValueError("Cs must have shape (K, M, M)")
    if np.any(Cs < 0.0):
        raise ValueError("matrices must be nonnegative")
    kk, m, _ = Cs.shape
    cmax = Cs.reshape(kk, -1).max(axis=1)
    eps = 1e-2 * np.where(cmax > 0.0, cmax, 1.0)
    B = Cs + eps[:, None, None] * np.eye(m)

    v = np.ones((kk, m))
    out = np.zeros(kk)
    active = cmax > 0.0
    for _ in range(min(max_iters, 512)):
        if not active.any():
            return out
        bv = np.einsum("kij,kj->ki", B[active], v[active])
        ratios = bv / v[active]
        lo, hi = ratios.min(axis=1), ratios.max(axis=1)
        est = 0.5 * (lo + hi) - eps[active]
        idx = np.flatnonzero(active)
        done = hi - lo <= tol
        out[idx[done]] = np.maximum(est[done], 0.0)
        v[active] = bv / np.linalg.norm(bv, axis=1, keepdims=True)
        active[idx[done]] = False
    for idx in np.flatnonzero(active):
        out[idx] = spectral_radius(Cs[idx], tol=tol, max_iters=max_iters)
    return out


def is_feasible(spec: NetworkSpec, targets_column, channel: int = 0,
                margin: float = 0.0):
    """Single-channel feasibility test: rho(C(targets)) < 1 - margin.

    Returns ``(feasible, rho)``. Zero rows or columns of C (pairs that
    neither cause nor receive interference) are legitimate; the spectral
    radius handles them, so no irreducibility check is enforced.
    """
    mats = derive_matrices(spec, targets_column, channel=channel)
    return bool(mats.rho < 1.0 - margin), mats.rho


def equilibrium_powers(spec: NetworkSpec, targets_column, channel: int = 0) -> EquilibriumSolution:
    """Solve (I - C) p = eta for the Pareto-minimal power vector.

    Requires rho(C) < 1; the direct LU solve (partial pivoting) then yields
    a componentwise positive solution at which every pair's SINR equals its
    target exactly.
    """
    m = spec.pair_count
    targets = np.broadcast_to(_float_array(targets_column, "targets"), (m,)).copy()
    mats = derive_matrices(spec, targets, channel=channel)
    if mats.rho >= 1.0:
        raise InfeasibleError(f"rho(C) = {mats.rho:.6g} >= 1, no positive equilibrium")

    diag = spec.direct_gains(channel)
    eta = targets * spec.noise[:, channel] / diag
    try:
        p_star = np.linalg.solve(mats.H, eta)
    except np.linalg.LinAlgError as exc:
        raise InfeasibleError(f"equilibrium system singular to tolerance: {exc}") from exc
    residual = float(np.max(np.abs(mats.H @ p_star - eta)))
    if residual > 1e-10 * max(np.linalg.norm(eta), 1e-300):
        raise InfeasibleError(f"equilibrium solve residual too large: {residual:g}")
    return EquilibriumSolution(eta=eta, p_star=p_star, residual=residual)


def lyapunov_certificate(A: np.ndarray) -> LyapunovCertificate:
    """Diagonal stability certificate for A = K (I - C).

    Uses the constructive recipe for nonsingular M-matrices: solve A u = 1
    and A^T v = 1; both solutions are positive exactly when A is an
    M-matrix, and D = diag(v_i / u_i) then makes A^T D + D A positive
    definite. The result is never trusted blindly: positive definiteness is
    re-verified by a Cholesky factorization and the reported smallest
    eigenvalue.
    """
    A = _float_array(A, "A")
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("A must be square")
    m = A.shape[0]
    ones = np.ones(m)
    try:
        u = np.linalg.solve(A, ones)
        v = np.linalg.solve(A.T, ones)
    except np.linalg.LinAlgError:
        return LyapunovCertificate(D=np.full(m, np.nan), min_eig=-np.inf,
                                   valid=False, reason="A is singular")
    if np.any(u <= 0.0) or np.any(v <= 0.0):
        return LyapunovCertificate(D=np.full(m, np.nan), min_eig=-np.inf,
                                   valid=False,
                                   reason="A is not an M-matrix (one-vector solves not positive)")

    D = v / u
    S = A.T @ np.diag(D) + np.diag(D) @ A
    S = 0.5 * (S + S.T)
    min_eig = float(np.linalg.eigvalsh(S).min())
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        return LyapunovCertificate(D=D, min_eig=min_eig, valid=False,
                                   reason="A^T D + D A failed the Cholesky check")
    return LyapunovCertificate(D=D, min_eig=min_eig, valid=min_eig > 0.0)


def allotment_feasible(spec: NetworkSpec, targets: np.ndarray,
                       avg_tol: float = 1e-6) -> AllotmentReport:
    """Check a full (M, N) target allotment.

    Feasible iff every channel's coupling radius is below one and every
    pair's across-channel average matches its requirement within avg_tol.
    """
    targets = _float_array(targets, "targets")
    if targets.shape != (spec.pair_count, spec.channel_count):
        raise ValueError("targets must have shape (pairs, channels)")
    if np.any(targets < 0.0):
        raise ValueError("targets must be nonnegative")

    rho = np.array([
        derive_matrices(spec, targets[:, k], channel=k).rho
        for k in range(spec.channel_count)
    ])
    gap = spec.avg_targets - targets.mean(axis=1)
    feasible = bool(np.all(rho < 1.0) and np.all(np.abs(gap) < avg_tol))
    return AllotmentReport(feasible=feasible, rho_per_channel=rho, avg_gap=gap)
