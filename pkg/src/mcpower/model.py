"""Interference network model.

Holds the static description of a network (per-channel gain matrices, noise
levels, average SINR requirements) and evaluates the per-channel quantities
everything else is built from: effective interference, SINR, Shannon rates
and the weighted coupling matrices used by the feasibility analysis.

Conventions
-----------
* ``M`` transmitter-receiver pairs share index ``i`` (transmitter ``i`` talks
  to receiver ``i``); ``N`` channels are indexed by ``k``.
* ``gains[k, i, j]`` is the channel gain from transmitter ``i`` to receiver
  ``j`` on channel ``k``; all gains lie in ``(0, 1]``.
* Powers and noise are in micro-watts throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "NetworkSpec",
    "SystemState",
    "InterferenceMatrices",
    "DerivedMetrics",
    "build_gains_from_geometry",
    "two_pair_positions",
    "effective_interference",
    "interference_matrix",
    "sinr",
    "sinr_matrix",
    "shannon_rate",
    "derive_matrices",
    "derived_metrics",
]


def _float_array(value, name):
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


@dataclass(frozen=True)
class NetworkSpec:
    """Static problem instance: topology, noise and QoS targets.

    Parameters
    ----------
    gains : ndarray, shape (N, M, M)
        Per-channel gain matrices, ``gains[k, i, j]`` in ``(0, 1]``.
    noise : ndarray, shape (M, N)
        Thermal noise at receiver ``i`` on channel ``k``, micro-watts, > 0.
    avg_targets : ndarray, shape (M,)
        Required average SINR per pair (dimensionless), > 0.
    positions : tuple of (transmitters, receivers) or None
        Optional geometry (meters) the gains were generated from.
    """

    gains: np.ndarray
    noise: np.ndarray
    avg_targets: np.ndarray
    positions: tuple | None = None

    def __post_init__(self):
        gains = _float_array(self.gains, "gains")
        if gains.ndim == 2:
            gains = gains[None, :, :]
        if gains.ndim != 3 or gains.shape[1] != gains.shape[2]:
            raise ValueError("gains must be one MxM matrix per channel")
        n, m, _ = gains.shape
        if m < 1 or n < 1:
            raise ValueError("need at least one pair and one channel")
        if np.any(gains <= 0.0) or np.any(gains > 1.0):
            raise ValueError("all gains must lie in (0, 1]")

        noise = _float_array(self.noise, "noise")
        noise = np.broadcast_to(noise, (m, n)).copy()
        if np.any(noise <= 0.0):
            raise ValueError("noise must be strictly positive")

        targets = _float_array(self.avg_targets, "avg_targets")
        targets = np.broadcast_to(targets, (m,)).copy()
        if np.any(targets <= 0.0):
            raise ValueError("avg_targets must be strictly positive")

        object.__setattr__(self, "gains", gains)
        object.__setattr__(self, "noise", noise)
        object.__setattr__(self, "avg_targets", targets)

    @property
    def pair_count(self) -> int:
        return self.gains.shape[1]

    @property
    def channel_count(self) -> int:
        return self.gains.shape[0]

    def direct_gains(self, channel: int) -> np.ndarray:
        """Diagonal g_ii of one channel's gain matrix."""
        return np.diagonal(self.gains[self._check_channel(channel)]).copy()

    def normalized_coupling(self, channel: int) -> np.ndarray:
        """Matrix with entries g_ji / g_ii off the diagonal, zero on it.

        Row ``i`` holds the coefficients that turn the other pairs' powers
        into interference seen at receiver ``i``, normalized by the direct
        link gain.
        """
        g = self.gains[self._check_channel(channel)]
        diag = np.diagonal(g)
        coupling = g.T / diag[:, None]
        np.fill_diagonal(coupling, 0.0)
        return coupling

    def coupling_stack(self) -> np.ndarray:
        """All channels' normalized coupling matrices, shape (N, M, M)."""
        return np.stack([self.normalized_coupling(k) for k in range(self.channel_count)])

    def noise_over_gain(self) -> np.ndarray:
        """nu_{i,k} / g_ii for every pair and channel, shape (M, N)."""
        diag = np.stack([self.direct_gains(k) for k in range(self.channel_count)], axis=1)
        return self.noise / diag

    def _check_channel(self, channel: int) -> int:
        if not 0 <= channel < self.channel_count:
            raise IndexError(f"channel {channel} out of range [0, {self.channel_count})")
        return channel

    def _check_pair(self, i: int) -> int:
        if not 0 <= i < self.pair_count:
            raise IndexError(f"pair {i} out of range [0, {self.pair_count})")
        return i


@dataclass
class SystemState:
    """Dynamic state: transmit powers and allotted SINR targets.

    ``powers`` and ``targets`` are (M, N) arrays; ``time`` is in seconds.
    """

    powers: np.ndarray
    targets: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.powers = _float_array(self.powers, "powers")
        self.targets = _float_array(self.targets, "targets")
        if self.powers.shape != self.targets.shape or self.powers.ndim != 2:
            raise ValueError("powers and targets must be equal-shape (M, N) arrays")
        if np.any(self.powers < 0.0) or np.any(self.targets < 0.0):
            raise ValueError("powers and targets must be nonnegative")
        if self.time < 0.0:
            raise ValueError("time must be nonnegative")

    def copy(self) -> "SystemState":
        return SystemState(self.powers.copy(), self.targets.copy(), self.time)


@dataclass(frozen=True)
class InterferenceMatrices:
    """Coupling matrices of one channel at a given target vector.

    G has entries g_ji/g_ii off the diagonal and zeros on it; C scales row i
    of G by the target of pair i; H = I - C; A = diag(k_i) H. ``rho`` is the
    spectral radius of C.
    """

    G: np.ndarray
    C: np.ndarray
    H: np.ndarray
    A: np.ndarray
    rho: float


@dataclass(frozen=True)
class DerivedMetrics:
    """Instantaneous per-channel quantities of a state."""

    effective_interference: np.ndarray  # (M, N), w_{i,k}
    sinr: np.ndarray                    # (M, N)
    rates: np.ndarray                   # (M, N), bits/s/Hz
    avg_target_gap: np.ndarray          # (M,), gamma_i - mean_k targets


def build_gains_from_geometry(transmitters, receivers, exponent: float = 4.0,
                              reference_distance: float = 1.0) -> np.ndarray:
    """Gain matrix from node positions with a clipped power law.

    g_ij = min(1, (reference_distance / d_ij)^exponent) where d_ij is the
    distance from transmitter i to receiver j. The clip keeps gains in (0, 1]
    for nodes closer than the reference distance.
    """
    tx = _float_array(transmitters, "transmitters")
    rx = _float_array(receivers, "receivers")
    if tx.ndim != 2 or rx.ndim != 2 or tx.shape != rx.shape or tx.shape[1] != 2:
        raise ValueError("transmitters and receivers must be matching lists of 2D points")
    if exponent <= 0.0 or reference_distance <= 0.0:
        raise ValueError("exponent and reference_distance must be positive")
    dist = np.linalg.norm(tx[:, None, :] - rx[None, :, :], axis=2)
    if np.any(dist <= 0.0):
        raise ValueError("coincident transmitter and receiver positions")
    return np.minimum(1.0, (reference_distance / dist) ** exponent)


def two_pair_positions(separation: float, link_length: float = 2.0):
    """Symmetric two-pair layout used by the bundled scenarios.

    The links point in opposite directions so that each transmitter sits at
    exactly ``separation`` meters from the other pair's receiver; both direct
    links have length ``link_length``.
    """
    if separation <= 0.0 or link_length <= 0.0:
        raise ValueError("separation and link_length must be positive")
    tx = [(0.0, 0.0), (separation, link_length)]
    rx = [(0.0, link_length), (separation, 0.0)]
    return tx, rx


def effective_interference(spec: NetworkSpec, powers: np.ndarray, i: int, k: int) -> float:
    """w_{i,k}: interference plus noise at receiver i, normalized by g_ii.

    Equals sum_{j != i} (g_ji / g_ii) p_{j,k} + nu_{i,k} / g_ii and is
    strictly positive for any nonnegative powers.
    """
    spec._check_pair(i)
    spec._check_channel(k)
    powers = _float_array(powers, "powers")
    coupling = spec.normalized_coupling(k)
    return float(coupling[i] @ powers[:, k] + spec.noise[i, k] / spec.gains[k, i, i])


def interference_matrix(spec: NetworkSpec, powers: np.ndarray) -> np.ndarray:
    """All w_{i,k} at once, shape (M, N)."""
    powers = _float_array(powers, "powers")
    w = np.einsum("kij,jk->ik", spec.coupling_stack(), powers)
    return w + spec.noise_over_gain()


def sinr(spec: NetworkSpec, powers: np.ndarray, i: int, k: int) -> float:
    """SINR of pair i on channel k, g_ii p_i / (interference + noise)."""
    spec._check_pair(i)
    spec._check_channel(k)
    powers = _float_array(powers, "powers")
    g = spec.gains[k]
    others = g[:, i] * powers[:, k]
    denom = others.sum() - others[i] + spec.noise[i, k]
    return float(g[i, i] * powers[i, k] / denom)


def sinr_matrix(spec: NetworkSpec, powers: np.ndarray) -> np.ndarray:
    """All SINR values at once, shape (M, N); equals powers / w elementwise."""
    return _float_array(powers, "powers") / interference_matrix(spec, powers)


def shannon_rate(gamma):
    """log2(1 + gamma), bits/s/Hz. Accepts scalars or arrays."""
    arr = np.asarray(gamma, dtype=float)
    if np.any(arr < 0.0):
        raise ValueError("SINR must be nonnegative")
    out = np.log2(1.0 + arr)
    return float(out) if out.ndim == 0 else out


def derive_matrices(spec: NetworkSpec, targets_column, k_gains=None,
                    channel: int = 0) -> InterferenceMatrices:
    """Coupling matrices G, C, H, A of one channel at the given targets.

    ``k_gains`` defaults to all ones. The spectral radius of C is computed
    with the power-iteration routine from the feasibility module.
    """
    from .feasibility import spectral_radius

    m = spec.pair_count
    targets = np.broadcast_to(_float_array(targets_column, "targets"), (m,)).copy()
    if np.any(targets < 0.0):
        raise ValueError("targets must be nonnegative")
    if k_gains is None:
        k_gains = np.ones(m)
    k_gains = np.broadcast_to(_float_array(k_gains, "k_gains"), (m,)).copy()
    if np.any(k_gains <= 0.0):
        raise ValueError("k_gains must be positive")

    G = spec.normalized_coupling(channel)
    C = targets[:, None] * G
    H = np.eye(m) - C
    A = k_gains[:, None] * H
    return InterferenceMatrices(G=G, C=C, H=H, A=A, rho=spectral_radius(C))


def derived_metrics(spec: NetworkSpec, state: SystemState) -> DerivedMetrics:
    """Evaluate w, SINR, rates and the average-target gaps for a state."""
    w = interference_matrix(spec, state.powers)
    gammas = state.powers / w
    return DerivedMetrics(
        effective_interference=w,
        sinr=gammas,
        rates=shannon_rate(gammas),
        avg_target_gap=spec.avg_targets - state.targets.mean(axis=1),
    )
