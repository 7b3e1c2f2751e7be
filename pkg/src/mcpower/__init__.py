"""Distributed power control and rate allocation over multiple channels.

Simulation library and CLI for interference-limited wireless networks where
each transmitter-receiver pair spreads its SINR requirement across several
channels: feasibility analysis (spectral-radius tests, equilibrium solves,
diagonal Lyapunov certificates), the fixed-target power-control baseline and
the joint power/target dynamics, SINR and rate region geometry with
time-sharing decompositions, and a scenario-driven command-line harness.
"""

from .model import (
    NetworkSpec,
    SystemState,
    InterferenceMatrices,
    DerivedMetrics,
    build_gains_from_geometry,
    two_pair_positions,
    effective_interference,
    interference_matrix,
    sinr,
    sinr_matrix,
    shannon_rate,
    derive_matrices,
    derived_metrics,
)
from .feasibility import (
    SpectralRadiusError,
    InfeasibleError,
    EquilibriumSolution,
    LyapunovCertificate,
    AllotmentReport,
    spectral_radius,
    spectral_radius_many,
    is_feasible,
    equilibrium_powers,
    lyapunov_certificate,
    allotment_feasible,
)
from .dynamics import (
    AlgorithmParams,
    MonitorState,
    Sample,
    Trajectory,
    DivergenceError,
    fm_derivative,
    joint_derivatives,
    gated_power_derivative,
    adapt_b_gains,
    step,
    simulate,
    utility_value,
    utility_quadratic,
    initial_state,
    initial_monitor,
)

__version__ = "0.1.0"
