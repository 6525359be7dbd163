"""USN-guided pruning and certification of keypoint CNNs."""

from ._core import (
    ConfigError,
    ContractError,
    KeypointCriterion,
    Network,
    NumericError,
    PerturbationKind,
    PerturbationSpec,
    apply,
    certify_grid,
    certify_probabilistic,
    falsify,
    generate_scene,
    rho_at,
    run_sweep,
    sample,
    usn_stats,
    w2_discrete,
)

__all__ = [
    "ConfigError",
    "ContractError",
    "KeypointCriterion",
    "Network",
    "NumericError",
    "PerturbationKind",
    "PerturbationSpec",
    "apply",
    "certify_grid",
    "certify_probabilistic",
    "falsify",
    "generate_scene",
    "rho_at",
    "run_sweep",
    "sample",
    "usn_stats",
    "w2_discrete",
]
