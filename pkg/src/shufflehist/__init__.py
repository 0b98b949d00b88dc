"""Simulation, parameter solving, auditing and attacks for shuffle-model private histograms."""

from shufflehist.exceptions import (
    CorpusError,
    DomainError,
    InfeasibleParametersError,
    OutOfRegimeError,
    ResourceLimitError,
    ShuffleHistError,
)
from shufflehist.params import (
    ParamSolution,
    amplification_params,
    error_bound_max,
    error_bound_per_bin,
    min_k,
    solve_q,
)
from shufflehist.protocol import (
    Dataset,
    Estimate,
    ProtocolParams,
    analyze_flip,
    randomize_flip,
    run_protocol,
    shuffle,
)

__version__ = "0.1.0"

__all__ = [
    "CorpusError",
    "Dataset",
    "DomainError",
    "Estimate",
    "InfeasibleParametersError",
    "OutOfRegimeError",
    "ParamSolution",
    "ProtocolParams",
    "ResourceLimitError",
    "ShuffleHistError",
    "amplification_params",
    "analyze_flip",
    "error_bound_max",
    "error_bound_per_bin",
    "min_k",
    "randomize_flip",
    "run_protocol",
    "shuffle",
    "solve_q",
]
