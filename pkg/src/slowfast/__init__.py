"""Simulation and verification of slow-fast jump SDEs under two-time-scale Markov switching."""

from .errors import (
    AllBelowNoiseFloor,
    BudgetExceeded,
    ConfigInvalid,
    GridExtrapolation,
    InvalidGenerator,
    NonFiniteError,
    NotPSD,
    NotWeaklyIrreducible,
    ScheduleGapError,
    SlowFastError,
    StepTooCoarse,
    StudyFailed,
)
from .model import JumpMeasure, SlowFastModel
from .switching import (
    ClassPartition,
    GeneratorSchedule,
    QuasiStationaryDistribution,
    SwitchingPath,
    TwoScaleGenerator,
    aggregated_generator,
    check_weak_irreducibility,
    quasi_stationary_schedule,
    simulate_chain,
)

__version__ = "0.1.0"
