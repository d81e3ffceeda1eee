"""Full waveform inversion preconditioned by a learned approximate inverse."""

from .wave import GridSpec, SourceProfile, WaveForward, cfl_max_dt, solve_adjoint, solve_forward, time_correlate

__version__ = "0.1.0"

__all__ = [
    "GridSpec",
    "SourceProfile",
    "WaveForward",
    "cfl_max_dt",
    "solve_forward",
    "solve_adjoint",
    "time_correlate",
    "__version__",
]
