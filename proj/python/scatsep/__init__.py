"""Python access to the scatsep C++ core."""

from ._scatsep import (
    ScatsepError,
    adjusted_rand_index,
    lbfgs,
    run_command,
    scatcov,
    scatcov_labels,
    synth_dataset,
    window_count,
)

__all__ = [
    "ScatsepError",
    "adjusted_rand_index",
    "lbfgs",
    "run_command",
    "scatcov",
    "scatcov_labels",
    "synth_dataset",
    "window_count",
]
