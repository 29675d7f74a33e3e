"""Python access to the NaroNet C++ core."""

from ._naronet import (
    __version__,
    ConfigError,
    mann_whitney,
    nt_xent_loss,
    orthogonal_loss,
    paradigm_names,
    pool_abundance,
    run_stage,
    simulate_tissue,
    stratify_survival,
)

__all__ = [
    "__version__",
    "ConfigError",
    "mann_whitney",
    "nt_xent_loss",
    "orthogonal_loss",
    "paradigm_names",
    "pool_abundance",
    "run_stage",
    "simulate_tissue",
    "stratify_survival",
]
