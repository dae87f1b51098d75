"""Offline model-based RL with marginal importance weights (C++ core)."""

from ._ampl import (
    Dataset,
    collect_dataset,
    desk_config,
    expected_schedule,
    paper_config,
    tabular,
    train,
    verify,
)

__all__ = [
    "Dataset",
    "collect_dataset",
    "desk_config",
    "expected_schedule",
    "paper_config",
    "tabular",
    "train",
    "verify",
]
