"""Set-level task reward and its KL-shaped variant.

Missing a relevant item is the critical error: it costs far more than
picking up an irrelevant one, so the defaults satisfy
``c_miss < r_irrelevant <= 0 < r_correct``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError, NumericalError


@dataclass(frozen=True)
class RewardConfig:
    r_correct: float = 1.0
    r_irrelevant: float = -0.2
    c_miss: float = -5.0

    def __post_init__(self) -> None:
        if not self.r_correct > 0:
            raise ConfigError("r_correct must be positive")
        if not self.r_irrelevant <= 0:
            raise ConfigError("r_irrelevant must be non-positive")
        if not self.c_miss < self.r_irrelevant:
            raise ConfigError("c_miss must be strictly below r_irrelevant")


@dataclass(frozen=True)
class RewardBreakdown:
    n_correct: int
    n_irrelevant: int
    n_missing: int
    task_reward: float
    kl_term: float = 0.0

    @property
    def shaped(self) -> float:
        return self.task_reward - self.kl_term


def task_reward(
    predicted: frozenset[int] | set[int],
    gold: frozenset[int] | set[int],
    cfg: RewardConfig,
) -> RewardBreakdown:
    n_correct = len(set(predicted) & set(gold))
    n_irrelevant = len(set(predicted) - set(gold))
    n_missing = len(set(gold) - set(predicted))
    total = (
        n_correct * cfg.r_correct
        + n_irrelevant * cfg.r_irrelevant
        + n_missing * cfg.c_miss
    )
    return RewardBreakdown(
        n_correct=n_correct,
        n_irrelevant=n_irrelevant,
        n_missing=n_missing,
        task_reward=total,
    )


def shaped_reward(task: float, logp_pi: float, logp_ref: float, beta: float) -> float:
    """task - beta * (logp_pi - logp_ref)"""
    for value in (task, logp_pi, logp_ref, beta):
        if not math.isfinite(value):
            raise NumericalError(f"non-finite reward input: {value!r}")
    return task - beta * (logp_pi - logp_ref)
