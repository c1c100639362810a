"""The (D, A, M, L) score quadruple and score-kind selection."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class ScoreKind(str, enum.Enum):
    L = "L"
    D = "D"
    A = "A"
    M = "M"


@dataclass(frozen=True)
class ScoreBreakdown:
    """Decomposition ``L = D + A + M`` of a negative log-likelihood score.

    ``D`` is the regularization term (KL divergence for a VAE, negative log
    mixture weight for a GMM), ``A`` the log-normalizing constant and ``M``
    the squared normalized distance.  Fields are floats for a single sample
    or equal-length arrays for a batch.
    """

    D: float | np.ndarray
    A: float | np.ndarray
    M: float | np.ndarray
    L: float | np.ndarray

    def __getitem__(self, i) -> "ScoreBreakdown":
        return ScoreBreakdown(
            float(np.asarray(self.D)[i]),
            float(np.asarray(self.A)[i]),
            float(np.asarray(self.M)[i]),
            float(np.asarray(self.L)[i]),
        )

    def __len__(self) -> int:
        return int(np.size(self.L))

    def residual(self) -> float | np.ndarray:
        """``L - (D + A + M)``; zero up to rounding for a consistent breakdown."""
        return self.L - (self.D + self.A + self.M)


def select(breakdown: ScoreBreakdown, kind: ScoreKind | str) -> float | np.ndarray:
    """Return the component named by ``kind``."""
    return getattr(breakdown, ScoreKind(kind).value)
