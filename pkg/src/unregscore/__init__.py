"""Unregularized anomaly scores for deep generative models and Gaussian mixtures.

The negative log-likelihood of a VAE (its negative ELBO) or of a GMM class
splits into ``L = D + A + M``: a regularization term ``D``, a
log-normalizing constant ``A`` and a squared normalized distance ``M``.
``M`` alone is far less sensitive to how complex a normal sample is.
"""

from .breakdown import ScoreBreakdown, ScoreKind, select

__version__ = "0.1.0"

__all__ = ["ScoreBreakdown", "ScoreKind", "select", "__version__"]
