"""MCMC over the free-form posterior of sparse inducing-point GP models.

Whitened objective with exact gradients, Gaussian variational fitting for
initialization, tuned Hamiltonian Monte Carlo over latent values and
hyperparameters jointly, and Monte-Carlo prediction for regression,
classification and log-Gaussian Cox processes.
"""

__version__ = "0.1.0"

from .linalg import HAVE_COMPILED  # noqa: F401
