"""Training classifiers with group-aware priors for robustness to subpopulation shift."""

__version__ = "0.1.0"
