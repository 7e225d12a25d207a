"""Exact finite-space SSVAE objectives, density-ratio classifiers and trainers.

Everything works on small discrete spaces, so every expectation is an exact
sum and the identities relating the structured ELBO, mutual information and
InfoNCE can be checked to rounding error.
"""

__version__ = "0.1.0"
