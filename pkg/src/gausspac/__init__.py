"""PAC-Bayesian training of wide one-hidden-layer stochastic networks."""
__version__ = "0.1.0"
