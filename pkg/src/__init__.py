"""OrthoCal - Bayesian calibration of computer models with orthogonality-constrained bias"""

__version__ = "0.1.0"
