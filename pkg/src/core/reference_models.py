"""
Bundled benchmark simulators and the real processes they are calibrated against
"""

from typing import Callable, Dict, Tuple

import numpy as np
from scipy import special

from .models import ComputerModel
from .numerics import Box

# Minimizer of the Model 1 population loss: 3 * int_0^1 x (4x + x sin 5x) dx
MODEL1_THETA_STAR = 3.0 * (4.0 / 3.0 - np.cos(5.0) / 5.0 + 2.0 * np.sin(5.0) / 25.0
                           + 2.0 * (np.cos(5.0) - 1.0) / 125.0)
MODEL2_THETA_STAR = np.array([0.2, 0.3])
MODEL3_GRID_SIZE = 7

# Calibration box for Model 2 and its surrogate: f is monotone in each
# coordinate here so the exact model has a unique zero-loss parameter.
MODEL2_THETA_DOMAIN = Box([0.0, 0.0], [0.25, 0.5])
MODEL1_THETA_DOMAIN = Box([0.0], [10.0])

BIVARIATE_SIGMA_OFFDIAG = 0.012


def model1_truth(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1, 1)
    return 4.0 * x + x * np.sin(5.0 * x)


def model1() -> ComputerModel:
    """f(x, t) = t x with y_R(x) = 4x + x sin 5x"""
    return ComputerModel(
        lambda x, t: t[0] * x,
        MODEL1_THETA_DOMAIN,
        q=1,
        gradient=lambda x, t: x[None, :, :].copy(),
        name="model1",
    )


def _model2_eval(x: np.ndarray, t: np.ndarray) -> np.ndarray:
    a = 2.0 * np.pi * t[0] - np.pi
    c = 2.0 * np.pi * t[1] - np.pi
    return 7.0 * np.sin(a) ** 2 + 2.0 * c ** 2 * np.sin(2.0 * np.pi * x - np.pi)


def _model2_gradient(x: np.ndarray, t: np.ndarray) -> np.ndarray:
    a = 2.0 * np.pi * t[0] - np.pi
    c = 2.0 * np.pi * t[1] - np.pi
    d1 = np.full_like(x, 28.0 * np.pi * np.sin(a) * np.cos(a))
    d2 = 8.0 * np.pi * c * np.sin(2.0 * np.pi * x - np.pi)
    return np.stack([d1, d2])


def model2() -> ComputerModel:
    """f(x, t) = 7 sin^2(2 pi t1 - pi) + 2 (2 pi t2 - pi)^2 sin(2 pi x - pi)"""
    return ComputerModel(_model2_eval, MODEL2_THETA_DOMAIN, q=1, gradient=_model2_gradient,
                         name="model2")


def model2_truth(x: np.ndarray) -> np.ndarray:
    return _model2_eval(np.asarray(x, dtype=float).reshape(-1, 1), MODEL2_THETA_STAR)


def model3_theta_grid(size: int = MODEL3_GRID_SIZE) -> np.ndarray:
    """size x size grid of run parameters spanning the Model 2 box"""
    axes = [np.linspace(lo, hi, size) for lo, hi in
            zip(MODEL2_THETA_DOMAIN.lower, MODEL2_THETA_DOMAIN.upper)]
    grid = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([g.ravel() for g in grid])


def bivariate_truth(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1, 1)
    y1 = 4.0 * x + x * np.sin(5.0 * x)
    y2 = 1.0 / (1.0 + np.exp(-6.0 * (x - 0.5)))
    return np.hstack([y1, y2])


def bivariate() -> ComputerModel:
    """f_1(x, t) = t x and f_2(x, t) = Phi(t (x - 0.5))"""

    def evaluate(x, t):
        return np.hstack([t[0] * x, special.ndtr(t[0] * (x - 0.5))])

    def gradient(x, t):
        u = x - 0.5
        density = np.exp(-0.5 * (t[0] * u) ** 2) / np.sqrt(2.0 * np.pi)
        return np.hstack([x, u * density])[None, :, :]

    return ComputerModel(evaluate, MODEL1_THETA_DOMAIN, q=2, gradient=gradient, name="bivariate")


def bivariate_sigma(sigma: float = 0.2, offdiag: float = BIVARIATE_SIGMA_OFFDIAG) -> np.ndarray:
    return np.array([[sigma ** 2, offdiag], [offdiag, sigma ** 2]])


REFERENCE_MODELS: Dict[str, Tuple[Callable[[], ComputerModel], Callable[[np.ndarray], np.ndarray]]] = {
    "model1": (model1, model1_truth),
    "model2": (model2, model2_truth),
    "bivariate": (bivariate, bivariate_truth),
}
