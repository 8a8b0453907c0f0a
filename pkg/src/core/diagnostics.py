"""
Chain diagnostics: effective sample size, credible intervals and kernel densities
"""

from typing import Tuple

import numpy as np
import pandas as pd
from scipy import fft, stats

DEFAULT_DENSITY_GRID = 256


def autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance at every lag, via a zero-padded FFT"""
    x = np.asarray(x, dtype=float)
    n = x.size
    centred = x - x.mean()
    size = fft.next_fast_len(2 * n)
    spectrum = fft.rfft(centred, size)
    acov = fft.irfft(spectrum * np.conjugate(spectrum), size)[:n]
    return acov / n


def effective_sample_size(x: np.ndarray) -> float:
    """
    ESS of a single chain with Geyer's initial monotone sequence estimator.

    A constant chain carries no autocorrelation information and reports its
    length.
    """
    x = np.asarray(x, dtype=float).ravel()
    n = x.size
    if n < 4 or np.ptp(x) == 0:
        return float(n)
    acov = autocovariance(x)
    mean_var = acov[0] * n / (n - 1.0)
    var_plus = mean_var * (n - 1.0) / n

    rho = np.zeros(n)
    rho_even = 1.0
    rho_odd = 1.0 - (mean_var - acov[1]) / var_plus
    rho[0] = rho_even
    rho[1] = rho_odd

    # initial positive sequence
    t = 1
    while t < n - 2 and (rho_even + rho_odd) >= 0.0:
        rho_even = 1.0 - (mean_var - acov[t + 1]) / var_plus
        rho_odd = 1.0 - (mean_var - acov[t + 2]) / var_plus
        rho[t + 1] = rho_even
        if rho_even + rho_odd >= 0:
            rho[t + 2] = rho_odd
        t += 2
    max_t = t

    # initial monotone sequence
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0
            rho[t + 2] = rho[t + 1]
        t += 2

    tau = -1.0 + 2.0 * np.sum(rho[:max_t]) + np.sum(rho[max_t + 1: max_t + 2])
    tau = max(tau, 1.0 / np.log10(n))
    return float(n / tau)


def equal_tailed_interval(x: np.ndarray, level: float = 0.95) -> Tuple[float, float]:
    alpha = 0.5 * (1.0 - level)
    lower, upper = np.quantile(np.asarray(x, dtype=float), [alpha, 1.0 - alpha])
    return float(lower), float(upper)


def kernel_density(x: np.ndarray, grid_size: int = DEFAULT_DENSITY_GRID,
                   padding: float = 4.0) -> pd.DataFrame:
    """
    Gaussian KDE with Silverman's bandwidth on a uniform grid.

    The grid spans the sample range widened by padding bandwidths on each
    side. A chain stuck at one value becomes a spike of unit mass at that
    value.

    Returns:
        DataFrame with columns value and density
    """
    x = np.asarray(x, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("Cannot estimate a density from an empty chain")
    if np.ptp(x) == 0:
        atom = float(x[0])
        half = max(abs(atom), 1.0) * 1e-3
        grid = np.linspace(atom - half, atom + half, grid_size)
        density = np.zeros(grid_size)
        hit = int(np.argmin(np.abs(grid - atom)))
        density[hit] = 1.0 / (grid[1] - grid[0])
        return pd.DataFrame({"value": grid, "density": density})

    kde = stats.gaussian_kde(x, bw_method="silverman")
    bandwidth = float(np.sqrt(kde.covariance[0, 0]))
    grid = np.linspace(x.min() - padding * bandwidth, x.max() + padding * bandwidth, grid_size)
    return pd.DataFrame({"value": grid, "density": kde(grid)})
