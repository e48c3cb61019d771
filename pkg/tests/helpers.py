"""Independent finite-difference oracle used by the gradient tests."""
import numpy as np


def numerical_grad(f, arr: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``arr`` in place."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + step
        up = f()
        arr[idx] = old - step
        down = f()
        arr[idx] = old
        g[idx] = (up - down) / (2 * step)
    return g


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray, rtol: float = 1e-4,
                      atol: float = 1e-6) -> None:
    """Relative error below ``rtol``; absolute below ``atol`` for tiny entries."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    assert analytic.shape == numeric.shape
    small = np.abs(analytic) < atol
    abs_err = np.abs(analytic - numeric)
    assert np.all(abs_err[small] < atol), abs_err[small].max()
    big = ~small
    if np.any(big):
        rel = abs_err[big] / np.maximum(np.abs(analytic[big]), np.abs(numeric[big]))
        assert rel.max() < rtol, f"max relative error {rel.max():.3e}"


def max_rel_error(analytic, numeric, atol: float = 1e-6) -> float:
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    big = np.abs(analytic) >= atol
    if not np.any(big):
        return float(np.abs(analytic - numeric).max() / atol * 0)
    abs_err = np.abs(analytic - numeric)
    if np.any(abs_err[~big] >= atol):
        return float("inf")
    return float((abs_err[big] / np.maximum(np.abs(analytic[big]), np.abs(numeric[big]))).max())
