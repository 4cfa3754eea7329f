"""
Shared numerical kernels

Minimum-norm least squares, pseudo-inverse application, central finite
differences and seeded random generators. All inputs are converted to float64
numpy arrays; nothing here keeps state between calls.
"""

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from src.logging_config import get_logger

logger = get_logger(__name__)

EPS = np.finfo(np.float64).eps


class NumericsError(ValueError):
    """Raised when a numerical kernel receives input it cannot handle"""

    pass


@dataclass(frozen=True)
class LeastSquaresSolution:
    """Minimum-norm minimizer of ||A delta - b||^2"""

    solution: np.ndarray
    residual_norm: float
    rank: int

    def __post_init__(self) -> None:
        """Validate solution data"""
        if self.residual_norm < 0:
            raise ValueError("Residual norm must be non-negative")
        if self.rank < 0:
            raise ValueError("Rank must be non-negative")


def as_matrix(a: np.ndarray | list, name: str = "matrix") -> np.ndarray:
    """Convert to a finite 2-D float64 array (the dense matrix type)"""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise NumericsError(f"{name} must be 2-dimensional, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericsError(f"{name} contains non-finite entries")
    return m


def as_vector(v: np.ndarray | list, name: str = "vector") -> np.ndarray:
    """Convert to a finite 1-D float64 array"""
    x = np.asarray(v, dtype=np.float64)
    if x.ndim != 1:
        raise NumericsError(f"{name} must be 1-dimensional, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericsError(f"{name} contains non-finite entries")
    return x


def singular_cutoff(shape: tuple[int, int], largest: float) -> float:
    """Relative cutoff below which singular values are treated as zero"""
    return max(shape) * EPS * largest


def min_norm_lstsq(a: np.ndarray | list, b: np.ndarray | list) -> LeastSquaresSolution:
    """
    Solve min ||A delta - b||^2 and return the minimizer of smallest norm

    Singular values below max(rows, cols) * eps * sigma_max are discarded, so
    directions in the null space of A (for example a per-context constant shift
    of tabular logits) never enter the solution.
    """
    a = as_matrix(a, "A")
    b = as_vector(b, "b")
    rows, cols = a.shape
    if b.shape[0] != rows:
        raise NumericsError(f"b has length {b.shape[0]} but A has {rows} rows")
    if a.size == 0:
        return LeastSquaresSolution(
            solution=np.zeros(cols), residual_norm=float(np.linalg.norm(b)), rank=0
        )

    u, s, vt = np.linalg.svd(a, full_matrices=False)
    cutoff = singular_cutoff(a.shape, s[0]) if s.size else 0.0
    keep = s > cutoff
    coefficients = np.zeros_like(s)
    coefficients[keep] = (u[:, keep].T @ b) / s[keep]
    delta = vt.T @ coefficients
    residual = a @ delta - b
    return LeastSquaresSolution(
        solution=delta,
        residual_norm=float(np.linalg.norm(residual)),
        rank=int(np.count_nonzero(keep)),
    )


def pinv_apply(
    f: np.ndarray | list, v: np.ndarray | list, tol: float = 1e-10, rcond: float | None = None
) -> np.ndarray:
    """
    Apply the pseudo-inverse of a symmetric positive semidefinite matrix to v

    Uses an eigendecomposition with the same relative cutoff as min_norm_lstsq
    unless rcond gives an explicit relative cutoff.
    """
    f = as_matrix(f, "F")
    v = as_vector(v, "v")
    n = f.shape[0]
    if f.shape != (n, n):
        raise NumericsError(f"F must be square, got shape {f.shape}")
    if v.shape[0] != n:
        raise NumericsError(f"v has length {v.shape[0]} but F is {n}x{n}")
    if n == 0:
        return np.zeros(0)

    scale = max(1.0, float(np.max(np.abs(f))))
    if np.max(np.abs(f - f.T)) > tol * scale:
        raise NumericsError("F is not symmetric within tolerance")

    eigenvalues, eigenvectors = np.linalg.eigh(0.5 * (f + f.T))
    largest = float(np.max(np.abs(eigenvalues)))
    if eigenvalues[0] < -tol * max(1.0, largest):
        raise NumericsError(f"F is not positive semidefinite (eigenvalue {eigenvalues[0]:.3e})")
    cutoff = singular_cutoff(f.shape, largest) if rcond is None else rcond * largest
    keep = eigenvalues > cutoff
    projected = eigenvectors[:, keep].T @ v
    return eigenvectors[:, keep] @ (projected / eigenvalues[keep])


def finite_diff_grad(
    f: Callable[[np.ndarray], float], theta: np.ndarray | list, h: float = 1e-5
) -> np.ndarray:
    """Central finite-difference gradient (f(theta + h e_i) - f(theta - h e_i)) / 2h"""
    if h <= 0:
        raise NumericsError("Step h must be positive")
    theta = as_vector(theta, "theta")
    grad = np.zeros_like(theta)
    for i in range(theta.shape[0]):
        step = np.zeros_like(theta)
        step[i] = h
        upper = float(f(theta + step))
        lower = float(f(theta - step))
        if not (np.isfinite(upper) and np.isfinite(lower)):
            raise NumericsError(f"Non-finite function value at coordinate {i}")
        grad[i] = (upper - lower) / (2.0 * h)
    return grad


def relative_error(actual: np.ndarray, expected: np.ndarray, floor: float = 1e-12) -> float:
    """||actual - expected|| / max(||actual||, ||expected||), or 0 when both are below floor"""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    diff = float(np.linalg.norm(actual - expected))
    scale = max(float(np.linalg.norm(actual)), float(np.linalg.norm(expected)))
    if diff <= floor:
        return 0.0
    return diff / scale if scale > 0 else float("inf")


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; identical seeds give bitwise-identical streams"""
    if seed < 0:
        raise NumericsError("Seed must be non-negative")
    return np.random.default_rng(np.random.SeedSequence(seed))


def spawn_seeds(seed: int, count: int) -> list[int]:
    """Derive independent child seeds for concurrent runs"""
    children = np.random.SeedSequence(seed).spawn(count)
    return [int(child.generate_state(1, dtype=np.uint64)[0] >> 1) for child in children]
