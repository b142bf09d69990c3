"""Linear forward operators and Gaussian observation models.

Operators act on flat vectors (desk-scale signals, d <= a few hundred).
Every structured kind implements ``apply`` and ``adjoint`` directly; the
dense materialization exists for auditing and never backs the fast path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, DegenerateLikelihoodError, DimensionError

GAUSSIAN_NLL = "gaussian-nll"
CROSS_ENTROPY = "cross-entropy-over-classes"


def _as_batch(x, dim: int, name: str = "x") -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        if arr.shape[0] != dim:
            raise DimensionError(f"{name}: expected dimension {dim}, got {arr.shape[0]}")
        return arr[None, :], True
    if arr.ndim == 2:
        if arr.shape[1] != dim:
            raise DimensionError(f"{name}: expected trailing dimension {dim}, got {arr.shape[1]}")
        return arr, False
    raise DimensionError(f"{name}: expected 1-D or 2-D array, got ndim={arr.ndim}")


class LinearOperator:
    """Base class: a linear map R^input_dim -> R^output_dim with an adjoint."""

    kind: str
    input_dim: int
    output_dim: int

    def apply(self, x: np.ndarray) -> np.ndarray:
        X, single = _as_batch(x, self.input_dim)
        out = self._apply(X)
        return out[0] if single else out

    __call__ = apply

    def adjoint(self, u: np.ndarray) -> np.ndarray:
        U, single = _as_batch(u, self.output_dim, name="u")
        out = self._adjoint(U)
        return out[0] if single else out

    def _apply(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _adjoint(self, U: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def as_matrix(self) -> np.ndarray:
        """Materialize the dense matrix by probing with basis vectors."""
        return self._apply(np.eye(self.input_dim)).T


class Identity(LinearOperator):
    kind = "identity"

    def __init__(self, dim: int):
        self.input_dim = self.output_dim = int(dim)

    def _apply(self, X):
        return X.copy()

    def _adjoint(self, U):
        return U.copy()


class DownsampleAverage(LinearOperator):
    """Block averaging by an integer factor; the factor must divide the length."""

    kind = "downsample-average"

    def __init__(self, dim: int, factor: int):
        if factor < 1 or dim % factor != 0:
            raise ConfigError(f"downsample factor {factor} must divide signal length {dim}")
        self.input_dim = int(dim)
        self.factor = int(factor)
        self.output_dim = dim // factor

    def _apply(self, X):
        return X.reshape(X.shape[0], self.output_dim, self.factor).mean(axis=2)

    def _adjoint(self, U):
        return np.repeat(U, self.factor, axis=1) / self.factor


class GaussianBlur(LinearOperator):
    """Truncated, renormalized Gaussian kernel with reflect padding."""

    kind = "gaussian-blur"

    def __init__(self, dim: int, kernel_std: float, kernel_width: int):
        if kernel_std <= 0.0:
            raise ConfigError(f"blur kernel_std must be positive, got {kernel_std}")
        if kernel_width < 1 or kernel_width % 2 == 0:
            raise ConfigError(f"blur kernel_width must be odd and >= 1, got {kernel_width}")
        if kernel_width > 2 * dim - 1:
            raise ConfigError(f"blur kernel_width {kernel_width} too wide for length {dim}")
        self.input_dim = self.output_dim = int(dim)
        self.kernel_std = float(kernel_std)
        self.kernel_width = int(kernel_width)
        half = kernel_width // 2
        offsets = np.arange(-half, half + 1)
        kernel = np.exp(-0.5 * (offsets / kernel_std) ** 2)
        self.kernel = kernel / kernel.sum()
        # reflect-index map: gather[i, j] = source index of tap j at output i
        pos = np.arange(dim)[:, None] + offsets[None, :]
        self._gather = _reflect_indices(pos, dim)

    def _apply(self, X):
        return np.einsum("ndw,w->nd", X[:, self._gather], self.kernel)

    def _adjoint(self, U):
        n = U.shape[0]
        out = np.zeros((n, self.input_dim))
        rows = np.broadcast_to(np.arange(n)[:, None, None], (n,) + self._gather.shape)
        cols = np.broadcast_to(self._gather[None], (n,) + self._gather.shape)
        np.add.at(out, (rows, cols), U[:, :, None] * self.kernel[None, None, :])
        return out


def _reflect_indices(pos: np.ndarray, dim: int) -> np.ndarray:
    """Mirror out-of-range indices without repeating the edge sample."""
    if dim == 1:
        return np.zeros_like(pos)
    period = 2 * (dim - 1)
    pos = np.abs(pos) % period
    return np.where(pos >= dim, period - pos, pos)


class CoordinateMask(LinearOperator):
    """Keep a fixed subset of coordinates; may keep none (vacuous observation)."""

    kind = "coordinate-mask"

    def __init__(self, dim: int, kept: "np.ndarray | list[int]"):
        kept = np.asarray(kept, dtype=int).reshape(-1)
        if kept.size and (kept.min() < 0 or kept.max() >= dim):
            raise ConfigError(f"mask indices must lie in [0, {dim}), got {kept}")
        if np.unique(kept).size != kept.size:
            raise ConfigError("mask indices must be unique")
        self.input_dim = int(dim)
        self.kept = np.sort(kept)
        self.output_dim = int(kept.size)

    def _apply(self, X):
        return X[:, self.kept].copy()

    def _adjoint(self, U):
        out = np.zeros((U.shape[0], self.input_dim))
        out[:, self.kept] = U
        return out


class DenseOperator(LinearOperator):
    kind = "dense"

    def __init__(self, matrix: np.ndarray):
        matrix = np.asarray(matrix, dtype=float)
        if matrix.ndim != 2:
            raise ConfigError("dense operator needs a 2-D matrix")
        self.matrix = matrix
        self.output_dim, self.input_dim = matrix.shape

    def _apply(self, X):
        return X @ self.matrix.T

    def _adjoint(self, U):
        return U @ self.matrix


def random_mask(dim: int, drop_fraction: float, seed: int) -> CoordinateMask:
    """Mask dropping exactly ``ceil(drop_fraction * dim)`` coordinates, seeded."""
    if not 0.0 <= drop_fraction <= 1.0:
        raise ConfigError(f"drop_fraction must lie in [0, 1], got {drop_fraction}")
    n_drop = math.ceil(drop_fraction * dim)
    dropped = np.random.default_rng(seed).choice(dim, size=n_drop, replace=False)
    kept = np.setdiff1d(np.arange(dim), dropped)
    return CoordinateMask(dim, kept)


@dataclass(frozen=True)
class Condition:
    """A conditioning target: either a measurement vector or a class label."""

    y: Optional[np.ndarray] = None
    class_index: Optional[int] = None

    def __post_init__(self):
        if (self.y is None) == (self.class_index is None):
            raise ConfigError("condition: set exactly one of measurement y or class_index")
        if self.y is not None:
            arr = np.asarray(self.y, dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, "y", arr)

    @classmethod
    def measurement(cls, y) -> "Condition":
        return cls(y=np.asarray(y, dtype=float))

    @classmethod
    def class_label(cls, index: int) -> "Condition":
        return cls(class_index=int(index))

    @property
    def is_class(self) -> bool:
        return self.class_index is not None


@dataclass(frozen=True)
class ObservationModel:
    """Measurement process y = A x + noise with a named guidance loss."""

    operator: Optional[LinearOperator]
    noise_std: float = 0.0
    loss_kind: str = GAUSSIAN_NLL

    def __post_init__(self):
        if self.loss_kind == GAUSSIAN_NLL:
            if self.operator is None:
                raise ConfigError("gaussian-nll observation requires a linear operator")
            if self.noise_std < 0.0:
                raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")
        elif self.loss_kind == CROSS_ENTROPY:
            if self.operator is not None:
                raise ConfigError("cross-entropy conditions use the class posterior, not an operator")
        else:
            raise ConfigError(f"loss_kind: unknown {self.loss_kind!r}")


def observe(model: ObservationModel, x_true: np.ndarray, seed: int) -> Condition:
    """Draw y = A x_true + noise_std * eps deterministically from ``seed``."""
    if model.loss_kind != GAUSSIAN_NLL:
        raise ValueError("observe is only defined for gaussian-nll observation models")
    clean = model.operator.apply(np.asarray(x_true, dtype=float))
    if clean.ndim != 1:
        raise DimensionError("observe expects a single clean signal, not a batch")
    eps = np.random.default_rng(seed).standard_normal(clean.shape[0])
    return Condition.measurement(clean + model.noise_std * eps)


def loss_and_gradient(
    model: ObservationModel, x0: np.ndarray, cond: Condition
) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian negative log likelihood ``|A x0 - y|^2 / (2 sigma_y^2)`` and its x0-gradient.

    Accepts a single vector or an (n, d) batch; returns matching shapes.
    """
    if model.loss_kind != GAUSSIAN_NLL:
        raise ValueError("loss_and_gradient is only defined for gaussian-nll observation models")
    if cond.is_class:
        raise ConfigError("gaussian-nll loss needs a measurement condition, got a class label")
    if model.noise_std == 0.0:
        raise DegenerateLikelihoodError(
            "noise_std = 0 gives a degenerate likelihood; use an exact projection instead"
        )
    op = model.operator
    X, single = _as_batch(x0, op.input_dim, name="x0")
    y = cond.y
    if y.shape != (op.output_dim,):
        raise DimensionError(f"y: expected shape ({op.output_dim},), got {y.shape}")
    residual = op._apply(X) - y[None, :]
    inv_var = 1.0 / model.noise_std**2
    loss = 0.5 * inv_var * np.einsum("nm,nm->n", residual, residual)
    grad = inv_var * op._adjoint(residual)
    if single:
        return float(loss[0]), grad[0]
    return loss, grad
