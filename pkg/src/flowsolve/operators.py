"""Linear measurement operators with SVD-backed solves.

Every operator acts on flattened state vectors and is vectorized over
leading axes: ``apply`` maps (..., n_in) -> (..., n_out). Construction
eagerly computes a thin SVD (closed-form where known, dense otherwise),
after which instances are immutable and safe to share across threads.
"""

from __future__ import annotations

import abc
import math

import numpy as np

from .errors import ShapeMismatchError, SingularSystemError
from .tensor_io import read_tensor

__all__ = [
    "LinearOperator",
    "DenseOperator",
    "MaskOperator",
    "DownsampleOperator",
    "GaussianBlurOperator",
    "operator_from_spec",
    "MAX_INPUT_DIM",
]

MAX_INPUT_DIM = 16384
_RANK_RTOL = 1e-10


class LinearOperator(abc.ABC):
    """A measurement matrix A with adjoint, SVD, pseudo-inverse, and Gram solve."""

    kind: str = "abstract"

    def __init__(self, n_out: int, n_in: int):
        if n_in > MAX_INPUT_DIM:
            raise ValueError(f"n_in={n_in} exceeds the supported ceiling {MAX_INPUT_DIM}")
        self._shape = (int(n_out), int(n_in))
        self._U, self._s, self._Vt = self._factorize()

    @property
    def shape(self) -> tuple[int, int]:
        return self._shape

    def _check_last_axis(self, arr, n, what):
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape[-1] != n:
            raise ShapeMismatchError((n,), arr.shape, what)
        return arr

    @abc.abstractmethod
    def _apply(self, x: np.ndarray) -> np.ndarray:
        ...

    @abc.abstractmethod
    def _apply_transpose(self, u: np.ndarray) -> np.ndarray:
        ...

    def apply(self, x) -> np.ndarray:
        """A @ x on the last axis."""
        x = self._check_last_axis(x, self._shape[1], f"{self.kind} apply input")
        return self._apply(x)

    def apply_transpose(self, u) -> np.ndarray:
        """A.T @ u on the last axis."""
        u = self._check_last_axis(u, self._shape[0], f"{self.kind} apply_transpose input")
        return self._apply_transpose(u)

    def dense(self) -> np.ndarray:
        """Materialize A as an (n_out, n_in) array."""
        return self._apply(np.eye(self._shape[1])).T

    def _factorize(self):
        u, s, vt = np.linalg.svd(self.dense(), full_matrices=False)
        return u, s, vt

    def svd(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Thin SVD (U, s, Vt) with s non-increasing, cached at construction."""
        return self._U, self._s, self._Vt

    @property
    def _rank_mask(self) -> np.ndarray:
        smax = self._s[0] if self._s.size else 0.0
        return self._s > _RANK_RTOL * smax

    def pinv_apply(self, y) -> np.ndarray:
        """Pseudo-inverse application: pinv(A) @ y on the last axis."""
        y = self._check_last_axis(y, self._shape[0], f"{self.kind} pinv input")
        mask = self._rank_mask
        coords = y @ self._U[:, mask]
        return (coords / self._s[mask]) @ self._Vt[mask]

    def project_range_input(self, x) -> np.ndarray:
        """Orthogonal projection pinv(A) @ A @ x onto the input row space."""
        x = self._check_last_axis(x, self._shape[1], f"{self.kind} projection input")
        vt = self._Vt[self._rank_mask]
        return (x @ vt.T) @ vt

    def solve_gram(self, r2: float, sigma_y2: float, residual, warn_sink=None) -> np.ndarray:
        """Solve (r2 * A A^T + sigma_y2 * I) z = residual via the cached SVD.

        With sigma_y2 = 0 and a rank-deficient Gram matrix, components of
        the residual outside the invertible subspace are projected out and
        a rank-deficiency note is appended to ``warn_sink`` when given.
        """
        if r2 < 0.0 or sigma_y2 < 0.0:
            raise ValueError("r2 and sigma_y2 must be non-negative")
        if r2 == 0.0 and sigma_y2 == 0.0:
            raise SingularSystemError("r2 = sigma_y2 = 0 leaves nothing to invert")
        residual = self._check_last_axis(residual, self._shape[0], f"{self.kind} gram residual")
        mask = self._rank_mask
        n_out = self._shape[0]
        coords = residual @ self._U
        diag = r2 * self._s**2 + sigma_y2
        if sigma_y2 > 0.0:
            coef = np.where(mask, 1.0 / diag, 1.0 / sigma_y2)
            in_span = (coords * coef) @ self._U.T
            complement = (residual - coords @ self._U.T) / sigma_y2
            return in_span + complement
        coef = np.where(mask, 1.0 / np.where(mask, diag, 1.0), 0.0)
        deficient = int(n_out - np.count_nonzero(mask))
        if deficient > 0 and warn_sink is not None:
            warn_sink.append(
                f"rank_deficiency: {self.kind} gram system is singular on a "
                f"{deficient}-dimensional subspace; residual projected onto range"
            )
        return (coords * coef) @ self._U.T


class DenseOperator(LinearOperator):
    """Explicit matrix operator."""

    kind = "dense"

    def __init__(self, matrix):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise ValueError(f"matrix must be 2-D, got ndim={matrix.ndim}")
        self._matrix = matrix
        super().__init__(*matrix.shape)

    def dense(self) -> np.ndarray:
        return self._matrix

    def _apply(self, x):
        return x @ self._matrix.T

    def _apply_transpose(self, u):
        return u @ self._matrix


class MaskOperator(LinearOperator):
    """Coordinate selection: keeps the listed input indices."""

    kind = "mask"

    def __init__(self, keep, n_in: int):
        keep = np.asarray(keep, dtype=np.intp).ravel()
        if keep.size == 0:
            raise ValueError("mask must keep at least one coordinate")
        if np.unique(keep).size != keep.size:
            raise ValueError("mask indices must be unique")
        if keep.min() < 0 or keep.max() >= n_in:
            raise ValueError(f"mask indices must lie in [0, {n_in})")
        self.keep = np.sort(keep)
        super().__init__(len(self.keep), n_in)

    def _apply(self, x):
        return x[..., self.keep]

    def _apply_transpose(self, u):
        out = np.zeros(u.shape[:-1] + (self._shape[1],))
        out[..., self.keep] = u
        return out

    def _factorize(self):
        # Rows of A are distinct standard basis vectors, so A is already
        # an orthonormal-row factor: A = I * 1 * A.
        k, n = self._shape
        vt = np.zeros((k, n))
        vt[np.arange(k), self.keep] = 1.0
        return np.eye(k), np.ones(k), vt


class DownsampleOperator(LinearOperator):
    """Non-overlapping block average by an integer factor (1-D or 2-D)."""

    kind = "downsample"

    def __init__(self, factor: int, input_shape):
        factor = int(factor)
        if factor < 1:
            raise ValueError("factor must be >= 1")
        input_shape = tuple(int(v) for v in input_shape)
        if len(input_shape) not in (1, 2):
            raise ValueError(f"input_shape must be 1-D or 2-D, got {input_shape}")
        if any(v % factor for v in input_shape):
            raise ValueError(f"input shape {input_shape} is not divisible by factor {factor}")
        self.factor = factor
        self.input_shape = input_shape
        self.output_shape = tuple(v // factor for v in input_shape)
        self._block = factor ** len(input_shape)
        super().__init__(int(np.prod(self.output_shape)), int(np.prod(input_shape)))

    def _apply(self, x):
        lead = x.shape[:-1]
        f = self.factor
        if len(self.input_shape) == 1:
            out = x.reshape(lead + (self.output_shape[0], f)).mean(axis=-1)
        else:
            h, w = self.output_shape
            out = x.reshape(lead + (h, f, w, f)).mean(axis=(-3, -1))
        return out.reshape(lead + (self._shape[0],))

    def _apply_transpose(self, u):
        lead = u.shape[:-1]
        f = self.factor
        if len(self.input_shape) == 1:
            out = np.repeat(u, f, axis=-1)
        else:
            h, w = self.output_shape
            grid = u.reshape(lead + (h, w))
            out = np.repeat(np.repeat(grid, f, axis=-2), f, axis=-1)
        return out.reshape(lead + (self._shape[1],)) / self._block

    def _factorize(self):
        # Rows are disjoint block indicators scaled by 1/block, giving
        # identical singular values 1/sqrt(block).
        root = math.sqrt(self._block)
        vt = self.dense() * root
        return np.eye(self._shape[0]), np.full(self._shape[0], 1.0 / root), vt


class GaussianBlurOperator(LinearOperator):
    """Circular 2-D convolution with a normalized Gaussian kernel."""

    kind = "blur"

    def __init__(self, size: int, std: float, input_shape):
        size = int(size)
        input_shape = tuple(int(v) for v in input_shape)
        if len(input_shape) != 2:
            raise ValueError(f"blur needs a 2-D input shape, got {input_shape}")
        if size < 1 or size % 2 == 0:
            raise ValueError(f"kernel size must be odd and positive, got {size}")
        if size > min(input_shape):
            raise ValueError(f"kernel size {size} exceeds image extent {input_shape}")
        if size > 1 and std <= 0.0:
            raise ValueError("std must be positive for kernels wider than 1")
        self.size = size
        self.std = float(std)
        self.input_shape = input_shape
        n = int(np.prod(input_shape))
        self._kernel_fft = self._build_kernel_fft()
        super().__init__(n, n)

    def _build_kernel_fft(self):
        size, std = self.size, self.std
        if size == 1:
            kernel = np.ones((1, 1))
        else:
            offsets = np.arange(size) - (size - 1) / 2.0
            profile = np.exp(-0.5 * (offsets / std) ** 2)
            kernel = np.outer(profile, profile)
            kernel /= kernel.sum()
        h, w = self.input_shape
        padded = np.zeros((h, w))
        offs = (np.arange(size) - (size - 1) // 2)
        padded[np.ix_(offs % h, offs % w)] = kernel
        return np.fft.rfft2(padded)

    def _conv(self, x, kernel_fft):
        lead = x.shape[:-1]
        h, w = self.input_shape
        imgs = x.reshape((-1, h, w))
        out = np.fft.irfft2(np.fft.rfft2(imgs) * kernel_fft, s=(h, w))
        return out.reshape(lead + (h * w,))

    def _apply(self, x):
        return self._conv(x, self._kernel_fft)

    def _apply_transpose(self, u):
        return self._conv(u, np.conj(self._kernel_fft))


def _infer_image_shape(n_in: int) -> tuple[int, int]:
    side = math.isqrt(n_in)
    if side * side != n_in:
        raise ValueError(
            f"cannot infer an image shape from {n_in} state dimensions; "
            "provide an explicit 'shape' in the operator spec"
        )
    return side, side


def operator_from_spec(spec: dict, n_in: int) -> LinearOperator:
    """Build an operator from its run-config representation.

    The state dimension ``n_in`` comes from the prior. Image-structured
    kinds take an optional ``shape`` [H, W]; when absent, a square image
    is inferred from ``n_in``.
    """
    spec = dict(spec)
    kind = spec.pop("kind", None)
    shape = spec.pop("shape", None)
    if kind == "mask":
        op = MaskOperator(spec.pop("keep"), n_in)
    elif kind == "downsample":
        factor = spec.pop("factor")
        input_shape = tuple(shape) if shape is not None else (n_in,)
        op = DownsampleOperator(factor, input_shape)
    elif kind == "blur":
        input_shape = tuple(shape) if shape is not None else _infer_image_shape(n_in)
        op = GaussianBlurOperator(spec.pop("size"), spec.pop("std"), input_shape)
    elif kind == "dense":
        op = DenseOperator(read_tensor(spec.pop("path")))
    else:
        raise ValueError(f"unknown operator kind {kind!r}")
    if spec:
        raise ValueError(f"unexpected operator keys: {sorted(spec)}")
    if op.shape[1] != n_in:
        raise ShapeMismatchError((n_in,), op.shape, f"{kind} operator input dimension")
    return op
