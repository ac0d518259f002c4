"""Synthetic weight generators for tests and benchmarks.

Real checkpoints are large and license-encumbered; these generators produce
small models with the statistical features that matter to the codec:
Gaussian mass, uniform noise, outlier rows, saturated (clipped) blocks, and
non-finite payloads.
"""

from __future__ import annotations

import numpy as np

from .errors import GeometryError
from .quantize import high_from_f32
from .tensors import DType, ModelTensors, Tensor

__all__ = ["KINDS", "synthetic_tensor", "synthetic_model"]

KINDS = ("gaussian", "uniform", "outlier_rows", "constant", "with_nans", "clipped_gaussian")


def synthetic_tensor(
    name: str,
    rows: int,
    cols: int,
    *,
    kind: str = "gaussian",
    seed: int = 0,
    dtype: DType = DType.BF16,
    sigma: float = 1.0,
) -> Tensor:
    if dtype not in (DType.FP16, DType.BF16):
        raise GeometryError("synthetic weights are FP16 or BF16")
    rng = np.random.default_rng(seed)
    n = rows * cols
    if kind == "gaussian":
        w = rng.normal(0.0, sigma, n).astype(np.float32)
    elif kind == "uniform":
        w = rng.uniform(-2.0 * sigma, 2.0 * sigma, n).astype(np.float32)
    elif kind == "outlier_rows":
        w = rng.normal(0.0, sigma, (rows, cols)).astype(np.float32)
        w[::16] *= 32.0
        w = w.ravel()
    elif kind == "constant":
        w = np.full(n, 0.75 * sigma, np.float32)
    elif kind == "with_nans":
        w = rng.normal(0.0, sigma, n).astype(np.float32)
        bad = rng.random(n) < 0.01
        w[bad] = np.nan
        if n >= 8:
            w[rng.integers(0, n, 4)] = [np.inf, -np.inf, np.nan, np.inf]
    elif kind == "clipped_gaussian":
        # The clip bound is exactly representable in the target dtype, so
        # saturated blocks share a bit-identical absmax scale.
        bound = _representable(2.5 * sigma, dtype)
        w = np.clip(rng.normal(0.0, sigma, n), -bound, bound).astype(np.float32)
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}; options: {KINDS}")
    return Tensor(name, dtype, (rows, cols), high_from_f32(w, dtype))


def _representable(value: float, dtype: DType) -> np.float32:
    blob = high_from_f32(np.array([value], np.float32), dtype)
    u16 = np.frombuffer(blob, "<u2")
    if dtype is DType.FP16:
        return np.float32(u16.view(np.float16)[0])
    return (u16.astype(np.uint32) << 16).view(np.float32)[0]


def synthetic_model(
    rows: int,
    cols: int,
    tensors: int = 1,
    *,
    kind: str = "gaussian",
    seed: int = 0,
    dtype: DType = DType.BF16,
    sigma: float = 1.0,
) -> ModelTensors:
    return ModelTensors(
        synthetic_tensor(
            f"t{i:03d}", rows, cols, kind=kind, seed=seed + i, dtype=dtype, sigma=sigma
        )
        for i in range(tensors)
    )
