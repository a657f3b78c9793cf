"""Fixed-point bridge between real weight vectors and Z_t.

Weights live in [-1, 1]; quantization multiplies by the scaling factor
and rounds half-to-even, so each element carries at most 1/2 an ulp of
error.  Aggregation sums quantized vectors mod t (no wraparound while
K <= k_max) and the uniform 1/K of averaging is applied here, at
dequantization, together with the 1/delta scale-down.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .ring import RingParams

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class QuantizedWeights:
    """Vector over Z_t (canonical residues) plus the scale it was built with."""

    values: np.ndarray
    count: int
    delta: int
    clamped: int = 0  # elements that had to be clipped into [-1, 1]


def quantize(weights, params: RingParams) -> QuantizedWeights:
    """round-half-even(delta * w) reduced mod t, clamping |w| > 1."""
    w = np.asarray(weights, dtype=np.float64)
    clamped = int(np.count_nonzero((w < -1.0) | (w > 1.0)))
    if clamped:
        log.warning("quantize: clamped %d weight(s) outside [-1, 1]", clamped)
        w = np.clip(w, -1.0, 1.0)
    scaled = np.round(w * params.delta).astype(np.int64)  # numpy rounds half to even
    return QuantizedWeights(scaled % params.t, len(w), params.delta, clamped)


def dequantize_sum(summed, k_clients: int, params: RingParams) -> np.ndarray:
    """Centered(sum) / (K * delta): the averaging step, applied client-side."""
    if k_clients < 1:
        raise ParameterError("client count must be at least 1")
    if k_clients > params.k_max:
        raise ParameterError(f"client count {k_clients} exceeds overflow budget k_max={params.k_max}")
    vals = np.asarray(summed, dtype=np.int64)
    centered = np.where(vals > params.t // 2, vals - params.t, vals)
    return centered.astype(np.float64) / (k_clients * params.delta)
