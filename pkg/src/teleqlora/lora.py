"""Low-rank adapter algebra over frozen base weights.

An adapter is a trainable pair (A, B) adding (alpha/rank) * B @ A to a frozen
matrix. B starts at zero so attaching adapters never changes model outputs.
Forward, merge, and the adapter-parameter gradients are implemented
explicitly; base weights never receive gradients.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .quant import Nf4Codebook, QuantizedTensor, code_stream_digest, dequantize


@dataclass
class LoraConfig:
    rank: int = 16
    alpha: float = 32.0
    dropout_p: float = 0.05
    seed: int = 0


@dataclass
class LoraAdapter:
    """Trainable pair: a is (rank, in_dim), b is (out_dim, rank)."""

    a: np.ndarray
    b: np.ndarray
    rank: int
    alpha: float
    dropout_p: float
    grad_a: np.ndarray = field(default=None, repr=False)
    grad_b: np.ndarray = field(default=None, repr=False)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def zero_grads(self):
        self.grad_a = np.zeros_like(self.a)
        self.grad_b = np.zeros_like(self.b)


def init_adapter(
    in_dim: int,
    out_dim: int,
    r: int,
    alpha: float,
    dropout_p: float,
    seed: int,
) -> LoraAdapter:
    """A ~ N(0, 1/r) so A@x is O(1); B = 0 so the initial delta is exactly zero."""
    if r < 1:
        raise ValueError("rank must be >= 1")
    if r > min(in_dim, out_dim):
        raise ValueError("rank exceeds layer dimension")
    if not 0.0 <= dropout_p < 1.0:
        raise ValueError("dropout_p must be in [0, 1)")
    rng = np.random.default_rng(seed)
    a = rng.normal(0.0, 1.0 / math.sqrt(r), size=(r, in_dim)).astype(np.float32)
    b = np.zeros((out_dim, r), dtype=np.float32)
    adapter = LoraAdapter(a=a, b=b, rank=r, alpha=float(alpha), dropout_p=float(dropout_p))
    adapter.zero_grads()
    return adapter


class AdaptedLinear:
    """Frozen linear layer (optionally NF4-quantized) plus an optional adapter.

    The training forward caches its input so backward() can form adapter
    gradients; one training thread owns the layer, eval-mode use is read-only.
    """

    def __init__(
        self,
        weight,
        adapter: LoraAdapter | None = None,
        codebook: Nf4Codebook | None = None,
    ):
        if isinstance(weight, QuantizedTensor):
            if codebook is None:
                raise ValueError("codebook required for a quantized base")
            self.base_q: QuantizedTensor | None = weight
            self.weight = dequantize(weight, codebook)
        else:
            self.base_q = None
            self.weight = np.asarray(weight)
        if self.weight.ndim != 2:
            raise ValueError("base weight must be 2-D")
        self.adapter = adapter
        self._check_adapter_dims()
        self._cached_dropped = None
        self._cached_chain = None

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    def _check_adapter_dims(self):
        ad = self.adapter
        if ad is None:
            return
        if ad.a.shape[1] != self.in_dim or ad.b.shape[0] != self.out_dim:
            raise ValueError("adapter dims do not match base weight")

    def attach(self, adapter: LoraAdapter):
        self.adapter = adapter
        self._check_adapter_dims()

    def base_digest(self) -> str:
        if self.base_q is not None:
            return code_stream_digest(self.base_q)
        return hashlib.sha256(np.ascontiguousarray(self.weight).tobytes()).hexdigest()

    def forward(self, x: np.ndarray, training: bool = False, rng=None) -> np.ndarray:
        """y = base @ x + scaling * B @ (A @ x_dropped); x is (..., in_dim)."""
        x = np.asarray(x)
        if x.shape[-1] != self.in_dim:
            raise ValueError(
                f"input dim {x.shape[-1]} does not match layer in_dim {self.in_dim}"
            )
        y = x @ self.weight.T
        ad = self.adapter
        if ad is None:
            self._cached_dropped = None
            self._cached_chain = None
            return y

        if training and ad.dropout_p > 0.0:
            if rng is None:
                raise ValueError("training forward with dropout requires an rng")
            keep = 1.0 - ad.dropout_p
            chain = (rng.random(x.shape) < keep).astype(x.dtype) / keep
            dropped = x * chain
        else:
            chain = None
            dropped = x
        if training:
            self._cached_dropped = dropped
            self._cached_chain = chain
        y = y + ad.scaling * ((dropped @ ad.a.T) @ ad.b.T)
        return y

    def __call__(self, x, training=False, rng=None):
        return self.forward(x, training=training, rng=rng)

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        """Accumulate adapter grads from the cached forward; return dL/dx."""
        da, db, dx = adapter_grads(self, upstream)
        ad = self.adapter
        if ad is not None:
            ad.grad_a = ad.grad_a + da
            ad.grad_b = ad.grad_b + db
        return dx


def adapter_grads(layer: AdaptedLinear, upstream: np.ndarray):
    """Gradients of the adapted forward w.r.t. (A, B, x); base gets none.

    dB = scaling * upstream^T @ (A @ x_dropped)
    dA = scaling * (B^T @ upstream) @ x_dropped^T
    dx flows through both the frozen base and the adapter (dropout included).
    """
    upstream = np.asarray(upstream)
    ad = layer.adapter
    dx = upstream @ layer.weight
    if ad is None:
        return None, None, dx
    if layer._cached_dropped is None:
        raise ValueError("backward before forward")

    dropped = layer._cached_dropped
    flat_up = upstream.reshape(-1, layer.out_dim)
    flat_dropped = dropped.reshape(-1, layer.in_dim)

    h = flat_dropped @ ad.a.T
    db = ad.scaling * (flat_up.T @ h)
    up_b = flat_up @ ad.b
    da = ad.scaling * (up_b.T @ flat_dropped)

    d_dropped = (ad.scaling * (up_b @ ad.a)).reshape(dropped.shape)
    if layer._cached_chain is not None:
        d_dropped = d_dropped * layer._cached_chain
    dx = dx + d_dropped
    return da, db, dx


def merge(base_dense: np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    """Return base + scaling * B @ A without modifying the inputs."""
    base_dense = np.asarray(base_dense)
    if base_dense.shape != (adapter.b.shape[0], adapter.a.shape[1]):
        raise ValueError("adapter dims do not match base weight")
    return base_dense + adapter.scaling * (adapter.b @ adapter.a)
