"""Tiny decoder-only transformer: grouped-query attention, masked cross-entropy,
nucleus-sampled generation.

Everything outside the low-rank adapters is frozen, so the backward pass only
propagates input gradients through norms, attention, and the FFN while
accumulating adapter-parameter gradients in the AdaptedLinear layers.
Compute follows the dtype of the stored parameters (float32 by default).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .lora import AdaptedLinear, init_adapter
from .quant import Nf4Codebook, quantize_blockwise

EOS_ID = 256
PAD_ID = 257
BOS_ID = 258
UNK_ID = 259

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

PROJECTION_NAMES = ("attn.q_proj", "attn.k_proj", "attn.v_proj", "attn.o_proj", "ffn.fc1", "ffn.fc2")


@dataclass
class ModelConfig:
    vocab_size: int = 260
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    n_kv_heads: int = 2
    d_ff: int = 256
    max_seq: int = 256
    seed: int = 0

    def validate(self):
        if self.n_heads % self.n_kv_heads != 0:
            raise ValueError("n_heads must be divisible by n_kv_heads")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "n_kv_heads", "d_ff", "max_seq"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def kv_dim(self) -> int:
        return self.n_kv_heads * self.head_dim


@dataclass
class TokenBatch:
    """token_ids (batch, seq) with a boolean mask marking loss positions."""

    token_ids: np.ndarray
    loss_mask: np.ndarray

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.loss_mask = np.asarray(self.loss_mask, dtype=bool)
        if self.token_ids.shape != self.loss_mask.shape:
            raise ValueError("loss_mask shape must match token_ids")


def _rms_norm_forward(x, gain, eps=1e-6):
    ms = np.mean(x * x, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    return x * inv * gain, (x, inv)


def _rms_norm_backward(dy, gain, cache):
    # gains are frozen; only dx is needed
    x, inv = cache
    d = x.shape[-1]
    gdy = dy * gain
    dot = np.sum(gdy * x, axis=-1, keepdims=True)
    return gdy * inv - x * (dot * inv**3 / d)


def _gelu_forward(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def _gelu_backward(dy, x):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return dy * (cdf + x * pdf)


def gqa_attention(q, k, v, n_heads, n_kv_heads, causal=True, return_cache=False):
    """Scaled dot-product attention where query head h uses KV head h // group.

    q is (B, T, n_heads, head_dim); k and v are (B, T, n_kv_heads, head_dim).
    Returns (B, T, n_heads, head_dim); attention rows sum to 1.
    """
    if n_heads % n_kv_heads != 0:
        raise ValueError("n_heads must be divisible by n_kv_heads")
    if q.shape[2] != n_heads or k.shape[2] != n_kv_heads or v.shape[2] != n_kv_heads:
        raise ValueError("head axes do not match the given head counts")
    group = n_heads // n_kv_heads
    head_dim = q.shape[3]
    seq = q.shape[1]

    kv_index = np.arange(n_heads) // group
    qh = np.transpose(q, (0, 2, 1, 3))  # (B, H, T, hd)
    kh = np.transpose(k, (0, 2, 1, 3))[:, kv_index]  # expand to (B, H, T, hd)
    vh = np.transpose(v, (0, 2, 1, 3))[:, kv_index]

    scores = (qh @ np.swapaxes(kh, -1, -2)) / math.sqrt(head_dim)
    if causal:
        mask = np.triu(np.ones((seq, seq), dtype=bool), k=1)
        scores = np.where(mask, -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    exp = np.exp(scores)
    probs = exp / exp.sum(axis=-1, keepdims=True)
    out = np.transpose(probs @ vh, (0, 2, 1, 3))
    if return_cache:
        return out, (qh, kh, vh, probs, group, head_dim)
    return out


def _gqa_backward(dout, cache):
    qh, kh, vh, probs, group, head_dim = cache
    d = np.transpose(dout, (0, 2, 1, 3))  # (B, H, T, hd)
    dprobs = d @ np.swapaxes(vh, -1, -2)
    dvh = np.swapaxes(probs, -1, -2) @ d
    dot = np.sum(dprobs * probs, axis=-1, keepdims=True)
    dscores = probs * (dprobs - dot) / math.sqrt(head_dim)
    dqh = dscores @ kh
    dkh = np.swapaxes(dscores, -1, -2) @ qh

    b, h, t, hd = dqh.shape
    dq = np.transpose(dqh, (0, 2, 1, 3))
    # fold query-head groups back onto their shared KV heads
    dk = np.transpose(dkh.reshape(b, h // group, group, t, hd).sum(axis=2), (0, 2, 1, 3))
    dv = np.transpose(dvh.reshape(b, h // group, group, t, hd).sum(axis=2), (0, 2, 1, 3))
    return dq, dk, dv


class Model:
    """Frozen Gaussian-initialized decoder stack; adapters are the trainable part."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d, ff, kv = cfg.d_model, cfg.d_ff, cfg.kv_dim

        self.tok_emb = rng.normal(0.0, 0.02, size=(cfg.vocab_size, d)).astype(np.float32)
        self.pos_emb = rng.normal(0.0, 0.02, size=(cfg.max_seq, d)).astype(np.float32)
        self.layers = []
        for _ in range(cfg.n_layers):
            layer = {
                "ln1_g": np.ones(d, dtype=np.float32),
                "attn.q_proj": AdaptedLinear(self._proj(rng, d, d)),
                "attn.k_proj": AdaptedLinear(self._proj(rng, kv, d)),
                "attn.v_proj": AdaptedLinear(self._proj(rng, kv, d)),
                "attn.o_proj": AdaptedLinear(self._proj(rng, d, d)),
                "ln2_g": np.ones(d, dtype=np.float32),
                "ffn.fc1": AdaptedLinear(self._proj(rng, ff, d)),
                "ffn.fc2": AdaptedLinear(self._proj(rng, d, ff)),
            }
            self.layers.append(layer)
        self.final_g = np.ones(d, dtype=np.float32)
        # head rows need enough norm that the RMS-normalized hidden state can
        # drive confident logits through a frozen readout (max logit ~ 3*sqrt(d))
        self.head = rng.normal(0.0, 3.0 / math.sqrt(d), size=(cfg.vocab_size, d)).astype(
            np.float32
        )
        self._cache = None

    @staticmethod
    def _proj(rng, out_dim, in_dim):
        return rng.normal(0.0, 1.0 / math.sqrt(in_dim), size=(out_dim, in_dim)).astype(np.float32)

    # --- structure ---

    def projections(self):
        for i, layer in enumerate(self.layers):
            for name in PROJECTION_NAMES:
                yield f"block{i}.{name}", layer[name]

    def adapters(self):
        return [(path, lin.adapter) for path, lin in self.projections() if lin.adapter is not None]

    def attach_adapters(self, r: int, alpha: float, dropout_p: float, seed: int):
        children = np.random.SeedSequence(seed).spawn(len(self.layers) * len(PROJECTION_NAMES))
        idx = 0
        for _, lin in self.projections():
            sub_seed = int(children[idx].generate_state(1)[0])
            lin.attach(init_adapter(lin.in_dim, lin.out_dim, r, alpha, dropout_p, sub_seed))
            idx += 1

    def quantize_base(self, codebook: Nf4Codebook, block_size: int = 64):
        """Replace every projection's base weight by its NF4 encoding."""
        for _, lin in self.projections():
            qt = quantize_blockwise(lin.weight, block_size, codebook)
            adapter = lin.adapter
            lin.__init__(qt, adapter, codebook=codebook)

    def base_digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for path, lin in self.projections():
            h.update(path.encode())
            h.update(lin.base_digest().encode())
        return h.hexdigest()

    def zero_grads(self):
        for _, adapter in self.adapters():
            adapter.zero_grads()

    def cast(self, dtype):
        """Convert every parameter to dtype (float64 for gradient checking)."""
        self.tok_emb = self.tok_emb.astype(dtype)
        self.pos_emb = self.pos_emb.astype(dtype)
        self.head = self.head.astype(dtype)
        self.final_g = self.final_g.astype(dtype)
        for layer in self.layers:
            layer["ln1_g"] = layer["ln1_g"].astype(dtype)
            layer["ln2_g"] = layer["ln2_g"].astype(dtype)
            for name in PROJECTION_NAMES:
                lin = layer[name]
                lin.weight = lin.weight.astype(dtype)
                if lin.adapter is not None:
                    lin.adapter.a = lin.adapter.a.astype(dtype)
                    lin.adapter.b = lin.adapter.b.astype(dtype)
                    lin.adapter.zero_grads()
        return self

    # --- forward / backward ---

    def forward(self, token_ids: np.ndarray, training: bool = False, rng=None) -> np.ndarray:
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        b, t = ids.shape
        if t > self.cfg.max_seq:
            raise ValueError(f"sequence length {t} exceeds max_seq {self.cfg.max_seq}")
        if (ids < 0).any() or (ids >= self.cfg.vocab_size).any():
            raise ValueError("token id out of range")

        cfg = self.cfg
        h = self.tok_emb[ids] + self.pos_emb[:t][None, :, :]
        cache = {"layers": []} if training else None

        for layer in self.layers:
            normed, ln1_cache = _rms_norm_forward(h, layer["ln1_g"])
            q = layer["attn.q_proj"](normed, training, rng)
            k = layer["attn.k_proj"](normed, training, rng)
            v = layer["attn.v_proj"](normed, training, rng)
            qh = q.reshape(b, t, cfg.n_heads, cfg.head_dim)
            kh = k.reshape(b, t, cfg.n_kv_heads, cfg.head_dim)
            vh = v.reshape(b, t, cfg.n_kv_heads, cfg.head_dim)
            attn, attn_cache = gqa_attention(
                qh, kh, vh, cfg.n_heads, cfg.n_kv_heads, causal=True, return_cache=True
            )
            attn_flat = attn.reshape(b, t, cfg.d_model)
            h = h + layer["attn.o_proj"](attn_flat, training, rng)

            normed2, ln2_cache = _rms_norm_forward(h, layer["ln2_g"])
            pre = layer["ffn.fc1"](normed2, training, rng)
            act = _gelu_forward(pre)
            h = h + layer["ffn.fc2"](act, training, rng)

            if training:
                cache["layers"].append(
                    {"ln1": ln1_cache, "attn": attn_cache, "ln2": ln2_cache, "pre": pre}
                )

        normed, final_cache = _rms_norm_forward(h, self.final_g)
        logits = normed @ self.head.T
        if training:
            cache["final"] = final_cache
            cache["shape"] = (b, t)
            self._cache = cache
        return logits

    def __call__(self, token_ids, training=False, rng=None):
        return self.forward(token_ids, training=training, rng=rng)

    def backward(self, dlogits: np.ndarray):
        """Accumulate adapter grads for the loss whose logit gradient is dlogits."""
        if self._cache is None:
            raise ValueError("backward before forward")
        cache = self._cache
        cfg = self.cfg
        b, t = cache["shape"]

        dnormed = dlogits @ self.head
        dh = _rms_norm_backward(dnormed, self.final_g, cache["final"])

        for layer, lc in zip(reversed(self.layers), reversed(cache["layers"])):
            # FFN block: h = h2 + fc2(gelu(fc1(ln2(h2))))
            dact = layer["ffn.fc2"].backward(dh)
            dpre = _gelu_backward(dact, lc["pre"])
            dnormed2 = layer["ffn.fc1"].backward(dpre)
            dh = dh + _rms_norm_backward(dnormed2, layer["ln2_g"], lc["ln2"])

            # attention block: h2 = h1 + o(attn(q, k, v))
            dattn_flat = layer["attn.o_proj"].backward(dh)
            dattn = dattn_flat.reshape(b, t, cfg.n_heads, cfg.head_dim)
            dq, dk, dv = _gqa_backward(dattn, lc["attn"])
            dnormed1 = layer["attn.q_proj"].backward(dq.reshape(b, t, cfg.d_model))
            dnormed1 = dnormed1 + layer["attn.k_proj"].backward(dk.reshape(b, t, cfg.kv_dim))
            dnormed1 = dnormed1 + layer["attn.v_proj"].backward(dv.reshape(b, t, cfg.kv_dim))
            dh = dh + _rms_norm_backward(dnormed1, layer["ln1_g"], lc["ln1"])
        self._cache = None
        return dh


def build_model(cfg: ModelConfig) -> Model:
    return Model(cfg)


def masked_ce_loss(logits: np.ndarray, targets: TokenBatch) -> float:
    """Mean negative log-likelihood over mask-true positions."""
    loss_sum, n, _ = masked_ce_loss_and_grad(logits, targets, need_grad=False)
    return loss_sum / n


def masked_ce_loss_and_grad(logits: np.ndarray, targets: TokenBatch, need_grad: bool = True):
    """Sum-loss over masked positions, its token count, and dlogits for the sum.

    Returning the unnormalized sum lets gradient accumulation divide by the
    total token count of the effective batch, which makes accumulated
    micro-batches match a single large batch.
    """
    logits = np.asarray(logits)
    ids = targets.token_ids
    mask = targets.loss_mask
    if logits.ndim == 2:
        logits = logits[None]
    if ids.ndim == 1:
        ids = ids[None]
        mask = mask[None]
    n = int(mask.sum())
    if n == 0:
        raise ValueError("no target tokens")

    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse

    bi, ti = np.nonzero(mask)
    picked = logp[bi, ti, ids[bi, ti]]
    loss_sum = float(-picked.sum())

    if not need_grad:
        return loss_sum, n, None
    probs = np.exp(logp)
    dlogits = np.zeros_like(logits)
    dlogits[bi, ti] = probs[bi, ti]
    dlogits[bi, ti, ids[bi, ti]] -= 1.0
    return loss_sum, n, dlogits


def nucleus_filter(probs: np.ndarray, top_p: float):
    """Smallest probability-sorted prefix with cumulative mass >= top_p, renormalized.

    Returns (token_indices, renormalized_probs); ties sort by ascending id.
    """
    probs = np.asarray(probs, dtype=np.float64)
    order = np.argsort(-probs, kind="stable")
    sorted_p = probs[order]
    cum = np.cumsum(sorted_p)
    k = int(np.searchsorted(cum, top_p, side="left")) + 1
    k = min(k, len(sorted_p))
    kept = sorted_p[:k]
    return order[:k], kept / kept.sum()


def generate(
    model: Model,
    prompt: list[int],
    temperature: float,
    top_p: float,
    max_new: int,
    seed: int,
    eos_id: int | None = EOS_ID,
) -> list[int]:
    """Autoregressive sampling; returns the newly generated ids (EOS included).

    temperature 0 means greedy argmax; otherwise logits are divided by the
    temperature, softmaxed, restricted to the top-p nucleus, renormalized, and
    sampled with a seeded generator. Stops at EOS or after max_new tokens.
    """
    if len(prompt) == 0:
        raise ValueError("empty prompt")
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    if not 0.0 < top_p <= 1.0:
        raise ValueError("top_p must be in (0, 1]")

    rng = np.random.default_rng(seed)
    tokens = list(prompt)
    out: list[int] = []
    for _ in range(max_new):
        window = tokens[-model.cfg.max_seq :]
        logits = model.forward(np.asarray(window))[0, -1].astype(np.float64)
        if temperature == 0.0:
            nxt = int(np.argmax(logits))
        else:
            scaled = logits / temperature
            scaled -= scaled.max()
            probs = np.exp(scaled)
            probs /= probs.sum()
            idx, renorm = nucleus_filter(probs, top_p)
            nxt = int(rng.choice(idx, p=renorm))
        tokens.append(nxt)
        out.append(nxt)
        if eos_id is not None and nxt == eos_id:
            break
    return out
