"""Supervised fine-tuning loop over adapter parameters only.

AdamW with decoupled weight decay, linear warmup into cosine decay, gradient
accumulation to an effective batch, and global-norm clipping. Base weights
stay frozen; every random choice (shuffling, dropout) is seeded, so a run is
a pure function of (model, dataset, config).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .datapipe.template import encode_for_training
from .datapipe.tokenizer import PAD_ID
from .lora import LoraConfig
from .model import Model, TokenBatch, masked_ce_loss_and_grad


@dataclass
class OptimizerConfig:
    peak_lr: float = 2e-5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_frac: float = 0.10
    micro_batch: int = 8
    grad_accum: int = 4
    max_grad_norm: float = 1.0
    epochs: int = 1
    seed: int = 0

    def validate(self):
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must be in [0, 1)")
        if self.micro_batch < 1 or self.grad_accum < 1:
            raise ValueError("micro_batch and grad_accum must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.max_grad_norm <= 0:
            raise ValueError("max_grad_norm must be > 0")


@dataclass
class TrainReport:
    step_losses: list = field(default_factory=list)
    step_accuracies: list = field(default_factory=list)
    epoch_mean_losses: list = field(default_factory=list)
    epoch_eval_losses: list = field(default_factory=list)
    final_loss: float | None = None
    final_accuracy: float | None = None
    tokens_processed: int = 0
    skipped_samples: int = 0
    total_steps: int = 0
    diverged: bool = False

    def to_dict(self) -> dict:
        return {
            "step_losses": self.step_losses,
            "step_accuracies": self.step_accuracies,
            "epoch_mean_losses": self.epoch_mean_losses,
            "epoch_eval_losses": self.epoch_eval_losses,
            "final_loss": self.final_loss,
            "final_accuracy": self.final_accuracy,
            "tokens_processed": self.tokens_processed,
            "skipped_samples": self.skipped_samples,
            "total_steps": self.total_steps,
            "diverged": self.diverged,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def loss_table(self) -> str:
        lines = [f"{'step':>6}  {'loss':>10}  {'accuracy':>8}"]
        for i, (loss, acc) in enumerate(zip(self.step_losses, self.step_accuracies), start=1):
            lines.append(f"{i:>6}  {loss:>10.4f}  {acc:>8.4f}")
        if self.final_loss is not None:
            lines.append(f"final loss {self.final_loss:.4f}  accuracy {self.final_accuracy:.4f}")
        return "\n".join(lines)


class DivergenceError(RuntimeError):
    """Raised when a non-finite loss or gradient shows up; carries the partial report."""

    def __init__(self, message: str, report: TrainReport):
        super().__init__(message)
        self.report = report


def lr_at_step(step: int, total_steps: int, cfg: OptimizerConfig) -> float:
    """Linear 0 -> peak over the first ceil(warmup_frac * total) steps, then
    cosine peak -> 0 at total_steps."""
    if total_steps == 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError("step out of range")
    warmup = math.ceil(cfg.warmup_frac * total_steps)
    if step < warmup:
        return cfg.peak_lr * step / warmup
    if step == warmup:
        return cfg.peak_lr
    progress = (step - warmup) / (total_steps - warmup)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is <= max_norm."""
    if max_norm <= 0:
        raise ValueError("max_norm must be > 0")
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if total <= max_norm or total == 0.0:
        return 1.0
    scale = max_norm / total
    for g in grads:
        g *= scale
    return scale


def adamw_step(param, grad, moments, step_index: int, lr: float, cfg: OptimizerConfig):
    """One decoupled-decay AdamW update, in place; returns the updated param."""
    if step_index < 1:
        raise ValueError("step_index must be >= 1")
    if not np.isfinite(grad).all():
        raise ValueError("divergence detected")
    m, v = moments
    m *= cfg.beta1
    m += (1.0 - cfg.beta1) * grad
    v *= cfg.beta2
    v += (1.0 - cfg.beta2) * grad * grad
    m_hat = m / (1.0 - cfg.beta1**step_index)
    v_hat = v / (1.0 - cfg.beta2**step_index)
    param -= lr * cfg.weight_decay * param
    param -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return param


def token_accuracy(logits: np.ndarray, targets: TokenBatch) -> float:
    """Fraction of mask-true positions where argmax(logits) equals the target."""
    mask = targets.loss_mask
    n = int(mask.sum())
    if n == 0:
        raise ValueError("no target tokens")
    pred = np.asarray(logits).argmax(axis=-1)
    return float((pred[mask] == targets.token_ids[mask]).sum() / n)


def pad_batch(encoded: list[tuple[np.ndarray, np.ndarray]]):
    """Stack (ids, mask) pairs, padding to the batch max with PAD / mask-false."""
    width = max(len(ids) for ids, _ in encoded)
    ids = np.full((len(encoded), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(encoded), width), dtype=bool)
    for i, (sample_ids, sample_mask) in enumerate(encoded):
        ids[i, : len(sample_ids)] = sample_ids
        mask[i, : len(sample_mask)] = sample_mask
    return ids, mask


def encode_dataset(dataset, max_seq: int):
    """Encode and truncate samples; drops any left without a loss position."""
    encoded, skipped = [], 0
    for sample in dataset:
        ids, mask = encode_for_training(sample)
        if len(ids) > max_seq + 1:
            ids, mask = ids[: max_seq + 1], mask[: max_seq + 1]
        if not mask[1:].any():
            skipped += 1
            continue
        encoded.append((ids, mask))
    return encoded, skipped


def _eval_metrics(model: Model, encoded, micro_batch: int):
    loss_total, correct, n_total = 0.0, 0, 0
    for start in range(0, len(encoded), micro_batch):
        ids, mask = pad_batch(encoded[start : start + micro_batch])
        targets = TokenBatch(ids[:, 1:], mask[:, 1:])
        logits = model.forward(ids[:, :-1])
        loss_sum, n, _ = masked_ce_loss_and_grad(logits, targets, need_grad=False)
        loss_total += loss_sum
        n_total += n
        pred = logits.argmax(axis=-1)
        correct += int((pred[targets.loss_mask] == targets.token_ids[targets.loss_mask]).sum())
    return loss_total / n_total, correct / n_total


def train(
    model: Model,
    dataset,
    opt_cfg: OptimizerConfig,
    lora_cfg: LoraConfig | None = None,
) -> TrainReport:
    """Run the SFT loop; only adapter parameters change.

    Raises DivergenceError (with the partial report) after restoring the last
    good adapter state if the loss or a gradient goes non-finite.
    """
    opt_cfg.validate()
    if not dataset:
        raise ValueError("empty dataset")
    if not model.adapters():
        if lora_cfg is None:
            raise ValueError("model has no adapters attached")
        model.attach_adapters(lora_cfg.rank, lora_cfg.alpha, lora_cfg.dropout_p, lora_cfg.seed)

    encoded, skipped = encode_dataset(dataset, model.cfg.max_seq)
    if not encoded:
        raise ValueError("no usable samples after encoding")
    report = TrainReport(skipped_samples=skipped)
    if opt_cfg.epochs == 0:
        return report

    n = len(encoded)
    micro_per_epoch = math.ceil(n / opt_cfg.micro_batch)
    steps_per_epoch = math.ceil(micro_per_epoch / opt_cfg.grad_accum)
    total_steps = opt_cfg.epochs * steps_per_epoch
    report.total_steps = total_steps

    shuffle_seq, dropout_seq = np.random.SeedSequence(opt_cfg.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    dropout_rng = np.random.default_rng(dropout_seq)

    params = []
    for _, adapter in model.adapters():
        params.append((adapter, "a"))
        params.append((adapter, "b"))
    moments = [(np.zeros_like(getattr(ad, nm)), np.zeros_like(getattr(ad, nm))) for ad, nm in params]
    snapshot = [getattr(ad, nm).copy() for ad, nm in params]

    def restore_snapshot():
        for (adapter, name), saved in zip(params, snapshot):
            setattr(adapter, name, saved.copy())

    step_index = 0
    for _ in range(opt_cfg.epochs):
        perm = shuffle_rng.permutation(n)
        micro_batches = [
            perm[i : i + opt_cfg.micro_batch] for i in range(0, n, opt_cfg.micro_batch)
        ]
        epoch_loss_sum, epoch_tokens = 0.0, 0
        for g in range(0, len(micro_batches), opt_cfg.grad_accum):
            group = micro_batches[g : g + opt_cfg.grad_accum]
            model.zero_grads()
            loss_sum_g, n_g, correct_g = 0.0, 0, 0
            for mb in group:
                ids, mask = pad_batch([encoded[i] for i in mb])
                targets = TokenBatch(ids[:, 1:], mask[:, 1:])
                logits = model.forward(ids[:, :-1], training=True, rng=dropout_rng)
                loss_sum, n_tok, dlogits = masked_ce_loss_and_grad(logits, targets)
                model.backward(dlogits)
                loss_sum_g += loss_sum
                n_g += n_tok
                pred = logits.argmax(axis=-1)
                correct_g += int(
                    (pred[targets.loss_mask] == targets.token_ids[targets.loss_mask]).sum()
                )

            step_index += 1
            if not math.isfinite(loss_sum_g):
                restore_snapshot()
                report.diverged = True
                raise DivergenceError("divergence detected", report)

            grads = []
            for adapter, name in params:
                g_arr = adapter.grad_a if name == "a" else adapter.grad_b
                g_arr /= n_g
                grads.append(g_arr)
            clip_global_norm(grads, opt_cfg.max_grad_norm)
            lr = lr_at_step(step_index, total_steps, opt_cfg)
            try:
                for (adapter, name), grad, mom in zip(params, grads, moments):
                    adamw_step(getattr(adapter, name), grad, mom, step_index, lr, opt_cfg)
            except ValueError:
                restore_snapshot()
                report.diverged = True
                raise DivergenceError("divergence detected", report)

            snapshot = [getattr(ad, nm).copy() for ad, nm in params]
            report.step_losses.append(loss_sum_g / n_g)
            report.step_accuracies.append(correct_g / n_g)
            report.tokens_processed += n_g
            epoch_loss_sum += loss_sum_g
            epoch_tokens += n_g
        report.epoch_mean_losses.append(epoch_loss_sum / epoch_tokens)
        eval_loss, _ = _eval_metrics(model, encoded, opt_cfg.micro_batch)
        report.epoch_eval_losses.append(eval_loss)

    report.final_loss, report.final_accuracy = _eval_metrics(model, encoded, opt_cfg.micro_batch)
    return report
