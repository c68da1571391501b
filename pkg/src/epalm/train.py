"""AdamW training with warmup + cosine learning rates and answer-masked loss."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Parameter, RngState
from .checkpoint import save_checkpoint
from .decode import DecodeConfig
from .metrics import evaluate_split
from .tasks import BOS, EOS, PAD, SEP, SyntheticExample, Vocabulary


class TrainingAborted(RuntimeError):
    """Loss or gradients went non-finite."""


@dataclass
class TrainConfig:
    epochs: int = 8
    batch_size: int = 64
    lr_start: float = 1e-5
    lr_peak: float = 2e-5
    lr_end: float = 1e-6
    warmup_fraction: float = 0.1
    # name prefix -> fixed learning rate; the longest matching prefix wins
    group_lrs: dict[str, float] = field(default_factory=lambda: {"prompt": 1e-5, "deep_prompts": 1e-5,
                                                                 "adapters": 1e-5})
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float | None = None
    seed: int = 0
    supervise_question: bool = False

    def __post_init__(self):
        if not self.lr_peak >= self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_peak >= lr_start >= lr_end > 0")
        if not 0 < self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must be in (0, 1)")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        return asdict(self)


def group_lr_for(name: str, cfg: TrainConfig) -> float | None:
    best = None
    for prefix, lr in cfg.group_lrs.items():
        if name == prefix or name.startswith(prefix + "."):
            if best is None or len(prefix) > len(best[0]):
                best = (prefix, lr)
    return None if best is None else best[1]


def lr_at(step: int, total_steps: int, cfg: TrainConfig, group: str | None = None) -> float:
    """Learning rate at ``step``: fixed per group, else linear warmup then cosine decay."""
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if group is not None:
        fixed = group_lr_for(group, cfg)
        if fixed is not None:
            return fixed
    warm = cfg.warmup_fraction * total_steps
    if step <= warm:
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * (step / warm if warm else 1.0)
    tau = (step - warm) / (total_steps - warm)
    return cfg.lr_end + (cfg.lr_peak - cfg.lr_end) * (1 + math.cos(math.pi * tau)) / 2


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: Sequence[Parameter], state: OptimState, lrs, betas=(0.9, 0.999),
               eps: float = 1e-8, weight_decay: float = 0.01) -> None:
    """One decoupled-weight-decay Adam update of every trainable parameter.

    ``lrs`` is a float or a mapping from parameter name to learning rate.
    Gradients are cleared afterwards.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    for p in params:
        if not p.trainable:
            continue
        if p.grad is None:
            raise ValueError(f"trainable parameter {p.name!r} has no gradient")
        lr = lrs if isinstance(lrs, (int, float)) else lrs[p.name]
        g = p.grad
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        if weight_decay:
            p.data -= (lr * weight_decay) * p.data
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype)
        p.grad = None


def loss_mask_for(ids: Sequence[int], task: str, supervise_question: bool = False) -> np.ndarray:
    """Which next-token predictions of ``ids`` (length T) are scored; shape [T-1]."""
    ids = list(ids)
    n_pred = len(ids) - 1
    if task in ("vqa", "frame_vqa"):
        seps = [i for i, t in enumerate(ids) if t == SEP]
        if len(seps) != 1:
            raise ValueError(f"expected exactly one SEP in a QA sequence, found {len(seps)}")
        mask = np.zeros(n_pred, dtype=bool)
        mask[0 if supervise_question else seps[0]:] = True
        return mask
    if task == "caption":
        return np.ones(n_pred, dtype=bool)
    raise ValueError(f"unknown task {task!r}")


def example_ids(ex: SyntheticExample, vocab: Vocabulary) -> list[int]:
    if ex.question:
        return [BOS] + vocab.tokenize(ex.question) + vocab.tokenize(ex.answer) + [EOS]
    return [BOS] + vocab.tokenize(ex.caption or ex.answer) + [EOS]


@dataclass
class Batch:
    perception: np.ndarray | None
    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray


def collate(examples: Sequence[SyntheticExample], vocab: Vocabulary, task: str,
            supervise_question: bool = False, dtype=np.float32) -> Batch:
    seqs = [example_ids(ex, vocab) for ex in examples]
    T = max(len(s) for s in seqs)
    ids = np.full((len(seqs), T), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), T - 1), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s) - 1] = loss_mask_for(s, task, supervise_question)
    vis = examples[0].visual
    perception = None if vis is None else np.stack([ex.visual for ex in examples]).astype(dtype)
    return Batch(perception, ids[:, :-1], ids[:, 1:], mask)


def batch_loss(model, batch: Batch) -> ad.Tensor:
    logits = model(batch.perception, batch.inputs)
    return ad.cross_entropy(logits, batch.targets, batch.mask)


def _grad_norms(params: Sequence[Parameter]) -> dict[str, float]:
    return {p.name: float(np.sqrt((p.grad.astype(np.float64) ** 2).sum()))
            for p in params if p.grad is not None}


@dataclass
class TrainResult:
    metrics: list[dict]
    best_metric: float
    best_epoch: int
    initial_loss: float | None


def train_run(model, train: Sequence[SyntheticExample], val: Sequence[SyntheticExample],
              vocab: Vocabulary, cfg: TrainConfig, task: str = "vqa",
              decode: DecodeConfig | None = None, out_dir: str | Path | None = None,
              log: Callable[[str], None] | None = None, evaluate: bool = True) -> TrainResult:
    """Train the trainable parameters of ``model`` in place.

    Emits per-epoch train loss and validation exact match (QA) or BLEU@4
    (captions). With ``out_dir``, metrics stream to ``metrics.jsonl`` and the
    best-validation trainable parameters to ``best.ckpt``.
    """
    if not train:
        raise ValueError("empty training set")
    decode = decode or DecodeConfig()
    params = [p for p in model.parameters() if p.trainable]
    if not params:
        raise ValueError("model has no trainable parameters")
    dtype = model.decoder.tok_emb.dtype
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    lr_fixed = {p.name: group_lr_for(p.name, cfg) for p in params}
    state = OptimState()
    out = Path(out_dir) if out_dir is not None else None
    metrics: list[dict] = []
    sink = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        sink = open(out / "metrics.jsonl", "w", encoding="utf-8", newline="\n")

    def emit(step, epoch, split, metric, value):
        rec = {"step": step, "epoch": epoch, "split": split, "metric": metric, "value": float(value)}
        metrics.append(rec)
        if sink is not None:
            sink.write(json.dumps(rec) + "\n")
            sink.flush()

    best, best_epoch, first_loss = -math.inf, -1, None
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = RngState(cfg.seed).generator(1000 + epoch).permutation(len(train))
            losses = []
            for s in range(0, len(order), cfg.batch_size):
                batch = collate([train[i] for i in order[s:s + cfg.batch_size]], vocab, task,
                                cfg.supervise_question, dtype)
                lr_sched = lr_at(step, total, cfg)
                try:
                    loss = batch_loss(model, batch)
                    loss.backward()
                except NonFiniteError as exc:
                    raise TrainingAborted(
                        f"non-finite values at step {step} (lr={lr_sched:.3g}): {exc}") from exc
                norms = _grad_norms(params)
                if not all(math.isfinite(v) for v in norms.values()):
                    raise TrainingAborted(f"non-finite gradient at step {step} (lr={lr_sched:.3g}); "
                                          f"grad norms: {norms}")
                if first_loss is None:
                    first_loss = loss.item()
                losses.append(loss.item())
                if cfg.grad_clip is not None:
                    total_norm = math.sqrt(sum(v * v for v in norms.values()))
                    if total_norm > cfg.grad_clip:
                        scale = cfg.grad_clip / (total_norm + 1e-12)
                        for p in params:
                            p.grad = p.grad * scale
                lrs = {name: (lr if lr is not None else lr_sched) for name, lr in lr_fixed.items()}
                adamw_step(params, state, lrs, cfg.betas, cfg.eps, cfg.weight_decay)
                bad = [p.name for p in params if not np.isfinite(p.data).all()]
                if bad:
                    raise TrainingAborted(f"update at step {step} (lr={lr_sched:.3g}) made "
                                          f"{', '.join(bad[:3])} non-finite; grad norms: {norms}")
                step += 1
            emit(step, epoch, "train", "loss", np.mean(losses))
            if log:
                log(f"epoch {epoch}: train loss {np.mean(losses):.4f}")
            if evaluate and val:
                report = evaluate_split(model, val, vocab, decode)
                name, value = ("bleu4", report.bleu4) if task == "caption" else \
                    ("exact_match", report.exact_match)
                emit(step, epoch, "val", name, value)
                if log:
                    log(f"epoch {epoch}: val {name} {value:.4f}")
                if value > best:
                    best, best_epoch = value, epoch
                    if out is not None:
                        save_checkpoint(model, out / "best.ckpt", meta={
                            "format_version": 1, "variant": model.spec.to_dict(),
                            "epoch": epoch, "step": step, "metric": name, "value": float(value)})
    finally:
        if sink is not None:
            sink.close()
    return TrainResult(metrics, best, best_epoch, first_loss)
