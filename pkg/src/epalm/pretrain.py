"""Backbone pretraining for the toy encoder and decoder.

Adaptation only makes sense on top of backbones that already know something,
so before any variant is trained the encoder learns to summarise grids and
the decoder learns the language of the synthetic tasks:

* encoder: from the final [CLS] state, predict for every (shape, color) pair
  whether it is present, plus the object count;
* decoder: plain next-token language modelling on text that spells the scene
  out ("a red circle at top left and ... what color is the circle </a> red").

Neither stage sees the downstream perception-to-text pathway. Both backbones
are saved together in one full checkpoint and frozen afterwards.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import RngState
from .checkpoint import decode_tensors, encode_tensors, CheckpointError
from .nn import Decoder, DecoderConfig, Encoder, EncoderConfig, Linear, Module
from .tasks import (BOS, EOS, PAD, DatasetSpec, GridWorld, Vocabulary, _random_grid,
                    _vqa_example, vqa_answer)
from .train import OptimState, adamw_step


@dataclass
class PretrainConfig:
    n_examples: int = 8000
    encoder_epochs: int = 6
    decoder_epochs: int = 6
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 1234
    init: str = "fan_in"        # fan_in | keep

    def __post_init__(self):
        if self.init not in ("fan_in", "keep"):
            raise ValueError(f"unknown pretraining init {self.init!r}")

    def to_dict(self) -> dict:
        return asdict(self)


class _EncoderHeads(Module):
    """Readouts used only while pretraining the encoder."""

    def __init__(self, d: int, n_pairs: int, n_counts: int, rng):
        self.pairs = Linear(d, 2 * n_pairs, rng)
        self.count = Linear(d, n_counts, rng)


def fan_in_init(module: Module, rng: np.random.Generator) -> None:
    """Redraw every linear weight matrix as N(0, 1 / fan_in).

    From the 0.02-scale init, pair-presence pretraining of the small encoder
    sits on the prior-entropy plateau for many epochs; fan-in scaling breaks
    the symmetry at once. Embeddings, norms and biases are left alone.
    """
    for name, p in module.named_parameters():
        if name.endswith(".weight") and p.data.ndim == 2:
            p.data = (rng.standard_normal(p.shape) / math.sqrt(p.shape[0])).astype(p.dtype)


def _grid_from_features(feat: np.ndarray, spec: DatasetSpec) -> GridWorld:
    cells = {}
    for i, row in enumerate(feat):
        s = row[:spec.n_shapes]
        if s.any():
            cells[i] = (int(s.argmax()), int(row[spec.n_shapes:spec.n_shapes + spec.n_colors].argmax()))
    return GridWorld(spec.rows, spec.cols, cells)


def _corpus(spec: DatasetSpec, n: int, seed: int):
    # stream 7 of a separate seed, so pretraining never replays downstream examples
    rng = RngState(seed).generator(7)
    return [_vqa_example(spec, rng) for _ in range(n)]


def lm_text(ex, spec: DatasetSpec) -> str:
    grid = _grid_from_features(ex.perception, spec)
    return f"{grid.caption()} {ex.question} {ex.answer}"


def pretrain_encoder(encoder: Encoder, spec: DatasetSpec, cfg: PretrainConfig,
                     log: Callable[[str], None] | None = None) -> list[float]:
    corpus = _corpus(spec, cfg.n_examples, cfg.seed)
    n_pairs = spec.n_shapes * spec.n_colors
    heads = _EncoderHeads(encoder.config.d_model, n_pairs, spec.max_objects + 1,
                          RngState(cfg.seed).generator(8))
    heads.assign_names()
    heads.astype(encoder.cls.dtype)
    if cfg.init == "fan_in":
        fan_in_init(encoder, RngState(cfg.seed).generator(9))
    feats = np.stack([ex.perception for ex in corpus]).astype(encoder.cls.dtype)
    pairs = np.zeros((len(corpus), n_pairs), dtype=np.int64)
    counts = np.zeros(len(corpus), dtype=np.int64)
    for i, ex in enumerate(corpus):
        grid = _grid_from_features(ex.perception, spec)
        for s, c in grid.cells.values():
            pairs[i, s * spec.n_colors + c] = 1
        counts[i] = len(grid.cells)
    params = encoder.parameters() + heads.parameters()
    state = OptimState()
    history = []
    for epoch in range(cfg.encoder_epochs):
        order = RngState(cfg.seed).generator(100 + epoch).permutation(len(corpus))
        total = 0.0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            _, trace = encoder(feats[idx])
            top = trace[-1]
            B = len(idx)
            pair_logits = heads.pairs(top).reshape(B, n_pairs, 2)
            loss = ad.cross_entropy(pair_logits, pairs[idx]) + \
                ad.cross_entropy(heads.count(top), counts[idx])
            loss.backward()
            adamw_step(params, state, cfg.lr, weight_decay=cfg.weight_decay)
            total += loss.item() * B
        history.append(total / len(corpus))
        if log:
            log(f"encoder epoch {epoch}: loss {history[-1]:.4f}")
    return history


def pretrain_decoder(decoder: Decoder, spec: DatasetSpec, vocab: Vocabulary, cfg: PretrainConfig,
                     log: Callable[[str], None] | None = None) -> list[float]:
    corpus = _corpus(spec, cfg.n_examples, cfg.seed)
    seqs = [[BOS] + vocab.tokenize(lm_text(ex, spec)) + [EOS] for ex in corpus]
    longest = max(len(s) for s in seqs)
    if longest > decoder.config.max_positions:
        raise ValueError(f"pretraining text of {longest} tokens exceeds max_positions")
    if cfg.init == "fan_in":
        fan_in_init(decoder, RngState(cfg.seed).generator(10))
    params = decoder.parameters()
    state = OptimState()
    history = []
    for epoch in range(cfg.decoder_epochs):
        order = RngState(cfg.seed).generator(200 + epoch).permutation(len(seqs))
        total = 0.0
        for s in range(0, len(order), cfg.batch_size):
            batch = [seqs[i] for i in order[s:s + cfg.batch_size]]
            T = max(len(x) for x in batch)
            ids = np.full((len(batch), T), PAD, dtype=np.int64)
            for i, x in enumerate(batch):
                ids[i, :len(x)] = x
            logits = decoder.forward_with_hooks(ids[:, :-1])
            loss = ad.cross_entropy(logits, ids[:, 1:], ids[:, 1:] != PAD)
            loss.backward()
            adamw_step(params, state, cfg.lr, weight_decay=cfg.weight_decay)
            total += loss.item() * len(batch)
        history.append(total / len(seqs))
        if log:
            log(f"decoder epoch {epoch}: loss {history[-1]:.4f}")
    return history


def save_backbones(encoder: Encoder, decoder: Decoder, path: str | Path) -> None:
    tensors = {f"encoder.{k}": v for k, v in encoder.state_dict().items()}
    tensors.update({f"decoder.{k}": v for k, v in decoder.state_dict().items()})
    Path(path).write_bytes(encode_tensors(tensors))


def load_backbones(path: str | Path, encoder: Encoder, decoder: Decoder) -> None:
    tensors = decode_tensors(Path(path).read_bytes())
    for prefix, module in (("encoder.", encoder), ("decoder.", decoder)):
        own = module.state_dict()
        part = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
        if set(part) != set(own):
            missing = sorted(set(own) - set(part))[:3]
            extra = sorted(set(part) - set(own))[:3]
            raise CheckpointError(f"backbone {prefix[:-1]} mismatch: missing {missing}, unexpected {extra}")
        for k, v in part.items():
            if v.shape != own[k].shape:
                raise CheckpointError(f"backbone {prefix}{k}: shape {v.shape} != {own[k].shape}")
        module.load_state_dict(part)
