"""Toy transformer building blocks.

A bidirectional encoder that exposes the [CLS] state after every layer, and a
causal decoder whose layer loop accepts an injection hook. Blocks are pre-norm
(OPT style) and the decoder output projection is tied to its input embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Parameter, Tensor


class Module:
    """Minimal parameter container; names are dotted attribute paths."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Parameter):
                        yield f"{name}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.trainable = flag

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        for name, arr in state.items():
            if name not in own:
                raise KeyError(f"unexpected parameter {name!r}")
            if own[name].shape != arr.shape:
                raise DimensionError(f"{name}: shape {arr.shape} != {own[name].shape}")
            own[name].data = np.array(arr, dtype=own[name].dtype)


def _weight(rng, shape, dtype=None) -> Parameter:
    return Parameter(ad.trunc_normal(rng, shape, 0.02, dtype))


def _zeros(shape) -> Parameter:
    return Parameter(np.zeros(shape, dtype=ad.get_default_dtype()))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = _weight(rng, (d_in, d_out))
        self.bias = _zeros((d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise DimensionError(f"linear: input dim {x.shape[-1]} != {self.weight.shape[0]}")
        return ad.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(d, dtype=ad.get_default_dtype()))
        self.bias = _zeros((d,))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, self._eps)


class SelfAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        if d_model % n_heads:
            raise ValueError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_model, d_model, rng)
        self.v = Linear(d_model, d_model, rng)
        self.out = Linear(d_model, d_model, rng)
        self._h = n_heads

    def _split(self, x: Tensor) -> Tensor:
        B, L, d = x.shape
        return x.reshape(B, L, self._h, d // self._h).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, mask: np.ndarray | None, probe: dict | None = None) -> Tensor:
        B, L, d = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        scores = ad.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(d // self._h))
        attn = ad.softmax(scores, axis=-1, mask=mask)
        if probe is not None:
            probe.setdefault("attn", []).append(attn.data)
        ctx = ad.matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, L, d)
        return self.out(ctx)


class FeedForward(Module):
    def __init__(self, d_model: int, d_ffn: int, rng: np.random.Generator):
        self.up = Linear(d_model, d_ffn, rng)
        self.down = Linear(d_ffn, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(ad.gelu(self.up(x)))


class Block(Module):
    """Pre-norm transformer block. ``adapters`` is an optional (after_attn, after_ffn) pair."""

    def __init__(self, d_model: int, n_heads: int, d_ffn: int, rng: np.random.Generator):
        self.ln_attn = LayerNorm(d_model)
        self.attn = SelfAttention(d_model, n_heads, rng)
        self.ln_ffn = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, d_ffn, rng)

    def __call__(self, x: Tensor, mask: np.ndarray | None, adapters=None,
                 probe: dict | None = None) -> Tensor:
        x = x + self.attn(self.ln_attn(x), mask, probe)
        if adapters is not None and adapters[0] is not None:
            x = adapters[0](x)
        x = x + self.ffn(self.ln_ffn(x))
        if adapters is not None and adapters[1] is not None:
            x = adapters[1](x)
        return x


# -- encoder ------------------------------------------------------------------

@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_ffn: int
    n_patches: int
    patch_feature_dim: int

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("encoder d_model must be divisible by n_heads")
        if self.n_layers < 2:
            raise ValueError("encoder needs at least 2 layers")


ClsTrace = list  # list of N_E arrays/tensors, entry e = [CLS] after encoder layer e


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self._cfg = cfg
        self.patch_proj = Linear(cfg.patch_feature_dim, cfg.d_model, rng)
        self.cls = _weight(rng, (cfg.d_model,))
        self.pos = _weight(rng, (cfg.n_patches + 1, cfg.d_model))
        self.blocks = [Block(cfg.d_model, cfg.n_heads, cfg.d_ffn, rng) for _ in range(cfg.n_layers)]

    @property
    def config(self) -> EncoderConfig:
        return self._cfg

    def __call__(self, patches) -> tuple[Tensor, ClsTrace]:
        """``patches``: [B, n_patches, patch_feature_dim] (or unbatched 2-D)."""
        cfg = self._cfg
        patches = ad.as_tensor(patches, self.cls.dtype)
        if patches.ndim == 2:
            patches = patches.reshape(1, *patches.shape)
        B, n, f = patches.shape
        if (n, f) != (cfg.n_patches, cfg.patch_feature_dim):
            raise DimensionError(
                f"encoder expects patches ({cfg.n_patches}, {cfg.patch_feature_dim}), got ({n}, {f})")
        cls = ad.broadcast_to(self.cls.reshape(1, 1, cfg.d_model), (B, 1, cfg.d_model))
        x = ad.concat([cls, self.patch_proj(patches)], axis=1) + self.pos
        trace: ClsTrace = []
        for block in self.blocks:
            x = block(x, None)
            trace.append(x[:, 0])
        return x, trace


# -- decoder ------------------------------------------------------------------

@dataclass(frozen=True)
class DecoderConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_ffn: int
    vocab_size: int
    max_positions: int

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("decoder d_model must be divisible by n_heads")
        if self.n_layers < 2:
            raise ValueError("decoder needs at least 2 layers")


@dataclass
class Layout:
    """Sequence layout [prompt; cls slot(s); text]."""

    prompt_len: int
    slot_len: int
    text_len: int

    @property
    def length(self) -> int:
        return self.prompt_len + self.slot_len + self.text_len


def build_causal_mask(P: int, has_cls: bool | int, T: int) -> np.ndarray:
    """Visibility over [prompt; cls slot; text]: position i sees j iff j <= i."""
    n = P + int(has_cls) + T
    return np.tril(np.ones((n, n), dtype=bool))


Hook = Callable[[int], "Tensor | None"]


class Decoder(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        self._cfg = cfg
        self.tok_emb = _weight(rng, (cfg.vocab_size, cfg.d_model))
        self.pos_emb = _weight(rng, (cfg.max_positions, cfg.d_model))
        self.blocks = [Block(cfg.d_model, cfg.n_heads, cfg.d_ffn, rng) for _ in range(cfg.n_layers)]
        self.ln_final = LayerNorm(cfg.d_model)

    @property
    def config(self) -> DecoderConfig:
        return self._cfg

    def embed(self, ids: np.ndarray, offset: int) -> Tensor:
        T = ids.shape[-1]
        if offset + T > self._cfg.max_positions:
            raise DimensionError(f"sequence needs {offset + T} positions, max is {self._cfg.max_positions}")
        return ad.embedding_lookup(self.tok_emb, ids) + self.pos_emb[offset:offset + T]

    def layer_forward(self, j: int, x: Tensor, mask: np.ndarray, adapters=None,
                      probe: dict | None = None) -> Tensor:
        L = x.shape[1]
        if mask.shape != (L, L):
            raise DimensionError(f"mask {mask.shape} does not match sequence length {L}")
        return self.blocks[j](x, mask, adapters, probe)

    def forward_with_hooks(self, input_ids, prompt_state: Tensor | None = None,
                           hook: Hook | None = None, adapters: Sequence | None = None,
                           layer_prompts: Sequence | None = None,
                           probe: dict | None = None) -> Tensor:
        """Logits [B, T, V] for the text positions.

        ``prompt_state`` is [P, d] or [B, P, d]. Before layer j, ``hook(j)``
        may return a [B, d] (or [B, S, d]) tensor: the first time it creates
        the slot between prompt and text, later calls overwrite it.
        ``layer_prompts[j]``, when given, overwrites the prompt rows before
        layer j. ``probe`` collects per-layer layouts and slot contents.
        """
        cfg = self._cfg
        ids = np.asarray(input_ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        B, T = ids.shape
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise IndexError(f"token id out of vocabulary range [0, {cfg.vocab_size})")
        d = cfg.d_model
        P = 0 if prompt_state is None else prompt_state.shape[-2]
        if layer_prompts is not None and layer_prompts[0] is not None:
            P = layer_prompts[0].shape[-2]
        # prompt takes positions 0..P-1, slot has none, text starts at P+1
        x = self.embed(ids, P + 1)
        first_prompt = layer_prompts[0] if layer_prompts is not None and layer_prompts[0] is not None \
            else prompt_state
        if first_prompt is not None:
            pr = first_prompt
            if pr.ndim == 2:
                pr = pr + self.pos_emb[0:P]
                pr = ad.broadcast_to(pr.reshape(1, P, d), (B, P, d))
            else:
                pr = pr + self.pos_emb[0:P]
            x = ad.concat([pr, x], axis=1)
        layout = Layout(P, 0, T)
        if probe is not None:
            probe.setdefault("layouts", [])
            probe.setdefault("slots", [])
        for j in range(cfg.n_layers):
            if layer_prompts is not None and j > 0 and layer_prompts[j] is not None:
                fresh = ad.broadcast_to(layer_prompts[j].reshape(1, P, d), (B, P, d))
                x = ad.concat([fresh, x[:, P:]], axis=1)
            vec = hook(j) if hook is not None else None
            if vec is not None:
                if vec.ndim == 2:
                    vec = vec.reshape(vec.shape[0], 1, vec.shape[1])
                if vec.shape[-1] != d:
                    raise DimensionError(f"hook at layer {j} returned dim {vec.shape[-1]}, decoder d_model is {d}")
                if vec.shape[0] != B:
                    vec = ad.broadcast_to(vec, (B, vec.shape[1], d))
                S = vec.shape[1]
                if layout.slot_len == 0:
                    x = ad.concat([x[:, :P], vec, x[:, P:]], axis=1)
                    layout = Layout(P, S, T)
                else:
                    if S != layout.slot_len:
                        raise DimensionError(f"hook slot width changed from {layout.slot_len} to {S}")
                    x = ad.concat([x[:, :P], vec, x[:, P + S:]], axis=1)
            if probe is not None:
                probe["layouts"].append(Layout(layout.prompt_len, layout.slot_len, layout.text_len))
                probe["slots"].append(None if layout.slot_len == 0 else x.data[:, P:P + layout.slot_len].copy())
            mask = build_causal_mask(P, layout.slot_len, T) if layout.slot_len <= 1 else \
                np.tril(np.ones((layout.length, layout.length), dtype=bool))
            ada = adapters[j] if adapters is not None else None
            x = self.layer_forward(j, x, mask, ada, probe)
        h = self.ln_final(x[:, layout.length - T:])
        return ad.matmul(h, self.tok_emb.transpose(1, 0))
