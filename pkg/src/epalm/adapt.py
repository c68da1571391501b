"""Perceptual prompt injection into a frozen decoder.

Per-layer [CLS] states of a frozen encoder are linearly projected and written
into a single slot between the soft prompt and the text of a frozen decoder.
The slot is created at the first injection site and overwritten at every
later one, so a forward pass carries exactly one extra token.

This module also assembles the named variants and baselines (which parameters
exist, which are trainable) and does exact parameter-budget accounting, both
on live models and analytically from architecture presets.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Parameter, Tensor
from .nn import (ClsTrace, Decoder, DecoderConfig, Encoder, EncoderConfig, Linear,
                 Module, _weight)


# -- schedules ----------------------------------------------------------------

@dataclass(frozen=True)
class InjectionSchedule:
    """Ordered (encoder_layer, decoder_layer) pairs, 0-based."""

    pairs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        pairs = tuple((int(e), int(d)) for e, d in self.pairs)
        object.__setattr__(self, "pairs", pairs)
        if not pairs:
            raise ValueError("schedule needs at least one pair")
        for (e0, d0), (e1, d1) in zip(pairs, pairs[1:]):
            if not (e1 > e0 and d1 > d0):
                raise ValueError(f"schedule pairs must increase in both coordinates: {pairs}")

    @property
    def K(self) -> int:
        return len(self.pairs)

    @property
    def encoder_layers(self) -> list[int]:
        return [e for e, _ in self.pairs]

    @property
    def decoder_layers(self) -> list[int]:
        return [d for _, d in self.pairs]

    def validate(self, n_enc: int, n_dec: int) -> None:
        for e, d in self.pairs:
            if not 0 <= e < n_enc:
                raise ValueError(f"encoder layer {e} outside [0, {n_enc})")
            if not 0 <= d < n_dec:
                raise ValueError(f"decoder layer {d} outside [0, {n_dec})")


def build_schedule(n_enc: int, n_dec: int, k: int = 6, stride: int = 2) -> InjectionSchedule:
    """Last ``k`` encoder layers into every ``stride``-th of the last ``stride*k`` decoder layers."""
    if k < 1 or stride < 1:
        raise ValueError("k and stride must be positive")
    if stride * k > n_dec or k > n_enc:
        raise ValueError(f"infeasible schedule: k={k}, stride={stride}, N_E={n_enc}, N_L={n_dec}")
    enc = range(n_enc - k, n_enc)
    dec = range(n_dec - stride * k, n_dec, stride)
    return InjectionSchedule(tuple(zip(enc, dec)))


def input_schedule(n_enc: int) -> InjectionSchedule:
    """Last [CLS] only, placed before the first decoder layer (baselines)."""
    return InjectionSchedule(((n_enc - 1, 0),))


def default_k(n_enc: int, n_dec: int, stride: int = 2, k: int = 6) -> int:
    return max(1, min(k, n_enc, n_dec // stride))


# -- adaptation modules -------------------------------------------------------

class Connection(Module):
    """Linear map(s) from encoder width to decoder width: one shared, or one per level."""

    def __init__(self, kind: str, K: int, d_enc: int, d_dec: int, rng: np.random.Generator):
        if kind not in ("shared", "per_level"):
            raise ValueError(f"unknown connection kind {kind!r}")
        self._kind = kind
        n = 1 if kind == "shared" else K
        self.proj = [Linear(d_enc, d_dec, rng) for _ in range(n)]

    @property
    def kind(self) -> str:
        return self._kind

    def layer_for(self, k: int) -> Linear:
        return self.proj[0] if self._kind == "shared" else self.proj[k]


def project_cls(conn: Connection, trace: ClsTrace, schedule: InjectionSchedule, k: int) -> Tensor:
    if not 0 <= k < schedule.K:
        raise IndexError(f"level {k} outside schedule of size {schedule.K}")
    return conn.layer_for(k)(trace[schedule.pairs[k][0]])


@dataclass(frozen=True)
class PromptSpec:
    length: int = 10
    with_mlp: bool = True
    mlp_hidden: int | None = None  # defaults to decoder d_model


class SoftPrompt(Module):
    """Prompt rows looked up by position id 0..P-1, optionally passed through an MLP."""

    def __init__(self, spec: PromptSpec, d_model: int, rng: np.random.Generator):
        if spec.length < 1:
            raise ValueError("prompt length must be positive")
        self.embedding = _weight(rng, (spec.length, d_model))
        if spec.with_mlp:
            hidden = spec.mlp_hidden or d_model
            self.mlp = [Linear(d_model, hidden, rng), Linear(hidden, d_model, rng)]
        else:
            self.mlp = None

    def __call__(self) -> Tensor:
        e = ad.embedding_lookup(self.embedding, np.arange(self.embedding.shape[0]))
        if self.mlp is None:
            return e
        # residual around the reparameterising MLP
        return e + self.mlp[1](ad.tanh(self.mlp[0](e)))


@dataclass(frozen=True)
class AdapterSpec:
    downsample_factor: int = 8
    layers: tuple[int, ...] | None = None  # None: every decoder layer


class Adapter(Module):
    """h + Up(ReLU(Down(h)))."""

    def __init__(self, d_model: int, factor: int, rng: np.random.Generator):
        if d_model % factor:
            raise ValueError(f"d_model {d_model} not divisible by downsample factor {factor}")
        self.down = Linear(d_model, d_model // factor, rng)
        self.up = Linear(d_model // factor, d_model, rng)

    def __call__(self, h: Tensor) -> Tensor:
        return h + self.up(ad.relu(self.down(h)))


def adapter_forward(adapter: Adapter, hidden: Tensor) -> Tensor:
    return adapter(hidden)


class AdapterPair(Module):
    def __init__(self, d_model: int, factor: int, rng: np.random.Generator):
        self.after_attn = Adapter(d_model, factor, rng)
        self.after_ffn = Adapter(d_model, factor, rng)

    def __getitem__(self, i: int) -> Adapter:
        return (self.after_attn, self.after_ffn)[i]


def average_frame_cls(traces: list[ClsTrace]) -> ClsTrace:
    """Per-layer mean of the [CLS] traces of several frames."""
    if not traces:
        raise ValueError("average_frame_cls needs at least one frame")
    n_layers = len(traces[0])
    if any(len(t) != n_layers for t in traces):
        raise ValueError("frames have traces of different depth")
    out = []
    for e in range(n_layers):
        acc = traces[0][e]
        for t in traces[1:]:
            acc = acc + t[e]
        out.append(acc * (1.0 / len(traces)))
    return out


# -- variants -----------------------------------------------------------------

VARIANT_NAMES = ("EPALM_LIN", "EPALM_PT", "EPALM", "EPALM_ADA", "DEEP_PT",
                 "B_PROMPTFUSE", "B_LIMBER", "B_MAGMA", "TEXT_ONLY", "FULL_FT")

GROUPS = ("connection", "prompt", "adapters", "encoder", "decoder")


@dataclass(frozen=True)
class VariantSpec:
    name: str
    connection: str | None = "shared"         # shared | per_level | None
    prompt: PromptSpec | None = None
    deep_prompt: bool = False
    adapters: AdapterSpec | None = None
    schedule: str = "deep"                    # deep | input
    k: int | None = None                      # None: min(6, N_E, N_L // stride)
    stride: int = 2
    unfreeze: str = "none"                    # none | lm_only | lm_and_encoder
    frame_mode: str = "single"                # single | average_cls
    all_tokens: bool = False                  # prepend every encoder token (B_MAGMA ablation)

    @property
    def uses_perception(self) -> bool:
        return self.connection is not None

    def resolve_schedule(self, n_enc: int, n_dec: int) -> InjectionSchedule | None:
        if not self.uses_perception:
            return None
        if self.schedule == "input":
            return input_schedule(n_enc)
        k = self.k if self.k is not None else default_k(n_enc, n_dec, self.stride)
        return build_schedule(n_enc, n_dec, k, self.stride)

    def declared_groups(self) -> set[str]:
        groups = set()
        if self.connection:
            groups.add("connection")
        if self.prompt is not None:
            groups.add("prompt")
        if self.adapters is not None:
            groups.add("adapters")
        if self.unfreeze in ("lm_only", "lm_and_encoder"):
            groups.add("decoder")
        if self.unfreeze == "lm_and_encoder":
            groups.add("encoder")
        return groups

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "VariantSpec":
        d = dict(d)
        if d.get("prompt") is not None:
            d["prompt"] = PromptSpec(**d["prompt"])
        if d.get("adapters") is not None:
            ad_ = dict(d["adapters"])
            if ad_.get("layers") is not None:
                ad_["layers"] = tuple(ad_["layers"])
            d["adapters"] = AdapterSpec(**ad_)
        return cls(**d)


def variant_spec(name: str, **overrides) -> VariantSpec:
    """The declarative configuration of a named variant, with field overrides."""
    mlp = PromptSpec(10, True)
    light = PromptSpec(10, False)
    table = {
        "EPALM_LIN": VariantSpec("EPALM_LIN", "shared"),
        "EPALM_PT": VariantSpec("EPALM_PT", "shared", prompt=mlp),
        "EPALM": VariantSpec("EPALM", "per_level", prompt=mlp),
        "EPALM_ADA": VariantSpec("EPALM_ADA", "per_level", adapters=AdapterSpec()),
        "DEEP_PT": VariantSpec("DEEP_PT", "shared", prompt=light, deep_prompt=True),
        "B_PROMPTFUSE": VariantSpec("B_PROMPTFUSE", "shared", prompt=light, schedule="input"),
        "B_LIMBER": VariantSpec("B_LIMBER", "shared", schedule="input"),
        "B_MAGMA": VariantSpec("B_MAGMA", "shared", adapters=AdapterSpec(), schedule="input"),
        "TEXT_ONLY": VariantSpec("TEXT_ONLY", None, prompt=mlp),
        "FULL_FT": VariantSpec("FULL_FT", "per_level", prompt=mlp, unfreeze="lm_and_encoder"),
    }
    try:
        spec = table[name]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; known: {', '.join(VARIANT_NAMES)}") from None
    return dataclasses.replace(spec, **overrides) if overrides else spec


def group_of(name: str) -> str:
    head = name.split(".", 1)[0]
    if head == "deep_prompts":
        return "prompt"
    if head not in GROUPS:
        raise ValueError(f"parameter {name!r} belongs to no known group")
    return head


class EPALM(Module):
    """A frozen encoder/decoder pair plus the adaptation parameters of one variant."""

    def __init__(self, spec: VariantSpec, encoder: Encoder | None, decoder: Decoder,
                 rng: np.random.Generator):
        self._spec = spec
        dcfg = decoder.config
        self.encoder = encoder if spec.uses_perception else None
        self.decoder = decoder
        if spec.uses_perception:
            if encoder is None:
                raise ValueError(f"variant {spec.name} needs an encoder")
            ecfg = encoder.config
            self._schedule = spec.resolve_schedule(ecfg.n_layers, dcfg.n_layers)
            self._schedule.validate(ecfg.n_layers, dcfg.n_layers)
            self.connection = Connection(spec.connection, self._schedule.K,
                                         ecfg.d_model, dcfg.d_model, rng)
        else:
            self._schedule = None
            self.connection = None
        self.prompt = None
        self.deep_prompts = None
        if spec.prompt is not None:
            if spec.deep_prompt:
                self.deep_prompts = [_weight(rng, (spec.prompt.length, dcfg.d_model))
                                     for _ in range(dcfg.n_layers)]
            else:
                self.prompt = SoftPrompt(spec.prompt, dcfg.d_model, rng)
        self.adapters = None
        if spec.adapters is not None:
            layers = spec.adapters.layers
            layers = range(dcfg.n_layers) if layers is None else layers
            self.adapters = [AdapterPair(dcfg.d_model, spec.adapters.downsample_factor, rng)
                             if j in layers else None for j in range(dcfg.n_layers)]
        self.assign_names()
        self.apply_freezing()

    @property
    def spec(self) -> VariantSpec:
        return self._spec

    @property
    def schedule(self) -> InjectionSchedule | None:
        return self._schedule

    def apply_freezing(self) -> None:
        groups = self._spec.declared_groups()
        for name, p in self.named_parameters():
            p.trainable = group_of(name) in groups

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def encode(self, perception) -> ClsTrace:
        """[CLS] trace for [B, n, f] inputs, or [B, F, n, f] frame stacks averaged per layer."""
        x = ad.as_tensor(perception, self.decoder.tok_emb.dtype)
        if self._spec.frame_mode == "average_cls":
            if x.ndim == 3:
                x = x.reshape(1, *x.shape)
            B, F = x.shape[:2]
            _, trace = self.encoder(x.reshape(B * F, *x.shape[2:]))
            return [t.reshape(B, F, t.shape[-1]).mean(axis=1) for t in trace]
        _, trace = self.encoder(x)
        return trace

    def make_hook(self, perception):
        if not self._spec.uses_perception:
            return None
        sched = self._schedule
        if self._spec.all_tokens:
            tokens, _ = self.encoder(ad.as_tensor(perception, self.decoder.tok_emb.dtype))
            proj = self.connection.layer_for(0)(tokens)
            return lambda j: proj if j == sched.decoder_layers[0] else None
        trace = self.encode(perception)
        by_layer = {d: k for k, d in enumerate(sched.decoder_layers)}
        cache: dict[int, Tensor] = {}

        def hook(j: int):
            k = by_layer.get(j)
            if k is None:
                return None
            if k not in cache:
                cache[k] = project_cls(self.connection, trace, sched, k)
            return cache[k]

        return hook

    def prompt_state(self) -> Tensor | None:
        return self.prompt() if self.prompt is not None else None

    def __call__(self, perception, input_ids, probe: dict | None = None) -> Tensor:
        return forward_multimodal(self, perception, input_ids, probe)


def forward_multimodal(model: EPALM, perception, input_ids, probe: dict | None = None) -> Tensor:
    """Logits [B, T, V] for ``input_ids`` conditioned on ``perception``."""
    hook = model.make_hook(perception) if perception is not None else None
    if model.spec.uses_perception and hook is None:
        raise ValueError(f"variant {model.spec.name} needs a perceptual input")
    return model.decoder.forward_with_hooks(
        input_ids, model.prompt_state(), hook, model.adapters,
        layer_prompts=model.deep_prompts, probe=probe)


# -- parameter budgets --------------------------------------------------------

@dataclass
class ParamBudget:
    trainable_count: int
    frozen_count: int
    per_group: dict[str, dict[str, int]] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.trainable_count + self.frozen_count

    @property
    def fraction(self) -> float:
        return self.trainable_count / self.total

    @property
    def percent(self) -> float:
        return 100.0 * self.fraction

    def to_dict(self) -> dict:
        return {
            "trainable": self.trainable_count,
            "frozen": self.frozen_count,
            "total": self.total,
            "fraction": float(f"{self.fraction:.4g}"),
            "percent": float(f"{self.percent:.4g}"),
            "groups": self.per_group,
        }


def _budget(entries: Iterable[tuple[str, tuple, bool]]) -> ParamBudget:
    trainable = frozen = 0
    groups: dict[str, dict[str, int]] = {}
    for name, shape, is_trainable in entries:
        n = int(np.prod(shape, dtype=np.int64))
        g = groups.setdefault(group_of(name), {"trainable": 0, "frozen": 0})
        if is_trainable:
            trainable += n
            g["trainable"] += n
        else:
            frozen += n
            g["frozen"] += n
    return ParamBudget(trainable, frozen, groups)


def count_params(model: Module) -> ParamBudget:
    return _budget((name, p.shape, p.trainable) for name, p in model.named_parameters())


def _linear(prefix: str, d_in: int, d_out: int) -> dict[str, tuple]:
    return {f"{prefix}.weight": (d_in, d_out), f"{prefix}.bias": (d_out,)}


def _block(prefix: str, d: int, f: int) -> dict[str, tuple]:
    out = {f"{prefix}.ln_attn.gain": (d,), f"{prefix}.ln_attn.bias": (d,)}
    for m in ("q", "k", "v", "out"):
        out.update(_linear(f"{prefix}.attn.{m}", d, d))
    out.update({f"{prefix}.ln_ffn.gain": (d,), f"{prefix}.ln_ffn.bias": (d,)})
    out.update(_linear(f"{prefix}.ffn.up", d, f))
    out.update(_linear(f"{prefix}.ffn.down", f, d))
    return out


def param_shapes(spec: VariantSpec, ecfg: EncoderConfig, dcfg: DecoderConfig) -> dict[str, tuple]:
    """Parameter names and shapes of an assembled model, without allocating it."""
    shapes: dict[str, tuple] = {}
    if spec.uses_perception:
        shapes.update(_linear("encoder.patch_proj", ecfg.patch_feature_dim, ecfg.d_model))
        shapes["encoder.cls"] = (ecfg.d_model,)
        shapes["encoder.pos"] = (ecfg.n_patches + 1, ecfg.d_model)
        for i in range(ecfg.n_layers):
            shapes.update(_block(f"encoder.blocks.{i}", ecfg.d_model, ecfg.d_ffn))
    d = dcfg.d_model
    shapes["decoder.tok_emb"] = (dcfg.vocab_size, d)
    shapes["decoder.pos_emb"] = (dcfg.max_positions, d)
    for i in range(dcfg.n_layers):
        shapes.update(_block(f"decoder.blocks.{i}", d, dcfg.d_ffn))
    shapes.update({"decoder.ln_final.gain": (d,), "decoder.ln_final.bias": (d,)})
    if spec.uses_perception:
        K = spec.resolve_schedule(ecfg.n_layers, dcfg.n_layers).K
        for k in range(1 if spec.connection == "shared" else K):
            shapes.update(_linear(f"connection.proj.{k}", ecfg.d_model, d))
    if spec.prompt is not None:
        P = spec.prompt.length
        if spec.deep_prompt:
            for j in range(dcfg.n_layers):
                shapes[f"deep_prompts.{j}"] = (P, d)
        else:
            shapes["prompt.embedding"] = (P, d)
            if spec.prompt.with_mlp:
                h = spec.prompt.mlp_hidden or d
                shapes.update(_linear("prompt.mlp.0", d, h))
                shapes.update(_linear("prompt.mlp.1", h, d))
    if spec.adapters is not None:
        layers = spec.adapters.layers
        layers = range(dcfg.n_layers) if layers is None else layers
        b = d // spec.adapters.downsample_factor
        for j in layers:
            for where in ("after_attn", "after_ffn"):
                shapes.update(_linear(f"adapters.{j}.{where}.down", d, b))
                shapes.update(_linear(f"adapters.{j}.{where}.up", b, d))
    return shapes


def count_params_for(spec: VariantSpec, ecfg: EncoderConfig, dcfg: DecoderConfig) -> ParamBudget:
    groups = spec.declared_groups()
    return _budget((n, s, group_of(n) in groups) for n, s in param_shapes(spec, ecfg, dcfg).items())


# Reference architectures; only ever counted, never instantiated.
_VIT_PATCHES, _VIT_PATCH_DIM = 196, 16 * 16 * 3
_VOCAB, _MAX_POS = 50272, 2050


def _vit(d: int, n: int) -> EncoderConfig:
    return EncoderConfig(n, d, d // 64, 4 * d, _VIT_PATCHES, _VIT_PATCH_DIM)


def _opt(d: int, n: int) -> DecoderConfig:
    return DecoderConfig(n, d, d // 64, 4 * d, _VOCAB, _MAX_POS)


ENCODER_PRESETS = {"vit_s": _vit(384, 12), "vit_b": _vit(768, 12), "vit_l": _vit(1024, 24)}
DECODER_PRESETS = {"opt125": _opt(768, 12), "opt350": _opt(1024, 24), "opt1b3": _opt(2048, 24),
                   "opt2b7": _opt(2560, 32), "opt6b7": _opt(4096, 32)}
