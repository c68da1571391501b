"""Command-line entry point: ``epalm <command> ...``.

Exit codes: 0 ok, 2 usage or invalid input, 3 numeric abort,
4 checkpoint/model mismatch, 5 verification failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .adapt import (AdapterSpec, DECODER_PRESETS, ENCODER_PRESETS, EPALM, PromptSpec, VARIANT_NAMES,
                    VariantSpec, count_params, count_params_for, variant_spec)
from .autodiff import RngState
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .decode import DecodeConfig
from .metrics import evaluate_split
from .nn import Decoder, DecoderConfig, Encoder, EncoderConfig
from .pretrain import PretrainConfig, load_backbones, pretrain_decoder, pretrain_encoder, save_backbones
from .tasks import DatasetSpec, default_vocabulary, read_jsonl, subsample_fraction, write_dataset
from .train import TrainConfig, TrainingAborted, collate, batch_loss, train_run

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_MISMATCH, EXIT_VERIFY = 0, 2, 3, 4, 5


class UsageError(ValueError):
    pass


# -- flat config files ----------------------------------------------------------

def _parse_value(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null", ""):
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_flat(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment; later keys win."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"line {n}: expected 'key = value', got {raw!r}")
        out[key.strip()] = _parse_value(value.strip())
    return out


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


@dataclass
class ExperimentConfig:
    """Everything one run needs; serialises to and from the flat format."""

    variant: VariantSpec = field(default_factory=lambda: variant_spec("EPALM"))
    encoder: dict = field(default_factory=lambda: {"n_layers": 6, "d_model": 48, "n_heads": 4, "d_ffn": 192})
    decoder: dict = field(default_factory=lambda: {"n_layers": 8, "d_model": 64, "n_heads": 4, "d_ffn": 256,
                                                   "max_positions": 64})
    data: DatasetSpec = field(default_factory=lambda: DatasetSpec("vqa"))
    data_dir: str | None = None
    data_fraction: float = 1.0
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    backbone: str | None = None
    out_dir: str = "runs/default"
    seed: int = 0
    dtype: str = "float32"

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(patch_feature_dim=self.data.patch_feature_dim,
                             n_patches=self.data.n_patches, **self.encoder)

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(vocab_size=len(default_vocabulary()), **self.decoder)

    def to_flat(self) -> dict:
        v = self.variant
        flat = {"seed": self.seed, "dtype": self.dtype, "out_dir": self.out_dir,
                "backbone.path": self.backbone,
                "variant.name": v.name, "variant.k": v.k, "variant.stride": v.stride,
                "variant.schedule": v.schedule, "variant.connection": v.connection,
                "variant.prompt_length": v.prompt.length if v.prompt else None,
                "variant.prompt_mlp": v.prompt.with_mlp if v.prompt else None,
                "variant.deep_prompt": v.deep_prompt,
                "variant.adapter_factor": v.adapters.downsample_factor if v.adapters else None,
                "variant.unfreeze": v.unfreeze, "variant.frame_mode": v.frame_mode,
                "variant.all_tokens": v.all_tokens}
        flat.update({f"encoder.{k}": x for k, x in self.encoder.items()})
        flat.update({f"decoder.{k}": x for k, x in self.decoder.items()})
        flat.update({f"data.{k}": x for k, x in self.data.to_dict().items()})
        flat["data.dir"] = self.data_dir
        flat["data.fraction"] = self.data_fraction
        for k, x in self.train.to_dict().items():
            if k == "group_lrs":
                flat.update({f"train.group_lr.{g}": lr for g, lr in x.items()})
            elif k == "betas":
                flat["train.beta1"], flat["train.beta2"] = x
            else:
                flat[f"train.{k}"] = x
        d = self.decode
        flat["decode.mode"] = {"greedy": "greedy", "beam": f"beam={d.width}",
                               "multinomial": f"multinomial={d.temperature}"}[d.mode]
        flat["decode.max_new_tokens"] = d.max_new_tokens
        flat["decode.seed"] = d.seed
        flat.update({f"pretrain.{k}": x for k, x in self.pretrain.to_dict().items()})
        return flat

    def to_text(self) -> str:
        lines = [f"# resolved config, epalm {__version__}"]
        lines += [f"{k} = {_fmt(v)}" for k, v in self.to_flat().items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_flat(cls, flat: dict, env: dict | None = None) -> "ExperimentConfig":
        flat = dict(flat)
        env = os.environ if env is None else env
        known = set(cls().to_flat())
        unknown = [k for k in flat if k not in known and not k.startswith("train.group_lr.")]
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg = cls()
        seed = flat.pop("seed", 0)
        if env.get("EPALM_SEED"):
            try:
                seed = int(env["EPALM_SEED"])
            except ValueError:
                raise UsageError(f"EPALM_SEED must be an integer, got {env['EPALM_SEED']!r}") from None
        cfg.seed = seed
        cfg.dtype = flat.pop("dtype", cfg.dtype)
        if cfg.dtype not in ("float32", "float64"):
            raise UsageError("dtype must be float32 or float64")
        cfg.out_dir = str(flat.pop("out_dir", cfg.out_dir))
        cfg.backbone = flat.pop("backbone.path", None)
        cfg.data_dir = flat.pop("data.dir", None)
        cfg.data_fraction = float(flat.pop("data.fraction", 1.0))

        def take(prefix):
            return {k[len(prefix):]: flat.pop(k) for k in list(flat) if k.startswith(prefix)}

        v = take("variant.")
        overrides = {}
        name = v.pop("name", "EPALM")
        base = _variant_or_usage(name)
        if "prompt_length" in v or "prompt_mlp" in v:
            length, mlp = v.pop("prompt_length", None), v.pop("prompt_mlp", None)
            if length is None and mlp is None:
                overrides["prompt"] = None
            else:
                p = base.prompt or PromptSpec()
                overrides["prompt"] = PromptSpec(length if length is not None else p.length,
                                                 mlp if mlp is not None else p.with_mlp)
        if "adapter_factor" in v:
            f = v.pop("adapter_factor")
            overrides["adapters"] = None if f is None else AdapterSpec(downsample_factor=int(f))
        if "unfreeze" in v and v["unfreeze"] is None:
            v["unfreeze"] = "none"  # the literal value 'none' parses as null
        overrides.update(v)
        try:
            cfg.variant = dataclasses.replace(base, **overrides)
        except TypeError as exc:
            raise UsageError(str(exc)) from None
        cfg.encoder.update(take("encoder."))
        cfg.decoder.update(take("decoder."))
        data = take("data.")
        task = data.pop("task", "vqa")
        cfg.data = DatasetSpec(task, **data)
        cfg.pretrain = PretrainConfig(**take("pretrain."))
        t = take("train.")
        groups = {k[len("group_lr."):]: t.pop(k) for k in list(t) if k.startswith("group_lr.")}
        betas = (t.pop("beta1", 0.9), t.pop("beta2", 0.999))
        if groups or "group_lrs" not in t:
            t["group_lrs"] = groups
        t.setdefault("seed", seed)
        if env.get("EPALM_SEED"):
            t["seed"] = seed
        cfg.train = TrainConfig(betas=betas, **t)
        d = take("decode.")
        mode = str(d.pop("mode", "greedy"))
        dc = DecodeConfig.parse(mode, max_new_tokens=int(d.pop("max_new_tokens", 8)))
        cfg.decode = dataclasses.replace(dc, **d)
        return cfg


def _variant_or_usage(name: str) -> VariantSpec:
    try:
        return variant_spec(name)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def load_config(path: str | Path, env: dict | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    try:
        return ExperimentConfig.from_flat(parse_flat(text), env)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{path}: {exc}") from None


# -- model assembly -------------------------------------------------------------

def build_backbones(cfg: ExperimentConfig) -> tuple[Encoder, Decoder]:
    ecfg, dcfg = cfg.encoder_config(), cfg.decoder_config()
    rng = RngState(cfg.pretrain.seed)
    encoder = Encoder(ecfg, rng.generator(1))
    decoder = Decoder(dcfg, rng.generator(2))
    encoder.assign_names()
    decoder.assign_names()
    dtype = np.dtype(cfg.dtype)
    encoder.astype(dtype)
    decoder.astype(dtype)
    if cfg.backbone:
        if not Path(cfg.backbone).exists():
            raise UsageError(f"backbone checkpoint {cfg.backbone} not found; run 'epalm pretrain' first")
        load_backbones(cfg.backbone, encoder, decoder)
    return encoder, decoder


def pretrain_backbones(cfg: ExperimentConfig, log=None) -> tuple[Encoder, Decoder]:
    """Fresh backbones for ``cfg``, pretrained on its VQA scene distribution."""
    encoder, decoder = build_backbones(dataclasses.replace(cfg, backbone=None))
    spec = dataclasses.replace(cfg.data, task="vqa")
    pretrain_encoder(encoder, spec, cfg.pretrain, log=log)
    pretrain_decoder(decoder, spec, default_vocabulary(), cfg.pretrain, log=log)
    return encoder, decoder


def build_model(cfg: ExperimentConfig, encoder: Encoder | None = None,
                decoder: Decoder | None = None) -> EPALM:
    if encoder is None or decoder is None:
        encoder, decoder = build_backbones(cfg)
    model = EPALM(cfg.variant, encoder, decoder, RngState(cfg.seed).generator(3))
    return model.astype(np.dtype(cfg.dtype))


def load_data(cfg: ExperimentConfig):
    if cfg.data_dir is None:
        raise UsageError("config has no data.dir; run 'epalm gen-data' and set it")
    root = Path(cfg.data_dir)
    if not (root / "train.jsonl").exists() or not (root / "val.jsonl").exists():
        raise UsageError(f"{root} lacks train.jsonl/val.jsonl; run 'epalm gen-data' first")
    train, val = read_jsonl(root / "train.jsonl"), read_jsonl(root / "val.jsonl")
    if cfg.data_fraction < 1.0:
        train = subsample_fraction(train, cfg.data_fraction, cfg.seed)
    return train, val


# -- commands ---------------------------------------------------------------------

def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def cmd_gen_data(args) -> int:
    try:
        flat = parse_flat(Path(args.spec).read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read spec {args.spec}: {exc}") from None
    fields = {k[len("data."):] if k.startswith("data.") else k: v for k, v in flat.items()}
    fields = {k: v for k, v in fields.items() if k not in ("dir", "fraction")}
    try:
        spec = DatasetSpec(fields.pop("task", "vqa"), **fields)
        spec.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid dataset spec: {exc}") from None
    manifest = write_dataset(spec, args.out)
    print(json.dumps(manifest, sort_keys=True))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    if not cfg.backbone:
        raise UsageError("config needs backbone.path for the pretrained backbone output")
    path = Path(cfg.backbone)
    if path.exists() and not args.force:
        _err(f"{path} exists; pass --force to overwrite")
        return EXIT_OK
    encoder, decoder = pretrain_backbones(cfg, log=_err)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_backbones(encoder, decoder, path)
    print(json.dumps({"backbone": str(path)}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(cfg.to_text(), encoding="utf-8")
    train, val = load_data(cfg)
    model = build_model(cfg)
    vocab = default_vocabulary()
    try:
        result = train_run(model, train, val, vocab, cfg.train, task=cfg.data.task,
                           decode=cfg.decode, out_dir=out, log=_err)
    except TrainingAborted as exc:
        _err(f"training aborted: {exc}")
        return EXIT_NUMERIC
    save_checkpoint(model, out / "final.ckpt", meta={"format_version": 1, "variant": cfg.variant.to_dict(),
                                                      "epoch": cfg.train.epochs - 1})
    print(json.dumps({"best_metric": result.best_metric, "best_epoch": result.best_epoch,
                      "out_dir": str(out)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    if args.decode:
        try:
            cfg.decode = DecodeConfig.parse(args.decode, cfg.decode.max_new_tokens)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    _, val = load_data(cfg)
    model = build_model(cfg)
    try:
        meta = load_checkpoint(args.checkpoint, model)
    except (CheckpointError, OSError) as exc:
        _err(f"checkpoint error: {exc}")
        return EXIT_MISMATCH
    variant = meta.get("variant")
    if variant is not None and VariantSpec.from_dict(variant) != cfg.variant:
        _err(f"checkpoint was trained as {variant.get('name')}, config builds {cfg.variant.name}")
        return EXIT_MISMATCH
    out = Path(args.out or Path(cfg.out_dir) / "eval")
    out.mkdir(parents=True, exist_ok=True)
    tag = args.decode.replace("=", "") if args.decode else cfg.decode.mode
    report = evaluate_split(model, val, default_vocabulary(), cfg.decode,
                            predictions_path=out / f"predictions_{tag}.jsonl")
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    (out / f"report_{tag}.json").write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_count_params(args) -> int:
    if args.encoder not in ENCODER_PRESETS:
        raise UsageError(f"unknown encoder preset {args.encoder!r}; known: {', '.join(ENCODER_PRESETS)}")
    if args.decoder not in DECODER_PRESETS:
        raise UsageError(f"unknown decoder preset {args.decoder!r}; known: {', '.join(DECODER_PRESETS)}")
    spec = _variant_or_usage(args.variant)
    if spec.prompt is not None:
        spec = dataclasses.replace(spec, prompt=PromptSpec(spec.prompt.length, args.prompt_mlp))
    budget = count_params_for(spec, ENCODER_PRESETS[args.encoder], DECODER_PRESETS[args.decoder])
    out = budget.to_dict()
    out.update({"variant": spec.name, "encoder": args.encoder, "decoder": args.decoder})
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


GRAD_CHECK_SCALE = 0.3
TINY = {"encoder": {"n_layers": 4, "d_model": 16, "n_heads": 2, "d_ffn": 32},
        "decoder": {"n_layers": 6, "d_model": 16, "n_heads": 2, "d_ffn": 32, "max_positions": 40}}


def grad_check_variant(name: str, seed: int = 0, max_coords: int = 6) -> tuple[float, str | None]:
    """Worst relative gradient error of a tiny float64 model of variant ``name``."""
    cfg = ExperimentConfig(variant=variant_spec(name), encoder=dict(TINY["encoder"]),
                           decoder=dict(TINY["decoder"]), dtype="float64", seed=seed,
                           data=DatasetSpec("vqa", n_train=4, n_val=2, seed=seed))
    cfg.pretrain = dataclasses.replace(cfg.pretrain, seed=seed)
    model = build_model(cfg)
    # Move every weight well away from its 0.02-scale init. Zero biases and unit
    # gains get exercised, and no gradient sits near the finite-difference
    # roundoff floor (~1e-10), where the relative error is meaningless.
    rng = RngState(seed).generator(9)
    for p in model.parameters():
        p.data = p.data + GRAD_CHECK_SCALE * rng.standard_normal(p.shape)
    from .tasks import gen_dataset
    train, _ = gen_dataset(cfg.data)
    batch = collate(train[:3], default_vocabulary(), "vqa", dtype=np.float64)
    # Adding a constant to every key score leaves softmax unchanged, so key
    # biases have an identically zero gradient; the relative error is undefined there.
    params = [p for p in model.trainable_parameters() if not p.name.endswith("attn.k.bias")]
    return ad.grad_check(lambda: batch_loss(model, batch), params, max_coords=max_coords,
                         rng=RngState(seed).generator(10), return_worst=True)


def cmd_grad_check(args) -> int:
    if args.dims != "tiny":
        raise UsageError("only --dims tiny is supported")
    names = VARIANT_NAMES if args.variant == "all" else [args.variant]
    failed = False
    for name in names:
        _variant_or_usage(name)
        t0 = time.perf_counter()
        worst, where = grad_check_variant(name, max_coords=args.coords)
        ok = bool(worst < 1e-4)
        failed |= not ok
        print(json.dumps({"variant": name, "max_rel_error": float(worst), "worst_param": where,
                          "pass": ok, "seconds": round(time.perf_counter() - t0, 3)}))
        if not ok:
            _err(f"{name}: gradient check failed at {where} (relative error {worst:.3g})")
    return EXIT_VERIFY if failed else EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="epalm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate train/val JSONL from a dataset spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pretrain the toy encoder and decoder backbones")
    p.add_argument("--config", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="train one variant")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the validation split")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--decode", help="greedy | beam=N | multinomial=T")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("count-params", help="parameter budget for preset architectures")
    p.add_argument("--variant", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--decoder", required=True)
    p.add_argument("--prompt-mlp", action="store_true")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("grad-check", help="finite-difference check of a tiny float64 model")
    p.add_argument("--variant", required=True, help="variant name or 'all'")
    p.add_argument("--dims", default="tiny")
    p.add_argument("--coords", type=int, default=6, help="sampled coordinates per tensor")
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        _err(f"error: {exc}")
        return EXIT_USAGE
    except CheckpointError as exc:
        _err(f"checkpoint error: {exc}")
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
