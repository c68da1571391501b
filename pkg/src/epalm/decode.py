"""Open-ended generation: greedy, beam search, multinomial sampling."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .autodiff import RngState
from .tasks import EOS

# Maps a batch of equal-length prefixes [B, t] to next-token log-probs [B, V].
StepFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class DecodeConfig:
    mode: str = "greedy"        # greedy | beam | multinomial
    width: int = 1
    temperature: float = 1.0
    max_new_tokens: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("greedy", "beam", "multinomial"):
            raise ValueError(f"unknown decode mode {self.mode!r}")
        if self.width < 1:
            raise ValueError("beam width must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")

    @classmethod
    def parse(cls, text: str, max_new_tokens: int = 8) -> "DecodeConfig":
        """``greedy``, ``beam=3`` or ``multinomial=0.7`` style strings."""
        name, _, arg = text.partition("=")
        if name == "greedy":
            return cls("greedy", max_new_tokens=max_new_tokens)
        if name == "beam":
            return cls("beam", width=int(arg or 1), max_new_tokens=max_new_tokens)
        if name == "multinomial":
            return cls("multinomial", temperature=float(arg or 1.0), max_new_tokens=max_new_tokens)
        raise ValueError(f"unknown decode mode {text!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.float64)
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def model_step_fn(model, perception) -> StepFn:
    """Next-token log-probs from an assembled model, perception encoded once."""
    hook = model.make_hook(perception) if perception is not None and model.spec.uses_perception else None
    prompt = model.prompt_state()

    def step(prefixes: np.ndarray) -> np.ndarray:
        logits = model.decoder.forward_with_hooks(prefixes, prompt, hook, model.adapters,
                                                  layer_prompts=model.deep_prompts)
        return _log_softmax(logits.data[:, -1])

    return step


def greedy_decode(step: StepFn, prefixes: np.ndarray, max_new_tokens: int) -> list[list[int]]:
    """Argmax continuation (lowest id on ties) for a batch of equal-length prefixes."""
    seqs = np.asarray(prefixes, dtype=np.int64)
    if seqs.ndim == 1:
        seqs = seqs[None]
    B = seqs.shape[0]
    out: list[list[int]] = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    for _ in range(max_new_tokens):
        logp = step(seqs)
        nxt = logp.argmax(axis=-1)
        for i in range(B):
            if not done[i]:
                if nxt[i] == EOS:
                    done[i] = True
                else:
                    out[i].append(int(nxt[i]))
        if done.all():
            break
        seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
    return out


def sample_decode(step: StepFn, prefixes: np.ndarray, max_new_tokens: int,
                  temperature: float, seed: int) -> list[list[int]]:
    rng = RngState(seed).generator()
    seqs = np.asarray(prefixes, dtype=np.int64)
    if seqs.ndim == 1:
        seqs = seqs[None]
    B = seqs.shape[0]
    out: list[list[int]] = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    for _ in range(max_new_tokens):
        logp = step(seqs) / temperature
        p = np.exp(logp - logp.max(axis=-1, keepdims=True))
        p /= p.sum(axis=-1, keepdims=True)
        u = rng.random(B)
        nxt = np.minimum((np.cumsum(p, axis=-1) < u[:, None]).sum(axis=-1), p.shape[-1] - 1)
        for i in range(B):
            if not done[i]:
                if nxt[i] == EOS:
                    done[i] = True
                else:
                    out[i].append(int(nxt[i]))
        if done.all():
            break
        seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
    return out


def beam_search(step: StepFn, prefix, width: int, max_new_tokens: int) -> list[int]:
    """Best continuation of one ``prefix`` under length-normalised log-probability.

    Hypotheses are scored by (sum of token log-probs) / (generated tokens,
    counting EOS). At every step the ``width`` best expansions are kept; those
    ending in EOS retire into a finished pool. The result is the best pooled
    hypothesis; unfinished ones are considered only if nothing finished.
    Ties go to the earlier-finished hypothesis, then to lexicographically
    smaller token ids. The returned ids exclude EOS.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    prefix = np.asarray(prefix, dtype=np.int64).reshape(-1)
    live: list[tuple[float, tuple[int, ...]]] = [(0.0, ())]
    pool: list[tuple[float, int, tuple[int, ...]]] = []
    for t in range(1, max_new_tokens + 1):
        if not live:
            break
        rows = np.stack([np.concatenate([prefix, np.asarray(toks, dtype=np.int64)]) for _, toks in live])
        logp = step(rows)
        cands = []
        for (score, toks), lp in zip(live, logp):
            for tok in range(lp.shape[0]):
                cands.append((score + float(lp[tok]), float(lp[tok]), toks + (tok,)))
        # normalised score desc; exact float ties fall back to the last step's
        # log-prob, then token ids, which keeps width 1 identical to greedy
        cands.sort(key=lambda c: (-c[0] / t, -c[1], c[2]))
        live = []
        for score, _, toks in cands[:width]:
            if toks[-1] == EOS:
                pool.append((score / t, t, toks[:-1]))
            else:
                live.append((score, toks))
    if not pool:
        n = max_new_tokens
        pool = [(score / n, n, toks) for score, toks in live]
    pool.sort(key=lambda c: (-c[0], c[1], c[2]))
    return list(pool[0][2])


def generate(model, perception, question_ids, cfg: DecodeConfig) -> list[int]:
    """Continuation of ``question_ids`` (ending in SEP, or just BOS) until EOS."""
    prefix = np.asarray(question_ids, dtype=np.int64)[None]
    max_pos = model.decoder.config.max_positions
    P = model.prompt.embedding.shape[0] if model.prompt is not None else (
        model.deep_prompts[0].shape[0] if model.deep_prompts is not None else 0)
    if P + 1 + prefix.shape[1] + cfg.max_new_tokens > max_pos:
        raise ValueError(f"generation would exceed max_positions={max_pos}")
    if perception is not None:
        perception = np.asarray(perception)[None]
    step = model_step_fn(model, perception)
    if cfg.mode == "greedy":
        return greedy_decode(step, prefix, cfg.max_new_tokens)[0]
    if cfg.mode == "beam":
        # perception is encoded for batch 1; the decoder broadcasts it across beams
        return beam_search(step, prefix[0], cfg.width, cfg.max_new_tokens)
    return sample_decode(step, prefix, cfg.max_new_tokens, cfg.temperature, cfg.seed)[0]
