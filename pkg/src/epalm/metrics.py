"""Strict exact match, corpus BLEU@4 and plain CIDEr, plus split evaluation."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .decode import DecodeConfig, beam_search, greedy_decode, model_step_fn, sample_decode
from .tasks import BOS, SEP, SyntheticExample, Vocabulary


def exact_match(pred: str, gold: str) -> int:
    """1 iff the strings agree after trimming outer whitespace. Case-sensitive."""
    return int(pred.strip() == gold.strip())


def _ngrams(words: Sequence[str], n: int) -> Counter:
    return Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


def _split(text) -> list[str]:
    return text.split() if isinstance(text, str) else list(text)


def bleu4(candidates: Sequence, references: Sequence[Sequence]) -> float:
    """Corpus BLEU with uniform 1..4-gram weights and no smoothing."""
    if not candidates:
        raise ValueError("bleu4 needs at least one candidate")
    if len(candidates) != len(references):
        raise ValueError("candidates and references differ in length")
    matched = [0] * 4
    total = [0] * 4
    c_len = r_len = 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise ValueError("every candidate needs at least one reference")
        c = _split(cand)
        rs = [_split(r) for r in refs]
        c_len += len(c)
        # closest reference length, shorter one on ties
        r_len += min((abs(len(r) - len(c)), len(r)) for r in rs)[1]
        for n in range(1, 5):
            cn = _ngrams(c, n)
            max_ref: Counter = Counter()
            for r in rs:
                max_ref |= _ngrams(r, n)
            matched[n - 1] += sum(min(k, max_ref[g]) for g, k in cn.items())
            total[n - 1] += max(len(c) - n + 1, 0)
    if min(matched) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / 4
    bp = 1.0 if c_len >= r_len else math.exp(1 - r_len / c_len)
    return bp * math.exp(log_p)


def cider(candidates: Sequence, references: Sequence[Sequence], n: int = 4) -> float:
    """Plain CIDEr (no CIDEr-D length penalty or clipping), scaled by 10.

    Document frequency of an n-gram is the number of items whose references
    contain it; IDF = ln(N / df). N-grams no reference contains take the
    largest IDF in the corpus, which keeps the score a function of df / N
    (duplicating the corpus changes nothing). If every IDF is zero (a
    one-item corpus) IDF falls back to 1.
    """
    if not candidates:
        raise ValueError("cider needs at least one item")
    if len(candidates) != len(references):
        raise ValueError("candidates and references differ in length")
    N = len(candidates)
    cands = [_split(c) for c in candidates]
    refs = []
    for rs in references:
        if not rs:
            raise ValueError("every item needs at least one reference")
        refs.append([_split(r) for r in rs])
    df: Counter = Counter()
    for rs in refs:
        seen = set()
        for r in rs:
            for k in range(1, n + 1):
                seen.update(_ngrams(r, k))
        df.update(seen)
    flat_idf = all(math.log(N / v) == 0.0 for v in df.values())
    unseen_idf = math.log(N / min(df.values())) if df else 0.0

    def idf(g) -> float:
        if flat_idf:
            return 1.0
        return math.log(N / df[g]) if g in df else unseen_idf

    def vec(words, k):
        return {g: c * idf(g) for g, c in _ngrams(words, k).items()}

    def cos(a: dict, b: dict) -> float:
        na = math.sqrt(sum(v * v for v in a.values()))
        nb = math.sqrt(sum(v * v for v in b.values()))
        if na == 0.0 or nb == 0.0:
            return 0.0
        return sum(v * b.get(g, 0.0) for g, v in a.items()) / (na * nb)

    scores = []
    for c, rs in zip(cands, refs):
        per_n = []
        for k in range(1, n + 1):
            cv = vec(c, k)
            per_n.append(sum(cos(cv, vec(r, k)) for r in rs) / len(rs))
        scores.append(10.0 * sum(per_n) / n)
    return float(np.mean(scores))


@dataclass
class MetricReport:
    exact_match: float
    bleu4: float
    cider: float
    n_examples: int
    decode: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _prefix_and_gold(ex: SyntheticExample, vocab: Vocabulary) -> tuple[list[int], str]:
    if ex.question:
        return [BOS] + vocab.tokenize(ex.question), ex.answer
    return [BOS], ex.caption if ex.caption is not None else ex.answer


def predict(model, examples: Sequence[SyntheticExample], vocab: Vocabulary,
            cfg: DecodeConfig, batch_size: int = 256) -> list[str]:
    """Generated strings for ``examples``; greedy and sampling batch equal-length prompts."""
    preds: list[str | None] = [None] * len(examples)
    prefixes = [_prefix_and_gold(ex, vocab)[0] for ex in examples]
    uses_vis = model.spec.uses_perception
    if cfg.mode == "beam":
        for i, ex in enumerate(examples):
            vis = np.asarray(ex.visual)[None] if uses_vis else None
            step = model_step_fn(model, vis)
            preds[i] = vocab.detokenize(beam_search(step, prefixes[i], cfg.width, cfg.max_new_tokens))
        return preds
    by_len: dict[int, list[int]] = {}
    for i, p in enumerate(prefixes):
        by_len.setdefault(len(p), []).append(i)
    for length in sorted(by_len):
        idx = by_len[length]
        for s in range(0, len(idx), batch_size):
            chunk = idx[s:s + batch_size]
            vis = np.stack([examples[i].visual for i in chunk]) if uses_vis else None
            step = model_step_fn(model, vis)
            rows = np.asarray([prefixes[i] for i in chunk], dtype=np.int64)
            if cfg.mode == "greedy":
                outs = greedy_decode(step, rows, cfg.max_new_tokens)
            else:
                outs = sample_decode(step, rows, cfg.max_new_tokens, cfg.temperature,
                                     cfg.seed + chunk[0])
            for i, toks in zip(chunk, outs):
                preds[i] = vocab.detokenize(toks)
    return preds


def evaluate_split(model, examples: Sequence[SyntheticExample], vocab: Vocabulary,
                   cfg: DecodeConfig, predictions_path: str | Path | None = None,
                   preds: list[str] | None = None) -> MetricReport:
    """Generate for every example and score; optionally write per-example JSONL."""
    if preds is None:
        preds = predict(model, examples, vocab, cfg)
    golds = [_prefix_and_gold(ex, vocab)[1] for ex in examples]
    matches = [exact_match(p, g) for p, g in zip(preds, golds)]
    refs = [[g] for g in golds]
    report = MetricReport(
        exact_match=float(np.mean(matches)),
        bleu4=bleu4(preds, refs),
        cider=cider(preds, refs),
        n_examples=len(examples),
        decode=cfg.to_dict(),
    )
    if predictions_path is not None:
        with open(predictions_path, "w", encoding="utf-8", newline="\n") as fh:
            for i, (p, g, m) in enumerate(zip(preds, golds, matches)):
                fh.write(json.dumps({"id": i, "pred": p, "gold": g, "match": m}) + "\n")
    return report
