"""Deterministic synthetic multimodal tasks.

Grid worlds of coloured shapes stand in for images. Each grid cell is one
patch whose feature vector is ``one_hot(shape) ++ one_hot(color) ++ (row, col)``
with coordinates normalised to [0, 1]. Three task families are generated:

* ``vqa``: templated questions with single-word answers,
* ``caption``: a deterministic template description of the grid,
* ``frame_vqa``: a stack of frames, one object each, asking what is in frame t.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .autodiff import RngState

PAD, BOS, EOS, SEP = 0, 1, 2, 3
SEP_TOKEN = "</a>"

SHAPES = ("circle", "square", "triangle", "star", "heart", "cross")
COLORS = ("red", "green", "blue", "yellow", "purple", "orange")
NUMBERS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine")
ROW_WORDS = ("top", "middle", "bottom")
COL_WORDS = ("left", "center", "right")
_WORDS = ("what", "color", "is", "the", "shape", "how", "many", "objects", "appears",
          "in", "frame", "a", "and", "at", "there", "of", "image")


class Vocabulary:
    """Word-level vocabulary with fixed special ids."""

    def __init__(self, words: Iterable[str]):
        self.tokens: list[str] = ["<pad>", "<bos>", "<eos>", SEP_TOKEN]
        for w in words:
            if w not in self.tokens:
                self.tokens.append(w)
        self._index = {w: i for i, w in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, word: str) -> bool:
        return word in self._index

    def id(self, word: str) -> int:
        return self._index[word]

    def tokenize(self, text: str) -> list[int]:
        words = text.split()
        missing = [w for w in words if w not in self._index]
        if missing:
            raise KeyError(f"out-of-vocabulary word(s): {', '.join(sorted(set(missing)))}")
        return [self._index[w] for w in words]

    def detokenize(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[int(i)] for i in ids)


def default_vocabulary() -> Vocabulary:
    return Vocabulary(_WORDS + SHAPES + COLORS + NUMBERS + ROW_WORDS + COL_WORDS)


def tokenize(text: str, vocab: Vocabulary | None = None) -> list[int]:
    return (vocab or default_vocabulary()).tokenize(text)


def detokenize(ids: Iterable[int], vocab: Vocabulary | None = None) -> str:
    return (vocab or default_vocabulary()).detokenize(ids)


@dataclass(frozen=True)
class DatasetSpec:
    task: str = "vqa"                  # vqa | caption | frame_vqa
    n_train: int = 5000
    n_val: int = 1000
    rows: int = 3
    cols: int = 3
    n_shapes: int = 4
    n_colors: int = 4
    min_objects: int = 1
    max_objects: int = 4
    n_frames: int = 4
    seed: int = 0

    def validate(self) -> None:
        if self.task not in ("vqa", "caption", "frame_vqa"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.n_train < 1 or self.n_val < 1:
            raise ValueError("n_train and n_val must be >= 1")
        if not (1 <= self.n_shapes <= len(SHAPES) and 1 <= self.n_colors <= len(COLORS)):
            raise ValueError(f"attribute sets limited to {len(SHAPES)} shapes, {len(COLORS)} colors")
        if not 1 <= self.min_objects <= self.max_objects <= self.rows * self.cols:
            raise ValueError("object counts must satisfy 1 <= min <= max <= rows*cols")
        if self.max_objects >= len(NUMBERS):
            raise ValueError("count answers go up to nine")
        if self.rows > 3 or self.cols > 3:
            if self.task == "caption":
                raise ValueError("caption templates support grids up to 3x3")
        if self.task == "frame_vqa" and not 1 <= self.n_frames < len(NUMBERS):
            raise ValueError("n_frames must be between 1 and 9")

    @property
    def patch_feature_dim(self) -> int:
        return self.n_shapes + self.n_colors + 2

    @property
    def n_patches(self) -> int:
        return self.rows * self.cols

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GridWorld:
    rows: int
    cols: int
    cells: dict[int, tuple[int, int]]  # cell index -> (shape, color)

    def __post_init__(self):
        if not self.cells:
            raise ValueError("grid needs at least one object")

    def features(self, n_shapes: int, n_colors: int) -> np.ndarray:
        n = self.rows * self.cols
        feat = np.zeros((n, n_shapes + n_colors + 2))
        for i in range(n):
            r, c = divmod(i, self.cols)
            feat[i, -2] = r / (self.rows - 1) if self.rows > 1 else 0.0
            feat[i, -1] = c / (self.cols - 1) if self.cols > 1 else 0.0
        for i, (s, col) in self.cells.items():
            feat[i, s] = 1.0
            feat[i, n_shapes + col] = 1.0
        return feat

    def caption(self) -> str:
        parts = []
        for i in sorted(self.cells):
            s, c = self.cells[i]
            r, cc = divmod(i, self.cols)
            parts.append(f"a {COLORS[c]} {SHAPES[s]} at {_row_word(r, self.rows)} {_col_word(cc, self.cols)}")
        return " and ".join(parts)


def _row_word(r: int, rows: int) -> str:
    return ROW_WORDS[r if rows == 3 else (0 if r == 0 else 2)]


def _col_word(c: int, cols: int) -> str:
    return COL_WORDS[c if cols == 3 else (0 if c == 0 else 2)]


@dataclass
class SyntheticExample:
    perception: np.ndarray | None      # [n_patches, f]
    question: str
    answer: str
    frames: np.ndarray | None = None   # [F, n_patches, f]
    caption: str | None = None

    def to_json(self) -> str:
        obj = {"perception": None if self.perception is None else self.perception.tolist()}
        if self.frames is not None:
            obj["frames"] = self.frames.tolist()
        obj["question"] = self.question
        obj["answer"] = self.answer
        if self.caption is not None:
            obj["caption"] = self.caption
        return json.dumps(obj, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "SyntheticExample":
        obj = json.loads(line)
        perc = obj.get("perception")
        frames = obj.get("frames")
        return cls(None if perc is None else np.asarray(perc, dtype=np.float64),
                   obj["question"], obj["answer"],
                   None if frames is None else np.asarray(frames, dtype=np.float64),
                   obj.get("caption"))

    @property
    def visual(self) -> np.ndarray:
        return self.frames if self.frames is not None else self.perception


def _random_grid(spec: DatasetSpec, rng: np.random.Generator, n: int | None = None) -> GridWorld:
    if n is None:
        n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    cells = rng.choice(spec.n_patches, size=n, replace=False)
    return GridWorld(spec.rows, spec.cols,
                     {int(c): (int(rng.integers(spec.n_shapes)), int(rng.integers(spec.n_colors)))
                      for c in cells})


def vqa_answer(grid: GridWorld, question: str) -> str | None:
    """Unique answer to a templated question about ``grid``, or None if ambiguous."""
    words = question.split()
    if words and words[-1] == SEP_TOKEN:
        words = words[:-1]
    objs = list(grid.cells.values())
    if words[:4] == ["what", "color", "is", "the"]:
        s = SHAPES.index(words[4])
        hits = [c for (sh, c) in objs if sh == s]
        return COLORS[hits[0]] if len(hits) == 1 else None
    if words[:3] == ["what", "shape", "is"]:
        c = COLORS.index(words[3])
        hits = [sh for (sh, col) in objs if col == c]
        return SHAPES[hits[0]] if len(hits) == 1 else None
    if words == ["how", "many", "objects"]:
        return NUMBERS[len(objs)]
    raise ValueError(f"not a vqa template: {question!r}")


def _vqa_example(spec: DatasetSpec, rng: np.random.Generator) -> SyntheticExample:
    while True:
        grid = _random_grid(spec, rng)
        kind = int(rng.integers(3))
        objs = list(grid.cells.values())
        if kind == 0:
            options = [s for s in range(spec.n_shapes) if sum(o[0] == s for o in objs) == 1]
            if not options:
                continue
            q = f"what color is the {SHAPES[options[int(rng.integers(len(options)))]]}"
        elif kind == 1:
            options = [c for c in range(spec.n_colors) if sum(o[1] == c for o in objs) == 1]
            if not options:
                continue
            q = f"what shape is {COLORS[options[int(rng.integers(len(options)))]]}"
        else:
            q = "how many objects"
        q = f"{q} {SEP_TOKEN}"
        answer = vqa_answer(grid, q)
        return SyntheticExample(grid.features(spec.n_shapes, spec.n_colors), q, answer)


def _caption_example(spec: DatasetSpec, rng: np.random.Generator) -> SyntheticExample:
    grid = _random_grid(spec, rng)
    cap = grid.caption()
    return SyntheticExample(grid.features(spec.n_shapes, spec.n_colors), "", cap, caption=cap)


def _frame_example(spec: DatasetSpec, rng: np.random.Generator) -> SyntheticExample:
    grids = [_random_grid(spec, rng, n=1) for _ in range(spec.n_frames)]
    t = int(rng.integers(spec.n_frames))
    (shape, _), = grids[t].cells.values()
    frames = np.stack([g.features(spec.n_shapes, spec.n_colors) for g in grids])
    return SyntheticExample(None, f"what appears in frame {NUMBERS[t]} {SEP_TOKEN}", SHAPES[shape],
                            frames=frames)


_MAKERS = {"vqa": _vqa_example, "caption": _caption_example, "frame_vqa": _frame_example}


def gen_dataset(spec: DatasetSpec) -> tuple[list[SyntheticExample], list[SyntheticExample]]:
    """Train and validation splits; a pure function of ``spec``.

    The splits come from disjoint generator streams and no serialised example
    appears twice anywhere.
    """
    spec.validate()
    make = _MAKERS[spec.task]
    seen: set[str] = set()
    splits = []
    for stream, n in ((0, spec.n_train), (1, spec.n_val)):
        rng = RngState(spec.seed).generator(stream)
        out: list[SyntheticExample] = []
        misses = 0
        while len(out) < n:
            ex = make(spec, rng)
            key = ex.to_json()
            if key in seen:
                misses += 1
                if misses > 50 * n + 1000:
                    raise ValueError(f"attribute sets too small for {n} distinct {spec.task} examples")
                continue
            seen.add(key)
            out.append(ex)
        splits.append(out)
    return splits[0], splits[1]


def prior_ceiling(examples: list[SyntheticExample]) -> float:
    """Best accuracy reachable from the question text alone (per-question majority answer)."""
    by_q: dict[str, Counter] = defaultdict(Counter)
    for ex in examples:
        by_q[ex.question][ex.answer] += 1
    return sum(max(c.values()) for c in by_q.values()) / len(examples)


def subsample_fraction(train: list, fraction: float, seed: int) -> list:
    """ceil(fraction * n) examples drawn uniformly without replacement."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    k = math.ceil(fraction * len(train))
    idx = RngState(seed).generator().permutation(len(train))[:k]
    return [train[i] for i in idx]


def mask_spans(perception: np.ndarray, span_a: int, span_b: int, rng: np.random.Generator,
               grid: tuple[int, int] | None = None) -> np.ndarray:
    """Zero ``span_a`` consecutive grid rows and ``span_b`` consecutive grid columns.

    Rows stand in for time and columns for frequency. ``grid`` defaults to a
    square layout of the patches.
    """
    perception = np.asarray(perception)
    n = perception.shape[0]
    if grid is None:
        side = int(round(math.sqrt(n)))
        if side * side != n:
            raise ValueError("pass grid=(rows, cols) for non-square patch grids")
        grid = (side, side)
    rows, cols = grid
    if rows * cols != n:
        raise ValueError(f"grid {grid} does not match {n} patches")
    if not (0 <= span_a <= rows and 0 <= span_b <= cols):
        raise ValueError(f"spans ({span_a}, {span_b}) exceed grid extent {grid}")
    out = perception.copy()
    cells = out.reshape(rows, cols, -1)
    if span_a:
        r0 = int(rng.integers(rows - span_a + 1))
        cells[r0:r0 + span_a] = 0.0
    if span_b:
        c0 = int(rng.integers(cols - span_b + 1))
        cells[:, c0:c0 + span_b] = 0.0
    return out


# -- JSONL I/O ------------------------------------------------------------------

def write_jsonl(path: str | Path, examples: Iterable[SyntheticExample]) -> str:
    """Write examples, return sha256 of the bytes written."""
    data = "".join(ex.to_json() + "\n" for ex in examples).encode("utf-8")
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_jsonl(path: str | Path) -> list[SyntheticExample]:
    with open(path, encoding="utf-8") as fh:
        return [SyntheticExample.from_json(line) for line in fh if line.strip()]


def write_dataset(spec: DatasetSpec, out_dir: str | Path) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, val = gen_dataset(spec)
    manifest = {
        "spec": spec.to_dict(),
        "counts": {"train": len(train), "val": len(val)},
        "sha256": {"train": write_jsonl(out / "train.jsonl", train),
                   "val": write_jsonl(out / "val.jsonl", val)},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
