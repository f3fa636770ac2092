"""Puzzle records, manifest IO, the by-root split, and the synthetic generator."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InputError, ManifestError

LETTERS = "ABCDE"
TRAIN_FRACTION = 0.7624
VAL_FRACTION = 0.0297


@dataclass
class PuzzleInstance:
    """One image/question/options record.

    ``image_source`` is an (H, W, 3) uint8 array, a path, or a zero-argument
    callable producing the array; the latter two are resolved on access.
    """

    root_id: int
    instance_id: int
    question: str
    options: tuple[str, ...]
    answer: int
    image_source: object = field(repr=False, default=None)

    def __post_init__(self):
        self.options = tuple(self.options)
        if len(self.options) != 5:
            raise InputError(f"puzzle {self.key} has {len(self.options)} options, expected 5")
        if not 0 <= self.answer < 5:
            raise InputError(f"puzzle {self.key} answer index {self.answer} outside 0..4")

    @property
    def key(self) -> tuple[int, int]:
        return (self.root_id, self.instance_id)

    @property
    def image(self) -> np.ndarray:
        src = self.image_source
        if isinstance(src, np.ndarray):
            img = src
        elif callable(src):
            img = src()
        elif isinstance(src, (str, Path)):
            img = read_image(src)
        else:
            raise InputError(f"puzzle {self.key} has no image")
        if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
            raise InputError(f"puzzle {self.key} image has shape {img.shape}")
        return img


# ---------------------------------------------------------------------------
# image files


def write_ppm(path, pixels: np.ndarray) -> None:
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    h, w, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos)
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise InputError(f"{path}: truncated PPM header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace byte before the raster
    if fields[0] != b"P6":
        raise InputError(f"{path}: only binary P6 pixmaps are supported")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise InputError(f"{path}: unsupported maxval {maxval}")
    body = raw[pos : pos + w * h * 3]
    if len(body) != w * h * 3:
        raise InputError(f"{path}: raster is truncated")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image file not found: {path}")
    if path.suffix.lower() in (".ppm", ".pnm"):
        return read_ppm(path)
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - depends on the environment
        raise InputError(f"{path}: reading non-PPM images needs Pillow") from exc
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


# ---------------------------------------------------------------------------
# manifest


MANIFEST_NAME = "manifest.jsonl"
_FIELDS = ("root_id", "instance_id", "image_path", "question") + tuple(
    f"option_{c}" for c in "abcde"
) + ("answer_letter",)


def _image_relpath(inst: PuzzleInstance) -> str:
    return f"images/r{inst.root_id:03d}_{inst.instance_id:05d}.ppm"


def write_manifest(instances: Iterable[PuzzleInstance], out_dir, write_images: bool = True) -> Path:
    """Write ``manifest.jsonl`` (one JSON object per line, fixed key order) plus images."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    path = out_dir / MANIFEST_NAME
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            rel = _image_relpath(inst)
            if write_images:
                write_ppm(out_dir / rel, inst.image)
            values = (inst.root_id, inst.instance_id, rel, inst.question, *inst.options, LETTERS[inst.answer])
            fh.write(json.dumps(dict(zip(_FIELDS, values)), ensure_ascii=False) + "\n")
    return path


def _parse_record(obj, path, lineno, base: Path, lazy: bool) -> PuzzleInstance:
    if not isinstance(obj, dict):
        raise ManifestError(path, lineno, "record is not an object")
    options = []
    for c in "abcde":
        key = f"option_{c}"
        if key not in obj:
            n = sum(f"option_{x}" in obj for x in "abcde")
            raise ManifestError(path, lineno, f"record has {n} options, expected 5 (missing {key})")
        options.append(str(obj[key]))
    extra = [k for k in obj if k.startswith("option_") and k not in _FIELDS]
    if extra:
        raise ManifestError(path, lineno, f"unexpected option fields {extra}")
    for key in ("root_id", "instance_id", "image_path", "question", "answer_letter"):
        if key not in obj:
            raise ManifestError(path, lineno, f"missing field {key!r}")
    try:
        root_id, instance_id = int(obj["root_id"]), int(obj["instance_id"])
    except (TypeError, ValueError):
        raise ManifestError(path, lineno, "root_id/instance_id must be integers") from None
    letter = str(obj["answer_letter"]).strip().upper()
    if len(letter) != 1 or letter not in LETTERS:
        raise ManifestError(path, lineno, f"answer_letter {obj['answer_letter']!r} not in A..E")
    question = str(obj["question"])
    if not question.strip():
        raise ManifestError(path, lineno, "empty question")
    image_path = base / str(obj["image_path"])
    source: object = image_path
    if not lazy:
        source = read_image(image_path)
    return PuzzleInstance(root_id, instance_id, question, tuple(options), LETTERS.index(letter), source)


def load_manifest(path, lazy: bool = False) -> list[PuzzleInstance]:
    """Parse a manifest; a directory argument means ``<dir>/manifest.jsonl``.

    With ``lazy=False`` every image is read immediately.  Instances come back
    ordered by (root_id, instance_id).
    """
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    base = path.parent
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(path, lineno, f"invalid JSON: {exc.msg}") from None
            out.append(_parse_record(obj, path, lineno, base, lazy))
    out.sort(key=lambda inst: inst.key)
    return out


# ---------------------------------------------------------------------------
# puzzle split


@dataclass(frozen=True)
class SplitSpec:
    train_roots: frozenset
    val_roots: frozenset
    test_roots: frozenset

    def __post_init__(self):
        if (self.train_roots & self.val_roots) or (self.train_roots & self.test_roots) or (
            self.val_roots & self.test_roots
        ):
            raise InputError("split root sets overlap")

    @property
    def counts(self) -> tuple[int, int, int]:
        return len(self.train_roots), len(self.val_roots), len(self.test_roots)

    def which(self, root_id) -> str:
        if root_id in self.train_roots:
            return "train"
        if root_id in self.val_roots:
            return "val"
        if root_id in self.test_roots:
            return "test"
        raise KeyError(root_id)

    def select(self, instances: Sequence[PuzzleInstance], name: str) -> list[PuzzleInstance]:
        roots = {"train": self.train_roots, "val": self.val_roots, "test": self.test_roots}[name]
        return [inst for inst in instances if inst.root_id in roots]

    def partition(self, instances: Sequence[PuzzleInstance]):
        return tuple(self.select(instances, name) for name in ("train", "val", "test"))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_counts(n: int) -> tuple[int, int, int]:
    """Root counts per split: 0.7624 n and 0.0297 n rounded, test takes the rest.

    An empty val or test split borrows one root from train.
    """
    if n < 3:
        raise InputError(f"puzzle split needs at least 3 roots, got {n}")
    n_train = _round_half_up(TRAIN_FRACTION * n)
    n_val = _round_half_up(VAL_FRACTION * n)
    n_test = n - n_train - n_val
    if n_val < 1:
        n_val, n_train = 1, n_train - 1
    if n_test < 1:
        n_test, n_train = 1, n_train - 1
    return n_train, n_val, n_test


def puzzle_split(root_ids: Iterable[int], seed: int = 0) -> SplitSpec:
    roots = sorted(set(root_ids))
    n_train, n_val, _ = split_counts(len(roots))
    order = np.random.default_rng(seed).permutation(len(roots))
    shuffled = [roots[i] for i in order]
    return SplitSpec(
        frozenset(shuffled[:n_train]),
        frozenset(shuffled[n_train : n_train + n_val]),
        frozenset(shuffled[n_train + n_val :]),
    )


# ---------------------------------------------------------------------------
# synthetic counting puzzles

IMAGE_SIDE = 32
GRID = 4
CELL = IMAGE_SIDE // GRID
GLYPHS = ("square", "ring", "cross", "diamond")
# Every template splits into the same number of tokens, so the option block
# sits at the same text positions for every root.
QUESTION_TEMPLATES = (
    "How many {noun}s are in the figure?",
    "Count all the {noun}s in this picture.",
    "What is the number of {noun}s here?",
    "How many {noun}s does the image show?",
    "Tell me how many {noun}s are drawn.",
)
# a count in the middle three of five consecutive options is at most 3 from each
MAX_DISTRACTOR_GAP = 3


def _glyph_mask(glyph: str) -> np.ndarray:
    yy, xx = np.mgrid[0:CELL, 0:CELL]
    inner = (yy >= 1) & (yy <= CELL - 2) & (xx >= 1) & (xx <= CELL - 2)
    c = (CELL - 1) / 2.0
    if glyph == "square":
        return inner
    if glyph == "ring":
        edge = (yy == 1) | (yy == CELL - 2) | (xx == 1) | (xx == CELL - 2)
        return inner & edge
    if glyph == "cross":
        return inner & ((np.abs(yy - c) < 1) | (np.abs(xx - c) < 1))
    if glyph == "diamond":
        return (np.abs(yy - c) + np.abs(xx - c)) <= c - 0.5
    raise ValueError(glyph)


_GLYPH_MASKS = {g: _glyph_mask(g) for g in GLYPHS}


@dataclass(frozen=True)
class SynthLayout:
    """Everything needed to redraw a synthetic puzzle image."""

    glyph: str
    cells: tuple[int, ...]
    foreground: tuple[int, int, int]
    background: tuple[int, int, int]

    def render(self) -> np.ndarray:
        img = np.empty((IMAGE_SIDE, IMAGE_SIDE, 3), dtype=np.uint8)
        img[...] = self.background
        mask = _GLYPH_MASKS[self.glyph]
        for cell in self.cells:
            r, c = divmod(cell, GRID)
            block = img[r * CELL : (r + 1) * CELL, c * CELL : (c + 1) * CELL]
            block[mask] = self.foreground
        return img

    __call__ = render


def root_family(root_id: int) -> tuple[str, str]:
    """(glyph, question template) defining a synthetic root puzzle."""
    return GLYPHS[root_id % len(GLYPHS)], QUESTION_TEMPLATES[root_id % len(QUESTION_TEMPLATES)]


def _draw_count_and_options(rng: np.random.Generator) -> tuple[int, tuple[str, ...], int]:
    """Sample (count, option texts, gold index).

    The options are five consecutive integers and the count is one of the
    middle three, so every distractor lies within ``MAX_DISTRACTOR_GAP`` of
    it.  The window is drawn first and the count second, which makes the
    three middle values equally likely given the options: the option text
    alone can pick the answer at most one time in three.
    """
    low = int(rng.integers(0, 7))  # window low..low+4; its middle values span 1..9
    count = low + 1 + int(rng.integers(3))
    distractors = [v for v in range(low, low + 5) if v != count]
    rng.shuffle(distractors)
    answer = int(rng.integers(5))
    distractors.insert(answer, count)
    return count, tuple(str(v) for v in distractors), answer


def synth_puzzles(seed: int, n_roots: int, n_per_root: int) -> list[PuzzleInstance]:
    """Counting puzzles: k glyphs (1..9) on a 4x4 grid; pick the option equal to k.

    A root fixes the glyph shape and the question wording; colours, cell
    placement, distractors and the gold position vary per instance.  Images
    are drawn lazily from a stored :class:`SynthLayout`.
    """
    if n_roots < 3:
        raise InputError(f"need at least 3 roots, got {n_roots}")
    rng = np.random.default_rng(seed)
    out = []
    for root in range(n_roots):
        glyph, template = root_family(root)
        question = template.format(noun=glyph)
        for idx in range(n_per_root):
            count, options, answer = _draw_count_and_options(rng)
            cells = tuple(int(c) for c in np.sort(rng.choice(GRID * GRID, size=count, replace=False)))
            fg = tuple(int(v) for v in rng.integers(150, 256, size=3))
            bg = tuple(int(v) for v in rng.integers(0, 60, size=3))
            layout = SynthLayout(glyph, cells, fg, bg)
            out.append(PuzzleInstance(root, idx, question, options, answer, layout))
    return out
