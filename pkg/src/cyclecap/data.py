"""Synthetic shape corpus, caption preprocessing and batching.

Dataset directory layout (all text UTF-8)::

    manifest.json     {"version", "image_size", "vocab_file", "seed", "n",
                       "records": [{"id", "image", "split", "attributes", "captions"}]}
    vocab.txt         one token per line; line index (0-based) is the token id
    images/NNNNNN.png RGB, image_size × image_size

``attributes`` holds ``shape``, ``fill``, ``outline``, ``size`` (names from
:data:`SHAPES`, :data:`COLORS`, :data:`SIZES`) and ``background`` (RGB
list).  Every record has exactly 10 raw captions; ``split`` is ``train`` or
``test``.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, ImageDraw

MANIFEST_VERSION = 1
CAPTIONS_PER_IMAGE = 10
MIN_WORDS = 5
DEFAULT_T = 20

EOS, BOS, UNK = "<eos>", "<bos>", "<unk>"
EOS_ID, BOS_ID, UNK_ID = 0, 1, 2
SPECIALS = (EOS, BOS, UNK)

SHAPES = ("circle", "square", "triangle", "star", "cross")
COLORS = {
    "red": (220, 30, 30),
    "orange": (245, 140, 20),
    "yellow": (240, 220, 30),
    "green": (40, 170, 60),
    "blue": (30, 80, 220),
    "purple": (140, 50, 180),
    "white": (250, 250, 250),
    "black": (15, 15, 15),
}
COLOR_NAMES = tuple(COLORS)
SIZES = ("small", "medium", "large")
SIZE_RADIUS = {"small": 0.20, "medium": 0.29, "large": 0.40}
SIZE_WORDS = {
    "small": ("small", "little", "tiny"),
    "medium": ("medium", "mid-sized", "moderate"),
    "large": ("large", "big", "huge"),
}
BACKGROUNDS = ((150, 150, 150), (112, 122, 132), (176, 166, 146), (96, 108, 96), (132, 120, 140))

# fill colour is always the first colour word; the last two frames are
# deliberately shorter than MIN_WORDS
TEMPLATES = (
    "a {S} {F} {X} with a {O} outline.",
    "This is a {S} {F} {X}, outlined in {O}.",
    "the image shows a {F} {X} that is {S} with a {O} border",
    "A {F} {X} of {S} size with {O} edges.",
    "there is a {S} {X} colored {F} with a thin {O} outline",
    "a {S} {X} filled with {F}; and outlined in {O}.",
    "a {F} colored {X} which is {S} and has a {O} edge",
    "In the picture, a {S} {F} {X} is bordered by {O}.",
    "the {X} is {F} and {S} with an outline of {O}",
    "one {S} {F} {X} with {O} lines around it.",
    "we can see a {F} {X} that has a {O} outline and is {S}",
    "a {S} shape that is a {F} {X} with {O} trim",
    "a {S} {F} {X}.",
    "{F} {X}",
)

_PUNCT = re.compile(r"[.,;]")


class DataError(ValueError):
    """Malformed or missing dataset content."""


# ---------------------------------------------------------------- vocabulary

class Vocab:
    """Token/id bijection; ids 0, 1, 2 are ``<eos>``, ``<bos>``, ``<unk>``."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:3]) != SPECIALS:
            raise DataError(f"vocab must start with {SPECIALS}")
        if len(set(tokens)) != len(tokens):
            raise DataError("vocab tokens must be unique")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def build(cls, captions: Sequence[str]) -> "Vocab":
        words = set()
        for c in captions:
            words.update(tokenize(c))
        words -= set(SPECIALS)
        return cls(list(SPECIALS) + sorted(words))

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        if token in SPECIALS:
            return UNK_ID
        return self.index.get(token, UNK_ID)

    def decode(self, ids: Sequence[int]) -> list[str]:
        """Tokens up to (not including) the first EOS."""
        out = []
        for i in ids:
            if int(i) == EOS_ID:
                break
            out.append(self.tokens[int(i)])
        return out

    def write(self, path: Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: Path) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        return cls(text.rstrip("\n").split("\n"))


def tokenize(raw: str) -> list[str]:
    return _PUNCT.sub("", raw.lower()).split()


def preprocess_caption(raw: str, vocab: Vocab, T: int = DEFAULT_T) -> np.ndarray:
    """Lowercase, drop ``. , ;``, split on whitespace, cut at T, pad with EOS.

    Literal special-token strings in the input map to UNK so the EOS suffix
    invariant always holds.
    """
    words = tokenize(raw)
    if not words:
        raise DataError(f"caption is empty after preprocessing: {raw!r}")
    ids = np.full(T, EOS_ID, dtype=np.int64)
    words = words[:T]
    ids[:len(words)] = [vocab.id(w) for w in words]
    return ids


def detokenize(ids: Sequence[int], vocab: Vocab) -> str:
    return " ".join(vocab.decode(ids))


def caption_length(ids: np.ndarray) -> int:
    """Number of tokens before the first EOS."""
    ids = np.asarray(ids)
    hits = np.flatnonzero(ids == EOS_ID)
    return int(hits[0]) if hits.size else int(ids.size)


def is_valid_caption(ids: np.ndarray, T: int) -> bool:
    ids = np.asarray(ids)
    if ids.shape != (T,):
        return False
    n = caption_length(ids)
    return bool(np.all(ids[n:] == EOS_ID))


# ---------------------------------------------------------------- synthesis

@dataclass
class SynthConfig:
    image_size: int = 64
    test_fraction: float = 0.1
    supersample: int = 4


def sample_attributes(n: int, seed: int) -> list[dict]:
    """Per-sample attribute draws (uniform marginals), from per-sample seeds."""
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        shape = SHAPES[rng.integers(len(SHAPES))]
        fill = COLOR_NAMES[rng.integers(len(COLOR_NAMES))]
        others = [c for c in COLOR_NAMES if c != fill]
        outline = others[rng.integers(len(others))]
        size = SIZES[rng.integers(len(SIZES))]
        background = BACKGROUNDS[rng.integers(len(BACKGROUNDS))]
        out.append({"shape": shape, "fill": fill, "outline": outline, "size": size,
                    "background": list(background),
                    "_jitter": rng.uniform(-1.0, 1.0, size=2).tolist(),
                    "_caption_seed": int(rng.integers(2**31))})
    return out


def _fix_articles(text: str) -> str:
    return re.sub(r"\b([Aa]) (?=[aeiou])", lambda m: m.group(1) + "n ", text)


def make_captions(attrs: dict, rng: np.random.Generator) -> list[str]:
    """Ten paraphrases from distinct frames; background is never mentioned."""
    frames = rng.choice(len(TEMPLATES), size=CAPTIONS_PER_IMAGE, replace=False)
    captions = []
    for f in frames:
        size_word = SIZE_WORDS[attrs["size"]][rng.integers(3)]
        text = TEMPLATES[f].format(S=size_word, F=attrs["fill"], O=attrs["outline"], X=attrs["shape"])
        captions.append(_fix_articles(text))
    return captions


def _shape_polygon(shape: str, cx: float, cy: float, r: float) -> list[tuple[float, float]]:
    if shape == "square":
        s = r * 0.85
        return [(cx - s, cy - s), (cx + s, cy - s), (cx + s, cy + s), (cx - s, cy + s)]
    if shape == "triangle":
        return [(cx + r * np.cos(a), cy + r * np.sin(a))
                for a in (-np.pi / 2, np.pi / 6, 5 * np.pi / 6)]
    if shape == "star":
        pts = []
        for k in range(10):
            rad = r if k % 2 == 0 else r * 0.45
            a = -np.pi / 2 + k * np.pi / 5
            pts.append((cx + rad * np.cos(a), cy + rad * np.sin(a)))
        return pts
    if shape == "cross":
        w = r * 0.38
        return [(cx - w, cy - r), (cx + w, cy - r), (cx + w, cy - w), (cx + r, cy - w),
                (cx + r, cy + w), (cx + w, cy + w), (cx + w, cy + r), (cx - w, cy + r),
                (cx - w, cy + w), (cx - r, cy + w), (cx - r, cy - w), (cx - w, cy - w)]
    raise ValueError(shape)


def render(attrs: dict, size: int, supersample: int = 4) -> np.ndarray:
    """Draw one shape on a plain background; returns uint8 (size, size, 3)."""
    big = size * supersample
    img = Image.new("RGB", (big, big), tuple(attrs["background"]))
    draw = ImageDraw.Draw(img)
    r = SIZE_RADIUS[attrs["size"]] * big
    slack = big / 2 - r - 1
    jx, jy = attrs.get("_jitter", (0.0, 0.0))
    cx, cy = big / 2 + jx * slack * 0.8, big / 2 + jy * slack * 0.8
    fill, outline = COLORS[attrs["fill"]], COLORS[attrs["outline"]]
    width = max(supersample, int(round(big * 0.05)))
    if attrs["shape"] == "circle":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=fill, outline=outline, width=width)
    else:
        pts = _shape_polygon(attrs["shape"], cx, cy, r)
        draw.polygon(pts, fill=fill)
        draw.line(pts + [pts[0]], fill=outline, width=width, joint="curve")
    if supersample > 1:
        img = img.resize((size, size), Image.Resampling.BOX)
    return np.asarray(img, dtype=np.uint8)


def synth_generate(n: int, seed: int, out_dir, config: SynthConfig | None = None) -> "DatasetManifest":
    """Write a synthetic corpus of ``n`` images to ``out_dir`` and return its manifest."""
    if n < 10:
        raise DataError("synth_generate needs n >= 10")
    config = config or SynthConfig()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    attrs = sample_attributes(n, seed)
    split_rng = np.random.default_rng([seed, 0x5B17])
    order = split_rng.permutation(n)
    n_test = max(1, int(round(config.test_fraction * n)))
    test_ids = set(order[:n_test].tolist())
    records = []
    for i, a in enumerate(attrs):
        captions = make_captions(a, np.random.default_rng(a["_caption_seed"]))
        pixels = render(a, config.image_size, config.supersample)
        name = f"images/{i:06d}.png"
        Image.fromarray(pixels).save(out / name, format="PNG", optimize=False)
        public = {k: v for k, v in a.items() if not k.startswith("_")}
        records.append({"id": f"{i:06d}", "image": name, "split": "test" if i in test_ids else "train",
                        "attributes": public, "captions": captions})
    vocab = Vocab.build([c for r in records for c in r["captions"]])
    vocab.write(out / "vocab.txt")
    manifest = DatasetManifest(version=MANIFEST_VERSION, image_size=config.image_size,
                               vocab_file="vocab.txt", seed=seed, records=records)
    manifest.write(out / "manifest.json")
    return manifest


# ---------------------------------------------------------------- manifest & dataset

@dataclass
class DatasetManifest:
    version: int
    image_size: int
    vocab_file: str
    seed: int
    records: list = field(default_factory=list)

    def to_json(self) -> str:
        body = {"version": self.version, "image_size": self.image_size, "vocab_file": self.vocab_file,
                "seed": self.seed, "n": len(self.records), "records": self.records}
        return json.dumps(body, indent=1, sort_keys=True, ensure_ascii=False) + "\n"

    def write(self, path) -> None:
        path = Path(path)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(self.to_json(), encoding="utf-8")
        os.replace(tmp, path)

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"manifest not found: {path}")
        try:
            body = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"manifest is not valid JSON: {exc}") from None
        if body.get("version") != MANIFEST_VERSION:
            raise DataError(f"unsupported manifest version {body.get('version')}")
        for rec in body["records"]:
            if len(rec["captions"]) != CAPTIONS_PER_IMAGE:
                raise DataError(f"record {rec['id']} has {len(rec['captions'])} captions, expected 10")
            if rec["split"] not in ("train", "test"):
                raise DataError(f"record {rec['id']} has unknown split {rec['split']!r}")
        return cls(version=body["version"], image_size=body["image_size"], vocab_file=body["vocab_file"],
                   seed=body["seed"], records=body["records"])

    def __eq__(self, other) -> bool:
        return isinstance(other, DatasetManifest) and self.to_json() == other.to_json()


def attribute_labels(records: Sequence[dict]) -> np.ndarray:
    """(N, 3) int labels: shape, fill colour, size."""
    return np.array([[SHAPES.index(r["attributes"]["shape"]), COLOR_NAMES.index(r["attributes"]["fill"]),
                      SIZES.index(r["attributes"]["size"])] for r in records], dtype=np.int64)


def load_png(path) -> np.ndarray:
    """PNG -> float32 (3, H, W) in [-1, 1]."""
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return (arr.transpose(2, 0, 1) / 127.5 - 1.0).astype(np.float32)


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    """(3, H, W) in [-1, 1] -> uint8 (H, W, 3)."""
    arr = np.clip((np.asarray(pixels, dtype=np.float64) + 1.0) * 127.5, 0, 255)
    return np.round(arr).astype(np.uint8).transpose(1, 2, 0)


def save_png(pixels: np.ndarray, path) -> None:
    Image.fromarray(to_uint8(pixels)).save(path, format="PNG")


class CaptionDataset:
    """A loaded corpus: pixel arrays, preprocessed captions and labels."""

    def __init__(self, manifest: DatasetManifest, vocab: Vocab, images: np.ndarray, T: int = DEFAULT_T,
                 root: Path | None = None):
        self.manifest, self.vocab, self.T, self.root = manifest, vocab, T, root
        self.records = manifest.records
        self.images = images
        self.labels = attribute_labels(self.records)
        self.captions = np.stack([[preprocess_caption(c, vocab, T) for c in r["captions"]]
                                  for r in self.records])
        lengths = (self.captions != EOS_ID).sum(axis=-1)
        self.qualifies = lengths >= MIN_WORDS
        self.split_index = {s: np.array([i for i, r in enumerate(self.records) if r["split"] == s], dtype=np.int64)
                            for s in ("train", "test")}

    @classmethod
    def load(cls, root, T: int = DEFAULT_T) -> "CaptionDataset":
        root = Path(root)
        manifest = DatasetManifest.read(root / "manifest.json")
        vocab_path = root / manifest.vocab_file
        if not vocab_path.is_file():
            raise DataError(f"vocab file not found: {vocab_path}")
        vocab = Vocab.read(vocab_path)
        images = []
        for r in manifest.records:
            p = root / r["image"]
            if not p.is_file():
                raise DataError(f"image file not found: {p}")
            images.append(load_png(p))
        return cls(manifest, vocab, np.stack(images), T=T, root=root)

    def __len__(self) -> int:
        return len(self.records)

    def indices(self, split: str | None) -> np.ndarray:
        if split is None:
            return np.arange(len(self.records))
        return self.split_index[split]

    def pick_caption(self, i: int, rng: np.random.Generator) -> np.ndarray:
        return pick_caption(self.records[i], rng, captions=self.captions[i], qualifies=self.qualifies[i])

    def color_of(self, i: int) -> str:
        return self.records[i]["attributes"]["fill"]


def pick_caption(record: dict, rng: np.random.Generator, vocab: Vocab | None = None, T: int = DEFAULT_T,
                 captions: np.ndarray | None = None, qualifies: np.ndarray | None = None) -> np.ndarray:
    """Uniform choice among the record's captions with at least 5 words."""
    if captions is None:
        if vocab is None:
            raise ValueError("pick_caption needs a vocab when captions are not preprocessed")
        captions = np.stack([preprocess_caption(c, vocab, T) for c in record["captions"]])
    if qualifies is None:
        qualifies = (captions != EOS_ID).sum(axis=-1) >= MIN_WORDS
    choices = np.flatnonzero(qualifies)
    if choices.size == 0:
        raise DataError(f"record {record.get('id')} has no caption with >= {MIN_WORDS} words")
    return captions[choices[rng.integers(choices.size)]]


# ---------------------------------------------------------------- batching

@dataclass
class PairingMode:
    """``paired`` or ``unpaired``; unpaired captions come from ``permutation``.

    ``permutation[j]`` is the position (within the split) whose record
    supplies captions for the j-th image of the split.
    """

    kind: str = "paired"
    seed: int | None = None
    permutation: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("paired", "unpaired"):
            raise ValueError(f"unknown pairing mode {self.kind!r}")

    @classmethod
    def unpaired(cls, seed: int, n: int) -> "PairingMode":
        perm = np.random.default_rng([seed, 0xA1B]).permutation(n)
        return cls("unpaired", seed, perm)


@dataclass
class Batch:
    indices: np.ndarray
    images: np.ndarray
    captions: np.ndarray
    caption_sources: np.ndarray


def batches(dataset: CaptionDataset, split: str, mode: PairingMode, batch_size: int,
            rng: np.random.Generator) -> Iterator[Batch]:
    """One epoch over ``split`` in a fresh random order (last batch may be short)."""
    idx = dataset.indices(split)
    if batch_size > len(idx):
        raise DataError(f"batch size {batch_size} exceeds {split} split size {len(idx)}")
    if mode.kind == "unpaired":
        if mode.permutation is None or len(mode.permutation) != len(idx):
            raise DataError("unpaired mode needs a permutation over the split")
        source = idx[np.asarray(mode.permutation)]
    else:
        source = idx
    order = rng.permutation(len(idx))
    for start in range(0, len(idx), batch_size):
        pos = order[start:start + batch_size]
        items, src = idx[pos], source[pos]
        caps = np.stack([dataset.pick_caption(int(s), rng) for s in src])
        yield Batch(items, dataset.images[items], caps, src)
