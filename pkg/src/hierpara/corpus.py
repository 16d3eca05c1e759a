"""Tokenization, vocabularies, dataset files and the synthetic benchmark."""

from __future__ import annotations

import json
import logging
import re
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

START, END, UNK, PAD = "<start>", "<end>", "<unk>", "<pad>"
RESERVED = (START, END, UNK, PAD)
START_ID, END_ID, UNK_ID, PAD_ID = 0, 1, 2, 3

FEATURE_MAGIC = b"RGNF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIII")

SPLITS = ("train", "val", "test")

_TOKEN_RE = re.compile(r"\w+(?:'\w+)*|[^\w\s]")
_TERMINATORS = frozenset(".!?")

# A tokenized paragraph: sentences of tokens (strings) or of ids (ints).
Paragraph = list[list[str]]


class DatasetError(ValueError):
    """A manifest or feature file is malformed or inconsistent."""


# ---------------------------------------------------------------------------
# Text


def tokenize(text: str) -> Paragraph:
    """Lowercase, split punctuation off words and cut sentences at . ! ?"""
    sentences: Paragraph = []
    current: list[str] = []
    for tok in _TOKEN_RE.findall(text.lower()):
        current.append(tok)
        if tok in _TERMINATORS:
            sentences.append(current)
            current = []
    if current:
        sentences.append(current)
    if not sentences:
        raise ValueError(f"no tokens in {text!r}")
    return sentences


def detokenize(paragraph: Sequence[Sequence[str]]) -> str:
    return " ".join(" ".join(s) for s in paragraph)


def flatten(paragraph: Sequence[Sequence]) -> list:
    return [tok for sent in paragraph for tok in sent]


class Vocabulary:
    """Dense token <-> id map with START, END, UNK, PAD at ids 0..3."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for t in tokens:
            if t not in self.stoi:
                self.stoi[t] = len(self.itos)
                self.itos.append(t)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def __repr__(self) -> str:
        return f"Vocabulary(size={len(self)})"

    def encode(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def decode(self, idx: int) -> str:
        if idx == PAD_ID:
            raise ValueError("PAD has no surface form")
        return self.itos[idx]

    def encode_paragraph(self, paragraph: Sequence[Sequence[str]]) -> list[list[int]]:
        return [[self.encode(t) for t in sent] for sent in paragraph]

    def decode_paragraph(self, paragraph: Sequence[Sequence[int]]) -> Paragraph:
        return [[self.itos[i] for i in sent if i != PAD_ID] for sent in paragraph]

    def with_tokens(self, extra: Iterable[str]) -> "Vocabulary":
        return Vocabulary(self.itos[len(RESERVED) :] + list(extra))

    def to_list(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, itos: Sequence[str]) -> "Vocabulary":
        if tuple(itos[: len(RESERVED)]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        if len(set(itos)) != len(itos):
            raise ValueError("vocabulary has duplicate tokens")
        return cls(itos[len(RESERVED) :])


def build_vocab(corpus: Iterable[Sequence[Sequence[str]]], min_count: int = 2) -> Vocabulary:
    """Tokens seen at least ``min_count`` times, most frequent first, ties by string."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts: Counter[str] = Counter()
    n = 0
    for para in corpus:
        n += 1
        for sent in para:
            counts.update(sent)
    if n == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in RESERVED),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


# ---------------------------------------------------------------------------
# Feature files


def write_features(path: str | Path, features: np.ndarray) -> None:
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[0] < 1 or features.shape[1] < 1:
        raise DatasetError(f"feature matrix must be M x D with M, D >= 1, got {features.shape}")
    m, d = features.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, m, d))
        f.write(features.astype("<f4").tobytes(order="C"))


def read_feature_header(path: str | Path) -> tuple[int, int]:
    with open(path, "rb") as f:
        raw = f.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise DatasetError(f"{path}: truncated header")
    magic, version, m, d = _HEADER.unpack(raw)
    if magic != FEATURE_MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise DatasetError(f"{path}: unsupported version {version}")
    return m, d


def read_features(path: str | Path) -> np.ndarray:
    m, d = read_feature_header(path)
    if m < 1 or d < 1:
        raise DatasetError(f"{path}: empty feature set (M={m}, D={d})")
    raw = Path(path).read_bytes()[_HEADER.size :]
    if len(raw) != 4 * m * d:
        raise DatasetError(f"{path}: header says {m}x{d} floats, payload has {len(raw) // 4}")
    return np.frombuffer(raw, dtype="<f4").reshape(m, d).astype(np.float64)


# ---------------------------------------------------------------------------
# Datasets


@dataclass
class DatasetRecord:
    id: str
    split: str
    features: np.ndarray
    text: str
    paragraph: Paragraph
    feature_path: str | None = None
    extra: dict = field(default_factory=dict)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, DatasetRecord)
            and (self.id, self.split, self.text, self.paragraph) == (other.id, other.split, other.text, other.paragraph)
            and np.array_equal(self.features, other.features)
        )


def load_dataset(manifest: str | Path, expect_dim: int | None = None) -> list[DatasetRecord]:
    """Read a JSON-lines manifest and the feature files it points to."""
    manifest = Path(manifest)
    if not manifest.exists():
        raise DatasetError(f"manifest {manifest} does not exist")
    records = []
    with open(manifest, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{manifest}:{lineno}: malformed JSON ({exc.msg})") from None
            for key in ("id", "split", "features", "paragraph"):
                if key not in obj:
                    raise DatasetError(f"{manifest}:{lineno}: missing field {key!r}")
            if obj["split"] not in SPLITS:
                raise DatasetError(f"{manifest}:{lineno}: unknown split {obj['split']!r}")
            fpath = manifest.parent / obj["features"]
            if not fpath.exists():
                raise DatasetError(f"{manifest}:{lineno}: missing feature file {fpath}")
            feats = read_features(fpath)
            if expect_dim is not None and feats.shape[1] != expect_dim:
                raise DatasetError(f"{manifest}:{lineno}: feature dim {feats.shape[1]} != {expect_dim}")
            extra = {k: v for k, v in obj.items() if k not in ("id", "split", "features", "paragraph")}
            records.append(
                DatasetRecord(obj["id"], obj["split"], feats, obj["paragraph"], tokenize(obj["paragraph"]),
                              obj["features"], extra)
            )
    return records


def write_dataset(out_dir: str | Path, records: Sequence[DatasetRecord], manifest_name: str = "manifest.jsonl") -> Path:
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    path = out_dir / manifest_name
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            rel = rec.feature_path or f"features/{rec.id}.rgnf"
            write_features(out_dir / rel, rec.features)
            obj = {"id": rec.id, "split": rec.split, "features": rel, "paragraph": rec.text}
            obj.update(rec.extra)
            f.write(json.dumps(obj, sort_keys=False) + "\n")
    return path


def split_records(records: Iterable[DatasetRecord], split: str) -> list[DatasetRecord]:
    return [r for r in records if r.split == split]


# ---------------------------------------------------------------------------
# Synthetic benchmark

DEFAULT_NAMES = ("dog", "car", "tree", "man", "ball", "house", "bird", "boat")
DEFAULT_TEMPLATES = (
    "there is a {name} .",
    "a small {name} is on the left .",
    "the {name} looks very old and red .",
)


@dataclass
class SynthConfig:
    """Generator settings.

    Each object type has a prototype vector; each template of a type has a
    variant vector added to it, so the wording of a sentence is recoverable
    from the region.  Objects are described in type order.
    """

    n_types: int = 6
    dim: int = 64
    noise: float = 0.1
    variant_scale: float = 0.7
    distractors: tuple[int, int] = (0, 2)
    distractor_scale: float = 0.5
    objects: tuple[int, int] = (1, 4)
    names: tuple[str, ...] = DEFAULT_NAMES
    templates: tuple[str, ...] = DEFAULT_TEMPLATES
    type_templates: dict[str, list[str]] | None = None
    n_train: int = 200
    n_val: int = 50
    n_test: int = 50
    seed: int = 0

    def validate(self, s_max: int | None = None) -> None:
        def bad(field_name, why):
            raise ValueError(f"SynthConfig.{field_name}: {why}")

        if self.n_types < 2:
            bad("n_types", "need at least 2 object types")
        if self.n_types > len(self.names):
            bad("names", f"{self.n_types} types but only {len(self.names)} names")
        if self.dim < 1:
            bad("dim", "must be >= 1")
        if self.noise < 0:
            bad("noise", "must be >= 0")
        lo, hi = self.objects
        if not 1 <= lo <= hi:
            bad("objects", "need 1 <= min <= max")
        if hi > self.n_types:
            bad("objects", "more objects than distinct types")
        if s_max is not None and hi > s_max:
            bad("objects", f"max object count {hi} exceeds S_MAX {s_max}")
        dlo, dhi = self.distractors
        if not 0 <= dlo <= dhi:
            bad("distractors", "need 0 <= min <= max")
        for name in self.names[: self.n_types]:
            temps = self.templates_for(name)
            if not temps:
                bad("templates", f"no templates for {name!r}")
            for t in temps:
                if "{name}" not in t:
                    bad("templates", f"template {t!r} lacks a {{name}} slot")
        for n in ("n_train", "n_val", "n_test"):
            if getattr(self, n) < 0:
                bad(n, "must be >= 0")

    def templates_for(self, name: str) -> list[str]:
        if self.type_templates and name in self.type_templates:
            return list(self.type_templates[name])
        return list(self.templates)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["distractors"] = list(self.distractors)
        d["objects"] = list(self.objects)
        d["names"] = list(self.names)
        d["templates"] = list(self.templates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"SynthConfig: unknown field(s) {sorted(unknown)}")
        d = dict(d)
        for k in ("distractors", "objects", "names", "templates"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class SynthWorld:
    """The fixed prototypes behind one generator configuration."""

    cfg: SynthConfig
    prototypes: np.ndarray  # (types, D)
    variants: np.ndarray  # (types, max templates, D)

    @classmethod
    def create(cls, cfg: SynthConfig) -> "SynthWorld":
        rng = np.random.default_rng([cfg.seed, 0])
        protos = rng.normal(size=(cfg.n_types, cfg.dim))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
        protos *= np.sqrt(cfg.dim) * 0.5
        n_temp = max(len(cfg.templates_for(n)) for n in cfg.names[: cfg.n_types])
        variants = rng.normal(size=(cfg.n_types, n_temp, cfg.dim)) * cfg.variant_scale
        return cls(cfg, protos, variants)

    def object_region(self, rng: np.random.Generator, type_id: int, variant: int) -> np.ndarray:
        base = self.prototypes[type_id] + self.variants[type_id, variant]
        if self.cfg.noise > 0:
            base = base + rng.normal(scale=self.cfg.noise, size=self.cfg.dim)
        return base

    def sentence(self, type_id: int, variant: int) -> str:
        name = self.cfg.names[type_id]
        return self.cfg.templates_for(name)[variant].format(name=name)


def _synth_image(world: SynthWorld, rng: np.random.Generator) -> tuple[np.ndarray, str, dict]:
    cfg = world.cfg
    k = int(rng.integers(cfg.objects[0], cfg.objects[1] + 1))
    types = sorted(rng.choice(cfg.n_types, size=k, replace=False).tolist())
    variants = [int(rng.integers(len(cfg.templates_for(cfg.names[t])))) for t in types]
    regions = [world.object_region(rng, t, v) for t, v in zip(types, variants)]
    # detector order: objects in random order, distractors last
    order = rng.permutation(k).tolist()
    regions = [regions[i] for i in order]
    n_dis = int(rng.integers(cfg.distractors[0], cfg.distractors[1] + 1))
    for _ in range(n_dis):
        regions.append(rng.normal(scale=cfg.distractor_scale, size=cfg.dim))
    text = " ".join(world.sentence(t, v) for t, v in zip(types, variants))
    meta = {
        "objects": [cfg.names[t] for t in types],
        "object_rows": [order.index(i) for i in range(k)],
    }
    return np.stack(regions), text, meta


def synth_generate(cfg: SynthConfig, s_max: int | None = None) -> list[DatasetRecord]:
    """Synthetic images: one noisy prototype region per object plus distractors.

    Record ``extra`` carries the object names in paragraph order and the
    feature row holding each object's region.
    """
    cfg.validate(s_max)
    world = SynthWorld.create(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    records = []
    for split, count in (("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test)):
        for i in range(count):
            feats, text, meta = _synth_image(world, rng)
            rid = f"{split}-{i:05d}"
            records.append(DatasetRecord(rid, split, feats.astype(np.float32).astype(np.float64), text,
                                         tokenize(text), f"features/{rid}.rgnf", meta))
    return records


def synth_captions(cfg: SynthConfig, n: int, seed: int | None = None) -> list[tuple[np.ndarray, Paragraph]]:
    """(single region vector, one-sentence caption) pairs from the same world."""
    cfg.validate()
    world = SynthWorld.create(cfg)
    rng = np.random.default_rng([cfg.seed if seed is None else seed, 2])
    out = []
    for _ in range(n):
        t = int(rng.integers(cfg.n_types))
        v = int(rng.integers(len(cfg.templates_for(cfg.names[t]))))
        region = world.object_region(rng, t, v).astype(np.float32).astype(np.float64)
        out.append((region[None, :], tokenize(world.sentence(t, v))))
    return out
