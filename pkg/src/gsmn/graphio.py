"""Corpus records, the line-delimited dataset format, and a synthetic scene generator.

A corpus directory holds three UTF-8 files, one JSON object per line::

    texts.jsonl   {"id", "tokens", "dep_edges", "pos_tags"?}
    images.jsonl  {"id", "width", "height", "regions": [{"bbox": [x0, y0, x1, y1], "feature": [...]}]}
    pairs.jsonl   {"image_id", "text_id", "split"}

Region features and dependency edges come from upstream detectors and parsers;
this module only validates and loads them.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractError, GraphError, ParseError, ReferentialIntegrityError

TEXTS_FILE = "texts.jsonl"
IMAGES_FILE = "images.jsonl"
PAIRS_FILE = "pairs.jsonl"
SPLITS = ("train", "val", "test")

PAD = "<pad>"
UNK = "<unk>"


@dataclass(frozen=True)
class TextRecord:
    id: str
    tokens: tuple[str, ...]
    dep_edges: tuple[tuple[int, int], ...] = ()
    pos_tags: tuple[str, ...] | None = None

    def __post_init__(self):
        m = len(self.tokens)
        if m == 0:
            raise ContractError(f"text {self.id!r} has no tokens")
        seen = set()
        edges = []
        for i, j in self.dep_edges:
            i, j = int(i), int(j)
            if not (0 <= i < m and 0 <= j < m):
                raise GraphError(f"text {self.id!r}: edge ({i}, {j}) out of range for {m} tokens")
            if i == j:
                raise ValueError(f"text {self.id!r}: self-loop ({i}, {j}) in dep_edges")
            key = (min(i, j), max(i, j))
            if key not in seen:
                seen.add(key)
                edges.append(key)
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "dep_edges", tuple(edges))
        if self.pos_tags is not None:
            if len(self.pos_tags) != m:
                raise ValueError(f"text {self.id!r}: {len(self.pos_tags)} pos_tags for {m} tokens")
            object.__setattr__(self, "pos_tags", tuple(self.pos_tags))

    def to_json(self) -> dict:
        out = {"id": self.id, "tokens": list(self.tokens), "dep_edges": [list(e) for e in self.dep_edges]}
        if self.pos_tags is not None:
            out["pos_tags"] = list(self.pos_tags)
        return out


@dataclass(frozen=True)
class Region:
    bbox: tuple[float, float, float, float]
    feature: np.ndarray = field(compare=False)

    @property
    def center(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.bbox
        return (0.5 * (x0 + x1), 0.5 * (y0 + y1))


@dataclass(frozen=True)
class ImageRecord:
    id: str
    width: float
    height: float
    regions: tuple[Region, ...]

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"image {self.id!r}: width and height must be positive")
        if not self.regions:
            raise ValueError(f"image {self.id!r} has no regions")
        dims = {r.feature.shape for r in self.regions}
        if len(dims) != 1 or len(next(iter(dims))) != 1:
            raise ValueError(f"image {self.id!r}: region features must share one vector dimension")
        for r in self.regions:
            x0, y0, x1, y1 = r.bbox
            if not (0 <= x0 <= x1 <= self.width and 0 <= y0 <= y1 <= self.height):
                raise ValueError(f"image {self.id!r}: bbox {r.bbox} outside {self.width}x{self.height}")
        object.__setattr__(self, "regions", tuple(self.regions))

    @property
    def feature_dim(self) -> int:
        return self.regions[0].feature.shape[0]

    @property
    def features(self) -> np.ndarray:
        return np.stack([r.feature for r in self.regions])

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "width": self.width,
            "height": self.height,
            "regions": [{"bbox": list(r.bbox), "feature": r.feature.tolist()} for r in self.regions],
        }


@dataclass(frozen=True)
class PairSample:
    image_id: str
    text_id: str
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")

    def to_json(self) -> dict:
        return {"image_id": self.image_id, "text_id": self.text_id, "split": self.split}


class Vocabulary:
    """Token to index map; index 0 is padding and index 1 is the unknown token."""

    def __init__(self, tokens=()):
        self.itos: list[str] = [PAD, UNK]
        self.stoi: dict[str, int] = {PAD: 0, UNK: 1}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def lookup(self, token: str) -> int:
        return self.stoi.get(token, 1)

    def encode(self, tokens) -> list[int]:
        return [self.lookup(t) for t in tokens]

    @classmethod
    def from_texts(cls, texts) -> "Vocabulary":
        # sorted so indices depend only on the token set, not on file order
        return cls(sorted({tok for t in texts for tok in t.tokens}))

    @classmethod
    def from_list(cls, itos: list[str]) -> "Vocabulary":
        if itos[:2] != [PAD, UNK]:
            raise ValueError("vocabulary list must start with the padding and unknown tokens")
        return cls(itos[2:])


@dataclass
class Corpus:
    texts: dict[str, TextRecord]
    images: dict[str, ImageRecord]
    pairs: list[PairSample]
    vocab: Vocabulary

    def split_pairs(self, split: str) -> list[PairSample]:
        return [p for p in self.pairs if p.split == split]

    def split_records(self, split: str) -> tuple[list[ImageRecord], list[TextRecord]]:
        """Images (first-appearance order) and texts of one split."""
        pairs = self.split_pairs(split)
        image_ids = list(dict.fromkeys(p.image_id for p in pairs))
        text_ids = list(dict.fromkeys(p.text_id for p in pairs))
        return [self.images[i] for i in image_ids], [self.texts[t] for t in text_ids]


def _read_jsonl(path: Path):
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield line_no, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, line_no, f"invalid JSON: {exc.msg}") from None


def _parse_text(obj) -> TextRecord:
    return TextRecord(
        id=str(obj["id"]),
        tokens=tuple(str(t) for t in obj["tokens"]),
        dep_edges=tuple((int(e[0]), int(e[1])) for e in obj.get("dep_edges", [])),
        pos_tags=tuple(obj["pos_tags"]) if obj.get("pos_tags") is not None else None,
    )


def _parse_image(obj) -> ImageRecord:
    regions = []
    for r in obj["regions"]:
        bbox = tuple(float(v) for v in r["bbox"])
        if len(bbox) != 4:
            raise ValueError("bbox needs 4 numbers")
        regions.append(Region(bbox=bbox, feature=np.asarray(r["feature"], dtype=np.float64)))
    return ImageRecord(id=str(obj["id"]), width=float(obj["width"]), height=float(obj["height"]),
                       regions=tuple(regions))


def _parse_pair(obj) -> PairSample:
    return PairSample(image_id=str(obj["image_id"]), text_id=str(obj["text_id"]), split=str(obj["split"]))


def _load_file(path: Path, parse):
    out = {}
    for line_no, obj in _read_jsonl(path):
        try:
            rec = parse(obj)
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise ParseError(path, line_no, f"{type(exc).__name__}: {exc}") from None
        key = getattr(rec, "id", None)
        if key is not None:
            if key in out:
                raise ParseError(path, line_no, f"duplicate id {key!r}")
            out[key] = rec
        else:
            out[len(out)] = rec
    return out


def load_corpus(path) -> Corpus:
    """Load and validate a corpus directory; the vocabulary covers train-split tokens only."""
    root = Path(path)
    texts = _load_file(root / TEXTS_FILE, _parse_text)
    images = _load_file(root / IMAGES_FILE, _parse_image)
    pairs = list(_load_file(root / PAIRS_FILE, _parse_pair).values())

    dims = {img.feature_dim for img in images.values()}
    if len(dims) > 1:
        raise ParseError(root / IMAGES_FILE, 0, f"region feature dims disagree across images: {sorted(dims)}")
    for k, p in enumerate(pairs, 1):
        if p.image_id not in images:
            raise ReferentialIntegrityError(f"pair {k} references missing image id {p.image_id!r}")
        if p.text_id not in texts:
            raise ReferentialIntegrityError(f"pair {k} references missing text id {p.text_id!r}")

    train_ids = {p.text_id for p in pairs if p.split == "train"}
    vocab = Vocabulary.from_texts(texts[t] for t in sorted(train_ids))
    return Corpus(texts=texts, images=images, pairs=pairs, vocab=vocab)


def _dump(obj) -> str:
    # json uses repr() for floats, which round-trips doubles exactly
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def write_corpus(path, texts, images, pairs) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for name, records in ((TEXTS_FILE, texts), (IMAGES_FILE, images), (PAIRS_FILE, pairs)):
        with open(root / name, "w", encoding="utf-8", newline="\n") as fh:
            for rec in records:
                fh.write(_dump(rec.to_json()) + "\n")
    return root


def corpus_hash(path) -> str:
    h = hashlib.sha256()
    for name in (TEXTS_FILE, IMAGES_FILE, PAIRS_FILE):
        h.update(name.encode())
        h.update((Path(path) / name).read_bytes())
    return h.hexdigest()


# -- synthetic scenes ---------------------------------------------------------

OBJECT_WORDS = ["dog", "cat", "man", "woman", "car", "tree", "ball", "horse"]
ATTRIBUTE_WORDS = ["red", "blue", "green", "small", "large", "wooden"]
DETERMINERS = ["a", "the", "one"]
# relation word chosen from where the second object sits relative to the first
RELATIONS = {"right": ["beside", "near"], "left": ["beside", "near"], "up": ["under", "below"], "down": ["above", "over"]}
CAPTIONS_PER_IMAGE = 5
IMAGE_W, IMAGE_H = 640.0, 480.0


def _prototypes(rng: np.random.Generator, n_classes: int, n_attrs: int, dim: int):
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    basis = q.T
    classes = basis[:n_classes]
    attrs = basis[n_classes:n_classes + n_attrs]
    return classes, attrs


def _check_prototypes(classes: np.ndarray, limit: float = 0.3) -> float:
    unit = classes / np.linalg.norm(classes, axis=1, keepdims=True)
    worst = 0.0
    for i in range(len(unit)):
        for j in range(i + 1, len(unit)):
            worst = max(worst, abs(float(unit[i] @ unit[j])))
    if worst >= limit:
        raise ConfigurationError(f"class prototypes not separated: max pairwise cosine {worst:.3f} >= {limit}")
    return worst


def _place(rng, prev_box, direction, size):
    w, h = size
    if prev_box is None:
        cx = rng.uniform(w, IMAGE_W - w)
        cy = rng.uniform(h, IMAGE_H - h)
    else:
        px, py = 0.5 * (prev_box[0] + prev_box[2]), 0.5 * (prev_box[1] + prev_box[3])
        step = {"right": (1, 0), "left": (-1, 0), "up": (0, -1), "down": (0, 1)}[direction]
        gap = rng.uniform(0.9, 1.2)
        cx = px + step[0] * gap * w + rng.normal(0, 5)
        cy = py + step[1] * gap * h + rng.normal(0, 5)
    cx = float(np.clip(cx, w / 2, IMAGE_W - w / 2))
    cy = float(np.clip(cy, h / 2, IMAGE_H - h / 2))
    return (round(cx - w / 2, 3), round(cy - h / 2, 3), round(cx + w / 2, 3), round(cy + h / 2, 3))


def _caption(rng, objects, relations):
    """Tokens, undirected dependency edges and role tags for one caption.

    Every object contributes "<det> <attribute> <object>", consecutive objects are
    joined by their relation word, and the relation attaches to both objects.
    """
    order = list(range(len(objects)))
    reverse = len(objects) > 1 and rng.random() < 0.5
    if reverse:
        order = order[::-1]
    tokens, tags, edges = [], [], []
    obj_pos = {}
    for rank, k in enumerate(order):
        cls, attr = objects[k]
        if rank > 0:
            a, b = (order[rank - 1], k)
            rel = relations[(a, b)]
            words = RELATIONS[rel]
            tokens.append(words[int(rng.integers(len(words)))])
            tags.append("relation")
            rel_idx = len(tokens) - 1
        det = DETERMINERS[int(rng.integers(len(DETERMINERS)))]
        tokens += [det, ATTRIBUTE_WORDS[attr], OBJECT_WORDS[cls]]
        tags += ["attribute", "attribute", "object"]
        o = len(tokens) - 1
        obj_pos[k] = o
        edges += [(o - 2, o), (o - 1, o)]
        if rank > 0:
            edges += [(obj_pos[order[rank - 1]], rel_idx), (rel_idx, o)]
    return tokens, edges, tags


_OPPOSITE = {"right": "left", "left": "right", "up": "down", "down": "up"}


def generate_synthetic(out, seed: int = 7, n_images: int = 100, feature_dim: int = 64,
                       noise: float = 0.05, splits=(0.7, 0.1, 0.2)) -> Path:
    """Write a seeded corpus of structured scenes to ``out``.

    Each image holds 2 to 4 objects; an object is one region whose feature is its
    class prototype plus an attribute offset plus Gaussian noise, and consecutive
    objects are placed next to each other. Every image gets five captions.
    Images are cut into train/val/test by the ``splits`` fractions, test last.
    """
    if n_images < 2:
        raise ConfigurationError("n_images must be at least 2")
    if feature_dim < 8:
        raise ConfigurationError("feature_dim must be at least 8")
    rng = np.random.default_rng(seed)
    n_classes = min(len(OBJECT_WORDS), feature_dim // 2)
    n_attrs = min(len(ATTRIBUTE_WORDS), feature_dim - n_classes)
    classes, attrs = _prototypes(rng, n_classes, n_attrs, feature_dim)
    _check_prototypes(classes)
    attr_scale = 0.6

    n_test = max(1, int(round(n_images * splits[2])))
    n_val = int(round(n_images * splits[1]))
    n_train = n_images - n_test - n_val
    if n_train < 1:
        raise ConfigurationError("split fractions leave no training images")

    images, texts, pairs = [], [], []
    for idx in range(n_images):
        split = "train" if idx < n_train else ("val" if idx < n_train + n_val else "test")
        n_obj = int(rng.integers(2, 5))
        cls_ids = rng.choice(n_classes, size=n_obj, replace=n_obj > n_classes)
        objects = [(int(c), int(rng.integers(n_attrs))) for c in cls_ids]
        boxes, relations = [], {}
        for k in range(n_obj):
            size = (rng.uniform(60, 140), rng.uniform(60, 140))
            direction = ["right", "left", "up", "down"][int(rng.integers(4))]
            boxes.append(_place(rng, boxes[-1] if boxes else None, direction, size))
            if k > 0:
                relations[(k - 1, k)] = direction
                relations[(k, k - 1)] = _OPPOSITE[direction]
        regions = []
        for (cls, attr), box in zip(objects, boxes):
            feat = classes[cls] + attr_scale * attrs[attr] + noise * rng.standard_normal(feature_dim)
            regions.append(Region(bbox=box, feature=feat))
        image_id = f"img{idx:05d}"
        images.append(ImageRecord(id=image_id, width=IMAGE_W, height=IMAGE_H, regions=tuple(regions)))
        for c in range(CAPTIONS_PER_IMAGE):
            tokens, edges, tags = _caption(rng, objects, relations)
            text_id = f"{image_id}_{c}"
            texts.append(TextRecord(id=text_id, tokens=tuple(tokens), dep_edges=tuple(edges), pos_tags=tuple(tags)))
            pairs.append(PairSample(image_id=image_id, text_id=text_id, split=split))
    return write_corpus(out, texts, images, pairs)
