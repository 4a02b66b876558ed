"""Synthetic colored-shape scenes with template phrases and noisy proposals.

Each image holds 1-4 non-overlapping shapes. Every shape gets 1-3 phrases
from single-object templates, and some shape pairs get a relation phrase
annotated on the box enclosing both. Proposals are jittered copies of the
ground-truth boxes plus uniform random boxes, scored with a pseudo-objectness
(best IoU with any ground truth plus small uniform noise).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import Box, InvalidBox, boxes_to_array, iou_matrix
from .labeling import Corpus, ImageRecord, RegionAnnotation
from .textsim import EmptyPhrase, normalize

COLORS: dict[str, tuple[int, int, int]] = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (50, 80, 220),
    "yellow": (230, 220, 50),
    "purple": (150, 60, 190),
    "orange": (240, 140, 30),
}
SHAPES = ("circle", "square", "triangle")

SINGLE_TEMPLATES = ("{color} {shape}", "the {shape} is {color}", "a {color} {shape}")
RELATION_TEMPLATE = "{color} {shape} {relation} {color2} {shape2}"


class CorpusFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 96
    min_shapes: int = 1
    max_shapes: int = 4
    kinds: tuple[str, ...] = SHAPES
    colors: tuple[str, ...] = tuple(COLORS)
    size_range: tuple[int, int] = (16, 32)
    min_center_distance: float = 8.0
    allow_overlap: bool = False
    relation_prob: float = 0.5
    proposal_pool: int = 200
    jitter_copies: int = 3
    jitter: float = 0.2
    held_out_combos: tuple[tuple[str, str], ...] = ()


@dataclass(frozen=True)
class Shape:
    kind: str
    color: str
    cx: float
    cy: float
    size: float

    @property
    def box(self) -> Box:
        h = self.size / 2
        return Box(self.cx - h, self.cy - h, self.cx + h, self.cy + h)


@dataclass
class SyntheticData:
    corpus: Corpus
    pixels: dict[str, np.ndarray]
    scenes: dict[str, list[Shape]] = field(default_factory=dict)


# -- scene sampling ----------------------------------------------------------------

def sample_scene(spec: SceneSpec, rng: np.random.Generator, exclude_held_out: bool = False,
                 max_tries: int = 200) -> list[Shape]:
    n = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    held = set(spec.held_out_combos) if exclude_held_out else set()
    shapes: list[Shape] = []
    for _ in range(max_tries * n):
        if len(shapes) == n:
            break
        kind = spec.kinds[int(rng.integers(len(spec.kinds)))]
        color = spec.colors[int(rng.integers(len(spec.colors)))]
        if (color, kind) in held:
            continue
        size = float(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
        lo, hi = size / 2 + 1, spec.image_size - size / 2 - 1
        cx, cy = float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi))
        cand = Shape(kind, color, cx, cy, size)
        if all(_compatible(cand, s, spec) for s in shapes):
            shapes.append(cand)
    return shapes


def _compatible(a: Shape, b: Shape, spec: SceneSpec) -> bool:
    if np.hypot(a.cx - b.cx, a.cy - b.cy) < spec.min_center_distance:
        return False
    if spec.allow_overlap:
        return True
    ba, bb = a.box, b.box
    # one pixel of clearance between boxes
    return (ba.x2 + 1 <= bb.x1 or bb.x2 + 1 <= ba.x1 or ba.y2 + 1 <= bb.y1 or bb.y2 + 1 <= ba.y1)


def render(shapes: Sequence[Shape], spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    s = spec.image_size
    img = np.full((s, s, 3), 40.0) + rng.normal(0, 6.0, size=(s, s, 3))
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    for sh in shapes:
        h = sh.size / 2
        if sh.kind == "circle":
            mask = (xx - sh.cx) ** 2 + (yy - sh.cy) ** 2 <= h * h
        elif sh.kind == "square":
            mask = (np.abs(xx - sh.cx) <= h) & (np.abs(yy - sh.cy) <= h)
        elif sh.kind == "triangle":
            # apex at top centre, base along the bottom edge of the box
            top, bottom = sh.cy - h, sh.cy + h
            frac = (yy - top) / (bottom - top)
            mask = (yy >= top) & (yy <= bottom) & (np.abs(xx - sh.cx) <= frac * h)
        else:
            raise ValueError(f"unknown shape kind {sh.kind!r}")
        img[mask] = COLORS[sh.color]
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _relation(a: Shape, b: Shape) -> str:
    dx, dy = b.cx - a.cx, b.cy - a.cy
    if abs(dx) >= abs(dy):
        return "left of" if dx > 0 else "right of"
    return "above" if dy > 0 else "below"


def annotate(shapes: Sequence[Shape], spec: SceneSpec,
             rng: np.random.Generator) -> list[tuple[Box, list[str]]]:
    """Region/phrase groups in emission order (one group per distinct box)."""
    groups: list[tuple[Box, list[str]]] = []
    for sh in shapes:
        k = int(rng.integers(1, len(SINGLE_TEMPLATES) + 1))
        picks = rng.choice(len(SINGLE_TEMPLATES), size=k, replace=False)
        phrases = [SINGLE_TEMPLATES[i].format(color=sh.color, shape=sh.kind) for i in sorted(picks)]
        groups.append((sh.box, phrases))
    for i in range(len(shapes)):
        for j in range(i + 1, len(shapes)):
            if rng.uniform() >= spec.relation_prob:
                continue
            a, b = shapes[i], shapes[j]
            ba, bb = a.box, b.box
            union = Box(min(ba.x1, bb.x1), min(ba.y1, bb.y1), max(ba.x2, bb.x2), max(ba.y2, bb.y2))
            groups.append((union, [RELATION_TEMPLATE.format(
                color=a.color, shape=a.kind, relation=_relation(a, b), color2=b.color, shape2=b.kind)]))
    return groups


def _clip_box(x1, y1, x2, y2, size) -> Box | None:
    x1, y1 = max(0.0, x1), max(0.0, y1)
    x2, y2 = min(float(size), x2), min(float(size), y2)
    if x2 - x1 < 2 or y2 - y1 < 2:
        return None
    return Box(x1, y1, x2, y2)


def synthesize_proposals(gt: Sequence[Box], spec: SceneSpec,
                         rng: np.random.Generator) -> tuple[list[Box], list[float]]:
    s = spec.image_size
    props: list[Box] = []
    for g in gt:
        made = 0
        while made < spec.jitter_copies:
            w, h = g.width * rng.uniform(1 - spec.jitter, 1 + spec.jitter), \
                g.height * rng.uniform(1 - spec.jitter, 1 + spec.jitter)
            cx = (g.x1 + g.x2) / 2 + rng.uniform(-spec.jitter, spec.jitter) * g.width
            cy = (g.y1 + g.y2) / 2 + rng.uniform(-spec.jitter, spec.jitter) * g.height
            b = _clip_box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, s)
            if b is not None:
                props.append(b)
                made += 1
    props = props[:spec.proposal_pool]
    while len(props) < spec.proposal_pool:
        w, h = rng.uniform(8, 0.6 * s), rng.uniform(8, 0.6 * s)
        x1, y1 = rng.uniform(0, s - w), rng.uniform(0, s - h)
        props.append(Box(x1, y1, x1 + w, y1 + h))
    best = iou_matrix(boxes_to_array(props), boxes_to_array(gt)).max(axis=1) if gt else np.zeros(len(props))
    obj = np.clip(best + rng.uniform(0, 0.05, size=len(props)), 0, 1)
    return props, [float(v) for v in obj]


def generate_corpus(spec: SceneSpec, n_images: int, seed: int, exclude_held_out: bool = False,
                    prefix: str = "img") -> SyntheticData:
    """Deterministic synthetic corpus; one derived RNG stream per image."""
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    children = np.random.SeedSequence(seed).spawn(n_images)
    records, pixels, scenes = [], {}, {}
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        shapes = sample_scene(spec, rng, exclude_held_out)
        img = render(shapes, spec, rng)
        groups = annotate(shapes, spec, rng)
        anns = tuple(RegionAnnotation(box, normalize(p)) for box, ps in groups for p in ps)
        gt = list(dict.fromkeys(a.region for a in anns))
        props, obj = synthesize_proposals(gt, spec, rng)
        image_id = f"{prefix}_{i:05d}"
        records.append(ImageRecord(image_id, spec.image_size, spec.image_size, anns, tuple(props),
                                   tuple(obj), pixel_ref=f"images/{image_id}.ppm"))
        pixels[image_id] = img
        scenes[image_id] = shapes
    return SyntheticData(Corpus(tuple(records)), pixels, scenes)


def train_val_test_split(corpus: Corpus, fractions: Sequence[float],
                         seed: int) -> tuple[Corpus, Corpus, Corpus]:
    """Image-level split: floor(f0*n) train, floor(f1*n) val, remainder test."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    n = len(corpus)
    n_train = int(np.floor(fractions[0] * n + 1e-9))
    n_val = int(np.floor(fractions[1] * n + 1e-9))
    perm = np.random.default_rng(seed).permutation(n)
    parts = [np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]),
             np.sort(perm[n_train + n_val:])]
    return tuple(Corpus(tuple(corpus.images[i] for i in p), corpus.stuff_phrases)
                 for p in parts)  # type: ignore[return-value]


# -- storage ----------------------------------------------------------------------------

def write_ppm(path: str | os.PathLike, pixels: np.ndarray) -> None:
    h, w, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    if tokens[0] != "P6" or tokens[3] != "255":
        raise CorpusFormatError(f"{path}: only 8-bit binary PPM (P6) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    raw = data[pos + 1:pos + 1 + w * h * 3]
    if len(raw) != w * h * 3:
        raise CorpusFormatError(f"{path}: truncated pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).copy()


def record_to_json(rec: ImageRecord) -> dict:
    groups: dict[Box, list[str]] = {}
    for a in rec.annotations:
        groups.setdefault(a.region, []).append(a.phrase.raw or a.phrase.text)
    return {
        "image_id": rec.image_id,
        "width": rec.width,
        "height": rec.height,
        "file": rec.pixel_ref,
        "regions": [{"box": b.to_list(), "phrases": ps} for b, ps in groups.items()],
        "proposals": [{"box": b.to_list(), "objectness": o}
                      for b, o in zip(rec.proposals, rec.objectness or [0.0] * len(rec.proposals))],
    }


def export_corpus(out_dir: str | os.PathLike, corpus: Corpus,
                  pixels: dict[str, np.ndarray] | None = None,
                  name: str = "annotations.jsonl") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    with open(path, "w", encoding="utf-8") as fh:
        for rec in corpus.images:
            fh.write(json.dumps(record_to_json(rec)) + "\n")
    if pixels is not None:
        for rec in corpus.images:
            target = out / rec.pixel_ref
            target.parent.mkdir(parents=True, exist_ok=True)
            write_ppm(target, pixels[rec.image_id])
    return path


def _fail(lineno: int, msg: str):
    raise CorpusFormatError(f"line {lineno}: {msg}")


def _parse_box(raw, lineno: int) -> Box:
    if not isinstance(raw, list) or len(raw) != 4 or \
            not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw):
        _fail(lineno, f"box must be four numbers, got {raw!r}")
    try:
        return Box.from_list(raw)
    except InvalidBox as exc:
        _fail(lineno, str(exc))


def parse_record(obj, lineno: int) -> ImageRecord:
    if not isinstance(obj, dict):
        _fail(lineno, "record must be a JSON object")
    for key, typ in (("image_id", str), ("width", int), ("height", int), ("file", str),
                     ("regions", list)):
        if key not in obj or not isinstance(obj[key], typ) or isinstance(obj[key], bool):
            _fail(lineno, f"missing or mistyped field {key!r}")
    anns = []
    for reg in obj["regions"]:
        if not isinstance(reg, dict) or "box" not in reg or not isinstance(reg.get("phrases"), list):
            _fail(lineno, "region needs 'box' and 'phrases'")
        box = _parse_box(reg["box"], lineno)
        for p in reg["phrases"]:
            if not isinstance(p, str):
                _fail(lineno, f"phrase must be a string, got {p!r}")
            try:
                anns.append(RegionAnnotation(box, normalize(p)))
            except EmptyPhrase as exc:
                _fail(lineno, str(exc))
    props, obj_scores = [], []
    for prop in obj.get("proposals", []):
        if not isinstance(prop, dict) or "box" not in prop:
            _fail(lineno, "proposal needs 'box'")
        props.append(_parse_box(prop["box"], lineno))
        o = prop.get("objectness", 0.0)
        if not isinstance(o, (int, float)) or isinstance(o, bool):
            _fail(lineno, f"objectness must be a number, got {o!r}")
        obj_scores.append(float(o))
    try:
        return ImageRecord(obj["image_id"], obj["width"], obj["height"], tuple(anns), tuple(props),
                           tuple(obj_scores), pixel_ref=obj["file"])
    except ValueError as exc:
        raise CorpusFormatError(f"line {lineno}: image {obj['image_id']}: {exc}") from exc


def ingest(annotation_file: str | os.PathLike, image_dir: str | os.PathLike | None = None) -> Corpus:
    """Parse and validate an annotation JSONL file.

    When ``image_dir`` is given, every referenced image must exist there.
    """
    records = []
    with open(annotation_file, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            rec = parse_record(obj, lineno)
            if image_dir is not None and not (Path(image_dir) / rec.pixel_ref).is_file():
                raise CorpusFormatError(f"line {lineno}: image {rec.image_id}: missing file {rec.pixel_ref}")
            records.append(rec)
    if not records:
        raise CorpusFormatError(f"{annotation_file}: no records")
    try:
        return Corpus(tuple(records))
    except ValueError as exc:
        raise CorpusFormatError(str(exc)) from exc


class ImageStore:
    """Lazy pixel access keyed by image id."""

    def __init__(self, root: str | os.PathLike | None = None,
                 preloaded: dict[str, np.ndarray] | None = None, corpus: Corpus | None = None):
        self.root = Path(root) if root is not None else None
        self._cache: dict[str, np.ndarray] = dict(preloaded or {})
        self._refs = {r.image_id: r.pixel_ref for r in corpus.images} if corpus else {}

    def add_corpus(self, corpus: Corpus) -> None:
        self._refs.update({r.image_id: r.pixel_ref for r in corpus.images})

    def __getitem__(self, image_id: str) -> np.ndarray:
        img = self._cache.get(image_id)
        if img is None:
            if self.root is None or image_id not in self._refs:
                raise KeyError(image_id)
            img = read_ppm(self.root / self._refs[image_id])
            self._cache[image_id] = img
        return img


def phrase_absent_from(train: Corpus, test: Corpus) -> set:
    """Phrases annotated in ``test`` that never occur in ``train``."""
    return set(test.freq) - set(train.freq)


def combos_in(shapes: Iterable[Shape]) -> set[tuple[str, str]]:
    return {(s.color, s.kind) for s in shapes}
