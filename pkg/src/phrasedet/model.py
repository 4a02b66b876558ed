"""Character-CNN text pathway, RoI-pooling visual pathway and the dynamic head.

The head turns a phrase feature into a linear classifier over region
features: ``w = A_w^T phi_txt``, ``b = a_b^T phi_txt`` and the score of a
region is ``w^T phi_rgn + b``.
"""
from __future__ import annotations

import string
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .geometry import InvalidBox
from .neuralcore import ParameterStore, Tensor, ops
from .textsim import NormalizedPhrase

SYMBOLS = string.punctuation + "¢£€§°"
ALPHABET: tuple[str, ...] = tuple(string.ascii_lowercase + string.digits + " " + SYMBOLS)
assert len(ALPHABET) == 74 and len(set(ALPHABET)) == 74


@dataclass(frozen=True)
class Alphabet:
    chars: tuple[str, ...] = ALPHABET

    def __post_init__(self):
        if len(set(self.chars)) != len(self.chars) or " " not in self.chars:
            raise ValueError("alphabet must hold distinct characters including space")

    def __len__(self) -> int:
        return len(self.chars)

    @property
    def index(self) -> dict[str, int]:
        return _index(self.chars)


@lru_cache(maxsize=8)
def _index(chars: tuple[str, ...]) -> dict[str, int]:
    return {c: i for i, c in enumerate(chars)}


DEFAULT_ALPHABET = Alphabet()


def render_phrase(t: NormalizedPhrase | str, input_length: int = 256) -> str:
    """Lowercase phrase text, repeated with single spaces and cut to length."""
    text = t.text if isinstance(t, NormalizedPhrase) else t.lower()
    if not text:
        raise ValueError("cannot encode an empty phrase")
    if len(text) >= input_length:
        return text[:input_length]
    reps = -(-(input_length + 1) // (len(text) + 1))
    return " ".join([text] * reps)[:input_length]


def encode_phrase(t: NormalizedPhrase | str, alphabet: Alphabet = DEFAULT_ALPHABET,
                  input_length: int = 256) -> np.ndarray:
    """One-hot (len(alphabet), input_length) encoding; unknown characters map to space."""
    text = render_phrase(t, input_length)
    idx = alphabet.index
    space = idx[" "]
    rows = np.fromiter((idx.get(ch, space) for ch in text), dtype=np.intp, count=len(text))
    out = np.zeros((len(alphabet), input_length))
    out[rows, np.arange(input_length)] = 1.0
    return out


# -- configs ---------------------------------------------------------------------------

ConvSpec = tuple[int, int, int]  # kernel, out channels, pool window (0 = none)


@dataclass(frozen=True)
class TextPathwayConfig:
    input_length: int = 256
    conv: tuple[ConvSpec, ...] = ((7, 256, 2), (7, 256, 0), (3, 256, 0),
                                  (3, 256, 2), (3, 512, 0), (3, 512, 2))
    dense: tuple[int, ...] = (2048, 2048)
    leakage: float = 0.1
    alphabet_size: int = 74

    @classmethod
    def desk(cls) -> "TextPathwayConfig":
        """Same depth and sequence lengths with narrow layers."""
        return cls(conv=((7, 32, 2), (7, 32, 0), (3, 32, 0), (3, 32, 2), (3, 64, 0), (3, 64, 2)),
                   dense=(256, 256))

    def lengths(self) -> list[int]:
        out, n = [], self.input_length
        for _, _, pool in self.conv:
            if pool:
                if n % pool:
                    raise ValueError(f"sequence length {n} not divisible by pool {pool}")
                n //= pool
            out.append(n)
        return out

    @property
    def out_dim(self) -> int:
        return self.dense[-1] if self.dense else self.conv[-1][1] * self.lengths()[-1]


@dataclass(frozen=True)
class VisualPathwayConfig:
    in_channels: int = 3
    channels: tuple[int, ...] = (64, 64, 64)
    kernel: int = 3
    roi_bins: int = 4
    dense: tuple[int, ...] = (256, 256)
    leakage: float = 0.1

    @property
    def stride(self) -> int:
        return 2 ** len(self.channels)

    @property
    def feature_channels(self) -> int:
        return self.channels[-1] if self.channels else self.in_channels

    @property
    def out_dim(self) -> int:
        return self.dense[-1] if self.dense else self.feature_channels * self.roi_bins ** 2


@dataclass(frozen=True)
class ModelConfig:
    text: TextPathwayConfig = field(default_factory=TextPathwayConfig)
    visual: VisualPathwayConfig = field(default_factory=VisualPathwayConfig)
    head_bias: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        t = dict(d["text"])
        t["conv"] = tuple(tuple(c) for c in t["conv"])
        t["dense"] = tuple(t["dense"])
        v = dict(d["visual"])
        v["channels"] = tuple(v["channels"])
        v["dense"] = tuple(v["dense"])
        return cls(TextPathwayConfig(**t), VisualPathwayConfig(**v), d.get("head_bias", True))


# -- pathways ------------------------------------------------------------------------------

class TextPathway:
    def __init__(self, cfg: TextPathwayConfig, store: ParameterStore, rng: np.random.Generator):
        self.cfg = cfg
        self.convs = []
        c_in = cfg.alphabet_size
        for i, (k, c_out, _) in enumerate(cfg.conv):
            w = store.weight(f"txt.conv{i}.w", (c_out, c_in, k), c_in * k, c_out * k, rng)
            b = store.bias(f"txt.conv{i}.b", c_out)
            self.convs.append((w, b))
            c_in = c_out
        d_in = c_in * cfg.lengths()[-1]
        self.fcs = []
        for i, d_out in enumerate(cfg.dense):
            w = store.weight(f"txt.fc{i}.w", (d_out, d_in), d_in, d_out, rng)
            b = store.bias(f"txt.fc{i}.b", d_out)
            self.fcs.append((w, b))
            d_in = d_out

    def forward(self, encoded, trace: list | None = None) -> Tensor:
        """(N, 74, L) or (74, L) one-hot input to (N, d_txt) or (d_txt,) features."""
        x = encoded if isinstance(encoded, Tensor) else Tensor(encoded)
        single = x.ndim == 2
        if single:
            x = x.reshape(1, *x.shape)
        if x.shape[1:] != (self.cfg.alphabet_size, self.cfg.input_length):
            raise ops.ShapeError(f"text input shape {x.shape[1:]} != "
                                 f"{(self.cfg.alphabet_size, self.cfg.input_length)}")
        for (w, b), (_, _, pool) in zip(self.convs, self.cfg.conv):
            x = ops.lrelu(ops.conv1d(x, w, b), self.cfg.leakage)
            if pool:
                x = ops.maxpool1d(x, pool)
            if trace is not None:
                trace.append(x.shape)
        x = x.reshape(x.shape[0], -1)
        for w, b in self.fcs:
            x = ops.lrelu(ops.dense(x, w, b), self.cfg.leakage)
            if trace is not None:
                trace.append(x.shape)
        return x.reshape(-1) if single else x


def image_to_input(pixels: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 pixels to a zero-centred (3, H, W) float array."""
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) pixels, got {arr.shape}")
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0 - 0.5


class VisualPathway:
    def __init__(self, cfg: VisualPathwayConfig, store: ParameterStore, rng: np.random.Generator):
        self.cfg = cfg
        k = cfg.kernel
        self.convs = []
        c_in = cfg.in_channels
        for i, c_out in enumerate(cfg.channels):
            w = store.weight(f"rgn.conv{i}.w", (c_out, c_in, k, k), c_in * k * k, c_out * k * k,
                             rng, group="visual_pre_roi")
            b = store.bias(f"rgn.conv{i}.b", c_out, group="visual_pre_roi")
            self.convs.append((w, b))
            c_in = c_out
        d_in = c_in * cfg.roi_bins ** 2
        self.fcs = []
        for i, d_out in enumerate(cfg.dense):
            w = store.weight(f"rgn.fc{i}.w", (d_out, d_in), d_in, d_out, rng, group="visual_post_roi")
            b = store.bias(f"rgn.fc{i}.b", d_out, group="visual_post_roi")
            self.fcs.append((w, b))
            d_in = d_out

    def feature_map(self, image: np.ndarray) -> Tensor:
        """Backbone on a (3, H, W) input; runs once per image."""
        x = Tensor(image)
        for w, b in self.convs:
            x = ops.maxpool2d(ops.lrelu(ops.conv2d(x, w, b), self.cfg.leakage), 2)
        return x

    def region_features(self, fmap: Tensor, boxes: np.ndarray) -> Tensor:
        pooled = ops.roi_pool(fmap, boxes, self.cfg.stride, self.cfg.roi_bins)
        x = pooled.reshape(pooled.shape[0], -1)
        for w, b in self.fcs:
            x = ops.lrelu(ops.dense(x, w, b), self.cfg.leakage)
        return x

    def forward(self, image: np.ndarray, boxes) -> Tensor:
        """Region features (B, d_rgn) for every box on one image."""
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        _, h, w = image.shape
        if h % self.cfg.stride or w % self.cfg.stride:
            raise ValueError(f"image {h}x{w} not divisible by backbone stride {self.cfg.stride}")
        for i, bx in enumerate(boxes):
            x1, y1, x2, y2 = bx
            if not (np.all(np.isfinite(bx)) and x1 < x2 and y1 < y2
                    and x1 >= 0 and y1 >= 0 and x2 <= w and y2 <= h):
                raise InvalidBox(f"box #{i} {bx.tolist()} invalid for a {w}x{h} image")
        return self.region_features(self.feature_map(image), boxes)


class DynamicHead:
    def __init__(self, d_txt: int, d_rgn: int, store: ParameterStore, rng: np.random.Generator,
                 use_bias: bool = True):
        self.A_w = store.weight("dis.A_w", (d_txt, d_rgn), d_txt, d_rgn, rng)
        self.a_b = store.weight("dis.a_b", (d_txt,), d_txt, 1, rng)
        if not use_bias:
            self.a_b.data = np.zeros(d_txt)
            self.a_b.requires_grad = False
        self.use_bias = use_bias


def classifier_from_text(phi_txt, head: DynamicHead) -> tuple[Tensor, Tensor]:
    """Per-phrase classifier weights (.., d_rgn) and biases (..)."""
    phi = phi_txt if isinstance(phi_txt, Tensor) else Tensor(phi_txt)
    return ops.matmul(phi, head.A_w), ops.matmul(phi, head.a_b)


def score(w, b, phi_rgn) -> Tensor:
    w = w if isinstance(w, Tensor) else Tensor(w)
    return ops.add(ops.matmul(phi_rgn if isinstance(phi_rgn, Tensor) else Tensor(phi_rgn), w), b)


def score_matrix(phi_rgn, w: Tensor, b: Tensor) -> Tensor:
    """Scores (n_boxes, n_phrases) from region features and per-phrase classifiers."""
    rg = phi_rgn if isinstance(phi_rgn, Tensor) else Tensor(phi_rgn)
    return ops.add(ops.matmul(rg, ops.transpose(w)), b)


def dynamic_regularizer(w, b) -> Tensor:
    """||w||^2 + b^2, summed over all phrases passed in."""
    w = w if isinstance(w, Tensor) else Tensor(w)
    b = b if isinstance(b, Tensor) else Tensor(b)
    return ops.add(ops.sum_squares(w), ops.sum_squares(b))


class PhraseRegionModel:
    """Parameters and pathways of the full text-conditioned region classifier."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.store = ParameterStore()
        rng = np.random.default_rng(seed)
        self.text = TextPathway(cfg.text, self.store, rng)
        self.visual = VisualPathway(cfg.visual, self.store, rng)
        self.head = DynamicHead(cfg.text.out_dim, cfg.visual.out_dim, self.store, rng, cfg.head_bias)
        self.alphabet = DEFAULT_ALPHABET

    def encode(self, phrases: Sequence[NormalizedPhrase]) -> np.ndarray:
        return np.stack([_encode_cached(p.text, self.cfg.text.input_length) for p in phrases])

    def text_features(self, phrases: Sequence[NormalizedPhrase]) -> Tensor:
        return self.text.forward(self.encode(phrases))

    def classifiers(self, phrases: Sequence[NormalizedPhrase]) -> tuple[Tensor, Tensor]:
        return classifier_from_text(self.text_features(phrases), self.head)

    def region_features(self, pixels: np.ndarray, boxes) -> Tensor:
        return self.visual.forward(image_to_input(pixels), boxes)

    def scores(self, pixels: np.ndarray, boxes, phrases: Sequence[NormalizedPhrase]) -> np.ndarray:
        w, b = self.classifiers(phrases)
        return score_matrix(self.region_features(pixels, boxes), w, b).data


@lru_cache(maxsize=4096)
def _encode_cached(text: str, input_length: int) -> np.ndarray:
    arr = encode_phrase(text, DEFAULT_ALPHABET, input_length)
    arr.setflags(write=False)
    return arr
