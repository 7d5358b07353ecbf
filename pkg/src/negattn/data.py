"""Procedural shapes dataset, vocabulary and the fixed latent projection.

Images are 32x32 RGB in [-1, 1]: a circle, square or triangle of one palette
colour on a background of another, optionally wearing a "hat" glyph. The
personal subject is a striped orange/purple circle photographed on a gray
background; neither the stripes nor gray appear in the base set.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .numerics import Rng

NULL = "<null>"
IDENTIFIER = "sks"

PALETTE: Dict[str, tuple] = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 0.8, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
}
EXTRA_COLORS: Dict[str, tuple] = {
    "gray": (0.5, 0.5, 0.5),
    "orange": (1.0, 0.5, 0.0),
    "purple": (0.45, 0.0, 0.9),
}
ALL_COLORS = {**PALETTE, **EXTRA_COLORS}
SHAPES = ("circle", "square", "triangle")
ACCESSORIES = ("hat",)
HAT_COLOR = (0.3, 0.3, 0.3)

SUBJECT_CLASS = "circle"
SUBJECT_BACKGROUND = "gray"
SUBJECT_STRIPES = ("orange", "purple")
STRIPE_PERIOD = 8  # pixels, i.e. 4 latent rows per stripe pair

IMAGE_SIZE = 32
LATENT_FACTOR = 2

FILLER = ("a", "photo", "of", "on", "background", "with")


class VocabularyError(KeyError):
    pass


@dataclass
class Vocabulary:
    tokens: List[str]
    identifier: str = IDENTIFIER

    def __post_init__(self):
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            raise VocabularyError("duplicate tokens in vocabulary")
        if self.tokens[0] != NULL:
            raise VocabularyError("id 0 must be the null token")

    @classmethod
    def default(cls) -> "Vocabulary":
        toks = [NULL, *FILLER, *ALL_COLORS, *SHAPES, *ACCESSORIES, IDENTIFIER]
        return cls(toks)

    @property
    def null_id(self) -> int:
        return 0

    @property
    def identifier_id(self) -> int:
        return self.id(self.identifier)

    def __len__(self):
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise VocabularyError(f"unknown token {token!r}") from None

    def encode(self, text) -> List[int]:
        if isinstance(text, str):
            text = text.split()
        return [self.id(t) for t in text]

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.tokens[i] for i in ids]


def caption(shape: str, color: Optional[str] = None, background: Optional[str] = None,
            hat: bool = False, identifier: Optional[str] = None) -> str:
    words = ["a", "photo", "of", "a"]
    if identifier:
        words.append(identifier)
    if color:
        words.append(color)
    words.append(shape)
    if background:
        words += ["on", background, "background"]
    if hat:
        words += ["with", "a", "hat"]
    return " ".join(words)


def subject_prompt(identifier: str = IDENTIFIER, cls: str = SUBJECT_CLASS) -> str:
    return f"a {identifier} {cls}"


def parse_attributes(words: Sequence[str]) -> Dict[str, object]:
    """Attributes a caption asks for: shape, colour, background, hat."""
    words = list(words)
    out: Dict[str, object] = {}
    for i, w in enumerate(words):
        if w in SHAPES:
            out["shape"] = w
            if i > 0 and words[i - 1] in ALL_COLORS:
                out["color"] = words[i - 1]
        elif w == "background" and i > 0 and words[i - 1] in ALL_COLORS:
            out["background"] = words[i - 1]
        elif w in ACCESSORIES:
            out["hat"] = True
    return out


# -- rendering ----------------------------------------------------------------

def _grid(size):
    yy, xx = np.mgrid[0:size, 0:size]
    return yy + 0.5, xx + 0.5


def shape_mask(shape: str, cx: float, cy: float, r: float, size=IMAGE_SIZE) -> np.ndarray:
    yy, xx = _grid(size)
    if shape == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if shape == "square":
        s = 0.85 * r
        return (np.abs(xx - cx) <= s) & (np.abs(yy - cy) <= s)
    if shape == "triangle":
        top, bottom = cy - r, cy + 0.8 * r
        t = (yy - top) / (bottom - top)
        return (t >= 0) & (t <= 1) & (np.abs(xx - cx) <= t * 1.05 * r)
    raise ValueError(f"unknown shape {shape!r}")


def shape_top(shape: str, cy: float, r: float) -> float:
    return cy - (0.85 * r if shape == "square" else r)


def render(shape: str, color, background, cx: float, cy: float, r: float,
           hat: bool = False, striped: bool = False, size=IMAGE_SIZE) -> np.ndarray:
    """Float image ``[3, size, size]`` in [-1, 1]."""
    bg = np.asarray(ALL_COLORS[background] if isinstance(background, str) else background)
    img = np.broadcast_to(bg[:, None, None], (3, size, size)).copy()
    m = shape_mask(shape, cx, cy, r, size)
    if striped:
        yy, _ = _grid(size)
        a = np.asarray(ALL_COLORS[SUBJECT_STRIPES[0]])
        b = np.asarray(ALL_COLORS[SUBJECT_STRIPES[1]])
        band = (np.floor(yy - 0.5) // (STRIPE_PERIOD // 2)) % 2 == 0
        fill = np.where(band[None], a[:, None, None], b[:, None, None])
        img = np.where(m[None], fill, img)
    else:
        col = np.asarray(ALL_COLORS[color] if isinstance(color, str) else color)
        img = np.where(m[None], col[:, None, None], img)
    if hat:
        yy, xx = _grid(size)
        top = shape_top(shape, cy, r)
        hm = (np.abs(xx - cx) <= 0.6 * r) & (yy >= top - 4) & (yy < top)
        img = np.where(hm[None], np.asarray(HAT_COLOR)[:, None, None], img)
    return (img * 2.0 - 1.0).astype(np.float64)


def sample_geometry(rng: Rng):
    cx = float(rng.uniform(13.0, 19.0))
    cy = float(rng.uniform(13.0, 19.0))
    r = float(rng.uniform(7.0, 9.5))
    return cx, cy, r


@dataclass
class Example:
    image: np.ndarray
    caption: str
    attrs: Dict[str, object]


def random_example(rng: Rng, hat_prob: float = 0.2, shapes=SHAPES, drop_color: float = 0.2,
                   drop_background: float = 0.15) -> Example:
    """Random base image; the caption sometimes omits colour or background."""
    names = list(PALETTE)
    shape = shapes[int(rng.integers(len(shapes)))]
    color = names[int(rng.integers(len(names)))]
    others = [n for n in names if n != color]
    bg = others[int(rng.integers(len(others)))]
    hat = bool(rng.uniform() < hat_prob)
    cx, cy, r = sample_geometry(rng)
    img = render(shape, color, bg, cx, cy, r, hat=hat)
    attrs = {"shape": shape, "color": color, "background": bg, "hat": hat}
    said_color = color if rng.uniform() >= drop_color else None
    said_bg = bg if rng.uniform() >= drop_background else None
    return Example(img, caption(shape, said_color, said_bg, hat), attrs)


def subject_example(rng: Rng, background=SUBJECT_BACKGROUND, identifier=IDENTIFIER,
                    hat: bool = False) -> Example:
    cx, cy, r = sample_geometry(rng)
    img = render(SUBJECT_CLASS, None, background, cx, cy, r, hat=hat, striped=True)
    attrs = {"shape": SUBJECT_CLASS, "color": None, "background": background,
             "hat": hat, "subject": True}
    return Example(img, caption(SUBJECT_CLASS, identifier=identifier), attrs)


@dataclass
class ToyDataset:
    images: torch.Tensor               # [count, 3, 32, 32]
    captions: List[str]
    attrs: List[Dict[str, object]]
    subject_images: torch.Tensor       # [k, 3, 32, 32]
    subject_captions: List[str]
    class_prior_images: torch.Tensor   # [m, 3, 32, 32]
    class_prior_captions: List[str]
    seed: int = 0
    meta: Dict[str, object] = field(default_factory=dict)

    def __len__(self):
        return self.images.shape[0]


def make_dataset(seed: int = 0, count: int = 2048, n_subject: int = 4, n_prior: int = 64,
                 identifier: str = IDENTIFIER) -> ToyDataset:
    rng = Rng(seed)
    base = [random_example(rng.child(0).child(i)) for i in range(count)]
    subj = [subject_example(rng.child(1).child(i), identifier=identifier)
            for i in range(n_subject)]
    prior = [random_example(rng.child(2).child(i), hat_prob=0.0, shapes=(SUBJECT_CLASS,))
             for i in range(n_prior)]

    def stack(exs):
        return torch.from_numpy(np.stack([e.image for e in exs]))

    return ToyDataset(
        images=stack(base),
        captions=[e.caption for e in base],
        attrs=[e.attrs for e in base],
        subject_images=stack(subj),
        subject_captions=[e.caption for e in subj],
        class_prior_images=stack(prior),
        class_prior_captions=[caption(SUBJECT_CLASS)] * n_prior,
        seed=seed,
        meta={"count": count, "n_subject": n_subject, "n_prior": n_prior},
    )


# -- fixed latent projection ---------------------------------------------------

def encode_image(x: torch.Tensor) -> torch.Tensor:
    """2x average pooling; ``[..., 3, 32, 32] -> [..., 3, 16, 16]``."""
    lead = x.shape[:-3]
    y = F.avg_pool2d(x.reshape(-1, *x.shape[-3:]), LATENT_FACTOR)
    return y.reshape(*lead, *y.shape[-3:])


def decode_latent(z: torch.Tensor) -> torch.Tensor:
    """Nearest-neighbour 2x upsampling back to image resolution."""
    return z.repeat_interleave(LATENT_FACTOR, dim=-2).repeat_interleave(LATENT_FACTOR, dim=-1)


def to_uint8(img: torch.Tensor) -> np.ndarray:
    """``[3, H, W]`` in [-1, 1] -> ``[H, W, 3]`` uint8."""
    x = ((img.double().clamp(-1, 1) + 1.0) * 127.5).round()
    return x.permute(1, 2, 0).to(torch.uint8).numpy()
