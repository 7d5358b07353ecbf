"""Proxy metrics and the lambda-sweep / ablation / prior-preservation experiments.

Subject fidelity compares each stripe colour's share of the foreground with
the least share seen in the subject's reference images. Text alignment is the
fraction of prompt attributes (shape, colour, background, hat) that
per-attribute classifiers read back from the image. Both work on fixed pixel
features with heads fitted once on the synthetic generator and stored as a
checkpoint.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from scipy.ndimage import median_filter
from scipy.stats import spearmanr

from .attention import AttentionConfig
from .checkpoint import Checkpoint
from .data import (ALL_COLORS, HAT_COLOR, IDENTIFIER, PALETTE, SHAPES, SUBJECT_CLASS,
                   SUBJECT_STRIPES, caption, decode_latent, parse_attributes, random_example,
                   render, sample_geometry, subject_prompt)
from .diffusion import GuidanceConfig, initial_latents, sample
from .masks import MaskState
from .numerics import Rng
from .training import FinetuneConfig, finetune_dreambooth, from_checkpoint

log = logging.getLogger(__name__)

CSV_HEADER = "arm,lambda,ppl_weight,seed,prompt_id,subject_fidelity,text_alignment"
NO_SHAPE = "none"
BORDER = 2
FG_THRESHOLD = 0.5
HAT_TOLERANCE = 0.5
HAT_ROWS = 3
HAT_HALF_WIDTH = 0.4
MIN_SHAPE_FRACTION = 0.03


class HarnessError(RuntimeError):
    pass


# -- pixel features -------------------------------------------------------------

def _as_image(image) -> np.ndarray:
    x = image.detach().double().cpu().numpy() if torch.is_tensor(image) else np.asarray(image, float)
    if x.ndim != 3 or x.shape[0] != 3:
        raise HarnessError(f"expected a [3, H, W] image, got shape {x.shape}")
    return np.clip(x, -1.0, 1.0)


@dataclass
class Features:
    background: np.ndarray      # median border colour
    color: np.ndarray           # median colour of shape pixels
    shape: np.ndarray           # [area fraction, fill of bounding box, top-width ratio]
    hat: float                  # hat-coloured share of the band above the shape
    stripes: np.ndarray         # [orange, purple] shares of the foreground


def _closer(x: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pixels of ``x`` nearer (L2) to colour ``a`` than to colour ``b``."""
    da = ((x - a[:, None, None]) ** 2).sum(0)
    db = ((x - b[:, None, None]) ** 2).sum(0)
    return da < db


def extract(image) -> Features:
    x = _as_image(image)
    _, h, w = x.shape
    ring = np.ones((h, w), bool)
    ring[BORDER:h - BORDER, BORDER:w - BORDER] = False
    bg = np.median(x[:, ring], axis=1)
    hat_rgb = np.asarray(HAT_COLOR) * 2 - 1
    fg = np.abs(x - bg[:, None, None]).max(0) > FG_THRESHOLD
    hat = 0.0
    if fg.sum() >= 3:
        near_hat = np.abs(x - hat_rgb[:, None, None]).max(0) < HAT_TOLERANCE
        body = fg & ~(near_hat & _closer(x, hat_rgb, np.median(x[:, fg], axis=1)))
    else:
        body = np.zeros_like(fg)
    area = body.mean()
    if body.sum() >= 3:
        color = np.median(x[:, body], axis=1)
        rows = np.flatnonzero(body.sum(1) >= 2)
        cols = np.flatnonzero(body.sum(0) >= 2)
        if len(rows) and len(cols):
            box = (rows[-1] - rows[0] + 1) * (cols[-1] - cols[0] + 1)
            widths = body[rows[0]:rows[-1] + 1].sum(1)
            quarter = max(len(widths) // 4, 1)
            top = widths[:quarter].mean() / max(widths.max(), 1)
            fill = body.sum() / box
            # the hat is a band a few rows tall sitting on top of the body
            cx, half = (cols[0] + cols[-1]) / 2, (cols[-1] - cols[0] + 1) / 2
            c0, c1 = int(round(cx - HAT_HALF_WIDTH * half)), int(round(cx + HAT_HALF_WIDTH * half))
            band = x[:, max(rows[0] - HAT_ROWS, 0):rows[0], max(c0, 0):c1 + 1]
            if band.size:
                hat = float(_closer(band, hat_rgb, bg).mean())
        else:
            fill, top = 0.0, 0.0
    else:
        color = bg.copy()
        fill, top = 0.0, 0.0
    palette = np.stack([np.asarray(c) * 2 - 1 for c in ALL_COLORS.values()])
    names = list(ALL_COLORS)
    # the stripe texture survives a 3x3 median filter, isolated speckle does not
    smooth = median_filter(x, size=(1, 3, 3), mode="nearest")
    px = smooth.reshape(3, -1).T
    nearest = np.abs(px[:, None, :] - palette[None]).max(-1).argmin(-1)
    # stripe colours as a share of the foreground, so object size does not matter
    on_fg = (np.abs(smooth - bg[:, None, None]).max(0) > FG_THRESHOLD).reshape(-1)
    if on_fg.mean() >= MIN_SHAPE_FRACTION:
        stripes = np.array([(nearest[on_fg] == names.index(c)).mean() for c in SUBJECT_STRIPES])
    else:
        stripes = np.zeros(len(SUBJECT_STRIPES))
    return Features(bg, color, np.array([area, fill, top]), hat, stripes)


# -- fitted heads ---------------------------------------------------------------

def _centroids(xs: np.ndarray, labels: Sequence[str], names: Sequence[str]) -> np.ndarray:
    out = []
    for n in names:
        sel = [i for i, l in enumerate(labels) if l == n]
        if not sel:
            raise HarnessError(f"no training examples for class {n!r}")
        out.append(xs[sel].mean(0))
    return np.stack(out)


def _nearest(centroids: np.ndarray, names: Sequence[str], v: np.ndarray, scale=None) -> str:
    d = centroids - v[None]
    if scale is not None:
        d = d / scale[None]
    return names[int((d ** 2).sum(1).argmin())]


def _best_threshold(values: np.ndarray, labels: np.ndarray) -> float:
    cand = np.unique(values)
    mids = (cand[:-1] + cand[1:]) / 2 if len(cand) > 1 else cand
    errs = np.array([np.mean((values > m) != labels) for m in mids])
    # centre of the run of equally good cuts, away from either class
    best = np.flatnonzero(errs == errs.min())
    lo, hi = cand[best[0]], cand[best[-1] + 1] if len(cand) > 1 else cand[best[-1]]
    return float((lo + hi) / 2)


@dataclass
class ProxyScores:
    subject_fidelity: float
    text_alignment: float
    attributes: Dict[str, bool] = field(default_factory=dict)


@dataclass
class ProxyScorer:
    """Per-attribute heads plus the subject detector; see :func:`fit_scorer`."""
    color_names: List[str]
    color_centroids: np.ndarray
    background_centroids: np.ndarray
    shape_names: List[str]
    shape_centroids: np.ndarray
    shape_scale: np.ndarray
    hat_threshold: float
    stripe_reference: np.ndarray  # per stripe colour, smallest share over references
    subject_absent_threshold: Optional[float] = None

    def classify(self, image) -> Dict[str, object]:
        f = extract(image)
        return self._classify(f)

    def _classify(self, f: Features) -> Dict[str, object]:
        if f.shape[0] < MIN_SHAPE_FRACTION:
            shape = NO_SHAPE
        else:
            shape = _nearest(self.shape_centroids, self.shape_names, f.shape, self.shape_scale)
        return {
            "background": _nearest(self.background_centroids, self.color_names, f.background),
            "color": _nearest(self.color_centroids, self.color_names, f.color),
            "shape": shape,
            "hat": f.hat > self.hat_threshold,
        }

    def fidelity(self, f: Features, reference: Optional[np.ndarray] = None) -> float:
        ref = self.stripe_reference if reference is None else reference
        ratios = np.clip(f.stripes / ref, 0.0, 1.0)
        return float(np.sqrt(ratios.prod()))

    def score(self, image, prompt_tokens, reference: Optional[np.ndarray] = None) -> ProxyScores:
        f = extract(image)
        want = parse_attributes(prompt_tokens.split() if isinstance(prompt_tokens, str)
                                else prompt_tokens)
        got = self._classify(f)
        checks = {k: got[k] == v for k, v in want.items()}
        alignment = sum(checks.values()) / len(checks) if checks else 1.0
        return ProxyScores(self.fidelity(f, reference), float(alignment), checks)

    # persistence
    def to_checkpoint(self) -> Checkpoint:
        t = lambda a: torch.from_numpy(np.ascontiguousarray(a, dtype=np.float64))
        tensors = {
            "color_centroids": t(self.color_centroids),
            "background_centroids": t(self.background_centroids),
            "shape_centroids": t(self.shape_centroids),
            "shape_scale": t(self.shape_scale),
            "stripe_reference": t(self.stripe_reference),
        }
        meta = {"kind": "proxy_scorer", "color_names": self.color_names,
                "shape_names": self.shape_names, "hat_threshold": self.hat_threshold,
                "subject_absent_threshold": self.subject_absent_threshold}
        return Checkpoint(tensors, meta)

    @classmethod
    def from_checkpoint(cls, ck: Checkpoint) -> "ProxyScorer":
        if ck.metadata.get("kind") != "proxy_scorer":
            raise HarnessError("checkpoint does not hold a proxy scorer")
        n = lambda k: ck.tensors[k].numpy().copy()
        m = ck.metadata
        return cls(list(m["color_names"]), n("color_centroids"), n("background_centroids"),
                   list(m["shape_names"]), n("shape_centroids"), n("shape_scale"),
                   float(m["hat_threshold"]), n("stripe_reference"),
                   m.get("subject_absent_threshold"))


def _degrade(img: np.ndarray, rng: Rng) -> np.ndarray:
    """Blend toward the image mean and add pixel noise, like an imperfect sample."""
    a = float(rng.uniform(0.0, 0.4))
    out = (1 - a) * img + a * img.mean(axis=(1, 2), keepdims=True)
    return np.clip(out + rng.normal(img.shape) * float(rng.uniform(0.0, 0.2)), -1, 1)


def stripe_reference(subject_images) -> np.ndarray:
    """Smallest per-colour stripe share over the reference images."""
    if len(subject_images) == 0:
        raise HarnessError("need at least one subject reference image")
    fr = np.stack([extract(x).stripes for x in subject_images])
    if (fr.min(0) <= 0).any():
        raise HarnessError("a subject reference shows no stripe colour")
    return fr.min(0)


def fit_scorer(subject_images, seed: int = 0, count: int = 1500) -> ProxyScorer:
    """Fit the attribute heads on freshly rendered images (clean and degraded)."""
    rng = Rng(seed, (101,))
    feats, attrs = [], []
    for i in range(count):
        r = rng.child(i)
        ex = random_example(r.child(0), hat_prob=0.3)
        img = ex.image if i % 2 == 0 else _degrade(ex.image, r.child(1))
        feats.append(extract(img))
        attrs.append(ex.attrs)
    colors = list(ALL_COLORS)
    # backgrounds and shapes in the palette plus the subject's gray backdrop
    extra = []
    for i in range(count // 10):
        r = rng.child(count + i)
        bg = list(ALL_COLORS)[int(r.integers(len(ALL_COLORS)))]
        shape = SHAPES[int(r.integers(len(SHAPES)))]
        col = [c for c in ALL_COLORS if c != bg][int(r.integers(len(ALL_COLORS) - 1))]
        cx, cy, rad = sample_geometry(r)
        img = render(shape, col, bg, cx, cy, rad)
        extra.append((extract(img), {"shape": shape, "color": col, "background": bg,
                                     "hat": False}))
    feats += [f for f, _ in extra]
    attrs += [a for _, a in extra]
    bgs = np.stack([f.background for f in feats])
    cols = np.stack([f.color for f in feats])
    shp = np.stack([f.shape for f in feats])
    bg_c = _centroids(bgs, [a["background"] for a in attrs], colors)
    col_c = _centroids(cols, [a["color"] for a in attrs], colors)
    shape_names = list(SHAPES)
    shp_c = _centroids(shp, [a["shape"] for a in attrs], shape_names)
    scale = shp.std(0) + 1e-6
    hats = np.array([f.hat for f in feats])
    hat_thr = _best_threshold(hats, np.array([bool(a["hat"]) for a in attrs]))
    return ProxyScorer(colors, col_c, bg_c, shape_names, shp_c, scale, hat_thr,
                       stripe_reference(subject_images))


def score_image(image, prompt_tokens, subject_refs=None,
                scorer: Optional[ProxyScorer] = None) -> ProxyScores:
    """Proxy scores for one ``[3, H, W]`` image in [-1, 1].

    ``subject_refs`` overrides the scorer's stored subject references.
    """
    if scorer is None:
        raise HarnessError("score_image needs a fitted ProxyScorer (see fit_scorer)")
    ref = stripe_reference(subject_refs) if subject_refs is not None else None
    return scorer.score(image, prompt_tokens, ref)


# -- experiments ----------------------------------------------------------------

RECONTEXT_BACKGROUNDS = tuple(PALETTE)


def recontext_prompts(identifier: str = IDENTIFIER, cls: str = SUBJECT_CLASS) -> List[str]:
    return [caption(cls, background=b, identifier=identifier) for b in RECONTEXT_BACKGROUNDS]


def default_lambdas() -> List[float]:
    return [round(0.1 * i, 1) for i in range(11)]


@dataclass
class SweepSpec:
    lambda_values: List[float] = field(default_factory=default_lambdas)
    seeds: List[int] = field(default_factory=lambda: list(range(16)))
    prompts: List[str] = field(default_factory=recontext_prompts)
    ppl_weights: List[float] = field(default_factory=lambda: [0.1, 0.5, 0.75, 1.0])
    subject_prompt: str = field(default_factory=subject_prompt)
    guidance_scale: float = 7.5
    steps: int = 25
    jobs: int = 1

    def __post_init__(self):
        for name in ("lambda_values", "seeds", "prompts", "ppl_weights"):
            if not list(getattr(self, name)):
                raise HarnessError(f"SweepSpec.{name} must be nonempty")
        if any(l < 0 for l in self.lambda_values):
            raise HarnessError("lambda values must be >= 0")


@dataclass
class Row:
    arm: str
    lam: float
    ppl_weight: float
    seed: object        # int, or "mean" on aggregate rows
    prompt_id: object   # int, or "all" on aggregate rows
    subject_fidelity: float
    text_alignment: float


@dataclass
class Table:
    rows: List[Row]

    def data(self) -> List[Row]:
        return [r for r in self.rows if r.seed != "mean"]

    def aggregates(self) -> List[Row]:
        return [r for r in self.rows if r.seed == "mean"]

    def means(self, arm: Optional[str] = None) -> Dict[tuple, tuple]:
        """``(arm, lambda, ppl_weight) -> (fidelity, alignment)`` from aggregate rows."""
        return {(r.arm, r.lam, r.ppl_weight): (r.subject_fidelity, r.text_alignment)
                for r in self.aggregates() if arm is None or r.arm == arm}

    def to_csv(self) -> str:
        lines = [CSV_HEADER]
        for r in self.rows:
            lines.append(",".join([r.arm, f"{r.lam:.6f}", f"{r.ppl_weight:.6f}", str(r.seed),
                                   str(r.prompt_id), f"{r.subject_fidelity:.6f}",
                                   f"{r.text_alignment:.6f}"]))
        return "\n".join(lines) + "\n"

    def write_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_csv())


def aggregate(rows: List[Row]) -> List[Row]:
    """One mean row per (arm, lambda, ppl_weight), in first-seen order."""
    groups: Dict[tuple, List[Row]] = {}
    for r in rows:
        groups.setdefault((r.arm, r.lam, r.ppl_weight), []).append(r)
    return [Row(a, l, p, "mean", "all",
                float(np.mean([r.subject_fidelity for r in g])),
                float(np.mean([r.text_alignment for r in g])))
            for (a, l, p), g in groups.items()]


def generate(model, sched, prompt: str, seeds: Sequence[int], lam: float, spec: SweepSpec,
             background_masking: bool = True, negative_attention: bool = True) -> torch.Tensor:
    """Decoded images ``[len(seeds), 3, 32, 32]`` for one prompt, batched over seeds."""
    cond = model.conditioning(prompt, 1)
    subj = model.conditioning(spec.subject_prompt, 1)
    cfg = AttentionConfig(lam=lam, negative_attention=negative_attention,
                          background_masking=background_masking)
    state = MaskState(base_resolution=model.base_resolution,
                      identifier_token_index=cond.identifier_index,
                      subject_identifier_index=subj.identifier_index, batch=len(seeds))
    noise = initial_latents(seeds, model.latent_shape, model.dtype)
    with torch.no_grad():
        z = sample(model, cond, subj, sched, GuidanceConfig(spec.guidance_scale), cfg,
                   noise=noise, steps=spec.steps, mask_state=state)
    return decode_latent(z)


def _cell(model, sched, scorer, spec, arm, lam, ppl, pid, masking, negative):
    prompt = spec.prompts[pid]
    imgs = generate(model, sched, prompt, spec.seeds, lam, spec, masking, negative)
    out = []
    for seed, img in zip(spec.seeds, imgs):
        s = scorer.score(img, prompt)
        out.append(Row(arm, lam, ppl, seed, pid, s.subject_fidelity, s.text_alignment))
    return out


def evaluate_arm(model, sched, scorer: ProxyScorer, spec: SweepSpec, arm: str,
                 lambdas: Sequence[float], ppl_weight: float = 0.0,
                 background_masking: bool = True, negative_attention: bool = True) -> List[Row]:
    """Rows for every (lambda, seed, prompt) of one arm, in that nesting order."""
    cells = [(lam, pid) for lam in lambdas for pid in range(len(spec.prompts))]
    run = lambda c: _cell(model, sched, scorer, spec, arm, c[0], ppl_weight, c[1],
                          background_masking, negative_attention)
    if spec.jobs > 1:
        with ThreadPoolExecutor(spec.jobs) as pool:
            results = list(pool.map(run, cells))
    else:
        results = [run(c) for c in cells]
    by_lam: Dict[float, List[Row]] = {}
    for (lam, _), rows in zip(cells, results):
        by_lam.setdefault(lam, []).extend(rows)
    out = []
    for lam in lambdas:
        out.extend(_seed_major(by_lam[lam], spec.seeds))
    return out


def _seed_major(rows: List[Row], seeds: Sequence[int]) -> List[Row]:
    order = {s: i for i, s in enumerate(seeds)}
    return sorted(rows, key=lambda r: (order[r.seed], r.prompt_id))


def _load(checkpoint):
    if isinstance(checkpoint, (str, bytes)) or hasattr(checkpoint, "__fspath__"):
        checkpoint = Checkpoint.load(checkpoint)
    if isinstance(checkpoint, Checkpoint):
        return from_checkpoint(checkpoint)
    return checkpoint  # already (model, sched)


def run_lambda_sweep(checkpoint, spec: SweepSpec, scorer: ProxyScorer,
                     background_masking: bool = True, arm: str = "mindiff") -> Table:
    model, sched = _load(checkpoint)
    rows = evaluate_arm(model, sched, scorer, spec, arm, spec.lambda_values,
                        background_masking=background_masking)
    return Table(rows + aggregate(rows))


def spearman(xs, ys) -> float:
    return float(spearmanr(xs, ys).statistic)


def calibrate_absent_threshold(model, sched, scorer: ProxyScorer, spec: SweepSpec,
                               quantile: float = 0.95) -> float:
    """Fidelity quantile over images that do not show the subject.

    The images are the same scenes as the sweep prompts with the identifier
    dropped, generated by ``model`` (normally the base model).
    """
    values = []
    for prompt in spec.prompts:
        plain = " ".join(w for w in prompt.split() if w != model.vocab.identifier)
        for img in generate(model, sched, plain, spec.seeds, 0.0, spec, negative_attention=False):
            values.append(scorer.score(img, plain).subject_fidelity)
    return float(np.quantile(values, quantile))


@dataclass
class AblationResult:
    table: Table
    lam: float
    threshold: Optional[float]

    def arm(self, name: str) -> tuple:
        (f, a), = [v for k, v in self.table.means(name).items()]
        return f, a

    def summary(self) -> Dict[str, object]:
        out = {name: dict(zip(("subject_fidelity", "text_alignment"), self.arm(name)))
               for name in ABLATION_ARMS}
        out["lambda"] = self.lam
        out["threshold"] = self.threshold
        return out


ABLATION_ARMS = ("baseline", "no_mask", "mindiff")


def run_ablation(checkpoint, lambda_value: float, spec: SweepSpec, scorer: ProxyScorer,
                 threshold: Optional[float] = None) -> AblationResult:
    """Baseline (lambda 0, no negative attention), negative attention without the
    mask, and negative attention with the background mask."""
    model, sched = _load(checkpoint)
    rows = evaluate_arm(model, sched, scorer, spec, "baseline", [0.0], negative_attention=False)
    rows += evaluate_arm(model, sched, scorer, spec, "no_mask", [lambda_value],
                         background_masking=False)
    rows += evaluate_arm(model, sched, scorer, spec, "mindiff", [lambda_value])
    return AblationResult(Table(rows + aggregate(rows)), lambda_value, threshold)


def dominates(a: tuple, b: tuple) -> bool:
    return a[0] >= b[0] and a[1] >= b[1] and (a[0] > b[0] or a[1] > b[1])


@dataclass
class PPLComparison:
    table: Table
    dominating: List[tuple]   # (lambda, ppl_weight) pairs where the lambda arm dominates

    def report(self) -> str:
        lines = ["method,parameter,subject_fidelity,text_alignment"]
        for (arm, lam, ppl), (f, a) in self.table.means().items():
            param = ppl if arm == "ppl" else lam
            lines.append(f"{arm},{param:.6f},{f:.6f},{a:.6f}")
        if self.dominating:
            pairs = "; ".join(f"lambda={l:g} dominates ppl_weight={p:g}" for l, p in self.dominating)
            lines.append(f"# pareto: {pairs}")
        else:
            lines.append("# pareto: no lambda dominates any prior-preservation arm")
        return "\n".join(lines) + "\n"


def run_ppl_comparison(base, subject_images, spec: SweepSpec, scorer: ProxyScorer,
                       finetune_steps: int, rng: Rng, class_prior_images=None,
                       finetune_cfg: Optional[FinetuneConfig] = None,
                       plain: Optional[Checkpoint] = None) -> PPLComparison:
    """DreamBooth with each prior-preservation weight (sampled without negative
    attention) against plain DreamBooth sampled with negative attention at every
    lambda. All arms share the fine-tuning seed."""
    if isinstance(base, str):
        base = Checkpoint.load(base)
    rows: List[Row] = []
    for w in spec.ppl_weights:
        ck = finetune_dreambooth(base, subject_images, base.metadata["identifier"], w,
                                 finetune_steps, rng, class_prior_images, cfg=finetune_cfg)
        model, sched = from_checkpoint(ck)
        log.info("ppl arm %g trained", w)
        rows += evaluate_arm(model, sched, scorer, spec, "ppl", [0.0], ppl_weight=w,
                             negative_attention=False)
    if plain is None:
        plain = finetune_dreambooth(base, subject_images, base.metadata["identifier"], 0.0,
                                    finetune_steps, rng, class_prior_images, cfg=finetune_cfg)
    model, sched = from_checkpoint(plain)
    lams = [l for l in spec.lambda_values if l > 0]
    rows += evaluate_arm(model, sched, scorer, spec, "mindiff", lams)
    table = Table(rows + aggregate(rows))
    means = table.means()
    dom = [(lam, ppl) for (arm, lam, _), v in means.items() if arm == "mindiff"
           for (arm2, _, ppl), u in means.items() if arm2 == "ppl" and dominates(v, u)]
    return PPLComparison(table, dom)
