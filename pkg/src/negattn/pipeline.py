"""Default experiment settings and cached artefacts shared by the CLI and tests."""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Callable

from .checkpoint import Checkpoint
from .data import IDENTIFIER, make_dataset
from .evaluation import ProxyScorer, fit_scorer
from .numerics import Rng
from .training import FinetuneConfig, TrainConfig, finetune_dreambooth, train_base

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    dataset_seed: int = 0
    dataset_size: int = 2048
    base_steps: int = 3000
    base_seed: int = 1
    finetune_steps: int = 800
    finetune_seed: int = 2
    ppl_weight: float = 0.0
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)

    def key(self, *parts) -> str:
        blob = json.dumps([asdict(self), parts], sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def cache_dir() -> str:
    return os.environ.get("NEGATTN_CACHE", os.path.join(os.getcwd(), ".cache", "negattn"))


def cached(name: str, build: Callable[[], Checkpoint], directory: str = None) -> Checkpoint:
    directory = directory or cache_dir()
    path = os.path.join(directory, name)
    if os.path.exists(path):
        return Checkpoint.load(path)
    ck = build()
    os.makedirs(directory, exist_ok=True)
    tmp = path + ".tmp"
    ck.save(tmp)
    os.replace(tmp, path)
    return ck


def dataset(cfg: PipelineConfig):
    return make_dataset(cfg.dataset_seed, cfg.dataset_size)


def base_checkpoint(cfg: PipelineConfig, directory: str = None) -> Checkpoint:
    def build():
        log.info("training base model for %d steps", cfg.base_steps)
        return train_base(dataset(cfg), cfg.base_steps, Rng(cfg.base_seed), cfg=cfg.train)
    base_cfg = PipelineConfig(cfg.dataset_seed, cfg.dataset_size, cfg.base_steps, cfg.base_seed,
                              train=cfg.train)
    return cached(f"base-{base_cfg.key('base')}.ckpt", build, directory)


def finetuned_checkpoint(cfg: PipelineConfig, ppl_weight: float = None,
                         directory: str = None) -> Checkpoint:
    w = cfg.ppl_weight if ppl_weight is None else ppl_weight
    base = base_checkpoint(cfg, directory)

    def build():
        ds = make_dataset(cfg.dataset_seed, 16)
        return finetune_dreambooth(base, ds.subject_images, IDENTIFIER, w, cfg.finetune_steps,
                                   Rng(cfg.finetune_seed), ds.class_prior_images, cfg=cfg.finetune)
    return cached(f"ft-{cfg.key('ft', w)}.ckpt", build, directory)


def scorer(cfg: PipelineConfig, directory: str = None) -> ProxyScorer:
    def build():
        ds = make_dataset(cfg.dataset_seed, 16)
        return fit_scorer(ds.subject_images).to_checkpoint()
    return ProxyScorer.from_checkpoint(cached(f"scorer-{cfg.key('scorer')}.ckpt", build, directory))
