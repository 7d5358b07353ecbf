"""Base training and subject fine-tuning of the toy denoiser."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import torch

from .checkpoint import Checkpoint
from .data import SUBJECT_CLASS, ToyDataset, Vocabulary, caption, encode_image
from .diffusion import NoiseSchedule, forward_process
from .model import Conditioning, ModelConfig, ToyModel
from .numerics import Rng

log = logging.getLogger(__name__)

BASE = "base"
DREAMBOOTH = "dreambooth"
DREAMBOOTH_PPL = "dreambooth+ppl"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 2e-3
    cond_dropout: float = 0.1
    grad_clip: float = 1.0
    warmup: int = 100


@dataclass
class FinetuneConfig:
    batch_size: int = 4
    lr: float = 1e-4
    grad_clip: float = 1.0
    cond_dropout: float = 0.0
    # learning-rate multipliers for the text pathway
    token_lr_scale: float = 1.0
    attention_lr_scale: float = 1.0


def _param_groups(model: ToyModel, cfg: FinetuneConfig):
    tok, attn, rest = [], [], []
    for name, p in model.named_parameters():
        if name.startswith("encoder."):
            tok.append(p)
        elif name.rsplit(".", 1)[-1] in ("w_q", "w_k", "w_v", "w_out"):
            attn.append(p)
        else:
            rest.append(p)
    return [{"params": tok, "lr": cfg.lr * cfg.token_lr_scale},
            {"params": attn, "lr": cfg.lr * cfg.attention_lr_scale},
            {"params": rest, "lr": cfg.lr}]


def build_model(cfg: Optional[ModelConfig] = None, vocab: Optional[Vocabulary] = None,
                seed: int = 0, dtype=torch.float32) -> ToyModel:
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = ToyModel(cfg or ModelConfig(), vocab or Vocabulary.default())
    finally:
        torch.random.set_rng_state(gen_state)
    return model.to(dtype)


def to_checkpoint(model: ToyModel, sched: NoiseSchedule, training: Dict) -> Checkpoint:
    meta = {
        "model": model.cfg.to_dict(),
        "vocabulary": list(model.vocab.tokens),
        "identifier": model.vocab.identifier,
        "schedule": sched.to_dict(),
        "training": training,
    }
    return Checkpoint(model.named_weights(), meta)


def from_checkpoint(ckpt: Checkpoint, dtype=None):
    """Returns ``(model, schedule)``."""
    meta = ckpt.metadata
    vocab = Vocabulary(list(meta["vocabulary"]), meta.get("identifier", "sks"))
    model = ToyModel(ModelConfig.from_dict(meta["model"]), vocab)
    stored = next(iter(ckpt.tensors.values())).dtype
    model = model.to(dtype or stored)
    model.load_state_dict({k: v.to(dtype or stored) for k, v in ckpt.tensors.items()})
    model.eval()
    return model, NoiseSchedule.from_dict(meta["schedule"])


def _pad_ids(model: ToyModel, prompts: Sequence[str]):
    ids = [model.tokenize(p) for p in prompts]
    length = max(len(i) for i in ids)
    out = torch.full((len(ids), length), model.vocab.null_id, dtype=torch.long)
    valid = torch.zeros(len(ids), length, dtype=torch.bool)
    for row, i in enumerate(ids):
        out[row, : len(i)] = torch.tensor(i)
        valid[row, : len(i)] = True
    return out, valid


def _cond(model: ToyModel, ids, valid) -> Conditioning:
    return Conditioning(model.encoder(ids), valid)


def _drop(model: ToyModel, ids, valid, drop: torch.Tensor):
    ids = ids.clone()
    valid = valid.clone()
    ids[drop] = model.vocab.null_id
    valid[drop] = False
    valid[drop, 0] = True
    return ids, valid


def _mse(model, z0, t, eps, cond, sched):
    z_t = forward_process(z0, t, eps, sched)
    return ((eps - model.denoise(z_t, t, cond)) ** 2).mean()


def _draw(rng: Rng, n: int, batch: int, T: int, shape, dtype):
    idx = torch.from_numpy(rng.integers(0, n, size=batch))
    t = torch.from_numpy(rng.integers(1, T + 1, size=batch))
    eps = torch.from_numpy(rng.normal((batch, *shape))).to(dtype)
    return idx, t, eps


def _check(loss: torch.Tensor, step: int):
    if not math.isfinite(loss.item()):
        raise TrainingError(f"loss became {loss.item()} at step {step}")


def _running(history: List[float], window: int = 100):
    head = history[:window]
    tail = history[-window:]
    return (sum(head) / max(len(head), 1), sum(tail) / max(len(tail), 1))


def train_base(dataset: ToyDataset, steps: int, rng: Rng, model_cfg: Optional[ModelConfig] = None,
               cfg: Optional[TrainConfig] = None, sched: Optional[NoiseSchedule] = None,
               model: Optional[ToyModel] = None) -> Checkpoint:
    cfg = cfg or TrainConfig()
    sched = sched or NoiseSchedule.linear()
    if model is None:
        model = build_model(model_cfg, seed=rng.seed)
    model.train()
    z_all = encode_image(dataset.images).to(model.dtype)
    ids_all, valid_all = _pad_ids(model, dataset.captions)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched_lr = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: min(1.0, (s + 1) / cfg.warmup) * 0.5 * (1 + math.cos(math.pi * min(s / max(steps, 1), 1.0))))
    history: List[float] = []
    step_rng = rng.child(7)
    for step in range(steps):
        idx, t, eps = _draw(step_rng, len(dataset), cfg.batch_size, sched.T,
                            z_all.shape[1:], model.dtype)
        drop = torch.from_numpy(step_rng.uniform(size=cfg.batch_size) < cfg.cond_dropout)
        ids, valid = _drop(model, ids_all[idx], valid_all[idx], drop)
        loss = _mse(model, z_all[idx], t, eps, _cond(model, ids, valid), sched)
        _check(loss, step)
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        sched_lr.step()
        history.append(loss.item())
        if (step + 1) % 500 == 0:
            log.info("base step %d loss %.4f", step + 1, sum(history[-500:]) / 500)
    model.eval()
    first, last = _running(history)
    training = {"mode": BASE, "steps": steps, "seed": rng.seed, "ppl_weight": 0.0,
                "dataset_seed": dataset.seed, "dataset_size": len(dataset),
                "train": asdict(cfg), "loss_initial": first, "loss_final": last}
    return to_checkpoint(model, sched, training)


def finetune_dreambooth(base: Checkpoint, subject_images: torch.Tensor, identifier: str,
                        ppl_weight: float, steps: int, rng: Rng,
                        class_prior_images: Optional[torch.Tensor] = None,
                        cls: str = SUBJECT_CLASS, cfg: Optional[FinetuneConfig] = None) -> Checkpoint:
    """Fine-tune every weight on the subject images captioned with the identifier.

    ``ppl_weight > 0`` adds that multiple of the same loss on class images
    captioned without the identifier.
    """
    cfg = cfg or FinetuneConfig()
    if ppl_weight < 0:
        raise ValueError(f"ppl_weight must be >= 0, got {ppl_weight}")
    model, sched = from_checkpoint(base)
    if identifier != model.vocab.identifier:
        raise TrainingError(f"identifier {identifier!r} is not the reserved identifier "
                            f"{model.vocab.identifier!r}")
    if ppl_weight > 0 and class_prior_images is None:
        raise ValueError("prior preservation needs class_prior_images")
    model.train()
    z_subj = encode_image(subject_images).to(model.dtype)
    ids_s, valid_s = _pad_ids(model, [caption(cls, identifier=identifier)])
    z_prior = ids_p = valid_p = None
    if ppl_weight > 0:
        z_prior = encode_image(class_prior_images).to(model.dtype)
        ids_p, valid_p = _pad_ids(model, [caption(cls)])
    opt = torch.optim.Adam(_param_groups(model, cfg))
    history: List[float] = []
    step_rng = rng.child(11)
    b = cfg.batch_size
    for step in range(steps):
        idx, t, eps = _draw(step_rng, z_subj.shape[0], b, sched.T, z_subj.shape[1:], model.dtype)
        ids, valid = ids_s.expand(b, -1), valid_s.expand(b, -1)
        if cfg.cond_dropout > 0:
            drop = torch.from_numpy(step_rng.uniform(size=b) < cfg.cond_dropout)
            ids, valid = _drop(model, ids, valid, drop)
        cond = _cond(model, ids, valid)
        loss = _mse(model, z_subj[idx], t, eps, cond, sched)
        if ppl_weight > 0:
            idx_p, t_p, eps_p = _draw(step_rng, z_prior.shape[0], b, sched.T,
                                      z_prior.shape[1:], model.dtype)
            cond_p = _cond(model, ids_p.expand(b, -1), valid_p.expand(b, -1))
            loss = loss + ppl_weight * _mse(model, z_prior[idx_p], t_p, eps_p, cond_p, sched)
        _check(loss, step)
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        history.append(loss.item())
    model.eval()
    first, last = _running(history, 20)
    training = dict(base.metadata.get("training", {}))
    training.update({
        "mode": DREAMBOOTH_PPL if ppl_weight > 0 else DREAMBOOTH,
        "base_steps": training.get("steps", 0),
        "steps": steps, "seed": rng.seed, "ppl_weight": float(ppl_weight),
        "finetune": asdict(cfg), "loss_initial": first, "loss_final": last,
    })
    return to_checkpoint(model, sched, training)
