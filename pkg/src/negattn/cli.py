"""Command-line entry point: ``negattn <command> [flags]``.

Commands: train, finetune, generate, sweep, ablate, ppl-compare. Flags may also
come from a JSON file given with ``--config``; flags on the command line win.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional

import numpy as np
import torch

from .attention import AttentionConfig
from .checkpoint import Checkpoint
from .data import IDENTIFIER, decode_latent, make_dataset, subject_prompt, to_uint8
from .diffusion import GuidanceConfig, initial_latents, sample
from .evaluation import (SweepSpec, calibrate_absent_threshold, fit_scorer, recontext_prompts,
                         run_ablation, run_lambda_sweep, run_ppl_comparison, spearman)
from .masks import MaskState
from .numerics import Rng
from .training import FinetuneConfig, finetune_dreambooth, from_checkpoint, train_base

COMMANDS = ("train", "finetune", "generate", "sweep", "ablate", "ppl-compare")
MASK_RESOLUTIONS = (16, 24, 32)
SEED_ENV = "NEGATTN_SEED"


@dataclass
class RunConfig:
    command: str
    seed: int = 0
    lam: float = 0.6
    guidance_scale: float = 7.5
    steps: int = 50
    mask_resolution: int = 16
    background_masking: bool = True
    negative_attention: bool = True
    checkpoint: Optional[str] = None
    base: Optional[str] = None
    out: Optional[str] = None
    output_dir: Optional[str] = None
    prompt: Optional[str] = None
    subject_prompt: str = field(default_factory=subject_prompt)
    train_steps: int = 3000
    finetune_steps: int = 800
    ppl_weight: float = 0.0
    dataset_size: int = 2048
    seeds: int = 16
    lambdas: List[float] = field(default_factory=lambda: [round(0.1 * i, 1) for i in range(11)])
    jobs: int = 1
    dump_masks: Optional[str] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


_FIELDS = {f.name for f in fields(RunConfig)}


def _nonneg_float(s):
    v = float(s)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {s}")
    return v


def _pos_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {s}")
    return v


def _lambda_list(s):
    try:
        vals = [float(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {s}")
    if not vals or any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError(f"need one or more values >= 0, got {s}")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="negattn", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON file with flag values (command-line flags win)")
    p.add_argument("--seed", type=int, help=f"random seed (falls back to ${SEED_ENV}, then 0)")
    p.add_argument("--lambda", dest="lam", type=_nonneg_float, help="suppression scale")
    p.add_argument("--guidance-scale", type=_nonneg_float)
    p.add_argument("--steps", type=_pos_int, help="sampling steps")
    p.add_argument("--mask-resolution", type=int, choices=MASK_RESOLUTIONS)
    p.add_argument("--background-masking", action=argparse.BooleanOptionalAction)
    p.add_argument("--negative-attention", action=argparse.BooleanOptionalAction)
    p.add_argument("--checkpoint", help="input checkpoint")
    p.add_argument("--base", help="base checkpoint (ablate threshold calibration)")
    p.add_argument("--out", help="output file")
    p.add_argument("--output-dir", help="directory for extra artefacts")
    p.add_argument("--prompt")
    p.add_argument("--subject-prompt")
    p.add_argument("--train-steps", type=int, help="base training steps")
    p.add_argument("--finetune-steps", type=int, help="fine-tuning steps")
    p.add_argument("--ppl-weight", type=_nonneg_float)
    p.add_argument("--dataset-size", type=_pos_int)
    p.add_argument("--seeds", type=_pos_int, help="number of seeds for sweeps")
    p.add_argument("--lambdas", type=_lambda_list, help="comma-separated lambda values")
    p.add_argument("--jobs", type=_pos_int)
    p.add_argument("--dump-masks", help="directory for per-step mask PGMs")
    return p


def parse_args(argv: Optional[List[str]] = None) -> RunConfig:
    parser = build_parser()
    ns = parser.parse_args(argv)
    values = {}
    if ns.config:
        try:
            with open(ns.config, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except (OSError, ValueError) as e:
            parser.error(f"--config: cannot read {ns.config}: {e}")
        unknown = set(loaded) - _FIELDS
        if unknown:
            parser.error(f"--config: unknown keys {sorted(unknown)}")
        values.update(loaded)
    explicit = {k: v for k, v in vars(ns).items() if v is not None and k in _FIELDS}
    values.update(explicit)
    values["command"] = ns.command
    if "seed" not in values and os.environ.get(SEED_ENV):
        try:
            values["seed"] = int(os.environ[SEED_ENV])
        except ValueError:
            parser.error(f"${SEED_ENV} must be an integer")
    cfg = RunConfig(**values)
    _validate(cfg, parser)
    return cfg


def _validate(cfg: RunConfig, parser) -> None:
    if not isinstance(cfg.lam, (int, float)) or cfg.lam < 0:
        parser.error(f"--lambda: must be >= 0, got {cfg.lam}")
    if cfg.mask_resolution not in MASK_RESOLUTIONS:
        parser.error(f"--mask-resolution: must be one of {MASK_RESOLUTIONS}")
    if cfg.guidance_scale < 0:
        parser.error("--guidance-scale: must be >= 0")
    if cfg.command == "generate" and not cfg.prompt:
        parser.error("generate requires --prompt")
    if cfg.command in ("finetune", "generate", "sweep", "ablate", "ppl-compare") and not cfg.checkpoint:
        parser.error(f"{cfg.command} requires --checkpoint")
    if cfg.command in ("train", "finetune") and not cfg.out:
        parser.error(f"{cfg.command} requires --out")


# -- artefacts --------------------------------------------------------------------

def emit_image(z0_latent: torch.Tensor, path: str) -> None:
    """Nearest-neighbour decode to 32x32 and write a binary PPM (P6)."""
    if z0_latent.dim() == 4:
        if z0_latent.shape[0] != 1:
            raise ValueError("emit_image takes a single latent")
        z0_latent = z0_latent[0]
    pix = to_uint8(decode_latent(z0_latent.double()))
    h, w, _ = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(pix).tobytes())


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    magic, w, h, _, body = data.split(maxsplit=4)
    if magic != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    return np.frombuffer(body, np.uint8).reshape(int(h), int(w), 3)


def _spec(cfg: RunConfig) -> SweepSpec:
    return SweepSpec(lambda_values=list(cfg.lambdas), seeds=list(range(cfg.seed, cfg.seed + cfg.seeds)),
                     prompts=recontext_prompts(), subject_prompt=cfg.subject_prompt,
                     guidance_scale=cfg.guidance_scale, steps=cfg.steps, jobs=cfg.jobs)


def _check_resolution(model, cfg: RunConfig) -> None:
    if model.base_resolution != (cfg.mask_resolution, cfg.mask_resolution):
        raise ValueError(f"mask resolution {cfg.mask_resolution} does not match the model's "
                         f"base attention resolution {model.base_resolution[0]}")


def _scorer():
    return fit_scorer(make_dataset(0, 16).subject_images)


def _cmd_train(cfg):
    ds = make_dataset(0, cfg.dataset_size)
    ck = train_base(ds, cfg.train_steps, Rng(cfg.seed))
    ck.save(cfg.out)
    t = ck.metadata["training"]
    print(f"train: {cfg.train_steps} steps, loss {t['loss_initial']:.4f} -> {t['loss_final']:.4f}, "
          f"wrote {cfg.out}")


def _cmd_finetune(cfg):
    base = Checkpoint.load(cfg.checkpoint)
    ds = make_dataset(0, 16)
    ck = finetune_dreambooth(base, ds.subject_images, IDENTIFIER, cfg.ppl_weight, cfg.finetune_steps,
                             Rng(cfg.seed), ds.class_prior_images, cfg=FinetuneConfig())
    ck.save(cfg.out)
    t = ck.metadata["training"]
    print(f"finetune: {cfg.finetune_steps} steps, ppl_weight {cfg.ppl_weight:g}, loss "
          f"{t['loss_initial']:.4f} -> {t['loss_final']:.4f}, wrote {cfg.out}")


def _cmd_generate(cfg):
    model, sched = from_checkpoint(Checkpoint.load(cfg.checkpoint))
    _check_resolution(model, cfg)
    cond = model.conditioning(cfg.prompt, 1)
    subj = model.conditioning(cfg.subject_prompt, 1)
    attn = AttentionConfig(lam=cfg.lam, negative_attention=cfg.negative_attention,
                           background_masking=cfg.background_masking)
    state = MaskState(base_resolution=model.base_resolution,
                      identifier_token_index=cond.identifier_index,
                      subject_identifier_index=subj.identifier_index, batch=1,
                      dump_dir=cfg.dump_masks)
    noise = initial_latents([cfg.seed], model.latent_shape, model.dtype)
    with torch.no_grad():
        z = sample(model, cond, subj, sched, GuidanceConfig(cfg.guidance_scale), attn,
                   noise=noise, steps=cfg.steps, mask_state=state)
    out = cfg.out or os.path.join(cfg.output_dir or ".", f"seed{cfg.seed}.ppm")
    emit_image(z, out)
    print(f"generate: lambda {cfg.lam:g}, seed {cfg.seed}, wrote {out}")


def _write_csv(table, cfg, default):
    out = cfg.out or os.path.join(cfg.output_dir or ".", default)
    table.write_csv(out)
    return out


def _cmd_sweep(cfg):
    spec = _spec(cfg)
    model, sched = from_checkpoint(Checkpoint.load(cfg.checkpoint))
    _check_resolution(model, cfg)
    table = run_lambda_sweep((model, sched), spec, _scorer(),
                             background_masking=cfg.background_masking)
    out = _write_csv(table, cfg, "sweep.csv")
    means = table.means()
    lams = [k[1] for k in means]
    fid = [v[0] for v in means.values()]
    ali = [v[1] for v in means.values()]
    rho = (spearman(lams, ali), spearman(lams, fid)) if len(lams) > 1 else (float("nan"),) * 2
    print(f"sweep: {len(table.data())} rows, spearman(lambda, alignment) {rho[0]:.3f}, "
          f"spearman(lambda, fidelity) {rho[1]:.3f}, wrote {out}")


def _cmd_ablate(cfg):
    spec = _spec(cfg)
    model, sched = from_checkpoint(Checkpoint.load(cfg.checkpoint))
    _check_resolution(model, cfg)
    scorer = _scorer()
    threshold = None
    if cfg.base:
        bm, bs = from_checkpoint(Checkpoint.load(cfg.base))
        threshold = calibrate_absent_threshold(bm, bs, scorer, spec)
    res = run_ablation((model, sched), cfg.lam, spec, scorer, threshold)
    out = _write_csv(res.table, cfg, "ablation.csv")
    parts = [f"{a} fid {res.arm(a)[0]:.3f} align {res.arm(a)[1]:.3f}" for a in ("baseline", "no_mask", "mindiff")]
    thr = f", threshold {threshold:.3f}" if threshold is not None else ""
    print(f"ablate: lambda {cfg.lam:g}: " + "; ".join(parts) + f"{thr}, wrote {out}")


def _cmd_ppl(cfg):
    spec = _spec(cfg)
    spec.lambda_values = [l for l in spec.lambda_values if l > 0] or [cfg.lam]
    base = Checkpoint.load(cfg.checkpoint)
    ds = make_dataset(0, 16)
    res = run_ppl_comparison(base, ds.subject_images, spec, _scorer(), cfg.finetune_steps,
                             Rng(cfg.seed), ds.class_prior_images)
    out = _write_csv(res.table, cfg, "ppl_compare.csv")
    report = os.path.splitext(out)[0] + "_pareto.txt"
    with open(report, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(res.report())
    print(f"ppl-compare: {len(res.dominating)} dominating (lambda, ppl) pairs, wrote {out} and {report}")


_DISPATCH = {"train": _cmd_train, "finetune": _cmd_finetune, "generate": _cmd_generate,
             "sweep": _cmd_sweep, "ablate": _cmd_ablate, "ppl-compare": _cmd_ppl}


def run(cfg: RunConfig) -> int:
    try:
        if cfg.output_dir:
            os.makedirs(cfg.output_dir, exist_ok=True)
        _DISPATCH[cfg.command](cfg)
    except Exception as e:  # every module error becomes exit status 1
        print(f"negattn {cfg.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    return run(parse_args(argv))


if __name__ == "__main__":
    sys.exit(main())
