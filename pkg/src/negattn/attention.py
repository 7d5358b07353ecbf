"""Multi-head cross-attention with an optional subtracted subject branch.

The subject branch reuses the main branch's projections: queries come from the
image features, keys and values from the subject-prompt embedding. Its per-head
output is gated by a spatial mask, scaled by ``lam`` and subtracted from the
main per-head output before the shared output projection.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import torch

from .numerics import DimensionError, softmax_rows


class ConfigError(ValueError):
    pass


@dataclass
class ProjectionWeights:
    w_q: torch.Tensor    # d_model x (d_k * heads)
    w_k: torch.Tensor    # d_cond x (d_k * heads)
    w_v: torch.Tensor    # d_cond x (d_v * heads)
    w_out: torch.Tensor  # (d_v * heads) x d_model
    heads: int

    @property
    def d_k(self) -> int:
        return self.w_q.shape[1] // self.heads

    def check(self) -> None:
        inner = self.w_q.shape[1]
        if self.heads < 1 or inner == 0 or inner % self.heads:
            raise DimensionError(
                f"projected width {inner} not divisible into {self.heads} heads")
        if self.w_k.shape[1] != inner or self.w_v.shape[1] != inner:
            raise DimensionError(
                f"q/k/v widths differ: {tuple(self.w_q.shape)}, "
                f"{tuple(self.w_k.shape)}, {tuple(self.w_v.shape)}")
        if self.w_k.shape[0] != self.w_v.shape[0]:
            raise DimensionError("key and value projections read different cond widths")
        if self.w_out.shape[0] != inner or self.w_out.shape[1] != self.w_q.shape[0]:
            raise DimensionError(
                f"output projection {tuple(self.w_out.shape)} does not map "
                f"{inner} back to {self.w_q.shape[0]}")


@dataclass
class AttentionConfig:
    lam: float = 0.6
    negative_attention: bool = True
    background_masking: bool = True
    record_maps: bool = True

    def __post_init__(self):
        if not self.lam >= 0.0:
            raise ConfigError(f"suppression scale must be >= 0, got {self.lam}")

    @property
    def active(self) -> bool:
        return self.negative_attention and self.lam != 0.0


class AttentionResult(NamedTuple):
    z: torch.Tensor
    probs: torch.Tensor                  # main branch, [..., H, N, L]
    subject_probs: Optional[torch.Tensor]


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    *lead, n, width = x.shape
    return x.reshape(*lead, n, heads, width // heads).transpose(-3, -2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    *lead, heads, n, d = x.shape
    return x.transpose(-3, -2).reshape(*lead, n, heads * d)


def head_outputs(f, cond, w: ProjectionWeights, key_mask=None):
    """Per-head ``softmax(QK^T / sqrt(d_k)) V`` and the attention probabilities.

    ``key_mask`` (bool, ``[..., L]``) marks valid conditioning tokens; padded
    positions get zero probability.
    """
    w.check()
    if f.shape[-1] != w.w_q.shape[0]:
        raise DimensionError(
            f"features have width {f.shape[-1]}, query projection expects {w.w_q.shape[0]}")
    if cond.shape[-1] != w.w_k.shape[0]:
        raise DimensionError(
            f"cond has width {cond.shape[-1]}, key projection expects {w.w_k.shape[0]}")
    q = _split_heads(f @ w.w_q, w.heads)
    k = _split_heads(cond @ w.w_k, w.heads)
    v = _split_heads(cond @ w.w_v, w.heads)
    logits = (q @ k.transpose(-1, -2)) * (1.0 / math.sqrt(w.d_k))
    if key_mask is not None:
        logits = logits.masked_fill(~key_mask[..., None, None, :], float("-inf"))
    probs = softmax_rows(logits)
    return probs @ v, probs


def cross_attention(f, cond, w: ProjectionWeights, key_mask=None):
    """Standard cross-attention. Returns ``(z, probs)`` with probs ``[..., H, N, L]``."""
    heads, probs = head_outputs(f, cond, w, key_mask)
    return _merge_heads(heads) @ w.w_out, probs


def attend(f, cond_main, cond_subject, w: ProjectionWeights, mask, cfg: AttentionConfig,
           key_mask_main=None, key_mask_subject=None) -> AttentionResult:
    """Main attention minus ``lam * mask`` times the subject-branch attention.

    ``mask`` is ``[..., N]`` over spatial tokens (1 = suppress there). With the
    subtraction inactive (disabled, ``lam == 0`` or no subject prompt) this is
    exactly :func:`cross_attention`.
    """
    if not cfg.lam >= 0.0:
        raise ConfigError(f"suppression scale must be >= 0, got {cfg.lam}")
    main, probs = head_outputs(f, cond_main, w, key_mask_main)
    if not cfg.active or cond_subject is None:
        return AttentionResult(_merge_heads(main) @ w.w_out, probs, None)
    n = f.shape[-2]
    if mask.shape[-1] != n:
        raise DimensionError(f"mask has {mask.shape[-1]} entries, layer has {n} tokens")
    aux, subject_probs = head_outputs(f, cond_subject, w, key_mask_subject)
    gate = mask.to(aux.dtype)[..., None, :, None]
    combined = main - cfg.lam * (gate * aux)
    return AttentionResult(_merge_heads(combined) @ w.w_out, probs, subject_probs)


def negative_attention(f, cond_main, cond_subject, w: ProjectionWeights, mask,
                       cfg: AttentionConfig, key_mask_main=None, key_mask_subject=None):
    """Returns ``(z, probs_main)``; see :func:`attend`."""
    res = attend(f, cond_main, cond_subject, w, mask, cfg, key_mask_main, key_mask_subject)
    return res.z, res.probs


def disable_mask_variant(f, cond_main, cond_subject, w: ProjectionWeights,
                         cfg: AttentionConfig, key_mask_main=None, key_mask_subject=None):
    """Negative attention applied everywhere (all-ones mask)."""
    if cfg.background_masking:
        raise ConfigError("disable_mask_variant needs background_masking=False")
    ones = torch.ones(f.shape[:-1], dtype=f.dtype)
    z, _ = negative_attention(f, cond_main, cond_subject, w, ones, cfg,
                              key_mask_main, key_mask_subject)
    return z
