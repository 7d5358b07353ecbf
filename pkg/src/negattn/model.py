"""Toy text encoder and conditional U-Net denoiser.

Latents are ``[B, 3, 16, 16]``. The U-Net has two resolution levels (16x16 and
8x8) with a cross-attention block after every residual block but the last; the
16x16 blocks feed the identifier-token maps to the mask state. A residual block
sits between the last cross-attention and the output convolution so attention
edits reach the noise prediction through convolutions rather than directly.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import AttentionConfig, ProjectionWeights, attend
from .data import Vocabulary
from .masks import MaskState, record


@dataclass
class ModelConfig:
    latent_channels: int = 3
    latent_size: int = 16
    channels: int = 32
    channel_mult: tuple = (1, 2)
    d_cond: int = 64
    attn_dim: int = 64
    heads: int = 4
    time_dim: int = 128
    groups: int = 8
    max_tokens: int = 16
    start_token: bool = True  # prepend the null token to every prompt

    def to_dict(self):
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["channel_mult"] = tuple(d["channel_mult"])
        return cls(**d)


@dataclass
class Conditioning:
    """Encoded prompt batch. ``key_mask`` marks real (non-padding) tokens."""
    emb: torch.Tensor                 # [B, L, d_cond]
    key_mask: torch.Tensor            # [B, L] bool
    identifier_index: Optional[int] = None

    @property
    def batch(self) -> int:
        return self.emb.shape[0]

    def expand(self, batch: int) -> "Conditioning":
        if self.batch == batch:
            return self
        if self.batch != 1:
            raise ValueError(f"cannot expand batch {self.batch} to {batch}")
        return Conditioning(self.emb.expand(batch, -1, -1), self.key_mask.expand(batch, -1),
                            self.identifier_index)


@dataclass
class AttnContext:
    cond: Conditioning
    subject: Optional[Conditioning] = None
    cfg: Optional[AttentionConfig] = None
    state: Optional[MaskState] = None


class TextEncoder(nn.Module):
    """Token embedding plus learned positional embedding."""

    def __init__(self, vocab_size: int, d_cond: int, max_tokens: int):
        super().__init__()
        self.token = nn.Parameter(torch.randn(vocab_size, d_cond) * 0.5)
        self.position = nn.Parameter(torch.randn(max_tokens, d_cond) * 0.1)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return self.token[ids] + self.position[: ids.shape[-1]]


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, time_dim, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.time = nn.Linear(time_dim, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttnBlock(nn.Module):
    def __init__(self, channels, d_cond, attn_dim, heads, groups, name=""):
        super().__init__()
        self.name = name
        self.heads = heads
        self.norm = nn.GroupNorm(groups, channels)
        self.w_q = nn.Parameter(torch.randn(channels, attn_dim) / math.sqrt(channels))
        self.w_k = nn.Parameter(torch.randn(d_cond, attn_dim) / math.sqrt(d_cond))
        self.w_v = nn.Parameter(torch.randn(d_cond, attn_dim) / math.sqrt(d_cond))
        self.w_out = nn.Parameter(torch.randn(attn_dim, channels) / math.sqrt(attn_dim) * 0.1)

    def weights(self) -> ProjectionWeights:
        return ProjectionWeights(self.w_q, self.w_k, self.w_v, self.w_out, self.heads)

    def forward(self, x, ctx: AttnContext):
        b, c, h, w = x.shape
        f = self.norm(x).flatten(2).transpose(1, 2)
        cfg = ctx.cfg or AttentionConfig(lam=0.0, negative_attention=False)
        subject, state = ctx.subject, ctx.state
        mask = None
        if cfg.active and subject is not None:
            if cfg.background_masking and state is not None:
                mask = state.layer_mask(h, w, self.name)
            else:
                mask = torch.ones(b, h * w, dtype=f.dtype)
        res = attend(f, ctx.cond.emb, subject.emb if subject is not None else None,
                     self.weights(), mask, cfg, ctx.cond.key_mask,
                     subject.key_mask if subject is not None else None)
        if state is not None and cfg.record_maps:
            if ctx.cond.identifier_index is not None:
                record(res.probs, ctx.cond.identifier_index, state)
            elif res.subject_probs is not None and subject.identifier_index is not None:
                record(res.subject_probs, subject.identifier_index, state)
        return x + res.z.transpose(1, 2).reshape(b, c, h, w)


class UNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c0 = cfg.channels * cfg.channel_mult[0]
        c1 = cfg.channels * cfg.channel_mult[1]
        g, td = cfg.groups, cfg.time_dim
        attn = lambda ch, name: CrossAttnBlock(ch, cfg.d_cond, cfg.attn_dim, cfg.heads, g, name)
        self.time_dim = td
        self.time_mlp = nn.Sequential(nn.Linear(td // 2, td), nn.SiLU(), nn.Linear(td, td))
        self.conv_in = nn.Conv2d(cfg.latent_channels, c0, 3, padding=1)
        self.down0 = ResBlock(c0, c0, td, g)
        self.attn_down0 = attn(c0, "down0")
        self.downsample = nn.Conv2d(c0, c0, 3, stride=2, padding=1)
        self.down1 = ResBlock(c0, c1, td, g)
        self.attn_down1 = attn(c1, "down1")
        self.mid = ResBlock(c1, c1, td, g)
        self.attn_mid = attn(c1, "mid")
        self.up1 = ResBlock(2 * c1, c1, td, g)
        self.attn_up1 = attn(c1, "up1")
        self.upsample = nn.Conv2d(c1, c1, 3, padding=1)
        self.up0 = ResBlock(c1 + c0, c0, td, g)
        self.attn_up0 = attn(c0, "up0")
        self.post = ResBlock(c0, c0, td, g)
        self.norm_out = nn.GroupNorm(g, c0)
        self.conv_out = nn.Conv2d(c0, cfg.latent_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, z, t, ctx: AttnContext):
        temb = self.time_mlp(timestep_embedding(t, self.time_dim // 2).to(z.dtype))
        h0 = self.conv_in(z)
        h0 = self.attn_down0(self.down0(h0, temb), ctx)
        h1 = self.downsample(h0)
        h1 = self.attn_down1(self.down1(h1, temb), ctx)
        m = self.attn_mid(self.mid(h1, temb), ctx)
        u1 = self.attn_up1(self.up1(torch.cat([m, h1], 1), temb), ctx)
        u0 = self.upsample(F.interpolate(u1, scale_factor=2, mode="nearest"))
        u0 = self.attn_up0(self.up0(torch.cat([u0, h0], 1), temb), ctx)
        u0 = self.post(u0, temb)
        return self.conv_out(F.silu(self.norm_out(u0)))


class ToyModel(nn.Module):
    """Text encoder + U-Net, addressed through :meth:`denoise`."""

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        self.encoder = TextEncoder(len(vocab), cfg.d_cond, cfg.max_tokens)
        with torch.no_grad():
            # the identifier starts as a rare word with no meaning of its own
            self.encoder.token[vocab.identifier_id].zero_()
        self.unet = UNet(cfg)

    @property
    def dtype(self):
        return self.encoder.token.dtype

    @property
    def base_resolution(self):
        return (self.cfg.latent_size, self.cfg.latent_size)

    @property
    def latent_shape(self):
        return (self.cfg.latent_channels, self.cfg.latent_size, self.cfg.latent_size)

    def tokenize(self, prompt) -> List[int]:
        """Token ids as fed to the encoder; the empty prompt is one null token."""
        ids = self.vocab.encode(prompt)
        if self.cfg.start_token or not ids:
            ids = [self.vocab.null_id] + ids
        if len(ids) > self.cfg.max_tokens:
            raise ValueError(f"prompt has {len(ids)} tokens, limit is {self.cfg.max_tokens}")
        return ids

    def encode_prompt(self, prompt) -> torch.Tensor:
        """``[L, d_cond]``; the empty prompt encodes as one null-token row."""
        return self.encoder(torch.tensor(self.tokenize(prompt), dtype=torch.long))

    def conditioning(self, prompts: Sequence, batch: Optional[int] = None) -> Conditioning:
        """Encode a list of prompts (strings or token lists), padding to a common length.

        A single prompt string may be given together with ``batch`` to repeat it.
        """
        if isinstance(prompts, str):
            prompts = [prompts]
        ids = [self.tokenize(p) for p in prompts]
        length = max(len(i) for i in ids)
        padded = torch.full((len(ids), length), self.vocab.null_id, dtype=torch.long)
        valid = torch.zeros(len(ids), length, dtype=torch.bool)
        for row, i in enumerate(ids):
            padded[row, : len(i)] = torch.tensor(i)
            valid[row, : len(i)] = True
        ident = None
        if len(ids) == 1 and self.vocab.identifier_id in ids[0]:
            ident = ids[0].index(self.vocab.identifier_id)
        cond = Conditioning(self.encoder(padded), valid, ident)
        return cond.expand(batch) if batch is not None else cond

    def null_conditioning(self, batch: int) -> Conditioning:
        return self.conditioning([""], batch)

    def denoise(self, z_t, t, cond_main: Conditioning, cond_subject: Optional[Conditioning] = None,
                attn_cfg: Optional[AttentionConfig] = None, mask_state: Optional[MaskState] = None):
        b = z_t.shape[0]
        if not torch.is_tensor(t):
            t = torch.full((b,), int(t), dtype=torch.long)
        ctx = AttnContext(cond_main.expand(b),
                          cond_subject.expand(b) if cond_subject is not None else None,
                          attn_cfg, mask_state)
        return self.unet(z_t, t, ctx)

    def forward(self, z_t, t, cond_main, cond_subject=None, attn_cfg=None, mask_state=None):
        return self.denoise(z_t, t, cond_main, cond_subject, attn_cfg, mask_state)

    def named_weights(self) -> Dict[str, torch.Tensor]:
        return {k: v.detach() for k, v in self.state_dict().items()}
