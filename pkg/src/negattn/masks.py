"""Background masks derived from the identifier token's cross-attention.

Each denoising step, every base-resolution cross-attention layer reports the
per-head attention column of the identifier token. At the end of the step the
columns are averaged, thresholded strictly above their spatial mean (ties go to
the background) and inverted into a background mask, which the next step uses.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import torch

from .numerics import resize_nearest

CARRY = "carry"
ONLINE = "online"


class MaskStateError(RuntimeError):
    pass


@dataclass
class MaskState:
    base_resolution: Tuple[int, int] = (16, 16)
    identifier_token_index: Optional[int] = None
    # fallback: identifier position inside the subject prompt
    subject_identifier_index: Optional[int] = None
    batch: Optional[int] = None
    mode: str = CARRY
    dump_dir: Optional[str] = None
    accumulated_maps: List[torch.Tensor] = field(default_factory=list)
    background_mask: Optional[torch.Tensor] = None
    previous_mask: Optional[torch.Tensor] = None
    step: Optional[int] = None
    log: List[tuple] = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in (CARRY, ONLINE):
            raise ValueError(f"unknown mask mode {self.mode!r}")

    @property
    def base_tokens(self) -> int:
        return self.base_resolution[0] * self.base_resolution[1]

    def _lead(self):
        return () if self.batch is None else (self.batch,)

    def begin_step(self, step: int) -> None:
        if self.background_mask is not None:
            self.previous_mask = self.background_mask
        self.background_mask = None
        self.accumulated_maps = []
        self.step = step

    def end_step(self) -> Optional[torch.Tensor]:
        if not self.accumulated_maps:
            return None
        mask = finalize_mask(self)
        if self.dump_dir is not None:
            dump_mask(mask, self.dump_dir, self.step)
        return mask

    def layer_mask(self, h: int, w: int, layer: str = "") -> torch.Tensor:
        """Mask for a layer at ``h x w``, flattened to ``[..., h*w]``."""
        if self.mode == ONLINE and self.accumulated_maps:
            _, background = binarize(average_maps(self.accumulated_maps))
            background = background.reshape(*background.shape[:-1], *self.base_resolution)
            source = "current"
        else:
            background = first_step_mask(self)
            source = "previous" if self.previous_mask is not None else "default"
        self.log.append((self.step, layer, source))
        return resize_nearest(background, h, w).flatten(-2)


def record(map_probs: torch.Tensor, token_index: int, state: MaskState) -> None:
    """Append the per-head columns ``map_probs[..., h, :, token_index]``.

    Layers whose token count differs from the base resolution are skipped.
    """
    n, length = map_probs.shape[-2], map_probs.shape[-1]
    if not 0 <= token_index < length:
        raise IndexError(f"token index {token_index} out of range for {length} tokens")
    if n != state.base_tokens:
        return
    columns = map_probs[..., token_index]  # [..., H, N]
    for h in range(columns.shape[-2]):
        state.accumulated_maps.append(columns[..., h, :])


def average_maps(maps: List[torch.Tensor]) -> torch.Tensor:
    return torch.stack(maps, dim=0).mean(dim=0)


def binarize(avg: torch.Tensor):
    """Returns ``(subject, background)``; subject is 1 strictly above the mean."""
    mean = avg.mean(dim=-1, keepdim=True)
    # a rounded mean can fall outside [min, max]; a constant map must stay all background
    mean = torch.minimum(torch.maximum(mean, avg.amin(dim=-1, keepdim=True)),
                         avg.amax(dim=-1, keepdim=True))
    subject = (avg > mean).to(avg.dtype)
    return subject, 1.0 - subject


def finalize_mask(state: MaskState) -> torch.Tensor:
    if not state.accumulated_maps:
        raise MaskStateError("no maps recorded this step")
    h, w = state.base_resolution
    _, background = binarize(average_maps(state.accumulated_maps))
    state.background_mask = background.reshape(*background.shape[:-1], h, w)
    return state.background_mask


def subject_mask(state: MaskState) -> torch.Tensor:
    if state.background_mask is None:
        raise MaskStateError("mask not finalized this step")
    return 1.0 - state.background_mask


def mask_for_resolution(state: MaskState, h2: int, w2: int) -> torch.Tensor:
    if state.background_mask is None:
        raise MaskStateError("mask not finalized this step")
    return resize_nearest(state.background_mask, h2, w2).flatten(-2)


def first_step_mask(state: MaskState) -> torch.Tensor:
    """Previous step's background mask, or all ones before any exists."""
    if state.previous_mask is not None:
        return state.previous_mask
    return torch.ones(*state._lead(), *state.base_resolution, dtype=torch.float64)


def write_pgm(path: str, image: torch.Tensor) -> None:
    """Binary (P5) 8-bit grayscale; ``image`` holds values in [0, 1]."""
    h, w = image.shape
    pix = (image.double().clamp(0, 1) * 255).round().to(torch.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.numpy().tobytes())


def read_pgm(path: str) -> torch.Tensor:
    with open(path, "rb") as fh:
        data = fh.read()
    magic, w, h, maxval, body = data.split(maxsplit=4)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    pix = torch.frombuffer(bytearray(body[: int(w) * int(h)]), dtype=torch.uint8)
    return pix.reshape(int(h), int(w)).double() / int(maxval)


def dump_mask(mask: torch.Tensor, out_dir: str, step) -> None:
    os.makedirs(out_dir, exist_ok=True)
    if mask.dim() == 2:
        write_pgm(os.path.join(out_dir, f"mask_t{step}.pgm"), mask)
        return
    for i, m in enumerate(mask):
        name = f"mask_t{step}.pgm" if mask.shape[0] == 1 else f"mask_t{step}_b{i}.pgm"
        write_pgm(os.path.join(out_dir, name), m)
