"""Masked token modeling: tube masks, a learned [MASK] token, masked-only L1."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import LossError, NumericError, ShapeError
from .model import BrainTransformer, encoder_state


@dataclass
class MaskPattern:
    per_frame_mask: np.ndarray  # (N,) bool
    T: int
    ratio: float
    seed: int

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.per_frame_mask)

    def full(self) -> np.ndarray:
        """The tube: ``(T, N)`` with the same row repeated for every frame."""
        return np.broadcast_to(self.per_frame_mask, (self.T, self.per_frame_mask.size)).copy()


def masked_count(N: int, ratio: float) -> int:
    # epsilon guards products like 0.29 * 100 landing just under an integer
    return min(N, math.floor(ratio * N + 1e-9))


def make_tube_mask(N: int, T: int, ratio: float = 0.5, seed: int = 0) -> MaskPattern:
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1], got {ratio}")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(N, size=masked_count(N, ratio), replace=False)
    mask = np.zeros(N, dtype=bool)
    mask[chosen] = True
    return MaskPattern(mask, T, ratio, seed)


def _mask_tensor(mask, T: int, N: int) -> torch.Tensor:
    if isinstance(mask, MaskPattern):
        mask = mask.per_frame_mask
    mask = torch.as_tensor(np.asarray(mask), dtype=torch.bool)
    if mask.shape[-1] != N:
        raise ShapeError(f"mask covers {mask.shape[-1]} tokens, frames have {N}")
    return mask


def apply_mask(tokens: torch.Tensor, mask, mask_embedding: torch.Tensor) -> torch.Tensor:
    """Replace masked tokens of ``(..., T, N, d)`` with ``mask_embedding``.

    ``mask`` is a :class:`MaskPattern`, an ``(N,)`` vector, or ``(B, N)`` per
    sample; it is repeated over frames.
    """
    T, N, d = tokens.shape[-3:]
    if mask_embedding.shape != (d,):
        raise ShapeError(f"mask embedding has shape {tuple(mask_embedding.shape)}, tokens have dim {d}")
    m = _mask_tensor(mask, T, N).to(tokens.device)[..., None]  # (N, 1) or (B, N, 1)
    if m.dim() == 3:
        m = m[:, None]
    return torch.where(m, mask_embedding.to(tokens.dtype), tokens)


def mtm_loss(pred: torch.Tensor, target: torch.Tensor, mask) -> torch.Tensor:
    """Mean absolute error over elements of masked tokens only."""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    T, N, d = pred.shape[-3:]
    m = _mask_tensor(mask, T, N).to(pred.device)
    if m.dim() == 2:
        m = m[:, None, :]
    full = m.expand(pred.shape[:-1])
    count = int(full.sum()) * d
    if count == 0:
        raise LossError("mask selects no tokens; masked L1 is undefined")
    diff = (pred - target).abs() * full.unsqueeze(-1).to(pred.dtype)
    return diff.sum() / count


class MaskedTokenModel(nn.Module):
    """Encoder plus a learned [MASK] token and a linear head back to token space."""

    def __init__(self, encoder: BrainTransformer):
        super().__init__()
        cfg = encoder.cfg
        self.encoder = encoder
        self.mask_embedding = nn.Parameter(torch.randn(cfg.d_token) * 0.02)
        self.head = nn.Linear(cfg.model_dim, cfg.d_token)

    def forward(self, tokens: torch.Tensor, mask) -> torch.Tensor:
        """``tokens: (B, T, N, d)`` -> predicted tokens of the same shape.

        The mask is applied in token space, before the input normalization;
        [CLS] is not part of the pretraining sequence.
        """
        B, T, N, d = tokens.shape
        masked = apply_mask(tokens, mask, self.mask_embedding)
        h = self.encoder.encode(masked, with_cls=False)
        return self.head(h).reshape(B, T, N, d)


def batch_masks(batch_size: int, N: int, T: int, ratio: float, seed: int) -> torch.Tensor:
    """Independent tube masks per sample: ``(B, N)`` bool."""
    rows = [make_tube_mask(N, T, ratio, seed * 100003 + b).per_frame_mask for b in range(batch_size)]
    return torch.as_tensor(np.stack(rows))


def pretrain_step(mtm: MaskedTokenModel, batch: torch.Tensor, ratio: float, optimizer,
                  seed: int, scheduler=None) -> float:
    """One optimization step on ``batch (B, T, N, d)``; returns the loss value."""
    mtm.train()
    B, T, N, _ = batch.shape
    mask = batch_masks(B, N, T, ratio, seed)
    pred = mtm(batch, mask)
    loss = mtm_loss(pred, batch, mask)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite pretraining loss at seed {seed}")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    return loss.item()


def transfer_encoder(mtm: MaskedTokenModel, model: BrainTransformer) -> list[str]:
    """Copy pretrained encoder weights into a supervised model; returns untouched keys."""
    result = model.load_state_dict(encoder_state(mtm.encoder), strict=False)
    if result.unexpected_keys:
        raise ShapeError(f"unexpected keys in pretrained state: {result.unexpected_keys}")
    return list(result.missing_keys)
