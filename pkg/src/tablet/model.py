"""Transformer encoder over tokenized fMRI sequences.

Tokens are normalized, linearly projected, a learned [CLS] embedding is
prepended and the full sequence normalized again.  Blocks are pre-norm with
grouped-query attention (rotary positions) and a gated MLP.  Predictions are
read from the [CLS] position.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, NumericError, ShapeError

ROPE_BASE = 10000.0


@dataclass
class ModelConfig:
    layers: int = 12
    heads: int = 14
    kv_heads: int = 2
    model_dim: int = 448
    d_token: int = 3072
    T: int = 256
    tokens_per_frame: int = 27
    head_kind: str = "binary"
    mlp_ratio: float = 4.0
    norm_kind: str = "rms"
    rope: bool = True
    dropout: float = 0.0

    def __post_init__(self):
        if self.heads % self.kv_heads:
            raise ConfigError(f"heads={self.heads} not divisible by kv_heads={self.kv_heads}")
        if self.model_dim % self.heads:
            raise ConfigError(f"model_dim={self.model_dim} not divisible by heads={self.heads}")
        if self.rope and self.head_dim % 2:
            raise ConfigError(f"rotary dim {self.head_dim} must be even")
        if self.head_kind not in ("binary", "regression"):
            raise ConfigError(f"unknown head_kind {self.head_kind!r}")
        if self.norm_kind not in ("rms", "layer"):
            raise ConfigError(f"unknown norm_kind {self.norm_kind!r}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


def make_norm(kind: str, dim: int) -> nn.Module:
    return RMSNorm(dim) if kind == "rms" else nn.LayerNorm(dim)


# -- rotary positions ----------------------------------------------------------

def rope_angles(positions: torch.Tensor, dim: int, base: float = ROPE_BASE) -> torch.Tensor:
    """Angles ``m * theta_i`` with ``theta_i = base^(-2i/dim)``; shape ``(len(positions), dim/2)``."""
    if dim % 2:
        raise ConfigError(f"rotary dim must be even, got {dim}")
    inv_freq = base ** (-torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    return positions.to(torch.float64)[:, None] * inv_freq[None, :]


def rope_rotate(x: torch.Tensor, positions, base: float = ROPE_BASE) -> torch.Tensor:
    """Rotate adjacent feature pairs ``(x[2i], x[2i+1])`` of ``x[..., L, dim]`` by ``m * theta_i``."""
    dim = x.shape[-1]
    positions = torch.as_tensor(positions, device=x.device)
    if positions.dim() == 0:
        positions = positions.expand(x.shape[-2])
    ang = rope_angles(positions, dim, base)
    cos = ang.cos().to(x.dtype)
    sin = ang.sin().to(x.dtype)
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.stack((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1)
    return out.flatten(-2)


def sequence_positions(T: int, N: int, with_cls: bool = True) -> torch.Tensor:
    """Flat frame-major positions: CLS at 0, token (t, n) at ``t*N + n + 1``."""
    pos = torch.arange(1, T * N + 1)
    if with_cls:
        pos = torch.cat([torch.zeros(1, dtype=pos.dtype), pos])
    return pos


# -- attention -----------------------------------------------------------------

def _expand_kv(k, v, heads: int, kv_heads: int):
    if heads % kv_heads:
        raise ConfigError(f"heads={heads} not divisible by kv_heads={kv_heads}")
    if k.shape[-3] != kv_heads or v.shape[-3] != kv_heads:
        raise ShapeError(f"expected {kv_heads} key/value heads, got {k.shape[-3]}")
    group = heads // kv_heads
    if group > 1:
        # query head h reads kv head h // group
        k = k.repeat_interleave(group, dim=-3)
        v = v.repeat_interleave(group, dim=-3)
    return k, v


def attention_weights(q, k, heads: int, kv_heads: int) -> torch.Tensor:
    """Explicit softmax attention matrix ``(..., heads, Lq, Lk)`` (non-causal)."""
    k, _ = _expand_kv(k, k, heads, kv_heads)
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    return scores.softmax(dim=-1)


def gqa_attention(q, k, v, heads: int, kv_heads: int, fused: bool = True) -> torch.Tensor:
    """Grouped-query attention on ``q: (B, heads, L, hd)``, ``k, v: (B, kv_heads, L, hd)``.

    ``fused`` uses ``scaled_dot_product_attention``; otherwise the explicit
    softmax path, which materializes the full attention matrix.
    """
    if q.shape[-3] != heads:
        raise ShapeError(f"expected {heads} query heads, got {q.shape[-3]}")
    if fused:
        k, v = _expand_kv(k, v, heads, kv_heads)
        return F.scaled_dot_product_attention(q, k, v)
    w = attention_weights(q, k, heads, kv_heads)
    _, v = _expand_kv(v, v, heads, kv_heads)
    return w @ v


class GroupedQueryAttention(nn.Module):
    def __init__(self, dim: int, heads: int, kv_heads: int, rope: bool = True):
        super().__init__()
        self.heads, self.kv_heads = heads, kv_heads
        self.head_dim = dim // heads
        self.rope = rope
        self.wq = nn.Linear(dim, heads * self.head_dim, bias=False)
        self.wk = nn.Linear(dim, kv_heads * self.head_dim, bias=False)
        self.wv = nn.Linear(dim, kv_heads * self.head_dim, bias=False)
        self.wo = nn.Linear(heads * self.head_dim, dim, bias=False)
        self.fused = True

    def forward(self, x, positions=None):
        B, L, _ = x.shape
        q = self.wq(x).view(B, L, self.heads, self.head_dim).transpose(1, 2)
        k = self.wk(x).view(B, L, self.kv_heads, self.head_dim).transpose(1, 2)
        v = self.wv(x).view(B, L, self.kv_heads, self.head_dim).transpose(1, 2)
        if self.rope:
            if positions is None:
                positions = torch.arange(L)
            q = rope_rotate(q, positions)
            k = rope_rotate(k, positions)
        ctx = gqa_attention(q, k, v, self.heads, self.kv_heads, fused=self.fused)
        return self.wo(ctx.transpose(1, 2).reshape(B, L, -1))


class GatedMLP(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.gate = nn.Linear(dim, hidden, bias=False)
        self.up = nn.Linear(dim, hidden, bias=False)
        self.down = nn.Linear(hidden, dim, bias=False)

    def forward(self, x):
        return self.down(F.silu(self.gate(x)) * self.up(x))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = make_norm(cfg.norm_kind, cfg.model_dim)
        self.attn = GroupedQueryAttention(cfg.model_dim, cfg.heads, cfg.kv_heads, cfg.rope)
        self.norm2 = make_norm(cfg.norm_kind, cfg.model_dim)
        self.mlp = GatedMLP(cfg.model_dim, int(cfg.mlp_ratio * cfg.model_dim))
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, positions=None):
        x = x + self.drop(self.attn(self.norm1(x), positions))
        return x + self.drop(self.mlp(self.norm2(x)))


class BrainTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.input_norm = make_norm(cfg.norm_kind, cfg.d_token)
        self.proj = nn.Linear(cfg.d_token, cfg.model_dim, bias=False)
        self.cls = nn.Parameter(torch.randn(cfg.model_dim) * 0.02)
        self.embed_norm = make_norm(cfg.norm_kind, cfg.model_dim)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.final_norm = make_norm(cfg.norm_kind, cfg.model_dim)
        self.head = nn.Linear(cfg.model_dim, 1)
        self._init_weights()

    def _init_weights(self):
        for name, p in self.named_parameters():
            if p.dim() == 2:
                nn.init.normal_(p, std=0.02)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def _flatten(self, tokens: torch.Tensor) -> tuple[torch.Tensor, int]:
        if tokens.dim() == 4:
            B, T, N, d = tokens.shape
            if N != self.cfg.tokens_per_frame:
                raise ShapeError(f"expected {self.cfg.tokens_per_frame} tokens per frame, got {N}")
            tokens = tokens.reshape(B, T * N, d)
        if tokens.dim() != 3:
            raise ShapeError(f"expected (B, T, N, d) or (B, T*N, d) tokens, got {tuple(tokens.shape)}")
        if tokens.shape[-1] != self.cfg.d_token:
            raise ShapeError(f"token dim {tokens.shape[-1]} != configured d_token {self.cfg.d_token}")
        if tokens.shape[1] % self.cfg.tokens_per_frame:
            raise ShapeError(f"sequence length {tokens.shape[1]} is not a whole number of frames")
        return tokens, tokens.shape[1] // self.cfg.tokens_per_frame

    def project(self, tokens: torch.Tensor) -> torch.Tensor:
        """Normalize and project tokens, no [CLS]: ``(B, L, d_token) -> (B, L, model_dim)``."""
        return self.proj(self.input_norm(tokens))

    def embed_input(self, tokens: torch.Tensor) -> torch.Tensor:
        """``(B, T, N, d)`` or ``(B, T*N, d)`` -> ``(B, T*N + 1, model_dim)`` with [CLS] at 0."""
        tokens, _ = self._flatten(tokens)
        x = self.project(tokens)
        cls = self.cls.expand(x.shape[0], 1, -1)
        return self.embed_norm(torch.cat([cls, x], dim=1))

    def encode(self, tokens: torch.Tensor, with_cls: bool = True) -> torch.Tensor:
        """Final hidden states ``(B, L, model_dim)``.

        Without [CLS] the positions still start at 1 so pretrained weights
        see the same rotary phases as in the supervised model.
        """
        tokens, T = self._flatten(tokens)
        N = self.cfg.tokens_per_frame
        if with_cls:
            x = self.embed_input(tokens)
        else:
            x = self.embed_norm(self.project(tokens))
        positions = sequence_positions(T, N, with_cls).to(x.device)
        for blk in self.blocks:
            x = blk(x, positions)
        return self.final_norm(x)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """Logits (binary) or real predictions (regression), shape ``(B,)``."""
        h = self.encode(tokens)
        out = self.head(h[:, 0]).squeeze(-1)
        if not torch.isfinite(out).all():
            raise NumericError("non-finite model output; check inputs and learning rate")
        return out

    def set_fused_attention(self, fused: bool):
        for blk in self.blocks:
            blk.attn.fused = fused


def encoder_state(model: BrainTransformer) -> dict:
    """All parameters except the task head."""
    return {k: v for k, v in model.state_dict().items() if not k.startswith("head.")}


def save_checkpoint(path, model: BrainTransformer, extra: dict | None = None):
    """One archive: config header plus named parameter tensors (and optional extra blobs)."""
    blob = {"config": model.cfg.to_dict(), "state_dict": model.state_dict()}
    if extra:
        blob["extra"] = extra
    torch.save(blob, path)


def load_checkpoint(path, map_location="cpu") -> tuple[BrainTransformer, dict]:
    blob = torch.load(path, map_location=map_location, weights_only=True)
    model = BrainTransformer(ModelConfig(**blob["config"]))
    model.load_state_dict(blob["state_dict"])
    return model, blob.get("extra", {})
