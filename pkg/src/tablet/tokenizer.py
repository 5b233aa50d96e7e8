"""Frame tokenization: slice along each axis, encode, patch-group, aggregate.

Layout conventions (all fixed bijections):

* axes are concatenated in the order depth, height, width;
* inside a patch the ``patch * C'`` channels are slice-offset major:
  channel ``o * C' + c`` is latent channel ``c`` of slice ``patch*i + o``;
* grid cells are linearized lexicographically in ``(i, j, k)`` (k fastest).
"""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .autoencoder import Autoencoder2D
from .errors import CacheError, ConfigError, ShapeError

AXES = ("depth", "height", "width")
PATCH = 32
SCHEMES = {"27x3072": 1, "9x9216": 3, "3x27648": 9}


@dataclass
class TokenSequence:
    data: np.ndarray  # (T, N, d_token) float32
    frame_origin: int = 0
    scheme: str = "27x3072"
    scan_id: str = ""

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]


def _axis_index(axis) -> int:
    if isinstance(axis, str):
        if axis not in AXES:
            raise ConfigError(f"unknown axis {axis!r}; choose from {AXES}")
        return AXES.index(axis)
    if axis not in (0, 1, 2):
        raise ConfigError(f"axis index must be 0, 1 or 2, got {axis!r}")
    return int(axis)


def _as_volume3d(vol) -> torch.Tensor:
    vol = torch.as_tensor(vol)
    if vol.dim() == 4:
        if vol.shape[0] != 1:
            raise ShapeError(f"expected a single-channel volume, got {tuple(vol.shape)}")
        vol = vol[0]
    if vol.dim() != 3:
        raise ShapeError(f"expected (1, D, H, W) or (D, H, W), got {tuple(vol.shape)}")
    return vol


def slice_and_encode(vol3d, axis, ae: Autoencoder2D, batch_size: int = 128) -> torch.Tensor:
    """Encode every 2D slice along ``axis``; returns ``(S, C', A/f, B/f)``.

    Each slice is duplicated into three channels before encoding.
    """
    vol = _as_volume3d(vol3d)
    ax = _axis_index(axis)
    rest = [vol.shape[a] for a in range(3) if a != ax]
    if any(r % ae.factor for r in rest):
        raise ShapeError(f"extents {tuple(rest)} across axis {AXES[ax]} not divisible by {ae.factor}")
    slices = vol.movedim(ax, 0)  # (S, A, B)
    out = []
    for start in range(0, slices.shape[0], batch_size):
        chunk = slices[start:start + batch_size]
        rgb = chunk.unsqueeze(1).expand(-1, 3, -1, -1)
        out.append(ae.encode(rgb))
    return torch.cat(out, dim=0)


def patch_group(stack: torch.Tensor, axis, patch: int = PATCH) -> torch.Tensor:
    """Fold ``patch`` consecutive slices into channels: ``(S, C', a, b) -> (patch*C', d, h, w)``.

    For ``axis='depth'`` the stack is ``(D, C', H/f, W/f)``; height stacks are
    ``(H, C', D/f, W/f)`` and width stacks ``(W, C', D/f, H/f)``.
    """
    ax = _axis_index(axis)
    if stack.dim() != 4:
        raise ShapeError(f"expected (S, C', a, b) latent stack, got {tuple(stack.shape)}")
    S, C, a, b = stack.shape
    if S % patch:
        raise ShapeError(f"slice count {S} not divisible by patch {patch}")
    g = stack.reshape(S // patch, patch, C, a, b)  # (n, o, c, a, b)
    # move the patch index n into its spatial slot among (d, h, w)
    order = {0: (1, 2, 0, 3, 4), 1: (1, 2, 3, 0, 4), 2: (1, 2, 3, 4, 0)}[ax]
    g = g.permute(order)
    return g.reshape(patch * C, *g.shape[2:])


def patch_ungroup(grouped: torch.Tensor, axis, patch: int = PATCH) -> torch.Tensor:
    ax = _axis_index(axis)
    if grouped.dim() != 4 or grouped.shape[0] % patch:
        raise ShapeError(f"cannot ungroup shape {tuple(grouped.shape)} with patch {patch}")
    C = grouped.shape[0] // patch
    g = grouped.reshape(patch, C, *grouped.shape[1:])
    inverse = {0: (2, 0, 1, 3, 4), 1: (3, 0, 1, 2, 4), 2: (4, 0, 1, 2, 3)}[ax]
    g = g.permute(inverse)  # (n, o, c, a, b)
    return g.reshape(g.shape[0] * patch, C, *g.shape[3:])


def aggregate_axes(gD: torch.Tensor, gH: torch.Tensor, gW: torch.Tensor) -> torch.Tensor:
    """Concatenate per-axis grids ``(32C', d, h, w)`` into a token grid ``(d, h, w, 96C')``."""
    if not (gD.shape == gH.shape == gW.shape):
        raise ShapeError(f"grid shapes differ: {tuple(gD.shape)}, {tuple(gH.shape)}, {tuple(gW.shape)}")
    return torch.cat([gD, gH, gW], dim=0).permute(1, 2, 3, 0)


def split_axes(grid: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    if grid.shape[-1] % 3:
        raise ShapeError(f"token dim {grid.shape[-1]} not divisible by 3")
    parts = grid.permute(3, 0, 1, 2).chunk(3, dim=0)
    return tuple(p.contiguous() for p in parts)


def _group_size(scheme) -> int:
    if isinstance(scheme, int):
        return scheme
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown aggregation scheme {scheme!r}; choose from {sorted(SCHEMES)}")
    return SCHEMES[scheme]


def regroup_scheme(grid: torch.Tensor, scheme="27x3072") -> torch.Tensor:
    """Linearize the grid and merge ``g`` consecutive tokens: ``(d,h,w,D) -> (N/g, g*D)``."""
    g = _group_size(scheme)
    flat = grid.reshape(-1, grid.shape[-1])
    if flat.shape[0] % g:
        raise ConfigError(f"scheme merges {g} tokens but the grid has {flat.shape[0]}")
    return flat.reshape(flat.shape[0] // g, g * flat.shape[1])


def ungroup_scheme(tokens: torch.Tensor, grid_shape, scheme="27x3072") -> torch.Tensor:
    g = _group_size(scheme)
    n_cells = int(np.prod(grid_shape))
    return tokens.reshape(n_cells, tokens.shape[-1] // g).reshape(*grid_shape, -1)


def tokenize_frame(vol3d, ae: Autoencoder2D, scheme="27x3072", patch: int = PATCH) -> torch.Tensor:
    """Tokens ``(N, d_token)`` for one 3D frame; differentiable when ``ae`` is."""
    vol = _as_volume3d(vol3d)
    grids = [patch_group(slice_and_encode(vol, ax, ae), ax, patch) for ax in AXES]
    return regroup_scheme(aggregate_axes(*grids), scheme)


def exact_mean(parts):
    """Arithmetic mean written as ``a + sum(p - a) / n`` so identical inputs return ``a`` bit-exactly."""
    first, rest = parts[0], parts[1:]
    if not rest:
        return first
    return first + sum(p - first for p in rest) / len(parts)


def grid_shape_for(spatial_shape, factor: int = 32) -> tuple:
    return tuple(s // factor for s in spatial_shape)


def detokenize_axes(tokens: torch.Tensor, ae: Autoencoder2D, spatial_shape, scheme="27x3072",
                    patch: int = PATCH) -> dict:
    """Invert tokenization separately for each axis; returns ``{axis: (D, H, W)}``.

    Decoded slices are reduced to one channel by averaging the three RGB channels.
    """
    grid = ungroup_scheme(tokens, grid_shape_for(spatial_shape, ae.factor), scheme)
    out = {}
    for ax_name, part in zip(AXES, split_axes(grid)):
        stack = patch_ungroup(part, ax_name, patch)
        images = exact_mean(ae.decode(stack).unbind(dim=1))  # (S, A, B)
        out[ax_name] = images.movedim(0, AXES.index(ax_name))
    return out


def detokenize_frame(tokens, ae, spatial_shape, scheme="27x3072", patch: int = PATCH) -> torch.Tensor:
    """Three-axis average of the per-axis reconstructions."""
    recons = detokenize_axes(tokens, ae, spatial_shape, scheme, patch)
    return exact_mean([recons[a] for a in AXES])


@torch.no_grad()
def tokenize_sequence(vol, ae: Autoencoder2D, scheme="27x3072", frame_origin: int = 0) -> TokenSequence:
    """Tokenize every frame independently; ``vol`` is a Volume4D or ``(T, D, H, W)`` array."""
    data = getattr(vol, "data", vol)
    scan_id = getattr(vol, "scan_id", "")
    data = torch.as_tensor(np.asarray(data, dtype=np.float32))
    if data.dim() != 4:
        raise ShapeError(f"expected (T, D, H, W), got {tuple(data.shape)}")
    frames = [tokenize_frame(data[t], ae, scheme).numpy() for t in range(data.shape[0])]
    scheme_name = scheme if isinstance(scheme, str) else f"group{scheme}"
    return TokenSequence(np.stack(frames).astype(np.float32), frame_origin, scheme_name, scan_id)


# -- cache -----------------------------------------------------------------

_MAGIC = b"TABLETTOK1\n"


def cache_write(path, seq: TokenSequence) -> Path:
    """Atomically write ``seq``: magic line, JSON header line, little-endian float32 payload."""
    path = Path(path)
    payload = np.ascontiguousarray(seq.data, dtype="<f4").tobytes()
    header = {
        "scheme": seq.scheme,
        "shape": list(seq.data.shape),
        "frame_origin": int(seq.frame_origin),
        "scan_id": seq.scan_id,
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def cache_read(path) -> TokenSequence:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError as exc:
        raise CacheError(f"no token cache at {path}") from exc
    if not raw.startswith(_MAGIC):
        raise CacheError(f"{path}: not a token cache file")
    end = raw.find(b"\n", len(_MAGIC))
    if end < 0:
        raise CacheError(f"{path}: truncated header")
    try:
        header = json.loads(raw[len(_MAGIC):end])
    except ValueError as exc:
        raise CacheError(f"{path}: corrupt header") from exc
    payload = raw[end + 1:]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CacheError(f"{path}: checksum mismatch; re-tokenize")
    shape = tuple(header["shape"])
    data = np.frombuffer(payload, dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise CacheError(f"{path}: payload size does not match header shape {shape}")
    return TokenSequence(data.reshape(shape).astype(np.float32), header["frame_origin"],
                         header["scheme"], header["scan_id"])


def cached_tokenize(vol, ae, cache_path, scheme="27x3072", stats: dict | None = None) -> TokenSequence:
    """Read the cache if valid, otherwise tokenize and write it. Counts hits/misses in ``stats``."""
    stats = stats if stats is not None else {}
    path = Path(cache_path)
    if path.exists():
        try:
            seq = cache_read(path)
            stats["hits"] = stats.get("hits", 0) + 1
            return seq
        except CacheError:
            pass
    seq = tokenize_sequence(vol, ae, scheme)
    cache_write(path, seq)
    stats["misses"] = stats.get("misses", 0) + 1
    return seq
