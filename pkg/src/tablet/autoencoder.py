"""2D slice autoencoders behind a common encode/decode contract.

Three backends share the interface:

* :class:`LosslessAutoencoder` -- space-to-channel rearrangement, exact inverse.
* :class:`TinyConvAutoencoder` -- small trainable model for desk-scale runs.
* :func:`load_external_autoencoder` -- wraps a checkpoint trained elsewhere.

Every backend maps ``(B, 3, H, W)`` images in [-1, 1] to
``(B, C', H/f, W/f)`` latents with ``f = 32`` by default.
"""
from __future__ import annotations

import logging
import warnings
from pathlib import Path

import torch
from torch import nn
from torch.nn import functional as F

from .errors import AdapterError, ShapeError

log = logging.getLogger(__name__)

FACTOR = 32


class Autoencoder2D(nn.Module):
    latent_channels: int
    factor: int = FACTOR
    differentiable: bool = True

    def _check(self, x: torch.Tensor) -> tuple[torch.Tensor, bool]:
        single = x.dim() == 3
        if single:
            x = x.unsqueeze(0)
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (3, H, W) or (B, 3, H, W) image, got {tuple(x.shape)}")
        H, W = x.shape[-2:]
        if H % self.factor or W % self.factor:
            raise ShapeError(f"spatial extent {(H, W)} not divisible by {self.factor}")
        return x, single

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        x, single = self._check(x)
        z = self._encode(x)
        return z[0] if single else z

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        single = z.dim() == 3
        if single:
            z = z.unsqueeze(0)
        if z.dim() != 4 or z.shape[1] != self.latent_channels:
            raise ShapeError(f"expected latent with {self.latent_channels} channels, got {tuple(z.shape)}")
        x = self._decode(z)
        return x[0] if single else x

    def forward(self, x):
        return self.decode(self.encode(x))

    def _encode(self, x):
        raise NotImplementedError

    def _decode(self, z):
        raise NotImplementedError


class LosslessAutoencoder(Autoencoder2D):
    """Pixel-unshuffle encoder; latent cell (i, j) holds exactly the input block
    ``[f*i, f*i+f) x [f*j, f*j+f)``, so ``C' = 3 * f * f``."""

    def __init__(self, factor: int = FACTOR):
        super().__init__()
        self.factor = factor
        self.latent_channels = 3 * factor * factor

    def _encode(self, x):
        return F.pixel_unshuffle(x, self.factor)

    def _decode(self, z):
        return F.pixel_shuffle(z, self.factor)


def reference_lossless_ae(factor: int = FACTOR) -> LosslessAutoencoder:
    return LosslessAutoencoder(factor)


class TinyConvAutoencoder(Autoencoder2D):
    """Two-stage space-to-channel autoencoder with 1x1 mixing layers.

    Downsampling is split as ``4 * (factor // 4)``; each stage is a
    pixel-unshuffle followed by a pointwise conv, mirroring the residual
    space-to-channel design of deep-compression autoencoders at toy size.
    """

    def __init__(self, latent_channels: int = 32, factor: int = FACTOR, hidden: int = 32):
        super().__init__()
        if factor % 4:
            raise ShapeError("factor must be a multiple of 4")
        self.factor = factor
        self.latent_channels = latent_channels
        self.hidden = hidden
        f1, f2 = 4, factor // 4
        self.f1, self.f2 = f1, f2
        self.enc1 = nn.Conv2d(3 * f1 * f1, hidden, 1)
        self.enc2 = nn.Conv2d(hidden * f2 * f2, latent_channels, 1)
        self.dec2 = nn.Conv2d(latent_channels, hidden * f2 * f2, 1)
        self.dec1 = nn.Conv2d(hidden, 3 * f1 * f1, 1)

    def _encode(self, x):
        h = F.gelu(self.enc1(F.pixel_unshuffle(x, self.f1)))
        return self.enc2(F.pixel_unshuffle(h, self.f2))

    def _decode(self, z):
        h = F.gelu(F.pixel_shuffle(self.dec2(z), self.f2))
        return torch.tanh(F.pixel_shuffle(self.dec1(h), self.f1))

    def config(self) -> dict:
        return {"latent_channels": self.latent_channels, "factor": self.factor, "hidden": self.hidden}


def fit_autoencoder(ae: Autoencoder2D, images: torch.Tensor, steps: int = 200, lr: float = 3e-3,
                    batch_size: int = 32, seed: int = 0) -> list[float]:
    """Train ``ae`` on ``(n, 3, H, W)`` images with an L2 reconstruction loss; returns losses."""
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.AdamW(ae.parameters(), lr=lr, weight_decay=1e-4)
    losses = []
    ae.train()
    for _ in range(steps):
        idx = torch.randint(0, images.shape[0], (min(batch_size, images.shape[0]),), generator=gen)
        batch = images[idx]
        loss = F.mse_loss(ae(batch), batch)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    ae.eval()
    return losses


def save_autoencoder(ae: TinyConvAutoencoder, path):
    torch.save({"kind": "tiny_conv", "config": ae.config(), "state_dict": ae.state_dict()}, path)


class _ModuleAdapter(Autoencoder2D):
    """Wraps an arbitrary module exposing ``encode``/``decode``."""

    def __init__(self, inner, latent_channels, factor, unwrap=None):
        super().__init__()
        self.inner = inner
        self.latent_channels = latent_channels
        self.factor = factor
        self._unwrap = unwrap or (lambda out: out)

    def _encode(self, x):
        return self._unwrap(self.inner.encode(x))

    def _decode(self, z):
        return self._unwrap(self.inner.decode(z))


def _load_diffusers(path):
    try:
        from diffusers import AutoencoderDC
    except ImportError as exc:
        raise AdapterError(
            f"{path} looks like a diffusers model directory; install `diffusers` to load it"
        ) from exc
    model = AutoencoderDC.from_pretrained(str(path))
    cfg = model.config
    channels = int(cfg.latent_channels)
    factor = 2 ** (len(cfg.encoder_block_out_channels) - 1)

    def unwrap(out):
        for attr in ("latent", "sample"):
            if hasattr(out, attr):
                return getattr(out, attr)
        return out

    return _ModuleAdapter(model, channels, factor, unwrap)


def load_external_autoencoder(checkpoint_path, expected_channels: int = 32,
                              expected_factor: int = FACTOR) -> Autoencoder2D:
    """Load a trained 2D autoencoder and check it reports ``C'`` and ``f``.

    Accepted layouts: a diffusers ``AutoencoderDC`` directory (needs
    ``diffusers``), an archive written by :func:`save_autoencoder`, or a
    TorchScript module exposing ``encode``/``decode`` and integer attributes
    ``latent_channels`` and ``factor``.  The returned module is in eval mode.
    """
    path = Path(checkpoint_path)
    if not path.exists():
        raise AdapterError(f"checkpoint not found: {path} (set `autoencoder.checkpoint` in the config)")
    if path.is_dir():
        if not (path / "config.json").exists():
            raise AdapterError(f"{path} is a directory without config.json; not a diffusers checkpoint")
        ae = _load_diffusers(path)
    else:
        ae = _load_file(path)
    if ae.latent_channels != expected_channels or ae.factor != expected_factor:
        raise AdapterError(
            f"{path}: checkpoint reports C'={ae.latent_channels}, f={ae.factor}; "
            f"expected C'={expected_channels}, f={expected_factor}"
        )
    ae.eval()
    for p in ae.parameters():
        p.requires_grad_(False)
    return ae


def _load_file(path: Path) -> Autoencoder2D:
    try:
        blob = torch.load(str(path), map_location="cpu", weights_only=True)
    except Exception:
        blob = None
    if blob is None:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", DeprecationWarning)
                scripted = torch.jit.load(str(path), map_location="cpu")
        except Exception as exc:
            raise AdapterError(f"{path}: unreadable checkpoint ({exc})") from exc
        try:
            channels, factor = int(scripted.latent_channels), int(scripted.factor)
        except AttributeError as exc:
            raise AdapterError(f"{path}: TorchScript module lacks latent_channels/factor attributes") from exc
        return _ModuleAdapter(scripted, channels, factor)
    if not isinstance(blob, dict) or blob.get("kind") != "tiny_conv":
        raise AdapterError(f"{path}: unrecognized checkpoint layout")
    ae = TinyConvAutoencoder(**blob["config"])
    try:
        ae.load_state_dict(blob["state_dict"])
    except RuntimeError as exc:
        raise AdapterError(f"{path}: weights do not match config ({exc})") from exc
    return ae

