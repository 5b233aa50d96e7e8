"""Reconstruction fidelity: PSNR, SSIM and functional-connectivity preservation."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np
import torch
from scipy import ndimage

from ..autoencoder import Autoencoder2D
from ..errors import DataError, ShapeError
from ..tokenizer import AXES, exact_mean, slice_and_encode

DATA_RANGE = 2.0
PSNR_CAP = 100.0


def _pair(a, b):
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, data_range: float = DATA_RANGE) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / mse)


def gaussian_window(size: int = 7, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    r = w.size // 2
    for ax in range(x.ndim):
        x = ndimage.correlate1d(x, w, axis=ax, mode="constant")
    return x[tuple(slice(r, s - r) for s in x.shape)]


def ssim(a, b, window: int = 7, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = DATA_RANGE) -> float:
    """Mean SSIM with an N-d Gaussian window over all fully-contained positions.

    The window has the dimensionality of the input (7^3 for volumes).
    Local statistics are Gaussian-weighted without sample-size correction.
    """
    a, b = _pair(a, b)
    if window % 2 == 0:
        raise ValueError("window size must be odd")
    if min(a.shape) < window:
        raise ValueError(f"window {window} larger than input extent {min(a.shape)}")
    w = gaussian_window(window, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, w), _filter_valid(b, w)
    var_a = _filter_valid(a * a, w) - mu_a ** 2
    var_b = _filter_valid(b * b, w) - mu_b ** 2
    cov = _filter_valid(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def block_parcellation(shape, splits=(2, 2, 2)) -> np.ndarray:
    """Integer ROI labels 1..prod(splits) tiling ``shape`` in equal blocks."""
    labels = np.zeros(shape, dtype=np.int32)
    edges = [np.linspace(0, s, n + 1).astype(int) for s, n in zip(shape, splits)]
    k = 1
    for i in range(splits[0]):
        for j in range(splits[1]):
            for l in range(splits[2]):
                labels[edges[0][i]:edges[0][i + 1], edges[1][j]:edges[1][j + 1], edges[2][l]:edges[2][l + 1]] = k
                k += 1
    return labels


def roi_timeseries(vol, roi_labels) -> np.ndarray:
    """Mean signal per ROI label (> 0): ``(T, n_rois)``."""
    data = np.asarray(getattr(vol, "data", vol), dtype=np.float64)
    roi_labels = np.asarray(roi_labels)
    if data.shape[1:] != roi_labels.shape:
        raise ShapeError(f"atlas {roi_labels.shape} does not match volume {data.shape[1:]}")
    ids = [i for i in np.unique(roi_labels) if i > 0]
    flat = data.reshape(data.shape[0], -1)
    lab = roi_labels.reshape(-1)
    return np.stack([flat[:, lab == i].mean(axis=1) for i in ids], axis=1) if ids else np.zeros((data.shape[0], 0))


def correlation_matrix(series: np.ndarray) -> np.ndarray:
    """Pearson correlations between columns; constant columns correlate as 0 (diagonal too)."""
    centered = series - series.mean(axis=0)
    norms = np.sqrt((centered ** 2).sum(axis=0))
    live = norms > 0
    safe = np.where(live, norms, 1.0)
    corr = (centered.T @ centered) / np.outer(safe, safe)
    corr[~live, :] = 0.0
    corr[:, ~live] = 0.0
    np.fill_diagonal(corr, live.astype(np.float64))
    return np.clip(corr, -1.0, 1.0)


def fc_frobenius(vol_orig, vol_recon, roi_labels) -> float:
    """Frobenius norm between ROI functional-connectivity matrices of two scans."""
    a, b = _pair(vol_orig, vol_recon)
    if a.ndim != 4 or a.shape[0] < 3:
        raise DataError("functional connectivity needs a 4D scan with at least 3 frames")
    sa, sb = roi_timeseries(a, roi_labels), roi_timeseries(b, roi_labels)
    if sa.shape[1] < 2:
        raise DataError("need at least two ROIs with voxels")
    return float(np.linalg.norm(correlation_matrix(sa) - correlation_matrix(sb)))


# -- three-axis reconstruction ------------------------------------------------------

@torch.no_grad()
def reconstruct_axes(vol3d, ae: Autoencoder2D | Mapping[str, Autoencoder2D]) -> dict:
    """Per-axis slice-wise encode/decode of one frame.  ``ae`` may map axis name to backend."""
    vol = torch.as_tensor(np.asarray(vol3d, dtype=np.float32))
    out = {}
    for ax_name in AXES:
        backend = ae[ax_name] if isinstance(ae, Mapping) else ae
        latents = slice_and_encode(vol, ax_name, backend)
        images = torch.cat([backend.decode(latents[i:i + 128]) for i in range(0, latents.shape[0], 128)])
        out[ax_name] = exact_mean(images.unbind(dim=1)).movedim(0, AXES.index(ax_name))
    return out


def reconstruct_three_axis_average(vol3d, ae) -> np.ndarray:
    recons = reconstruct_axes(vol3d, ae)
    return exact_mean([recons[a] for a in AXES]).numpy()


@dataclass
class ReconReport:
    psnr: float
    ssim: float
    fc_frobenius: float | None
    per_frame_psnr: list

    def as_row(self) -> dict:
        return {"psnr": min(self.psnr, PSNR_CAP), "ssim": self.ssim, "fc_frobenius": self.fc_frobenius}


def recon_report(vol, ae, roi_labels=None, ssim_window: int = 7) -> ReconReport:
    """Reconstruct every frame by three-axis averaging and score it against the original."""
    data = np.asarray(getattr(vol, "data", vol), dtype=np.float32)
    recon = np.stack([reconstruct_three_axis_average(frame, ae) for frame in data])
    per_frame = [psnr(o, r) for o, r in zip(data, recon)]
    ssims = [ssim(o, r, window=ssim_window) for o, r in zip(data, recon)]
    fc = None
    if roi_labels is not None and data.shape[0] >= 3:
        fc = fc_frobenius(data, recon, roi_labels)
    return ReconReport(psnr(data, recon), float(np.mean(ssims)), fc, per_frame)
