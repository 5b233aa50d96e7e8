"""Integrated Gradients from model output back to input voxels."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..errors import UnsupportedBackendError
from ..tokenizer import tokenize_frame

METHODS = ("riemann_left", "riemann_right", "riemann_middle", "riemann_trapezoid")


@dataclass
class AttributionMap:
    data: np.ndarray  # (D, H, W)
    target_class: int | None
    baseline: str
    steps: int
    residual: float  # |sum(attr) - (f(x) - f(baseline))|
    relative_residual: float = float("nan")


def _alphas(steps: int, method: str):
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    k = torch.arange(steps, dtype=torch.float64)
    if method == "riemann_left":
        return k / steps, torch.full((steps,), 1.0 / steps, dtype=torch.float64)
    if method == "riemann_right":
        return (k + 1) / steps, torch.full((steps,), 1.0 / steps, dtype=torch.float64)
    if method == "riemann_middle":
        return (k + 0.5) / steps, torch.full((steps,), 1.0 / steps, dtype=torch.float64)
    alphas = torch.linspace(0, 1, steps, dtype=torch.float64)
    w = torch.full((steps,), 1.0 / (steps - 1), dtype=torch.float64)
    w[0] = w[-1] = 0.5 / (steps - 1)
    return alphas, w


def integrated_gradients(f, x: torch.Tensor, baseline: torch.Tensor | None = None, steps: int = 64,
                         method: str = "riemann_middle", batch_size: int = 16) -> torch.Tensor:
    """Path integral of gradients of scalar-per-sample ``f`` along ``baseline -> x``.

    ``f`` maps a batch ``(B, *x.shape)`` to ``(B,)``.  Returns an attribution
    with the shape of ``x``; its sum approximates ``f(x) - f(baseline)``.
    """
    x = x.detach()
    baseline = torch.zeros_like(x) if baseline is None else baseline.detach().to(x.dtype)
    alphas, weights = _alphas(steps, method)
    delta = x - baseline
    total = torch.zeros_like(x, dtype=torch.float64)
    for start in range(0, steps, batch_size):
        a = alphas[start:start + batch_size].to(x.dtype)
        shape = (-1,) + (1,) * x.dim()
        path = (baseline.unsqueeze(0) + a.view(shape) * delta.unsqueeze(0)).requires_grad_(True)
        out = f(path)
        (grads,) = torch.autograd.grad(out.sum(), path)
        w = weights[start:start + batch_size].view(shape)
        total += (grads.double() * w).sum(0)
    return (total * delta.double()).to(x.dtype)


def completeness_residual(f, x, baseline, attribution) -> tuple[float, float]:
    """Absolute and relative gap between ``sum(attribution)`` and ``f(x) - f(baseline)``."""
    with torch.no_grad():
        fx, fb = f(torch.stack([x, baseline])).double().tolist()
    diff = fx - fb
    gap = abs(float(attribution.double().sum()) - diff)
    return gap, gap / abs(diff) if diff else float("inf")


def frame_model(model, ae):
    """``f(frames (B, D, H, W)) -> (B,)`` logits: tokenize each frame, run it as a one-frame sequence."""
    if not getattr(ae, "differentiable", False):
        raise UnsupportedBackendError(f"{type(ae).__name__} does not support gradients to voxels")

    def f(frames):
        tokens = torch.stack([tokenize_frame(fr, ae) for fr in frames])
        return model(tokens.unsqueeze(1))

    return f


def attribute_frame(model, ae, frame, steps: int = 64, baseline=None, target_class: int | None = None,
                    method: str = "riemann_middle", batch_size: int = 8) -> AttributionMap:
    """IG map of one preprocessed frame against the model logit, zero-volume baseline by default.

    ``target_class=0`` attributes the negated logit, i.e. evidence for the negative class.
    """
    model.eval()
    logit = frame_model(model, ae)
    f = (lambda b: -logit(b)) if target_class == 0 else logit
    x = torch.as_tensor(np.asarray(frame, dtype=np.float32))
    base = torch.zeros_like(x) if baseline is None else torch.as_tensor(baseline, dtype=x.dtype)
    attr = integrated_gradients(f, x, base, steps, method, batch_size)
    gap, rel = completeness_residual(f, x, base, attr)
    return AttributionMap(attr.detach().numpy(), target_class, "zeros" if baseline is None else "custom", steps,
                          gap, rel)


def select_confident(probs, labels, target_class: int | None = None, threshold: float = 0.75) -> np.ndarray:
    """Indices of correctly classified samples whose predicted-class probability is >= ``threshold``."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    pred = (probs >= 0.5).astype(int)
    conf = np.where(pred == 1, probs, 1.0 - probs)
    keep = (pred == labels) & (conf >= threshold)
    if target_class is not None:
        keep &= labels == target_class
    return np.flatnonzero(keep)


def average_attribution(maps) -> np.ndarray:
    maps = list(maps)
    if not maps:
        raise ValueError("no attribution maps to average")
    return np.mean([getattr(m, "data", m) for m in maps], axis=0)
