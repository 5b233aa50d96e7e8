"""Volume ingestion, preprocessing, synthetic scans and stratified splits."""
from __future__ import annotations

import logging
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError, NiftiError, ShapeError

log = logging.getLogger(__name__)

TARGET_SHAPE = (96, 96, 96)
TASK_KINDS = ("binary-classification", "regression")


@dataclass
class Volume4D:
    data: np.ndarray  # float32, (t, d, h, w)
    spacing: tuple = (1.0, 1.0, 1.0)
    scan_id: str = ""

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ShapeError(f"Volume4D expects (t, d, h, w), got shape {self.data.shape}")
        if self.data.shape[0] < 1:
            raise ShapeError("Volume4D needs at least one frame")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def spatial_shape(self) -> tuple:
        return tuple(self.data.shape[1:])


@dataclass
class TargetRecord:
    scan_id: str
    task_kind: str
    raw_value: float
    normalized_value: float | None = None

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.task_kind!r}")
        if self.normalized_value is None and self.task_kind == "binary-classification":
            self.normalized_value = float(self.raw_value)


@dataclass
class SplitSpec:
    train: list
    val: list
    test: list
    ratios: tuple = (0.7, 0.15, 0.15)
    strat_keys: tuple = ()
    seed: int = 0

    def as_dict(self) -> dict:
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test)}


# -- preprocessing ----------------------------------------------------------

def _nonzero_bbox(raw: np.ndarray):
    """Bounding box of nonzero voxels over the union of all frames, or None."""
    occupied = np.any(raw != 0, axis=0)
    if not occupied.any():
        return None
    box = []
    for ax in range(3):
        other = tuple(a for a in range(3) if a != ax)
        hit = np.flatnonzero(occupied.any(axis=other))
        box.append((int(hit[0]), int(hit[-1]) + 1))
    return box


def _center_fit(raw: np.ndarray, target_shape) -> np.ndarray:
    """Center-crop or zero-pad the spatial axes of ``raw`` to ``target_shape``."""
    out = np.zeros((raw.shape[0],) + tuple(target_shape), dtype=raw.dtype)
    src, dst = [slice(None)], [slice(None)]
    for size, tgt in zip(raw.shape[1:], target_shape):
        if size > tgt:
            lo = (size - tgt) // 2
            src.append(slice(lo, lo + tgt))
            dst.append(slice(None))
        else:
            lo = (tgt - size) // 2
            src.append(slice(None))
            dst.append(slice(lo, lo + size))
    out[tuple(dst)] = raw[tuple(src)]
    return out


def crop_to_content(raw: np.ndarray, target_shape=TARGET_SHAPE) -> np.ndarray:
    box = _nonzero_bbox(raw)
    if box is not None:
        raw = raw[(slice(None),) + tuple(slice(a, b) for a, b in box)]
    if any(s > t for s, t in zip(raw.shape[1:], target_shape)):
        msg = f"content box {raw.shape[1:]} exceeds {tuple(target_shape)}; center-cropping"
        log.warning(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=3)
    return _center_fit(raw, target_shape)


def minmax_normalize(raw: np.ndarray) -> np.ndarray:
    """Map values to [-1, 1] with scan-global extrema; constant input maps to zeros."""
    vmin, vmax = float(raw.min()), float(raw.max())
    if vmax == vmin:
        return np.zeros(raw.shape, dtype=np.float32)
    scaled = 2.0 * (raw.astype(np.float64) - vmin) / (vmax - vmin) - 1.0
    return scaled.astype(np.float32)


def preprocess_volume(raw, target_shape=TARGET_SHAPE, spacing=(1.0, 1.0, 1.0), scan_id="") -> Volume4D:
    raw = np.asarray(raw)
    if raw.ndim != 4:
        raise ShapeError(f"expected a 4D (t, d, h, w) array, got {raw.ndim} axes")
    if raw.shape[0] < 1:
        raise ShapeError("volume has no frames")
    if not np.all(np.isfinite(raw)):
        raise DataError("volume contains non-finite values")
    fitted = crop_to_content(raw, target_shape)
    return Volume4D(minmax_normalize(fitted), tuple(float(s) for s in spacing), str(scan_id))


# -- synthetic scans -------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Recipe for one synthetic scan.

    The brain is an ellipsoid of positive intensities on a zero background,
    driven by eight regional AR(1) processes.  The target enters through a
    fixed Gaussian blob whose mean level and oscillation amplitude scale with
    ``label_effect * target``.  ``snr`` is the ratio of the regional
    fluctuation scale to the white noise std; ``math.inf`` disables noise.
    """

    T_total: int = 16
    snr: float = 4.0
    label_effect: float = 1.0
    seed: int = 0
    label: float | None = None
    task_kind: str = "binary-classification"
    grid: tuple = (80, 80, 80)
    scan_id: str | None = None


_FLUCT = 10.0
_BASE = 100.0


def _validate_synth(spec: SynthSpec):
    if int(spec.T_total) != spec.T_total or spec.T_total < 1:
        raise ConfigError(f"T_total must be a positive integer, got {spec.T_total!r}")
    if not (spec.snr > 0):
        raise ConfigError(f"snr must be positive, got {spec.snr!r}")
    if not math.isfinite(spec.label_effect) or spec.label_effect < 0:
        raise ConfigError(f"label_effect must be finite and >= 0, got {spec.label_effect!r}")
    if spec.task_kind not in TASK_KINDS:
        raise ConfigError(f"unknown task kind {spec.task_kind!r}")
    if len(spec.grid) != 3 or min(spec.grid) < 16:
        raise ConfigError(f"grid must be three extents >= 16, got {spec.grid!r}")
    if spec.task_kind == "binary-classification" and spec.label not in (None, 0, 1):
        raise ConfigError(f"binary label must be 0 or 1, got {spec.label!r}")


def _brain_geometry(grid):
    g = np.asarray(grid, dtype=np.float64)
    center = (g - 1) / 2
    radii = 0.38 * g
    coords = np.stack(np.meshgrid(*[np.arange(n) for n in grid], indexing="ij"), axis=-1)
    rel = (coords - center) / radii
    mask = (rel ** 2).sum(-1) <= 1.0
    # eight octant regions inside the brain, labelled 0..7
    octant = ((coords[..., 0] > center[0]).astype(int) * 4
              + (coords[..., 1] > center[1]).astype(int) * 2
              + (coords[..., 2] > center[2]).astype(int))
    blob_center = center + np.array([0.35, -0.3, 0.25]) * radii
    blob = np.exp(-((coords - blob_center) ** 2).sum(-1) / (2 * (0.12 * g.min()) ** 2))
    return mask, octant, blob


def synthesize_scan(spec: SynthSpec) -> tuple[Volume4D, TargetRecord]:
    """Generate a preprocessed synthetic scan and its target, fully determined by ``spec.seed``."""
    _validate_synth(spec)
    rng = np.random.default_rng(spec.seed)
    if spec.label is not None:
        target = float(spec.label)
    elif spec.task_kind == "binary-classification":
        target = float(rng.integers(0, 2))
    else:
        target = float(rng.standard_normal())

    mask, octant, blob = _brain_geometry(spec.grid)
    anatomy = ndimage.gaussian_filter(rng.standard_normal(spec.grid), sigma=4.0)
    anatomy = _BASE * (1.0 + 2.0 * anatomy / (np.abs(anatomy).max() + 1e-12) * 0.2)

    T = int(spec.T_total)
    phi = 0.8
    regional = np.zeros((T, 8))
    regional[0] = rng.standard_normal(8)
    for t in range(1, T):
        regional[t] = phi * regional[t - 1] + math.sqrt(1 - phi ** 2) * rng.standard_normal(8)
    regional *= _FLUCT

    phase = rng.uniform(0, 2 * math.pi)
    tt = np.arange(T)
    drive = spec.label_effect * target * _FLUCT * (1.5 + np.sin(2 * math.pi * tt / 8.0 + phase))

    vol = np.empty((T,) + tuple(spec.grid), dtype=np.float32)
    for t in range(T):
        frame = anatomy + regional[t][octant] + drive[t] * blob
        if math.isfinite(spec.snr):
            frame = frame + rng.standard_normal(spec.grid) * (_FLUCT / spec.snr)
        # keep brain strictly positive so the background stays exactly zero
        vol[t] = np.where(mask, np.maximum(frame, 1.0), 0.0)

    scan_id = spec.scan_id or f"synth-{spec.seed}"
    volume = preprocess_volume(vol, TARGET_SHAPE, scan_id=scan_id)
    return volume, TargetRecord(scan_id, spec.task_kind, target)


def voxel_checksum(vol: Volume4D) -> float:
    return float(np.sum(vol.data, dtype=np.float64))


# -- persistence -------------------------------------------------------------

def save_scan(stem, vol: Volume4D, target: TargetRecord | None = None) -> tuple[Path, Path]:
    """Write ``<stem>.f32`` (little-endian float32 payload) and a ``<stem>.meta`` sidecar."""
    stem = Path(stem)
    blob, meta = stem.with_suffix(".f32"), stem.with_suffix(".meta")
    blob.write_bytes(np.ascontiguousarray(vol.data, dtype="<f4").tobytes())
    lines = {
        "scan_id": vol.scan_id,
        "shape": ",".join(str(s) for s in vol.data.shape),
        "spacing": ",".join(repr(float(s)) for s in vol.spacing),
        "dtype": "<f4",
    }
    if target is not None:
        lines.update(task_kind=target.task_kind, raw_value=repr(float(target.raw_value)))
    meta.write_text("".join(f"{k}={v}\n" for k, v in lines.items()))
    return blob, meta


def read_keyvalue(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_scan(stem) -> tuple[Volume4D, TargetRecord | None]:
    stem = Path(stem)
    meta = read_keyvalue(stem.with_suffix(".meta"))
    shape = tuple(int(s) for s in meta["shape"].split(","))
    data = np.fromfile(stem.with_suffix(".f32"), dtype="<f4")
    if data.size != math.prod(shape):
        raise DataError(f"{stem}: payload has {data.size} values, header says {shape}")
    spacing = tuple(float(s) for s in meta["spacing"].split(","))
    vol = Volume4D(data.reshape(shape).astype(np.float32), spacing, meta["scan_id"])
    target = None
    if "task_kind" in meta:
        target = TargetRecord(meta["scan_id"], meta["task_kind"], float(meta["raw_value"]))
    return vol, target


def load_nifti(path) -> tuple[np.ndarray, tuple]:
    """Read a NIfTI file as a float32 ``(t, d, h, w)`` array plus voxel spacing in mm."""
    import nibabel as nib

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such NIfTI file: {path}")
    try:
        img = nib.load(str(path))
        data = np.asarray(img.dataobj, dtype=np.float32)
        zooms = img.header.get_zooms()
    except Exception as exc:  # nibabel raises a wide variety on bad headers
        raise NiftiError(f"could not parse {path}: {exc}") from exc
    if data.ndim == 3:
        data = data[None]
    elif data.ndim == 4:
        data = np.moveaxis(data, 3, 0)
    else:
        raise NiftiError(f"{path}: unsupported dimensionality {data.ndim}")
    return np.ascontiguousarray(data), tuple(float(z) for z in zooms[:3])


def save_nifti(path, data, spacing=(1.0, 1.0, 1.0)):
    """Write a ``(t, d, h, w)`` or ``(d, h, w)`` array as NIfTI-1."""
    import nibabel as nib

    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 4:
        arr = np.moveaxis(data, 0, 3)
        zooms = tuple(spacing) + (1.0,)
    elif data.ndim == 3:
        arr, zooms = data, tuple(spacing)
    else:
        raise ShapeError(f"cannot write {data.ndim}D array as NIfTI")
    img = nib.Nifti1Image(np.ascontiguousarray(arr), affine=np.diag(list(spacing) + [1.0]))
    img.header.set_zooms(zooms)
    nib.save(img, str(path))


# -- splits and targets -------------------------------------------------------

def largest_remainder(n: int, ratios: Sequence[float], tiebreak=None) -> list[int]:
    """Integer apportionment of ``n`` by ``ratios``.

    Leftover units go to the largest fractional parts; ``tiebreak`` (higher
    first) orders equal fractions, then the split order.
    """
    total = float(sum(ratios))
    ideal = [n * r / total for r in ratios]
    counts = [math.floor(x + 1e-9) for x in ideal]
    frac = [x - c for x, c in zip(ideal, counts)]
    tiebreak = tiebreak or [0.0] * len(ratios)
    order = sorted(range(len(ratios)), key=lambda i: (-round(frac[i], 9), -tiebreak[i], i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def _stratum_key(record: Mapping, strat_keys) -> tuple:
    return tuple(record[k] for k in strat_keys)


def _merge_small_strata(strata: dict, min_size: int = 3) -> dict:
    keys = sorted(strata, key=repr)
    groups = [[k] for k in keys]
    members = [list(strata[k]) for k in keys]
    while len(members) > 1:
        small = [i for i, m in enumerate(members) if len(m) < min_size]
        if not small:
            break
        i = small[0]
        j = i - 1 if i > 0 else i + 1
        msg = f"stratum {groups[i]} has {len(members[i])} records; merging into {groups[j]}"
        log.warning(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=3)
        members[j].extend(members[i])
        groups[j].extend(groups[i])
        del members[i], groups[i]
    return {tuple(g): m for g, m in zip(groups, members)}


def make_split(records: Sequence[Mapping], ratios=(0.7, 0.15, 0.15), strat_keys=(), seed: int = 0) -> SplitSpec:
    """Stratified train/val/test split of records carrying a ``scan_id`` key."""
    if len(records) < 10:
        raise DataError(f"need at least 10 records to split, got {len(records)}")
    if len(ratios) != 3 or min(ratios) < 0 or sum(ratios) <= 0:
        raise ConfigError(f"invalid ratios {ratios!r}")
    ids = [r["scan_id"] for r in records]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate scan ids")

    strata = defaultdict(list)
    for rec in records:
        strata[_stratum_key(rec, strat_keys)].append(rec["scan_id"])
    strata = _merge_small_strata(strata)

    rng = np.random.default_rng(seed)
    total = float(sum(ratios))
    parts = ([], [], [])
    assigned = [0, 0, 0]
    seen = 0
    for key in sorted(strata, key=repr):
        members = list(strata[key])
        rng.shuffle(members)
        seen += len(members)
        # prefer the split running furthest behind its global share on ties
        deficit = [seen * r / total - a for r, a in zip(ratios, assigned)]
        counts = largest_remainder(len(members), ratios, tiebreak=deficit)
        start = 0
        for p, c in enumerate(counts):
            parts[p].extend(members[start:start + c])
            assigned[p] += c
            start += c
    return SplitSpec(parts[0], parts[1], parts[2], tuple(ratios), tuple(strat_keys), seed)


def normalize_targets(targets: Sequence[TargetRecord], train_ids) -> tuple[list[TargetRecord], float, float]:
    """z-normalize regression targets with mean/std from the training ids only."""
    train_ids = set(train_ids)
    kinds = {t.task_kind for t in targets}
    if kinds != {"regression"}:
        return [replace(t, normalized_value=float(t.raw_value)) for t in targets], 0.0, 1.0
    train_vals = np.array([t.raw_value for t in targets if t.scan_id in train_ids], dtype=np.float64)
    if train_vals.size < 2:
        raise DataError("need at least two training targets to normalize")
    mean, std = float(train_vals.mean()), float(train_vals.std())
    if not std > 0:
        raise DataError("training targets have zero variance")
    return [replace(t, normalized_value=(t.raw_value - mean) / std) for t in targets], mean, std
