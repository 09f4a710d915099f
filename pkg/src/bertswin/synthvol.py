"""Synthetic bone phantoms, HU normalisation and binary morphology.

Phantoms mimic a cropped joint: an off-centre ellipsoidal condyle with a
dense cortical shell and noisy trabecular core, a thin bony fossa cap above
it, a soft-tissue halo, and air elsewhere. Geometry is drawn from a
counter-based stream keyed by the seed, so generation is reproducible and
order independent. The left joint is the exact mirror image of the right one
along the last (medial-lateral) axis.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ContractError
from .rng import keyed_rng

HU_MIN, HU_MAX = -1000.0, 3000.0
AIR_HU = -1000.0
CORTICAL_HU = 1200.0
TRABECULAR_HU, TRABECULAR_SD = 300.0, 150.0
SOFT_HU, SOFT_SD = 0.0, 80.0

BACKGROUND, BONE, SOFT = 0, 1, 2
CHIRALITY_AXIS = 2


@dataclass
class Volume:
    data: np.ndarray          # (D, H, W) float64, HU-like before normalisation
    spacing_mm: float = 1.0

    @property
    def size(self) -> tuple:
        return self.data.shape


@dataclass
class SegMask:
    labels: np.ndarray        # (D, H, W) uint8 in {0, 1, 2}
    spacing_mm: float = 1.0

    @property
    def size(self) -> tuple:
        return self.labels.shape


@dataclass(frozen=True)
class NormStats:
    clip_lo: float
    clip_hi: float
    mean: float
    std: float

    def __post_init__(self):
        if not self.clip_lo < self.clip_hi:
            raise ContractError(f"clip_lo {self.clip_lo} must be below clip_hi {self.clip_hi}")
        if not self.std > 0:
            raise ContractError(f"std must be positive, got {self.std}")

    def to_text(self) -> str:
        return "".join(f"{k} = {getattr(self, k)!r}\n" for k in ("clip_lo", "clip_hi", "mean", "std"))

    @classmethod
    def from_text(cls, text: str) -> "NormStats":
        vals = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            vals[key.strip()] = float(value)
        missing = {"clip_lo", "clip_hi", "mean", "std"} - vals.keys()
        if missing:
            raise ConfigError(f"norm stats missing keys: {sorted(missing)}")
        return cls(vals["clip_lo"], vals["clip_hi"], vals["mean"], vals["std"])


# ---------------------------------------------------------------------------
# phantom generation
# ---------------------------------------------------------------------------

def _geometry(seed: int, variant: int) -> dict:
    rng = keyed_rng(seed, 0)
    g = {
        "center": np.array([rng.uniform(-0.08, 0.08), rng.uniform(-0.08, 0.08), rng.uniform(0.06, 0.14)]),
        "radii": np.array([rng.uniform(0.23, 0.30), rng.uniform(0.18, 0.24), rng.uniform(0.14, 0.19)]),
        "tilt": rng.uniform(-0.45, 0.45),
        "roll": rng.uniform(0.05, 0.3),
        "cortex": rng.uniform(0.12, 0.2),
        "halo": rng.uniform(0.35, 0.6),
        "fossa_gap": rng.uniform(0.25, 0.45),
        "fossa_thick": rng.uniform(0.12, 0.2),
    }
    if variant:
        # the contralateral joint of the same subject: same anatomy, small deviations
        prng = keyed_rng(seed, 1, variant)
        g["center"] = g["center"] + prng.normal(0.0, 0.01, 3)
        g["radii"] = g["radii"] * (1.0 + prng.normal(0.0, 0.03, 3))
        g["tilt"] += prng.normal(0.0, 0.05)
        g["roll"] += prng.normal(0.0, 0.03)
    return g


def _rotation(tilt: float, roll: float) -> np.ndarray:
    cz, sz = np.cos(tilt), np.sin(tilt)
    cx, sx = np.cos(roll), np.sin(roll)
    rz = np.array([[1, 0, 0], [0, cz, -sz], [0, sz, cz]])   # rotates (y, x)
    rx = np.array([[cx, -sx, 0], [sx, cx, 0], [0, 0, 1]])   # rotates (z, y)
    return rz @ rx


def _right_phantom(seed: int, size: tuple, variant: int) -> tuple[np.ndarray, np.ndarray]:
    g = _geometry(seed, variant)
    axes = [(np.arange(n) - (n - 1) / 2.0) / n for n in size]
    zz, yy, xx = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([zz, yy, xx], axis=-1) - g["center"]
    local = pts @ _rotation(g["tilt"], g["roll"])
    r = np.sqrt(((local / g["radii"]) ** 2).sum(axis=-1))

    condyle = r <= 1.0
    cortex = condyle & (r > 1.0 - g["cortex"])
    fossa = ((r >= 1.0 + g["fossa_gap"]) & (r <= 1.0 + g["fossa_gap"] + g["fossa_thick"])
             & (local[..., 0] > 0.35 * g["radii"][0]))
    bone = condyle | fossa
    soft = (r <= 1.0 + g["halo"] + g["fossa_gap"]) & ~bone

    noise = keyed_rng(seed, 2, variant)
    vol = AIR_HU + np.abs(noise.normal(0.0, 15.0, size))
    vol[soft] = np.clip(SOFT_HU + SOFT_SD * noise.normal(size=int(soft.sum())), -240.0, 240.0)
    trab = condyle & ~cortex
    vol[trab] = np.clip(TRABECULAR_HU + TRABECULAR_SD * noise.normal(size=int(trab.sum())), 0.0, 900.0)
    shell = cortex | fossa
    vol[shell] = CORTICAL_HU + 100.0 * noise.normal(size=int(shell.sum()))
    vol = np.clip(vol, HU_MIN, HU_MAX)

    labels = np.full(size, BACKGROUND, dtype=np.uint8)
    labels[soft] = SOFT
    labels[bone] = BONE
    return vol, labels


def gen_phantom(seed: int, size: Union[int, Sequence[int]] = 32, chirality: str = "right",
                patch_size: int = 8, variant: int = 0,
                spacing_mm: float | None = None) -> tuple[Volume, SegMask]:
    """Generate a deterministic phantom and its three-class segmentation.

    ``variant`` > 0 yields a slightly perturbed copy of the same anatomy (a
    contralateral joint); ``variant`` 0 with ``chirality="left"`` is the exact
    mirror of the right phantom.
    """
    size = (int(size),) * 3 if np.isscalar(size) else tuple(int(s) for s in size)
    if len(size) != 3 or min(size) < 8:
        raise ConfigError(f"phantom size must be three dims >= 8, got {size}")
    if patch_size < 1 or any(s % patch_size for s in size):
        raise ConfigError(f"phantom size {size} not divisible by patch size {patch_size}")
    if chirality not in ("left", "right"):
        raise ConfigError(f"chirality must be 'left' or 'right', got {chirality!r}")
    if seed < 0 or variant < 0:
        raise ConfigError("seed and variant must be non-negative")
    vol, labels = _right_phantom(int(seed), size, int(variant))
    if spacing_mm is None:
        spacing_mm = 44.8 / size[0]
    v, m = Volume(vol, spacing_mm), SegMask(labels, spacing_mm)
    if chirality == "left":
        v, m = mirror(v, CHIRALITY_AXIS), mirror(m, CHIRALITY_AXIS)
    return v, m


def mirror(v, axis: int = CHIRALITY_AXIS):
    """Reverse a Volume, SegMask or array along ``axis``."""
    if axis not in (0, 1, 2):
        raise ConfigError(f"mirror axis must be 0, 1 or 2, got {axis}")
    if isinstance(v, Volume):
        return Volume(np.ascontiguousarray(np.flip(v.data, axis)), v.spacing_mm)
    if isinstance(v, SegMask):
        return SegMask(np.ascontiguousarray(np.flip(v.labels, axis)), v.spacing_mm)
    return np.ascontiguousarray(np.flip(np.asarray(v), axis))


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

def compute_norm_stats(volumes: Sequence[Volume], lo_pct: float = 0.5, hi_pct: float = 99.5) -> NormStats:
    """Percentile clip bounds plus mean/std of the clipped, pooled intensities."""
    if len(volumes) == 0:
        raise ContractError("compute_norm_stats needs at least one volume")
    pool = np.concatenate([np.asarray(v.data if isinstance(v, Volume) else v, dtype=np.float64).ravel()
                           for v in volumes])
    pool.sort()                       # fixed summation order, so the stats ignore list order
    lo, hi = np.percentile(pool, [lo_pct, hi_pct])
    clipped = np.clip(pool, lo, hi)
    std = float(clipped.std())
    if not hi > lo or std == 0.0:
        raise ContractError("degenerate intensity pool: clip bounds coincide or std is 0")
    return NormStats(float(lo), float(hi), float(clipped.mean()), std)


def hu_normalize(v: Union[Volume, np.ndarray], s: NormStats):
    data = v.data if isinstance(v, Volume) else np.asarray(v, dtype=np.float64)
    out = (np.clip(data, s.clip_lo, s.clip_hi) - s.mean) / s.std
    return Volume(out, v.spacing_mm) if isinstance(v, Volume) else out


# ---------------------------------------------------------------------------
# morphology (cube structuring element of side 2k+1)
# ---------------------------------------------------------------------------

def erode(mask: np.ndarray, k: int, border: bool = False) -> np.ndarray:
    """Set where every voxel of the (2k+1)-cube around it is set.

    Voxels outside the grid count as ``border`` (unset by default).
    """
    if k < 1:
        raise ConfigError(f"kernel size must be >= 1, got {k}")
    m = np.asarray(mask).astype(np.uint8)
    return ndimage.minimum_filter(m, size=2 * k + 1, mode="constant", cval=int(border)).astype(bool)


def dilate(mask: np.ndarray, k: int, border: bool = False) -> np.ndarray:
    """Set where any voxel of the (2k+1)-cube around it is set."""
    if k < 1:
        raise ConfigError(f"kernel size must be >= 1, got {k}")
    m = np.asarray(mask).astype(np.uint8)
    return ndimage.maximum_filter(m, size=2 * k + 1, mode="constant", cval=int(border)).astype(bool)


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

_DTYPES = {"f64": np.dtype("<f8"), "u8": np.dtype("u1")}


def write_volume(path: Union[str, Path], v: Union[Volume, SegMask]) -> None:
    """Write ``VOLU1 D H W spacing_mm dtype`` then the little-endian raw buffer."""
    if isinstance(v, SegMask):
        arr, tag = v.labels.astype(np.uint8), "u8"
    else:
        arr, tag = np.asarray(v.data, dtype="<f8"), "f64"
    d, h, w = arr.shape
    header = f"VOLU1 {d} {h} {w} {v.spacing_mm!r} {tag}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_volume(path: Union[str, Path]) -> Union[Volume, SegMask]:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").split()
        payload = fh.read()
    if len(header) != 6 or header[0] != "VOLU1":
        raise ConfigError(f"{path}: not a VOLU1 file")
    try:
        d, h, w = (int(t) for t in header[1:4])
        spacing = float(header[4])
        dtype = _DTYPES[header[5]]
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"{path}: malformed header {' '.join(header)}") from exc
    if len(payload) != d * h * w * dtype.itemsize:
        raise ConfigError(f"{path}: payload has {len(payload)} bytes, header implies {d * h * w * dtype.itemsize}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(d, h, w).copy()
    if header[5] == "u8":
        return SegMask(arr, spacing)
    return Volume(arr.astype(np.float64), spacing)
