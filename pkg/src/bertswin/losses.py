"""Brightness/contrast/structure decomposition of MSE and the losses built on it.

All statistics are population (divide by N) statistics, which is what makes
``mse == brightness + contrast + structure`` an algebraic identity rather
than an approximation.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError
from .model import MaskPlan, patchify
from .synthvol import BONE, SegMask, Volume, dilate, erode

RHO_EPS = 1e-8
SIGMA_FLOOR = 1e-8
MIN_VOXELS = 8


@dataclass(frozen=True)
class MvcComponents:
    brightness: float
    contrast: float
    structure: float
    mse: float
    rho: float = 1.0

    @property
    def total(self) -> float:
        return self.brightness + self.contrast + self.structure


@dataclass(frozen=True)
class MvcWeights:
    w_br: float = 0.3
    w_cntr: float = 0.2
    w_str: float = 0.5

    def __post_init__(self):
        if min(self.w_br, self.w_cntr, self.w_str) < 0:
            raise ContractError("MVC weights must be non-negative")


@dataclass(frozen=True)
class PhysWeights:
    lambda_global: float = 0.3
    lambda_soft: float = 0.5
    lambda_surf: float = 0.2

    def __post_init__(self):
        if min(self.lambda_global, self.lambda_soft, self.lambda_surf) < 0:
            raise ContractError("region weights must be non-negative")


@dataclass
class RegionMasks:
    soft: np.ndarray
    surf: np.ndarray


@dataclass
class LossReport:
    """Aggregate loss (a graph node) plus plain-float breakdowns for logging."""

    total: T.Tensor
    terms: dict = field(default_factory=dict)        # region -> weighted-in MVC loss value
    components: dict = field(default_factory=dict)   # region -> {brightness, contrast, structure}
    empty: dict = field(default_factory=dict)        # region -> True when skipped

    def as_dict(self) -> dict:
        return {"total": float(self.total.item()), "terms": self.terms,
                "components": self.components, "empty": self.empty}

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)


# ---------------------------------------------------------------------------
# plain decomposition
# ---------------------------------------------------------------------------

def mvc_decompose(x, y) -> MvcComponents:
    """Split ``mean((x - y)**2)`` into mean, spread and correlation error terms."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ContractError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ContractError("mvc_decompose needs at least two values")
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    sx, sy = np.sqrt(np.mean(dx * dx)), np.sqrt(np.mean(dy * dy))
    cov = np.mean(dx * dy)
    mse = float(np.mean((x - y) ** 2))
    br = float((mx - my) ** 2)
    cn = float((sx - sy) ** 2)
    if sx < SIGMA_FLOOR or sy < SIGMA_FLOOR:
        st = mse - br - cn
        rho = 0.0
    else:
        # 2*sx*sy*(1 - rho) with the exact rho; the guarded rho below is reported only.
        # Cauchy-Schwarz gives sx*sy >= cov, so a negative value is pure roundoff.
        st = max(0.0, float(2.0 * (sx * sy - cov)))
        rho = float(cov / (sx * sy + RHO_EPS))
    return MvcComponents(br, cn, st, mse, rho)


# ---------------------------------------------------------------------------
# block losses
# ---------------------------------------------------------------------------

def _batched(a) -> tuple:
    """Return the array/tensor with a leading batch axis and whether one was added."""
    if a.ndim == 3:
        return a.reshape((1,) + tuple(a.shape)), True
    if a.ndim != 4:
        raise ContractError(f"expected a [D,H,W] or [B,D,H,W] volume, got shape {a.shape}")
    return a, False


def _data(v) -> np.ndarray:
    if isinstance(v, Volume):
        return v.data
    if isinstance(v, T.Tensor):
        return v.data
    return np.asarray(v, dtype=np.float64)


def masked_voxels(plans, patch: int, size: int) -> np.ndarray:
    """Boolean ``[B, size, size, size]`` marking voxels of masked patches."""
    plans = [plans] if isinstance(plans, MaskPlan) else list(plans)
    g = size // patch
    out = np.zeros((len(plans), g ** 3), dtype=bool)
    for b, pl in enumerate(plans):
        out[b, pl.masked_idx] = True
    out = out.reshape(len(plans), g, g, g)
    for ax in (1, 2, 3):
        out = np.repeat(out, patch, axis=ax)
    return out


def _block_terms(pred, target, region: np.ndarray, sub_patch: int, min_voxels: int):
    """Per-block (brightness, contrast, structure) tensors over contributing blocks.

    Returns ``None`` when no block has ``min_voxels`` region voxels.
    """
    pred = T.as_tensor(pred)
    x, _ = _batched(pred)
    y, _ = _batched(np.asarray(_data(target), dtype=np.float64))
    if tuple(x.shape) != y.shape:
        raise ContractError(f"pred {x.shape} and target {y.shape} differ")
    m = np.ones(y.shape) if region is None else np.broadcast_to(np.asarray(region, dtype=np.float64), y.shape)
    xb = patchify(x, sub_patch)
    nb, vox = xb.shape[1], xb.shape[2]
    xb = xb.reshape(-1, vox)
    yb = patchify(y, sub_patch).reshape(-1, vox)
    mb = patchify(m, sub_patch).reshape(-1, vox)
    counts = mb.sum(axis=1)
    keep = np.flatnonzero(counts >= min_voxels)
    if keep.size == 0:
        return None
    xs = T.take(xb, keep, axis=0)
    ys, ms, n = yb[keep], mb[keep], counts[keep]
    mux = T.tsum(xs * ms, axis=1) / n
    muy = (ys * ms).sum(axis=1) / n
    dx = (xs - mux.reshape(-1, 1)) * ms
    dy = (ys - muy[:, None]) * ms
    sx = T.sqrt(T.tsum(dx * dx, axis=1) / n)
    sy = np.sqrt((dy * dy).sum(axis=1) / n)
    cov = T.tsum(dx * dy, axis=1) / n
    br = T.square(mux - muy)
    cn = T.square(sx - sy)
    st = 2.0 * (sx * sy - cov)
    return br, cn, st


def mvc_loss(pred, target, sub_patch: int = 4, w: MvcWeights = MvcWeights(),
             region: Optional[np.ndarray] = None, min_voxels: int = MIN_VOXELS,
             return_components: bool = False):
    """Weighted MVC loss averaged over ``sub_patch``-cube blocks.

    ``region`` (broadcastable to the target) restricts each block's statistics
    to selected voxels; blocks with fewer than ``min_voxels`` such voxels are
    skipped. Raises ``ContractError`` if every block is skipped.
    """
    terms = _block_terms(pred, target, region, sub_patch, min_voxels)
    if terms is None:
        raise ContractError(f"empty region: no {sub_patch}^3 block has {min_voxels} selected voxels")
    br, cn, st = terms
    loss = (w.w_br * br + w.w_cntr * cn + w.w_str * st).mean()
    if return_components:
        comp = {"brightness": float(br.data.mean()), "contrast": float(cn.data.mean()),
                "structure": float(st.data.mean())}
        return loss, comp
    return loss


def phys_loss(pred, target, masks: RegionMasks, lam: PhysWeights = PhysWeights(),
              w: MvcWeights = MvcWeights(), sub_patch: int = 4,
              scope: Optional[np.ndarray] = None, min_voxels: int = MIN_VOXELS) -> LossReport:
    """Region-weighted MVC loss over the full domain, the soft-tissue band and the bone shell.

    ``scope`` optionally restricts all three regions (for instance to the
    voxels of masked patches). Regions with no contributing block add 0 and
    are flagged in the report.
    """
    shape = _batched(np.asarray(_data(target)))[0].shape
    full = np.ones(shape, dtype=bool) if scope is None else np.broadcast_to(np.asarray(scope, bool), shape)
    regions = {
        "global": (lam.lambda_global, full),
        "soft": (lam.lambda_soft, full & np.broadcast_to(np.asarray(masks.soft, bool), shape)),
        "surf": (lam.lambda_surf, full & np.broadcast_to(np.asarray(masks.surf, bool), shape)),
    }
    total = None
    report = LossReport(T.Tensor(np.array(0.0)))
    for name, (lam_r, reg) in regions.items():
        terms = _block_terms(pred, target, reg, sub_patch, min_voxels)
        if terms is None:
            report.terms[name] = 0.0
            report.components[name] = {"brightness": 0.0, "contrast": 0.0, "structure": 0.0}
            report.empty[name] = True
            continue
        br, cn, st = terms
        loss = (w.w_br * br + w.w_cntr * cn + w.w_str * st).mean()
        report.terms[name] = float(loss.item())
        report.components[name] = {"brightness": float(br.data.mean()), "contrast": float(cn.data.mean()),
                                   "structure": float(st.data.mean())}
        report.empty[name] = False
        total = lam_r * loss if total is None else total + lam_r * loss
    if total is None:
        total = T.as_tensor(pred).sum() * 0.0
    report.total = total
    return report


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------

def make_soft_tissue_mask(target_hu, lo: float = -300.0, hi: float = 300.0) -> np.ndarray:
    """Voxels whose HU value lies in the closed band ``[lo, hi]``."""
    data = _data(target_hu)
    return (data >= lo) & (data <= hi)


def make_bone_shell_mask(bone, inner: int = 2, outer: int = 4) -> np.ndarray:
    """``dilate(bone, outer) & ~erode(bone, inner)``: a band straddling the bone surface.

    Accepts a boolean grid or a SegMask (bone label selected).
    """
    if isinstance(bone, SegMask):
        bone = bone.labels == BONE
    bone = np.asarray(bone, dtype=bool)
    if bone.ndim == 4:
        return np.stack([make_bone_shell_mask(b, inner, outer) for b in bone])
    return dilate(bone, outer) & ~erode(bone, inner)


# ---------------------------------------------------------------------------
# reconstruction metrics
# ---------------------------------------------------------------------------

def masked_recon_l2(pred, target, plans, patch: int) -> T.Tensor:
    """Mean squared error over the voxels of masked patches only."""
    pred = T.as_tensor(pred)
    x, _ = _batched(pred)
    y, _ = _batched(np.asarray(_data(target), dtype=np.float64))
    if tuple(x.shape) != y.shape:
        raise ContractError(f"pred {x.shape} and target {y.shape} differ")
    sel = masked_voxels(plans, patch, y.shape[-1])
    if sel.shape != y.shape:
        raise ContractError(f"{sel.shape[0]} mask plans for a batch of {y.shape[0]}")
    n = int(sel.sum())
    if n == 0:
        raise ContractError("no masked voxels")
    diff = (x - y) * sel
    return T.tsum(diff * diff) / n


def ssim(x, y, c1: float = 1e-4, c2: float = 9e-4) -> float:
    """Single-window SSIM with population statistics."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size or x.size < 2:
        raise ContractError("ssim needs two equal-length inputs of at least two values")
    mx, my = x.mean(), y.mean()
    vx, vy = x.var(), y.var()
    cov = np.mean((x - mx) * (y - my))
    return float((2 * mx * my + c1) * (2 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))


def region_masks_for(targets_hu: np.ndarray, segs: Sequence[SegMask] | np.ndarray) -> RegionMasks:
    """Soft-tissue band and bone shell for a batch of HU targets and their labels."""
    labels = np.stack([s.labels if isinstance(s, SegMask) else np.asarray(s) for s in segs])
    return RegionMasks(make_soft_tissue_mask(targets_hu), make_bone_shell_mask(labels == BONE))
