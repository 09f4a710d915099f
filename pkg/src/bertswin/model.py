"""BertsWin encoder-decoder and the sparse ViT-MAE baseline.

BertsWin embeds only the visible patches with a strided CNN stem, scatters
them back onto the complete token grid (masked positions receive a learnable
mask token), adds positional embeddings and runs single-scale shifted-window
attention over the whole grid. A transposed-convolution decoder maps the grid
back to voxels.

The baseline embeds visible patches with one linear layer, adds fixed sin-cos
positions and runs global attention over the visible tokens only. Its
reconstruction head re-inserts mask tokens and reuses the same convolutional
decoder.

Parameters live in ordered ``dict[str, Tensor]`` maps so optimizers and
checkpoints can treat every model uniformly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .rng import keyed_rng
from .tensor import Tensor

VARIANTS = ("bertswin", "vit_sparse")


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def decoder_strides(patch_size: int, n_layers: int = 3) -> tuple[int, ...]:
    """Split ``patch_size`` (a power of two) into ``n_layers`` strides, largest first."""
    if not _is_pow2(patch_size) or patch_size < 2:
        raise ConfigError(f"decoder needs a power-of-two patch size, got {patch_size}")
    total = int(math.log2(patch_size))
    base, extra = divmod(total, n_layers)
    exps = [base + (1 if i < extra else 0) for i in range(n_layers)]
    return tuple(2 ** e for e in exps if e > 0) or (1,)


@dataclass(frozen=True)
class ModelConfig:
    volume_size: int = 32
    patch_size: int = 8
    embed_dim: int = 32
    depth: int = 2
    heads: int = 4
    window: int = 2
    mlp_ratio: float = 4.0
    mask_ratio: float = 0.75
    variant: str = "bertswin"
    stem_base: int = 8
    dec_channels: tuple = (16, 8)
    dec_strides: Optional[tuple] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.patch_size < 1 or self.volume_size % self.patch_size:
            raise ConfigError(f"volume_size {self.volume_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim < 1 or self.heads < 1 or self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.depth < 0 or self.window < 1 or self.mlp_ratio <= 0:
            raise ConfigError("depth must be >= 0, window >= 1 and mlp_ratio > 0")
        if self.dec_strides is not None:
            object.__setattr__(self, "dec_strides", tuple(int(s) for s in self.dec_strides))
        object.__setattr__(self, "dec_channels", tuple(int(c) for c in self.dec_channels))

    @classmethod
    def canonical(cls, **overrides) -> "ModelConfig":
        base = dict(volume_size=224, patch_size=16, embed_dim=768, depth=12, heads=12,
                    window=7, mask_ratio=0.75, stem_base=48, dec_channels=(48, 24))
        base.update(overrides)
        return cls(**base)

    @property
    def grid_side(self) -> int:
        return self.volume_size // self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.grid_side ** 3

    @property
    def n_visible(self) -> int:
        return int(round((1.0 - self.mask_ratio) * self.n_tokens))

    @property
    def effective_window(self) -> int:
        return min(self.window, self.grid_side)

    @property
    def strides(self) -> tuple:
        return self.dec_strides if self.dec_strides is not None else decoder_strides(self.patch_size)

    @property
    def stem_stages(self) -> int:
        return int(math.log2(self.patch_size))

    def replace(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    def validate_for_model(self) -> None:
        """Checks that only matter when weights are actually built and run."""
        if self.variant == "bertswin":
            if not _is_pow2(self.patch_size) or self.patch_size < 4:
                raise ConfigError(f"stem needs a power-of-two patch size >= 4, got {self.patch_size}")
            if self.grid_side % self.effective_window:
                raise ConfigError(f"grid side {self.grid_side} not divisible by window {self.window}")
        if int(np.prod(self.strides)) != self.patch_size:
            raise ConfigError(f"decoder strides {self.strides} do not multiply to patch size {self.patch_size}")
        if len(self.dec_channels) != len(self.strides) - 1:
            raise ConfigError(f"need {len(self.strides) - 1} decoder channel widths, got {self.dec_channels}")
        if self.n_visible < 1:
            raise ConfigError("mask_ratio leaves no visible tokens")


# ---------------------------------------------------------------------------
# patches and masking
# ---------------------------------------------------------------------------

def patchify(v, patch: int):
    """``[..., D, H, W]`` -> ``[..., n_patches, patch**3]`` in (z, y, x) patch order.

    Works on numpy arrays and on tensors (differentiably).
    """
    arr = v.data if hasattr(v, "data") and not isinstance(v, (np.ndarray, Tensor)) else v
    shape = arr.shape
    d, h, w = shape[-3:]
    if d % patch or h % patch or w % patch:
        raise ConfigError(f"volume {shape[-3:]} not divisible by patch size {patch}")
    lead = shape[:-3]
    nl = len(lead)
    split = lead + (d // patch, patch, h // patch, patch, w // patch, patch)
    perm = tuple(range(nl)) + tuple(nl + i for i in (0, 2, 4, 1, 3, 5))
    final = lead + ((d // patch) * (h // patch) * (w // patch), patch ** 3)
    if isinstance(arr, Tensor):
        return arr.reshape(split).transpose(perm).reshape(final)
    return np.ascontiguousarray(np.asarray(arr).reshape(split).transpose(perm)).reshape(final)


def unpatchify(patches, patch: int, size: int):
    g = size // patch
    shape = patches.shape
    lead = shape[:-2]
    nl = len(lead)
    split = lead + (g, g, g, patch, patch, patch)
    perm = tuple(range(nl)) + tuple(nl + i for i in (0, 3, 1, 4, 2, 5))
    final = lead + (size, size, size)
    if isinstance(patches, Tensor):
        return patches.reshape(split).transpose(perm).reshape(final)
    return np.ascontiguousarray(np.asarray(patches).reshape(split).transpose(perm)).reshape(final)


@dataclass(frozen=True)
class MaskPlan:
    visible_idx: np.ndarray
    masked_idx: np.ndarray

    @property
    def n_tokens(self) -> int:
        return len(self.visible_idx) + len(self.masked_idx)

    @classmethod
    def from_visible(cls, visible, n_tokens: int) -> "MaskPlan":
        vis = np.unique(np.asarray(visible, dtype=np.int64))
        if vis.size and (vis[0] < 0 or vis[-1] >= n_tokens):
            raise ContractError("visible indices out of range")
        return cls(vis, np.setdiff1d(np.arange(n_tokens, dtype=np.int64), vis))


def sample_mask(n_tokens: int, ratio: float, seed: int, *stream: int) -> MaskPlan:
    """Uniform masking without replacement; keeps ``round((1-ratio)*n)`` tokens."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"mask ratio must lie in (0, 1), got {ratio}")
    n_vis = int(round((1.0 - ratio) * n_tokens))
    perm = keyed_rng(seed, 11, *stream).permutation(n_tokens)
    return MaskPlan.from_visible(perm[:n_vis], n_tokens)


def _as_plans(plans) -> list[MaskPlan]:
    return [plans] if isinstance(plans, MaskPlan) else list(plans)


# ---------------------------------------------------------------------------
# initialisation helpers
# ---------------------------------------------------------------------------

class _Init:
    def __init__(self, seed: int):
        self.rng = keyed_rng(seed, 7)
        self.params: dict[str, Tensor] = {}

    def add(self, name: str, arr: np.ndarray) -> None:
        self.params[name] = T.parameter(arr, name=name)

    def linear(self, name: str, d_in: int, d_out: int) -> None:
        bound = math.sqrt(6.0 / (d_in + d_out))
        self.add(f"{name}.w", self.rng.uniform(-bound, bound, (d_in, d_out)))
        self.add(f"{name}.b", np.zeros(d_out))

    def norm(self, name: str, d: int) -> None:
        self.add(f"{name}.g", np.ones(d))
        self.add(f"{name}.b", np.zeros(d))

    def conv(self, name: str, c_out: int, c_in: int, k: int) -> None:
        std = math.sqrt(2.0 / (c_in * k ** 3))
        self.add(f"{name}.w", self.rng.normal(0.0, std, (c_out, c_in, k, k, k)))
        self.add(f"{name}.b", np.zeros(c_out))

    def conv_t(self, name: str, c_in: int, c_out: int, k: int) -> None:
        std = math.sqrt(1.0 / c_in)
        self.add(f"{name}.w", self.rng.normal(0.0, std, (c_in, c_out, k, k, k)))
        self.add(f"{name}.b", np.zeros(c_out))

    def normal(self, name: str, shape, std: float = 0.02) -> None:
        self.add(name, self.rng.normal(0.0, std, shape))


def _init_blocks(init: _Init, cfg: ModelConfig) -> None:
    c = cfg.embed_dim
    hidden = int(round(cfg.mlp_ratio * c))
    for i in range(cfg.depth):
        pre = f"blocks.{i}"
        init.norm(f"{pre}.ln1", c)
        init.linear(f"{pre}.qkv", c, 3 * c)
        init.linear(f"{pre}.proj", c, c)
        init.norm(f"{pre}.ln2", c)
        init.linear(f"{pre}.fc1", c, hidden)
        init.linear(f"{pre}.fc2", hidden, c)
    init.norm("norm", c)


def _init_decoder(init: _Init, cfg: ModelConfig) -> None:
    chans = (cfg.embed_dim,) + cfg.dec_channels + (1,)
    for i, s in enumerate(cfg.strides):
        init.conv_t(f"dec.{i}", chans[i], chans[i + 1], s)


def stem_channels(cfg: ModelConfig) -> list[int]:
    return [cfg.stem_base * 2 ** i for i in range(cfg.stem_stages)]


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    cfg.validate_for_model()
    init = _Init(seed)
    c = cfg.embed_dim
    if cfg.variant == "bertswin":
        c_prev = 1
        for i, ch in enumerate(stem_channels(cfg)):
            init.conv(f"stem.{i}", ch, c_prev, 3)
            init.norm(f"stem.{i}.ln", ch)
            c_prev = ch
        init.linear("stem.proj", c_prev, c)
        init.normal("mask_token", (c,))
        init.normal("pos_emb", (cfg.n_tokens, c))
    else:
        init.linear("embed", cfg.patch_size ** 3, c)
        init.normal("mask_token", (c,))
    _init_blocks(init, cfg)
    _init_decoder(init, cfg)
    return init.params


def sincos_pos_embed(grid: int, dim: int) -> np.ndarray:
    """Fixed 3D sin-cos embedding; leftover channels when ``dim % 6 != 0`` stay zero."""
    per_axis = (dim // 6) * 2
    out = np.zeros((grid ** 3, dim))
    if per_axis == 0:
        return out
    half = per_axis // 2
    omega = 1.0 / 10000 ** (np.arange(half) / max(half, 1))
    coords = np.stack(np.meshgrid(*(np.arange(grid),) * 3, indexing="ij"), -1).reshape(-1, 3)
    for a in range(3):
        ang = coords[:, a:a + 1] * omega[None]
        out[:, a * per_axis:a * per_axis + half] = np.sin(ang)
        out[:, a * per_axis + half:(a + 1) * per_axis] = np.cos(ang)
    return out


# ---------------------------------------------------------------------------
# BertsWin components
# ---------------------------------------------------------------------------

def stem_embed(patches, params: dict, cfg: ModelConfig) -> Tensor:
    """``[M, patch**3]`` -> ``[M, embed_dim]`` via stride-2 conv/norm/GELU stages."""
    p = cfg.patch_size
    if not _is_pow2(p) or p < 4:
        raise ConfigError(f"stem needs a power-of-two patch size >= 4, got {p}")
    x = T.as_tensor(patches)
    m = x.shape[0]
    x = x.reshape(m, 1, p, p, p)
    with T.mac_scope("stem"):
        for i in range(cfg.stem_stages):
            x = T.conv3d(x, params[f"stem.{i}.w"], params[f"stem.{i}.b"], stride=2, pad=1)
            x = x.transpose(0, 2, 3, 4, 1)
            x = T.gelu(T.layernorm(x, params[f"stem.{i}.ln.g"], params[f"stem.{i}.ln.b"]))
            x = x.transpose(0, 4, 1, 2, 3)
        x = x.reshape(m, -1)
        return T.linear(x, params["stem.proj.w"], params["stem.proj.b"])


@dataclass
class TokenGrid:
    grid_side: int
    tokens: Tensor                 # [B, grid**3, C]
    visibility: np.ndarray         # [B, grid**3] bool


def scatter_full_grid(vis_emb, plans, mask_token, pos_emb) -> TokenGrid:
    """Place visible embeddings at their grid positions and fill the rest with the mask token.

    ``vis_emb`` is ``[B * n_vis, C]`` ordered sample-major then by sorted
    visible index. ``pos_emb`` is added at every position.
    """
    plans = _as_plans(plans)
    vis_emb = T.as_tensor(vis_emb)
    n_tokens = plans[0].n_tokens
    counts = [len(pl.visible_idx) for pl in plans]
    if vis_emb.shape[0] != sum(counts):
        raise ContractError(f"{vis_emb.shape[0]} visible embeddings for plans expecting {sum(counts)}")
    if T.as_tensor(pos_emb).shape[0] != n_tokens:
        raise ContractError(f"pos_emb has {T.as_tensor(pos_emb).shape[0]} rows, grid has {n_tokens}")
    mask_row = vis_emb.shape[0]
    index = np.full((len(plans), n_tokens), mask_row, dtype=np.int64)
    vis = np.zeros((len(plans), n_tokens), dtype=bool)
    offset = 0
    for b, pl in enumerate(plans):
        if pl.n_tokens != n_tokens:
            raise ContractError("all plans must cover the same grid")
        index[b, pl.visible_idx] = offset + np.arange(len(pl.visible_idx))
        vis[b, pl.visible_idx] = True
        offset += len(pl.visible_idx)
    table = T.concat([vis_emb, T.as_tensor(mask_token).reshape(1, -1)], axis=0)
    tokens = T.take(table, index, axis=0) + pos_emb
    side = round(n_tokens ** (1 / 3))
    return TokenGrid(side, tokens, vis)


@lru_cache(maxsize=64)
def shift_attention_mask(grid: int, window: int, shift: int) -> np.ndarray:
    """``[n_windows, window**3, window**3]`` additive mask for a rolled grid.

    Zero where both tokens come from the same contiguous region before the
    roll, ``-inf`` where the cyclic roll brought them together.
    """
    nw = (grid // window) ** 3
    n = window ** 3
    if shift == 0:
        return np.zeros((nw, n, n))
    region = np.zeros(grid, dtype=np.int64)
    region[grid - window:grid - shift] = 1
    region[grid - shift:] = 2
    label = (region[:, None, None] * 9 + region[None, :, None] * 3 + region[None, None, :])
    lw = _partition_array(label[None, ..., None], grid, window)[..., 0]   # [nw, n]
    out = np.where(lw[:, :, None] != lw[:, None, :], -np.inf, 0.0)
    out.setflags(write=False)
    return out


def _partition_array(x: np.ndarray, grid: int, window: int) -> np.ndarray:
    b, c = x.shape[0], x.shape[-1]
    k = grid // window
    x = x.reshape(b, k, window, k, window, k, window, c).transpose(0, 1, 3, 5, 2, 4, 6, 7)
    return x.reshape(b * k ** 3, window ** 3, c)


def window_partition(tokens, grid: int, window: int, shift: int = 0):
    """Roll by ``-shift`` on each spatial axis, then cut into ``window**3`` cubes.

    ``tokens`` is ``[B, grid**3, C]``; returns ``(windows [B*n_win, window**3, C],
    attn_mask [n_win, window**3, window**3])``.
    """
    if grid % window:
        raise ConfigError(f"grid side {grid} not divisible by window {window}")
    if not 0 <= shift < window:
        raise ConfigError(f"shift {shift} must lie in [0, window)")
    x = T.as_tensor(tokens)
    b, _, c = x.shape
    k = grid // window
    x = x.reshape(b, grid, grid, grid, c)
    if shift:
        x = T.roll(x, (-shift,) * 3, axis=(1, 2, 3))
    x = x.reshape(b, k, window, k, window, k, window, c).transpose(0, 1, 3, 5, 2, 4, 6, 7)
    return x.reshape(b * k ** 3, window ** 3, c), shift_attention_mask(grid, window, shift)


def window_reverse(windows, grid: int, window: int, shift: int = 0) -> Tensor:
    """Inverse of :func:`window_partition`."""
    x = T.as_tensor(windows)
    k = grid // window
    c = x.shape[-1]
    b = x.shape[0] // k ** 3
    x = x.reshape(b, k, k, k, window, window, window, c).transpose(0, 1, 4, 2, 5, 3, 6, 7)
    x = x.reshape(b, grid, grid, grid, c)
    if shift:
        x = T.roll(x, (shift,) * 3, axis=(1, 2, 3))
    return x.reshape(b, grid ** 3, c)


def _attend(h: Tensor, params: dict, pre: str, heads: int, mask: Optional[np.ndarray]) -> Tensor:
    bw, n, c = h.shape
    d = c // heads
    qkv = T.linear(h, params[f"{pre}.qkv.w"], params[f"{pre}.qkv.b"])
    qkv = qkv.reshape(bw, n, 3, heads, d).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    if mask is not None:
        nw = mask.shape[0]
        mask = np.broadcast_to(mask[None, :, None], (bw // nw, nw, 1, n, n)).reshape(bw, 1, n, n)
    out = T.attention(q, k, v, mask)
    out = out.transpose(0, 2, 1, 3).reshape(bw, n, c)
    return T.linear(out, params[f"{pre}.proj.w"], params[f"{pre}.proj.b"])


def _mlp(x: Tensor, params: dict, pre: str) -> Tensor:
    h = T.layernorm(x, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
    h = T.gelu(T.linear(h, params[f"{pre}.fc1.w"], params[f"{pre}.fc1.b"]))
    return T.linear(h, params[f"{pre}.fc2.w"], params[f"{pre}.fc2.b"])


def block_shift(index: int, cfg: ModelConfig) -> int:
    w = cfg.effective_window
    if w >= cfg.grid_side:
        return 0
    return w // 2 if index % 2 else 0


def swin_block(x, params: dict, index: int, cfg: ModelConfig, shift: Optional[int] = None) -> Tensor:
    """Pre-norm block with (shifted) window attention over the full grid."""
    x = T.as_tensor(x)
    pre = f"blocks.{index}"
    g, w = cfg.grid_side, cfg.effective_window
    s = block_shift(index, cfg) if shift is None else shift
    h = T.layernorm(x, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
    win, mask = window_partition(h, g, w, s)
    a = _attend(win, params, pre, cfg.heads, mask if s else None)
    x = x + window_reverse(a, g, w, s)
    return x + _mlp(x, params, pre)


def global_block(x, params: dict, index: int, cfg: ModelConfig) -> Tensor:
    """Pre-norm transformer block with full self-attention."""
    x = T.as_tensor(x)
    pre = f"blocks.{index}"
    h = T.layernorm(x, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
    x = x + _attend(h, params, pre, cfg.heads, None)
    return x + _mlp(x, params, pre)


def _visible_patches(volumes: np.ndarray, plans: list[MaskPlan], cfg: ModelConfig) -> np.ndarray:
    vols = np.asarray(volumes, dtype=np.float64)
    if vols.ndim == 3:
        vols = vols[None]
    if vols.shape[0] != len(plans):
        raise ContractError(f"{vols.shape[0]} volumes but {len(plans)} mask plans")
    if vols.shape[1:] != (cfg.volume_size,) * 3:
        raise ContractError(f"volume shape {vols.shape[1:]} does not match config size {cfg.volume_size}")
    patches = patchify(vols, cfg.patch_size)
    return np.concatenate([patches[b, pl.visible_idx] for b, pl in enumerate(plans)], axis=0)


def encode(volumes, plans, params: dict, cfg: ModelConfig) -> Tensor:
    """Full-grid BertsWin encoder: ``[B, D, H, W]`` -> ``[B, grid**3, C]``."""
    if cfg.variant != "bertswin":
        raise ConfigError("encode() is the BertsWin path; use vit_sparse_encode() for the baseline")
    plans = _as_plans(plans)
    emb = stem_embed(_visible_patches(volumes, plans, cfg), params, cfg)
    grid = scatter_full_grid(emb, plans, params["mask_token"], params["pos_emb"])
    return encode_grid(grid.tokens, params, cfg)


def encode_grid(tokens, params: dict, cfg: ModelConfig) -> Tensor:
    """Swin trunk plus final norm over an already embedded token grid."""
    x = T.as_tensor(tokens)
    with T.mac_scope("encoder"):
        for i in range(cfg.depth):
            x = swin_block(x, params, i, cfg)
    return T.layernorm(x, params["norm.g"], params["norm.b"])


def decode(features, params: dict, cfg: ModelConfig) -> Tensor:
    """``[B, grid**3, C]`` -> ``[B, D, H, W]`` via the transposed-conv stack."""
    strides = cfg.strides
    if int(np.prod(strides)) != cfg.patch_size:
        raise ConfigError(f"decoder strides {strides} do not multiply to patch size {cfg.patch_size}")
    x = T.as_tensor(features)
    b, n, c = x.shape
    g = cfg.grid_side
    if n != g ** 3:
        raise ContractError(f"decoder expects {g ** 3} tokens, got {n}")
    x = x.reshape(b, g, g, g, c).transpose(0, 4, 1, 2, 3)
    with T.mac_scope("decoder"):
        for i, s in enumerate(strides):
            x = T.conv_transpose3d(x, params[f"dec.{i}.w"], params[f"dec.{i}.b"], stride=s)
            if i < len(strides) - 1:
                x = T.gelu(x)
    size = cfg.volume_size
    return x.reshape(b, size, size, size)


# ---------------------------------------------------------------------------
# sparse ViT baseline
# ---------------------------------------------------------------------------

def vit_sparse_encode(volumes, plans, params: dict, cfg: ModelConfig,
                      pos: Optional[np.ndarray] = None) -> Tensor:
    """Encode visible patches only: ``[B, D, H, W]`` -> ``[B, n_vis, C]``."""
    if cfg.variant != "vit_sparse":
        raise ConfigError("vit_sparse_encode() needs variant='vit_sparse'")
    plans = _as_plans(plans)
    n_vis = len(plans[0].visible_idx)
    if any(len(pl.visible_idx) != n_vis for pl in plans):
        raise ContractError("all plans in a batch must keep the same number of tokens")
    pos = sincos_pos_embed(cfg.grid_side, cfg.embed_dim) if pos is None else pos
    with T.mac_scope("stem"):
        x = T.linear(_visible_patches(volumes, plans, cfg), params["embed.w"], params["embed.b"])
    x = x.reshape(len(plans), n_vis, cfg.embed_dim)
    x = x + np.stack([pos[pl.visible_idx] for pl in plans])
    with T.mac_scope("encoder"):
        for i in range(cfg.depth):
            x = global_block(x, params, i, cfg)
    return T.layernorm(x, params["norm.g"], params["norm.b"])


def pooled_features(features, variant: str = "bertswin") -> Tensor:
    """Mean over the token axis (all grid tokens, or all visible tokens for the baseline)."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    f = T.as_tensor(features)
    if f.ndim < 2 or f.shape[-2] == 0:
        raise ContractError("pooled_features needs a non-empty token axis")
    return f.mean(axis=-2)


# ---------------------------------------------------------------------------
# model wrappers
# ---------------------------------------------------------------------------

@dataclass
class MaskedAutoencoder:
    """A config plus its parameter map, with reconstruction and feature helpers."""

    cfg: ModelConfig
    params: dict = field(default_factory=dict)
    seed: int = 0

    @classmethod
    def build(cls, cfg: ModelConfig, seed: int = 0) -> "MaskedAutoencoder":
        return cls(cfg, init_params(cfg, seed), seed)

    def __post_init__(self):
        self._pos = sincos_pos_embed(self.cfg.grid_side, self.cfg.embed_dim) \
            if self.cfg.variant == "vit_sparse" else None

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def features(self, volumes, plans) -> Tensor:
        if self.cfg.variant == "bertswin":
            return encode(volumes, plans, self.params, self.cfg)
        return vit_sparse_encode(volumes, plans, self.params, self.cfg, self._pos)

    def reconstruct(self, volumes, plans) -> Tensor:
        plans = _as_plans(plans)
        feats = self.features(volumes, plans)
        if self.cfg.variant == "vit_sparse":
            b, n_vis, c = feats.shape
            grid = scatter_full_grid(feats.reshape(b * n_vis, c), plans,
                                     self.params["mask_token"], self._pos)
            feats = grid.tokens
        return decode(feats, self.params, self.cfg)

    def embed(self, volumes, plans) -> np.ndarray:
        """Pooled encoder features ``[B, C]`` without recording a graph."""
        with T.no_grad():
            return pooled_features(self.features(volumes, plans), self.cfg.variant).data
