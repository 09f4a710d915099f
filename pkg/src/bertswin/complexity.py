"""Closed-form MAC/FLOP model for both encoder families.

FLOPs are reported as 2 x MACs in GFLOPs. Norms, softmax and activations are
not counted. Two token-accounting policies are supported:

``table``
    The published comparison convention: the BertsWin stem is charged for
    every patch while both encoders are charged for the visible 25% of tokens
    only, and the baseline decoder is the default MAE transformer decoder
    (4 blocks, width 384, MLP 512) over the full token set.
``executed``
    What the code in :mod:`bertswin.model` actually runs: the stem embeds
    visible patches, the windowed encoder sees the full grid, and the
    baseline reuses the transposed-conv decoder. This matches the
    instrumented MAC counters exactly.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError
from .model import ModelConfig, decoder_strides


@dataclass(frozen=True)
class ArchParams:
    mlp_ratio: float = 4.0
    stem_base: int = 48
    dec_channels: tuple = (48, 24)
    vit_dec_dim: int = 384
    vit_dec_mlp: int = 512
    vit_dec_depth: int = 4
    token_policy: str = "table"
    vit_decoder: str = "mae_transformer"

    def __post_init__(self):
        if self.token_policy not in ("table", "executed"):
            raise ConfigError(f"token_policy must be 'table' or 'executed', got {self.token_policy!r}")
        if self.vit_decoder not in ("mae_transformer", "conv"):
            raise ConfigError(f"vit_decoder must be 'mae_transformer' or 'conv', got {self.vit_decoder!r}")

    @classmethod
    def executed_for(cls, cfg: ModelConfig) -> "ArchParams":
        """Arch params mirroring a runnable model config under executed accounting."""
        return cls(mlp_ratio=cfg.mlp_ratio, stem_base=cfg.stem_base, dec_channels=cfg.dec_channels,
                   token_policy="executed", vit_decoder="conv")


@dataclass(frozen=True)
class FlopsReport:
    stem: float
    encoder: float
    decoder: float
    volume: int
    patch: int
    variant: str
    mask_ratio: float
    label: str = ""

    @property
    def total(self) -> float:
        return self.stem + self.encoder + self.decoder

    def as_dict(self) -> dict:
        d = asdict(self)
        d["total"] = self.total
        return d


# ---------------------------------------------------------------------------
# MAC counts per component (per sample)
# ---------------------------------------------------------------------------

def stem_macs_per_patch(patch: int, embed_dim: int, stem_base: int) -> int:
    """Stride-2, k=3 conv stages from ``patch**3`` down to 1 voxel, then a linear projection."""
    macs, c_in, side = 0, 1, patch
    for i in range(int(math.log2(patch))):
        side //= 2
        c_out = stem_base * 2 ** i
        macs += side ** 3 * 27 * c_in * c_out
        c_in = c_out
    return macs + c_in * embed_dim


def transformer_block_macs(n: int, dim: int, hidden: int, keys_per_query: int) -> int:
    """qkv + output projection + MLP + scores and value aggregation."""
    return 4 * n * dim * dim + 2 * n * dim * hidden + 2 * n * keys_per_query * dim


def conv_decoder_macs(grid: int, embed_dim: int, channels: Sequence[int], strides: Sequence[int]) -> int:
    """Transposed convs with kernel == stride: one MAC per (output voxel, c_in, c_out)."""
    chans = (embed_dim,) + tuple(channels) + (1,)
    if len(chans) != len(strides) + 1:
        raise ConfigError(f"{len(strides)} decoder strides need {len(strides) - 1} channel widths, got {channels}")
    macs, side = 0, grid
    for i, s in enumerate(strides):
        side *= s
        macs += side ** 3 * chans[i] * chans[i + 1]
    return macs


def _gflops(macs: float) -> float:
    return 2.0 * macs / 1e9


def flops_model(cfg: ModelConfig, arch: ArchParams = ArchParams(), label: str = "") -> FlopsReport:
    """Stem / encoder / decoder GFLOPs for one sample of ``cfg``."""
    if cfg.variant not in ("bertswin", "vit_sparse"):
        raise ConfigError(f"unsupported variant {cfg.variant!r}")
    p, c, g = cfg.patch_size, cfg.embed_dim, cfg.grid_side
    n_all, n_vis = cfg.n_tokens, cfg.n_visible
    hidden = int(round(arch.mlp_ratio * c))
    table = arch.token_policy == "table"
    if cfg.variant == "bertswin":
        stem = stem_macs_per_patch(p, c, arch.stem_base) * (n_all if table else n_vis)
        w3 = cfg.effective_window ** 3
        n_enc = n_vis if table else n_all
        enc = cfg.depth * transformer_block_macs(n_enc, c, hidden, w3)
        dec = conv_decoder_macs(g, c, arch.dec_channels, _strides(cfg, arch))
    else:
        stem = p ** 3 * c * (n_all if table else n_vis)
        enc = cfg.depth * transformer_block_macs(n_vis, c, hidden, n_vis)
        if arch.vit_decoder == "conv":
            dec = conv_decoder_macs(g, c, arch.dec_channels, _strides(cfg, arch))
        else:
            d = arch.vit_dec_dim
            dec = (n_vis * c * d
                   + arch.vit_dec_depth * transformer_block_macs(n_all, d, arch.vit_dec_mlp, n_all)
                   + n_all * d * p ** 3)
    return FlopsReport(_gflops(stem), _gflops(enc), _gflops(dec), cfg.volume_size, p,
                       cfg.variant, cfg.mask_ratio, label)


def empirical_op_count(cfg: ModelConfig, seed: int = 0, params: dict | None = None) -> FlopsReport:
    """Instrumented GFLOPs of one real forward pass (single sample, one random mask).

    Compare against ``flops_model(cfg, ArchParams.executed_for(cfg))``.
    """
    from . import tensor as T
    from .model import MaskedAutoencoder, init_params, sample_mask

    model = MaskedAutoencoder(cfg, params if params is not None else init_params(cfg, seed), seed)
    vol = np.random.default_rng(seed).normal(size=(1,) + (cfg.volume_size,) * 3)
    plan = sample_mask(cfg.n_tokens, cfg.mask_ratio, seed)
    with T.no_grad(), T.count_macs() as counter:
        model.reconstruct(vol, plan)
    by = counter.by_scope
    return FlopsReport(_gflops(by.get("stem", 0)), _gflops(by.get("encoder", 0)), _gflops(by.get("decoder", 0)),
                       cfg.volume_size, cfg.patch_size, cfg.variant, cfg.mask_ratio, "counted")


def _strides(cfg: ModelConfig, arch: ArchParams) -> tuple:
    if cfg.dec_strides is not None:
        return cfg.dec_strides
    return decoder_strides(cfg.patch_size, len(arch.dec_channels) + 1)


# ---------------------------------------------------------------------------
# the published comparison grid
# ---------------------------------------------------------------------------

MODEL_FAMILY = {
    "BertsWin Base": dict(variant="bertswin", embed_dim=768, depth=12, heads=12),
    "BertsWin Small": dict(variant="bertswin", embed_dim=384, depth=12, heads=6),
    "MONAI ViT Base": dict(variant="vit_sparse", embed_dim=768, depth=12, heads=12),
}

# (stem, encoder, decoder, total) GFLOPs as published, keyed by (volume, patch, model)
PUBLISHED = {
    (224, 16, "BertsWin Base"): (81.7, 125.2, 16.9, 223.8),
    (224, 16, "BertsWin Small"): (80.9, 33.5, 9.5, 123.9),
    (224, 16, "MONAI ViT Base"): (17.3, 134.1, 76.9, 228.3),
    (512, 16, "BertsWin Base"): (976.0, 1495.2, 201.9, 2673.1),
    (512, 16, "BertsWin Small"): (966.4, 399.7, 113.8, 1479.9),
    (512, 16, "MONAI ViT Base"): (206.2, 3866.2, 6963.1, 11035.5),
    (512, 32, "BertsWin Base"): (1026.8, 186.9, 59.1, 1272.7),
    (512, 32, "BertsWin Small"): (1024.4, 50.0, 48.1, 1122.4),
    (512, 32, "MONAI ViT Base"): (206.2, 212.9, 239.1, 658.1),
}


def family_config(name: str, volume: int, patch: int, window: int = 7, mask_ratio: float = 0.75) -> ModelConfig:
    if name not in MODEL_FAMILY:
        raise ConfigError(f"unknown model {name!r}; expected one of {sorted(MODEL_FAMILY)}")
    return ModelConfig(volume_size=volume, patch_size=patch, window=window, mask_ratio=mask_ratio,
                       stem_base=48, dec_channels=(48, 24), **MODEL_FAMILY[name])


def crossover_table(resolutions: Iterable[int] = (224, 512), patch_sizes: Iterable[int] = (16, 32),
                    arch: ArchParams = ArchParams(), skip: Iterable[tuple] = ((224, 32),)) -> dict:
    """Totals for every (resolution, patch, model) plus baseline/BertsWin ratios.

    Returns ``{"rows": [FlopsReport...], "ratios": {(vol, patch): {model: vit_total/model_total}}}``.
    """
    skip = set(skip)
    rows, ratios = [], {}
    res, pats = list(resolutions), list(patch_sizes)
    if not res or not pats:
        raise ConfigError("crossover_table needs at least one resolution and one patch size")
    for vol in res:
        for p in pats:
            if (vol, p) in skip or vol % p:
                continue
            block = {name: flops_model(family_config(name, vol, p), arch, label=name) for name in MODEL_FAMILY}
            rows.extend(block.values())
            vit = block["MONAI ViT Base"].total
            ratios[(vol, p)] = {name: vit / r.total for name, r in block.items() if name != "MONAI ViT Base"}
    return {"rows": rows, "ratios": ratios}


def fit_exponent(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Least-squares slope of log(y) against log(x)."""
    lx, ly = np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float))
    return float(np.polyfit(lx, ly, 1)[0])


def encoder_scaling(variant: str, resolutions: Sequence[int], patch: int = 16,
                    arch: ArchParams = ArchParams()) -> tuple[list[int], list[float]]:
    """(token counts, encoder GFLOPs) across resolutions.

    Token count is the full grid for the windowed encoder and the visible set
    for the global one, the quantity each is claimed to scale with.
    """
    name = "BertsWin Base" if variant == "bertswin" else "MONAI ViT Base"
    ns, fl = [], []
    for vol in resolutions:
        cfg = family_config(name, vol, patch)
        rep = flops_model(cfg, arch)
        ns.append(cfg.n_tokens if variant == "bertswin" else cfg.n_visible)
        fl.append(rep.encoder)
    return ns, fl


def format_table(reports: Sequence[FlopsReport], csv: bool = False) -> str:
    header = ("model", "volume", "patch", "stem", "encoder", "decoder", "total")
    lines = []
    if csv:
        lines.append(",".join(header))
        for r in reports:
            lines.append(f"{r.label or r.variant},{r.volume},{r.patch},{r.stem:.3f},{r.encoder:.3f},"
                         f"{r.decoder:.3f},{r.total:.3f}")
        return "\n".join(lines) + "\n"
    lines.append(f"{'Model':<16}{'Config':>12}{'Stem':>10}{'Encoder':>10}{'Decoder':>10}{'Total':>10}")
    for r in reports:
        conf = f"{r.volume}^3 P{r.patch}"
        lines.append(f"{r.label or r.variant:<16}{conf:>12}{r.stem:>10.1f}{r.encoder:>10.1f}"
                     f"{r.decoder:>10.1f}{r.total:>10.1f}")
    return "\n".join(lines) + "\n"
