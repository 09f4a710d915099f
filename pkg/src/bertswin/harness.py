"""Run configuration, deterministic pretraining loops, and convergence comparison.

Every random draw is keyed by ``(run seed, stream id, step, ...)`` so a run
is a pure function of its config, and a run resumed from a checkpoint at
step k produces the same records for steps > k as an uninterrupted run.
"""
from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import tomli
import tomli_w

from . import tensor as T
from .checkpoint import Checkpoint, checkpoint_hash, checkpoint_load, checkpoint_save
from .errors import BertsWinError, ConfigError, ContractError
from .gcond import AdamWHyper, GcondHyper, Optimizer
from .losses import (MvcWeights, PhysWeights, RegionMasks, make_bone_shell_mask, make_soft_tissue_mask,
                     masked_recon_l2, masked_voxels, mvc_loss, phys_loss)
from .model import MaskedAutoencoder, MaskPlan, ModelConfig, sample_mask
from .rng import keyed_rng
from .synthvol import BONE, NormStats, compute_norm_stats, gen_phantom, hu_normalize

# stream ids for keyed_rng
_DATA, _BATCH, _VALMASK = 1, 21, 23
_PHANTOM_SEED_SPACE = 1_000_000


class TrainingDiverged(BertsWinError, RuntimeError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Flat run configuration; every field maps to one TOML key."""

    # model
    variant: str = "bertswin"
    volume_size: int = 32
    patch_size: int = 8
    embed_dim: int = 32
    depth: int = 2
    heads: int = 4
    window: int = 2
    mlp_ratio: float = 4.0
    mask_ratio: float = 0.75
    stem_base: int = 8
    dec_channels: tuple = (16, 8)
    # loss
    loss: str = "l2"
    sub_patch: int = 4
    mvc_all_patches: bool = False
    w_br: float = 0.3
    w_cntr: float = 0.2
    w_str: float = 0.5
    lambda_global: float = 0.3
    lambda_soft: float = 0.5
    lambda_surf: float = 0.2
    # optimizer
    optimizer: str = "gcond"
    eta_gamma: float = 1e-3
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_clip: float = 10.0
    weight_decay: float = 0.0
    # data
    seed: int = 0
    n_train: int = 32
    n_val: int = 8
    batch_size: int = 8
    # schedule
    steps: int = 200
    val_every: int = 20
    checkpoint_every: int = 0
    early_stop_metric: str = "masked_l2"
    early_stop_patience: int = 0
    early_stop_threshold: float = 0.0
    out_dir: str = "runs/desk"

    def __post_init__(self):
        object.__setattr__(self, "dec_channels", tuple(int(c) for c in self.dec_channels))
        if self.loss not in ("l2", "mvc", "phys"):
            raise ConfigError(f"loss must be l2, mvc or phys, got {self.loss!r}")
        if self.optimizer not in ("gcond", "adamw"):
            raise ConfigError(f"optimizer must be gcond or adamw, got {self.optimizer!r}")
        if self.n_train < 1 or self.n_val < 1:
            raise ConfigError("n_train and n_val must be >= 1")
        if not 1 <= self.batch_size <= self.n_train:
            raise ConfigError(f"batch_size must lie in [1, n_train={self.n_train}], got {self.batch_size}")
        if self.steps < 0 or self.val_every < 1 or self.checkpoint_every < 0 or self.early_stop_patience < 0:
            raise ConfigError("steps >= 0, val_every >= 1, checkpoint_every >= 0, early_stop_patience >= 0 required")
        if self.early_stop_metric not in ("masked_l2", "mvc_soft", "mvc_surf", "loss"):
            raise ConfigError(f"unknown early-stop metric {self.early_stop_metric!r}")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if self.patch_size % self.sub_patch:
            raise ConfigError(f"sub_patch {self.sub_patch} must divide patch_size {self.patch_size}")
        self.model_config().validate_for_model()
        self.gcond_hyper() if self.optimizer == "gcond" else self.adamw_hyper()

    # -- views -------------------------------------------------------------
    def model_config(self) -> ModelConfig:
        return ModelConfig(volume_size=self.volume_size, patch_size=self.patch_size, embed_dim=self.embed_dim,
                           depth=self.depth, heads=self.heads, window=self.window, mlp_ratio=self.mlp_ratio,
                           mask_ratio=self.mask_ratio, variant=self.variant, stem_base=self.stem_base,
                           dec_channels=self.dec_channels)

    def gcond_hyper(self) -> GcondHyper:
        return GcondHyper(self.eta_gamma, self.beta1, self.eps, self.lambda_clip, self.weight_decay)

    def adamw_hyper(self) -> AdamWHyper:
        return AdamWHyper(self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # -- serialisation -----------------------------------------------------
    def to_toml(self) -> str:
        d = dataclasses.asdict(self)
        d["dec_channels"] = list(self.dec_channels)
        return tomli_w.dumps(d)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - set(names))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        clean = {}
        for key, value in data.items():
            default = names[key].default
            if isinstance(default, bool):
                ok = isinstance(value, bool)
            elif isinstance(default, int):
                ok = isinstance(value, int) and not isinstance(value, bool)
            elif isinstance(default, float):
                ok = isinstance(value, (int, float)) and not isinstance(value, bool)
                value = float(value) if ok else value
            elif isinstance(default, tuple):
                ok = isinstance(value, (list, tuple)) and all(isinstance(v, int) for v in value)
            else:
                ok = isinstance(value, str)
            if not ok:
                raise ConfigError(f"config key {key!r} has wrong type: {value!r}")
            clean[key] = value
        try:
            return cls(**clean)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_toml(cls, text: str) -> "RunConfig":
        try:
            data = tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"invalid config file: {exc}") from exc
        nested = [k for k, v in data.items() if isinstance(v, dict)]
        if nested:
            raise ConfigError(f"config must be flat key = value pairs; found tables: {nested}")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_toml(text)


DESK_CELLS = {
    "bertswin-l2-gcond": dict(variant="bertswin", loss="l2", optimizer="gcond"),
    "bertswin-l2-adamw": dict(variant="bertswin", loss="l2", optimizer="adamw"),
    "sparse-l2-gcond": dict(variant="vit_sparse", loss="l2", optimizer="gcond"),
    "sparse-l2-adamw": dict(variant="vit_sparse", loss="l2", optimizer="adamw"),
    "bertswin-phys-gcond": dict(variant="bertswin", loss="phys", optimizer="gcond"),
}


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def data_seeds(seed: int, n_train: int, n_val: int) -> tuple[list[int], list[int]]:
    """Disjoint phantom seed lists drawn without replacement from one permutation."""
    draw = keyed_rng(seed, _DATA).choice(_PHANTOM_SEED_SPACE, n_train + n_val, replace=False)
    train, val = [int(s) for s in draw[:n_train]], [int(s) for s in draw[n_train:]]
    if set(train) & set(val):
        raise ContractError("train and validation phantom seeds overlap")
    return train, val


@dataclass
class Split:
    seeds: list
    x: np.ndarray              # normalised volumes [n, D, H, W]
    soft: np.ndarray           # soft-tissue band masks
    surf: np.ndarray           # bone-shell masks


@dataclass
class Dataset:
    train: Split
    val: Split
    stats: NormStats


def build_dataset(cfg: RunConfig) -> Dataset:
    train_seeds, val_seeds = data_seeds(cfg.seed, cfg.n_train, cfg.n_val)
    assert not set(train_seeds) & set(val_seeds), "train/val phantom seeds must be disjoint"

    def load(seeds):
        pairs = [gen_phantom(s, cfg.volume_size, patch_size=cfg.patch_size) for s in seeds]
        hu = np.stack([v.data for v, _ in pairs])
        bone = np.stack([m.labels == BONE for _, m in pairs])
        return hu, bone

    tr_hu, tr_bone = load(train_seeds)
    va_hu, va_bone = load(val_seeds)
    stats = compute_norm_stats(list(tr_hu))

    def split(seeds, hu, bone):
        return Split(seeds, hu_normalize(hu, stats), make_soft_tissue_mask(hu), make_bone_shell_mask(bone))

    return Dataset(split(train_seeds, tr_hu, tr_bone), split(val_seeds, va_hu, va_bone), stats)


def batch_indices(cfg: RunConfig, step: int) -> np.ndarray:
    return np.sort(keyed_rng(cfg.seed, _BATCH, step).choice(cfg.n_train, cfg.batch_size, replace=False))


def train_plans(cfg: RunConfig, step: int) -> list[MaskPlan]:
    n = cfg.model_config().n_tokens
    return [sample_mask(n, cfg.mask_ratio, cfg.seed, step, b) for b in range(cfg.batch_size)]


def val_plans(cfg: RunConfig) -> list[MaskPlan]:
    n = cfg.model_config().n_tokens
    return [sample_mask(n, cfg.mask_ratio, cfg.seed, _VALMASK, i) for i in range(cfg.n_val)]


# ---------------------------------------------------------------------------
# losses as configured
# ---------------------------------------------------------------------------

def _scope(cfg: RunConfig, plans) -> Optional[np.ndarray]:
    return None if cfg.mvc_all_patches else masked_voxels(plans, cfg.patch_size, cfg.volume_size)


def compute_loss(cfg: RunConfig, rec, x: np.ndarray, plans, soft: np.ndarray, surf: np.ndarray):
    """Return ``(loss tensor, detail dict)`` for the configured objective."""
    w = MvcWeights(cfg.w_br, cfg.w_cntr, cfg.w_str)
    if cfg.loss == "l2":
        return masked_recon_l2(rec, x, plans, cfg.patch_size), {}
    scope = _scope(cfg, plans)
    if cfg.loss == "mvc":
        loss, comp = mvc_loss(rec, x, cfg.sub_patch, w, region=scope, return_components=True)
        return loss, {"components": comp}
    lam = PhysWeights(cfg.lambda_global, cfg.lambda_soft, cfg.lambda_surf)
    rep = phys_loss(rec, x, RegionMasks(soft, surf), lam, w, cfg.sub_patch, scope=scope)
    return rep.total, {"terms": rep.terms, "components": rep.components, "empty": rep.empty}


def _region_mvc(cfg: RunConfig, rec, x, region) -> Optional[float]:
    try:
        return float(mvc_loss(rec, x, cfg.sub_patch, MvcWeights(cfg.w_br, cfg.w_cntr, cfg.w_str),
                              region=region).item())
    except ContractError:
        return None


def validate(cfg: RunConfig, model: MaskedAutoencoder, val: Split, plans) -> dict:
    with T.no_grad():
        rec = model.reconstruct(val.x, plans)
        loss, _ = compute_loss(cfg, rec, val.x, plans, val.soft, val.surf)
        scope = masked_voxels(plans, cfg.patch_size, cfg.volume_size)
        return {
            "loss": float(loss.item()),
            "masked_l2": float(masked_recon_l2(rec, val.x, plans, cfg.patch_size).item()),
            "mvc_soft": _region_mvc(cfg, rec, val.x, scope & val.soft),
            "mvc_surf": _region_mvc(cfg, rec, val.x, scope & val.surf),
        }


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class EarlyStop:
    metric: str
    patience: int
    threshold: float
    best: Optional[float] = None
    bad: int = 0

    def update(self, value: Optional[float]) -> bool:
        """Record a validation value; True when training should stop."""
        if self.patience == 0 or value is None:
            return False
        if self.best is None or value < self.best - self.threshold:
            self.best, self.bad = value, 0
            return False
        self.bad += 1
        return self.bad >= self.patience


class MetricsWriter:
    """Single appender for the JSON-lines stream (and an optional timing sidecar)."""

    def __init__(self, path: Optional[Path], timing_path: Optional[Path] = None):
        self.path, self.timing_path = path, timing_path
        self.records: list[dict] = []

    def write(self, record: dict, wall_ms: Optional[float] = None) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        if self.timing_path is not None and wall_ms is not None:
            with open(self.timing_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps({"step": record["step"], "split": record["split"], "wall_ms": wall_ms}) + "\n")


@dataclass
class RunResult:
    metrics: list
    step: int
    checkpoint: Optional[Path] = None
    checkpoint_hash: Optional[str] = None
    stopped_early: bool = False
    model: Optional[MaskedAutoencoder] = None
    stats: Optional[NormStats] = None


def read_metrics(path: Union[str, Path]) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _state_tensors(model: MaskedAutoencoder, opt: Optimizer) -> dict:
    out = {f"param/{k}": p.data for k, p in model.params.items()}
    for buf, arrs in opt.state.buffers.items():
        for k, a in arrs.items():
            out[f"opt/{buf}/{k}"] = a
    return out


def save_run_checkpoint(path: Path, cfg: RunConfig, step: int, model: MaskedAutoencoder, opt: Optimizer,
                        stop: EarlyStop, stats: NormStats) -> str:
    meta = {"optimizer": opt.kind, "opt_t": opt.state.t, "early_stop_best": repr(stop.best),
            "early_stop_bad": stop.bad, "norm_clip_lo": repr(stats.clip_lo), "norm_clip_hi": repr(stats.clip_hi),
            "norm_mean": repr(stats.mean), "norm_std": repr(stats.std)}
    checkpoint_save(path, Checkpoint(step, _state_tensors(model, opt), cfg.to_toml(), meta))
    return checkpoint_hash(path)


def _same_run(a: RunConfig, b: RunConfig) -> bool:
    ignore = {"steps": 0, "out_dir": "", "checkpoint_every": 0}
    return a.replace(**ignore) == b.replace(**ignore)


def load_model(path: Union[str, Path]) -> tuple[RunConfig, MaskedAutoencoder, NormStats, Checkpoint]:
    """Rebuild the model (and norm stats) stored in a run checkpoint."""
    ck = checkpoint_load(path)
    cfg = RunConfig.from_toml(ck.config_text)
    model = MaskedAutoencoder.build(cfg.model_config(), seed=cfg.seed)
    _restore_params(model, ck)
    try:
        stats = NormStats(*(float(ck.meta[k]) for k in ("norm_clip_lo", "norm_clip_hi", "norm_mean", "norm_std")))
    except KeyError as exc:
        raise ConfigError(f"{path}: checkpoint meta lacks {exc.args[0]}") from None
    return cfg, model, stats, ck


def _restore_params(model: MaskedAutoencoder, ck: Checkpoint) -> None:
    for k, p in model.params.items():
        key = f"param/{k}"
        if key not in ck.tensors:
            raise ConfigError(f"checkpoint lacks tensor {key}")
        if ck.tensors[key].shape != p.data.shape:
            raise ConfigError(f"checkpoint tensor {key} has shape {ck.tensors[key].shape}, model {p.data.shape}")
        p.data[...] = ck.tensors[key]


def _first_nonfinite(model: MaskedAutoencoder) -> Optional[str]:
    for k, p in model.params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            return k
        if not np.all(np.isfinite(p.data)):
            return k
    return None


def run_pretrain(cfg: RunConfig, out_dir: Union[str, Path, None] = "", resume: Union[str, Path, None] = None,
                 write_files: bool = True, data: Optional[Dataset] = None) -> RunResult:
    """Train ``cfg`` and stream metrics; returns the records and final checkpoint.

    ``out_dir`` defaults to ``cfg.out_dir``; pass ``None`` with
    ``write_files=False`` to keep everything in memory.
    """
    out = None
    if write_files:
        out = Path(cfg.out_dir if out_dir == "" else out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.toml").write_text(cfg.to_toml(), encoding="utf-8")
    data = data if data is not None else build_dataset(cfg)
    model = MaskedAutoencoder.build(cfg.model_config(), seed=cfg.seed)
    hyper = cfg.gcond_hyper() if cfg.optimizer == "gcond" else cfg.adamw_hyper()
    opt = Optimizer(cfg.optimizer, model.params, hyper)
    stop = EarlyStop(cfg.early_stop_metric, cfg.early_stop_patience, cfg.early_stop_threshold)
    start = 0

    metrics_path = out / "metrics.jsonl" if out else None
    kept: list[dict] = []
    if resume is not None:
        ck = checkpoint_load(resume)
        if not _same_run(RunConfig.from_toml(ck.config_text), cfg):
            raise ConfigError(f"checkpoint {resume} was written by a different run config")
        _restore_params(model, ck)
        for k in list(opt.state.buffers):
            for name in opt.state.buffers[k]:
                opt.state.buffers[k][name][...] = ck.tensors[f"opt/{k}/{name}"]
        opt.state.t = int(ck.meta["opt_t"])
        best = ck.meta.get("early_stop_best", "None")
        stop.best = None if best == "None" else float(best)
        stop.bad = int(ck.meta.get("early_stop_bad", 0))
        start = ck.step
        if metrics_path is not None and metrics_path.exists():
            kept = [r for r in read_metrics(metrics_path) if r["step"] <= start]
    if metrics_path is not None:
        metrics_path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in kept), encoding="utf-8")
        (out / "timing.jsonl").write_text("", encoding="utf-8")
    writer = MetricsWriter(metrics_path, out / "timing.jsonl" if out else None)
    writer.records.extend(kept)

    vplans = val_plans(cfg)
    if start == 0:
        t0 = time.perf_counter()
        vm = validate(cfg, model, data.val, vplans)
        writer.write({"step": 0, "split": "val", **vm}, (time.perf_counter() - t0) * 1e3)
        stop.update(vm[cfg.early_stop_metric])

    result = RunResult(writer.records, start, model=model, stats=data.stats)
    step = start
    while step < cfg.steps:
        t0 = time.perf_counter()
        idx = batch_indices(cfg, step)
        plans = train_plans(cfg, step)
        x = data.train.x[idx]
        opt.zero_grad()
        rec = model.reconstruct(x, plans)
        loss, detail = compute_loss(cfg, rec, x, plans, data.train.soft[idx], data.train.surf[idx])
        value = float(loss.item())
        bad = "loss" if not math.isfinite(value) else None
        if bad is None:
            T.backward(loss)
            bad = _first_nonfinite(model)
        step += 1
        if bad is not None:
            writer.write({"step": step, "split": "train", "event": "nan_abort", "tensor": bad})
            raise TrainingDiverged(f"non-finite value at step {step} in tensor {bad!r}")
        opt.step()
        with T.no_grad():
            l2 = value if cfg.loss == "l2" else float(masked_recon_l2(rec, x, plans, cfg.patch_size).item())
        writer.write({"step": step, "split": "train", "loss": value, "masked_l2": l2, **detail},
                     (time.perf_counter() - t0) * 1e3)
        fire = False
        if step % cfg.val_every == 0:
            t0 = time.perf_counter()
            vm = validate(cfg, model, data.val, vplans)
            writer.write({"step": step, "split": "val", **vm}, (time.perf_counter() - t0) * 1e3)
            fire = stop.update(vm[cfg.early_stop_metric])
            if fire:
                writer.write({"step": step, "split": "val", "event": "early_stop", "metric": stop.metric,
                              "best": stop.best})
        if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and step < cfg.steps:
            save_run_checkpoint(out / f"checkpoint-{step}", cfg, step, model, opt, stop, data.stats)
        if fire:
            result.stopped_early = True
            break
    result.step = step
    if out is not None:
        result.checkpoint = out / "checkpoint"
        result.checkpoint_hash = save_run_checkpoint(result.checkpoint, cfg, step, model, opt, stop, data.stats)
    return result


# ---------------------------------------------------------------------------
# comparison
# ---------------------------------------------------------------------------

def steps_to_target(records: Iterable[dict], metric: str = "masked_l2", target: float = 0.5) -> Optional[int]:
    """First validation step at which ``metric`` is at or below ``target``."""
    for r in records:
        if r.get("split") == "val" and "event" not in r and r.get(metric) is not None and r[metric] <= target:
            return int(r["step"])
    return None


def train_loss_reduction(records: Iterable[dict], tail: int = 10) -> float:
    """1 - mean(last ``tail`` train losses) / first train loss."""
    losses = [r["loss"] for r in records if r.get("split") == "train" and "loss" in r]
    if not losses:
        raise ContractError("no train records")
    return 1.0 - float(np.mean(losses[-tail:])) / losses[0]


def convergence_report(runs: dict, metric: str = "masked_l2", target: float = 0.5,
                       baseline: Optional[str] = None) -> dict:
    """Steps-to-target per run and speedup (baseline steps / run steps) against ``baseline``."""
    rows = {}
    for name, records in runs.items():
        records = list(records)
        vals = [r[metric] for r in records if r.get("split") == "val" and "event" not in r
                and r.get(metric) is not None]
        rows[name] = {"steps_to_target": steps_to_target(records, metric, target),
                      "best": min(vals) if vals else None,
                      "final_train_reduction": train_loss_reduction(records)
                      if any(r.get("split") == "train" for r in records) else None}
    if baseline is not None:
        if baseline not in rows:
            raise ConfigError(f"baseline {baseline!r} is not among the runs")
        base = rows[baseline]["steps_to_target"]
        for row in rows.values():
            s = row["steps_to_target"]
            if base is None or s is None:
                row["speedup_vs_baseline"] = None
            elif s == 0:                  # already at target before training
                row["speedup_vs_baseline"] = 1.0 if base == 0 else math.inf
            else:
                row["speedup_vs_baseline"] = base / s
    return {"metric": metric, "target": target, "baseline": baseline, "runs": rows}


def format_report(rep: dict) -> str:
    lines = [f"target: val {rep['metric']} <= {rep['target']}" +
             (f"   baseline: {rep['baseline']}" if rep["baseline"] else "")]
    lines.append(f"{'run':<24}{'steps-to-target':>17}{'best':>10}{'train drop':>12}{'speedup':>10}")
    for name, row in rep["runs"].items():
        s = row["steps_to_target"]
        sp = row.get("speedup_vs_baseline")
        best = "-" if row["best"] is None else f"{row['best']:.4f}"
        drop = "-" if row["final_train_reduction"] is None else f"{row['final_train_reduction']:.1%}"
        lines.append(f"{name:<24}{('not reached' if s is None else str(s)):>17}{best:>10}{drop:>12}"
                     f"{('-' if sp is None else f'{sp:.2f}x'):>10}")
    return "\n".join(lines) + "\n"


def _check_comparable(a: RunConfig, b: RunConfig) -> None:
    for key in ("seed", "n_train", "n_val", "val_every", "volume_size", "patch_size", "mask_ratio"):
        if getattr(a, key) != getattr(b, key):
            raise ConfigError(f"compared runs must share {key}: {getattr(a, key)} vs {getattr(b, key)}")


def run_compare(candidate: RunConfig, baseline: RunConfig, target_metric: str = "masked_l2",
                target_value: float = 0.5, out_dir: Union[str, Path, None] = None) -> dict:
    """Train both configs and report steps-to-target; speedup = baseline steps / candidate steps."""
    _check_comparable(candidate, baseline)
    runs = {}
    for name, cfg in (("candidate", candidate), ("baseline", baseline)):
        if out_dir is None:
            res = run_pretrain(cfg, None, write_files=False)
        else:
            res = run_pretrain(cfg, Path(out_dir) / name)
        runs[name] = res.metrics
    rep = convergence_report(runs, target_metric, target_value, baseline="baseline")
    rep["ratio"] = rep["runs"]["candidate"].get("speedup_vs_baseline")
    rep["status"] = "not reached" if rep["ratio"] is None else "reached"
    return rep


def desk_cells(base: Optional[RunConfig] = None) -> dict:
    base = base or RunConfig()
    return {name: base.replace(**over) for name, over in DESK_CELLS.items()}


# ---------------------------------------------------------------------------
# frozen-encoder evaluation helpers
# ---------------------------------------------------------------------------

def full_view_plans(cfg: ModelConfig, batch: int) -> list[MaskPlan]:
    """Every patch visible: the frozen-encoder view used for probing."""
    n = cfg.n_tokens
    return [MaskPlan.from_visible(np.arange(n), n) for _ in range(batch)]


def eval_phantom_seeds(n: int, seed: int = 0) -> list[int]:
    """Seeds above the training seed space, so evaluation phantoms are never trained on."""
    return [_PHANTOM_SEED_SPACE + int(s) for s in keyed_rng(seed, 61).choice(_PHANTOM_SEED_SPACE, n, replace=False)]


def probe_embeddings(model: MaskedAutoencoder, stats: NormStats, n_phantoms: int = 12, seed: int = 0):
    """Pooled embeddings for the probe suite.

    Per phantom: the right joint ('orig'), its mirror ('mirror'), the mirrored
    contralateral left joint (chirality 'left', 'mirror') and the geometric
    views of the right joint ('geo:<name>').
    """
    from .analytics import EmbeddingLabel, EmbeddingSet, geometric_views
    from .synthvol import mirror

    cfg = model.cfg
    vols, labels = [], []
    for pid in eval_phantom_seeds(n_phantoms, seed):
        right = hu_normalize(gen_phantom(pid, cfg.volume_size, "right", cfg.patch_size)[0], stats).data
        left = hu_normalize(gen_phantom(pid, cfg.volume_size, "left", cfg.patch_size, variant=1)[0], stats).data
        vols += [right, mirror(right), mirror(left)]
        labels += [EmbeddingLabel(pid, "right", "orig"), EmbeddingLabel(pid, "right", "mirror"),
                   EmbeddingLabel(pid, "left", "mirror")]
        for name, view in geometric_views(right, seed, pid).items():
            vols.append(view)
            labels.append(EmbeddingLabel(pid, "right", f"geo:{name}"))
    vecs = []
    for i in range(0, len(vols), 8):
        chunk = np.stack(vols[i:i + 8])
        vecs.append(model.embed(chunk, full_view_plans(cfg, len(chunk))))
    return EmbeddingSet(np.concatenate(vecs), labels)


def token_features(model: MaskedAutoencoder, vols: np.ndarray) -> np.ndarray:
    """Frozen per-token features ``[B, grid**3, C]`` with every patch visible."""
    out = []
    for i in range(0, len(vols), 8):
        chunk = vols[i:i + 8]
        with T.no_grad():
            out.append(model.features(chunk, full_view_plans(model.cfg, len(chunk))).data)
    return np.concatenate(out)


def seg_probe_data(model: MaskedAutoencoder, stats: NormStats, seeds: Sequence[int]):
    from .analytics import labels_to_grid

    cfg = model.cfg
    pairs = [gen_phantom(s, cfg.volume_size, patch_size=cfg.patch_size) for s in seeds]
    vols = np.stack([hu_normalize(v, stats).data for v, _ in pairs])
    labels = labels_to_grid(np.stack([m.labels for _, m in pairs]), cfg.patch_size)
    return token_features(model, vols), labels
