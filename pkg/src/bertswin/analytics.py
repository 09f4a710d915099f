"""Embedding analysis: similarity, effective rank, probe distributions, rank tests, BCa CIs, probing heads.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import ndtr, ndtri
from scipy.stats import rankdata

from . import tensor as T
from .errors import ContractError
from .gcond import AdamWHyper, Optimizer
from .rng import keyed_rng

EXACT_LIMIT = 12


# ---------------------------------------------------------------------------
# similarity and spectrum
# ---------------------------------------------------------------------------

def pearson_sim(u, v) -> float:
    """Cosine similarity of the mean-centred vectors.

    Returns NaN when both vectors are constant (undefined) and 0.0 when
    exactly one is constant.
    """
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.size != v.size or u.size < 2:
        raise ContractError("pearson_sim needs two equal-length vectors of length >= 2")
    du, dv = u - u.mean(), v - v.mean()
    nu, nv = np.linalg.norm(du), np.linalg.norm(dv)
    if nu == 0.0 and nv == 0.0:
        return float("nan")
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.clip(du @ dv / (nu * nv), -1.0, 1.0))


def _matrix(E) -> np.ndarray:
    return np.asarray(E.vectors if isinstance(E, EmbeddingSet) else E, dtype=np.float64)


def effective_rank(E) -> float:
    """exp of the Shannon entropy of the normalised covariance spectrum."""
    X = _matrix(E)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ContractError("effective_rank needs at least two vectors")
    Xc = X - X.mean(axis=0)
    lam = np.clip(np.linalg.eigvalsh(Xc.T @ Xc / X.shape[0]), 0.0, None)
    total = lam.sum()
    if total <= 0.0:
        raise ContractError("zero covariance: all vectors identical")
    p = lam[lam > 0] / total
    return float(np.exp(-(p * np.log(p)).sum()))


# ---------------------------------------------------------------------------
# embedding sets and probe distributions
# ---------------------------------------------------------------------------

@dataclass(frozen=True, order=True)
class EmbeddingLabel:
    phantom: int
    chirality: str          # side the joint was generated as
    tag: str                # 'orig', 'mirror' or 'geo:<transform>'


@dataclass
class EmbeddingSet:
    vectors: np.ndarray                 # [n, C]
    labels: list

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or len(self.labels) != self.vectors.shape[0]:
            raise ContractError("EmbeddingSet needs an [n, C] matrix with one label per row")

    def index(self) -> dict:
        return {lab: i for i, lab in enumerate(self.labels)}


@dataclass
class ProbeResult:
    name: str
    samples: np.ndarray
    median: float
    iqr: float
    ci_lo: float
    ci_hi: float
    level: float
    mean: float
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["samples"] = [float(s) for s in self.samples]
        d["n"] = len(self.samples)
        return d


def _summarise(name: str, samples: Sequence[float], seed: int, n_boot: int, level: float,
               extra: Optional[dict] = None) -> ProbeResult:
    s = np.asarray(samples, dtype=np.float64)
    s = s[np.isfinite(s)]
    if s.size == 0:
        raise ContractError(f"probe distribution {name!r} has no finite samples")
    q1, med, q3 = np.percentile(s, [25, 50, 75])
    if s.size >= 10:
        lo, hi = bca_bootstrap_ci(s, np.median, n_boot=n_boot, level=level, seed=seed)
    else:
        lo, hi = float("nan"), float("nan")
    return ProbeResult(name, s, float(med), float(q3 - q1), lo, hi, level, float(s.mean()), extra or {})


def probe_pairs(E: EmbeddingSet) -> dict:
    """Index pairs for each probe distribution, keyed by its name."""
    idx = E.index()
    origs = sorted(lab for lab in idx if lab.tag == "orig")
    pairs = {"Geometric Invariance": [], "Inter-Patient": [], "Intra-Patient": [], "Symmetry": []}
    per_tf: dict = {}
    for lab, i in idx.items():
        if lab.tag.startswith("geo:"):
            ref = idx.get(EmbeddingLabel(lab.phantom, lab.chirality, "orig"))
            if ref is not None:
                pairs["Geometric Invariance"].append((ref, i))
                per_tf.setdefault(lab.tag[4:], []).append((ref, i))
    for a, b in itertools.combinations(origs, 2):
        if a.phantom != b.phantom and a.chirality == b.chirality:
            pairs["Inter-Patient"].append((idx[a], idx[b]))
    for lab in origs:
        if lab.chirality != "right":
            continue
        other = idx.get(EmbeddingLabel(lab.phantom, "left", "mirror"))
        if other is not None:
            pairs["Intra-Patient"].append((idx[lab], other))
        same = idx.get(EmbeddingLabel(lab.phantom, "right", "mirror"))
        if same is not None:
            pairs["Symmetry"].append((idx[lab], same))
    pairs["_per_transform"] = per_tf
    return pairs


def probe_suite(E: EmbeddingSet, seed: int = 0, n_boot: int = 9999, level: float = 0.95) -> list[ProbeResult]:
    """Four similarity distributions with median, IQR and a BCa CI of the median."""
    pairs = probe_pairs(E)
    per_tf = pairs.pop("_per_transform")
    missing = [k for k, v in pairs.items() if not v]
    if missing:
        raise ContractError(f"embedding set lacks pairs for: {', '.join(missing)}")
    X = E.vectors
    out = []
    for k, (name, plist) in enumerate(pairs.items()):
        sims = [pearson_sim(X[i], X[j]) for i, j in plist]
        extra = {}
        if name == "Geometric Invariance":
            tf_med = {tf: float(np.median([pearson_sim(X[i], X[j]) for i, j in pl])) for tf, pl in sorted(per_tf.items())}
            extra = {"per_transform_median": tf_med,
                     "mean_of_transform_medians": float(np.mean(list(tf_med.values())))}
        out.append(_summarise(name, sims, seed + k, n_boot, level, extra))
    return out


def probe_report_text(results: Sequence[ProbeResult], dim: Optional[int] = None,
                      r_eff: Optional[float] = None) -> str:
    lines = []
    if dim is not None:
        lines.append(f"Dim {dim}   R_eff {r_eff:.2f}" if r_eff is not None else f"Dim {dim}")
    lines.append(f"{'Distribution':<22}{'n':>6}{'median':>10}{'IQR':>10}{'CI lo':>10}{'CI hi':>10}{'mean':>10}")
    for r in results:
        lines.append(f"{r.name:<22}{len(r.samples):>6}{r.median:>10.4f}{r.iqr:>10.4f}"
                     f"{r.ci_lo:>10.4f}{r.ci_hi:>10.4f}{r.mean:>10.4f}")
    return "\n".join(lines) + "\n"


def probe_report_json(results: Sequence[ProbeResult]) -> str:
    return "\n".join(json.dumps(r.as_dict(), sort_keys=True) for r in results) + "\n"


def geometric_views(vol: np.ndarray, seed: int, phantom: int) -> dict:
    """Transformed copies of a normalised volume keyed by transform name."""
    rng = keyed_rng(seed, 31, phantom)
    return {
        "flip0": np.ascontiguousarray(vol[::-1]),
        "flip1": np.ascontiguousarray(vol[:, ::-1]),
        "rot90": np.ascontiguousarray(np.rot90(vol, 1, axes=(1, 2))),
        "rot180": np.ascontiguousarray(np.rot90(vol, 2, axes=(1, 2))),
        "scale": vol * rng.uniform(0.9, 1.1),
        "shift": vol + rng.uniform(-0.1, 0.1),
    }


# ---------------------------------------------------------------------------
# rank tests
# ---------------------------------------------------------------------------

def _two_sided_exact(dist: np.ndarray, obs: float, centre: float) -> float:
    dev = np.abs(dist - centre)
    return float(np.mean(dev >= abs(obs - centre) - 1e-9))


def _normal_p(stat: float, mean: float, var: float) -> float:
    if var <= 0:
        return 1.0
    z = max(abs(stat - mean) - 0.5, 0.0) / math.sqrt(var)
    return float(min(1.0, 2.0 * ndtr(-z)))


def mann_whitney_u(a, b) -> tuple[float, float]:
    """U statistic of ``a`` and its two-sided p-value.

    Exact (enumerating every split of the pooled midranks) when the pooled
    size is at most 12, normal approximation with tie and continuity
    correction otherwise.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = a.size, b.size
    if na == 0 or nb == 0:
        raise ContractError("mann_whitney_u needs two non-empty samples")
    ranks = rankdata(np.concatenate([a, b]))
    u = float(ranks[:na].sum() - na * (na + 1) / 2.0)
    mean = na * nb / 2.0
    n = na + nb
    if n <= EXACT_LIMIT:
        combos = np.array(list(itertools.combinations(range(n), na)))
        dist = ranks[combos].sum(axis=1) - na * (na + 1) / 2.0
        return u, _two_sided_exact(dist, u, mean)
    _, counts = np.unique(ranks, return_counts=True)
    tie = float((counts ** 3 - counts).sum())
    var = na * nb / 12.0 * ((n + 1) - tie / (n * (n - 1)))
    return u, _normal_p(u, mean, var)


def wilcoxon_signed_rank(diffs) -> tuple[float, float]:
    """W = min(W+, W-) over non-zero differences and its two-sided p-value."""
    d = np.asarray(diffs, dtype=np.float64).ravel()
    d = d[d != 0.0]
    n = d.size
    if n < 5:
        raise ContractError(f"wilcoxon_signed_rank needs >= 5 non-zero differences, got {n}")
    r = rankdata(np.abs(d))
    w_plus = float(r[d > 0].sum())
    w = min(w_plus, float(r.sum()) - w_plus)
    mean = r.sum() / 2.0
    if n <= EXACT_LIMIT:
        signs = (np.arange(2 ** n)[:, None] >> np.arange(n)) & 1
        dist = signs @ r
        return w, _two_sided_exact(dist, w_plus, mean)
    _, counts = np.unique(r, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float((counts ** 3 - counts).sum()) / 48.0
    return w, _normal_p(w_plus, mean, var)


# ---------------------------------------------------------------------------
# BCa bootstrap
# ---------------------------------------------------------------------------

def _apply(statistic: Callable, x: np.ndarray) -> np.ndarray:
    try:
        return np.asarray(statistic(x, axis=-1), dtype=np.float64)
    except TypeError:
        return np.apply_along_axis(statistic, -1, x).astype(np.float64)


def bca_bootstrap_ci(samples, statistic: Callable = np.median, n_boot: int = 9999,
                     level: float = 0.95, seed: int = 0) -> tuple[float, float]:
    """Bias-corrected and accelerated bootstrap interval for ``statistic``.

    ``statistic`` should accept an ``axis`` keyword (numpy reductions do);
    other callables are applied row by row.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    n = x.size
    if n < 10:
        raise ContractError(f"bca_bootstrap_ci needs >= 10 samples, got {n}")
    if not 0.0 < level < 1.0:
        raise ContractError(f"level must lie in (0, 1), got {level}")
    theta = float(_apply(statistic, x[None])[0])
    rng = keyed_rng(seed, 41)
    boot = np.empty(n_boot)
    chunk = max(1, 2_000_000 // n)
    for start in range(0, n_boot, chunk):
        stop = min(n_boot, start + chunk)
        boot[start:stop] = _apply(statistic, x[rng.integers(0, n, size=(stop - start, n))])
    if np.all(boot == theta):
        return theta, theta
    # ties with theta count half, which keeps medians of discrete resamples unbiased
    prop = (np.sum(boot < theta) + 0.5 * np.sum(boot == theta)) / n_boot
    prop = min(max(prop, 1.0 / (n_boot + 1)), n_boot / (n_boot + 1.0))
    z0 = float(ndtri(prop))
    jack = _apply(statistic, np.stack([np.delete(x, i) for i in range(n)]))
    dev = jack.mean() - jack
    denom = 6.0 * float((dev ** 2).sum()) ** 1.5
    acc = float((dev ** 3).sum()) / denom if denom > 0 else 0.0
    alpha = (1.0 - level) / 2.0
    qs = []
    for z in (ndtri(alpha), ndtri(1.0 - alpha)):
        zz = z0 + z
        qs.append(float(ndtr(z0 + zz / (1.0 - acc * zz))))
    lo, hi = np.quantile(boot, qs)
    return float(lo), float(hi)


def percentile_ci(samples, statistic: Callable = np.median, n_boot: int = 9999,
                  level: float = 0.95, seed: int = 0) -> tuple[float, float]:
    x = np.asarray(samples, dtype=np.float64).ravel()
    rng = keyed_rng(seed, 41)
    boot = _apply(statistic, x[rng.integers(0, x.size, size=(n_boot, x.size))])
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(boot, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


# ---------------------------------------------------------------------------
# probing heads and Dice
# ---------------------------------------------------------------------------

def dice(pred, gt) -> float:
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ContractError(f"dice shape mismatch: {pred.shape} vs {gt.shape}")
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((pred & gt).sum()) / denom


def labels_to_grid(labels: np.ndarray, patch: int, n_classes: int = 3) -> np.ndarray:
    """Majority label per patch (ties go to the lower class id), flattened in token order."""
    lab = np.asarray(labels)
    lead = lab.shape[:-3]
    d = lab.shape[-1]
    if any(s % patch for s in lab.shape[-3:]):
        raise ContractError(f"labels {lab.shape[-3:]} not divisible by patch {patch}")
    g = d // patch
    blocks = lab.reshape(lead + (g, patch, g, patch, g, patch))
    nl = len(lead)
    blocks = blocks.transpose(tuple(range(nl)) + tuple(nl + i for i in (0, 2, 4, 1, 3, 5)))
    blocks = blocks.reshape(lead + (g ** 3, patch ** 3))
    counts = np.stack([(blocks == c).sum(-1) for c in range(n_classes)], axis=-1)
    return counts.argmax(-1)


@dataclass
class ProbeHead:
    kind: str
    params: dict
    n_classes: int

    def logits(self, feats) -> T.Tensor:
        x = T.as_tensor(feats)
        if self.kind == "linear":
            return T.linear(x, self.params["w"], self.params["b"])
        h = T.gelu(T.linear(x, self.params["w1"], self.params["b1"]))
        return T.linear(h, self.params["w2"], self.params["b2"])

    def predict(self, feats) -> np.ndarray:
        with T.no_grad():
            return self.logits(feats).data.argmax(-1)


@dataclass
class ProbeHeadResult:
    head: ProbeHead
    dice: dict                  # class id -> Dice on held-out tokens
    losses: list


def _init_head(kind: str, c: int, n_classes: int, hidden: int, seed: int) -> dict:
    rng = keyed_rng(seed, 51)

    def xavier(d_in, d_out):
        bound = math.sqrt(6.0 / (d_in + d_out))
        return rng.uniform(-bound, bound, (d_in, d_out))

    if kind == "linear":
        return {"w": T.parameter(xavier(c, n_classes)), "b": T.parameter(np.zeros(n_classes))}
    if kind == "two_layer":
        return {"w1": T.parameter(xavier(c, hidden)), "b1": T.parameter(np.zeros(hidden)),
                "w2": T.parameter(xavier(hidden, n_classes)), "b2": T.parameter(np.zeros(n_classes))}
    raise ContractError(f"unknown probe head {kind!r}; expected linear or two_layer")


def probe_head_train(features, labels, head: str = "linear", steps: int = 500, seed: int = 0,
                     n_classes: int = 3, val_features=None, val_labels=None, hidden: int = 64,
                     lr: float = 1e-3) -> ProbeHeadResult:
    """Fit a per-token classifier on frozen features with softmax cross-entropy.

    ``features`` is ``[..., C]`` and ``labels`` the matching ``[...]`` integer
    grid. Dice per class is measured on the validation pair when given, else on
    the training tokens.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if X.shape[:-1] != y.shape:
        raise ContractError(f"features {X.shape[:-1]} and labels {y.shape} grids differ")
    X, y = X.reshape(-1, X.shape[-1]), y.reshape(-1).astype(np.int64)
    if y.min() < 0 or y.max() >= n_classes:
        raise ContractError(f"labels must lie in [0, {n_classes})")
    onehot = np.eye(n_classes)[y]
    probe = ProbeHead(head, _init_head(head, X.shape[1], n_classes, hidden, seed), n_classes)
    opt = Optimizer("adamw", probe.params, AdamWHyper(lr=lr, weight_decay=0.0))
    losses = []
    for _ in range(steps):
        opt.zero_grad()
        loss = -(T.log_softmax(probe.logits(X)) * onehot).sum() / len(y)
        T.backward(loss)
        opt.step()
        losses.append(float(loss.item()))
    if val_features is not None:
        Xv = np.asarray(val_features, dtype=np.float64)
        yv = np.asarray(val_labels)
        if Xv.shape[:-1] != yv.shape:
            raise ContractError(f"validation features {Xv.shape[:-1]} and labels {yv.shape} grids differ")
        Xv, yv = Xv.reshape(-1, Xv.shape[-1]), yv.reshape(-1)
    else:
        Xv, yv = X, y
    pred = probe.predict(Xv)
    scores = {c: dice(pred == c, yv == c) for c in range(n_classes)}
    return ProbeHeadResult(probe, scores, losses)
