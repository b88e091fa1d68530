"""Alignment losses with closed-form gradients.

Every loss returns a :class:`DifferentiableScalar`: the value plus gradients
keyed by the name of the input tensor they belong to. Input names are
keyword arguments so several losses can feed one combined objective without
their gradients colliding.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from .embeddings import ClassEmbeddingTable


class Combiner(str, enum.Enum):
    GEOMETRIC_MEAN = "geometric_mean"
    SUM = "sum"
    PRODUCT = "product"
    OBJECTNESS_ONLY = "objectness_only"
    CENTERNESS_ONLY = "centerness_only"


class Reduction(str, enum.Enum):
    MEAN = "mean"
    SUM = "sum"


class LossDomainError(ValueError):
    pass


@dataclass
class DifferentiableScalar:
    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.value = float(self.value)
        if not math.isfinite(self.value):
            raise LossDomainError(f"non-finite loss value {self.value}")

    def scaled(self, factor: float) -> "DifferentiableScalar":
        return DifferentiableScalar(self.value * factor, {k: g * factor for k, g in self.grads.items()})

    @classmethod
    def zero(cls, **shapes) -> "DifferentiableScalar":
        return cls(0.0, {k: np.zeros(s) for k, s in shapes.items()})


@dataclass
class LossConfig:
    alpha1: float = 0.05
    alpha2: float = 0.05
    alpha3: float = 1.0
    centerness_eps: float = 1e-8
    gm_eps: float = 1e-12
    decorrelation_temperature: float = 1.0
    combiner: Combiner = Combiner.GEOMETRIC_MEAN
    reduction: Reduction = Reduction.MEAN

    def __post_init__(self):
        self.combiner = Combiner(self.combiner)
        self.reduction = Reduction(self.reduction)
        if min(self.alpha1, self.alpha2, self.alpha3) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.centerness_eps <= 0 or self.gm_eps <= 0:
            raise ValueError("eps values must be positive")
        if self.decorrelation_temperature <= 0:
            raise ValueError("decorrelation temperature must be positive")


@dataclass
class LabeledFeatures:
    """Proposal features (m x d) with their known-class indices."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"features must be a non-empty m x d matrix, got {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("one label per feature row required")
        if (self.labels < 0).any():
            raise ValueError("labels must be non-negative class indices")


def _reduce(per_item: np.ndarray, reduction) -> tuple[float, float]:
    """Return the reduced value and the scale applied to per-item gradients."""
    if Reduction(reduction) is Reduction.MEAN:
        return float(per_item.mean()), 1.0 / per_item.size
    return float(per_item.sum()), 1.0


def _logsumexp_rows(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=1, keepdims=True)
    return (zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)))[:, 0]


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _row_normalise(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1)
    if (norms == 0).any():
        raise LossDomainError(f"zero-norm feature row(s) at {np.flatnonzero(norms == 0).tolist()}")
    return x / norms[:, None], norms


def _normalise_backward(grad_u: np.ndarray, u: np.ndarray, norms: np.ndarray) -> np.ndarray:
    # d(x/|x|)/dx = (I - u u^T) / |x|
    radial = (grad_u * u).sum(axis=1, keepdims=True)
    return (grad_u - radial * u) / norms[:, None]


def _sc_forward(lf: LabeledFeatures, table: ClassEmbeddingTable):
    k = len(table)
    if k < 2:
        raise LossDomainError("semantic clustering needs at least two classes")
    if lf.features.shape[1] != table.dim:
        raise LossDomainError(f"feature dim {lf.features.shape[1]} != embedding dim {table.dim}")
    if lf.labels.max() >= k:
        raise LossDomainError(f"label {int(lf.labels.max())} out of range for {k} classes")
    u, norms = _row_normalise(lf.features)
    logits = u @ table.vectors.T
    rows = np.arange(len(lf.labels))
    return _logsumexp_rows(logits) - logits[rows, lf.labels], u, norms, logits


def semantic_clustering_per_sample(lf: LabeledFeatures, table: ClassEmbeddingTable) -> np.ndarray:
    """Unreduced semantic clustering loss, one value per feature row."""
    return _sc_forward(lf, table)[0]


def semantic_clustering_loss(
    lf: LabeledFeatures,
    table: ClassEmbeddingTable,
    reduction=Reduction.MEAN,
    *,
    name: str = "sc_features",
) -> DifferentiableScalar:
    """Softmax cross-entropy over cosine similarities to the class embeddings."""
    losses, u, norms, logits = _sc_forward(lf, table)
    value, scale = _reduce(losses, reduction)
    rows = np.arange(len(lf.labels))
    g_logits = _softmax_rows(logits)
    g_logits[rows, lf.labels] -= 1.0
    g_u = (g_logits @ table.vectors) * scale
    return DifferentiableScalar(value, {name: _normalise_backward(g_u, u, norms)})


def sample_per_class_indices(labels, seed) -> np.ndarray:
    """Row indices of one uniformly chosen row per distinct label, ascending by label."""
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    picks = []
    for label in np.unique(labels):
        candidates = np.flatnonzero(labels == label)
        picks.append(candidates[rng.integers(len(candidates))])
    return np.array(picks, dtype=np.int64)


def sample_per_class(lf: LabeledFeatures, seed) -> LabeledFeatures:
    idx = sample_per_class_indices(lf.labels, seed)
    return LabeledFeatures(lf.features[idx], lf.labels[idx])


def _cd_forward(sampled: LabeledFeatures, temperature: float):
    s = sampled.features.shape[0]
    if s < 2:
        raise LossDomainError(f"class decorrelation needs at least 2 sampled classes, got {s}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    u, norms = _row_normalise(sampled.features)
    sim = (u @ u.T) / temperature
    return _logsumexp_rows(sim) - np.diag(sim), u, norms, sim


def decorrelation_per_row(sampled: LabeledFeatures, temperature: float = 1.0) -> np.ndarray:
    """Unreduced class decorrelation loss, one value per sampled row."""
    return _cd_forward(sampled, temperature)[0]


def class_decorrelation_loss(
    sampled: LabeledFeatures,
    temperature: float = 1.0,
    *,
    name: str = "cd_features",
) -> DifferentiableScalar:
    """Cross-entropy of the row-softmaxed cosine-similarity matrix against the identity."""
    losses, u, norms, sim = _cd_forward(sampled, temperature)
    s = len(losses)
    value = float(losses.mean())
    g_sim = (_softmax_rows(sim) - np.eye(s)) / s
    g_u = (g_sim + g_sim.T) @ u / temperature
    return DifferentiableScalar(value, {name: _normalise_backward(g_u, u, norms)})


def centerness_loss(
    logits,
    targets,
    reduction=Reduction.MEAN,
    *,
    name: str = "centerness_logits",
) -> DifferentiableScalar:
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if logits.shape != targets.shape or logits.ndim != 1:
        raise ValueError(f"centerness logits {logits.shape} and targets {targets.shape} must be equal-length vectors")
    if logits.size == 0:
        return DifferentiableScalar(0.0, {name: np.zeros(0)})
    diff = logits - targets
    value, scale = _reduce(np.abs(diff), reduction)
    return DifferentiableScalar(value, {name: np.sign(diff) * scale})


def objectness_loss(
    logits,
    is_object,
    reduction=Reduction.MEAN,
    *,
    name: str = "objectness_logits",
) -> DifferentiableScalar:
    """Binary cross-entropy on sigmoid(logit), via the stable softplus form."""
    x = np.asarray(logits, dtype=np.float64)
    y = np.asarray(is_object, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size == 0:
        raise ValueError("objectness needs equal-length, non-empty logits and targets")
    per_item = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    value, scale = _reduce(per_item, reduction)
    return DifferentiableScalar(value, {name: (sigmoid(x) - y) * scale})


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _merge(*weighted: tuple[float, DifferentiableScalar]) -> dict[str, np.ndarray]:
    grads: dict[str, np.ndarray] = {}
    for w, part in weighted:
        for key, g in part.grads.items():
            if key in grads:
                grads[key] = grads[key] + w * g
            else:
                grads[key] = w * g
    return grads


def object_focus_loss(
    lc: DifferentiableScalar,
    lobj: DifferentiableScalar,
    combiner=Combiner.GEOMETRIC_MEAN,
    gm_eps: float = 1e-12,
) -> DifferentiableScalar:
    """Combine the centerness and objectness losses."""
    c, o = lc.value, lobj.value
    if c < 0 or o < 0:
        raise LossDomainError(f"object focus needs non-negative parts, got L_C={c}, L_Obj={o}")
    combiner = Combiner(combiner)
    if combiner is Combiner.GEOMETRIC_MEAN:
        value = math.sqrt((c + gm_eps) * (o + gm_eps))
        d_c = 0.5 * value / (c + gm_eps)
        d_o = 0.5 * value / (o + gm_eps)
    elif combiner is Combiner.SUM:
        value, d_c, d_o = c + o, 1.0, 1.0
    elif combiner is Combiner.PRODUCT:
        value, d_c, d_o = c * o, o, c
    elif combiner is Combiner.OBJECTNESS_ONLY:
        value, d_c, d_o = o, 0.0, 1.0
    else:
        value, d_c, d_o = c, 1.0, 0.0
    return DifferentiableScalar(value, _merge((d_c, lc), (d_o, lobj)))


def classification_loss(
    class_logits,
    labels,
    reduction=Reduction.MEAN,
    *,
    name: str = "class_logits",
) -> DifferentiableScalar:
    """Softmax cross-entropy over k known classes plus the background slot."""
    z = np.asarray(class_logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or z.shape[0] < 1:
        raise ValueError(f"class logits must be a non-empty m x (k+1) matrix, got {z.shape}")
    if labels.shape != (z.shape[0],):
        raise ValueError("one label per logit row required")
    if labels.min() < 0 or labels.max() >= z.shape[1]:
        raise LossDomainError(f"labels must lie in [0, {z.shape[1] - 1}]")
    rows = np.arange(z.shape[0])
    per_sample = _logsumexp_rows(z) - z[rows, labels]
    value, scale = _reduce(per_sample, reduction)
    g = _softmax_rows(z)
    g[rows, labels] -= 1.0
    return DifferentiableScalar(value, {name: g * scale})


def regression_loss(
    pred_deltas,
    target_deltas,
    reduction=Reduction.MEAN,
    *,
    beta: float = 1.0,
    name: str = "reg_deltas",
) -> DifferentiableScalar:
    """Smooth-L1 averaged over all 4n entries."""
    p = np.asarray(pred_deltas, dtype=np.float64)
    t = np.asarray(target_deltas, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    if p.size == 0:
        return DifferentiableScalar(0.0, {name: np.zeros_like(p)})
    d = p - t
    a = np.abs(d)
    small = a < beta
    per_item = np.where(small, 0.5 * d * d / beta, a - 0.5 * beta)
    value, scale = _reduce(per_item, reduction)
    g = np.where(small, d / beta, np.sign(d))
    return DifferentiableScalar(value, {name: g * scale})


@dataclass
class LossParts:
    """Constituents of the final objective; missing parts count as zero."""

    obj_focus: Optional[DifferentiableScalar] = None
    rpn_reg: Optional[DifferentiableScalar] = None
    sc: Optional[DifferentiableScalar] = None
    cd: Optional[DifferentiableScalar] = None
    reg: Optional[DifferentiableScalar] = None
    ce: Optional[DifferentiableScalar] = None


UPLPlugin = Callable[[np.ndarray, np.ndarray], DifferentiableScalar]


def zero_upl(class_logits: np.ndarray, labels: np.ndarray) -> DifferentiableScalar:
    """Default unknown-probability term: contributes nothing."""
    return DifferentiableScalar(0.0, {"class_logits": np.zeros_like(np.asarray(class_logits, dtype=np.float64))})


def loss_weights(cfg: LossConfig) -> dict[str, float]:
    return {"obj_focus": cfg.alpha3, "rpn_reg": 1.0, "sc": cfg.alpha1, "cd": cfg.alpha2, "reg": 1.0, "ce": 1.0}


def total_loss(
    parts: LossParts,
    upl: Optional[DifferentiableScalar] = None,
    cfg: Optional[LossConfig] = None,
) -> DifferentiableScalar:
    """RPN terms (weighted object focus + RPN regression) plus the detector terms."""
    cfg = cfg or LossConfig()
    weighted = []
    for key, w in loss_weights(cfg).items():
        part = getattr(parts, key)
        if part is not None:
            weighted.append((w, part))
    if upl is not None:
        weighted.append((1.0, upl))
    for _, part in weighted:
        if not math.isfinite(part.value):
            raise LossDomainError("non-finite constituent loss")
    value = 0.0
    for w, part in weighted:
        value += w * part.value
    return DifferentiableScalar(value, _merge(*weighted))


def term_values(parts: LossParts) -> Mapping[str, float]:
    return {k: (getattr(parts, k).value if getattr(parts, k) is not None else 0.0) for k in loss_weights(LossConfig())}

