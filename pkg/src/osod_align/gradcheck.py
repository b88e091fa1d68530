"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .losses import (
    Combiner,
    DifferentiableScalar,
    LabeledFeatures,
    LossConfig,
    LossDomainError,
    LossParts,
    centerness_loss,
    class_decorrelation_loss,
    classification_loss,
    object_focus_loss,
    objectness_loss,
    regression_loss,
    semantic_clustering_loss,
    total_loss,
    zero_upl,
)


class GradientCheckError(RuntimeError):
    pass


@dataclass
class GradCheckResult:
    max_rel_error: float
    # (input name, flat index) of coordinates where the loss has a kink
    excluded: list[tuple[str, int]] = field(default_factory=list)
    checked: int = 0
    worst: tuple[str, int] | None = None

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def _evaluate(loss_fn, inputs) -> float:
    try:
        value = loss_fn(inputs).value
    except LossDomainError as exc:
        raise GradientCheckError(f"loss failed while probing: {exc}") from exc
    if not math.isfinite(value):
        raise GradientCheckError("non-finite loss while probing")
    return value


def finite_difference_check(
    loss_fn: Callable[[Mapping[str, np.ndarray]], DifferentiableScalar],
    inputs: Mapping[str, np.ndarray],
    step: float = 1e-5,
    kink_tol: float = 0.1,
    floor: float = 1e-8,
) -> GradCheckResult:
    """Compare ``loss_fn``'s analytic gradients with central differences.

    The relative error per coordinate is ``|analytic - numeric| / max(floor, |numeric|)``.
    Central differences at ``step`` carry roundoff near ``1e-16 * |f| / step``;
    raising ``floor`` compares gradients below it in absolute terms instead.
    A coordinate whose forward and backward one-sided slopes disagree by more
    than ``kink_tol`` (relative) sits on a non-differentiable point; it is
    reported in ``excluded`` instead of being scored.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    result = loss_fn(base)
    f0 = result.value
    if not math.isfinite(f0):
        raise GradientCheckError("non-finite loss at the base point")

    out = GradCheckResult(0.0)
    for name, arr in base.items():
        analytic = result.grads.get(name)
        if analytic is None:
            analytic = np.zeros_like(arr)
        if analytic.shape != arr.shape:
            raise GradientCheckError(f"gradient for {name!r} has shape {analytic.shape}, input {arr.shape}")
        flat = arr.reshape(-1)
        g_flat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = _evaluate(loss_fn, base)
            flat[i] = orig - step
            f_minus = _evaluate(loss_fn, base)
            flat[i] = orig
            fwd = (f_plus - f0) / step
            bwd = (f0 - f_minus) / step
            if abs(fwd - bwd) > kink_tol * max(abs(fwd), abs(bwd), 1e-3):
                out.excluded.append((name, i))
                continue
            numeric = (f_plus - f_minus) / (2.0 * step)
            err = abs(g_flat[i] - numeric) / max(floor, abs(numeric))
            out.checked += 1
            if err > out.max_rel_error:
                out.max_rel_error = err
                out.worst = (name, i)
    return out


# ---------------------------------------------------------------------------
# the standard suite: every loss in the package at random inputs


def _random_table(rng: np.random.Generator, k: int, dim: int):
    from .embeddings import ClassEmbeddingTable

    return ClassEmbeddingTable([f"c{i}" for i in range(k)], rng.normal(size=(k, dim)))


def _case_sc(rng, dim, batch, scale):
    k = int(rng.integers(2, min(dim, 8) + 1)) if dim >= 2 else 2
    table = _random_table(rng, k, dim)
    labels = rng.integers(0, k, batch)
    x = rng.normal(size=(batch, dim)) * scale
    return (lambda v: semantic_clustering_loss(LabeledFeatures(v["sc_features"], labels), table)), {"sc_features": x}


def _case_cd(rng, dim, batch, scale):
    s = max(2, min(batch, dim))
    x = rng.normal(size=(s, dim)) * scale
    labels = np.arange(s)
    return (lambda v: class_decorrelation_loss(LabeledFeatures(v["cd_features"], labels))), {"cd_features": x}


def _case_centerness(rng, dim, batch, scale):
    targets = rng.uniform(0, 1, batch)
    logits = rng.normal(size=batch) * scale
    return (lambda v: centerness_loss(v["centerness_logits"], targets)), {"centerness_logits": logits}


def _case_objectness(rng, dim, batch, scale):
    y = rng.integers(0, 2, batch).astype(bool)
    logits = rng.normal(size=batch) * scale
    return (lambda v: objectness_loss(v["objectness_logits"], y)), {"objectness_logits": logits}


def _object_focus_case(combiner):
    def build(rng, dim, batch, scale):
        targets = rng.uniform(0, 1, batch)
        y = rng.integers(0, 2, batch).astype(bool)
        inputs = {"centerness_logits": rng.normal(size=batch) * scale, "objectness_logits": rng.normal(size=batch) * scale}

        def fn(v):
            lc = centerness_loss(v["centerness_logits"], targets)
            lo = objectness_loss(v["objectness_logits"], y)
            return object_focus_loss(lc, lo, combiner)

        return fn, inputs

    return build


def _case_classification(rng, dim, batch, scale):
    k = int(rng.integers(2, 9))
    labels = rng.integers(0, k + 1, batch)
    z = rng.normal(size=(batch, k + 1)) * scale
    return (lambda v: classification_loss(v["class_logits"], labels)), {"class_logits": z}


def _case_regression(rng, dim, batch, scale):
    t = rng.normal(size=(batch, 4))
    p = t + rng.normal(size=(batch, 4)) * scale
    return (lambda v: regression_loss(v["reg_deltas"], t)), {"reg_deltas": p}


def _case_total(rng, dim, batch, scale):
    # one row per class so the decorrelation term sees the same feature rows
    s = max(2, min(batch, dim, 8))
    table = _random_table(rng, s, dim)
    labels = np.arange(s)
    cls_labels = rng.integers(0, s + 1, batch)
    ctr_t = rng.uniform(0, 1, batch)
    obj_y = rng.integers(0, 2, batch).astype(bool)
    reg_t = rng.normal(size=(batch, 4))
    cfg = LossConfig()
    inputs = {
        "features": rng.normal(size=(s, dim)) * scale,
        "class_logits": rng.normal(size=(batch, s + 1)) * scale,
        "reg_deltas": reg_t + rng.normal(size=(batch, 4)),
        "centerness_logits": rng.normal(size=batch) * scale,
        "objectness_logits": rng.normal(size=batch) * scale,
    }

    def fn(v):
        lf = LabeledFeatures(v["features"], labels)
        parts = LossParts(
            obj_focus=object_focus_loss(
                centerness_loss(v["centerness_logits"], ctr_t),
                objectness_loss(v["objectness_logits"], obj_y),
                cfg.combiner,
                cfg.gm_eps,
            ),
            sc=semantic_clustering_loss(lf, table, name="features"),
            cd=class_decorrelation_loss(lf, cfg.decorrelation_temperature, name="features"),
            reg=regression_loss(v["reg_deltas"], reg_t),
            ce=classification_loss(v["class_logits"], cls_labels),
        )
        return total_loss(parts, zero_upl(v["class_logits"], cls_labels), cfg)

    return fn, inputs


SUITE = {
    "semantic_clustering": _case_sc,
    "class_decorrelation": _case_cd,
    "centerness": _case_centerness,
    "objectness": _case_objectness,
    **{f"object_focus[{c.value}]": _object_focus_case(c) for c in Combiner},
    "classification": _case_classification,
    "regression": _case_regression,
    "total": _case_total,
}


@dataclass
class SuiteTrial:
    result: GradCheckResult
    saturated: bool

    def passed(self, tol: float = 1e-4, saturated_tol: float = 1e-3) -> bool:
        return self.result.passed(saturated_tol if self.saturated else tol)


def run_suite(
    seed: int = 0,
    trials: int = 20,
    saturated_trials: int = 4,
    max_dim: int = 32,
    max_batch: int = 16,
    saturated_scale: float = 8.0,
    floor: float = 1e-6,
) -> dict[str, list[SuiteTrial]]:
    """Check every loss in :data:`SUITE` at ``trials`` random inputs each.

    The last ``saturated_trials`` inputs have their logits and features
    multiplied by ``saturated_scale``, which drives softmax and sigmoid terms
    into saturation. ``floor`` is passed to :func:`finite_difference_check`;
    the default keeps roundoff on near-zero gradients from masquerading as
    relative error.
    """
    if not 0 <= saturated_trials <= trials:
        raise ValueError("saturated_trials must lie in [0, trials]")
    out = {}
    for i, (name, build) in enumerate(SUITE.items()):
        rng = np.random.default_rng([seed, i])
        results = []
        for t in range(trials):
            saturated = t >= trials - saturated_trials
            dim = int(rng.integers(2, max_dim + 1))
            batch = int(rng.integers(2, max_batch + 1))
            fn, inputs = build(rng, dim, batch, saturated_scale if saturated else 1.0)
            results.append(SuiteTrial(finite_difference_check(fn, inputs, floor=floor), saturated))
        out[name] = results
    return out
