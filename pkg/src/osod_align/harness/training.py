"""Plain-SGD training of the toy detector on the combined objective."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..embeddings import ClassEmbeddingTable
from ..geometry import box_deltas, centerness_target, to_center
from ..losses import (
    Combiner,
    DifferentiableScalar,
    LabeledFeatures,
    LossConfig,
    LossDomainError,
    LossParts,
    UPLPlugin,
    centerness_loss,
    class_decorrelation_loss,
    classification_loss,
    object_focus_loss,
    objectness_loss,
    regression_loss,
    sample_per_class_indices,
    semantic_clustering_loss,
    total_loss,
    zero_upl,
)
from .dataset import DatasetSpec, SyntheticScene, generate_dataset
from .detector import ToyDetector, backward, forward, init_detector

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    learning_rate: float = 0.01
    iterations: int = 2000
    batch_images: int = 4
    enable_sc: bool = True
    enable_cd: bool = True
    enable_of: bool = True
    seed: int = 0
    projector_depth: int = 1
    rpn_on_projected: bool = False
    head_init_std: float = 0.01
    # negatives kept per positive when sampling a batch
    neg_per_pos: int = 3

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_images < 1 or self.projector_depth < 1:
            raise ValueError("batch_images and projector_depth must be >= 1")

    def effective_loss(self) -> LossConfig:
        """Loss config with disabled modules switched off."""
        cfg = self.loss
        return dataclasses.replace(
            cfg,
            alpha1=cfg.alpha1 if self.enable_sc else 0.0,
            alpha2=cfg.alpha2 if self.enable_cd else 0.0,
            combiner=cfg.combiner if self.enable_of else Combiner.OBJECTNESS_ONLY,
        )


@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray  # class index, k = background
    is_object: np.ndarray
    reg_targets: np.ndarray  # rows for positives only
    ctr_targets: np.ndarray  # one per positive with a valid target
    ctr_rows: np.ndarray  # which batch rows those targets belong to

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.is_object)


def scene_targets(scene: SyntheticScene, background: int, centerness_eps: float = 1e-8):
    """Per-proposal labels, objectness flags and regression/centerness targets."""
    labels, is_obj, reg, ctr = [], [], [], []
    for p in scene.proposals:
        if p.object_index >= 0 and p.is_object:
            obj = scene.objects[p.object_index]
            d = box_deltas(to_center(obj.gt.box), to_center(p.box))
            labels.append(obj.gt.label)
            is_obj.append(True)
            reg.append(d.as_tuple())
            ctr.append(centerness_target(d, centerness_eps))
        else:
            labels.append(background)
            is_obj.append(False)
            reg.append((0.0, 0.0, 0.0, 0.0))
            ctr.append(None)
    return labels, is_obj, reg, ctr


def make_batch(scenes: list[SyntheticScene], background: int, rng: np.random.Generator, neg_per_pos: int,
               centerness_eps: float = 1e-8) -> Batch:
    feats, labels, is_obj, reg, ctr = [], [], [], [], []
    for scene in scenes:
        for p in scene.proposals:
            feats.append(p.feature)
        lab, obj, r, c = scene_targets(scene, background, centerness_eps)
        labels += lab
        is_obj += obj
        reg += r
        ctr += c
    is_obj_arr = np.array(is_obj, dtype=bool)
    pos = np.flatnonzero(is_obj_arr)
    neg = np.flatnonzero(~is_obj_arr)
    n_neg = min(len(neg), max(1, neg_per_pos * len(pos)))
    chosen_neg = np.sort(rng.choice(neg, size=n_neg, replace=False)) if n_neg else neg[:0]
    rows = np.concatenate([pos, chosen_neg])
    feats_arr = np.stack(feats)[rows]
    sub_obj = is_obj_arr[rows]
    sub_ctr = [ctr[r] for r in rows]
    ctr_rows = np.array([i for i, t in enumerate(sub_ctr) if t is not None], dtype=np.int64)
    return Batch(
        features=feats_arr,
        labels=np.array(labels, dtype=np.int64)[rows],
        is_object=sub_obj,
        reg_targets=np.array(reg, dtype=np.float64)[rows][sub_obj],
        ctr_targets=np.array([sub_ctr[i] for i in ctr_rows], dtype=np.float64),
        ctr_rows=ctr_rows,
    )


@dataclass
class StepResult:
    total: DifferentiableScalar
    parts: LossParts
    grads: dict[str, np.ndarray]


def loss_and_grads(
    model: ToyDetector,
    batch: Batch,
    table: ClassEmbeddingTable,
    loss_cfg: LossConfig,
    cd_seed,
    upl: UPLPlugin = zero_upl,
) -> StepResult:
    x = batch.features
    out = forward(model, x)
    pos = batch.positives
    n = len(x)

    ce = classification_loss(out.class_logits, batch.labels, loss_cfg.reduction)
    reg = regression_loss(out.deltas[pos], batch.reg_targets, loss_cfg.reduction)
    sc = semantic_clustering_loss(LabeledFeatures(out.features[pos], batch.labels[pos]), table, loss_cfg.reduction)
    cd_idx = sample_per_class_indices(batch.labels[pos], cd_seed)
    if len(cd_idx) >= 2:
        cd = class_decorrelation_loss(
            LabeledFeatures(out.features[pos][cd_idx], batch.labels[pos][cd_idx]),
            loss_cfg.decorrelation_temperature,
        )
    else:
        cd = DifferentiableScalar(0.0, {"cd_features": np.zeros((len(cd_idx), model.dim))})
    lobj = objectness_loss(out.objectness, batch.is_object, loss_cfg.reduction)
    lc = centerness_loss(out.centerness[batch.ctr_rows], batch.ctr_targets, loss_cfg.reduction)
    of = object_focus_loss(lc, lobj, loss_cfg.combiner, loss_cfg.gm_eps)
    parts = LossParts(obj_focus=of, sc=sc, cd=cd, reg=reg, ce=ce)
    total = total_loss(parts, upl(out.class_logits, batch.labels), loss_cfg)

    g = total.grads
    d_feat = np.zeros_like(out.features)
    d_feat[pos] += g["sc_features"]
    np.add.at(d_feat, pos[cd_idx], g["cd_features"])
    d_deltas = np.zeros_like(out.deltas)
    d_deltas[pos] = g["reg_deltas"]
    d_ctr = np.zeros(n)
    d_ctr[batch.ctr_rows] = g["centerness_logits"]
    grads = backward(
        model, x, out,
        d_logits=g["class_logits"],
        d_deltas=d_deltas,
        d_features=d_feat,
        d_objectness=g["objectness_logits"],
        d_centerness=d_ctr,
    )
    return StepResult(total, parts, grads)


def _term_values(parts: LossParts) -> dict[str, float]:
    return {k: getattr(parts, k).value for k in ("obj_focus", "sc", "cd", "reg", "ce")}


def train_on(
    scenes: list[SyntheticScene],
    table: ClassEmbeddingTable,
    cfg: TrainConfig,
    upl: UPLPlugin = zero_upl,
    model: Optional[ToyDetector] = None,
) -> ToyDetector:
    feature_dim = scenes[0].proposals[0].feature.shape[0]
    if model is None:
        model = init_detector(feature_dim, table.dim, len(table), [cfg.seed, 0], cfg.projector_depth,
                              cfg.rpn_on_projected, cfg.head_init_std)
    background = model.num_outputs - 1
    loss_cfg = cfg.effective_loss()
    rng = np.random.default_rng([cfg.seed, 1])
    for it in range(cfg.iterations):
        picks = rng.choice(len(scenes), size=min(cfg.batch_images, len(scenes)), replace=False)
        batch = make_batch([scenes[i] for i in sorted(picks)], background, rng, cfg.neg_per_pos,
                           loss_cfg.centerness_eps)
        try:
            step = loss_and_grads(model, batch, table, loss_cfg, [cfg.seed, 2, it], upl)
        except LossDomainError as exc:
            last = model.history[-1] if model.history else {}
            raise TrainingDivergedError(f"non-finite loss at iteration {it} ({exc}); previous terms: {last}") from exc
        terms = _term_values(step.parts)
        if not math.isfinite(step.total.value) or not all(np.isfinite(g).all() for g in step.grads.values()):
            raise TrainingDivergedError(f"non-finite loss at iteration {it}: total={step.total.value}, terms={terms}")
        model.history.append({"iteration": it, "total": step.total.value, **terms})
        for key, grad in step.grads.items():
            model.params[key] -= cfg.learning_rate * grad
    log.debug("trained %d iterations, final loss %.4f", cfg.iterations, model.history[-1]["total"])
    return model


def train(spec: DatasetSpec, cfg: TrainConfig, upl: UPLPlugin = zero_upl) -> ToyDetector:
    data = generate_dataset(spec)
    return train_on(data.train, data.table, cfg, upl)
