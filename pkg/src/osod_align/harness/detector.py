"""Linear stand-in for a two-stage detector.

The projector maps proposal features into the embedding space (the features
the alignment losses act on); class and box heads read the projected
features. Objectness and centerness heads read the raw proposal features,
mirroring an RPN that sits before the RoI head.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..losses import sigmoid
from ..metrics import Detection, entropy_threshold
from .dataset import SyntheticScene


@dataclass
class ToyDetector:
    params: dict[str, np.ndarray]
    depth: int = 1
    # objectness/centerness heads read the projected features (True) or the raw proposal features
    rpn_on_projected: bool = False
    history: list[dict[str, float]] = field(default_factory=list)

    @property
    def feature_dim(self) -> int:
        return self.params["proj.0.W"].shape[0]

    @property
    def dim(self) -> int:
        return self.params[f"proj.{self.depth - 1}.W"].shape[1]

    @property
    def num_outputs(self) -> int:
        """k known classes plus the background slot."""
        return self.params["cls.W"].shape[1]

    def copy(self) -> "ToyDetector":
        return ToyDetector({k: v.copy() for k, v in self.params.items()}, self.depth, self.rpn_on_projected,
                           list(self.history))


def init_detector(
    feature_dim: int,
    dim: int,
    num_known: int,
    seed,
    depth: int = 1,
    rpn_on_projected: bool = False,
    head_std: float = 0.01,
) -> ToyDetector:
    """Glorot-normal projector, small-normal prediction heads, zero biases.

    Box regression starts ten times smaller than the other heads, the usual
    two-stage detector convention.
    """
    rng = np.random.default_rng(seed)

    def glorot(n_in, n_out):
        return rng.normal(0.0, np.sqrt(2.0 / (n_in + n_out)), (n_in, n_out))

    params = {}
    n_in = feature_dim
    for layer in range(depth):
        params[f"proj.{layer}.W"] = glorot(n_in, dim)
        params[f"proj.{layer}.b"] = np.zeros(dim)
        n_in = dim
    rpn_in = dim if rpn_on_projected else feature_dim
    params["cls.W"] = rng.normal(0.0, head_std, (dim, num_known + 1))
    params["cls.b"] = np.zeros(num_known + 1)
    params["reg.W"] = rng.normal(0.0, head_std / 10, (dim, 4))
    params["reg.b"] = np.zeros(4)
    params["obj.W"] = rng.normal(0.0, head_std, (rpn_in, 1))
    params["obj.b"] = np.zeros(1)
    params["ctr.W"] = rng.normal(0.0, head_std, (rpn_in, 1))
    params["ctr.b"] = np.zeros(1)
    return ToyDetector(params, depth, rpn_on_projected)


@dataclass
class ForwardOutput:
    class_logits: np.ndarray
    class_probs: np.ndarray
    deltas: np.ndarray
    objectness: np.ndarray
    centerness: np.ndarray
    features: np.ndarray
    # per projector layer: (input, pre-activation)
    cache: list[tuple[np.ndarray, np.ndarray]]


def forward(model: ToyDetector, x: np.ndarray) -> ForwardOutput:
    p = model.params
    x = np.asarray(x, dtype=np.float64).reshape(-1, model.feature_dim)
    h = x
    cache = []
    for layer in range(model.depth):
        pre = h @ p[f"proj.{layer}.W"] + p[f"proj.{layer}.b"]
        cache.append((h, pre))
        h = np.maximum(pre, 0.0) if layer < model.depth - 1 else pre
    feats = h
    rpn = feats if model.rpn_on_projected else x
    logits = feats @ p["cls.W"] + p["cls.b"]
    e = np.exp(logits - logits.max(axis=1, keepdims=True)) if len(logits) else logits
    probs = e / e.sum(axis=1, keepdims=True) if len(logits) else logits
    return ForwardOutput(
        class_logits=logits,
        class_probs=probs,
        deltas=feats @ p["reg.W"] + p["reg.b"],
        objectness=(rpn @ p["obj.W"] + p["obj.b"])[:, 0],
        centerness=(rpn @ p["ctr.W"] + p["ctr.b"])[:, 0],
        features=feats,
        cache=cache,
    )


def forward_scene(model: ToyDetector, scene: SyntheticScene) -> ForwardOutput:
    x = np.stack([pr.feature for pr in scene.proposals]) if scene.proposals else np.zeros((0, model.feature_dim))
    return forward(model, x)


def backward(
    model: ToyDetector,
    x: np.ndarray,
    out: ForwardOutput,
    d_logits: np.ndarray,
    d_deltas: np.ndarray,
    d_features: np.ndarray,
    d_objectness: np.ndarray,
    d_centerness: np.ndarray,
) -> dict[str, np.ndarray]:
    """Parameter gradients given gradients on every forward output."""
    p = model.params
    rpn = out.features if model.rpn_on_projected else x
    grads = {
        "cls.W": out.features.T @ d_logits,
        "cls.b": d_logits.sum(axis=0),
        "reg.W": out.features.T @ d_deltas,
        "reg.b": d_deltas.sum(axis=0),
        "obj.W": rpn.T @ d_objectness[:, None],
        "obj.b": np.array([d_objectness.sum()]),
        "ctr.W": rpn.T @ d_centerness[:, None],
        "ctr.b": np.array([d_centerness.sum()]),
    }
    d_h = d_features + d_logits @ p["cls.W"].T + d_deltas @ p["reg.W"].T
    if model.rpn_on_projected:
        d_h = d_h + d_objectness[:, None] @ p["obj.W"].T + d_centerness[:, None] @ p["ctr.W"].T
    for layer in reversed(range(model.depth)):
        h_in, pre = out.cache[layer]
        d_pre = d_h if layer == model.depth - 1 else d_h * (pre > 0)
        grads[f"proj.{layer}.W"] = h_in.T @ d_pre
        grads[f"proj.{layer}.b"] = d_pre.sum(axis=0)
        d_h = d_pre @ p[f"proj.{layer}.W"].T
    return grads


def predict(
    model: ToyDetector,
    scene: SyntheticScene,
    entropy_thresh: Optional[float] = 0.85,
    objectness_thresh: Optional[float] = 0.5,
) -> list[Detection]:
    """Detections for one scene.

    Proposals the objectness head rejects are dropped. The rest are labelled
    by the class head's argmax (score = max probability); entropy relabelling
    runs next, and whatever is still labelled background is discarded.
    """
    if not scene.proposals:
        return []
    out = forward_scene(model, scene)
    background = model.num_outputs - 1
    if objectness_thresh is None:
        keep = np.ones(len(scene.proposals), dtype=bool)
    else:
        keep = sigmoid(out.objectness) >= objectness_thresh
    dets = []
    for i in np.flatnonzero(keep):
        probs = out.class_probs[i]
        label = int(np.argmax(probs))
        dets.append(Detection(scene.image_id, scene.proposals[i].box, label, float(probs[label]), tuple(probs)))
    if entropy_thresh is not None:
        dets = entropy_threshold(dets, entropy_thresh)
    return [d for d in dets if d.label != background]
