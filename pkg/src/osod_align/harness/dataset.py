"""Synthetic open-set detection scenes with controlled semantic proximity.

Each class has an anchor direction (its synthesized embedding). An object's
latent feature is its anchor plus Gaussian noise. A proposal's feature mixes
the object's latent (plus a class-agnostic object cue) with background noise
in proportion to its IoU with the object, so badly aligned proposals look
more like background. Negative proposals carry background noise only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from ..embeddings import ClassEmbeddingTable, synth_embeddings
from ..geometry import Box, iou
from ..metrics import UNKNOWN, GroundTruthObject

OBJECT_CUE = "__object_cue__"


@dataclass
class DatasetSpec:
    known_classes: list[str] = field(
        default_factory=lambda: ["horse", "dog", "cat", "cow", "sheep", "bird", "car", "person"]
    )
    unknown_classes: list[str] = field(default_factory=lambda: ["zebra", "giraffe", "elephant"])
    feature_dim: int = 32
    objects_per_image: tuple[int, int] = (1, 3)
    images_train: int = 200
    images_test: int = 100
    # wild (unknown-only) test images per known-only test image
    wilderness_ratio: float = 1.0
    noise_sigma: float = 0.1
    # length of the class anchors in feature space
    signal_scale: float = 3.0
    proximity_pairs: list[tuple[str, str, float]] = field(default_factory=lambda: [("zebra", "horse", 0.8)])
    seed: int = 0
    image_size: float = 100.0
    object_size: tuple[float, float] = (15.0, 45.0)
    proposals_per_object: int = 4
    negatives_per_image: int = 8
    train_jitter: float = 0.15
    test_jitter: float = 0.05
    background_sigma: float = 0.3
    object_cue: float = 1.0

    def __post_init__(self):
        self.known_classes = list(self.known_classes)
        self.unknown_classes = list(self.unknown_classes)
        self.objects_per_image = tuple(int(v) for v in self.objects_per_image)
        self.object_size = tuple(float(v) for v in self.object_size)
        self.proximity_pairs = [(str(a), str(b), float(c)) for a, b, c in self.proximity_pairs]
        self.validate()

    def validate(self):
        if set(self.known_classes) & set(self.unknown_classes):
            raise ValueError("known and unknown class sets must be disjoint")
        if len(self.known_classes) < 2:
            raise ValueError("need at least two known classes")
        if OBJECT_CUE in self.known_classes or OBJECT_CUE in self.unknown_classes:
            raise ValueError(f"{OBJECT_CUE!r} is reserved")
        lo, hi = self.objects_per_image
        if not 1 <= lo <= hi:
            raise ValueError("objects_per_image must be a range with 1 <= lo <= hi")
        if self.images_train < 1 or self.images_test < 0:
            raise ValueError("image counts must be positive")
        if self.wilderness_ratio < 0:
            raise ValueError("wilderness_ratio must be >= 0")
        if self.wilderness_ratio > 0 and not self.unknown_classes:
            raise ValueError("a positive wilderness_ratio needs unknown classes")
        if self.noise_sigma <= 0 or self.background_sigma <= 0 or self.signal_scale <= 0:
            raise ValueError("noise scales must be positive")
        for a, b, _ in self.proximity_pairs:
            if a not in self.unknown_classes or b not in self.known_classes:
                raise ValueError(f"proximity pair ({a}, {b}) must be (unknown, known)")


@dataclass
class SceneObject:
    gt: GroundTruthObject
    latent: np.ndarray
    class_name: str


@dataclass
class Proposal:
    box: Box
    feature: np.ndarray
    is_object: bool
    # index into the scene's objects, -1 for background
    object_index: int = -1


@dataclass
class SyntheticScene:
    image_id: str
    objects: list[SceneObject]
    proposals: list[Proposal]

    def feature_matrix(self) -> np.ndarray:
        if not self.proposals:
            return np.zeros((0, 0))
        return np.stack([p.feature for p in self.proposals])


class SyntheticDataset(NamedTuple):
    train: list[SyntheticScene]
    test: list[SyntheticScene]
    table: ClassEmbeddingTable


def class_anchors(spec: DatasetSpec) -> ClassEmbeddingTable:
    """Anchors for every known and unknown class plus the shared object cue."""
    names = spec.known_classes + spec.unknown_classes + [OBJECT_CUE]
    return synth_embeddings(names, spec.feature_dim, spec.seed, spec.proximity_pairs)


def _random_box(rng: np.random.Generator, spec: DatasetSpec) -> Box:
    w, h = rng.uniform(*spec.object_size, size=2)
    x1 = rng.uniform(0, spec.image_size - w)
    y1 = rng.uniform(0, spec.image_size - h)
    return Box(float(x1), float(y1), float(x1 + w), float(y1 + h))


def _jitter(rng: np.random.Generator, box: Box, scale: float) -> Box:
    w, h = box.width, box.height
    cx = (box.x1 + box.x2) / 2 + rng.normal(0, scale) * w
    cy = (box.y1 + box.y2) / 2 + rng.normal(0, scale) * h
    w *= math.exp(rng.normal(0, scale))
    h *= math.exp(rng.normal(0, scale))
    return Box(float(cx - w / 2), float(cy - h / 2), float(cx + w / 2), float(cy + h / 2))


def _negative_box(rng: np.random.Generator, spec: DatasetSpec, objects: list[Box]) -> Optional[Box]:
    for _ in range(50):
        b = _random_box(rng, spec)
        if all(iou(b, o) < 0.3 for o in objects):
            return b
    return None


def _make_scene(
    rng: np.random.Generator,
    spec: DatasetSpec,
    anchors: ClassEmbeddingTable,
    image_id: str,
    class_pool: list[str],
    known_index: dict[str, int],
    n_jittered: int,
    jitter: float,
) -> SyntheticScene:
    cue = anchors.vector(OBJECT_CUE) * spec.object_cue
    n_obj = int(rng.integers(spec.objects_per_image[0], spec.objects_per_image[1] + 1))
    objects: list[SceneObject] = []
    for _ in range(n_obj):
        name = class_pool[int(rng.integers(len(class_pool)))]
        latent = spec.signal_scale * anchors.vector(name) + rng.normal(0, spec.noise_sigma, spec.feature_dim)
        label = known_index.get(name, UNKNOWN)
        objects.append(SceneObject(GroundTruthObject(image_id, _random_box(rng, spec), label), latent, name))

    def background() -> np.ndarray:
        return rng.normal(0, spec.background_sigma, spec.feature_dim)

    proposals: list[Proposal] = []
    for oi, obj in enumerate(objects):
        boxes = [_jitter(rng, obj.gt.box, jitter) for _ in range(n_jittered)]
        if n_jittered > 1:
            # exact ground-truth copy, as detectors add GT boxes to the proposal set
            boxes[0] = obj.gt.box
        for b in boxes:
            q = iou(b, obj.gt.box)
            feat = q * (obj.latent + cue) + (1.0 - q) * background()
            proposals.append(Proposal(b, feat, q >= 0.5, oi if q >= 0.5 else -1))
    gt_boxes = [o.gt.box for o in objects]
    for _ in range(spec.negatives_per_image):
        b = _negative_box(rng, spec, gt_boxes)
        if b is not None:
            proposals.append(Proposal(b, background(), False, -1))
    return SyntheticScene(image_id, objects, proposals)


def generate_dataset(spec: DatasetSpec) -> SyntheticDataset:
    spec.validate()
    anchors = class_anchors(spec)
    table = anchors.subset(spec.known_classes)
    known_index = {n: i for i, n in enumerate(spec.known_classes)}
    rng = np.random.default_rng([spec.seed, 1])

    train = [
        _make_scene(rng, spec, anchors, f"train-{i:05d}", spec.known_classes, known_index,
                    spec.proposals_per_object, spec.train_jitter)
        for i in range(spec.images_train)
    ]
    n_wild = int(round(spec.images_test * spec.wilderness_ratio / (1.0 + spec.wilderness_ratio)))
    kinds = ["wild"] * n_wild + ["known"] * (spec.images_test - n_wild)
    rng.shuffle(kinds)
    test = []
    for i, kind in enumerate(kinds):
        pool = spec.unknown_classes if kind == "wild" else spec.known_classes
        test.append(_make_scene(rng, spec, anchors, f"test-{i:05d}", pool, known_index, 1, spec.test_jitter))
    return SyntheticDataset(train, test, table)
