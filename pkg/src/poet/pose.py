"""Pose vectors: one instance as a center, per-keypoint offsets and visibilities.

An annotated instance is encoded as its visible-keypoint center of mass plus
normalized displacements from that center, with each keypoint's binary
visibility duplicated once per coordinate so the vector masks cleanly against
the offset pairs. Empty slots (and instances without any labeled keypoint)
carry the non-object class with all visibilities zero.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Sequence


class PoseClass(enum.IntEnum):
    NON_OBJECT = 0
    HUMAN = 1


class TooManyInstances(ValueError):
    """More instances than available slots."""


@dataclass(frozen=True)
class Keypoint:
    """One annotated point; v follows the COCO convention {0: unlabeled, 1: occluded, 2: visible}."""

    x: float
    y: float
    v: int


@dataclass(frozen=True)
class InstanceAnnotation:
    keypoints: tuple[Keypoint, ...]
    image_size: tuple[float, float]  # (W, H) in pixels

    def __init__(self, keypoints: Iterable[Keypoint], image_size: Sequence[float]):
        object.__setattr__(self, "keypoints", tuple(keypoints))
        object.__setattr__(self, "image_size", (float(image_size[0]), float(image_size[1])))

    @property
    def num_keypoints(self) -> int:
        return len(self.keypoints)

    @property
    def num_visible(self) -> int:
        return sum(1 for kp in self.keypoints if kp.v > 0)


@dataclass(frozen=True)
class PoseVector:
    """Flat instance representation: center in [0,1]^2, 2K offsets, 2K duplicated visibilities.

    Target vectors carry binary visibilities; prediction-side vectors reuse the
    same container with visibility scores in (0,1), still duplicated pairwise.
    """

    center: tuple[float, float]
    offsets: tuple[float, ...]
    visibilities: tuple[float, ...]
    pose_class: PoseClass

    def __init__(self, center, offsets, visibilities, pose_class):
        center = (float(center[0]), float(center[1]))
        offsets = tuple(float(o) for o in offsets)
        visibilities = tuple(float(v) for v in visibilities)
        if len(offsets) != len(visibilities):
            raise ValueError(f"offsets ({len(offsets)}) and visibilities ({len(visibilities)}) differ in length")
        if len(offsets) % 2 != 0:
            raise ValueError(f"offsets length must be 2K, got {len(offsets)}")
        for i in range(0, len(visibilities), 2):
            if visibilities[i] != visibilities[i + 1]:
                raise ValueError(f"visibilities must be duplicated pairwise, differ at keypoint {i // 2}")
        pose_class = PoseClass(pose_class)
        if pose_class is PoseClass.NON_OBJECT and any(v != 0.0 for v in visibilities):
            raise ValueError("non-object poses must have all-zero visibilities")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "visibilities", visibilities)
        object.__setattr__(self, "pose_class", pose_class)

    @property
    def num_keypoints(self) -> int:
        return len(self.offsets) // 2

    @property
    def is_human(self) -> bool:
        return self.pose_class is PoseClass.HUMAN


@dataclass(frozen=True)
class PredictionSlot:
    """One decoded query: class probabilities plus a pose-shaped output."""

    class_probs: tuple[float, float]  # (human, non-object)
    pose: PoseVector
    class_logits: tuple[float, float] | None = None

    @property
    def score(self) -> float:
        return self.class_probs[0]


@dataclass(frozen=True)
class TargetSet:
    """Fixed-size slot collection: humans first, then non-object padding."""

    slots: tuple[PoseVector, ...]

    def __init__(self, slots: Iterable[PoseVector]):
        object.__setattr__(self, "slots", tuple(slots))

    def __len__(self):
        return len(self.slots)

    def __iter__(self):
        return iter(self.slots)

    def __getitem__(self, i):
        return self.slots[i]

    @property
    def num_humans(self) -> int:
        return sum(1 for p in self.slots if p.is_human)


@dataclass(frozen=True)
class PredictionSet:
    slots: tuple[PredictionSlot, ...]

    def __init__(self, slots: Iterable[PredictionSlot]):
        object.__setattr__(self, "slots", tuple(slots))

    def __len__(self):
        return len(self.slots)

    def __iter__(self):
        return iter(self.slots)

    def __getitem__(self, i):
        return self.slots[i]


def non_object_pose(num_keypoints: int) -> PoseVector:
    return PoseVector((0.0, 0.0), (0.0,) * (2 * num_keypoints), (0.0,) * (2 * num_keypoints), PoseClass.NON_OBJECT)


def encode_pose(ann: InstanceAnnotation) -> PoseVector:
    """Encode an annotation as a normalized pose vector.

    The center is the mean of visible keypoints divided per-axis by (W, H);
    offsets are the visible keypoints' displacements from that center, also
    normalized per axis, and zero for invisible keypoints. An instance with no
    visible keypoint encodes as a non-object with all visibilities zero.
    """
    w, h = ann.image_size
    if w <= 0 or h <= 0:
        raise ValueError(f"image size must be positive, got {ann.image_size}")
    visible = [kp for kp in ann.keypoints if kp.v > 0]
    if not visible:
        return non_object_pose(ann.num_keypoints)
    cx = sum(kp.x for kp in visible) / len(visible)
    cy = sum(kp.y for kp in visible) / len(visible)
    offsets: list[float] = []
    vis: list[float] = []
    for kp in ann.keypoints:
        if kp.v > 0:
            offsets.extend(((kp.x - cx) / w, (kp.y - cy) / h))
            vis.extend((1.0, 1.0))
        else:
            offsets.extend((0.0, 0.0))
            vis.extend((0.0, 0.0))
    return PoseVector((cx / w, cy / h), offsets, vis, PoseClass.HUMAN)


def decode_pose(p: PoseVector, image_size: Sequence[float]) -> list[Keypoint]:
    """Invert encode_pose: pixel keypoints with v copied from the visibility pair."""
    w, h = float(image_size[0]), float(image_size[1])
    out = []
    for i in range(p.num_keypoints):
        x = (p.center[0] + p.offsets[2 * i]) * w
        y = (p.center[1] + p.offsets[2 * i + 1]) * h
        out.append(Keypoint(x, y, 1 if p.visibilities[2 * i] > 0.5 else 0))
    return out


def pad_targets(poses: Sequence[PoseVector], num_slots: int) -> TargetSet:
    """Pad human poses with non-objects up to the fixed slot count, order preserved."""
    if len(poses) > num_slots:
        raise TooManyInstances(f"{len(poses)} instances exceed {num_slots} slots")
    k = poses[0].num_keypoints if poses else 0
    pad = non_object_pose(k)
    return TargetSet(tuple(poses) + (pad,) * (num_slots - len(poses)))


def to_flat(p: PoseVector) -> list[float]:
    """Serialize as [x_c, y_c, dx_1, dy_1, v_1, dx_2, dy_2, v_2, ...] (one v per keypoint)."""
    out = [p.center[0], p.center[1]]
    for i in range(p.num_keypoints):
        out.extend((p.offsets[2 * i], p.offsets[2 * i + 1], p.visibilities[2 * i]))
    return out


def from_flat(values: Sequence[float], pose_class: PoseClass | int) -> PoseVector:
    """Inverse of to_flat; re-duplicates each keypoint's visibility per coordinate."""
    if (len(values) - 2) % 3 != 0:
        raise ValueError(f"flat pose length must be 2 + 3K, got {len(values)}")
    k = (len(values) - 2) // 3
    center = (values[0], values[1])
    offsets: list[float] = []
    vis: list[float] = []
    for i in range(k):
        dx, dy, v = values[2 + 3 * i : 5 + 3 * i]
        offsets.extend((dx, dy))
        vis.extend((v, v))
    return PoseVector(center, offsets, vis, PoseClass(pose_class))
