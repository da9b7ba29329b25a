"""Deterministic stick-figure keypoint dataset.

Each sample is a grayscale image of an articulated figure (torso, head disk,
two-segment arms and legs) over line clutter and pixel noise.  Left limbs are
drawn brighter than right limbs so left/right joints are distinguishable.
The labelled joints are the five extremities: head top, left wrist, right
wrist, left ankle, right ankle.  Sample ``i`` of a split depends only on
``(seed, split, i)``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from .errors import InvalidInputError
from .evaluation import encode_heatmap

JOINT_NAMES = ("head_top", "left_wrist", "right_wrist", "left_ankle", "right_ankle")
# OKS falloffs for the five joints, borrowed from the closest COCO joints (2 * sigma).
SYNTH_FALLOFF = np.array([0.052, 0.124, 0.124, 0.178, 0.178])

_SPLIT_IDS = {"train": 0, "val": 1, "test": 2}

# Bone lengths at unit scale, in pixels of a 64x64 image.
_BONES = {"torso": 14.0, "head": 12.0, "upper_arm": 9.0, "forearm": 9.0, "thigh": 11.0, "shin": 11.0}
_LEFT, _RIGHT, _BODY = 1.0, 0.7, 0.45


@dataclass(frozen=True)
class SynthSpec:
    image_size: tuple[int, int] = (64, 64)
    joints: int = 5
    pose_noise: float = 1.0
    scale_range: tuple[float, float] = (0.85, 1.1)
    clutter: int = 6
    pixel_noise: float = 0.05
    limb_width: float = 1.4
    seed: int = 0
    train_size: int = 1024
    val_size: int = 256
    test_size: int = 0

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        object.__setattr__(self, "scale_range", tuple(float(v) for v in self.scale_range))
        if self.joints != len(JOINT_NAMES):
            raise InvalidInputError(f"the stick-figure template labels {len(JOINT_NAMES)} joints")
        if self.pose_noise < 0 or self.clutter < 0 or self.pixel_noise < 0:
            raise InvalidInputError("noise levels must be non-negative")

    def size_of(self, split: str) -> int:
        return {"train": self.train_size, "val": self.val_size, "test": self.test_size}[split]

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class SynthDataset:
    images: np.ndarray  # (N, 1, H, W) float32
    keypoints: np.ndarray  # (N, K, 2) input pixels, x then y
    visible: np.ndarray  # (N, K) bool
    head_length: np.ndarray  # (N,)
    scale: np.ndarray  # (N,) sqrt of figure bounding-box area
    falloff: np.ndarray = field(default_factory=lambda: SYNTH_FALLOFF.copy())
    _targets: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.images)

    def targets(self, stride: int = 4, sigma: float = 2.0) -> np.ndarray:
        """Ground-truth heatmaps ``(N, K, H / stride, W / stride)``, cached per setting."""
        key = (stride, sigma)
        if key not in self._targets:
            h, w = self.images.shape[2] // stride, self.images.shape[3] // stride
            self._targets[key] = np.stack(
                [encode_heatmap(kp, v, (h, w), sigma, stride) for kp, v in zip(self.keypoints, self.visible)]
            )
        return self._targets[key]

    def subset(self, idx) -> "SynthDataset":
        idx = np.asarray(idx)
        if idx.dtype != bool:
            idx = idx.astype(np.intp)
        sub = SynthDataset(self.images[idx], self.keypoints[idx], self.visible[idx], self.head_length[idx], self.scale[idx], self.falloff)
        for key, t in self._targets.items():
            sub._targets[key] = t[idx]
        return sub


def _direction(angle: float) -> np.ndarray:
    # angle 0 points up the image, positive angles turn clockwise
    return np.array([np.sin(angle), -np.cos(angle)])


def _segment_distance(px, py, a, b):
    ab = b - a
    denom = float(ab @ ab) or 1e-12
    t = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0.0, 1.0)
    dx = px - (a[0] + t * ab[0])
    dy = py - (a[1] + t * ab[1])
    return np.sqrt(dx * dx + dy * dy)


def _pose(rng: np.random.Generator, spec: SynthSpec):
    h, w = spec.image_size
    n = spec.pose_noise
    unit = min(h, w) / 64.0

    def jitter(span):
        return rng.uniform(-span, span) * n

    lo, hi = spec.scale_range
    scale = (rng.uniform(lo, hi) if n > 0 else 0.5 * (lo + hi)) * unit
    pelvis = np.array([w / 2 + jitter(4.0) * unit, h * 0.56 + jitter(2.0) * unit])
    torso_a = jitter(0.2)
    neck = pelvis + scale * _BONES["torso"] * _direction(torso_a)
    # the head is a disc, so any tilt of its own would be invisible; it follows the torso
    head_top = neck + scale * _BONES["head"] * _direction(torso_a)
    limbs = {}
    for side, sgn in (("left", -1.0), ("right", 1.0)):
        up = sgn * (np.pi / 2 - 0.3) + jitter(0.6)
        elbow = neck + scale * _BONES["upper_arm"] * _direction(up)
        wrist = elbow + scale * _BONES["forearm"] * _direction(up + jitter(0.9))
        hip_a = np.pi - sgn * 0.3 + jitter(0.2)
        knee = pelvis + scale * _BONES["thigh"] * _direction(hip_a)
        ankle = knee + scale * _BONES["shin"] * _direction(hip_a + jitter(0.35))
        limbs[side] = (elbow, wrist, knee, ankle)
    return pelvis, neck, head_top, limbs, scale


def render_sample(rng: np.random.Generator, spec: SynthSpec):
    """Draw one figure; returns ``(image, keypoints, visible, head_length, scale)``."""
    h, w = spec.image_size
    py, px = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.zeros((h, w))
    unit = min(h, w) / 64.0
    for _ in range(spec.clutter):
        a = rng.uniform([0, 0], [w, h])
        b = a + rng.uniform(-12, 12, size=2) * unit
        d = _segment_distance(px, py, a, b)
        img = np.maximum(img, rng.uniform(0.15, 0.3) * np.clip(spec.limb_width + 0.5 - d, 0, 1))

    pelvis, neck, head_top, limbs, scale = _pose(rng, spec)
    lw = spec.limb_width * scale / unit

    def stroke(a, b, level, width=lw):
        nonlocal img
        d = _segment_distance(px, py, a, b)
        img = np.maximum(img, level * np.clip(width + 0.5 - d, 0, 1))

    stroke(pelvis, neck, _BODY)
    head_c = neck + 0.55 * (head_top - neck)
    r = 0.45 * np.linalg.norm(head_top - neck)
    img = np.maximum(img, _BODY * np.clip(r + 0.5 - np.hypot(px - head_c[0], py - head_c[1]), 0, 1))
    for side, level in (("left", _LEFT), ("right", _RIGHT)):
        elbow, wrist, knee, ankle = limbs[side]
        stroke(neck, elbow, level)
        stroke(elbow, wrist, level)
        stroke(pelvis, knee, level)
        stroke(knee, ankle, level)
    if spec.pixel_noise:
        img = img + rng.normal(0, spec.pixel_noise, size=img.shape)

    kps = np.array([head_top, limbs["left"][1], limbs["right"][1], limbs["left"][3], limbs["right"][3]])
    visible = (kps[:, 0] >= 0) & (kps[:, 0] <= w - 1) & (kps[:, 1] >= 0) & (kps[:, 1] <= h - 1)
    pts = np.array([pelvis, neck, head_top, *limbs["left"], *limbs["right"]])
    ext = pts.max(axis=0) - pts.min(axis=0) + 2 * lw
    person_scale = float(np.sqrt(ext[0] * ext[1]))
    head_length = float(np.linalg.norm(head_top - neck))
    return img, kps, visible, head_length, person_scale


def generate_split(spec: SynthSpec, split: str = "train") -> SynthDataset:
    n = spec.size_of(split)
    h, w = spec.image_size
    images = np.empty((n, 1, h, w), dtype=np.float32)
    kps = np.empty((n, spec.joints, 2))
    vis = np.empty((n, spec.joints), dtype=bool)
    head = np.empty(n)
    scale = np.empty(n)
    for i in range(n):
        rng = np.random.default_rng([spec.seed, _SPLIT_IDS[split], i])
        img, kps[i], vis[i], head[i], scale[i] = render_sample(rng, spec)
        images[i, 0] = ((img - 0.15) / 0.3).astype(np.float32)
    return SynthDataset(images, kps, vis, head, scale)


def generate(spec: SynthSpec) -> dict[str, SynthDataset]:
    """All non-empty splits of ``spec``."""
    return {s: generate_split(spec, s) for s in _SPLIT_IDS if spec.size_of(s) > 0}


def batches(dataset: SynthDataset, batch_size: int, shuffle_seed: int | None = None) -> Iterator[np.ndarray]:
    """Index batches covering every sample once; the last batch may be short."""
    if len(dataset) == 0:
        raise InvalidInputError("cannot batch an empty dataset")
    if batch_size < 1:
        raise InvalidInputError("batch size must be positive")
    order = np.arange(len(dataset))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def save_split(path, spec: SynthSpec, ds: SynthDataset):
    np.savez_compressed(
        path,
        spec_hash=np.array(spec.digest()),
        images=ds.images,
        keypoints=ds.keypoints,
        visible=ds.visible,
        head_length=ds.head_length,
        scale=ds.scale,
    )


def load_split(path, spec: SynthSpec) -> SynthDataset | None:
    """Load a cached split; returns None when the cache belongs to a different spec."""
    with np.load(path) as z:
        if str(z["spec_hash"]) != spec.digest():
            return None
        return SynthDataset(z["images"], z["keypoints"], z["visible"], z["head_length"], z["scale"])
