"""Heatmap targets and decoding, OKS / AP and PCKh metrics, report I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, UndefinedMetricError

# COCO per-joint sigmas; the falloff constant is twice the sigma.
COCO_SIGMAS = np.array(
    [0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107, 0.087, 0.087, 0.089, 0.089]
)
COCO_FALLOFF = 2 * COCO_SIGMAS

OKS_THRESHOLDS = np.round(np.linspace(0.50, 0.95, 10), 2)


@dataclass
class Heatmap:
    """Per-joint confidence grids ``(K, h, w)`` (or ``(N, K, h, w)``)."""

    data: np.ndarray
    stride: int = 4
    sigma: float = 2.0


@dataclass
class KeypointSet:
    """Joint positions in input pixels with visibility, scale and falloffs."""

    xy: np.ndarray
    visible: np.ndarray | None = None
    scale: float = 1.0
    falloff: np.ndarray | None = None
    head_length: float | None = None
    scores: np.ndarray | None = None

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        k = len(self.xy)
        self.visible = np.ones(k, dtype=bool) if self.visible is None else np.asarray(self.visible) > 0
        if self.falloff is None:
            self.falloff = COCO_FALLOFF.copy() if k == 17 else np.full(k, 0.1)
        self.falloff = np.asarray(self.falloff, dtype=np.float64)
        if np.any(self.falloff <= 0):
            raise InvalidInputError("falloff constants must be positive")
        if self.scale <= 0:
            raise InvalidInputError("person scale must be positive")


def encode_heatmap(xy, visible, dims, sigma: float = 2.0, stride: int = 4) -> np.ndarray:
    """Unit-peak Gaussian per joint, centred on the nearest heatmap cell.

    ``xy`` is ``(K, 2)`` in input pixels; ``dims`` is the heatmap ``(h, w)``.
    Invisible joints get an all-zero map.
    """
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    visible = np.ones(len(xy), bool) if visible is None else np.asarray(visible) > 0
    h, w = dims
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    out = np.zeros((len(xy), h, w), dtype=np.float32)
    for j, (x, y) in enumerate(xy):
        if not visible[j]:
            continue
        cx, cy = int(np.floor(x / stride + 0.5)), int(np.floor(y / stride + 0.5))
        out[j] = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma**2))
    return out


def decode_heatmap(h, stride: int = 1):
    """Argmax per joint plus a quarter-cell shift toward the larger axis neighbour.

    Returns ``(xy, maxvals, detected)`` where ``xy`` is ``(K, 2)`` in input
    pixels (cell coordinates times ``stride``).  Ties in the argmax go to the
    first cell in row-major order; equal neighbours give no shift.  A map
    whose maximum is not positive is reported as undetected with NaN position.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.ndim == 2:
        h = h[None]
    k, hh, ww = h.shape
    flat = h.reshape(k, -1)
    idx = flat.argmax(axis=1)
    maxvals = flat[np.arange(k), idx]
    py, px = np.divmod(idx, ww)
    xy = np.stack([px, py], axis=1).astype(np.float64)
    for j in range(k):
        x, y = px[j], py[j]
        m = h[j]
        if 0 < x < ww - 1:
            xy[j, 0] += 0.25 * np.sign(m[y, x + 1] - m[y, x - 1])
        if 0 < y < hh - 1:
            xy[j, 1] += 0.25 * np.sign(m[y + 1, x] - m[y - 1, x])
    detected = maxvals > 0
    xy = xy * stride
    xy[~detected] = np.nan
    return xy, maxvals, detected


def decode_batch(heatmaps, stride: int = 4):
    """Decode ``(N, K, h, w)`` heatmaps into ``(N, K, 2)`` positions and ``(N, K)`` scores."""
    heatmaps = np.asarray(heatmaps)
    xy = np.empty(heatmaps.shape[:2] + (2,))
    scores = np.empty(heatmaps.shape[:2])
    for i, hm in enumerate(heatmaps):
        xy[i], scores[i], _ = decode_heatmap(hm, stride)
    return xy, scores


def oks(pred, gt: KeypointSet) -> float:
    """Object keypoint similarity of predicted positions against ``gt``."""
    p = pred.xy if isinstance(pred, KeypointSet) else np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    vis = gt.visible
    if not np.any(vis):
        raise UndefinedMetricError("OKS is undefined without a visible ground-truth keypoint")
    d2 = ((p - gt.xy) ** 2).sum(axis=1)
    d2 = np.where(np.isnan(d2), np.inf, d2)
    e = np.exp(-d2 / (2 * gt.scale**2 * gt.falloff**2))
    return float(e[vis].sum() / vis.sum())


def average_precision(oks_values, thresholds=OKS_THRESHOLDS) -> dict[str, float]:
    """Single-instance AP: per threshold, the fraction of instances with OKS >= threshold.

    With one ground-truth person per image matched 1:1 to its prediction
    (no detector, no NMS), precision at a threshold reduces to this fraction.
    """
    v = np.asarray(oks_values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise UndefinedMetricError("AP is undefined on an empty dataset")
    thresholds = np.asarray(thresholds)
    prec = np.array([(v >= t).mean() for t in thresholds])
    out = {"AP": float(prec.mean())}
    for name, t in (("AP50", 0.5), ("AP75", 0.75)):
        out[name] = float((v >= t).mean())
    return out


def pckh(pred, gt, head_length, alpha: float = 0.5, visible=None) -> float:
    """Fraction of visible joints within ``alpha * head_length`` of ground truth.

    ``pred`` and ``gt`` are ``(K, 2)`` or ``(N, K, 2)``; ``head_length`` is a
    scalar or one value per instance.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise InvalidInputError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    hl = np.broadcast_to(np.asarray(head_length, dtype=np.float64).reshape(-1), (pred.shape[0],))
    if np.any(hl <= 0):
        raise InvalidInputError("head length must be positive")
    vis = np.ones(pred.shape[:2], bool) if visible is None else np.asarray(visible).reshape(pred.shape[:2]) > 0
    if not vis.any():
        raise UndefinedMetricError("PCKh is undefined without visible joints")
    d = np.sqrt(((pred - gt) ** 2).sum(axis=-1))
    d = np.where(np.isnan(d), np.inf, d)
    ok = d <= alpha * hl[:, None]
    return float(ok[vis].mean())


# --------------------------------------------------------------------------
# exchange formats
# --------------------------------------------------------------------------

REPORT_FIELDS = (
    "pck@0.5",
    "pck@0.1",
    "AP",
    "AP50",
    "AP75",
    "params",
    "binary_params",
    "flops",
    "bops",
    "ops",
    "protocol",
)


def write_predictions(path, xy, scores, image_ids=None):
    """One JSON record per (image, joint)."""
    xy = np.asarray(xy)
    scores = np.asarray(scores)
    ids = range(len(xy)) if image_ids is None else image_ids
    with open(path, "w") as f:
        for img, pts, sc in zip(ids, xy, scores):
            for j, ((x, y), s) in enumerate(zip(pts, sc)):
                rec = {"image_id": int(img), "joint_id": j, "x": float(x), "y": float(y), "score": float(s)}
                f.write(json.dumps(rec) + "\n")


def read_predictions(path):
    """Inverse of :func:`write_predictions`: ``(image_ids, xy (N,K,2), scores (N,K))``."""
    rows = [json.loads(line) for line in open(path) if line.strip()]
    if not rows:
        return [], np.zeros((0, 0, 2)), np.zeros((0, 0))
    ids = sorted({r["image_id"] for r in rows})
    k = max(r["joint_id"] for r in rows) + 1
    pos = {img: i for i, img in enumerate(ids)}
    xy = np.full((len(ids), k, 2), np.nan)
    sc = np.zeros((len(ids), k))
    for r in rows:
        i = pos[r["image_id"]]
        xy[i, r["joint_id"]] = (r["x"], r["y"])
        sc[i, r["joint_id"]] = r["score"]
    return ids, xy, sc


def format_report(metrics: dict) -> str:
    """Fixed-order ``name = value`` lines for the report fields present in ``metrics``."""
    lines = []
    for key in REPORT_FIELDS:
        if key in metrics:
            v = metrics[key]
            lines.append(f"{key} = {v:.6g}" if isinstance(v, float) else f"{key} = {v}")
    return "\n".join(lines)
