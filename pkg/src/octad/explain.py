"""Grad-CAM saliency and its overlap with retinal layers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import ForwardCache, NonFiniteError, backbone_forward, head_backward, head_forward
from .phantom import LAYER_NAMES, N_LAYERS, layer_index_map
from .store import ValidationError

REGION_NAMES = LAYER_NAMES + ("Macula",)
CLASS_NAMES = ("CN", "AD")


@dataclass(frozen=True)
class SaliencyMap:
    values: np.ndarray  # (H, W) float32 in [0, 1]
    class_index: int


def bilinear_upsample(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize with edge clamping."""

    def weights(n_in: int, n_out: int) -> np.ndarray:
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        m = np.zeros((n_out, n_in))
        m[np.arange(n_out), lo] += 1.0 - frac
        m[np.arange(n_out), hi] += frac
        return m

    return weights(a.shape[0], out_h) @ a @ weights(a.shape[1], out_w).T


def channel_weights(p: dict, x: np.ndarray, class_index: int):
    """Feature map ``A`` (K, h, w) and alpha_k = spatial mean of dlogit/dA_k."""
    cache = ForwardCache()
    feats = backbone_forward(p, x[None].astype(p["fc1.w"].dtype), cache)
    logits = head_forward(p, feats, train_mode=False, cache=cache)
    onehot = np.zeros_like(logits)
    onehot[0, class_index] = 1.0
    dA = head_backward(p, cache, onehot, {})
    if not np.all(np.isfinite(dA)):
        raise NonFiniteError("non-finite Grad-CAM gradients")
    return feats[0].astype(np.float64), dA[0].mean(axis=(1, 2)).astype(np.float64)


def grad_cam(p: dict, x: np.ndarray, class_index: int) -> SaliencyMap:
    if class_index not in (0, 1):
        raise ValidationError("class_index must be 0 or 1")
    A, alpha = channel_weights(p, x, class_index)
    cam = np.maximum(np.tensordot(alpha, A, axes=1), 0.0)
    up = np.maximum(bilinear_upsample(cam, x.shape[-2], x.shape[-1]), 0.0)
    peak = up.max()
    values = up / peak if peak > 0 else np.zeros_like(up)
    return SaliencyMap(values=np.clip(values, 0.0, 1.0).astype(np.float32), class_index=class_index)


def threshold_mask(s: SaliencyMap | np.ndarray, tau: float = 0.8) -> np.ndarray:
    values = s.values if isinstance(s, SaliencyMap) else np.asarray(s)
    return values >= tau


def layer_regions(seg: np.ndarray, shape: tuple[int, int], subfield_halfwidth_px: float
                  ) -> np.ndarray:
    """(11, H, W) boolean masks: 10 layers (boundary_k <= row < boundary_k+1)
    followed by the retina within ``subfield_halfwidth_px`` of the centre column."""
    H, W = shape
    if seg.shape[1] != W:
        raise ValidationError(f"segmentation width {seg.shape[1]} != {W}")
    idx = layer_index_map(seg, H)
    regions = np.stack([idx == k for k in range(N_LAYERS)])
    centre = (W - 1) / 2.0
    cols = np.abs(np.arange(W) - centre) <= subfield_halfwidth_px
    macula = regions.any(axis=0) & cols[None, :]
    return np.concatenate([regions, macula[None]])


@dataclass(frozen=True)
class OverlapCounts:
    inter: np.ndarray
    saliency: np.ndarray
    region: np.ndarray
    union: np.ndarray

    def __add__(self, other: "OverlapCounts") -> "OverlapCounts":
        return OverlapCounts(self.inter + other.inter, self.saliency + other.saliency,
                             self.region + other.region, self.union + other.union)


@dataclass(frozen=True)
class LayerOverlap:
    iou: np.ndarray
    dice: np.ndarray
    fill: np.ndarray
    empty_region: np.ndarray  # flag per region


def overlap_counts(mask: np.ndarray, regions: np.ndarray) -> OverlapCounts:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != regions.shape[1:]:
        raise ValidationError("mask and regions must share extents")
    inter = (regions & mask[None]).sum(axis=(1, 2))
    union = (regions | mask[None]).sum(axis=(1, 2))
    return OverlapCounts(inter, np.full(len(regions), mask.sum()), regions.sum(axis=(1, 2)), union)


def overlap_from_counts(c: OverlapCounts) -> LayerOverlap:
    inter = c.inter.astype(np.float64)
    valid = (c.region > 0) & (c.saliency > 0)
    safe = lambda d: np.where(valid, d, 1)  # noqa: E731
    iou = np.where(valid, inter / safe(c.union), 0.0)
    dice = np.where(valid, 2 * inter / safe(c.saliency + c.region), 0.0)
    fill = np.where(valid, inter / safe(c.region), 0.0)
    return LayerOverlap(iou, dice, fill, c.region == 0)


def overlap(mask: np.ndarray, regions: np.ndarray) -> LayerOverlap:
    return overlap_from_counts(overlap_counts(mask, regions))


def top_percent_count(n_pixels: int, percent: int = 5) -> int:
    return (percent * n_pixels + 99) // 100


def top_mask(values: np.ndarray, percent: int = 5) -> np.ndarray:
    """Exactly ceil(percent% of pixels) marked: highest values first,
    ties resolved by row-major index."""
    flat = np.asarray(values, dtype=np.float64).ravel()
    k = top_percent_count(flat.size, percent)
    order = np.lexsort((np.arange(flat.size), -flat))
    out = np.zeros(flat.size, dtype=bool)
    out[order[:k]] = True
    return out.reshape(np.shape(values))


def aggregate_top5(maps: Sequence, percent: int = 5) -> np.ndarray:
    if not maps:
        raise ValidationError("aggregate needs at least one map")
    vals = [m.values if isinstance(m, SaliencyMap) else np.asarray(m) for m in maps]
    acc = np.zeros(vals[0].shape, dtype=np.float64)
    for v in vals:
        acc += top_mask(v, percent)
    return (acc / len(vals)).astype(np.float32)


@dataclass(frozen=True)
class SampleExplanation:
    key: tuple
    label: int
    predicted: int
    counts: OverlapCounts

    @property
    def overlap(self) -> LayerOverlap:
        return overlap_from_counts(self.counts)

    @property
    def outcome(self) -> str:
        return {(1, 1): "TP", (0, 0): "TN", (0, 1): "FP", (1, 0): "FN"}[(self.label,
                                                                         self.predicted)]


def explain_sample(p: dict, x: np.ndarray, contours: np.ndarray, label: int, score: float,
                   tau: float = 0.8, subfield_halfwidth_px: float = 42.0, key: tuple = ()):
    """Saliency for the true class plus its layer-overlap counts."""
    s = grad_cam(p, x, label)
    regions = layer_regions(contours, x.shape[-2:], subfield_halfwidth_px)
    counts = overlap_counts(threshold_mask(s, tau), regions)
    return s, SampleExplanation(key, int(label), int(score >= 0.5), counts)


def class_overlaps(samples: Sequence[SampleExplanation], pooled: bool = False) -> dict:
    """Per class: mean of per-scan overlaps, or metrics on pooled pixel counts."""
    out = {}
    for cls in (0, 1):
        group = [s for s in samples if s.label == cls]
        if not group:
            continue
        if pooled:
            total = group[0].counts
            for s in group[1:]:
                total = total + s.counts
            out[cls] = overlap_from_counts(total)
        else:
            ovs = [s.overlap for s in group]
            out[cls] = LayerOverlap(
                np.mean([o.iou for o in ovs], axis=0),
                np.mean([o.dice for o in ovs], axis=0),
                np.mean([o.fill for o in ovs], axis=0),
                np.all([o.empty_region for o in ovs], axis=0),
            )
    return out


def class_overlap_table(samples: Sequence[SampleExplanation], pooled: bool = False,
                        tau: float = 0.8) -> str:
    per_class = class_overlaps(samples, pooled)
    header = f"{'Layer':<10}  {'IoU CN':>7}  {'IoU AD':>7}  {'Dice CN':>7}  {'Dice AD':>7}  " \
             f"{'Fill% CN':>8}  {'Fill% AD':>8}"
    lines = [header, "-" * len(header)]

    def cell(cls, metric, i, width, pct=False):
        if cls not in per_class:
            return "-".rjust(width)
        v = getattr(per_class[cls], metric)[i]
        return (f"{100 * v:.1f}" if pct else f"{v:.3f}").rjust(width)

    for i, name in enumerate(REGION_NAMES):
        if name == "Macula":
            lines.append("-" * len(header))
        lines.append(
            f"{name:<10}  {cell(0, 'iou', i, 7)}  {cell(1, 'iou', i, 7)}  "
            f"{cell(0, 'dice', i, 7)}  {cell(1, 'dice', i, 7)}  "
            f"{cell(0, 'fill', i, 8, True)}  {cell(1, 'fill', i, 8, True)}"
        )
    n = {c: sum(1 for s in samples if s.label == c) for c in (0, 1)}
    outcomes = {}
    for s in samples:
        outcomes[s.outcome] = outcomes.get(s.outcome, 0) + 1
    lines.append("")
    lines.append(f"tau={tau:g} aggregation={'pooled' if pooled else 'per-scan'} "
                 f"n_CN={n[0]} n_AD={n[1]} "
                 + " ".join(f"{k}={outcomes.get(k, 0)}" for k in ("TP", "TN", "FP", "FN")))
    return "\n".join(lines) + "\n"
