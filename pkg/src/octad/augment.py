"""One-at-a-time training augmentation for composite inputs.

Geometric ops (hflip, translate, scale) move all three channels together;
OCT-specific ops (occlude, contrast, vessel_shadow, noise) touch only the raw
channel. Pixel ranges are defined at 512 px and scaled to the input size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .preprocess import Composite, round_half_up
from .store import Rng, ValidationError

KINDS = (
    "identity",
    "hflip",
    "translate",
    "scale",
    "occlude",
    "contrast",
    "vessel_shadow",
    "noise",
)
GEOMETRIC = frozenset({"hflip", "translate", "scale"})
RAW_ONLY = frozenset({"occlude", "contrast", "vessel_shadow", "noise"})
REF_SIZE = 512

DEFAULT_RANGES = {
    "identity_weight": 1.0,
    "translate_px": 16.0,
    "scale_min": 0.9,
    "scale_max": 1.1,
    "occlude_max_area": 0.15,
    "gamma_min": 0.7,
    "gamma_max": 1.4,
    "vessel_min_count": 1.0,
    "vessel_max_count": 4.0,
    "vessel_min_width_px": 4.0,
    "vessel_max_width_px": 12.0,
    "vessel_min_factor": 0.3,
    "vessel_max_factor": 0.7,
    "noise_max_sigma": 0.05,
}


@dataclass(frozen=True)
class AugmentOp:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown augmentation kind {self.kind!r}")

    @property
    def channel_scope(self) -> str:
        return "raw_only" if self.kind in RAW_ONLY else "all"


def _ranges(overrides: dict | None) -> dict:
    r = dict(DEFAULT_RANGES)
    for k, v in (overrides or {}).items():
        if k not in r:
            raise ValidationError(f"unknown augmentation setting {k!r}")
        r[k] = float(v)
    return r


def sample_op(rng: Rng, size: int = REF_SIZE, ranges: dict | None = None) -> AugmentOp:
    r = _ranges(ranges)
    weights = np.ones(len(KINDS))
    weights[0] = r["identity_weight"]
    cum = np.cumsum(weights) / weights.sum()
    kind = KINDS[min(int(np.searchsorted(cum, rng.next_f64(), side="right")), len(KINDS) - 1)]
    px = size / REF_SIZE

    if kind == "translate":
        t = int(round(r["translate_px"] * px))
        return AugmentOp(kind, {"dy": rng.integers(-t, t), "dx": rng.integers(-t, t)})
    if kind == "scale":
        return AugmentOp(kind, {"factor": rng.uniform(r["scale_min"], r["scale_max"])})
    if kind == "occlude":
        area = rng.uniform(0.01, r["occlude_max_area"]) * size * size
        aspect = rng.uniform(0.5, 2.0)
        h = int(min(size, max(1, np.floor(np.sqrt(area * aspect)))))
        w = int(min(size, max(1, np.floor(area / h))))
        return AugmentOp(
            kind, {"top": rng.integers(0, size - h), "left": rng.integers(0, size - w),
                   "height": h, "width": w}
        )
    if kind == "contrast":
        return AugmentOp(kind, {"gamma": rng.uniform(r["gamma_min"], r["gamma_max"])})
    if kind == "vessel_shadow":
        n = rng.integers(int(r["vessel_min_count"]), int(r["vessel_max_count"]))
        lo = max(1, int(round(r["vessel_min_width_px"] * px)))
        hi = max(lo, int(round(r["vessel_max_width_px"] * px)))
        vessels = []
        for _ in range(n):
            w = rng.integers(lo, hi)
            vessels.append((rng.integers(0, size - w), w,
                            rng.uniform(r["vessel_min_factor"], r["vessel_max_factor"])))
        return AugmentOp(kind, {"vessels": tuple(vessels)})
    if kind == "noise":
        return AugmentOp(kind, {"sigma": rng.uniform(0.0, r["noise_max_sigma"])})
    return AugmentOp(kind)


def _translate(x: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(x)
    h, w = x.shape[-2:]
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[..., yd, xd] = x[..., ys, xs]
    return out


def _scale(x: np.ndarray, factor: float) -> np.ndarray:
    """Nearest-neighbour zoom about the image centre, zero fill."""
    h, w = x.shape[-2:]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    src_r = round_half_up((np.arange(h) - cy) / factor + cy)
    src_c = round_half_up((np.arange(w) - cx) / factor + cx)
    ok = ((src_r >= 0) & (src_r < h))[:, None] & ((src_c >= 0) & (src_c < w))[None, :]
    out = x[..., np.clip(src_r, 0, h - 1)[:, None], np.clip(src_c, 0, w - 1)[None, :]]
    return np.where(ok, out, 0).astype(x.dtype)


def apply_array(op: AugmentOp, data: np.ndarray, rng: Rng | None = None) -> np.ndarray:
    """Apply ``op`` to a (3, S, S) channel stack; returns a new array."""
    k, p = op.kind, op.params
    if k == "identity":
        return data.copy()
    if k == "hflip":
        return data[..., ::-1].copy()
    if k == "translate":
        return _translate(data, int(p["dy"]), int(p["dx"]))
    if k == "scale":
        return _scale(data, float(p["factor"]))

    out = data.copy()
    raw = out[0].astype(np.float64)
    if k == "occlude":
        raw[p["top"]:p["top"] + p["height"], p["left"]:p["left"] + p["width"]] = 0.0
    elif k == "contrast":
        raw = np.clip(raw, 0.0, 1.0) ** p["gamma"]
    elif k == "vessel_shadow":
        shade = np.ones(raw.shape[1])
        for left, width, factor in p["vessels"]:
            shade[left:left + width] *= factor
        raw = raw * shade[None, :]
    elif k == "noise":
        if rng is None:
            raise ValidationError("noise augmentation needs an Rng")
        raw = raw + rng.gen.normal(0.0, p["sigma"], size=raw.shape)
    out[0] = np.clip(raw, 0.0, 1.0)
    return out


def apply(op: AugmentOp, comp: Composite, rng: Rng | None = None) -> Composite:
    return comp.with_data(apply_array(op, comp.data, rng))


def augment_array(data: np.ndarray, rng: Rng, ranges: dict | None = None) -> np.ndarray:
    return apply_array(sample_op(rng, data.shape[-1], ranges), data, rng)
