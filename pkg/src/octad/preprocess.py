"""Raw B-scan to 3-channel model input.

Pipeline order is rectify -> strip_background -> crop_center -> assemble,
optionally followed by :func:`downsample` for reduced-resolution profiles.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .phantom import N_BOUNDARIES, N_LAYERS, BScan, layer_index_map, load_bscan
from .store import (
    CHANNEL_MODES,
    Manifest,
    ValidationError,
    read_tensor,
    save_manifest,
    write_tensor,
)

DEFAULT_GAINS = tuple(1.0 + k / 10.0 for k in range(N_LAYERS))
CROP_SIZE = 512


def round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


@dataclass(frozen=True)
class Composite:
    data: np.ndarray  # (3, S, S) float32
    contours: np.ndarray  # (11, S) float64, composite coordinates

    @property
    def ch_raw(self) -> np.ndarray:
        return self.data[0]

    @property
    def ch_mask(self) -> np.ndarray:
        return self.data[1]

    @property
    def ch_contour(self) -> np.ndarray:
        return self.data[2]

    @property
    def size(self) -> int:
        return self.data.shape[-1]

    def with_data(self, data: np.ndarray) -> "Composite":
        return Composite(data=data, contours=self.contours)


def rectify(b: BScan) -> BScan:
    """Shift each column down so OB_RPE sits on the deepest rounded OB_RPE row."""
    H, W = b.pixels.shape
    bottom = round_half_up(b.contours[-1])
    shift = bottom.max() - bottom
    src = np.arange(H)[:, None] - shift[None, :]
    cols = np.broadcast_to(np.arange(W), (H, W))
    out = np.where(src >= 0, b.pixels[np.clip(src, 0, H - 1), cols], 0).astype(b.pixels.dtype)
    return BScan(pixels=out, contours=b.contours + shift[None, :])


def strip_background(b: BScan) -> BScan:
    H = b.pixels.shape[0]
    rows = np.arange(H)[:, None]
    keep = (rows >= b.contours[0][None, :]) & (rows <= b.contours[-1][None, :])
    return BScan(pixels=np.where(keep, b.pixels, 0).astype(b.pixels.dtype), contours=b.contours)


def crop_center(b: BScan, out_h: int = CROP_SIZE, out_w: int = CROP_SIZE) -> BScan:
    H, W = b.pixels.shape
    if H < out_h or W < out_w:
        raise ValidationError(f"cannot crop {H}x{W} to {out_h}x{out_w}")
    r0 = (H - out_h) // 2
    c0 = (W - out_w) // 2
    pixels = b.pixels[r0:r0 + out_h, c0:c0 + out_w].copy()
    return BScan(pixels=pixels, contours=b.contours[:, c0:c0 + out_w] - r0)


def retina_layer_map(contours: np.ndarray, H: int) -> np.ndarray:
    """Layer index 0..9 per pixel (-1 outside); the deepest layer also owns
    the OB_RPE row so the support equals that of :func:`strip_background`."""
    idx = layer_index_map(contours, H)
    rows = np.arange(H)[:, None]
    on_bottom = (idx == N_LAYERS) & (rows <= contours[-1][None, :])
    idx[on_bottom] = N_LAYERS - 1
    idx[idx == N_LAYERS] = -1
    return idx


def make_layer_mask(b: BScan, gains=DEFAULT_GAINS, renormalize: bool = True) -> np.ndarray:
    gains = np.asarray(gains, dtype=np.float64)
    if gains.shape != (N_LAYERS,):
        raise ValidationError("need one gain per layer")
    idx = retina_layer_map(b.contours, b.pixels.shape[0])
    g = np.where(idx >= 0, gains[np.clip(idx, 0, None)], 0.0)
    mask = b.pixels.astype(np.float64) * g
    if renormalize:
        peak = mask.max()
        mask = mask / peak if peak > 0 else np.zeros_like(mask)
    return mask.astype(np.float32)


def make_contour_channel(b: BScan) -> np.ndarray:
    H, W = b.pixels.shape
    out = np.zeros((H, W), dtype=np.float32)
    rows = round_half_up(b.contours)
    cols = np.broadcast_to(np.arange(W), rows.shape)
    ok = (rows >= 0) & (rows < H)
    out[rows[ok], cols[ok]] = 1.0
    return out


def normalize_minmax(pixels: np.ndarray) -> np.ndarray:
    x = pixels.astype(np.float64)
    lo, hi = x.min(), x.max()
    if hi <= lo:
        return np.zeros(x.shape, dtype=np.float32)
    return ((x - lo) / (hi - lo)).astype(np.float32)


def assemble(b: BScan, mode: str = "composite", gains=DEFAULT_GAINS) -> Composite:
    if mode not in CHANNEL_MODES:
        raise ValidationError(f"unknown channel mode {mode!r}")
    if mode == "raw3":
        ch = normalize_minmax(b.pixels)
        data = np.stack([ch, ch, ch])
    elif mode == "mask3":
        ch = make_layer_mask(b, gains)
        data = np.stack([ch, ch, ch])
    elif mode == "contour3":
        ch = make_contour_channel(b)
        data = np.stack([ch, ch, ch])
    else:
        data = np.stack(
            [normalize_minmax(b.pixels), make_layer_mask(b, gains), make_contour_channel(b)]
        )
    return Composite(data=data.astype(np.float32), contours=b.contours.copy())


def _binary_channels(mode: str) -> np.ndarray:
    if mode == "contour3":
        return np.array([True, True, True])
    if mode == "composite":
        return np.array([False, False, True])
    return np.array([False, False, False])


def downsample(comp: Composite, size: int, mode: str = "composite") -> Composite:
    """Block-average intensity channels, block-max the binary contour channels."""
    S = comp.size
    if size == S:
        return comp
    if S % size:
        raise ValidationError(f"size {size} does not divide {S}")
    f = S // size
    blocks = comp.data.reshape(3, size, f, size, f)
    mean = blocks.mean(axis=(2, 4))
    peak = blocks.max(axis=(2, 4))
    binary = _binary_channels(mode)
    data = np.where(binary[:, None, None], peak, mean).astype(np.float32)
    cols = comp.contours.reshape(N_BOUNDARIES, size, f).mean(axis=2)
    return Composite(data=data, contours=(cols - (f - 1) / 2.0) / f)


def preprocess_bscan(b: BScan, mode: str = "composite", size: int = CROP_SIZE) -> Composite:
    b = crop_center(strip_background(rectify(b)))
    return downsample(assemble(b, mode), size, mode)


def save_composite(path, comp: Composite) -> None:
    write_tensor(path, comp.data.astype(np.float32))
    write_tensor(str(path) + ".seg", comp.contours.astype(np.float32))


def load_composite(path) -> Composite:
    data = read_tensor(path)
    if data.ndim != 3 or data.shape[0] != 3:
        raise ValidationError(f"{path}: expected a 3xSxS composite, got {data.shape}")
    contours = read_tensor(str(path) + ".seg").astype(np.float64)
    return Composite(data=data, contours=contours)


def preprocess_manifest(
    manifest: Manifest, root, out_dir, mode: str = "composite", size: int = CROP_SIZE
) -> Manifest:
    """Preprocess every scan listed in ``manifest`` (paths relative to ``root``)
    and write the composites plus a manifest pointing at them."""
    root, out_dir = Path(root), Path(out_dir)
    (out_dir / "composites").mkdir(parents=True, exist_ok=True)
    rows = []
    for r in manifest:
        comp = preprocess_bscan(load_bscan(root / r.image_path), mode, size)
        rel = f"composites/{Path(r.image_path).stem}.oct"
        save_composite(out_dir / rel, comp)
        rows.append(replace(r, image_path=rel))
    out = Manifest(tuple(rows))
    save_manifest(out_dir / "manifest.csv", out)
    return out
