"""Synthetic layered B-scans with known boundary contours.

Depth runs down the rows (``H`` = 650 by default), lateral position across the
columns (``W`` = 512). Eleven boundaries delimit ten layers; layer ``k`` is the
band between boundary ``k`` and ``k + 1`` and is named after its lower
boundary, so ``"IS/OSJ"`` is the band from BMEIS down to IS/OSJ.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .store import (
    Manifest,
    Rng,
    SubjectRecord,
    ValidationError,
    read_tensor,
    save_manifest,
    write_tensor,
)

BOUNDARY_NAMES = (
    "ILM",
    "RNFL-GCL",
    "GCL-IPL",
    "IPL-INL",
    "INL-OPL",
    "OPL-HFL",
    "BMEIS",
    "IS/OSJ",
    "IB_OPR",
    "IB_RPE",
    "OB_RPE",
)
LAYER_NAMES = BOUNDARY_NAMES[1:]
N_BOUNDARIES = len(BOUNDARY_NAMES)
N_LAYERS = len(LAYER_NAMES)

# boundaries displaced by the foveal pit, weight falling linearly to zero
_PIT_BOUNDARIES = 6


class InvalidSpecError(ValidationError):
    pass


@dataclass(frozen=True)
class Signal:
    target_layer: str = "IS/OSJ"
    thinning_fraction: float = 0.0
    region: str = "central_subfield"
    subfield_halfwidth: int = 42


@dataclass(frozen=True)
class PhantomSpec:
    H: int = 650
    W: int = 512
    ilm_depth: float = 180.0
    layer_thickness: tuple[float, ...] = (35, 30, 28, 28, 20, 55, 40, 18, 16, 22)
    layer_base_intensity: tuple[float, ...] = (
        30000, 18000, 24000, 12000, 22000, 9000, 34000, 16000, 26000, 40000,
    )
    background_intensity: float = 1500.0
    foveal_pit_depth: float = 45.0
    foveal_pit_width: float = 40.0
    pit_depth_jitter: float = 5.0
    curvature_amplitude: float = 3.0
    boundary_jitter: float = 1.5
    thickness_jitter: float = 0.03
    speckle_sigma: float = 0.35
    signal: Signal = Signal()
    label: str = "CN"

    def replace(self, **changes) -> "PhantomSpec":
        return dataclasses.replace(self, **changes)

    def with_signal(self, **changes) -> "PhantomSpec":
        return dataclasses.replace(self, signal=dataclasses.replace(self.signal, **changes))


def geometry_only_spec(base: PhantomSpec | None = None) -> PhantomSpec:
    """All layers share one intensity, so the raw image shows only the band
    outline; a wide spread of foveal pit depths masks the total-thickness
    change, leaving the internal contours as the only reliable cue."""
    base = base or PhantomSpec()
    return base.replace(
        layer_base_intensity=(20000.0,) * N_LAYERS,
        foveal_pit_depth=50.0,
        pit_depth_jitter=35.0,
    )


@dataclass(frozen=True)
class BScan:
    pixels: np.ndarray  # (H, W) uint16, rows = depth
    contours: np.ndarray  # (11, W) float64 row positions

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


def validate_segmentation(contours: np.ndarray, H: int | None = None) -> None:
    c = np.asarray(contours)
    if c.ndim != 2 or c.shape[0] != N_BOUNDARIES:
        raise ValidationError(f"segmentation must be (11, W), got {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValidationError("segmentation has non-finite values")
    if np.any(np.diff(c, axis=0) < 0):
        raise ValidationError("boundaries are not monotonically non-decreasing in depth")
    if H is not None and (c.min() < 0 or c.max() >= H):
        raise ValidationError("contour values outside [0, H)")


def layer_index_map(contours: np.ndarray, H: int) -> np.ndarray:
    """Per-pixel layer index in 0..9, -1 above ILM and 10 at/below OB_RPE.

    Layer k holds rows r with boundary_k <= r < boundary_{k+1}.
    """
    rows = np.arange(H, dtype=np.float64)[None, :, None]
    return (contours[:, None, :] <= rows).sum(axis=0).astype(np.int64) - 1


def _check_spec(spec: PhantomSpec) -> None:
    if len(spec.layer_thickness) != N_LAYERS or len(spec.layer_base_intensity) != N_LAYERS:
        raise InvalidSpecError("need 10 layer thicknesses and 10 base intensities")
    if min(spec.layer_thickness) < 0:
        raise InvalidSpecError("layer thickness must be >= 0")
    if spec.label not in ("AD", "CN"):
        raise InvalidSpecError(f"label must be AD or CN, got {spec.label!r}")
    s = spec.signal
    if s.target_layer not in LAYER_NAMES:
        raise InvalidSpecError(f"unknown target layer {s.target_layer!r}")
    if s.region not in ("global", "central_subfield"):
        raise InvalidSpecError(f"unknown signal region {s.region!r}")
    if not 0.0 <= s.thinning_fraction < 1.0:
        raise InvalidSpecError("thinning_fraction must lie in [0, 1)")
    if spec.speckle_sigma < 0:
        raise InvalidSpecError("speckle_sigma must be >= 0")


def _cosines(rng: Rng, W: int, amplitude: float, n_terms: int) -> np.ndarray:
    c = np.arange(W, dtype=np.float64)
    out = np.zeros(W)
    for m in range(1, n_terms + 1):
        a = rng.uniform(-amplitude, amplitude) / m
        phase = rng.uniform(0.0, 2 * np.pi)
        out += a * np.cos(2 * np.pi * m * c / W + phase)
    return out


def make_contours(spec: PhantomSpec, rng: Rng) -> np.ndarray:
    """Boundary curves for one scan; every random draw happens before the
    class signal is applied, so AD and CN differ only by the thinning."""
    W = spec.W
    cols = np.arange(W, dtype=np.float64)
    thick = np.array(
        [t * (1.0 + spec.thickness_jitter * rng.uniform(-1.0, 1.0)) for t in spec.layer_thickness]
    )
    depth = spec.ilm_depth + np.concatenate([[0.0], np.cumsum(thick)])
    shared = _cosines(rng, W, spec.curvature_amplitude, 3)
    b = depth[:, None] + shared[None, :]
    for j in range(N_BOUNDARIES):
        b[j] += _cosines(rng, W, spec.boundary_jitter, 2)
    pit_depth = max(0.0, spec.foveal_pit_depth + spec.pit_depth_jitter * rng.uniform(-1.0, 1.0))
    if spec.foveal_pit_width > 0:
        g = np.exp(-((cols - W / 2) ** 2) / (2 * spec.foveal_pit_width**2))
        for j in range(_PIT_BOUNDARIES):
            b[j] += pit_depth * (_PIT_BOUNDARIES - 1 - j) / (_PIT_BOUNDARIES - 1) * g
    b = np.maximum.accumulate(b, axis=0)

    if spec.label == "AD" and spec.signal.thinning_fraction > 0:
        k = LAYER_NAMES.index(spec.signal.target_layer)
        if spec.signal.region == "global":
            region = np.ones(W)
        else:
            region = (np.abs(cols - W / 2) <= spec.signal.subfield_halfwidth).astype(np.float64)
        shift = spec.signal.thinning_fraction * (b[k + 1] - b[k]) * region
        b[k + 1:] -= shift[None, :]
        if np.any(np.diff(b, axis=0) < 0):
            raise InvalidSpecError("thinning would break contour monotonicity")

    if b.min() < 0 or b.max() > spec.H - 1:
        raise InvalidSpecError("contours leave the image; adjust ilm_depth or thicknesses")
    return b


def render(spec: PhantomSpec, contours: np.ndarray, rng: Rng) -> np.ndarray:
    idx = layer_index_map(contours, spec.H)
    levels = np.concatenate(
        [[spec.background_intensity], np.asarray(spec.layer_base_intensity, float),
         [spec.background_intensity]]
    )
    img = levels[idx + 1]
    if spec.speckle_sigma > 0:
        img = img * rng.gen.lognormal(0.0, spec.speckle_sigma, size=img.shape)
    return np.clip(np.rint(img), 0, 65535).astype(np.uint16)


def generate_bscan(spec: PhantomSpec, rng: Rng) -> BScan:
    _check_spec(spec)
    contours = make_contours(spec, rng)
    pixels = render(spec, contours, rng)
    return BScan(pixels=pixels, contours=contours)


def _eye_plan(n_scans: int, rng: Rng, reserve=lambda remaining: 0) -> list[int]:
    """Split ``n_scans`` into subjects of 1 or 2 eyes."""
    eyes = []
    left = n_scans
    while left > 0:
        two = left >= 2 and left - 2 >= reserve(len(eyes) + 1) and rng.next_f64() < 0.5
        eyes.append(2 if two else 1)
        left -= eyes[-1]
    return eyes


def generate_cohort(
    n_ad: int,
    n_cn: int,
    spec_template: PhantomSpec,
    rng: Rng,
    out_dir,
    year_cap: float = 4.0,
) -> Manifest:
    """Write ``n_ad + n_cn`` scans under ``out_dir`` plus ``manifest.csv``.

    Control subjects copy the age, sex and instance of the AD subjects in
    turn, so exact matching is always possible when there are at least as
    many control subjects as AD subjects.
    """
    if n_ad < 1 or n_cn < 1:
        raise ValidationError("n_ad and n_cn must be >= 1")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    demo_rng = rng.child(0)

    ad_eyes = _eye_plan(n_ad, demo_rng)
    n_ad_subj = len(ad_eyes)
    cn_eyes = _eye_plan(n_cn, demo_rng, reserve=lambda made: max(0, n_ad_subj - made))

    subjects = []
    for i, n_eyes in enumerate(ad_eyes):
        demo = (demo_rng.integers(55, 80), "F" if demo_rng.next_f64() < 0.5 else "M",
                demo_rng.integers(0, 1))
        years = demo_rng.uniform(0.0, year_cap)
        subjects.append(("AD", n_eyes, demo, years))
    for i, n_eyes in enumerate(cn_eyes):
        demo = subjects[i % n_ad_subj][2]
        subjects.append(("CN", n_eyes, demo, None))

    records = []
    scan_no = 0
    for s_idx, (label, n_eyes, (age, sex, inst), years) in enumerate(subjects):
        sid = f"S{s_idx + 1:04d}"
        eyes = ("L", "R") if n_eyes == 2 else (("L",) if demo_rng.next_f64() < 0.5 else ("R",))
        for eye in eyes:
            spec = spec_template.replace(label=label)
            scan = generate_bscan(spec, rng.child(1, scan_no))
            scan_no += 1
            rel = f"images/{sid}_{eye}_{inst}.oct"
            write_tensor(out_dir / rel, scan.pixels)
            write_tensor(out_dir / (rel + ".seg"), scan.contours.astype(np.float32))
            records.append(SubjectRecord(sid, eye, age, sex, inst, years, label, rel))
    manifest = Manifest(tuple(records))
    save_manifest(out_dir / "manifest.csv", manifest)
    return manifest


def load_bscan(image_path) -> BScan:
    pixels = read_tensor(image_path)
    contours = read_tensor(str(image_path) + ".seg").astype(np.float64)
    return BScan(pixels=pixels, contours=contours)
