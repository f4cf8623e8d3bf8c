import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from octad import cohort as co
from octad.phantom import (
    LAYER_NAMES,
    InvalidSpecError,
    PhantomSpec,
    generate_bscan,
    generate_cohort,
    geometry_only_spec,
    layer_index_map,
    load_bscan,
    validate_segmentation,
)
from octad.store import Rng, load_manifest, parse_manifest, serialize_manifest

FLAT = PhantomSpec(speckle_sigma=0.0, curvature_amplitude=0.0, boundary_jitter=0.0,
                   thickness_jitter=0.0, foveal_pit_depth=0.0, pit_depth_jitter=0.0)
SIGNAL_LAYER = LAYER_NAMES.index("IS/OSJ")


def central(spec, contours):
    cols = np.arange(spec.W)
    return np.abs(cols - spec.W / 2) <= spec.signal.subfield_halfwidth


class TestGenerateBscan:
    def test_shapes_and_dtype(self):
        b = generate_bscan(PhantomSpec(), Rng(0))
        assert b.pixels.shape == (650, 512) and b.pixels.dtype == np.uint16
        assert b.contours.shape == (11, 512)
        validate_segmentation(b.contours, 650)

    def test_noise_free_is_piecewise_constant(self):
        b = generate_bscan(FLAT, Rng(0))
        idx = layer_index_map(b.contours, FLAT.H)
        levels = np.array((FLAT.background_intensity,) + FLAT.layer_base_intensity
                          + (FLAT.background_intensity,))
        assert np.array_equal(b.pixels, levels[idx + 1].astype(np.uint16))
        thick = np.diff(b.contours, axis=0)
        assert np.allclose(thick, np.array(FLAT.layer_thickness)[:, None], atol=0.5)

    def test_noise_free_pixel_counts_per_layer(self):
        b = generate_bscan(FLAT, Rng(1))
        for k, t in enumerate(FLAT.layer_thickness):
            col = b.pixels[:, 0]
            assert np.sum(col == FLAT.layer_base_intensity[k]) == t

    def test_thinning_in_central_subfield(self):
        cn = PhantomSpec().with_signal(thinning_fraction=0.3)
        ad = cn.replace(label="AD")
        c_cn = generate_bscan(cn, Rng(11)).contours
        c_ad = generate_bscan(ad, Rng(11)).contours
        sel = central(cn, c_cn)
        t_cn = (c_cn[SIGNAL_LAYER + 1] - c_cn[SIGNAL_LAYER])[sel].mean()
        t_ad = (c_ad[SIGNAL_LAYER + 1] - c_ad[SIGNAL_LAYER])[sel].mean()
        assert abs(t_ad - 0.7 * t_cn) <= 0.5
        # outside the subfield nothing moves
        assert np.array_equal(c_ad[:, ~sel], c_cn[:, ~sel])

    def test_global_region(self):
        cn = PhantomSpec().with_signal(thinning_fraction=0.5, region="global")
        c_cn = generate_bscan(cn, Rng(2)).contours
        c_ad = generate_bscan(cn.replace(label="AD"), Rng(2)).contours
        t = lambda c: c[SIGNAL_LAYER + 1] - c[SIGNAL_LAYER]  # noqa: E731
        assert np.allclose(t(c_ad), 0.5 * t(c_cn))

    def test_thinning_never_applied_to_cn(self):
        spec = PhantomSpec().with_signal(thinning_fraction=0.6)
        a = generate_bscan(spec, Rng(4))
        b = generate_bscan(spec.with_signal(thinning_fraction=0.0), Rng(4))
        assert np.array_equal(a.pixels, b.pixels)

    def test_null_signal_ad_equals_cn(self):
        spec = PhantomSpec().with_signal(thinning_fraction=0.0)
        a = generate_bscan(spec, Rng(8))
        b = generate_bscan(spec.replace(label="AD"), Rng(8))
        assert np.array_equal(a.pixels, b.pixels) and np.array_equal(a.contours, b.contours)

    def test_deterministic(self):
        a = generate_bscan(PhantomSpec(), Rng(3))
        b = generate_bscan(PhantomSpec(), Rng(3))
        assert np.array_equal(a.pixels, b.pixels)

    def test_background_outside_retina_is_dim(self):
        b = generate_bscan(FLAT, Rng(0))
        assert b.pixels[0].max() == FLAT.background_intensity

    @pytest.mark.parametrize("kw", [
        {"label": "XX"}, {"layer_thickness": (1.0,) * 9}, {"speckle_sigma": -1.0},
    ])
    def test_invalid_spec(self, kw):
        with pytest.raises(InvalidSpecError):
            generate_bscan(PhantomSpec().replace(**kw), Rng(0))

    @pytest.mark.parametrize("frac", [1.0, -0.1])
    def test_invalid_thinning(self, frac):
        with pytest.raises(InvalidSpecError):
            generate_bscan(PhantomSpec(label="AD").with_signal(thinning_fraction=frac), Rng(0))

    def test_unknown_target_layer(self):
        with pytest.raises(InvalidSpecError):
            generate_bscan(PhantomSpec().with_signal(target_layer="ILM"), Rng(0))

    @settings(max_examples=100, deadline=None)
    @given(
        seed=st.integers(0, 2**32),
        frac=st.floats(0.0, 0.95),
        curv=st.floats(0.0, 20.0),
        jit=st.floats(0.0, 3.0),
        tj=st.floats(0.0, 0.2),
        label=st.sampled_from(["AD", "CN"]),
        region=st.sampled_from(["global", "central_subfield"]),
        layer=st.sampled_from(LAYER_NAMES),
    )
    def test_monotone_contours(self, seed, frac, curv, jit, tj, label, region, layer):
        spec = PhantomSpec(curvature_amplitude=curv, boundary_jitter=jit, thickness_jitter=tj,
                           label=label, speckle_sigma=0.0).with_signal(
            thinning_fraction=frac, region=region, target_layer=layer)
        b = generate_bscan(spec, Rng(seed))
        assert np.all(np.diff(b.contours, axis=0) >= 0)
        assert np.all(np.isfinite(b.contours))
        assert b.contours.min() >= 0 and b.contours.max() < spec.H


class TestGenerateCohort:
    def test_dataset_scale(self, tmp_path):
        m = generate_cohort(28, 30, PhantomSpec(), Rng(0), tmp_path)
        assert len(m) == 58
        assert sum(r.is_ad for r in m) == 28
        assert all(0.0 <= r.years_to_diagnosis <= 4.0 for r in m if r.is_ad)
        assert parse_manifest(serialize_manifest(m)) == m
        assert load_manifest(tmp_path / "manifest.csv") == m

    def test_minimal(self, tmp_path):
        m = generate_cohort(1, 1, PhantomSpec(), Rng(1), tmp_path)
        assert len(m) == 2 and {r.label for r in m} == {"AD", "CN"}

    def test_images_on_disk(self, tmp_path):
        m = generate_cohort(2, 2, PhantomSpec(), Rng(2), tmp_path)
        for r in m:
            b = load_bscan(tmp_path / r.image_path)
            assert b.pixels.shape == (650, 512)
            validate_segmentation(b.contours, 650)

    def test_one_or_two_eyes(self, tmp_path):
        m = generate_cohort(10, 10, PhantomSpec(), Rng(3), tmp_path)
        sizes = {len(v) for v in m.by_subject().values()}
        assert sizes <= {1, 2}

    def test_exact_matching_possible(self, tmp_path):
        m = generate_cohort(28, 30, PhantomSpec(), Rng(5), tmp_path)
        spec = co.CohortSpec(max_age_tolerance=0)
        matched = co.match_controls(m, spec)
        assert sum(r.is_ad for r in matched) == 28

    def test_rejects_empty(self, tmp_path):
        with pytest.raises(ValueError):
            generate_cohort(0, 3, PhantomSpec(), Rng(0), tmp_path)


def test_geometry_preset_has_uniform_intensity():
    spec = geometry_only_spec()
    assert len(set(spec.layer_base_intensity)) == 1
