"""Density-map tests: exact mass conservation, order/translation invariance,
and the MAE metric against straightforward oracles.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtlcount.density import (DensityMap, DotAnnotations, estimate_count, mae,
                              render_density_map)
from dtlcount.errors import DataError


def annotations(points, w=64, h=64):
    return DotAnnotations(np.array(points, dtype=np.float64).reshape(-1, 2), w, h)


def test_empty_annotations_give_zero_map():
    d = render_density_map(annotations(np.zeros((0, 2))))
    assert d.values.shape == (64, 64)
    assert not d.values.any()
    assert estimate_count(d) == 0.0


def test_single_centered_cell_has_unit_mass():
    d = render_density_map(annotations([(32.0, 32.0)]))
    assert abs(estimate_count(d) - 1.0) < 1e-12
    assert d.values.min() >= 0.0
    # The peak sits at the annotated pixel.
    assert np.unravel_index(d.values.argmax(), d.values.shape) == (32, 32)


def test_border_clipped_cell_keeps_unit_mass():
    # Renormalization after clipping makes each cell integrate to exactly 1.
    for point in [(0.0, 0.0), (63.0, 0.0), (0.5, 62.5), (63.9, 63.9)]:
        d = render_density_map(annotations([point]))
        assert abs(estimate_count(d) - 1.0) < 1e-12


def test_integral_equals_count_random_sets():
    r = np.random.default_rng(7)
    for trial in range(25):
        k = int(r.integers(0, 60))
        pts = np.column_stack([r.uniform(0, 64, k), r.uniform(0, 48, k)])
        d = render_density_map(DotAnnotations(pts, 64, 48))
        assert abs(estimate_count(d) - k) < 1e-6, f"trial {trial}"


def test_rendering_is_permutation_invariant_bitwise():
    r = np.random.default_rng(8)
    pts = np.column_stack([r.uniform(0, 64, 30), r.uniform(0, 64, 30)])
    base = render_density_map(annotations(pts)).values
    for seed in range(5):
        shuffled = np.random.default_rng(seed).permutation(pts)
        again = render_density_map(annotations(shuffled)).values
        assert np.array_equal(base, again)


def test_rendering_is_translation_invariant():
    # Integer shifts far from any border move the footprint bitwise. The
    # fractional parts are powers of two so the shifted coordinates are
    # exactly representable.
    pt = (20.25, 22.5)
    a = render_density_map(annotations([pt], 96, 96)).values
    b = render_density_map(annotations([(pt[0] + 31, pt[1] + 17)], 96, 96)).values
    assert np.array_equal(a[10:36, 8:34], b[27:53, 39:65])


def test_sigma_controls_spread():
    tight = render_density_map(annotations([(32, 32)]), sigma=1.0).values
    wide = render_density_map(annotations([(32, 32)]), sigma=5.0).values
    assert tight.max() > wide.max()
    assert abs(tight.sum() - 1.0) < 1e-12 and abs(wide.sum() - 1.0) < 1e-12


def test_truncation_radius_limits_footprint():
    d = render_density_map(annotations([(32.0, 32.0)]), sigma=2.0).values
    # Nothing beyond ceil(4 * sigma) = 8 pixels from the center.
    assert d[32, 32 + 9] == 0.0 and d[32 + 9, 32] == 0.0
    assert d[32, 32 + 8] > 0.0


def test_values_are_float64():
    d = render_density_map(annotations([(5, 5)]))
    assert d.values.dtype == np.float64


def test_out_of_bounds_annotation_names_offender():
    with pytest.raises(DataError, match="annotation 1"):
        annotations([(5.0, 5.0), (64.0, 5.0)])
    with pytest.raises(DataError, match="annotation 0"):
        annotations([(-0.1, 5.0)])


def test_nonpositive_sigma_rejected():
    with pytest.raises(ValueError):
        render_density_map(annotations([(5, 5)]), sigma=0.0)


def test_mae_matches_hand_values():
    assert mae([3.0, 5.0], [1.0, 9.0]) == pytest.approx(3.0)
    assert mae([2.0], [2.0]) == 0.0


def test_mae_input_validation():
    with pytest.raises(DataError):
        mae([], [])
    with pytest.raises(DataError):
        mae([1.0, 2.0], [1.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=10),
       st.lists(st.floats(-100, 100), min_size=1, max_size=10))
def test_mae_symmetry_and_nonnegativity(a, b):
    n = min(len(a), len(b))
    a, b = a[:n], b[:n]
    assert mae(a, b) == pytest.approx(mae(b, a))
    assert mae(a, b) >= 0.0
    assert mae(a, a) == 0.0


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=6),
       st.lists(st.floats(-50, 50), min_size=2, max_size=6),
       st.lists(st.floats(-50, 50), min_size=2, max_size=6))
def test_mae_triangle_inequality(a, b, c):
    n = min(len(a), len(b), len(c))
    a, b, c = a[:n], b[:n], c[:n]
    assert mae(a, c) <= mae(a, b) + mae(b, c) + 1e-9


def test_density_map_dataclass_coerces_dtype():
    d = DensityMap(np.zeros((4, 4), dtype=np.float32))
    assert d.values.dtype == np.float64
    assert d.sigma == 3.0
