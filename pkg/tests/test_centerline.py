import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hivenet.centerline import (
    CenterlineSet,
    ProximityConfig,
    denormalize_proximity,
    distance_transform,
    normalize_proximity,
    proximity_map,
    proximity_target,
    read_centerlines,
    write_centerlines,
)

from oracles import edt_brute, proximity_ref


def test_three_four_five():
    d = distance_transform((1, 4, 5), CenterlineSet([(0, 0, 0)]))
    assert d[0, 3, 4] == 5.0
    assert d[0, 0, 0] == 0.0


def test_empty_centerline_is_infinite_and_map_zero():
    d = distance_transform((3, 4, 5), CenterlineSet())
    assert np.all(np.isinf(d))
    assert not proximity_map(d).any()


def test_out_of_bounds():
    with pytest.raises(ValueError, match="outside"):
        distance_transform((4, 4, 4), CenterlineSet([(0, 4, 0)]))


@pytest.mark.parametrize("seed", range(50))
def test_edt_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    dims = tuple(int(v) for v in rng.integers(3, 21, size=3))
    m = int(rng.integers(1, 12))
    coords = np.stack([rng.integers(0, s, m) for s in dims], axis=1)
    np.testing.assert_allclose(distance_transform(dims, CenterlineSet(coords)),
                               edt_brute(dims, coords), rtol=0, atol=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_edt_anisotropic_spacing(seed):
    rng = np.random.default_rng(100 + seed)
    dims = (6, 9, 8)
    coords = np.stack([rng.integers(0, s, 4) for s in dims], axis=1)
    spacing = (2.5, 1.0, 0.7)
    np.testing.assert_allclose(distance_transform(dims, CenterlineSet(coords, spacing)),
                               edt_brute(dims, coords, spacing), atol=1e-9)


def test_proximity_values():
    cfg = ProximityConfig()
    m = proximity_map(np.array([0.0, 5.0, 15.0, 20.0]), cfg)
    assert m[0] == pytest.approx(math.e ** 3 - 1, abs=1e-12)
    assert m[1] == pytest.approx(math.e ** 2 - 1, abs=1e-12)
    assert m[2] == 0.0 and m[3] == 0.0
    assert cfg.peak == pytest.approx(19.0855369, abs=1e-6)


def test_proximity_matches_reference():
    d = np.linspace(0, 20, 401)
    np.testing.assert_allclose(proximity_map(d), proximity_ref(d), atol=1e-12)


def test_proximity_rejects_negative():
    with pytest.raises(ValueError):
        proximity_map(np.array([-1.0]))


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 14.99), st.floats(1e-3, 5))
def test_proximity_strictly_decreasing(d, step):
    a, b = proximity_map(np.array([d, min(d + step, 14.999)]))
    if d + step < 15:
        assert a > b
    assert 0 <= b <= a <= ProximityConfig().peak


def test_normalize():
    cfg = ProximityConfig()
    assert normalize_proximity(cfg.peak) == 1.0
    assert normalize_proximity(0.0) == 0.0
    assert normalize_proximity(math.e ** 2 - 1) == pytest.approx((math.e ** 2 - 1) / (math.e ** 3 - 1), abs=1e-15)
    assert normalize_proximity(math.e ** 2 - 1) == pytest.approx(0.33476, abs=1e-5)
    m = np.array([0.0, 3.0, 19.0])
    np.testing.assert_allclose(denormalize_proximity(normalize_proximity(m)), m, rtol=1e-15)


@pytest.mark.parametrize("offset", [(1, 2, 3), (0, -2, 1)])
def test_translation_equivariance(offset):
    base = CenterlineSet([(8, 10, 10), (9, 11, 12), (6, 8, 9)])
    dims = (40, 40, 40)
    a = proximity_target(dims, base.shifted((10, 10, 10)))
    b = proximity_target(dims, base.shifted(np.add((10, 10, 10), offset)))
    np.testing.assert_allclose(np.roll(a, offset, axis=(0, 1, 2))[5:-5, 5:-5, 5:-5],
                               b[5:-5, 5:-5, 5:-5], atol=0)


def test_side_file_round_trip(tmp_path):
    c = CenterlineSet([(1, 2, 3), (4, 5, 6)], spacing=(2.0, 1.0, 1.0))
    path = tmp_path / "c.txt"
    write_centerlines(path, c, comment="two voxels")
    r = read_centerlines(path)
    assert np.array_equal(r.coords, c.coords) and r.spacing == (2.0, 1.0, 1.0)
    assert read_centerlines(path, spacing=(1, 1, 1)).spacing == (1.0, 1.0, 1.0)


def test_side_file_errors(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("# header\n1 2\n")
    with pytest.raises(ValueError, match=":2:"):
        read_centerlines(p)
    p.write_text("1 2 x\n")
    with pytest.raises(ValueError):
        read_centerlines(p)
