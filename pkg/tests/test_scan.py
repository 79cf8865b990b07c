import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qelab.errors import InvalidInputError
from qelab.scan import (BINOMIAL_KERNEL, DetectionParams, ScanImage, detect, group_pixels,
                        select_bright_pixels, smooth)
from qelab.sim import simulate_scan


def brute_force_components(mask):
    """All-pairs 8-connectivity: flood fill where adjacency is tested against every pixel."""
    pts = np.argwhere(mask)
    unseen = np.ones(len(pts), bool)
    groups = []
    for start in range(len(pts)):
        if not unseen[start]:
            continue
        unseen[start] = False
        todo, members = [start], set()
        while todo:
            i = todo.pop()
            members.add(tuple(int(v) for v in pts[i]))
            adj = np.abs(pts - pts[i]).max(axis=1) == 1
            new = np.nonzero(adj & unseen)[0]
            unseen[new] = False
            todo.extend(new.tolist())
        groups.append(frozenset(members))
    return sorted(groups, key=sorted)


def random_masks(n, shape=(64, 64), seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        yield rng.random(shape) < rng.uniform(0.02, 0.5)


def test_smooth_uniform_and_zero():
    img = ScanImage(np.full((7, 5), 3.5))
    np.testing.assert_allclose(smooth(img).counts, 3.5, rtol=0, atol=1e-12)
    assert not smooth(ScanImage(np.zeros((4, 4)))).counts.any()


def test_smooth_binomial_impulse():
    a = np.zeros((5, 5))
    a[2, 2] = 16
    out = smooth(ScanImage(a), BINOMIAL_KERNEL).counts
    np.testing.assert_array_equal(out[1:4, 1:4], [[1, 2, 1], [2, 4, 2], [1, 2, 1]])
    assert out.sum() == 16


def test_smooth_empty_image_rejected():
    with pytest.raises(InvalidInputError):
        smooth(ScanImage(np.zeros((0, 0))))


def test_uniform_image_selects_nothing():
    img = ScanImage(np.full((30, 30), 7.0))
    assert not select_bright_pixels(img, DetectionParams(5, 2.5)).any()


def test_center_pixel_rule():
    a = np.full((9, 9), 10.0)
    a[4, 4] = 100.0
    mask = select_bright_pixels(ScanImage(a), DetectionParams(2, 2.5))
    assert mask.sum() == 1 and mask[4, 4]


def test_border_band_never_marked():
    n = 3
    a = np.ones((15, 15))
    a[n - 1, 7] = 1000.0
    a[7, n] = 1000.0
    mask = select_bright_pixels(ScanImage(a), DetectionParams(n, 2.5))
    assert not mask[n - 1, 7]
    assert mask[7, n]


def test_n_too_large():
    with pytest.raises(InvalidInputError):
        select_bright_pixels(ScanImage(np.ones((10, 12))), DetectionParams(5, 2.5))


def test_params_validation():
    with pytest.raises(InvalidInputError):
        DetectionParams(0, 2.5)
    with pytest.raises(InvalidInputError):
        DetectionParams(10, 1.0)
    with pytest.raises(InvalidInputError):
        DetectionParams(10, 2.5, np.ones((3, 3)))


def test_grouping_examples():
    m = np.zeros((5, 5), bool)
    m[1, 1] = m[2, 2] = True
    assert len(group_pixels(m)) == 1
    assert group_pixels(np.zeros((5, 5), bool)) == []
    m = np.zeros((5, 5), bool)
    m[2, 0] = m[2, 2] = True
    assert len(group_pixels(m)) == 2


def test_seed_is_brightest_member_with_tie_break():
    m = np.zeros((4, 4), bool)
    m[1, 1:4] = True
    b = np.zeros((4, 4))
    b[1, 2] = b[1, 3] = 5.0
    (cand,) = group_pixels(m, b)
    assert cand.seed_pixel == (1, 2)
    assert cand.seed_brightness == 5.0
    assert cand.seed_pixel in cand.member_pixels


def test_grouping_matches_brute_force():
    for mask in random_masks(100):
        got = sorted((c.member_pixels for c in group_pixels(mask)), key=sorted)
        assert got == brute_force_components(mask)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_components_partition_mask(seed):
    mask = np.random.default_rng(seed).random((32, 32)) < 0.3
    cands = group_pixels(mask)
    members = [p for c in cands for p in c.member_pixels]
    assert len(members) == len(set(members)) == mask.sum()
    seeds = [c.seed_pixel for c in cands]
    assert seeds == sorted(seeds)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1.1, 3.0), st.floats(0.0, 3.0))
def test_mask_monotone_in_a(seed, a1, extra):
    img = ScanImage(np.random.default_rng(seed).gamma(0.5, 10.0, (40, 40)))
    m1 = select_bright_pixels(img, DetectionParams(4, a1))
    m2 = select_bright_pixels(img, DetectionParams(4, a1 + extra))
    assert not (m2 & ~m1).any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_masking_a_mask_gives_subset(seed):
    img = ScanImage(np.random.default_rng(seed).gamma(0.3, 10.0, (40, 40)))
    p = DetectionParams(3, 2.0)
    m = select_bright_pixels(img, p)
    m2 = select_bright_pixels(ScanImage(m.astype(float)), p)
    assert not (m2 & ~m).any()


@settings(max_examples=20, deadline=None)
@given(st.integers(-5, 5), st.integers(-5, 5))
def test_translation_equivariance(dr, dc):
    a = np.full((80, 80), 5.0)
    for r, c in ((30, 30), (45, 52), (38, 41)):
        a[r - 1:r + 2, c - 1:c + 2] += 200.0
        a[r, c] += 100.0
    shifted = np.roll(a, (dr, dc), axis=(0, 1))
    p = DetectionParams(10, 2.5)
    s0 = [c.seed_pixel for c in detect(ScanImage(a), p)]
    s1 = [c.seed_pixel for c in detect(ScanImage(shifted), p)]
    assert len(s0) == 3
    assert s1 == [(r + dr, c + dc) for r, c in s0]


def test_five_spots_found_at_centres():
    pix = 0.2
    centres = [(10.0, 10.0), (30.0, 12.0), (20.0, 24.0), (8.0, 32.0), (32.0, 32.0)]
    emitters = [(x, y, 400.0) for x, y in centres]
    img = simulate_scan(emitters, 0.3, 20.0, (200, 200, pix), seed=3)
    cands = detect(img, DetectionParams(10, 2.5))
    assert len(cands) == 5
    seeds = sorted((c.seed_pixel[1] * pix, c.seed_pixel[0] * pix) for c in cands)
    for (x, y), (sx, sy) in zip(sorted(centres), seeds):
        assert abs(x - sx) <= pix + 1e-9 and abs(y - sy) <= pix + 1e-9


def test_all_zero_scan():
    assert detect(ScanImage(np.zeros((50, 50)))) == []


def test_centroid_in_micrometres():
    m = np.zeros((6, 6), bool)
    m[2, 3] = m[2, 4] = True
    (c,) = group_pixels(m, pixel_size_um=0.2)
    assert c.centroid_um == pytest.approx((3.5 * 0.2, 2 * 0.2))
