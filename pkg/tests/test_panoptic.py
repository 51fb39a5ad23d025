import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rgbdscene import oracle
from rgbdscene.harness import random_grouping_case
from rgbdscene.panoptic import (
    PanopticMap,
    ThingStuffSpec,
    aggregate_orientation,
    extract_centers,
    gt_foreground_mode,
    group_pixels,
    merge_panoptic,
    panoptic_from_outputs,
    predicted_foreground,
    wrap_degrees,
)

SPEC = ThingStuffSpec.from_stuff(40, (1, 2, 22))
WALL, FLOOR, CHAIR, TABLE = 1, 2, 5, 7


def gaussian(h, w, cy, cx, sigma=2.0, amp=1.0):
    yy, xx = np.mgrid[:h, :w]
    return (amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))).astype(np.float32)


# centers

def test_single_bump():
    c = extract_centers(gaussian(24, 24, 10, 12), 0.1, 7, 64)
    assert [(y, x) for y, x, _ in c] == [(10, 12)]


def test_close_bumps_suppressed():
    heat = np.maximum(gaussian(24, 24, 10, 10), gaussian(24, 24, 10, 13, amp=0.9))
    c = extract_centers(heat, 0.1, 7, 64)
    assert len(c) == 1 and c == oracle.naive_extract_centers(heat, 0.1, 7, 64)


def test_zero_heatmap():
    assert extract_centers(np.zeros((8, 8), np.float32)) == []


def test_plateau_single_peak_and_top_k():
    heat = np.zeros((10, 30), np.float32)
    heat[2:4, 2:4] = 0.5
    for x in (10, 18, 26):
        heat[5, x] = 0.3 + x / 100
    c = extract_centers(heat, 0.1, 3, 64)
    assert (2, 2, 0.5) in [(y, x, round(s, 6)) for y, x, s in c]
    assert len(c) == 4
    assert len(extract_centers(heat, 0.1, 3, 2)) == 2
    assert [s for *_, s in c] == sorted((s for *_, s in c), reverse=True)


@pytest.mark.parametrize("seed", range(40))
def test_centers_vs_oracle(seed):
    rng = np.random.default_rng(seed)
    heat = (np.round(rng.random((20, 17)) * 6) / 6).astype(np.float32)
    k = int(rng.choice([1, 3, 5, 7]))
    assert extract_centers(heat, 0.1, k, 64) == oracle.naive_extract_centers(heat, 0.1, k, 64)


# grouping

def test_perfect_offsets():
    h, w = 10, 12
    centers = [(2, 3, 1.0), (7, 9, 0.9)]
    truth = np.zeros((h, w), np.int64)
    truth[:, 6:] = 2
    truth[:, :6] = 1
    yy, xx = np.mgrid[:h, :w]
    cy = np.where(truth == 1, 2, 7)
    cx = np.where(truth == 1, 3, 9)
    offsets = np.stack([cy - yy, cx - xx], -1).astype(np.float32)
    assert np.array_equal(group_pixels(centers, offsets, np.ones((h, w), bool)), truth)


def voronoi(centers, fg):
    h, w = fg.shape
    out = np.zeros((h, w), np.int64)
    for y in range(h):
        for x in range(w):
            if fg[y, x] and centers:
                d = [(y - cy) ** 2 + (x - cx) ** 2 for cy, cx, _ in centers]
                out[y, x] = int(np.argmin(d)) + 1
    return out


@pytest.mark.parametrize("seed", range(30))
def test_zero_offsets_voronoi(seed):
    rng = np.random.default_rng(seed)
    centers, _, fg = random_grouping_case(rng)
    offsets = np.zeros(fg.shape + (2,), np.float32)
    assert np.array_equal(group_pixels(centers, offsets, fg), voronoi(centers, fg))


def test_empty_foreground():
    ids = group_pixels([(1, 1, 1.0)], np.ones((4, 4, 2), np.float32), np.zeros((4, 4), bool))
    assert not ids.any()


def test_no_centers():
    assert not group_pixels([], np.zeros((4, 4, 2), np.float32), np.ones((4, 4), bool)).any()


@given(st.integers(0, 10_000))
@settings(max_examples=100, deadline=None)
def test_grouping_vs_oracle_property(seed):
    centers, offsets, fg = random_grouping_case(np.random.default_rng(seed))
    assert np.array_equal(group_pixels(centers, offsets, fg),
                          oracle.naive_group_pixels(centers, offsets, fg))


# merge

def test_merge_single_class():
    sem = np.full((10, 10), WALL)
    sem[2:6, 2:6] = CHAIR
    ids = np.zeros((10, 10), np.int64)
    ids[2:6, 2:6] = 1
    pan = merge_panoptic(sem, ids, SPEC)
    assert [(i.id, i.semantic_class, i.pixel_count) for i in pan.instances] == [(1, CHAIR, 16)]


def test_merge_majority_vote():
    sem = np.full((10, 10), CHAIR)
    sem[6:] = TABLE
    ids = np.ones((10, 10), np.int64)
    pan = merge_panoptic(sem, ids, SPEC)
    assert pan.instances[0].semantic_class == CHAIR
    assert np.all(pan.semantic[ids == 1] == CHAIR)


def test_merge_tie_goes_to_lowest_class():
    sem = np.full((4, 4), TABLE)
    sem[:2] = CHAIR
    pan = merge_panoptic(sem, np.ones((4, 4), np.int64), SPEC, min_instance_pixels=1)
    assert pan.instances[0].semantic_class == CHAIR


def test_merge_small_dissolved():
    sem = np.full((10, 10), FLOOR)
    sem[0, :5] = CHAIR
    ids = np.zeros((10, 10), np.int64)
    ids[0, :5] = 1
    pan = merge_panoptic(sem, ids, SPEC, min_instance_pixels=10)
    assert pan.instances == [] and not pan.instance_id.any()


def check_invariants(pan: PanopticMap):
    ids = pan.instance_id
    k = len(pan.instances)
    assert sorted(set(np.unique(ids)) - {0}) == list(range(1, k + 1))
    assert SPEC.thing_mask(pan.semantic[ids > 0]).all()
    assert not (ids[SPEC.stuff_mask(pan.semantic)]).any()
    assert sum(i.pixel_count for i in pan.instances) == int((ids > 0).sum())


@given(st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_merge_invariants(seed):
    rng = np.random.default_rng(seed)
    h, w = 24, 24
    sem = rng.choice([0, WALL, FLOOR, CHAIR, TABLE, 9], size=(h, w))
    ids = rng.integers(0, 6, size=(h, w))
    check_invariants(merge_panoptic(sem, ids, SPEC, min_instance_pixels=int(rng.integers(1, 20))))


# orientation

def orient_field(deg):
    r = np.radians(np.asarray(deg, np.float64))
    return np.stack([np.sin(r), np.cos(r)], -1).astype(np.float32)


def one_instance(h, w):
    sem = np.full((h, w), CHAIR)
    return merge_panoptic(sem, np.ones((h, w), np.int64), SPEC, min_instance_pixels=1)


def test_uniform_90():
    pan = aggregate_orientation(orient_field(np.full((5, 5), 90.0)), one_instance(5, 5))
    assert abs(pan.instances[0].orientation_deg - 90.0) <= 1e-9


def test_half_350_half_10():
    deg = np.full((4, 4), 350.0)
    deg[2:] = 10.0
    pan = aggregate_orientation(orient_field(deg), one_instance(4, 4))
    o = pan.instances[0].orientation_deg
    assert min(o, 360 - o) <= 1e-9


def test_opposite_vectors_undefined():
    deg = np.full((2, 2), 0.0)
    deg[1] = 180.0
    pan = aggregate_orientation(orient_field(deg), one_instance(2, 2))
    assert pan.instances[0].orientation_deg is None


@pytest.mark.parametrize("seed", range(10))
def test_orientation_vs_complex_mean(seed):
    rng = np.random.default_rng(seed)
    deg = rng.uniform(0, 360, (6, 7))
    scale = rng.uniform(0.1, 3.0, (6, 7, 1))
    pan = aggregate_orientation(orient_field(deg) * scale.astype(np.float32), one_instance(6, 7))
    z = np.exp(1j * np.radians(deg)).mean()
    ref = math.degrees(math.atan2(z.imag, z.real)) % 360
    d = abs(pan.instances[0].orientation_deg - ref)
    assert min(d, 360 - d) <= 0.01


def test_wrap_degrees():
    assert wrap_degrees(-0.0) == 0.0 and wrap_degrees(360.0) == 0.0
    assert wrap_degrees(-90.0) == 270.0 and 0.0 <= wrap_degrees(-1e-17) < 360.0


# foreground

def test_gt_all_stuff():
    fg, _ = gt_foreground_mode(np.full((4, 4), WALL), SPEC)
    assert not fg.any()


def test_gt_mode_matches_predicted_when_equal():
    rng = np.random.default_rng(0)
    sem = rng.choice([WALL, FLOOR, CHAIR, TABLE], size=(32, 32))
    heat = gaussian(32, 32, 8, 8) + gaussian(32, 32, 24, 20)
    off = rng.normal(0, 2, (32, 32, 2)).astype(np.float32)
    ori = orient_field(rng.uniform(0, 360, (32, 32)))
    a = panoptic_from_outputs(sem, heat, off, ori, SPEC)
    b = panoptic_from_outputs(sem, heat, off, ori, SPEC, gt_semantic=sem)
    assert np.array_equal(a.encode(), b.encode())
    assert [i.to_dict() for i in a.instances] == [i.to_dict() for i in b.instances]


def test_mixed_foreground_membership():
    rng = np.random.default_rng(1)
    gt = rng.choice([0, WALL, FLOOR, 22, CHAIR, TABLE, 40], size=(16, 16))
    fg, src = gt_foreground_mode(gt, SPEC)
    ref = np.vectorize(lambda v: v in SPEC.thing_class_ids)(gt)
    assert np.array_equal(fg, ref) and np.array_equal(src, gt)
    assert np.array_equal(predicted_foreground(gt, SPEC), ref)


def test_full_pipeline_invariants():
    rng = np.random.default_rng(2)
    sem = np.full((40, 40), WALL)
    sem[5:15, 5:15] = CHAIR
    sem[20:35, 18:30] = TABLE
    heat = gaussian(40, 40, 10, 10) + gaussian(40, 40, 27, 24)
    yy, xx = np.mgrid[:40, :40]
    cy = np.where(yy < 17, 10, 27)
    cx = np.where(yy < 17, 10, 24)
    off = np.stack([cy - yy, cx - xx], -1).astype(np.float32)
    pan = panoptic_from_outputs(sem, heat, off, orient_field(np.full((40, 40), 45.0)), SPEC)
    check_invariants(pan)
    assert [(i.semantic_class, i.pixel_count) for i in pan.instances] == [(CHAIR, 100), (TABLE, 180)]
    assert all(abs(i.orientation_deg - 45.0) < 1e-4 for i in pan.instances)
    assert pan.instances[0].center == (10.0, 10.0)


def test_encode_decode_roundtrip():
    sem = np.full((6, 6), FLOOR)
    sem[:3, :3] = CHAIR
    ids = np.zeros((6, 6), np.int64)
    ids[:3, :3] = 1
    pan = PanopticMap.decode(PanopticMap(sem, ids).encode(), {5001: 12.5})
    assert np.array_equal(pan.semantic, sem) and np.array_equal(pan.instance_id, ids)
    assert pan.instances[0].orientation_deg == 12.5
