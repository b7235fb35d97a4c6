import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from patchba.errors import GridDoesNotFit, NoOverlap
from patchba.geometry import CameraModel
from patchba.patch_tracker import (
    PatchState, TrackerConfig, cross_strip_project, make_grid, patch_ground_positions, spread_spacing,
    transfer_footprint, transfer_nav, wrap_patches,
)
from patchba.terrain import Footprint, compute_footprint

from conftest import flat_dsm, nadir


def centers(states):
    return np.array([s.center_px for s in states])


def rect_fp(cx, cy, half_w, half_h, heading=0.0):
    """Ground rectangle of an image whose top points along ``heading``."""
    up = np.array([-math.sin(heading), math.cos(heading)])
    right = np.array([math.cos(heading), math.sin(heading)])
    c = np.array([cx, cy])
    tl = c - half_w * right + half_h * up
    tr = c + half_w * right + half_h * up
    br = c + half_w * right - half_h * up
    bl = c - half_w * right - half_h * up
    return Footprint.from_corners([tl, tr, br, bl])


# --- grids ---------------------------------------------------------------------

def test_single_patch_is_centred():
    grid, states = make_grid(1, 1, 100, 1000, 1000)
    assert states[0].center_px == (500.0, 500.0)
    assert grid.grid_center == (500.0, 500.0)


def test_four_by_four_benchmark_grid():
    grid, states = make_grid(4, 4, 100, 7920, 6004)
    assert len({s.patch_id for s in states}) == 16
    for a, b in itertools.combinations(states, 2):
        d = np.abs(np.subtract(a.center_px, b.center_px))
        assert d.max() >= 100
    assert np.allclose(centers(states).mean(axis=0), grid.grid_center)


def test_five_by_five_block():
    grid, states = make_grid(5, 5, 150, 7920, 6004)
    c = centers(states)
    assert len(states) == 25
    lo, hi = c.min(axis=0) - 75, c.max(axis=0) + 75
    assert np.allclose(hi - lo, [750, 750])
    assert np.allclose((lo + hi) / 2, [3960, 3002])


def test_spread_grid_covers_the_image():
    sp = spread_spacing(5, 5, 7920, 6004)
    _, states = make_grid(5, 5, 150, 7920, 6004, sp)
    c = centers(states)
    assert np.allclose(c.min(axis=0), [7920 / 10, 6004 / 10])
    assert np.allclose(c.max(axis=0), [7920 - 7920 / 10, 6004 - 6004 / 10])


@pytest.mark.parametrize("args", [(10, 10, 150, 1000, 1000), (0, 3, 100, 1000, 1000), (2, 2, 8, 100, 100)])
def test_grid_that_does_not_fit(args):
    with pytest.raises(GridDoesNotFit):
        make_grid(*args)


def test_id_offset_keeps_strips_apart():
    _, a = make_grid(2, 2, 100, 1000, 1000)
    _, b = make_grid(2, 2, 100, 1000, 1000, id_offset=4)
    assert {s.patch_id for s in a}.isdisjoint({s.patch_id for s in b})


# --- navigation transfer ---------------------------------------------------------

@pytest.fixture
def grid1000():
    return make_grid(3, 3, 100, 1000, 1000, 250)


def test_nav_transfer_identity(cam1000, grid1000):
    grid, states = grid1000
    out = transfer_nav(states, nadir(), nadir(), cam1000, TrackerConfig(100.0), grid)
    assert np.allclose(centers(out), centers(states), atol=1e-9)


def test_nav_transfer_parallax(cam1000, grid1000):
    grid, states = grid1000
    out = transfer_nav(states, nadir(h=100), nadir(x=10.0, h=100), cam1000, TrackerConfig(100.0), grid)
    # with the image top north, image x points east
    assert np.allclose(centers(out) - centers(states), [-100, 0], atol=1e-9)


def test_nav_transfer_half_turn(cam1000, grid1000):
    grid, states = grid1000
    out = transfer_nav(states, nadir(), nadir(heading=math.pi), cam1000, TrackerConfig(100.0), grid)
    assert np.allclose(centers(out), 1000 - centers(states), atol=1e-6)


def test_nav_transfer_reinitialises_lost_patches(cam1000, grid1000):
    grid, states = grid1000
    # the target camera sits below the back-projected ground point
    out = transfer_nav(states, nadir(h=100), nadir(h=-50), cam1000, TrackerConfig(100.0), grid)
    assert len(out) == len(states)
    assert all(s.generation == 1 for s in out)
    assert np.allclose(centers(out), centers(states))


# --- footprint transfer ----------------------------------------------------------

def test_footprint_transfer_identity(grid1000):
    grid, states = grid1000
    fp = rect_fp(0, 0, 50, 50)
    out = transfer_footprint(states, fp, fp, grid)
    assert np.allclose(centers(out), centers(states))


def test_footprint_transfer_quarter_turn():
    grid, _ = make_grid(1, 1, 100, 1000, 1000)
    states = [PatchState(0, (600.0, 500.0))]
    out = transfer_footprint(states, rect_fp(0, 0, 50, 50), rect_fp(0, 0, 50, 50, math.pi / 2), grid)
    assert np.allclose(out[0].center_px, (500, 600), atol=1e-9)


def test_footprint_transfer_east_shift(grid1000):
    grid, states = grid1000
    out = transfer_footprint(states, rect_fp(0, 0, 50, 50), rect_fp(20, 0, 50, 50), grid, px_per_m=10.0)
    # same sign as the navigation route: content slides west in the image
    assert np.allclose(centers(out) - centers(states), [-200, 0], atol=1e-9)


def test_footprint_scale_defaults_to_width_over_top_edge(grid1000):
    grid, states = grid1000
    # 1000 px over a 100 m top edge gives 10 px/m
    out = transfer_footprint(states, rect_fp(0, 0, 50, 50), rect_fp(0, 5, 50, 50), grid)
    assert np.allclose(centers(out) - centers(states), [0, 50], atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(dx=st.floats(-80, 80), dy=st.floats(-80, 80), h0=st.floats(-3.2, 3.2), h1=st.floats(-3.2, 3.2))
def test_footprint_transfer_is_an_isometry(dx, dy, h0, h1):
    grid, states = make_grid(4, 4, 100, 7920, 6004, spread_spacing(4, 4, 7920, 6004))
    out = transfer_footprint(states, rect_fp(0, 0, 400, 300, h0), rect_fp(dx, dy, 400, 300, h1), grid)
    a, b = centers(states), centers(out)
    da = np.linalg.norm(a[:, None] - a[None], axis=2)
    db = np.linalg.norm(b[:, None] - b[None], axis=2)
    assert np.abs(da - db).max() < 1e-9
    assert len(out) == len(states)


def test_transfers_agree_on_flat_ground():
    cam = CameraModel(39.84, 4.6, 7920, 6004)
    dsm = flat_dsm(0.0, half=3000)
    grid, states = make_grid(5, 5, 150, 7920, 6004, spread_spacing(5, 5, 7920, 6004))
    p0 = nadir()
    fp0 = compute_footprint(cam, p0, dsm)
    for d in (5.0, 41.6, 120.0):
        pk = nadir(y=d)
        a = transfer_nav(states, p0, pk, cam, TrackerConfig(300.0), grid)
        b = transfer_footprint(states, fp0, compute_footprint(cam, pk, dsm), grid)
        assert np.abs(centers(a) - centers(b)).max() < 1.0


# --- wrapping ----------------------------------------------------------------------

def test_wrap_single_axis():
    out = wrap_patches([PatchState(0, (1050.0, 500.0))], 1000, 1000, 100)
    assert out[0].center_px == pytest.approx((150.0, 500.0))
    assert out[0].generation == 1


def test_in_band_patch_untouched():
    s = PatchState(0, (300.0, 700.0), 2)
    assert wrap_patches([s], 1000, 1000, 100) == [s]


def test_wrap_both_axes_counts_once():
    out = wrap_patches([PatchState(0, (-20.0, 1200.0))], 1000, 1000, 100)
    assert out[0].generation == 1
    x, y = out[0].center_px
    assert 50 <= x <= 950 and 50 <= y <= 950
    assert x == pytest.approx(50 + (-70) % 900)
    assert y == pytest.approx(50 + 1150 % 900)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-5000, 5000), st.floats(-5000, 5000)), min_size=1, max_size=20))
def test_wrap_idempotent_and_conserving(pts):
    states = [PatchState(i, p) for i, p in enumerate(pts)]
    once = wrap_patches(states, 1000, 800, 100)
    assert len(once) == len(states)
    assert wrap_patches(once, 1000, 800, 100) == once
    assert [s.key[0] for s in once] == [s.patch_id for s in states]


# --- cross-strip injection --------------------------------------------------------

def test_identical_footprints_inject_everything(grid1000):
    grid, states = grid1000
    fp = rect_fp(0, 0, 50, 50)
    out = cross_strip_project(states, fp, fp, grid)
    assert [s.patch_id for s in out] == [s.patch_id for s in states]
    assert np.allclose(centers(out), centers(states))


def test_side_overlap_matches_point_in_polygon_census():
    cam = CameraModel(39.84, 4.6, 7920, 6004)
    dsm = flat_dsm(0.0, half=3000)
    grid, states = make_grid(5, 5, 150, 7920, 6004, spread_spacing(5, 5, 7920, 6004))
    src = compute_footprint(cam, nadir(), dsm)
    width = np.linalg.norm(src.corners[1] - src.corners[0])
    tgt = compute_footprint(cam, nadir(x=0.68 * width, y=30.0, heading=math.pi), dsm)
    out = cross_strip_project(states, src, tgt, grid, source_image=7)
    ground = patch_ground_positions(states, src, grid)
    expected = [s.patch_id for s, g in zip(states, ground) if tgt.contains(g[None])[0]]
    assert 0 < len(out) < len(states)
    assert [s.patch_id for s in out] == expected
    assert all(s.source_image == 7 for s in out)


def test_no_overlap(grid1000):
    grid, states = grid1000
    with pytest.raises(NoOverlap):
        cross_strip_project(states, rect_fp(0, 0, 50, 50), rect_fp(500, 0, 50, 50), grid)
