import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from epigrade import localize as L
from epigrade.localize import BadWidth, DegenerateRegion, EmptyMask, EpitheliumSample, MedialAxisPolyline


def band(h=300, w=640, top=50, thick=200):
    m = np.zeros((h, w), bool)
    m[top : top + thick, :] = True
    return m


def gray(mask, value=200):
    return np.full(mask.shape + (3,), value, np.uint8)


def rotated(mask, deg):
    return L.rotate_raster(mask.astype(float), np.deg2rad(deg)) > 0.5


def line_distance(points, a, b):
    d = (b - a) / np.linalg.norm(b - a)
    n = np.array([-d[1], d[0]])
    return np.abs((points - a) @ n)


@pytest.fixture(scope="module")
def straight_segments():
    m = band()
    return L.localize(EpitheliumSample("s", gray(m), m, "CIN1"))


def test_straight_band_axis_follows_column_centroid():
    m = band()
    axis = L.compute_medial_axis(m)
    ys, xs = np.nonzero(m)
    centroid = np.array([ys[xs == x].mean() for x in range(m.shape[1])])
    cols = np.clip(np.rint(axis.points[:, 0]).astype(int), 0, m.shape[1] - 1)
    assert np.abs(axis.points[:, 1] - centroid[cols]).max() <= 1.0
    assert axis.points[0, 0] < axis.points[-1, 0]
    assert np.all(np.diff(axis.cumulative) > 0)


def test_rotated_band_axis_follows_rotated_centerline():
    m = band()
    phi = np.deg2rad(37)
    axis = L.compute_medial_axis(rotated(m, 37))
    a, b = L.rotate_points(np.array([[0, 149.5], [639, 149.5]]), m.shape, phi)
    assert line_distance(axis.points, a, b).max() <= 1.0


def test_axis_points_inside_mask():
    r = rotated(band(), 37)
    axis = L.compute_medial_axis(r)
    rc = np.rint(axis.points[:, ::-1]).astype(int)
    rc = np.clip(rc, 0, np.array(r.shape) - 1)
    assert r[rc[:, 0], rc[:, 1]].mean() > 0.98


def test_empty_mask():
    with pytest.raises(EmptyMask):
        L.compute_medial_axis(np.zeros((50, 50), bool))


def test_short_region_is_degenerate():
    m = np.zeros((80, 80), bool)
    m[30:50, 20:60] = True
    with pytest.raises(DegenerateRegion):
        L.compute_medial_axis(m, seg_width=64)


def test_largest_component_used():
    m = band()
    m[280:290, 10:20] = True
    m[50:250, 300] = False  # splits the band into 300 and 339 columns
    comp = L.largest_component(m)
    assert comp.sum() == 200 * 339
    assert comp[:, 301:].all(axis=1)[50:250].all()


def test_horizontal_band_needs_no_rotation():
    m = band()
    s = EpitheliumSample("s", gray(m), m)
    axis = L.compute_medial_axis(m)
    assert abs(L.rotation_angle(axis)) < 1e-6
    out, axis2 = L.reorient_horizontal(s, axis)
    np.testing.assert_array_equal(out.mask, m)


@pytest.mark.parametrize("deg", [30, -20, 90])
def test_rotation_angle_recovered(deg):
    axis = L.compute_medial_axis(rotated(band(), deg))
    got = np.rad2deg(L.rotation_angle(axis))
    # 90 and -90 describe the same line
    diff = (got + deg + 90) % 180 - 90
    assert abs(diff) < 0.5


@pytest.mark.parametrize("deg", [0, 20, 37, 90])
def test_rotation_equivariance(deg, straight_segments):
    r = rotated(band(), deg)
    img = L.rotate_raster(gray(band()).astype(float), np.deg2rad(deg), cval=255).astype(np.uint8)
    segs = L.localize(EpitheliumSample("r", img, r))
    assert len(segs) == len(straight_segments) == 10
    for a, b in zip(segs, straight_segments):
        assert abs(a.crop.shape[0] - b.crop.shape[0]) <= 1


def test_reorientation_flattens_slope():
    r = rotated(band(), 25)
    s = EpitheliumSample("r", gray(r), r)
    flat, axis = L.reorient_horizontal(s, L.compute_medial_axis(r))
    slope = np.polyfit(axis.points[:, 0], axis.points[:, 1], 1)[0]
    assert abs(slope) < 0.05
    assert flat.mask.shape == flat.image.shape[:2]


def test_straight_chain_has_eleven_vertices():
    axis = MedialAxisPolyline(np.stack([np.linspace(0, 640, 200), np.full(200, 10.0)], axis=1))
    chain = L.polygonalize_axis(axis, 64)
    assert len(chain.vertices) == 11 and chain.n_chords == 10
    np.testing.assert_allclose(np.linalg.norm(np.diff(chain.vertices, axis=0), axis=1), 64, atol=1e-6)


def test_circular_arc_chords():
    R, length = 500.0, 640.0
    t = np.linspace(0, length / R, 2000)
    pts = np.stack([R * np.sin(t), R - R * np.cos(t)], axis=1)
    chain = L.polygonalize_axis(MedialAxisPolyline(pts), 64)
    lens = np.linalg.norm(chain.chords[:, 1] - chain.chords[:, 0], axis=1)
    np.testing.assert_allclose(lens, 64, atol=1e-6)
    # brute-force oracle: chord 64 subtends angle 2 asin(32/R) on the circle
    step = 2 * np.arcsin(32 / R)
    expect = int(np.floor((length / R) / step + 1e-9))
    rem = (length / R - expect * step) * R
    assert chain.n_chords == expect + (1 if rem >= 32 else 0)
    vt = np.arctan2(chain.vertices[:, 0], R - chain.vertices[:, 1])
    np.testing.assert_allclose(np.diff(vt), step, atol=1e-6)


@settings(max_examples=25)
@given(st.floats(100, 900), st.sampled_from([32, 64, 128]), st.floats(-1.0, 1.0))
def test_chord_spacing_property(length, width, bend):
    t = np.linspace(0, 1, 300)
    pts = np.stack([t * length, bend * 40 * np.sin(np.pi * t)], axis=1)
    axis = MedialAxisPolyline(pts)
    if axis.arc_length < width:
        return
    chain = L.polygonalize_axis(axis, width)
    lens = np.linalg.norm(chain.chords[:, 1] - chain.chords[:, 0], axis=1)
    np.testing.assert_allclose(lens, width, atol=1e-6)
    mids = chain.chords.mean(axis=1)[:, 0]
    if chain.padded_last:
        mids = mids[:-1]
    assert np.all(np.diff(mids) > 0)


def test_trailing_remainder_rules():
    def chain_for(length):
        return L.polygonalize_axis(MedialAxisPolyline([[0, 0], [length, 0]]), 64)

    short = chain_for(64 * 3 + 20)
    assert short.n_chords == 3 and not short.padded_last
    long = chain_for(64 * 3 + 40)
    assert long.n_chords == 4 and long.padded_last
    np.testing.assert_allclose(long.chords[-1], [[64 * 3 + 40 - 64, 0], [64 * 3 + 40, 0]], atol=1e-9)
    with pytest.raises(DegenerateRegion):
        chain_for(40)


def test_straight_band_segments(straight_segments):
    assert len(straight_segments) == 10
    for i, s in enumerate(straight_segments, start=1):
        assert s.geometry.index == i
        assert s.crop.shape[1] == 64
        assert abs(s.crop.shape[0] - 200) <= 1
        assert abs(s.geometry.chord_length - 64) < 1e-6
        assert s.standardized.shape == (3, 64, 704)
    xs = [s.geometry.chord.mean(axis=0)[0] for s in straight_segments]
    assert np.all(np.diff(xs) > 0)


def test_segments_partition_the_axis(straight_segments):
    chords = [s.geometry.chord for s in straight_segments]
    for a, b in zip(chords, chords[1:]):
        np.testing.assert_allclose(a[1], b[0], atol=1e-9)


def test_one_chord_axis():
    m = np.zeros((120, 100), bool)
    m[40:80, 0:80] = True
    s = EpitheliumSample("one", gray(m), m)
    segs = L.localize(s)
    assert len(segs) == 1


def test_outside_pixels_are_white():
    m = band(thick=100)
    m[50:90, 330:360] = False  # notch from the top, inside segment 6 only
    img = gray(m, 100)
    chain = L.polygonalize_axis(MedialAxisPolyline([[0, 100], [640, 100]]), 64)
    segs = L.extract_segments(EpitheliumSample("n", img, m), chain)
    crop = segs[5].crop
    assert (crop == 255).all(axis=-1).any() and (crop == 100).all(axis=-1).any()


def test_source_quad_maps_back():
    m = band()
    r = rotated(m, 20)
    img = L.rotate_raster(gray(m).astype(float), np.deg2rad(20), cval=255).astype(np.uint8)
    segs = L.localize(EpitheliumSample("r", img, r))
    corners = np.concatenate([s.geometry.source_quad for s in segs])
    rc = np.clip(np.rint(corners[:, ::-1]).astype(int), 0, np.array(r.shape) - 1)
    # corners sit on the band boundary, so a few pixels of dilation must cover them
    from scipy import ndimage

    grown = ndimage.binary_dilation(r, iterations=3)
    assert grown[rc[:, 0], rc[:, 1]].all()


def test_standardize_constant_crop():
    out = L.standardize_segment(np.full((200, 64, 3), 128, np.uint8))
    assert out.shape == (3, 64, 704)
    assert not out.any()


def test_standardize_noise_crop():
    crop = np.random.default_rng(0).integers(0, 256, size=(160, 64, 3)).astype(np.uint8)
    out = L.standardize_segment(crop, seg_width=64)
    assert out.shape == (3, 64, 704)
    assert np.abs(out.mean(axis=(1, 2))).max() < 1e-6
    assert np.abs(out.std(axis=(1, 2)) - 1).max() < 1e-6


def test_standardize_bottom_row_goes_left():
    crop = np.full((300, 64, 3), 220, np.uint8)
    crop[-1] = 0
    out = L.standardize_segment(crop)
    col_means = out[0].mean(axis=0)
    assert np.argmin(col_means) == 0
    assert col_means[0] < col_means[352] and col_means[0] < col_means[-1]


def test_standardize_bad_width():
    with pytest.raises(BadWidth):
        L.standardize_segment(np.zeros((100, 60, 3), np.uint8), seg_width=64)


@pytest.mark.parametrize("width,expected", [(32, 20), (64, 10), (128, 5)])
def test_widths_scale_segment_count(width, expected):
    m = band()
    segs = L.localize(EpitheliumSample("w", gray(m), m), seg_width=width)
    assert len(segs) == expected
    assert all(s.crop.shape[1] == width for s in segs)
    assert all(s.standardized.shape == (3, 64, 704) for s in segs)
