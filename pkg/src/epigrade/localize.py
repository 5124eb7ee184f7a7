"""Split a masked epithelium band into standard-width vertical segments.

Coordinates are (x, y) = (column, row) with y pointing down and pixel
centers at integer positions, so pixel (r, c) covers [c-0.5, c+0.5) x [r-0.5, r+0.5).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components, dijkstra
from skimage.morphology import skeletonize
from skimage.transform import resize

log = logging.getLogger(__name__)

GRADES = ("Normal", "CIN1", "CIN2", "CIN3")


class EmptyMask(ValueError):
    pass


class DegenerateRegion(ValueError):
    pass


class BadWidth(ValueError):
    pass


@dataclass
class EpitheliumSample:
    id: str
    image: np.ndarray
    mask: np.ndarray
    grade: str | None = None

    def __post_init__(self):
        self.image = np.asarray(self.image)
        self.mask = np.asarray(self.mask).astype(bool)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"{self.id}: image must be HxWx3, got {self.image.shape}")
        if self.image.shape[:2] != self.mask.shape:
            raise ValueError(f"{self.id}: image {self.image.shape[:2]} and mask {self.mask.shape} differ")
        if self.grade is not None and self.grade not in GRADES:
            raise ValueError(f"{self.id}: unknown grade {self.grade!r}")


@dataclass
class MedialAxisPolyline:
    points: np.ndarray  # (M, 2) as (x, y)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if len(self.points) < 2:
            raise DegenerateRegion("medial axis needs at least two points")

    @property
    def cumulative(self) -> np.ndarray:
        steps = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])

    @property
    def arc_length(self) -> float:
        return float(self.cumulative[-1])


@dataclass
class VertexChain:
    vertices: np.ndarray  # (M, 2) circle centers along the axis
    chords: np.ndarray  # (N, 2, 2) start/end point of each chord
    padded_last: bool = False

    @property
    def n_chords(self) -> int:
        return len(self.chords)


@dataclass
class SegmentGeometry:
    index: int
    quad: np.ndarray  # (4, 2): top-start, top-end, bottom-end, bottom-start
    bbox: tuple[float, float, float, float]  # x0, y0, x1, y1
    chord: np.ndarray  # (2, 2)
    source_quad: np.ndarray | None = None  # quad mapped back to the input image frame

    @property
    def chord_length(self) -> float:
        return float(np.linalg.norm(self.chord[1] - self.chord[0]))

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "quad": self.quad.tolist(),
            "bbox": list(self.bbox),
            "chord": self.chord.tolist(),
            "source_quad": None if self.source_quad is None else self.source_quad.tolist(),
        }


@dataclass
class VerticalSegment:
    geometry: SegmentGeometry
    crop: np.ndarray  # (h, seg_width, 3) uint8
    weak_label: str | None = None
    standardized: np.ndarray | None = field(default=None, repr=False)


# -------------------------------------------------------------- medial axis


def largest_component(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise EmptyMask("mask has no foreground pixels")
    labels, n = ndimage.label(mask, structure=np.ones((3, 3)))
    if n == 1:
        return mask
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    keep = int(sizes.argmax())
    log.warning("mask has %d components; keeping the largest (%d px)", n, sizes[keep])
    return labels == keep


def _longest_skeleton_path(skel: np.ndarray) -> np.ndarray:
    rows, cols = np.nonzero(skel)
    n = len(rows)
    if n < 2:
        raise DegenerateRegion("skeleton is a single pixel")
    index = -np.ones(skel.shape, dtype=np.int64)
    index[rows, cols] = np.arange(n)
    src, dst, wts = [], [], []
    h, w = skel.shape
    for dr, dc in ((0, 1), (1, -1), (1, 0), (1, 1)):
        r2, c2 = rows + dr, cols + dc
        ok = (r2 >= 0) & (r2 < h) & (c2 >= 0) & (c2 < w)
        r2, c2, i1 = r2[ok], c2[ok], np.arange(n)[ok]
        i2 = index[r2, c2]
        hit = i2 >= 0
        src.append(i1[hit])
        dst.append(i2[hit])
        wts.append(np.full(hit.sum(), np.hypot(dr, dc)))
    src, dst, wts = np.concatenate(src), np.concatenate(dst), np.concatenate(wts)
    graph = coo_matrix((wts, (src, dst)), shape=(n, n)).tocsr()
    graph = graph + graph.T

    ncomp, lab = connected_components(graph, directed=False)
    if ncomp > 1:
        big = np.bincount(lab).argmax()
        start = int(np.flatnonzero(lab == big)[0])
    else:
        start = 0
    # double sweep: farthest node from any node, then farthest from that one
    d0 = dijkstra(graph, indices=start)
    a = int(np.nanargmax(np.where(np.isfinite(d0), d0, -1)))
    da, pred = dijkstra(graph, indices=a, return_predecessors=True)
    b = int(np.nanargmax(np.where(np.isfinite(da), da, -1)))
    path = [b]
    while path[-1] != a:
        path.append(int(pred[path[-1]]))
    path = path[::-1]
    return np.stack([cols[path], rows[path]], axis=1).astype(np.float64)


def _inside(mask: np.ndarray, x: float, y: float) -> bool:
    c, r = int(np.floor(x + 0.5)), int(np.floor(y + 0.5))
    return 0 <= r < mask.shape[0] and 0 <= c < mask.shape[1] and bool(mask[r, c])


def exit_distance(mask: np.ndarray, origin, direction, step: float = 0.5, max_len: float | None = None) -> float:
    """Distance along ``direction`` from ``origin`` to the first point leaving the mask."""
    ox, oy = float(origin[0]), float(origin[1])
    dx, dy = float(direction[0]), float(direction[1])
    if not _inside(mask, ox, oy):
        return 0.0
    limit = max_len if max_len is not None else float(np.hypot(*mask.shape)) + 2
    t = 0.0
    while t < limit:
        t2 = t + step
        if not _inside(mask, ox + t2 * dx, oy + t2 * dy):
            lo, hi = t, t2
            for _ in range(30):
                mid = 0.5 * (lo + hi)
                if _inside(mask, ox + mid * dx, oy + mid * dy):
                    lo = mid
                else:
                    hi = mid
            return lo
        t = t2
    return limit


def _trim_ends(points: np.ndarray, dist: np.ndarray, factor: float = 2.0) -> np.ndarray:
    """Drop corner spurs at both ends of a skeleton path.

    Along a spur the local radius grows about as fast as the arc distance from
    the tip, so ``arc < factor * radius`` holds all the way in; the cut is placed
    after the last such point within each half of the path.
    """
    steps = np.linalg.norm(np.diff(points, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(steps)])
    radius = dist[points[:, 1].astype(int), points[:, 0].astype(int)]
    total = arc[-1]
    half = arc <= total / 2
    bad_start = np.flatnonzero(half & (arc < factor * radius))
    bad_end = np.flatnonzero(~half & ((total - arc) < factor * radius))
    i0 = int(bad_start[-1]) + 1 if len(bad_start) else 0
    i1 = int(bad_end[0]) - 1 if len(bad_end) else len(points) - 1
    if i1 - i0 < 2:
        return points
    return points[i0 : i1 + 1]


def _moving_average(points: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or len(points) < 3:
        return points
    window = min(window, len(points) if len(points) % 2 else len(points) - 1)
    return np.stack([ndimage.uniform_filter1d(points[:, k], window, mode="nearest") for k in range(2)], axis=1)


def _end_direction(pts: np.ndarray, span: float) -> np.ndarray | None:
    """Outward unit direction at ``pts[0]`` from a line fit over the first ``span`` px of arc."""
    steps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(steps)])
    k = max(2, int(np.searchsorted(arc, min(span, arc[-1]))) + 1)
    seg = pts[:k]
    centered = seg - seg.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    d = vt[0]
    if d @ (seg[0] - seg[-1]) < 0:
        d = -d
    nrm = np.linalg.norm(d)
    return d / nrm if nrm > 0 else None


def _extend_to_boundary(points: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Continue each end straight along its local direction until it leaves the mask."""
    steps = np.linalg.norm(np.diff(points, axis=0), axis=1)
    span = float(np.clip(steps.sum() / 4, 30.0, 120.0))
    out = points
    for flip in (False, True):
        pts = out[::-1] if flip else out
        d = _end_direction(pts, span)
        if d is not None:
            t = exit_distance(mask, pts[0], d)
            if t > 1e-3:
                new = pts[0] + (t - 1e-6) * d
                pts = np.vstack([new, pts])
        out = pts[::-1] if flip else pts
    return out


def _dedupe(points: np.ndarray) -> np.ndarray:
    keep = np.concatenate([[True], np.linalg.norm(np.diff(points, axis=0), axis=1) > 1e-9])
    return points[keep]


def compute_medial_axis(mask: np.ndarray, seg_width: float = 64, smooth: int = 15) -> MedialAxisPolyline:
    """Longest skeleton path of the largest component, trimmed, smoothed and extended to the boundary."""
    comp = largest_component(mask)
    # a background frame keeps thinning symmetric for regions touching the border
    skel = skeletonize(np.pad(comp, 1))[1:-1, 1:-1]
    path = _longest_skeleton_path(skel)
    dist = ndimage.distance_transform_edt(comp)
    path = _trim_ends(path, dist)
    path = _moving_average(path, smooth)
    path = _extend_to_boundary(path, comp)
    path = _dedupe(path)
    if path[0, 0] > path[-1, 0]:
        path = path[::-1].copy()
    axis = MedialAxisPolyline(path)
    if axis.arc_length < seg_width:
        raise DegenerateRegion(f"medial axis length {axis.arc_length:.1f} px is shorter than one segment ({seg_width} px)")
    return axis


# ------------------------------------------------------------ reorientation


def axis_angle(axis: MedialAxisPolyline) -> float:
    """Orientation of the orthogonal least-squares line through the axis points, in (-pi/2, pi/2]."""
    pts = axis.points - axis.points.mean(axis=0)
    _, _, vt = np.linalg.svd(pts, full_matrices=False)
    dx, dy = vt[0]
    theta = float(np.arctan2(dy, dx))
    if theta > np.pi / 2:
        theta -= np.pi
    elif theta <= -np.pi / 2:
        theta += np.pi
    return theta


def rotation_angle(axis: MedialAxisPolyline) -> float:
    """Angle (radians, y-down image frame) that makes the axis horizontal."""
    return -axis_angle(axis)


def _rotation_frame(shape: tuple[int, int], phi: float):
    h, w = shape
    c, s = np.cos(phi), np.sin(phi)
    R = np.array([[c, -s], [s, c]])
    corners = np.array([[-0.5, -0.5], [w - 0.5, -0.5], [w - 0.5, h - 0.5], [-0.5, h - 0.5]])
    c_in = np.array([(w - 1) / 2, (h - 1) / 2])
    rot = (corners - c_in) @ R.T
    w2 = int(np.ceil(rot[:, 0].max() - rot[:, 0].min() - 1e-9))
    h2 = int(np.ceil(rot[:, 1].max() - rot[:, 1].min() - 1e-9))
    c_out = np.array([(w2 - 1) / 2, (h2 - 1) / 2])
    return R, c_in, c_out, (h2, w2)


def rotate_points(points: np.ndarray, shape: tuple[int, int], phi: float) -> np.ndarray:
    R, c_in, c_out, _ = _rotation_frame(shape, phi)
    return (np.asarray(points) - c_in) @ R.T + c_out


def unrotate_points(points: np.ndarray, shape: tuple[int, int], phi: float) -> np.ndarray:
    """Inverse of :func:`rotate_points` for a source raster of ``shape``."""
    R, c_in, c_out, _ = _rotation_frame(shape, phi)
    return (np.asarray(points) - c_out) @ R + c_in


def rotate_raster(arr: np.ndarray, phi: float, order: int = 1, cval: float = 0.0) -> np.ndarray:
    """Rotate by ``phi`` about the center onto a canvas large enough to hold the result."""
    R, c_in, c_out, (h2, w2) = _rotation_frame(arr.shape[:2], phi)
    # affine_transform works in (row, col): input = M @ output + offset
    Ri = R.T  # inverse rotation in (x, y)
    M = np.array([[Ri[1, 1], Ri[1, 0]], [Ri[0, 1], Ri[0, 0]]])
    cin_rc, cout_rc = c_in[::-1], c_out[::-1]
    offset = cin_rc - M @ cout_rc
    if arr.ndim == 2:
        return ndimage.affine_transform(arr, M, offset, output_shape=(h2, w2), order=order, cval=cval)
    chans = [ndimage.affine_transform(arr[..., k], M, offset, output_shape=(h2, w2), order=order, cval=cval) for k in range(arr.shape[2])]
    return np.stack(chans, axis=-1)


def rotate_sample(sample: EpitheliumSample, phi: float) -> EpitheliumSample:
    img = rotate_raster(sample.image.astype(np.float64), phi, order=1, cval=255.0)
    soft = rotate_raster(sample.mask.astype(np.float64), phi, order=1, cval=0.0)
    # light blur before thresholding straightens staircase edges of the source raster
    msk = ndimage.gaussian_filter(soft, 1.0) > 0.5
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return EpitheliumSample(sample.id, img, msk, sample.grade)


def reorient_horizontal(sample: EpitheliumSample, axis: MedialAxisPolyline) -> tuple[EpitheliumSample, MedialAxisPolyline]:
    phi = rotation_angle(axis)
    if abs(phi) < 1e-6:
        return sample, axis
    out = rotate_sample(sample, phi)
    out.mask = largest_component(out.mask)
    pts = rotate_points(axis.points, sample.mask.shape, phi)
    if pts[0, 0] > pts[-1, 0]:
        pts = pts[::-1].copy()
    return out, MedialAxisPolyline(pts)


# ----------------------------------------------------------- polygonal chain


def _circle_hit(a, b, c, r, s0):
    """Smallest s in [s0, 1] where |a + s(b-a) - c| crosses r going outward."""
    d = b - a
    f = a - c
    A = d @ d
    if A == 0:
        return None
    B = 2 * (f @ d)
    C = f @ f - r * r
    disc = B * B - 4 * A * C
    if disc < 0:
        return None
    sq = np.sqrt(disc)
    # the outward crossing is the larger root
    s = (-B + sq) / (2 * A)
    if s0 - 1e-12 <= s <= 1 + 1e-12:
        return float(min(max(s, s0), 1.0))
    return None


def _walk(points: np.ndarray, center: np.ndarray, r: float, k: int, s0: float):
    for j in range(k, len(points) - 1):
        s = _circle_hit(points[j], points[j + 1], center, r, s0 if j == k else 0.0)
        if s is not None:
            return j, s
    return None


def polygonalize_axis(axis: MedialAxisPolyline, seg_width: float) -> VertexChain:
    """Chain of axis points at Euclidean spacing ``seg_width``, built by successive circles.

    A trailing remainder of at least half a width becomes one more chord that
    ends at the axis end and reaches back along the axis to full width.
    """
    pts = axis.points
    cum = axis.cumulative
    if cum[-1] < seg_width:
        raise DegenerateRegion(f"axis length {cum[-1]:.1f} shorter than segment width {seg_width}")
    verts = [pts[0].copy()]
    k, s = 0, 0.0
    while True:
        hit = _walk(pts, verts[-1], seg_width, k, s)
        if hit is None:
            break
        k, s = hit
        verts.append(pts[k] + s * (pts[k + 1] - pts[k]))
    vertices = np.array(verts)
    chords = [np.stack([vertices[i], vertices[i + 1]]) for i in range(len(vertices) - 1)]
    here = cum[k] + s * (cum[k + 1] - cum[k]) if k < len(pts) - 1 else cum[-1]
    remainder = cum[-1] - here
    padded = False
    if remainder >= seg_width / 2 and remainder > 1e-6:
        rev = pts[::-1]
        back = _walk(rev, rev[0], seg_width, 0, 0.0)
        if back is not None:
            j, t = back
            start = rev[j] + t * (rev[j + 1] - rev[j])
            chords.append(np.stack([start, pts[-1].copy()]))
            padded = True
    if not chords:
        raise DegenerateRegion("no chord of the requested width fits on the axis")
    return VertexChain(vertices, np.array(chords), padded)


# --------------------------------------------------------------- segments


def _chord_frame(chord: np.ndarray):
    a, b = chord
    u = (b - a) / np.linalg.norm(b - a)
    n = np.array([u[1], -u[0]])  # left normal; points to smaller y for a rightward chord
    return a, b, u, n


def _robust_extent(mask, p, u, d, offsets=(-2.0, -1.0, 0.0, 1.0, 2.0)) -> float:
    """Median exit distance over a few parallel rays; damps pixel-staircase edges."""
    return float(np.median([exit_distance(mask, p + k * u, d) for k in offsets]))


def extract_segments(sample: EpitheliumSample, chain: VertexChain, mask: np.ndarray | None = None) -> list[VerticalSegment]:
    """Cut one crop per chord, bounded by perpendiculars at the chord ends.

    The crop is sampled in the chord's own frame so its width is exactly the
    chord length; pixels outside the mask are filled white.
    """
    mask = sample.mask if mask is None else np.asarray(mask).astype(bool)
    img = sample.image.astype(np.float64)
    segments = []
    for i, chord in enumerate(chain.chords, start=1):
        a, b, u, n = _chord_frame(chord)
        width = int(round(np.linalg.norm(b - a)))
        up_a, up_b = _robust_extent(mask, a, u, n), _robust_extent(mask, b, u, n)
        dn_a, dn_b = _robust_extent(mask, a, u, -n), _robust_extent(mask, b, u, -n)
        top, bot = max(up_a, up_b), max(dn_a, dn_b)
        height = max(1, int(round(top + bot)))
        # the sampled rectangle, which is what the crop actually covers
        quad = np.array([a + top * n, b + top * n, b - bot * n, a - bot * n])
        bbox = (float(quad[:, 0].min()), float(quad[:, 1].min()), float(quad[:, 0].max()), float(quad[:, 1].max()))

        cs = np.arange(width) + 0.5
        vs = top - (np.arange(height) + 0.5) * (top + bot) / height
        X = a[0] + cs[None, :] * u[0] + vs[:, None] * n[0]
        Y = a[1] + cs[None, :] * u[1] + vs[:, None] * n[1]
        coords = np.stack([Y, X])
        inside = ndimage.map_coordinates(mask.astype(np.uint8), np.floor(coords + 0.5), order=0, cval=0).astype(bool)
        crop = np.stack([ndimage.map_coordinates(img[..., k], coords, order=1, cval=255.0) for k in range(3)], axis=-1)
        crop[~inside] = 255.0
        crop = np.clip(np.rint(crop), 0, 255).astype(np.uint8)
        geom = SegmentGeometry(i, quad, bbox, chord.copy())
        segments.append(VerticalSegment(geom, crop))
    return segments


def standardize_segment(crop: np.ndarray, target_h: int = 704, target_w: int = 64, seg_width: int | None = None, eps: float = 1e-8) -> np.ndarray:
    """Resize to ``target_h x target_w``, normalize each channel, rotate so the bottom edge is on the left.

    Returns a (3, target_w, target_h) float64 array.
    """
    crop = np.asarray(crop)
    if seg_width is not None and crop.shape[1] != seg_width:
        raise BadWidth(f"crop width {crop.shape[1]} != segment width {seg_width}")
    x = resize(crop.astype(np.float64), (target_h, target_w), order=1, mode="edge", anti_aliasing=False, preserve_range=True)
    mu = x.mean(axis=(0, 1), keepdims=True)
    sd = x.std(axis=(0, 1), keepdims=True)
    x = (x - mu) / np.maximum(sd, eps)
    x[:, :, (sd[0, 0] <= eps)] = 0.0
    # clockwise quarter turn in array order: row -1 (bottom) becomes column 0
    x = np.rot90(x, k=-1)
    return np.ascontiguousarray(x.transpose(2, 0, 1))


def localize(sample: EpitheliumSample, seg_width: int = 64, target_hw: tuple[int, int] = (64, 704), smooth: int = 15) -> list[VerticalSegment]:
    """Full localization: axis, reorientation, chain, crops and standardized tensors.

    ``target_hw`` is the encoder input (height, width) after rotation.
    """
    axis = compute_medial_axis(sample.mask, seg_width, smooth)
    phi = rotation_angle(axis)
    flat, axis = reorient_horizontal(sample, axis)
    chain = polygonalize_axis(axis, seg_width)
    segments = extract_segments(flat, chain)
    for seg in segments:
        q = seg.geometry.quad
        seg.geometry.source_quad = q.copy() if flat is sample else unrotate_points(q, sample.mask.shape, phi)
        seg.standardized = standardize_segment(seg.crop, target_h=target_hw[1], target_w=target_hw[0], seg_width=seg_width)
    return segments
