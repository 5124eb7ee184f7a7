"""Procedural epithelium bands with grade-dependent nuclei density.

Each sample is a gently curved, nearly horizontal band whose basal edge is the
lower boundary. Dark elliptical nuclei are packed densely from the basal edge up
to a grade-specific fraction of the local thickness and sparsely above it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from skimage.draw import ellipse

from .localize import GRADES, EpitheliumSample
from .rng import substream


class BadParams(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


@dataclass(frozen=True)
class SynthParams:
    length_range: tuple[float, float] = (380.0, 460.0)
    thickness_range: tuple[float, float] = (90.0, 120.0)
    curvature: float = 18.0  # peak centerline deviation, px
    max_tilt_deg: float = 6.0
    nuclei_radius: tuple[float, float] = (2.0, 3.5)
    fractions: tuple[float, float, float, float] = (0.15, 1 / 3, 2 / 3, 1.0)
    frac_jitter: float = 0.04
    dense_density: float = 0.01  # nuclei per px^2 inside the atypical region
    sparse_ratio: float = 0.01  # sparse density as a fraction of dense
    margin: int = 24
    background: tuple[int, int, int] = (246, 236, 242)
    cytoplasm: tuple[int, int, int] = (226, 170, 196)
    nucleus: tuple[int, int, int] = (78, 44, 118)
    color_jitter: float = 10.0
    pixel_noise: float = 4.0
    seed: int = 0

    def __post_init__(self):
        def rng_ok(r):
            return len(r) == 2 and 0 < r[0] <= r[1]

        if not (rng_ok(self.length_range) and rng_ok(self.thickness_range) and rng_ok(self.nuclei_radius)):
            raise BadParams("ranges must be positive with lo <= hi")
        if len(self.fractions) != 4 or not all(0 < f <= 1 for f in self.fractions):
            raise BadParams("fractions must be four values in (0, 1]")
        if self.dense_density <= 0 or self.sparse_ratio <= 0:
            raise BadParams("densities must be positive")
        if min(self.curvature, self.max_tilt_deg, self.frac_jitter, self.pixel_noise, self.color_jitter) < 0 or self.margin < 2:
            raise BadParams("noise, curvature, tilt and margin must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthParams":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class Nucleus:
    x: float
    y: float
    depth: float  # 0 at the basal edge, 1 at the apical edge
    radius: float
    dense: bool


@dataclass
class SynthSample:
    sample: EpitheliumSample
    nuclei: list[Nucleus] = field(repr=False)
    fraction: float = 0.0


def _band(rng: np.random.Generator, p: SynthParams):
    L = rng.uniform(*p.length_range)
    t0 = rng.uniform(*p.thickness_range)
    amp = rng.uniform(0.3, 1.0) * p.curvature
    period = rng.uniform(0.8, 1.6) * L
    phase = rng.uniform(0, 2 * np.pi)
    slope = np.tan(np.deg2rad(rng.uniform(-p.max_tilt_deg, p.max_tilt_deg)))
    t_amp = rng.uniform(0.0, 0.08) * t0
    t_phase = rng.uniform(0, 2 * np.pi)

    W = int(np.ceil(L)) + 2 * p.margin
    span = abs(slope) * L + 2 * amp + t0 * 1.1
    H = int(np.ceil(span)) + 2 * p.margin
    x0 = float(p.margin)
    y_mid = H / 2.0

    def center(x):
        s = x - x0
        return y_mid + slope * (s - L / 2) + amp * np.sin(2 * np.pi * s / period + phase)

    def thickness(x):
        return t0 + t_amp * np.sin(2 * np.pi * (x - x0) / L + t_phase)

    return L, x0, H, W, center, thickness


def generate_sample(grade: str, rng: np.random.Generator | int, params: SynthParams | None = None, sample_id: str = "") -> SynthSample:
    """Render one labeled band; deterministic given (grade, rng seed, params)."""
    p = params or SynthParams()
    if grade not in GRADES:
        raise BadParams(f"unknown grade {grade!r}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)

    L, x0, H, W, center, thickness = _band(rng, p)
    cols = np.arange(W, dtype=np.float64)
    rows = np.arange(H, dtype=np.float64)[:, None]
    c, t = center(cols)[None, :], thickness(cols)[None, :]
    in_x = (cols >= x0) & (cols <= x0 + L)
    mask = (np.abs(rows - c) <= t / 2) & in_x[None, :]

    frac = float(np.clip(p.fractions[GRADES.index(grade)] + rng.uniform(-p.frac_jitter, p.frac_jitter), 0.02, 1.0))
    area = float(mask.sum())

    nuclei: list[Nucleus] = []
    for dense, lo, hi, dens in ((True, 0.0, frac, p.dense_density), (False, frac, 1.0, p.dense_density * p.sparse_ratio)):
        if hi <= lo:
            continue
        n = rng.poisson(dens * area * (hi - lo))
        xs = rng.uniform(x0 + 3, x0 + L - 3, n)
        ds = rng.uniform(lo, hi, n)
        for x, d in zip(xs, ds):
            yc, tt = center(x), thickness(x)
            y = yc + tt / 2 - d * tt
            nuclei.append(Nucleus(float(x), float(y), float(d), float(rng.uniform(*p.nuclei_radius)), dense))

    def jit(col):
        return np.asarray(col, dtype=np.float64) + rng.normal(0, p.color_jitter, 3)

    bg, cyto, nuc = jit(p.background), jit(p.cytoplasm), jit(p.nucleus)
    img = np.empty((H, W, 3), dtype=np.float64)
    img[:] = bg
    img[mask] = cyto
    for nu in nuclei:
        ratio = rng.uniform(0.7, 1.0)
        rr, cc = ellipse(nu.y, nu.x, nu.radius * ratio, nu.radius, shape=(H, W), rotation=rng.uniform(0, np.pi))
        keep = mask[rr, cc]
        img[rr[keep], cc[keep]] = nuc + rng.normal(0, p.color_jitter / 2, 3)
    img += rng.normal(0, p.pixel_noise, img.shape)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return SynthSample(EpitheliumSample(sample_id, img, mask, grade), nuclei, frac)


def region_counts(nuclei: list[Nucleus], edges=(0.0, 1 / 3, 2 / 3, 1.0)) -> np.ndarray:
    """Nuclei counts per depth band, basal first."""
    d = np.array([n.depth for n in nuclei])
    return np.histogram(d, bins=np.asarray(edges))[0]


def generate_dataset(
    counts: tuple[int, int, int, int] | list[int],
    seed: int,
    out_dir: str | Path,
    params: SynthParams | None = None,
) -> list[dict]:
    """Write PNG images/masks plus ``manifest.json``; returns the manifest rows."""
    counts = [int(c) for c in counts]
    if len(counts) != 4 or any(c < 0 for c in counts):
        raise BadParams("counts must be four non-negative integers")
    if sum(counts) == 0:
        raise EmptyDataset("all class counts are zero")
    p = replace(params or SynthParams(), seed=seed)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for grade, n in zip(GRADES, counts):
        for i in range(n):
            sid = f"{grade.lower()}_{i:04d}"
            s = generate_sample(grade, substream(seed, "synth", grade, i), p, sid).sample
            img_path, mask_path = f"images/{sid}.png", f"masks/{sid}.png"
            Image.fromarray(s.image).save(out / img_path)
            Image.fromarray((s.mask * 255).astype(np.uint8)).save(out / mask_path)
            rows.append({"id": sid, "image": img_path, "mask": mask_path, "grade": grade})
    (out / "manifest.json").write_text(json.dumps(rows, indent=1))
    (out / "synth_params.json").write_text(json.dumps(p.to_dict(), indent=1))
    return rows
