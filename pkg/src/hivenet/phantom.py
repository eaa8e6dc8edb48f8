"""Synthetic mitochondria-like phantoms with analytic ground truth.

Instances are tubes of varying radius swept along cubic Bezier centerlines.
The generator also provides the train-time crops and the in-plane
augmentations (flip along W, H-W transpose, 90 degree rotations).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .centerline import CenterlineSet, ProximityConfig, proximity_target


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator used everywhere randomness is needed."""
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass
class PhantomConfig:
    dims: tuple[int, int, int] = (32, 96, 96)
    instance_count: tuple[int, int] = (4, 8)
    radius_range: tuple[float, float] = (2.0, 4.0)
    curvature: float = 0.35
    contrast: float = 0.6
    noise_std: float = 0.05
    clutter_density: float = 0.002
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0
    max_retries: int = 200

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.instance_count = tuple(int(v) for v in self.instance_count)
        self.radius_range = tuple(float(v) for v in self.radius_range)
        self.spacing = tuple(float(v) for v in self.spacing)

    def validate(self) -> "PhantomConfig":
        if len(self.dims) != 3 or min(self.dims) < 16:
            raise ValueError(f"phantom dims must be >= 16 per axis, got {self.dims}")
        lo, hi = self.instance_count
        if lo < 0 or hi < lo:
            raise ValueError(f"bad instance count range {self.instance_count}")
        if self.radius_range[0] < 1 or self.radius_range[1] < self.radius_range[0]:
            raise ValueError(f"radii must be >= 1, got {self.radius_range}")
        if 2 * self.radius_range[1] + 4 > min(self.dims):
            raise ValueError("largest radius does not fit inside the volume")
        if self.noise_std < 0 or self.clutter_density < 0:
            raise ValueError("noise and clutter must be non-negative")
        return self


@dataclass
class LabeledVolume:
    image: np.ndarray                 # float64 in [0, 1]
    labels: np.ndarray                # uint8 {0, 1}
    instances: np.ndarray             # int32, 0 = background
    centerlines: list[CenterlineSet] = field(default_factory=list)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def dims(self):
        return self.image.shape

    def all_centerlines(self) -> CenterlineSet:
        coords = [c.coords for c in self.centerlines] or [np.zeros((0, 3), np.int64)]
        return CenterlineSet(np.concatenate(coords), self.spacing)

    def proximity(self, cfg: ProximityConfig = ProximityConfig()) -> np.ndarray:
        """Normalized proximity target for the whole volume."""
        return proximity_target(self.dims, self.all_centerlines(), cfg)

    def slab(self, start: int, stop: int) -> "LabeledVolume":
        """Slices ``start:stop`` along D; centerlines are clipped and shifted."""
        if not 0 <= start < stop <= self.dims[0]:
            raise ValueError(f"slab {start}:{stop} outside depth {self.dims[0]}")
        cls = []
        for c in self.centerlines:
            keep = (c.coords[:, 0] >= start) & (c.coords[:, 0] < stop)
            if keep.any():
                cls.append(CenterlineSet(c.coords[keep] - [start, 0, 0], c.spacing))
        return LabeledVolume(self.image[start:stop].copy(), self.labels[start:stop].copy(),
                             self.instances[start:stop].copy(), cls, self.spacing)

    def truncated(self, fraction: float) -> "LabeledVolume":
        """Keep the leading ``fraction`` of slices along D (at least one)."""
        if not 0 < fraction <= 1:
            raise ValueError(f"data fraction must lie in (0, 1], got {fraction}")
        return self.slab(0, max(1, int(round(self.dims[0] * fraction))))


def _bezier(ctrl: np.ndarray, t: np.ndarray) -> np.ndarray:
    t = t[:, None]
    u = 1.0 - t
    return (u ** 3) * ctrl[0] + 3 * (u ** 2) * t * ctrl[1] + 3 * u * (t ** 2) * ctrl[2] + (t ** 3) * ctrl[3]


def _random_tube(cfg: PhantomConfig, rng: np.random.Generator):
    dims = np.array(cfg.dims, dtype=float)
    r0 = rng.uniform(*cfg.radius_range)
    rmax = min(r0 * 1.25, cfg.radius_range[1])
    lo = np.full(3, rmax + 1.0)
    hi = dims - rmax - 2.0
    start = rng.uniform(lo, hi)
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    length = rng.uniform(0.35, 0.7) * dims[1:].min()
    pts = [start]
    for _ in range(3):
        direction = direction + cfg.curvature * rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        pts.append(np.clip(pts[-1] + direction * length / 3.0, lo, hi))
    ctrl = np.array(pts)
    arc = np.linalg.norm(np.diff(ctrl, axis=0), axis=1).sum()
    t = np.linspace(0.0, 1.0, max(8, int(np.ceil(arc * 4))))
    curve = _bezier(ctrl, t)
    phase = rng.uniform(0, 2 * np.pi)
    radius = np.clip(r0 * (1.0 + 0.2 * np.sin(2 * np.pi * 1.5 * t + phase)), 1.0, rmax)
    return curve, radius


def _voxelize(curve: np.ndarray, radius: np.ndarray, dims):
    rmax = radius.max()
    lo = np.maximum(np.floor(curve.min(axis=0) - rmax - 1).astype(int), 0)
    hi = np.minimum(np.ceil(curve.max(axis=0) + rmax + 2).astype(int), dims)
    grid = np.stack(np.meshgrid(*[np.arange(a, b) for a, b in zip(lo, hi)], indexing="ij"), -1)
    pts = grid.reshape(-1, 3).astype(float)
    dist, idx = cKDTree(curve).query(pts)
    inside = dist <= radius[idx]
    return grid.reshape(-1, 3)[inside]


def generate(cfg: PhantomConfig) -> LabeledVolume:
    """Deterministic phantom for ``cfg.seed``."""
    cfg.validate()
    rng = make_rng(cfg.seed)
    dims = cfg.dims
    instances = np.zeros(dims, dtype=np.int32)
    blocked = np.zeros(dims, dtype=bool)
    struct = ndimage.generate_binary_structure(3, 3)
    n = int(rng.integers(cfg.instance_count[0], cfg.instance_count[1] + 1))
    centerlines = []
    for k in range(1, n + 1):
        for _ in range(cfg.max_retries):
            curve, radius = _random_tube(cfg, rng)
            vox = _voxelize(curve, radius, dims)
            if vox.size and not blocked[tuple(vox.T)].any():
                break
        else:
            raise RuntimeError(
                f"could not place instance {k} of {n} without overlap after {cfg.max_retries} "
                "attempts; lower the instance count or radius range")
        instances[tuple(vox.T)] = k
        # keep a one-voxel gap so instances stay separate under 26-connectivity
        blocked |= ndimage.binary_dilation(instances == k, structure=struct)
        cl = np.unique(np.rint(curve).astype(np.int64), axis=0)
        cl = cl[instances[tuple(cl.T)] == k]
        centerlines.append(CenterlineSet(cl, cfg.spacing))
    labels = (instances > 0).astype(np.uint8)
    image = _render(labels, cfg, rng)
    return LabeledVolume(image, labels, instances, centerlines, cfg.spacing)


def _render(labels: np.ndarray, cfg: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    shape = labels.shape
    tex = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=2.0)
    tex = np.tanh(tex / (tex.std() + 1e-12))                  # bounded texture in (-1, 1)
    background = 0.3 + 0.1 * tex
    if cfg.clutter_density > 0:
        dots = rng.random(shape) < cfg.clutter_density
        blobs = ndimage.gaussian_filter(dots.astype(float), sigma=1.0)
        background = background + 0.15 * blobs / max(blobs.max(), 1e-12)
    fg = labels.astype(bool)
    image = background.copy()
    image[fg] = 0.3 + 0.5 * cfg.contrast + 0.05 * tex[fg]
    if cfg.noise_std > 0:
        image = image + cfg.noise_std * rng.standard_normal(shape)
    lo, hi = image.min(), image.max()
    return (image - lo) / (hi - lo) if hi > lo else np.zeros(shape)


# ---------------------------------------------------------------------------
# crops and augmentation
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    image: np.ndarray
    labels: np.ndarray
    proximity: np.ndarray | None = None
    instances: np.ndarray | None = None

    def arrays(self):
        return [a for a in (self.image, self.labels, self.proximity, self.instances) if a is not None]

    def map(self, fn) -> "Sample":
        def f(a):
            return None if a is None else np.ascontiguousarray(fn(a))
        return Sample(f(self.image), f(self.labels), f(self.proximity), f(self.instances))


AUGMENT_OPS = ("sagittal-flip", "transpose-HW", "rot90")


def transform(a: np.ndarray, op: str, k: int = 1) -> np.ndarray:
    """Apply one in-plane voxel permutation to the last two axes (H, W)."""
    if op == "sagittal-flip":
        return a[..., ::-1]
    if op in ("transpose-HW", "rot90") and a.shape[-1] != a.shape[-2]:
        if op == "transpose-HW" or k % 2:
            raise ValueError(f"{op} needs square H-W planes, got {a.shape[-2:]}")
    if op == "transpose-HW":
        return np.swapaxes(a, -1, -2)
    if op == "rot90":
        return np.rot90(a, k % 4, axes=(-2, -1))
    raise ValueError(f"unknown augmentation {op!r}")


def augment(s: Sample, op: str, rng: np.random.Generator | None = None, k: int | None = None) -> Sample:
    """Apply ``op`` to every array of the sample. For ``rot90`` the number of
    quarter turns is ``k`` or drawn from ``rng``."""
    if op == "rot90" and k is None:
        if rng is None:
            raise ValueError("rot90 needs k or an rng")
        k = int(rng.integers(1, 4))
    return s.map(lambda a: transform(a, op, 1 if k is None else k))


def random_augment(s: Sample, rng: np.random.Generator) -> Sample:
    """Flip, transpose and rotate with probability 1/2 each (rotation by a
    random number of quarter turns)."""
    square = s.image.shape[-1] == s.image.shape[-2]
    if rng.random() < 0.5:
        s = augment(s, "sagittal-flip")
    if square and rng.random() < 0.5:
        s = augment(s, "transpose-HW")
    if square and rng.random() < 0.5:
        s = augment(s, "rot90", rng)
    return s


def random_crop(s: Sample, crop, rng: np.random.Generator) -> Sample:
    dims = s.image.shape
    crop = tuple(int(c) for c in crop)
    if any(c > d for c, d in zip(crop, dims)):
        raise ValueError(f"crop {crop} larger than volume {dims}")
    corner = [int(rng.integers(0, d - c + 1)) for c, d in zip(crop, dims)]
    sl = tuple(slice(a, a + c) for a, c in zip(corner, crop))
    return s.map(lambda a: a[sl])


def crop_corner(dims, crop, rng: np.random.Generator) -> tuple[int, int, int]:
    """The corner :func:`random_crop` would pick for the same rng state."""
    return tuple(int(rng.integers(0, d - c + 1)) for c, d in zip(crop, dims))
