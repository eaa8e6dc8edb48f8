"""Distance-to-centerline fields and the exponential proximity score map."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class CenterlineSet:
    coords: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.int64)
        if c.size == 0:
            c = c.reshape(0, 3)
        if c.ndim != 2 or c.shape[1] != 3:
            raise ValueError(f"centerline coordinates must be (M, 3), got {c.shape}")
        self.coords = c
        self.spacing = tuple(float(s) for s in self.spacing)

    def __len__(self):
        return len(self.coords)

    def check_bounds(self, dims) -> None:
        if len(self.coords) == 0:
            return
        bad = np.any((self.coords < 0) | (self.coords >= np.asarray(dims)), axis=1)
        if bad.any():
            raise ValueError(
                f"centerline voxel {tuple(self.coords[bad][0])} lies outside volume {tuple(dims)}")

    def shifted(self, offset) -> "CenterlineSet":
        return CenterlineSet(self.coords + np.asarray(offset, dtype=np.int64), self.spacing)


@dataclass(frozen=True)
class ProximityConfig:
    alpha: float = 3.0
    d_max: float = 15.0

    def __post_init__(self):
        if not self.alpha > 0 or not self.d_max > 0:
            raise ValueError("alpha and d_max must be positive")

    @property
    def peak(self) -> float:
        return float(np.expm1(self.alpha))


def _edt_1d(f: np.ndarray, w2: float) -> np.ndarray:
    """Lower envelope of parabolas ``w2*(q - i)^2 + f[i]`` for every ``q``.

    Squared-distance transform of one scan line (Felzenszwalb-Huttenlocher).
    ``f`` may hold ``inf`` for sites that carry no seed.
    """
    n = f.size
    sites = np.flatnonzero(np.isfinite(f))
    if sites.size == 0:
        return np.full(n, np.inf)
    fl = f.tolist()
    v = [int(sites[0])]
    z = [-np.inf]
    for q in sites[1:].tolist():
        fq = fl[q] + w2 * q * q
        while True:
            p = v[-1]
            s = (fq - (fl[p] + w2 * p * p)) / (2.0 * w2 * (q - p))
            if s > z[-1]:
                break
            v.pop()
            z.pop()
        v.append(q)
        z.append(s)
    # parabola v[k] owns the interval [z[k], z[k+1]]
    owner = np.asarray(v)[np.searchsorted(np.asarray(z[1:]), np.arange(n), side="left")]
    return w2 * (np.arange(n) - owner) ** 2 + f[owner]


def squared_distance_transform(seeds: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Exact squared Euclidean distance from every voxel to the nearest seed.

    Separable: one 1-D lower-envelope pass per axis.
    """
    g = np.where(np.asarray(seeds, dtype=bool), 0.0, np.inf)
    for axis, sp in enumerate(spacing):
        g = np.apply_along_axis(_edt_1d, axis, g, float(sp) ** 2)
    return g


def distance_transform(dims, c: CenterlineSet) -> np.ndarray:
    """Euclidean distance from each voxel centre to the nearest centerline
    voxel, honouring ``c.spacing``; ``inf`` everywhere when ``c`` is empty."""
    dims = tuple(int(d) for d in dims)
    c.check_bounds(dims)
    seeds = np.zeros(dims, dtype=bool)
    if len(c):
        seeds[tuple(c.coords.T)] = True
    return np.sqrt(squared_distance_transform(seeds, c.spacing))


def proximity_map(d_c: np.ndarray, cfg: ProximityConfig = ProximityConfig()) -> np.ndarray:
    """``exp(alpha * (1 - d/d_max)) - 1`` inside ``d < d_max``, zero elsewhere."""
    d_c = np.asarray(d_c, dtype=np.float64)
    if np.any(d_c < 0):
        raise ValueError("distances must be non-negative")
    out = np.zeros_like(d_c)
    inside = d_c < cfg.d_max
    out[inside] = np.expm1(cfg.alpha * (1.0 - d_c[inside] / cfg.d_max))
    return out


def normalize_proximity(m: np.ndarray, cfg: ProximityConfig = ProximityConfig()) -> np.ndarray:
    """Rescale a proximity map into [0, 1] (sigmoid head range)."""
    return np.asarray(m, dtype=np.float64) / cfg.peak


def denormalize_proximity(m: np.ndarray, cfg: ProximityConfig = ProximityConfig()) -> np.ndarray:
    return np.asarray(m, dtype=np.float64) * cfg.peak


def proximity_target(dims, c: CenterlineSet, cfg: ProximityConfig = ProximityConfig()) -> np.ndarray:
    """Normalized regression target for a volume of shape ``dims``."""
    return normalize_proximity(proximity_map(distance_transform(dims, c), cfg), cfg)


# ---------------------------------------------------------------------------
# side files
# ---------------------------------------------------------------------------

def write_centerlines(path, c: CenterlineSet, comment: str | None = None) -> None:
    lines = []
    if comment:
        lines.extend(f"# {ln}" for ln in comment.splitlines())
    lines.append("# spacing {} {} {}".format(*c.spacing))
    lines.extend(f"{d} {h} {w}" for d, h, w in c.coords)
    Path(path).write_text("\n".join(lines) + "\n")


def read_centerlines(path, spacing=None) -> CenterlineSet:
    """Parse a ``d h w`` per line file; ``#`` starts a comment. A
    ``# spacing a b c`` comment sets the spacing unless ``spacing`` is given."""
    coords = []
    found_spacing = None
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line, _, comment = raw.partition("#")
        parts = comment.split()
        if parts[:1] == ["spacing"] and len(parts) == 4:
            found_spacing = tuple(float(v) for v in parts[1:])
        line = line.strip()
        if not line:
            continue
        toks = line.split()
        if len(toks) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'd h w', got {line!r}")
        try:
            coords.append(tuple(int(t) for t in toks))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-integer coordinate in {line!r}") from None
    return CenterlineSet(np.array(coords, dtype=np.int64).reshape(-1, 3),
                         spacing or found_spacing or (1.0, 1.0, 1.0))
