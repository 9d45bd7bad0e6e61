"""Synthetic airway phantoms: a recursively bifurcating tube tree rasterized
into a CT-like volume, with the lumen as ground truth."""
import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ValidationError
from .preprocess import Volume

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple = (32, 64, 64)
    trunk_radius: float = 4.0
    trunk_length: float = 14.0
    branch_depth: int = 2
    angle_min: float = 25.0
    angle_max: float = 45.0
    radius_decay: float = 0.7
    length_decay: float = 0.8
    hu_lumen: float = -1000.0
    hu_wall: float = 0.0
    hu_parenchyma: float = -800.0
    hu_soft_tissue: float = 40.0
    noise_std: float = 20.0
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValidationError(f"dims must be 3 positive ints, got {self.dims}", field="dims")
        if self.branch_depth < 0:
            raise ValidationError("branch_depth must be >= 0", field="branch_depth")
        if self.trunk_radius * self.radius_decay ** self.branch_depth < 1.0:
            raise ValidationError(
                f"radius at depth {self.branch_depth} falls below 1 voxel "
                f"({self.trunk_radius} * {self.radius_decay}^{self.branch_depth})", field="radius_decay")
        if not 0 <= self.angle_min <= self.angle_max < 90:
            raise ValidationError("need 0 <= angle_min <= angle_max < 90", field="angle_min")
        if self.trunk_length <= 0:
            raise ValidationError("trunk_length must be positive", field="trunk_length")
        d, h, w = self.dims
        r = self.trunk_radius + 1
        if 2 * r + 1 > min(h, w):
            raise ValidationError(f"in-plane dims {h}x{w} cannot hold a trunk of radius {self.trunk_radius}",
                                  field="dims")
        if self.noise_std < 0:
            raise ValidationError("noise_std must be >= 0", field="noise_std")


class Segment(NamedTuple):
    start: np.ndarray
    end: np.ndarray
    radius: float
    generation: int
    has_children: bool


class Phantom(NamedTuple):
    volume: Volume
    mask: Volume
    clipped: int


def _perpendicular_basis(d):
    helper = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(d, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(d, e1)
    return e1, e2


def _inside(p, dims):
    return all(0 <= p[i] <= dims[i] - 1 for i in range(3))


def build_tree(cfg, rng):
    """Segment list and the number of branches cut off at the volume boundary."""
    d, h, w = cfg.dims
    start = np.array([0.0, (h - 1) / 2, (w - 1) / 2])
    direction = np.array([1.0, 0.0, 0.0])
    segments, clipped = [], 0
    pending = [(start, direction, cfg.trunk_length, cfg.trunk_radius, 0)]
    while pending:
        p0, dvec, length, radius, gen = pending.pop(0)
        p1 = p0 + dvec * length
        inside = _inside(p1, cfg.dims)
        branch = gen < cfg.branch_depth
        if branch and not inside:
            # children of an out-of-volume end point could re-enter disconnected
            clipped += 1
            branch = False
        segments.append(Segment(p0, p1, radius, gen, branch))
        if not branch:
            continue
        e1, e2 = _perpendicular_basis(dvec)
        phi = rng.uniform(0, 2 * np.pi)
        u = np.cos(phi) * e1 + np.sin(phi) * e2
        for sign in (1.0, -1.0):
            theta = np.deg2rad(rng.uniform(cfg.angle_min, cfg.angle_max))
            child = np.cos(theta) * dvec + sign * np.sin(theta) * u
            pending.append((p1, child / np.linalg.norm(child), length * cfg.length_decay,
                            radius * cfg.radius_decay, gen + 1))
    return segments, clipped


def _tube_distance(coords, seg):
    """Radial distance to the segment axis; inf where the projection falls outside [0, length)."""
    axis = seg.end - seg.start
    length = np.linalg.norm(axis)
    u = axis / length
    rel = coords - seg.start
    t = rel @ u
    radial = np.linalg.norm(rel - t[..., None] * u, axis=-1)
    return np.where((t >= 0) & (t < length), radial, np.inf)


def rasterize(segments, dims, extra=0.0):
    """Voxels within radius+extra of any tube (plus a ball at every branch point)."""
    zz, yy, xx = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")
    coords = np.stack([zz, yy, xx], axis=-1)
    out = np.zeros(dims, dtype=bool)
    for seg in segments:
        r = seg.radius + extra
        lo = np.maximum(np.floor(np.minimum(seg.start, seg.end) - r - 1), 0).astype(int)
        hi = np.minimum(np.ceil(np.maximum(seg.start, seg.end) + r + 2), dims).astype(int)
        if np.any(hi <= lo):
            continue
        box = tuple(slice(a, b) for a, b in zip(lo, hi))
        sub = coords[box]
        hit = _tube_distance(sub, seg) <= r
        if seg.has_children:
            hit |= np.linalg.norm(sub - seg.end, axis=-1) <= r
        out[box] |= hit
    return out


def gen_phantom(cfg=None, seed=0):
    """CT-like volume (int16 HU) and its lumen mask (uint8); deterministic under ``seed``."""
    cfg = cfg or PhantomConfig()
    rng = np.random.default_rng(seed)
    segments, clipped = build_tree(cfg, rng)
    if clipped:
        log.warning("phantom: %d branch(es) clipped at the volume boundary", clipped)
    lumen = rasterize(segments, cfg.dims)
    wall = rasterize(segments, cfg.dims, extra=1.0) & ~lumen

    d, h, w = cfg.dims
    zz, yy, xx = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    c = [(n - 1) / 2 for n in cfg.dims]
    semi = (0.6 * d, 0.45 * h, 0.45 * w)
    lung = ((zz - c[0]) / semi[0]) ** 2 + ((yy - c[1]) / semi[1]) ** 2 + ((xx - c[2]) / semi[2]) ** 2 <= 1.0

    hu = np.where(lung, cfg.hu_parenchyma, cfg.hu_soft_tissue)
    hu = np.where(wall, cfg.hu_wall, hu)
    hu = np.where(lumen, cfg.hu_lumen, hu)
    if cfg.noise_std > 0:
        hu = hu + rng.normal(0.0, cfg.noise_std, size=hu.shape)
    hu = np.clip(np.round(hu), -1024, 3071).astype(np.int16)
    return Phantom(Volume(hu, cfg.spacing), Volume(lumen.astype(np.uint8), cfg.spacing), clipped)
