"""Synthetic 3D volumes: spheres are lesions, tubes are vessel-like
distractors.

Both object kinds share the same radial intensity profile, so a tube
cross-section and a sphere center-slice with matched radii are
indistinguishable on a single slice; only 3D context (a sphere's
cross-section shrinks away from its center slice, a tube's does not)
separates them. Spheres produce one ground-truth box per slice where their
cross-section radius is at least one voxel; tubes produce none.

Volume files: one JSON header line {"dtype":"f32le","shape":[D,H,W],
"volume_id":...} terminated by a newline, then raw little-endian float32
voxels, row-major with W fastest. Boxes travel as JSON lines.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter, zoom

from .errors import ConfigError, GenerationError, VolumeFormatError

__all__ = [
    "VolumeConfig",
    "Sphere",
    "Tube",
    "SyntheticVolume",
    "generate_volume",
    "write_volume",
    "read_volume",
    "write_boxes_jsonl",
    "read_boxes_jsonl",
]


@dataclass(frozen=True)
class VolumeConfig:
    depth: int = 16
    height: int = 64
    width: int = 64
    lesion_count: tuple = (1, 3)
    lesion_radius: tuple = (2.0, 4.0)
    tube_count: tuple = (1, 2)
    tube_radius: tuple = (2.0, 3.0)
    noise_sigma: float = 0.05
    tube_jitter: float = 0.3
    background_base: float = 0.15
    background_amplitude: float = 0.04
    bump_height: float = 0.5
    edge_width: float = 0.6
    max_placement_tries: int = 200

    def __post_init__(self):
        if min(self.depth, self.height, self.width) < 16:
            raise ConfigError("volume extents must be at least 16 voxels")
        for name, rng_ in (("lesion_count", self.lesion_count),
                           ("tube_count", self.tube_count),
                           ("lesion_radius", self.lesion_radius),
                           ("tube_radius", self.tube_radius)):
            if len(rng_) != 2 or rng_[0] > rng_[1]:
                raise ConfigError(f"{name} must be a (low, high) range")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")


@dataclass(frozen=True)
class Sphere:
    cx: float
    cy: float
    cz: float
    radius: float


@dataclass(frozen=True)
class Tube:
    # per-slice (x, y) center for slices [z0, z0+len(path))
    z0: int
    path: np.ndarray  # (length, 2)
    radius: float


@dataclass
class SyntheticVolume:
    volume_id: str
    voxels: np.ndarray  # (D, H, W) float32 in [0, 1]
    spheres: list = field(default_factory=list)
    tubes: list = field(default_factory=list)
    gt_boxes: list = field(default_factory=list)  # (slice, x1, y1, x2, y2)


def radial_bump(dist: np.ndarray, radius: float, height: float, edge: float) -> np.ndarray:
    """Soft-edged intensity profile shared by spheres and tubes."""
    return height / (1.0 + np.exp((dist - radius) / edge))


def sphere_gt_boxes(sphere: Sphere, depth: int) -> list:
    """One square box per slice with cross-section half-side >= 1 voxel."""
    boxes = []
    for z in range(depth):
        dz = z - sphere.cz
        if abs(dz) >= sphere.radius:
            continue
        half = float(np.sqrt(sphere.radius ** 2 - dz ** 2))
        if half < 1.0:
            continue
        boxes.append((z, sphere.cx - half, sphere.cy - half,
                      sphere.cx + half, sphere.cy + half))
    return boxes


def _place_spheres(rng, cfg: VolumeConfig) -> list:
    count = int(rng.integers(cfg.lesion_count[0], cfg.lesion_count[1] + 1))
    spheres = []
    for _ in range(count):
        for _attempt in range(cfg.max_placement_tries):
            r = float(rng.uniform(*cfg.lesion_radius))
            margin = r + 2.0
            cx = float(rng.uniform(margin, cfg.width - margin))
            cy = float(rng.uniform(margin, cfg.height - margin))
            cz = float(rng.uniform(r, cfg.depth - r))
            ok = all(
                np.hypot(np.hypot(cx - s.cx, cy - s.cy), cz - s.cz) > r + s.radius + 2.0
                for s in spheres
            )
            if ok:
                spheres.append(Sphere(cx, cy, cz, r))
                break
        else:
            raise GenerationError(
                f"could not place sphere after {cfg.max_placement_tries} tries"
            )
    return spheres


def _place_tubes(rng, cfg: VolumeConfig, spheres: list) -> list:
    count = int(rng.integers(cfg.tube_count[0], cfg.tube_count[1] + 1))
    tubes = []
    for _ in range(count):
        for _attempt in range(cfg.max_placement_tries):
            r = float(rng.uniform(*cfg.tube_radius))
            margin = r + 3.0
            x0 = float(rng.uniform(margin, cfg.width - margin))
            y0 = float(rng.uniform(margin, cfg.height - margin))
            # keep clear of every sphere in the xy plane so tube and lesion
            # bumps never blend into one blob
            ok = all(np.hypot(x0 - s.cx, y0 - s.cy) > r + s.radius + 4.0 for s in spheres)
            ok = ok and all(
                np.hypot(x0 - t.path[0, 0], y0 - t.path[0, 1]) > r + t.radius + 4.0
                for t in tubes
            )
            if not ok:
                continue
            length = cfg.depth  # spans the whole volume (>= 8 slices by config)
            jitter = rng.normal(0.0, cfg.tube_jitter, size=(length, 2)).cumsum(axis=0)
            jitter -= jitter.mean(axis=0, keepdims=True)
            path = np.stack([x0 + jitter[:, 0], y0 + jitter[:, 1]], axis=1)
            path[:, 0] = path[:, 0].clip(margin, cfg.width - margin)
            path[:, 1] = path[:, 1].clip(margin, cfg.height - margin)
            tubes.append(Tube(z0=0, path=path, radius=r))
            break
        else:
            raise GenerationError(
                f"could not place tube after {cfg.max_placement_tries} tries"
            )
    return tubes


def generate_volume(seed: int, cfg: VolumeConfig, volume_id: str = None) -> SyntheticVolume:
    """Deterministic volume for a given (seed, config)."""
    rng = np.random.default_rng(np.random.SeedSequence([0x5EED, seed]))
    d, h, w = cfg.depth, cfg.height, cfg.width

    coarse = rng.normal(0.0, 1.0, size=(max(d // 4, 2), max(h // 8, 2), max(w // 8, 2)))
    background = zoom(coarse, (d / coarse.shape[0], h / coarse.shape[1], w / coarse.shape[2]),
                      order=1, mode="nearest")
    background = gaussian_filter(background, sigma=2.0)
    peak = np.abs(background).max()
    if peak > 0:
        background *= cfg.background_amplitude / peak
    vol = cfg.background_base + background

    spheres = _place_spheres(rng, cfg)
    tubes = _place_tubes(rng, cfg, spheres)

    zz, yy, xx = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    for s in spheres:
        dist = np.sqrt((xx - s.cx) ** 2 + (yy - s.cy) ** 2 + (zz - s.cz) ** 2)
        vol += radial_bump(dist, s.radius, cfg.bump_height, cfg.edge_width)
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    for t in tubes:
        for k in range(t.path.shape[0]):
            z = t.z0 + k
            if not 0 <= z < d:
                continue
            dist = np.sqrt((xs - t.path[k, 0]) ** 2 + (ys - t.path[k, 1]) ** 2)
            vol[z] += radial_bump(dist, t.radius, cfg.bump_height, cfg.edge_width)

    if cfg.noise_sigma > 0:
        vol += rng.normal(0.0, cfg.noise_sigma, size=vol.shape)
    vol = np.clip(vol, 0.0, 1.0).astype(np.float32)

    gt = []
    for s in spheres:
        gt.extend(sphere_gt_boxes(s, d))
    gt.sort(key=lambda b: (b[0], b[1], b[2]))
    return SyntheticVolume(
        volume_id=volume_id or f"vol_{seed:06d}",
        voxels=vol,
        spheres=spheres,
        tubes=tubes,
        gt_boxes=gt,
    )


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def write_volume(path, volume_id: str, voxels: np.ndarray) -> None:
    header = {
        "dtype": "f32le",
        "shape": [int(s) for s in voxels.shape],
        "volume_id": volume_id,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8"))
        f.write(b"\n")
        f.write(np.ascontiguousarray(voxels, dtype="<f4").tobytes())


def read_volume(path) -> tuple[str, np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise VolumeFormatError(f"volume file {path} has no header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise VolumeFormatError(f"volume file {path} has a malformed header: {e}")
    if header.get("dtype") != "f32le" or "shape" not in header:
        raise VolumeFormatError(f"volume file {path} header missing dtype/shape")
    shape = tuple(int(s) for s in header["shape"])
    count = int(np.prod(shape))
    payload = raw[nl + 1 :]
    if len(payload) != count * 4:
        raise VolumeFormatError(
            f"volume file {path} payload has {len(payload)} bytes, expected {count * 4}"
        )
    voxels = np.frombuffer(payload, dtype="<f4").reshape(shape)
    return header.get("volume_id", ""), voxels


def write_boxes_jsonl(path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True))
            f.write("\n")


def read_boxes_jsonl(path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise VolumeFormatError(f"{path}:{line_no}: malformed JSON line: {e}")
    return records
