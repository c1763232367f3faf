"""Synthetic shape generation, foreground+background composition,
normalization, and simple point-cloud file formats (xyz with an optional
mask column, OFF vertices).
"""

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geom
from .errors import (ConfigError, ContractError, CountError, DegeneracyError,
                     ParseError)

SHAPE_CLASSES = ("sphere", "cube", "cylinder", "cone", "torus", "plane")


def _shape_rng(seed, *tags):
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for t in tags:
        digest = hashlib.sha256(str(t).encode()).digest()
        key.append(int.from_bytes(digest[:8], "little"))
    return np.random.default_rng(np.random.SeedSequence(key))


def _antithetic(base, n, flip):
    """Pair each sampled point with its mirror so the centroid vanishes by
    construction (odd n keeps one unpaired point)."""
    half = base[: (n + 1) // 2]
    return np.concatenate([half, flip(half)], axis=0)[:n]


def _sample_sphere(rng, n):
    v = rng.standard_normal(((n + 1) // 2, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return _antithetic(v, n, lambda p: -p)


def _sample_cube(rng, n):
    m = (n + 1) // 2
    face = rng.integers(0, 6, m)
    uv = rng.uniform(-1.0, 1.0, (m, 2))
    pts = np.empty((m, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, -1.0, 1.0)
    for i in range(m):
        others = [a for a in range(3) if a != axis[i]]
        pts[i, axis[i]] = sign[i]
        pts[i, others[0]] = uv[i, 0]
        pts[i, others[1]] = uv[i, 1]
    return _antithetic(pts, n, lambda p: -p)


def _sample_cylinder(rng, n, radius=0.7, half_height=1.0):
    lateral = 2.0 * np.pi * radius * 2.0 * half_height
    cap = np.pi * radius * radius
    p_lateral = lateral / (lateral + 2.0 * cap)
    m = (n + 1) // 2
    pts = np.empty((m, 3))
    for i in range(m):
        theta = rng.uniform(0.0, 2.0 * np.pi)
        if rng.uniform() < p_lateral:
            z = rng.uniform(-half_height, half_height)
            r = radius
        else:
            z = half_height if rng.uniform() < 0.5 else -half_height
            r = radius * np.sqrt(rng.uniform())
        pts[i] = (r * np.cos(theta), r * np.sin(theta), z)
    return _antithetic(pts, n, lambda p: -p)


def _sample_cone(rng, n, radius=1.0, height=1.5):
    slant = np.pi * radius * np.sqrt(radius * radius + height * height)
    base = np.pi * radius * radius
    p_lateral = slant / (slant + base)
    m = (n + 1) // 2
    pts = np.empty((m, 3))
    for i in range(m):
        theta = rng.uniform(0.0, 2.0 * np.pi)
        if rng.uniform() < p_lateral:
            t = np.sqrt(rng.uniform())  # area-uniform along the slant
            r = t * radius
            z = height * (1.0 - t)
        else:
            r = radius * np.sqrt(rng.uniform())
            z = 0.0
        pts[i] = (r * np.cos(theta), r * np.sin(theta), z)
    # half-turn about z keeps the surface and zeroes the xy centroid
    return _antithetic(pts, n, lambda p: p * np.array([-1.0, -1.0, 1.0]))


def _sample_torus(rng, n, ring=0.7, tube=0.3):
    m = (n + 1) // 2
    pts = np.empty((m, 3))
    ratio = tube / ring
    i = 0
    while i < m:
        u = rng.uniform(0.0, 2.0 * np.pi)
        v = rng.uniform(0.0, 2.0 * np.pi)
        # area element scales with 1 + (r/R) cos v
        if rng.uniform() >= (1.0 + ratio * np.cos(v)) / (1.0 + ratio):
            continue
        w = ring + tube * np.cos(v)
        pts[i] = (w * np.cos(u), w * np.sin(u), tube * np.sin(v))
        i += 1
    return _antithetic(pts, n, lambda p: -p)


def _sample_plane(rng, n):
    m = (n + 1) // 2
    pts = np.zeros((m, 3))
    pts[:, :2] = rng.uniform(-1.0, 1.0, (m, 2))
    return _antithetic(pts, n, lambda p: -p)


_SAMPLERS = {
    "sphere": _sample_sphere,
    "cube": _sample_cube,
    "cylinder": _sample_cylinder,
    "cone": _sample_cone,
    "torus": _sample_torus,
    "plane": _sample_plane,
}


def generate_shape(name, n, seed, jitter=0.01):
    """n surface points of a parametric shape with per-point jitter,
    centered and scaled to unit bounding radius; deterministic per seed."""
    if name not in _SAMPLERS:
        raise ConfigError(f"unknown shape class {name!r}; choose from {SHAPE_CLASSES}")
    if n < 8:
        raise CountError(f"shape generation needs n >= 8, got {n}")
    rng = _shape_rng(seed, name)
    pts = _SAMPLERS[name](rng, n)
    pts = pts + rng.normal(0.0, jitter, (n, 3))
    cloud = geom.PointCloud(pts, label=SHAPE_CLASSES.index(name))
    return normalize(cloud)


def normalize(cloud):
    """Center at the centroid and scale to unit bounding radius."""
    pts = cloud.points
    centered = pts - pts.mean(axis=0)
    radius = float(np.max(np.linalg.norm(centered, axis=1)))
    if radius <= 0.0:
        raise DegeneracyError("all points coincide; cannot normalize")
    return geom.PointCloud(centered / radius, label=cloud.label,
                           fg_mask=cloud.fg_mask)


def compose_background(fg, donor, n_bg=128, seed=0):
    """Surround a foreground object with task-irrelevant donor points.

    n_bg donor points are sampled without replacement, rescaled so their
    mean 1-NN spacing matches the foreground's, and translated so the
    background ball sits on a random shell 1.2-2.0 foreground radii away
    (its nearest edge, so the two sets never overlap). The composed cloud
    keeps the foreground label; the mask marks foreground points true.
    """
    if fg.label is None or donor.label is None:
        raise ContractError("composition needs labeled foreground and donor clouds")
    if fg.label == donor.label:
        raise ContractError("donor must come from a different class than the foreground")
    if donor.n < n_bg:
        raise CountError(f"donor has {donor.n} points, need {n_bg}")
    if n_bg < 2:
        raise CountError("background needs at least 2 points")
    rng = _shape_rng(seed, "compose")
    pick = rng.choice(donor.n, size=n_bg, replace=False)
    bg = donor.points[pick]
    bg = bg - bg.mean(axis=0)

    scale = geom.mean_nn_distance(fg.points) / geom.mean_nn_distance(bg)
    bg = bg * scale
    bg_radius = float(np.max(np.linalg.norm(bg, axis=1)))

    fg_center = fg.points.mean(axis=0)
    fg_radius = float(np.max(np.linalg.norm(fg.points - fg_center, axis=1)))
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    shell = rng.uniform(1.2, 2.0) * fg_radius
    bg = bg + fg_center + direction * (shell + bg_radius)

    pts = np.concatenate([fg.points, bg], axis=0)
    mask = np.concatenate([np.ones(fg.n, dtype=bool), np.zeros(n_bg, dtype=bool)])
    return geom.PointCloud(pts, label=fg.label, fg_mask=mask)


# ---------------------------------------------------------------------------
# file formats


def save_xyz(cloud, path):
    """One point per line: x y z, plus a 0/1 column when a mask is present
    (1 = foreground)."""
    lines = []
    mask = cloud.fg_mask
    for i, (x, y, z) in enumerate(cloud.points):
        if mask is None:
            lines.append(f"{x:.9g} {y:.9g} {z:.9g}")
        else:
            lines.append(f"{x:.9g} {y:.9g} {z:.9g} {int(mask[i])}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_xyz(path, label=None):
    pts = []
    mask = []
    width = None
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) not in (3, 4):
                raise ParseError(f"{path}: line {lineno}: expected 3 or 4 fields, "
                                 f"got {len(fields)}")
            if width is None:
                width = len(fields)
            elif len(fields) != width:
                raise ParseError(f"{path}: line {lineno}: inconsistent field count")
            try:
                vals = [float(v) for v in fields[:3]]
            except ValueError:
                raise ParseError(f"{path}: line {lineno}: non-numeric coordinate")
            if not all(np.isfinite(v) for v in vals):
                raise ValueError(f"{path}: line {lineno}: non-finite coordinate")
            pts.append(vals)
            if width == 4:
                if fields[3] not in ("0", "1"):
                    raise ParseError(f"{path}: line {lineno}: mask field must be 0 or 1")
                mask.append(fields[3] == "1")
    if not pts:
        raise ParseError(f"{path}: no points found")
    return geom.PointCloud(np.array(pts), label=label,
                           fg_mask=np.array(mask) if mask else None)


def load_off(path, label=None):
    """OFF vertices as the point set; faces are ignored."""
    with open(path, "r") as fh:
        lines = fh.readlines()
    if not lines or lines[0].strip() != "OFF":
        raise ParseError(f"{path}: line 1: expected 'OFF' header")
    if len(lines) < 2:
        raise ParseError(f"{path}: line 2: missing counts line")
    counts = lines[1].split()
    if len(counts) < 2:
        raise ParseError(f"{path}: line 2: expected vertex and face counts")
    try:
        n_vertices = int(counts[0])
    except ValueError:
        raise ParseError(f"{path}: line 2: non-integer vertex count")
    if n_vertices < 1:
        raise ParseError(f"{path}: line 2: vertex count must be >= 1")
    if len(lines) < 2 + n_vertices:
        raise ParseError(f"{path}: line {len(lines)}: file ends before "
                         f"{n_vertices} vertices were read")
    pts = np.empty((n_vertices, 3))
    for i in range(n_vertices):
        lineno = 3 + i
        fields = lines[2 + i].split()
        if len(fields) < 3:
            raise ParseError(f"{path}: line {lineno}: expected 3 coordinates")
        try:
            vals = [float(v) for v in fields[:3]]
        except ValueError:
            raise ParseError(f"{path}: line {lineno}: non-numeric coordinate")
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"{path}: line {lineno}: non-finite coordinate")
        pts[i] = vals
    return geom.PointCloud(pts, label=label)


# ---------------------------------------------------------------------------
# dataset building


@dataclass
class Dataset:
    train: list  # of (PointCloud, label)
    test: list


@dataclass
class DatasetConfig:
    classes: tuple = SHAPE_CLASSES
    train_per_class: int = 30
    test_per_class: int = 10
    n_points: int = 256
    background: bool = False
    n_background: int = 128
    jitter: float = 0.01
    seed: int = 0

    def __post_init__(self):
        self.classes = tuple(self.classes)
        for c in self.classes:
            if c not in SHAPE_CLASSES:
                raise ConfigError(f"unknown shape class {c!r}")
        if self.background and len(self.classes) < 2:
            raise ConfigError("background composition needs at least 2 classes")
        if self.n_points < 8:
            raise ConfigError("n_points must be >= 8")

    @classmethod
    def from_dict(cls, d):
        known = {"classes", "train_per_class", "test_per_class", "n_points",
                 "background", "n_background", "jitter", "seed"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown dataset config fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return {"classes": list(self.classes),
                "train_per_class": self.train_per_class,
                "test_per_class": self.test_per_class,
                "n_points": self.n_points, "background": self.background,
                "n_background": self.n_background, "jitter": self.jitter,
                "seed": self.seed}


def _item_seed(seed, cname, split, index):
    digest = hashlib.sha256(f"{seed}:{cname}:{split}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _make_cloud(config, label, split, index):
    cname = config.classes[label]
    item_seed = _item_seed(config.seed, cname, split, index)
    cloud = generate_shape(cname, config.n_points, item_seed, config.jitter)
    cloud = geom.PointCloud(cloud.points, label=label, fg_mask=cloud.fg_mask)
    if config.background:
        donor_label = (label + 1) % len(config.classes)
        donor_name = config.classes[donor_label]
        donor = generate_shape(donor_name,
                               max(config.n_points, config.n_background),
                               _item_seed(item_seed, donor_name, "donor", index),
                               config.jitter)
        donor = geom.PointCloud(donor.points, label=donor_label)
        cloud = compose_background(cloud, donor, config.n_background,
                                   _item_seed(item_seed, cname, "place", index))
    return cloud


def build_dataset(config, root):
    """Write per-split xyz files plus a manifest; deterministic per seed."""
    root = Path(root)
    manifest = {"root": str(root), "classes": list(config.classes),
                "splits": {"train": [], "test": []},
                "seed": config.seed, "version": 1}
    for split, count in (("train", config.train_per_class),
                         ("test", config.test_per_class)):
        (root / split).mkdir(parents=True, exist_ok=True)
        for label in range(len(config.classes)):
            for j in range(count):
                cloud = _make_cloud(config, label, split, j)
                rel = f"{split}/{config.classes[label]}_{j:04d}.xyz"
                save_xyz(cloud, root / rel)
                manifest["splits"][split].append(
                    {"file": rel, "label": label, "bg": config.background})
    (root / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest


def build_in_memory(config):
    """Generate the same clouds build_dataset would write, without files."""
    splits = {}
    for split, count in (("train", config.train_per_class),
                         ("test", config.test_per_class)):
        items = []
        for label in range(len(config.classes)):
            for j in range(count):
                cloud = _make_cloud(config, label, split, j)
                items.append((cloud, label))
        splits[split] = items
    return Dataset(train=splits["train"], test=splits["test"])


def load_manifest(path):
    """Read a manifest and every cloud it lists; returns (Dataset, manifest)."""
    path = Path(path)
    manifest = json.loads(path.read_text())
    if manifest.get("version") != 1:
        raise ConfigError(f"unsupported manifest version {manifest.get('version')}")
    base = path.parent
    splits = {}
    for split in ("train", "test"):
        items = []
        for entry in manifest["splits"][split]:
            cloud = load_xyz(base / entry["file"], label=entry["label"])
            items.append((cloud, entry["label"]))
        splits[split] = items
    return Dataset(train=splits["train"], test=splits["test"]), manifest
