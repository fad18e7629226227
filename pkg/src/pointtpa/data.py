"""Synthetic indoor scenes, point-cloud file formats and segmentation metrics."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

PRIMITIVES = ("plane", "wall", "box", "sphere", "cylinder")


class FormatError(ValueError):
    pass


@dataclass
class PointCloud:
    coords: np.ndarray  # N x 3
    features: np.ndarray  # N x C_in
    labels: np.ndarray  # N, -1 = unlabeled

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        n = len(self.coords)
        if n < 1:
            raise ValueError("empty point cloud")
        self.features = np.asarray(self.features, dtype=np.float64).reshape(n, -1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(n)
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("invalid coordinate")
        if np.any(self.labels < -1):
            raise ValueError("labels must be >= -1")

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def in_channels(self) -> int:
        return self.features.shape[1]

    def permuted(self, perm) -> "PointCloud":
        return PointCloud(self.coords[perm], self.features[perm], self.labels[perm])


# -- scene generation ------------------------------------------------------------


@dataclass
class ClassRecipe:
    name: str
    primitive: str
    frequency: float
    color: tuple[float, float, float] = (0.5, 0.5, 0.5)
    instances: tuple[int, int] = (1, 1)
    size: tuple[float, float] = (0.5, 1.0)  # footprint side, or radius
    height: tuple[float, float] = (0.5, 1.0)
    elevation: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.primitive not in PRIMITIVES:
            raise ValueError(f"unknown primitive {self.primitive!r}")


@dataclass
class SceneSpec:
    """Room-scale scene recipe; the class id of a recipe is its list index."""

    recipes: list[ClassRecipe]
    room: tuple[float, float] = (4.0, 7.0)
    wall_height: float = 2.5
    n_points: int = 2048
    jitter: float = 0.01
    color_noise: float = 0.05
    lighting: tuple[float, float] = (1.0, 1.0)
    light_gradient: float = 0.0  # relative brightness change across the room along a random direction
    seed: int = 0

    def __post_init__(self):
        self.recipes = [r if isinstance(r, ClassRecipe) else ClassRecipe(**r) for r in self.recipes]

    @property
    def num_classes(self) -> int:
        return len(self.recipes)

    @property
    def frequencies(self) -> np.ndarray:
        f = np.array([r.frequency for r in self.recipes], dtype=np.float64)
        return f / f.sum()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene spec keys: {sorted(unknown)}")
        d = dict(d)
        d["recipes"] = [ClassRecipe(**{k: tuple(v) if isinstance(v, list) else v for k, v in r.items()}) for r in d.get("recipes", [])]
        for k in ("room", "lighting"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SceneSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def allocate(total: int, frequencies: np.ndarray) -> np.ndarray:
    """Largest-remainder split of ``total`` points by ``frequencies``."""
    raw = frequencies * total
    counts = np.floor(raw).astype(np.int64)
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[: total - counts.sum()]] += 1
    return counts


def _yaw(points: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    out = points.copy()
    out[:, 0] = c * points[:, 0] - s * points[:, 1]
    out[:, 1] = s * points[:, 0] + c * points[:, 1]
    return out


def _box_surface(rng, n, w, d, h) -> np.ndarray:
    # five faces (no bottom), area-weighted, centered on the footprint
    areas = np.array([w * d, w * h, w * h, d * h, d * h])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u, v = rng.random(n), rng.random(n)
    pts = np.empty((n, 3))
    x, y, z = (u - 0.5) * w, (u - 0.5) * d, v * h
    pts[:] = np.stack([x, (v - 0.5) * d, np.full(n, h)], axis=1)
    side = face == 1
    pts[side] = np.stack([x, np.full(n, -d / 2), z], axis=1)[side]
    side = face == 2
    pts[side] = np.stack([x, np.full(n, d / 2), z], axis=1)[side]
    side = face == 3
    pts[side] = np.stack([np.full(n, -w / 2), y, z], axis=1)[side]
    side = face == 4
    pts[side] = np.stack([np.full(n, w / 2), y, z], axis=1)[side]
    return pts


def _sample_instance(rng, recipe: ClassRecipe, n: int, lx: float, ly: float, wall_h: float) -> np.ndarray:
    size = rng.uniform(*recipe.size)
    height = rng.uniform(*recipe.height)
    base = rng.uniform(*recipe.elevation)
    if recipe.primitive == "plane":
        return np.stack([rng.uniform(0, lx, n), rng.uniform(0, ly, n), np.full(n, base)], axis=1)
    if recipe.primitive == "wall":
        t = rng.uniform(0, 2 * (lx + ly), n)
        x = np.select([t < lx, t < lx + ly, t < 2 * lx + ly], [t, lx, 2 * lx + ly - t], 0.0)
        y = np.select([t < lx, t < lx + ly, t < 2 * lx + ly], [0.0, t - lx, ly], 2 * (lx + ly) - t)
        return np.stack([x, y, rng.uniform(0, wall_h, n)], axis=1)
    margin = size
    center = np.array([rng.uniform(margin, max(margin, lx - margin)), rng.uniform(margin, max(margin, ly - margin)), base])
    if recipe.primitive == "box":
        depth = size * rng.uniform(0.5, 1.0)
        pts = _yaw(_box_surface(rng, n, size, depth, height), rng.uniform(0, np.pi))
    elif recipe.primitive == "sphere":
        v = rng.normal(size=(n, 3))
        pts = size * v / np.linalg.norm(v, axis=1, keepdims=True)
        pts[:, 2] += size
    else:  # cylinder: lateral surface plus the top disc
        lateral = 2 * np.pi * size * height
        top = np.pi * size**2
        on_top = rng.random(n) < top / (lateral + top)
        theta = rng.uniform(0, 2 * np.pi, n)
        r = np.where(on_top, size * np.sqrt(rng.random(n)), size)
        z = np.where(on_top, height, rng.uniform(0, height, n))
        pts = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    return pts + center


def generate_scene(spec: SceneSpec, seed: int | None = None) -> PointCloud:
    """Sample one labeled scene; features are ``xyz`` followed by an RGB triple."""
    if not spec.recipes:
        raise ValueError("scene spec has no class recipes")
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    lx, ly = rng.uniform(*spec.room, size=2)
    light = rng.uniform(*spec.lighting)
    counts = allocate(spec.n_points, spec.frequencies)
    coords, albedo, noise, labels = [], [], [], []
    for cls, (recipe, count) in enumerate(zip(spec.recipes, counts)):
        if count == 0:
            continue
        k = int(rng.integers(recipe.instances[0], recipe.instances[1] + 1))
        k = max(1, min(k, count))
        for n in allocate(int(count), np.full(k, 1.0 / k)):
            coords.append(_sample_instance(rng, recipe, int(n), lx, ly, spec.wall_height))
        albedo.append(np.tile(recipe.color, (count, 1)))
        noise.append(spec.color_noise * rng.normal(size=(count, 3)))
        labels.append(np.full(count, cls))
    xyz = np.concatenate(coords) + spec.jitter * rng.normal(size=(spec.n_points, 3))
    shade = np.full(spec.n_points, light)
    if spec.light_gradient:
        angle = rng.uniform(0, 2 * np.pi)
        rel = xyz[:, :2] - np.array([lx, ly]) / 2
        along = (rel[:, 0] * np.cos(angle) + rel[:, 1] * np.sin(angle)) / (np.hypot(lx, ly) / 2)
        shade = shade * (1 + spec.light_gradient * np.clip(along, -1, 1))
    colors = np.clip(shade[:, None] * np.concatenate(albedo) + np.concatenate(noise), 0, 1)
    feats = np.concatenate([xyz, colors], axis=1)
    return PointCloud(xyz, feats, np.concatenate(labels))


def class_histogram(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    return np.bincount(labels[labels >= 0], minlength=num_classes)


# -- file formats ------------------------------------------------------------------

TEXT_TAG = "PTPA-TEXT"
BIN_MAGIC = b"PTPA"
FORMAT_VERSION = 1


def write_text(path, cloud: PointCloud) -> None:
    lines = [f"{TEXT_TAG} {FORMAT_VERSION} {len(cloud)} {cloud.in_channels}"]
    for xyz, f, lab in zip(cloud.coords, cloud.features, cloud.labels):
        vals = " ".join(repr(float(v)) for v in (*xyz, *f))
        lines.append(f"{vals} {int(lab)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_text(path) -> PointCloud:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise FormatError("empty file at byte offset 0")
    head = lines[0].split()
    if len(head) != 4 or head[0] != TEXT_TAG:
        raise FormatError("bad header at byte offset 0")
    if int(head[1]) != FORMAT_VERSION:
        raise FormatError(f"unsupported version {head[1]} at byte offset {len(head[0]) + 1}")
    n, c = int(head[2]), int(head[3])
    body = lines[1 : n + 1]
    if len(body) != n:
        offset = sum(len(line) + 1 for line in lines)
        raise FormatError(f"expected {n} records, found {len(body)} (truncated at byte offset {offset})")
    rows = [line.split() for line in body]
    offset = len(lines[0]) + 1
    for line, row in zip(body, rows):
        if len(row) != 4 + c:
            raise FormatError(f"malformed record at byte offset {offset}")
        offset += len(line) + 1
    values = np.array([[float(v) for v in row[:-1]] for row in rows], dtype=np.float64).reshape(n, 3 + c)
    labels = np.array([int(row[-1]) for row in rows], dtype=np.int64)
    return PointCloud(values[:, :3], values[:, 3:], labels)


def _record_dtype(c: int) -> np.dtype:
    return np.dtype([("xyz", "<f8", (3,)), ("f", "<f8", (c,)), ("label", "<i4")])


def encode_binary(cloud: PointCloud) -> bytes:
    rec = np.zeros(len(cloud), dtype=_record_dtype(cloud.in_channels))
    rec["xyz"] = cloud.coords
    rec["f"] = cloud.features
    rec["label"] = cloud.labels
    return BIN_MAGIC + struct.pack("<III", FORMAT_VERSION, len(cloud), cloud.in_channels) + rec.tobytes()


def decode_binary(blob: bytes) -> PointCloud:
    if len(blob) < 16:
        raise FormatError(f"truncated header at byte offset {len(blob)}")
    if blob[:4] != BIN_MAGIC:
        raise FormatError("bad magic at byte offset 0")
    version, n, c = struct.unpack("<III", blob[4:16])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version} at byte offset 4")
    dt = _record_dtype(c)
    need = 16 + n * dt.itemsize
    if len(blob) < need:
        done = (len(blob) - 16) // dt.itemsize
        raise FormatError(f"truncated record {done} at byte offset {16 + done * dt.itemsize}")
    if len(blob) > need:
        raise FormatError(f"trailing bytes at byte offset {need}")
    rec = np.frombuffer(blob, dtype=dt, count=n, offset=16)
    return PointCloud(rec["xyz"].copy(), rec["f"].reshape(n, c).copy(), rec["label"].astype(np.int64))


def write_binary(path, cloud: PointCloud) -> None:
    Path(path).write_bytes(encode_binary(cloud))


def read_binary(path) -> PointCloud:
    return decode_binary(Path(path).read_bytes())


def read_cloud(path) -> PointCloud:
    return read_text(path) if str(path).endswith(".ptxt") else read_binary(path)


def write_cloud(path, cloud: PointCloud) -> None:
    if str(path).endswith(".ptxt"):
        write_text(path, cloud)
    else:
        write_binary(path, cloud)


# -- metrics -----------------------------------------------------------------------


def confusion_matrix(pred, labels, num_classes: int) -> np.ndarray:
    """Rows are ground truth, columns predictions; label -1 is skipped."""
    pred, labels = np.asarray(pred), np.asarray(labels)
    keep = labels >= 0
    idx = labels[keep] * num_classes + pred[keep]
    return np.bincount(idx, minlength=num_classes**2).reshape(num_classes, num_classes)


@dataclass
class SegMetrics:
    miou: float
    macc: float
    allacc: float
    per_class_iou: list = field(default_factory=list)
    confusion: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def metrics(cm) -> SegMetrics:
    """mIoU / mAcc over classes present in the ground truth, plus overall accuracy.

    ``per_class_iou`` holds ``None`` for classes absent from both ground truth
    and predictions.
    """
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(cm)
    gt = cm.sum(axis=1)
    pr = cm.sum(axis=0)
    union = gt + pr - tp
    present = gt > 0
    iou = np.divide(tp, union, out=np.zeros_like(tp), where=union > 0)
    acc = np.divide(tp, gt, out=np.zeros_like(tp), where=present)
    return SegMetrics(
        miou=float(iou[present].mean()),
        macc=float(acc[present].mean()),
        allacc=float(tp.sum() / total),
        per_class_iou=[float(v) if u > 0 else None for v, u in zip(iou, union)],
        confusion=cm.astype(np.int64).tolist(),
    )


# -- built-in distributions ----------------------------------------------------------

CLASS_NAMES = ("floor", "wall", "table", "cabinet", "chair", "clutter")


def pretrain_spec(seed: int = 0, n_points: int = 2048) -> SceneSpec:
    """Source distribution: warm palette, spherical clutter, fixed lighting."""
    recipes = [
        ClassRecipe("floor", "plane", 0.45, (0.55, 0.40, 0.25)),
        ClassRecipe("wall", "wall", 0.25, (0.85, 0.82, 0.75)),
        ClassRecipe("table", "box", 0.10, (0.35, 0.20, 0.10), (1, 2), (0.8, 1.4), (0.04, 0.08), (0.65, 0.8)),
        ClassRecipe("cabinet", "box", 0.08, (0.90, 0.90, 0.90), (1, 2), (0.5, 0.9), (1.0, 2.0)),
        ClassRecipe("chair", "box", 0.07, (0.70, 0.10, 0.10), (1, 3), (0.35, 0.5), (0.4, 0.9)),
        ClassRecipe("clutter", "sphere", 0.05, (0.10, 0.30, 0.80), (2, 4), (0.1, 0.3)),
    ]
    return SceneSpec(recipes, n_points=n_points, seed=seed)


def downstream_spec(seed: int = 0, n_points: int = 2048) -> SceneSpec:
    """Target distribution: cool palette, cylindrical clutter, uneven lighting within and across scenes."""
    recipes = [
        ClassRecipe("floor", "plane", 0.42, (0.50, 0.50, 0.50)),
        ClassRecipe("wall", "wall", 0.24, (0.60, 0.70, 0.80)),
        ClassRecipe("table", "box", 0.10, (0.80, 0.60, 0.40), (1, 3), (0.6, 1.2), (0.04, 0.08), (0.7, 0.9)),
        ClassRecipe("cabinet", "box", 0.06, (0.45, 0.35, 0.35), (1, 1), (0.4, 0.7), (1.2, 2.2)),
        ClassRecipe("chair", "box", 0.10, (0.30, 0.60, 0.30), (3, 6), (0.35, 0.5), (0.4, 0.9)),
        ClassRecipe("clutter", "cylinder", 0.08, (0.90, 0.80, 0.10), (2, 5), (0.1, 0.25), (0.2, 0.6)),
    ]
    return SceneSpec(recipes, n_points=n_points, color_noise=0.08, lighting=(0.6, 1.4), light_gradient=0.5, seed=seed)


BUILTIN_SPECS = {"pretrain": pretrain_spec, "downstream": downstream_spec}


def resolve_spec(name_or_path, n_points: int | None = None) -> SceneSpec:
    """A built-in spec name (``pretrain`` / ``downstream``) or a JSON file path."""
    if str(name_or_path) in BUILTIN_SPECS:
        spec = BUILTIN_SPECS[str(name_or_path)]()
    else:
        spec = SceneSpec.load(name_or_path)
    if n_points is not None:
        spec.n_points = n_points
    return spec
