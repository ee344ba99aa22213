"""Label types, synthetic LiDAR scene generation and scene persistence.

A scene is a single LiDAR frame in the ego frame. Every point carries an
open-set label: an instance id (``NO_INSTANCE`` when absent) and a semantic
label drawn from the known thing classes, the known stuff classes or
``UNKNOWN``.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

UNKNOWN = -1
NO_INSTANCE = -1

SCENE_MAGIC = b"OSISSCN\x00"
SCENE_VERSION = 1


class SceneFormatError(ValueError):
    """Raised when a scene file is malformed, truncated or corrupted."""


class SceneVersionError(SceneFormatError):
    """Raised when a scene file was written by an unsupported format version."""


@dataclass(frozen=True)
class ClassCatalog:
    """Ordered known thing/stuff classes plus the reserved unknown label."""

    thing_classes: tuple[int, ...]
    stuff_classes: tuple[int, ...]
    names: Mapping[int, str] = field(default_factory=dict)

    def __post_init__(self):
        things, stuff = set(self.thing_classes), set(self.stuff_classes)
        if len(things) != len(self.thing_classes) or len(stuff) != len(self.stuff_classes):
            raise ValueError("duplicate class ids in catalog")
        if things & stuff:
            raise ValueError(f"thing and stuff classes overlap: {sorted(things & stuff)}")
        if UNKNOWN in things | stuff:
            raise ValueError(f"class id {UNKNOWN} is reserved for the unknown label")
        object.__setattr__(self, "thing_classes", tuple(int(c) for c in self.thing_classes))
        object.__setattr__(self, "stuff_classes", tuple(int(c) for c in self.stuff_classes))
        object.__setattr__(self, "names", dict(self.names))

    @property
    def known_classes(self) -> tuple[int, ...]:
        return self.thing_classes + self.stuff_classes

    @property
    def open_set_labels(self) -> tuple[int, ...]:
        return self.known_classes + (UNKNOWN,)

    def is_thing(self, c: int) -> bool:
        return c in self.thing_classes

    def is_stuff(self, c: int) -> bool:
        return c in self.stuff_classes

    def name(self, c: int) -> str:
        if c == UNKNOWN:
            return "unknown"
        return self.names.get(c, f"class{c}")

    def thing_index(self, c: int) -> int:
        return self.thing_classes.index(c)

    def stuff_index(self, c: int) -> int:
        return self.stuff_classes.index(c)


DEFAULT_CATALOG = ClassCatalog(
    thing_classes=(0, 1, 2),
    stuff_classes=(3,),
    names={0: "vehicle", 1: "pedestrian", 2: "motorbike", 3: "road"},
)


@dataclass(frozen=True)
class InstanceBox:
    """BEV box of a known thing instance. ``l`` runs along the heading, ``w`` across it."""

    cx: float
    cy: float
    w: float
    l: float
    theta: float
    cls: int

    def __post_init__(self):
        if not (self.w > 0 and self.l > 0):
            raise ValueError(f"box sizes must be positive, got w={self.w}, l={self.l}")

    def footprint(self) -> tuple[float, float, float, float]:
        """Axis-aligned (xmin, ymin, xmax, ymax) of the rotated box."""
        c, s = abs(math.cos(self.theta)), abs(math.sin(self.theta))
        hx = 0.5 * (self.l * c + self.w * s)
        hy = 0.5 * (self.l * s + self.w * c)
        return (self.cx - hx, self.cy - hy, self.cx + hx, self.cy + hy)


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Scene:
    """A labelled point cloud.

    ``points`` is ``(N, 3)`` float64 in meters, ``intensity`` is ``(N,)`` or
    ``None``. ``instance_ids`` and ``semantics`` are ``(N,)`` int64 arrays.
    ``shapes`` records the generator shape id of every instance.
    """

    points: np.ndarray
    instance_ids: np.ndarray
    semantics: np.ndarray
    boxes: Mapping[int, InstanceBox]
    catalog: ClassCatalog
    seed: int = 0
    intensity: np.ndarray | None = None
    shapes: Mapping[int, str] = field(default_factory=dict)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", _frozen(pts, np.float64))
        object.__setattr__(self, "instance_ids", _frozen(self.instance_ids, np.int64))
        object.__setattr__(self, "semantics", _frozen(self.semantics, np.int64))
        if self.intensity is not None:
            object.__setattr__(self, "intensity", _frozen(self.intensity, np.float64))
        object.__setattr__(self, "boxes", dict(sorted(self.boxes.items())))
        object.__setattr__(self, "shapes", dict(sorted(self.shapes.items())))
        object.__setattr__(self, "seed", int(self.seed))

    def __len__(self) -> int:
        return len(self.points)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        if (self.intensity is None) != (other.intensity is None):
            return False
        return (
            self.points.shape == other.points.shape
            and self.points.tobytes() == other.points.tobytes()
            and np.array_equal(self.instance_ids, other.instance_ids)
            and np.array_equal(self.semantics, other.semantics)
            and (self.intensity is None or self.intensity.tobytes() == other.intensity.tobytes())
            and self.boxes == other.boxes
            and self.catalog == other.catalog
            and self.seed == other.seed
            and self.shapes == other.shapes
        )

    __hash__ = None

    def instances(self) -> dict[int, int]:
        """Map instance id -> semantic label (first occurrence)."""
        ids, first = np.unique(self.instance_ids, return_index=True)
        return {int(i): int(self.semantics[f]) for i, f in zip(ids, first) if i != NO_INSTANCE}

    def thing_instances(self) -> list[int]:
        return sorted(i for i, c in self.instances().items() if self.catalog.is_thing(c))

    def unknown_instances(self) -> list[int]:
        return sorted(i for i, c in self.instances().items() if c == UNKNOWN)


@dataclass(frozen=True)
class Violation:
    rule: str
    index: int
    detail: str


def validate_scene(scene: Scene) -> list[Violation]:
    """Check a scene against the label-consistency rules; ``[]`` means valid."""
    out: list[Violation] = []
    cat = scene.catalog
    n = len(scene.points)
    if len(scene.instance_ids) != n or len(scene.semantics) != n:
        out.append(Violation("length", -1, f"{n} points, {len(scene.instance_ids)} instance ids, "
                                           f"{len(scene.semantics)} semantics"))
        return out
    if scene.intensity is not None and len(scene.intensity) != n:
        out.append(Violation("length", -1, f"{len(scene.intensity)} intensities for {n} points"))

    bad = np.flatnonzero(~np.isfinite(scene.points).all(axis=1))
    for i in bad:
        out.append(Violation("finite", int(i), "non-finite coordinate"))

    valid = np.isin(scene.semantics, np.array(cat.open_set_labels, dtype=np.int64))
    for i in np.flatnonzero(~valid):
        out.append(Violation("semantic_range", int(i), f"label {int(scene.semantics[i])} not in label space"))

    stuff = np.isin(scene.semantics, np.array(cat.stuff_classes, dtype=np.int64))
    for i in np.flatnonzero(stuff & (scene.instance_ids != NO_INSTANCE)):
        out.append(Violation("stuff_instance", int(i),
                             f"stuff point carries instance id {int(scene.instance_ids[i])}"))

    things = np.isin(scene.semantics, np.array(cat.thing_classes, dtype=np.int64))
    for i in np.flatnonzero(things & (scene.instance_ids == NO_INSTANCE)):
        out.append(Violation("thing_without_instance", int(i), "thing point has no instance id"))

    labelled = np.flatnonzero(scene.instance_ids != NO_INSTANCE)
    first_label: dict[int, tuple[int, int]] = {}
    reported: set[int] = set()
    for i in labelled:
        inst, sem = int(scene.instance_ids[i]), int(scene.semantics[i])
        if inst not in first_label:
            first_label[inst] = (sem, int(i))
        elif first_label[inst][0] != sem and inst not in reported:
            reported.add(inst)
            out.append(Violation("instance_semantic", int(i),
                                 f"instance {inst} has labels {first_label[inst][0]} and {sem}"))

    for inst, (sem, i) in sorted(first_label.items()):
        if cat.is_thing(sem) and inst not in scene.boxes:
            out.append(Violation("missing_box", i, f"thing instance {inst} has no box"))
    for inst, box in scene.boxes.items():
        if inst in first_label and first_label[inst][0] != box.cls and inst not in reported:
            out.append(Violation("box_class", first_label[inst][1],
                                 f"instance {inst} box class {box.cls} != label {first_label[inst][0]}"))
    return out


# --------------------------------------------------------------------------
# generation

KNOWN_SHAPES = {"vehicle_body": 0, "pedestrian_body": 1, "motorbike_body": 2}
UNKNOWN_SHAPES = ("crate", "barrel", "l_wall", "cone", "boulder", "blob")


@dataclass(frozen=True)
class SceneGenConfig:
    """Synthetic scene recipe.

    ``roi`` is ``(xmin, ymin, zmin, xmax, ymax, zmax)``. Densities are points
    per square meter of exposed surface, drawn uniformly per object from the
    given range. ``unknown_group_prob`` is the chance an unknown object is
    placed next to a previous unknown, ``unknown_gap`` the surface gap then.
    """

    roi: tuple[float, float, float, float, float, float] = (-8.0, -8.0, -1.0, 8.0, 8.0, 3.0)
    thing_counts: Mapping[int, int] = field(default_factory=lambda: {0: 2, 1: 2, 2: 1})
    unknown_count: int = 3
    unknown_shapes: tuple[str, ...] = ("crate", "barrel", "l_wall")
    ground_density: float = 6.0
    thing_density: Mapping[int, tuple[float, float]] = field(
        default_factory=lambda: {0: (12.0, 18.0), 1: (50.0, 70.0), 2: (30.0, 45.0)})
    unknown_density: tuple[float, float] = (40.0, 60.0)
    noise_sigma: float = 0.02
    object_gap: float = 1.0
    unknown_group_prob: float = 0.5
    unknown_gap: tuple[float, float] = (0.4, 0.8)
    catalog: ClassCatalog = DEFAULT_CATALOG

    def __post_init__(self):
        object.__setattr__(self, "thing_counts", {int(k): int(v) for k, v in dict(self.thing_counts).items()})
        object.__setattr__(self, "thing_density",
                           {int(k): tuple(v) for k, v in dict(self.thing_density).items()})
        object.__setattr__(self, "unknown_shapes", tuple(self.unknown_shapes))
        self.validate()

    def validate(self) -> None:
        x0, y0, z0, x1, y1, z1 = self.roi
        if not (x1 > x0 and y1 > y0 and z1 > z0):
            raise ValueError(f"roi has zero volume: {self.roi}")
        if z0 > 0.0 or z1 < 2.0:
            raise ValueError("roi must contain the ground plane z=0 and 2 m of headroom")
        for c, k in self.thing_counts.items():
            if k < 0:
                raise ValueError(f"negative count {k} for class {c}")
            if not self.catalog.is_thing(c):
                raise ValueError(f"class {c} is not a thing class")
            if c not in self.thing_density and k > 0:
                raise ValueError(f"no point density for class {c}")
        if self.unknown_count < 0:
            raise ValueError(f"negative unknown count {self.unknown_count}")
        for s in self.unknown_shapes:
            if s not in UNKNOWN_SHAPES:
                raise ValueError(f"unknown shape {s!r}; choose from {UNKNOWN_SHAPES}")
        if self.unknown_count > 0 and not self.unknown_shapes:
            raise ValueError("unknown objects requested with an empty shape library")
        if self.ground_density < 0 or self.noise_sigma < 0:
            raise ValueError("densities and noise must be nonnegative")


# Surface samplers. Each returns (M, 3) points in the object frame (x along
# the heading, z up from the ground) for a target surface density.

def _sample_box(rng, size, density, base=(0.0, 0.0, 0.0), top=True):
    lx, ly, lz = size
    faces = [  # (area, sampler)
        (ly * lz, lambda m: np.c_[np.full(m, -lx / 2), rng.uniform(-ly / 2, ly / 2, m), rng.uniform(0, lz, m)]),
        (ly * lz, lambda m: np.c_[np.full(m, lx / 2), rng.uniform(-ly / 2, ly / 2, m), rng.uniform(0, lz, m)]),
        (lx * lz, lambda m: np.c_[rng.uniform(-lx / 2, lx / 2, m), np.full(m, -ly / 2), rng.uniform(0, lz, m)]),
        (lx * lz, lambda m: np.c_[rng.uniform(-lx / 2, lx / 2, m), np.full(m, ly / 2), rng.uniform(0, lz, m)]),
    ]
    if top:
        faces.append((lx * ly, lambda m: np.c_[rng.uniform(-lx / 2, lx / 2, m),
                                               rng.uniform(-ly / 2, ly / 2, m), np.full(m, lz)]))
    parts = [f(max(1, int(round(a * density)))) for a, f in faces]
    return np.concatenate(parts) + np.asarray(base)


def _sample_cylinder(rng, radius, height, density):
    m_side = max(1, int(round(2 * math.pi * radius * height * density)))
    m_top = max(1, int(round(math.pi * radius ** 2 * density)))
    a = rng.uniform(-math.pi, math.pi, m_side)
    side = np.c_[radius * np.cos(a), radius * np.sin(a), rng.uniform(0, height, m_side)]
    r = radius * np.sqrt(rng.uniform(0, 1, m_top))
    b = rng.uniform(-math.pi, math.pi, m_top)
    top = np.c_[r * np.cos(b), r * np.sin(b), np.full(m_top, height)]
    return np.concatenate([side, top])


def _sample_cone(rng, radius, height, density):
    slant = math.hypot(radius, height)
    m = max(1, int(round(math.pi * radius * slant * density)))
    t = np.sqrt(rng.uniform(0, 1, m))  # area-uniform along the slant
    a = rng.uniform(-math.pi, math.pi, m)
    return np.c_[radius * t * np.cos(a), radius * t * np.sin(a), height * (1 - t)]


def _sample_radial(rng, radii, density, bumps=None):
    """Star-shaped surface around the origin, resting on the ground."""
    rx, ry, rz = radii
    area = 4 * math.pi * ((rx * ry) ** 1.6 + (rx * rz) ** 1.6 + (ry * rz) ** 1.6) ** (1 / 1.6) / 3 ** (1 / 1.6)
    m = max(1, int(round(area * density)))
    v = rng.normal(size=(m, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    scale = np.ones(m)
    if bumps is not None:
        for k, amp, phase in bumps:
            scale += amp * np.sin(k * np.arctan2(v[:, 1], v[:, 0]) + phase) * np.sqrt(1 - v[:, 2] ** 2)
    p = v * scale[:, None] * np.asarray(radii)
    p = p[p[:, 2] > -0.6 * rz]  # partially buried
    p[:, 2] += 0.6 * rz
    return p


def _shape_points(rng, shape: str, density: float) -> tuple[np.ndarray, float, tuple[float, float]]:
    """Sample one object. Returns (points, bounding radius, (length, width))."""
    if shape == "vehicle_body":
        l, w, h = rng.uniform(3.8, 4.8), rng.uniform(1.7, 2.0), rng.uniform(1.4, 1.7)
        lower = _sample_box(rng, (l, w, 0.55 * h), density, base=(0, 0, 0.25), top=True)
        cab_l = 0.5 * l
        cabin = _sample_box(rng, (cab_l, 0.9 * w, 0.45 * h), density, base=(-0.1 * l, 0, 0.25 + 0.55 * h))
        inside = (np.abs(lower[:, 0] + 0.1 * l) < cab_l / 2) & (np.abs(lower[:, 1]) < 0.45 * w) \
            & (lower[:, 2] >= 0.25 + 0.55 * h - 1e-9)
        pts = np.concatenate([lower[~inside], cabin])
        return pts, 0.5 * math.hypot(l, w), (l, w)
    if shape == "pedestrian_body":
        r, h = rng.uniform(0.25, 0.35), rng.uniform(1.6, 1.9)
        return _sample_cylinder(rng, r, h, density), r, (2 * r, 2 * r)
    if shape == "motorbike_body":
        l, w, h = rng.uniform(1.8, 2.2), rng.uniform(0.6, 0.8), rng.uniform(1.1, 1.4)
        return _sample_box(rng, (l, w, h), density), 0.5 * math.hypot(l, w), (l, w)
    if shape == "crate":
        s, h = rng.uniform(0.8, 1.2), rng.uniform(0.6, 1.0)
        return _sample_box(rng, (s, s, h), density), s / math.sqrt(2), (s, s)
    if shape == "barrel":
        r, h = rng.uniform(0.35, 0.5), rng.uniform(0.8, 1.2)
        return _sample_cylinder(rng, r, h, density), r, (2 * r, 2 * r)
    if shape == "l_wall":
        a, b, h, t = rng.uniform(1.0, 1.8), rng.uniform(1.0, 1.8), rng.uniform(0.8, 1.2), 0.15
        arm1 = _sample_box(rng, (a, t, h), density, base=(a / 2, 0, 0))
        arm2 = _sample_box(rng, (t, b, h), density, base=(0, b / 2, 0))
        pts = np.concatenate([arm1, arm2])
        pts[:, :2] -= (a / 4, b / 4)
        return pts, math.hypot(0.75 * a, 0.75 * b), (a, b)
    if shape == "cone":
        r, h = rng.uniform(0.3, 0.5), rng.uniform(0.7, 1.0)
        return _sample_cone(rng, r, h, density), r, (2 * r, 2 * r)
    if shape == "boulder":
        radii = (rng.uniform(0.4, 0.7), rng.uniform(0.4, 0.7), rng.uniform(0.3, 0.5))
        return _sample_radial(rng, radii, density), max(radii[:2]), (2 * radii[0], 2 * radii[1])
    if shape == "blob":
        radii = (rng.uniform(0.5, 0.9), rng.uniform(0.3, 0.6), rng.uniform(0.4, 0.7))
        bumps = [(int(rng.integers(2, 6)), rng.uniform(0.1, 0.3), rng.uniform(0, 2 * math.pi)) for _ in range(2)]
        return _sample_radial(rng, radii, density, bumps), 1.6 * max(radii[:2]), (2 * radii[0], 2 * radii[1])
    raise ValueError(f"no sampler for shape {shape!r}")


_THING_SHAPE = {0: "vehicle_body", 1: "pedestrian_body", 2: "motorbike_body"}


def generate_scene(config: SceneGenConfig, seed: int) -> Scene:
    """Sample one labelled scene. Pure function of ``(config, seed)``."""
    config.validate()
    rng = np.random.default_rng(seed)
    x0, y0, z0, x1, y1, z1 = config.roi
    catalog = config.catalog
    road = catalog.stuff_classes[0] if catalog.stuff_classes else None

    placed: list[tuple[float, float, float]] = []  # (cx, cy, radius)
    pts_parts, inst_parts, sem_parts = [], [], []
    boxes: dict[int, InstanceBox] = {}
    shapes: dict[int, str] = {}

    def fits(cx, cy, r, gap):
        if cx - r < x0 + 0.3 or cx + r > x1 - 0.3 or cy - r < y0 + 0.3 or cy + r > y1 - 0.3:
            return False
        return all(math.hypot(cx - px, cy - py) >= r + pr + gap - 1e-9 for px, py, pr in placed)

    def place(obj, r, near=None):
        for _ in range(200):
            if near is not None:
                px, py, pr = near
                ang = rng.uniform(-math.pi, math.pi)
                d = pr + r + rng.uniform(*config.unknown_gap)
                cx, cy = px + d * math.cos(ang), py + d * math.sin(ang)
                gap = config.unknown_gap[0]
            else:
                cx, cy = rng.uniform(x0, x1), rng.uniform(y0, y1)
                gap = config.object_gap
            if fits(cx, cy, r, gap):
                return cx, cy
        return None

    def emit(obj_pts, cx, cy, theta):
        c, s = math.cos(theta), math.sin(theta)
        world = np.empty_like(obj_pts)
        world[:, 0] = cx + c * obj_pts[:, 0] - s * obj_pts[:, 1]
        world[:, 1] = cy + s * obj_pts[:, 0] + c * obj_pts[:, 1]
        world[:, 2] = obj_pts[:, 2]
        return world

    next_id = 0
    for cls in catalog.thing_classes:
        for _ in range(config.thing_counts.get(cls, 0)):
            shape = _THING_SHAPE[catalog.thing_index(cls) % len(_THING_SHAPE)]
            density = rng.uniform(*config.thing_density[cls])
            obj, r, (l, w) = _shape_points(rng, shape, density)
            theta = rng.uniform(-math.pi, math.pi)
            at = place(obj, r)
            if at is None:
                continue
            placed.append((at[0], at[1], r))
            pts_parts.append(emit(obj, at[0], at[1], theta))
            inst_parts.append(np.full(len(obj), next_id))
            sem_parts.append(np.full(len(obj), cls))
            boxes[next_id] = InstanceBox(at[0], at[1], w, l, theta, cls)
            shapes[next_id] = shape
            next_id += 1

    unknown_placed: list[tuple[float, float, float]] = []
    for _ in range(config.unknown_count):
        shape = config.unknown_shapes[int(rng.integers(len(config.unknown_shapes)))]
        density = rng.uniform(*config.unknown_density)
        obj, r, _ = _shape_points(rng, shape, density)
        theta = rng.uniform(-math.pi, math.pi)
        near = None
        if unknown_placed and rng.uniform() < config.unknown_group_prob:
            near = unknown_placed[int(rng.integers(len(unknown_placed)))]
        at = place(obj, r, near)
        if at is None and near is not None:
            at = place(obj, r)
        if at is None:
            continue
        placed.append((at[0], at[1], r))
        unknown_placed.append((at[0], at[1], r))
        pts_parts.append(emit(obj, at[0], at[1], theta))
        inst_parts.append(np.full(len(obj), next_id))
        sem_parts.append(np.full(len(obj), UNKNOWN))
        shapes[next_id] = shape
        next_id += 1

    if road is not None and config.ground_density > 0:
        m = int(round((x1 - x0) * (y1 - y0) * config.ground_density))
        ground = np.c_[rng.uniform(x0, x1, m), rng.uniform(y0, y1, m), np.zeros(m)]
        pts_parts.append(ground)
        inst_parts.append(np.full(m, NO_INSTANCE))
        sem_parts.append(np.full(m, road))

    if pts_parts:
        points = np.concatenate(pts_parts)
        inst = np.concatenate(inst_parts).astype(np.int64)
        sem = np.concatenate(sem_parts).astype(np.int64)
    else:
        points, inst, sem = np.zeros((0, 3)), np.zeros(0, np.int64), np.zeros(0, np.int64)
    if config.noise_sigma > 0:
        points = points + rng.normal(0.0, config.noise_sigma, points.shape)
    eps = 1e-6
    points[:, 0] = np.clip(points[:, 0], x0, x1 - eps)
    points[:, 1] = np.clip(points[:, 1], y0, y1 - eps)
    points[:, 2] = np.clip(points[:, 2], z0, z1 - eps)
    return Scene(points, inst, sem, boxes, catalog, seed=seed, shapes=shapes)


# --------------------------------------------------------------------------
# persistence

def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise SceneFormatError(f"truncated scene file at byte {self.pos} (wanted {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()


def scene_to_bytes(scene: Scene) -> bytes:
    cat = scene.catalog
    out = bytearray(SCENE_MAGIC)
    out += struct.pack("<I", SCENE_VERSION)
    n = len(scene.points)
    out += struct.pack("<QqB", n, scene.seed, scene.intensity is not None)
    out += struct.pack("<I", len(cat.thing_classes)) + np.asarray(cat.thing_classes, "<i4").tobytes()
    out += struct.pack("<I", len(cat.stuff_classes)) + np.asarray(cat.stuff_classes, "<i4").tobytes()
    out += struct.pack("<I", len(cat.names))
    for c, name in sorted(cat.names.items()):
        out += struct.pack("<i", c) + _pack_str(name)
    out += scene.points.astype("<f8").tobytes()
    if scene.intensity is not None:
        out += scene.intensity.astype("<f8").tobytes()
    out += scene.instance_ids.astype("<i8").tobytes()
    out += scene.semantics.astype("<i8").tobytes()
    out += struct.pack("<I", len(scene.boxes))
    for i, b in scene.boxes.items():
        out += struct.pack("<q5di", i, b.cx, b.cy, b.w, b.l, b.theta, b.cls)
    out += struct.pack("<I", len(scene.shapes))
    for i, s in scene.shapes.items():
        out += struct.pack("<q", i) + _pack_str(s)
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


def scene_from_bytes(buf: bytes) -> Scene:
    if len(buf) < len(SCENE_MAGIC) + 4:
        raise SceneFormatError("truncated scene file: header incomplete")
    if buf[:len(SCENE_MAGIC)] != SCENE_MAGIC:
        raise SceneFormatError("not a scene file (bad magic)")
    (version,) = struct.unpack_from("<I", buf, len(SCENE_MAGIC))
    if version != SCENE_VERSION:
        raise SceneVersionError(f"scene file version {version} is not supported (reader version {SCENE_VERSION})")
    if len(buf) < len(SCENE_MAGIC) + 8:
        raise SceneFormatError("truncated scene file: missing checksum")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise SceneFormatError("scene file checksum mismatch (truncated or corrupted)")
    r = _Reader(body)
    r.take(len(SCENE_MAGIC) + 4)
    n, seed, has_int = r.unpack("<QqB")
    things = tuple(int(c) for c in r.array("<i4", r.unpack("<I")[0]))
    stuff = tuple(int(c) for c in r.array("<i4", r.unpack("<I")[0]))
    names = {}
    for _ in range(r.unpack("<I")[0]):
        (c,) = r.unpack("<i")
        names[c] = r.string()
    points = r.array("<f8", 3 * n).reshape(n, 3)
    intensity = r.array("<f8", n) if has_int else None
    inst = r.array("<i8", n)
    sem = r.array("<i8", n)
    boxes = {}
    for _ in range(r.unpack("<I")[0]):
        i, cx, cy, w, l, th, c = r.unpack("<q5di")
        boxes[i] = InstanceBox(cx, cy, w, l, th, c)
    shapes = {}
    for _ in range(r.unpack("<I")[0]):
        (i,) = r.unpack("<q")
        shapes[i] = r.string()
    if r.pos != len(body):
        raise SceneFormatError(f"{len(body) - r.pos} trailing bytes in scene file")
    return Scene(points, inst, sem, boxes, ClassCatalog(things, stuff, names), seed=seed,
                 intensity=intensity, shapes=shapes)


def save_scene(scene: Scene, path: str | Path) -> None:
    Path(path).write_bytes(scene_to_bytes(scene))


def load_scene(path: str | Path) -> Scene:
    return scene_from_bytes(Path(path).read_bytes())


def export_scene_text(scene: Scene, path: str | Path) -> None:
    """Debug dump: one ``x y z instance semantic`` line per point."""
    with open(path, "w") as f:
        for (x, y, z), i, s in zip(scene.points, scene.instance_ids, scene.semantics):
            f.write(f"{x:.6f} {y:.6f} {z:.6f} {int(i)} {int(s)}\n")


def subset(scene: Scene, mask: Sequence[bool] | np.ndarray) -> Scene:
    """Scene restricted to the points selected by ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    keep = set(int(i) for i in np.unique(scene.instance_ids[mask]) if i != NO_INSTANCE)
    return Scene(scene.points[mask], scene.instance_ids[mask], scene.semantics[mask],
                 {i: b for i, b in scene.boxes.items() if i in keep}, scene.catalog, seed=scene.seed,
                 intensity=None if scene.intensity is None else scene.intensity[mask],
                 shapes={i: s for i, s in scene.shapes.items() if i in keep})
