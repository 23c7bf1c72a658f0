"""Gaussian-splat scene, template mesh, cameras and scene I/O.

Splat parameters are stored pre-activation: opacity and color as logits,
scale as log-scale.  All parameter arrays are float64 in memory but kept
float32-representable (see :meth:`GaussianScene.quantized`) so that the
binary PLY round-trip is exact.
"""
from __future__ import annotations

import io
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import MeshError, ObjParseError, PlyError

FLOAT_FIELDS = ("positions", "rotations", "log_scales", "opacity_logits", "colors")
PARAM_WIDTHS = {"positions": 3, "rotations": 4, "log_scales": 3, "opacity_logits": 1, "colors": 3}
PARAMS_PER_SPLAT = sum(PARAM_WIDTHS.values())

PLY_PROPERTIES = (
    "x", "y", "z",
    "rot_w", "rot_x", "rot_y", "rot_z",
    "log_scale_x", "log_scale_y", "log_scale_z",
    "opacity_logit",
    "r", "g", "b",
    "binding_index",
)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


# ---------------------------------------------------------------------------
# cameras


@dataclass(frozen=True)
class Camera:
    """Pinhole camera looking from ``eye`` toward ``look_at``.

    Camera space has x to the right, y down (image rows) and z forward.
    Pixel ``(row, col)`` has its center at ``(col + 0.5, row + 0.5)``.
    """

    eye: tuple[float, float, float]
    look_at: tuple[float, float, float]
    up: tuple[float, float, float] = (0.0, 1.0, 0.0)
    fov_y: float = math.radians(40.0)
    width: int = 128
    height: int = 128
    azimuth_label: str = "front"

    def __post_init__(self):
        eye = np.asarray(self.eye, dtype=np.float64)
        at = np.asarray(self.look_at, dtype=np.float64)
        if eye.shape != (3,) or at.shape != (3,):
            raise ValueError("eye and look_at must be 3-vectors")
        if np.allclose(eye, at):
            raise ValueError("camera eye coincides with look_at")
        if not 0.0 < self.fov_y < math.pi:
            raise ValueError(f"fov_y must lie in (0, pi), got {self.fov_y}")
        if self.width < 8 or self.height < 8:
            raise ValueError(f"image must be at least 8x8, got {self.width}x{self.height}")
        if self.azimuth_label not in ("front", "side", "back"):
            raise ValueError(f"unknown azimuth label {self.azimuth_label!r}")
        fwd = at - eye
        fwd /= np.linalg.norm(fwd)
        if np.linalg.norm(np.cross(fwd, np.asarray(self.up, dtype=np.float64))) < 1e-9:
            raise ValueError("up vector is parallel to the viewing direction")

    @property
    def rotation(self) -> np.ndarray:
        """World-to-camera rotation; rows are the camera right, down, forward axes."""
        eye = np.asarray(self.eye, dtype=np.float64)
        fwd = np.asarray(self.look_at, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(self.up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        return np.stack([right, down, fwd])

    @property
    def focal(self) -> float:
        return 0.5 * self.height / math.tan(0.5 * self.fov_y)

    @property
    def principal_point(self) -> tuple[float, float]:
        return 0.5 * self.width, 0.5 * self.height

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - np.asarray(self.eye)) @ self.rotation.T

    def with_size(self, width: int, height: int | None = None) -> "Camera":
        return Camera(self.eye, self.look_at, self.up, self.fov_y, width,
                      width if height is None else height, self.azimuth_label)


def azimuth_label(azimuth_deg: float) -> str:
    a = (azimuth_deg + 180.0) % 360.0 - 180.0
    if a == -180.0:
        a = 180.0
    if abs(a) <= 45.0:
        return "front"
    if abs(a) <= 135.0:
        return "side"
    return "back"


def orbit_camera(center, distance: float, azimuth_deg: float, elevation_deg: float,
                 fov_y: float = math.radians(40.0), size: int = 128) -> Camera:
    """Camera on a sphere around ``center``; azimuth 0 looks from +Z, 90 from +X."""
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    c = np.asarray(center, dtype=np.float64)
    offset = distance * np.array([math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)])
    return Camera(tuple(c + offset), tuple(c), (0.0, 1.0, 0.0), fov_y, size, size, azimuth_label(azimuth_deg))


@dataclass(frozen=True)
class CameraPolicy:
    """Sampling ranges for training cameras (degrees)."""

    center: tuple[float, float, float]
    distance: float
    azimuth_range: tuple[float, float] = (-180.0, 180.0)
    elevation_range: tuple[float, float] = (-20.0, 30.0)
    fov_y: float = math.radians(40.0)
    size: int = 128

    def __post_init__(self):
        lo, hi = self.elevation_range
        if lo > hi or self.azimuth_range[0] > self.azimuth_range[1]:
            raise ValueError("camera ranges must be ordered (low, high)")
        if lo <= -89.0 or hi >= 89.0:
            raise ValueError("elevation must stay within (-89, 89) degrees")
        if self.distance <= 0:
            raise ValueError("camera distance must be positive")

    @classmethod
    def for_mesh(cls, mesh: "TemplateMesh", **kwargs) -> "CameraPolicy":
        fov = kwargs.get("fov_y", math.radians(40.0))
        center, radius = mesh.bounding_sphere()
        distance = kwargs.pop("distance", None) or fitting_distance(radius, fov)
        return cls(center=tuple(center), distance=distance, **kwargs)


def fitting_distance(radius: float, fov_y: float, margin: float = 1.2) -> float:
    """Distance at which a sphere of ``radius`` fits inside the view cone."""
    return margin * radius / math.sin(0.5 * fov_y)


def sample_camera(rng: np.random.Generator, policy: CameraPolicy) -> Camera:
    az = rng.uniform(*policy.azimuth_range) if policy.azimuth_range[0] < policy.azimuth_range[1] \
        else policy.azimuth_range[0]
    el = rng.uniform(*policy.elevation_range) if policy.elevation_range[0] < policy.elevation_range[1] \
        else policy.elevation_range[0]
    return orbit_camera(policy.center, policy.distance, float(az), float(el), policy.fov_y, policy.size)


# ---------------------------------------------------------------------------
# template mesh


@dataclass(frozen=True, eq=False)
class TemplateMesh:
    vertices: np.ndarray
    faces: np.ndarray
    adjacency: tuple[tuple[int, ...], ...]
    frontal_camera: Camera

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def bounding_sphere(self) -> tuple[np.ndarray, float]:
        center = self.vertices.mean(axis=0)
        radius = float(np.max(np.linalg.norm(self.vertices - center, axis=1)))
        return center, max(radius, 1e-6)

    def edges(self) -> np.ndarray:
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)


def build_mesh(vertices, faces, size: int = 128, fov_y: float = math.radians(40.0)) -> TemplateMesh:
    """Validate geometry, derive adjacency and the canonical frontal camera."""
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    # vertices share the float32 grid of splat parameters so a fresh scene sits exactly on them
    v = v.astype(np.float32).astype(np.float64)
    if len(v) == 0:
        raise MeshError("mesh has no vertices")
    if len(f) == 0:
        raise MeshError("mesh has no faces")
    bad = np.flatnonzero((f < 0).any(axis=1) | (f >= len(v)).any(axis=1))
    if bad.size:
        raise MeshError(f"face {bad[0]} references a vertex outside [0, {len(v)})")
    if not np.isfinite(v).all():
        raise MeshError("mesh has non-finite vertex coordinates")
    neighbors: list[set[int]] = [set() for _ in range(len(v))]
    for a, b, c in f:
        for i, j in ((a, b), (b, c), (c, a)):
            if i != j:
                neighbors[i].add(int(j))
                neighbors[j].add(int(i))
    seen = {0}
    queue = deque([0])
    while queue:
        for j in neighbors[queue.popleft()]:
            if j not in seen:
                seen.add(j)
                queue.append(j)
    if len(seen) != len(v):
        raise MeshError(f"mesh is not connected ({len(seen)} of {len(v)} vertices reachable)")
    adjacency = tuple(tuple(sorted(n)) for n in neighbors)
    center = v.mean(axis=0)
    radius = max(float(np.max(np.linalg.norm(v - center, axis=1))), 1e-6)
    eye = center + np.array([0.0, 0.0, fitting_distance(radius, fov_y)])
    camera = Camera(tuple(eye), tuple(center), (0.0, 1.0, 0.0), fov_y, size, size, "front")
    return TemplateMesh(v, f, adjacency, camera)


def icosphere(subdivisions: int) -> tuple[np.ndarray, np.ndarray]:
    t = (1.0 + math.sqrt(5.0)) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
             (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    vs = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i: int, j: int) -> int:
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = vs[i] + vs[j]
                vs.append(m / np.linalg.norm(m))
                cache[key] = len(vs) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.array(vs), np.array(faces, dtype=np.int64)


def read_obj(text: str) -> tuple[np.ndarray, np.ndarray]:
    """Parse ``v`` and ``f`` records; other records are ignored."""
    verts: list[tuple[float, float, float]] = []
    faces: list[tuple[int, int, int]] = []
    face_records = 0
    for line_no, raw in enumerate(text.splitlines(), start=1):
        parts = raw.split("#", 1)[0].split()
        if not parts:
            continue
        if parts[0] == "v":
            if len(parts) < 4:
                raise ObjParseError(line_no, "vertex record needs three coordinates")
            try:
                verts.append((float(parts[1]), float(parts[2]), float(parts[3])))
            except ValueError:
                raise ObjParseError(line_no, f"bad vertex coordinate in {raw.strip()!r}") from None
        elif parts[0] == "f":
            face_records += 1
            if len(parts) < 4:
                raise ObjParseError(line_no, "face record needs at least three vertices")
            idx = []
            for tok in parts[1:]:
                try:
                    k = int(tok.split("/")[0])
                except ValueError:
                    raise ObjParseError(line_no, f"bad face index {tok!r}") from None
                k = k - 1 if k > 0 else len(verts) + k
                if not 0 <= k < len(verts):
                    raise ObjParseError(
                        line_no,
                        f"face {face_records} references vertex {tok.split('/')[0]} "
                        f"but only {len(verts)} vertices are defined")
                idx.append(k)
            for i in range(1, len(idx) - 1):
                faces.append((idx[0], idx[i], idx[i + 1]))
    if not verts:
        raise ObjParseError(0, "no vertex records")
    return np.array(verts, dtype=np.float64), np.array(faces, dtype=np.int64).reshape(-1, 3)


def make_template(kind: str, subdivisions_or_path, size: int = 128) -> TemplateMesh:
    if kind == "icosphere":
        n = int(subdivisions_or_path)
        if not 0 <= n <= 4:
            raise MeshError(f"icosphere subdivisions must lie in [0, 4], got {n}")
        v, f = icosphere(n)
    elif kind == "obj_file":
        from .toy import BUILTIN_FACE, FACE_OBJ

        if subdivisions_or_path == BUILTIN_FACE:
            text = FACE_OBJ
        else:
            path = Path(subdivisions_or_path)
            try:
                text = path.read_text(encoding="utf-8")
            except OSError as exc:
                raise MeshError(f"cannot read OBJ file {path}: {exc}") from exc
        v, f = read_obj(text)
    else:
        raise MeshError(f"unknown template kind {kind!r}")
    return build_mesh(v, f, size=size)


# ---------------------------------------------------------------------------
# splats and scenes


@dataclass(frozen=True)
class Splat:
    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    color: np.ndarray

    @property
    def opacity(self) -> float:
        return float(sigmoid(np.array([self.opacity_logit]))[0])

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def rgb(self) -> np.ndarray:
        return sigmoid(self.color)


@dataclass(eq=False)
class GaussianScene:
    """Structure-of-arrays container for ``N`` splats bound to template vertices."""

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    binding: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        n = len(self.positions)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        self.binding = np.asarray(self.binding, dtype=np.int64).reshape(n)

    @classmethod
    def empty(cls) -> "GaussianScene":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)),
                   np.zeros(0, dtype=np.int64))

    @classmethod
    def from_splats(cls, splats: Sequence[Splat], binding: Sequence[int]) -> "GaussianScene":
        if not splats:
            return cls.empty()
        return cls(np.array([s.position for s in splats]), np.array([s.rotation for s in splats]),
                   np.array([s.log_scale for s in splats]), np.array([s.opacity_logit for s in splats]),
                   np.array([s.color for s in splats]), np.asarray(binding))

    def __len__(self) -> int:
        return len(self.positions)

    def __iter__(self) -> Iterator[Splat]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> Splat:
        return Splat(self.positions[i].copy(), self.rotations[i].copy(), self.log_scales[i].copy(),
                     float(self.opacity_logits[i]), self.colors[i].copy())

    @property
    def splats(self) -> list[Splat]:
        return list(self)

    @property
    def parameter_count(self) -> int:
        return len(self) * PARAMS_PER_SPLAT

    def copy(self) -> "GaussianScene":
        return GaussianScene(*(getattr(self, k).copy() for k in FLOAT_FIELDS), self.binding.copy())

    def flatten(self) -> np.ndarray:
        """All parameters as one vector, grouped by field in ``FLOAT_FIELDS`` order."""
        return np.concatenate([getattr(self, k).ravel() for k in FLOAT_FIELDS])

    def unflatten(self, vector: np.ndarray) -> "GaussianScene":
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.parameter_count,):
            raise ValueError(f"expected {self.parameter_count} parameters, got {vector.shape}")
        n, parts, start = len(self), [], 0
        for k in FLOAT_FIELDS:
            width = PARAM_WIDTHS[k]
            parts.append(vector[start:start + n * width].reshape((n, width) if width > 1 else (n,)).copy())
            start += n * width
        return GaussianScene(*parts, self.binding.copy())

    def quantized(self) -> "GaussianScene":
        """Round every parameter to the nearest float32 value."""
        return GaussianScene(*(getattr(self, k).astype(np.float32).astype(np.float64) for k in FLOAT_FIELDS),
                             self.binding.copy())

    def normalize_rotations(self) -> None:
        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        self.rotations = self.rotations / np.where(norms > 0, norms, 1.0)

    def equals(self, other: "GaussianScene") -> bool:
        return len(self) == len(other) and all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in FLOAT_FIELDS + ("binding",))

    def validate_binding(self, mesh: TemplateMesh) -> None:
        if len(self.binding) and (self.binding.min() < 0 or self.binding.max() >= mesh.n_vertices):
            raise MeshError("splat binding references a vertex outside the template mesh")


def init_scene(mesh: TemplateMesh, splats_per_vertex: int = 1, rng_seed: int = 0) -> GaussianScene:
    """One gray splat per template vertex, plus jittered extras when requested.

    Each splat is isotropic with a radius of half the mean length of the
    edges incident on its vertex.
    """
    if splats_per_vertex < 1:
        raise ValueError("splats_per_vertex must be >= 1")
    if mesh.n_vertices == 0:
        raise MeshError("cannot initialise a scene on an empty mesh")
    v = mesh.vertices
    radius = np.empty(len(v))
    for i, nbrs in enumerate(mesh.adjacency):
        lengths = np.linalg.norm(v[list(nbrs)] - v[i], axis=1) if nbrs else np.array([1.0])
        radius[i] = 0.5 * lengths.mean()
    rng = np.random.default_rng(rng_seed)
    positions = [v]
    for _ in range(splats_per_vertex - 1):
        positions.append(v + rng.normal(scale=0.25, size=v.shape) * radius[:, None])
    positions = np.concatenate(positions)
    binding = np.tile(np.arange(len(v)), splats_per_vertex)
    n = len(binding)
    rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    log_scales = np.repeat(np.log(radius[binding])[:, None], 3, axis=1)
    scene = GaussianScene(positions, rotations, log_scales, np.zeros(n), np.zeros((n, 3)), binding)
    return scene.quantized()


# ---------------------------------------------------------------------------
# binary PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
}


def save_ply(scene: GaussianScene) -> bytes:
    n = len(scene)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in PLY_PROPERTIES]
    header.append("end_header")
    data = np.empty((n, len(PLY_PROPERTIES)), dtype="<f4")
    data[:, 0:3] = scene.positions
    data[:, 3:7] = scene.rotations
    data[:, 7:10] = scene.log_scales
    data[:, 10] = scene.opacity_logits
    data[:, 11:14] = scene.colors
    data[:, 14] = scene.binding
    return ("\n".join(header) + "\n").encode("ascii") + data.tobytes()


def load_ply(blob: bytes) -> GaussianScene:
    stream = io.BytesIO(blob)
    if stream.readline().strip() != b"ply":
        raise PlyError("not a PLY file (missing magic 'ply')")
    count, props, fmt, in_vertex = None, [], None, False
    while True:
        line = stream.readline()
        if not line:
            raise PlyError("unexpected end of file inside PLY header")
        tokens = line.decode("ascii", errors="replace").split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "end_header":
            break
        if tokens[0] == "format":
            fmt = tokens[1] if len(tokens) > 1 else None
        elif tokens[0] == "element":
            in_vertex = tokens[1] == "vertex"
            if in_vertex:
                count = int(tokens[2])
            elif count is None:
                raise PlyError(f"unsupported element {tokens[1]!r} before vertex element")
        elif tokens[0] == "property" and in_vertex:
            if tokens[1] == "list" or tokens[1] not in _PLY_TYPES:
                raise PlyError(f"unsupported property type in {' '.join(tokens)!r}")
            props.append((tokens[2], _PLY_TYPES[tokens[1]]))
    if fmt != "binary_little_endian":
        raise PlyError(f"unsupported PLY format {fmt!r}; expected binary_little_endian")
    if count is None:
        raise PlyError("PLY has no vertex element")
    names = [p[0] for p in props]
    for required in PLY_PROPERTIES:
        if required not in names:
            raise PlyError(f"missing property {required}")
    dtype = np.dtype(props)
    payload = stream.read()
    if len(payload) < count * dtype.itemsize:
        raise PlyError(f"PLY body truncated: need {count * dtype.itemsize} bytes, got {len(payload)}")
    rec = np.frombuffer(payload, dtype=dtype, count=count)

    def cols(*keys):
        return np.stack([rec[k].astype(np.float64) for k in keys], axis=1) if count else np.zeros((0, len(keys)))

    binding = rec["binding_index"].astype(np.float64) if count else np.zeros(0)
    if count and (binding != np.round(binding)).any():
        raise PlyError("binding_index values must be integers")
    return GaussianScene(
        cols("x", "y", "z"),
        cols("rot_w", "rot_x", "rot_y", "rot_z"),
        cols("log_scale_x", "log_scale_y", "log_scale_z"),
        rec["opacity_logit"].astype(np.float64) if count else np.zeros(0),
        cols("r", "g", "b"),
        binding.astype(np.int64),
    )
