"""Mesh loading, normalization, and multi-view orthographic projection.

Conventions (documented once, relied on everywhere):

- World up is +y. A normalized mesh has its vertex centroid at the origin and
  a vertical extent (ymax - ymin) of exactly 1.
- Camera k of n sits at azimuth theta = 360*k/n degrees around +y, looking at
  the origin with an orthographic projection. Its image-space right axis is
  (cos t, 0, -sin t); at azimuth 0 the camera looks down -z and sees the xy
  plane. Larger toward-camera coordinates are closer.
- Framing: the projected vertical extent of the body maps to rows
  [0.05*S, 0.95*S] (5% margin top and bottom, body vertically centered), with
  the same isotropic scale horizontally and the world origin on the center
  column. Row r therefore always corresponds to normalized body height
  h = (0.95*S - (r + 0.5)) / (0.9*S), 0 = feet, 1 = crown, independent of the
  mesh -- which is what lets region masks and attribution bands address body
  parts by height fraction alone.
- Depth mode shades covered pixels by camera-space depth normalized per view
  to [0.2, 1.0] (nearest = 1.0); silhouette mode writes 1.0. Background is
  exactly 0 in both modes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kernels, pngio
from .errors import ConfigError, DegenerateError, ParseError, ValidationError

MARGIN = 0.05
DEPTH_SHADE_FLOOR = 0.2


# --------------------------------------------------------------------- types

@dataclass(frozen=True)
class TriangleMesh:
    """Indexed triangle surface of one body scan."""

    vertices: np.ndarray  # (N, 3) float64, meters
    faces: np.ndarray  # (T, 3) int32
    source_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=np.float64))
        object.__setattr__(self, "faces", np.asarray(self.faces, dtype=np.int32))


@dataclass(frozen=True)
class ViewConfig:
    n_views: int = 12
    image_size: int = 224
    elevation: float = 0.0
    render_mode: str = "depth"
    channels: int = 3

    def validate(self) -> "ViewConfig":
        if self.n_views < 1:
            raise ConfigError(f"n_views must be >= 1, got {self.n_views}")
        if self.image_size < 16:
            raise ConfigError(f"image_size must be >= 16, got {self.image_size}")
        if self.render_mode not in ("silhouette", "depth"):
            raise ConfigError(f"render_mode must be silhouette or depth, got {self.render_mode!r}")
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")
        if abs(self.elevation) >= 89.0:
            raise ConfigError(f"elevation must stay below 89 degrees, got {self.elevation}")
        return self

    @property
    def azimuths(self) -> np.ndarray:
        return np.arange(self.n_views) * (360.0 / self.n_views)


@dataclass(frozen=True)
class RegionMask:
    """Height bands (fractions of body height, 0 = feet, 1 = crown) to zero out."""

    bands: tuple = ()

    def __post_init__(self):
        bands = tuple((float(lo), float(hi)) for lo, hi in self.bands)
        for lo, hi in bands:
            if not (0.0 <= lo < hi <= 1.0):
                raise ValidationError(f"mask band must satisfy 0 <= low < high <= 1, got ({lo}, {hi})")
        object.__setattr__(self, "bands", bands)


# ablation crops; the height fractions come from standard anthropometric
# proportions and are recorded here so runs are reproducible
DEFAULT_MASKS = {
    "full": RegionMask(()),
    "no_head": RegionMask(((0.88, 1.0),)),
    "no_head_shoulders": RegionMask(((0.78, 1.0),)),
    "no_legs": RegionMask(((0.0, 0.48),)),
}


@dataclass(frozen=True)
class ViewSet:
    """n_views grayscale orthographic projections, values in [0, 1]."""

    images: np.ndarray  # (n_views, S, S, C) float32
    azimuths: np.ndarray  # degrees
    render_mode: str
    mask_applied: RegionMask | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_views(self) -> int:
        return self.images.shape[0]

    @property
    def image_size(self) -> int:
        return self.images.shape[1]


# ------------------------------------------------------------------- loading

def _validate_mesh(vertices, faces, source_id) -> TriangleMesh:
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    if vertices.ndim != 2 or vertices.shape[1] != 3 or len(vertices) < 3:
        raise ValidationError(f"{source_id}: need at least 3 vertices of dimension 3, got {vertices.shape}")
    if faces.ndim != 2 or faces.shape[1] != 3 or len(faces) < 1:
        raise ValidationError(f"{source_id}: need at least one triangle, got {faces.shape}")
    if faces.min() < 0 or faces.max() >= len(vertices):
        raise ValidationError(
            f"{source_id}: face index out of range (max {faces.max()}, {len(vertices)} vertices)"
        )
    degenerate = (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])
    if degenerate.any():
        raise ValidationError(f"{source_id}: {int(degenerate.sum())} faces repeat a vertex")
    if not np.all(np.isfinite(vertices)):
        raise ValidationError(f"{source_id}: non-finite vertex coordinates")
    return TriangleMesh(vertices, faces.astype(np.int32), source_id)


def _fan(indices: list) -> list:
    return [(indices[0], indices[i], indices[i + 1]) for i in range(1, len(indices) - 1)]


def _load_obj(path: Path) -> TriangleMesh:
    vertices, faces = [], []
    with open(path, "r", errors="replace") as fh:
        for ln, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise ParseError(f"{path}:{ln}: vertex needs 3 coordinates")
                try:
                    vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
                except ValueError as e:
                    raise ParseError(f"{path}:{ln}: bad vertex coordinate: {e}") from None
            elif parts[0] == "f":
                if len(parts) < 4:
                    raise ParseError(f"{path}:{ln}: face needs at least 3 indices")
                idx = []
                for tok in parts[1:]:
                    head = tok.split("/")[0]
                    try:
                        i = int(head)
                    except ValueError:
                        raise ParseError(f"{path}:{ln}: bad face index {tok!r}") from None
                    if i <= 0:
                        raise ParseError(f"{path}:{ln}: non-positive face indices unsupported")
                    idx.append(i - 1)
                faces.extend(_fan(idx))
    if not vertices:
        raise ParseError(f"{path}: no vertices found")
    if not faces:
        raise ParseError(f"{path}: no faces found")
    return _validate_mesh(vertices, faces, path.stem)


_PLY_SCALAR = {
    "char": "b", "int8": "b", "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h", "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i", "uint": "I", "uint32": "I",
    "float": "f", "float32": "f", "double": "d", "float64": "d",
}


def _load_ply(path: Path) -> TriangleMesh:
    with open(path, "rb") as fh:
        blob = fh.read()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply") or end < 0:
        raise ParseError(f"{path}: not a PLY file")
    header = blob[:end].decode("ascii", errors="replace").splitlines()
    body = blob[end + len(b"end_header\n"):]

    fmt = next((l.split()[1] for l in header if l.startswith("format")), None)
    if fmt != "binary_little_endian":
        raise ParseError(f"{path}: only binary little-endian PLY supported, got {fmt!r}")

    elements = []  # (name, count, [(prop_kind, ...)])
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property" and elements:
            if parts[1] == "list":
                elements[-1][2].append(("list", _PLY_SCALAR[parts[2]], _PLY_SCALAR[parts[3]], parts[4]))
            else:
                elements[-1][2].append(("scalar", _PLY_SCALAR[parts[1]], parts[2]))

    vertices, faces = None, []
    offset = 0
    try:
        for name, count, props in elements:
            if name == "vertex":
                names = [p[2] for p in props if p[0] == "scalar"]
                if any(p[0] == "list" for p in props) or not {"x", "y", "z"} <= set(names):
                    raise ParseError(f"{path}: vertex element must carry scalar x, y, z")
                fmt_str = "<" + "".join(p[1] for p in props)
                size = struct.calcsize(fmt_str)
                rows = [struct.unpack_from(fmt_str, body, offset + i * size) for i in range(count)]
                offset += count * size
                ix, iy, iz = names.index("x"), names.index("y"), names.index("z")
                vertices = [[r[ix], r[iy], r[iz]] for r in rows]
            elif name == "face":
                if len(props) != 1 or props[0][0] != "list":
                    raise ParseError(f"{path}: face element must be a single list property")
                _, cfmt, ifmt, _ = props[0]
                csize, isize = struct.calcsize(cfmt), struct.calcsize(ifmt)
                for _ in range(count):
                    (n,) = struct.unpack_from("<" + cfmt, body, offset)
                    offset += csize
                    idx = struct.unpack_from("<" + ifmt * n, body, offset)
                    offset += isize * n
                    if n < 3:
                        raise ParseError(f"{path}: face with {n} indices")
                    faces.extend(_fan(list(idx)))
            else:  # skip foreign fixed-size elements
                if any(p[0] == "list" for p in props):
                    raise ParseError(f"{path}: cannot skip list property in element {name!r}")
                offset += count * struct.calcsize("<" + "".join(p[1] for p in props))
    except struct.error as e:
        raise ParseError(f"{path}: truncated PLY body: {e}") from None
    if vertices is None:
        raise ParseError(f"{path}: no vertex element")
    if not faces:
        raise ParseError(f"{path}: no faces")
    return _validate_mesh(vertices, faces, path.stem)


def load_mesh(path) -> TriangleMesh:
    """Load and validate an OBJ or binary little-endian PLY mesh."""
    path = Path(path)
    if not path.exists():
        raise ParseError(f"{path}: no such file")
    with open(path, "rb") as fh:
        magic = fh.read(3)
    if magic == b"ply":
        return _load_ply(path)
    return _load_obj(path)


def write_obj(mesh: TriangleMesh, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"# mvbody mesh {mesh.source_id}\n")
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def write_ply(mesh: TriangleMesh, path) -> None:
    n, t = len(mesh.vertices), len(mesh.faces)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n}\nproperty float x\nproperty float y\nproperty float z\n"
        f"element face {t}\nproperty list uchar int vertex_indices\nend_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(mesh.vertices.astype("<f4").tobytes())
        for f in mesh.faces:
            fh.write(struct.pack("<Biii", 3, int(f[0]), int(f[1]), int(f[2])))


# -------------------------------------------------------------- normalization

def normalize_mesh(mesh: TriangleMesh) -> TriangleMesh:
    """Centroid to origin, height (y extent) to exactly 1."""
    v = mesh.vertices
    height = float(v[:, 1].max() - v[:, 1].min())
    if height < 1e-9:
        raise DegenerateError(f"{mesh.source_id}: mesh height {height} below 1e-9")
    centroid = v.mean(axis=0)
    return TriangleMesh((v - centroid) / height, mesh.faces, mesh.source_id)


def normalization_transform(mesh: TriangleMesh) -> dict:
    """The translate+scale normalize_mesh would apply, for manifests."""
    v = mesh.vertices
    return {
        "centroid": [float(c) for c in v.mean(axis=0)],
        "scale": float(v[:, 1].max() - v[:, 1].min()),
    }


# ----------------------------------------------------------------- rendering

def _camera_basis(azimuth_deg: float, elevation_deg: float):
    t = np.deg2rad(azimuth_deg)
    p = np.deg2rad(elevation_deg)
    right = np.array([np.cos(t), 0.0, -np.sin(t)])
    toward = np.array([np.cos(p) * np.sin(t), np.sin(p), np.cos(p) * np.cos(t)])
    up = np.cross(toward, right)
    return right, up, toward


def row_height_fractions(image_size: int) -> np.ndarray:
    """Normalized body height of each pixel row center (can exceed [0,1] off-body)."""
    r = np.arange(image_size) + 0.5
    return ((1.0 - MARGIN) * image_size - r) / ((1.0 - 2 * MARGIN) * image_size)


def render_views(mesh: TriangleMesh, cfg: ViewConfig) -> ViewSet:
    """Render n_views orthographic projections of a normalized mesh."""
    cfg.validate()
    S = cfg.image_size
    v = mesh.vertices
    faces = mesh.faces
    images = np.zeros((cfg.n_views, S, S, cfg.channels), dtype=np.float32)
    for k, az in enumerate(cfg.azimuths):
        right, up, toward = _camera_basis(az, cfg.elevation)
        u = v @ right
        vv = v @ up
        z = v @ toward
        v_lo, v_hi = float(vv.min()), float(vv.max())
        extent = max(v_hi - v_lo, 1e-12)
        scale = (1.0 - 2 * MARGIN) * S / extent
        cols = S / 2.0 + u * scale
        rows = MARGIN * S + (v_hi - vv) * scale
        tri = np.stack([cols, rows, z], axis=1)[faces]  # (T, 3, 3)
        depth, cover = kernels.rasterize(tri, S)
        if cfg.render_mode == "silhouette":
            frame = cover.astype(np.float32)
        else:
            frame = np.zeros((S, S), dtype=np.float32)
            inside = cover == 1
            if inside.any():
                zi = depth[inside]
                z_lo, z_hi = zi.min(), zi.max()
                if z_hi - z_lo < 1e-12:
                    frame[inside] = 1.0
                else:
                    frame[inside] = DEPTH_SHADE_FLOOR + (1.0 - DEPTH_SHADE_FLOOR) * (zi - z_lo) / (z_hi - z_lo)
        images[k] = frame[:, :, None]
    return ViewSet(
        images=images,
        azimuths=cfg.azimuths.copy(),
        render_mode=cfg.render_mode,
        meta={"image_size": S, "channels": cfg.channels, "elevation": cfg.elevation},
    )


def apply_mask(views: ViewSet, mask: RegionMask) -> ViewSet:
    """Zero all pixels whose body-height fraction falls inside any band."""
    if not mask.bands:
        return views
    h = row_height_fractions(views.image_size)
    kill = np.zeros(views.image_size, dtype=bool)
    for lo, hi in mask.bands:
        kill |= (h >= lo) & (h <= hi)
    images = views.images.copy()
    images[:, kill, :, :] = 0.0
    return replace(views, images=images, mask_applied=mask)


# -------------------------------------------------------------------- export

def export_views(views: ViewSet, out_dir, source_id: str, transform: dict | None = None) -> Path:
    """Write view_{k:02}.png (16-bit grayscale) plus manifest.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for k in range(views.n_views):
        gray = np.round(views.images[k, :, :, 0].astype(np.float64) * 65535.0).astype(np.uint16)
        pngio.write_png(out_dir / f"view_{k:02}.png", gray)
    manifest = {
        "source_id": source_id,
        "azimuths": [float(a) for a in views.azimuths],
        "image_size": views.image_size,
        "render_mode": views.render_mode,
        "channels": int(views.images.shape[3]),
        "mask_bands": list(views.mask_applied.bands) if views.mask_applied else [],
        "normalization": transform or {},
        "margin": MARGIN,
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return out_dir


def load_views(proj_dir) -> ViewSet:
    """Load a directory written by export_views."""
    proj_dir = Path(proj_dir)
    with open(proj_dir / "manifest.json") as fh:
        manifest = json.load(fh)
    n = len(manifest["azimuths"])
    S = manifest["image_size"]
    C = manifest.get("channels", 3)
    images = np.empty((n, S, S, C), dtype=np.float32)
    for k in range(n):
        gray = pngio.read_png(proj_dir / f"view_{k:02}.png").astype(np.float32) / 65535.0
        images[k] = gray[:, :, None]
    bands = manifest.get("mask_bands") or []
    return ViewSet(
        images=images,
        azimuths=np.asarray(manifest["azimuths"], dtype=np.float64),
        render_mode=manifest["render_mode"],
        mask_applied=RegionMask(tuple(tuple(b) for b in bands)) if bands else None,
        meta={"image_size": S, "channels": C},
    )
