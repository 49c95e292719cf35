"""Sleeve garments: procedural tube meshes, OBJ ingestion, opening geometry.

Garment-local frame: the shoulder opening ring lies in the x=0 plane, the
tube extends toward +x (cuff at x=sleeve_length), +z up. Ring vertex k sits
at angle theta_k = 2*pi*k/R in the (y, z) plane, so the topmost rest vertex
is at k = R/4 for R divisible by 4.

Spring topology mirrors the classic three-family cloth setup:
  * stretch: the unique triangle edges,
  * shear: both diagonals of each generated quad,
  * bend: the opposite-vertex pair of every adjacent triangle pair.
Families may overlap (a quad's split diagonal is both a stretch edge and a
shear diagonal); the simulator treats them independently.

The opening-geometry hexagon is built by projecting the ring onto its
best-fit plane (eigenvectors of the point covariance, sign-canonicalized),
ordering projected points by angle about the centroid, and linearly
resampling 6 vertices at 60-degree stations anchored at the smallest sorted
angle. Ordering by angle makes the hexagon star-shaped about the center by
construction, which is what the reward's membership test relies on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# One band of fabric emitted for zero-length sleeves so the tube still has
# triangles and springs (a bare ring would be unsimulatable).
_MIN_BAND = 0.015


@dataclass(frozen=True, eq=False)
class GarmentMesh:
    vertices: np.ndarray          # (V, 3) rest positions
    triangles: np.ndarray         # (T, 3) int
    stretch_edges: np.ndarray     # (E, 2) int, unique triangle edges
    shear_edges: np.ndarray       # (S, 2) int, quad diagonals
    bend_pairs: np.ndarray        # (B, 2) int, across adjacent triangles
    opening_ring: tuple[int, ...]  # ordered closed loop
    grasp_vertices: tuple[int, ...]
    name: str = "garment"
    sleeve_length: float = 0.0
    opening_circumference: float = 0.0

    @property
    def num_vertices(self) -> int:
        return int(self.vertices.shape[0])


@dataclass(frozen=True)
class OpeningGeometry:
    """Opening ring summary. hexagon/plane_normal are None when degenerate."""

    p_center: np.ndarray
    hexagon: np.ndarray | None
    plane_normal: np.ndarray | None
    degenerate: bool = False

    def __post_init__(self) -> None:
        if self.degenerate != (self.hexagon is None):
            raise ValueError("degenerate openings have no hexagon")


class GarmentError(ValueError):
    """Raised for malformed meshes or annotations."""


# ---------------------------------------------------------------------------
# topology helpers

def unique_edges(triangles: np.ndarray) -> np.ndarray:
    """Unique undirected edges of a triangle list, lexicographically sorted."""
    e = np.concatenate(
        [triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]]
    )
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def bend_pairs_from_triangles(triangles: np.ndarray) -> np.ndarray:
    """Opposite-vertex pairs across every edge shared by two triangles."""
    owners: dict[tuple[int, int], list[int]] = {}
    for t, (a, b, c) in enumerate(triangles):
        for u, v in ((a, b), (b, c), (c, a)):
            key = (min(u, v), max(u, v))
            owners.setdefault(key, []).append(t)
    pairs = []
    for (u, v), tris in sorted(owners.items()):
        if len(tris) != 2:
            continue
        opp = []
        for t in tris:
            verts = set(triangles[t]) - {u, v}
            opp.append(verts.pop())
        pairs.append(tuple(sorted(opp)))
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(np.array(sorted(pairs), dtype=np.int64), axis=0)


def _check_manifold(triangles: np.ndarray) -> None:
    e = np.concatenate(
        [triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]]
    )
    e = np.sort(e, axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    if np.any(counts > 2):
        raise GarmentError("non-manifold mesh: an edge is shared by >2 triangles")


def _validate(mesh: GarmentMesh) -> GarmentMesh:
    v = mesh.num_vertices
    ring = mesh.opening_ring
    if len(ring) < 6:
        raise GarmentError("opening ring must have at least 6 vertices")
    if len(set(ring)) != len(ring):
        raise GarmentError("opening ring is self-intersecting (repeated index)")
    all_idx = list(ring) + list(mesh.grasp_vertices)
    if mesh.triangles.size:
        all_idx += mesh.triangles.ravel().tolist()
    if any(i < 0 or i >= v for i in all_idx):
        raise GarmentError("vertex index out of range")
    if mesh.triangles.size:
        _check_manifold(mesh.triangles)
        edge_set = {tuple(e) for e in unique_edges(mesh.triangles)}
        loop = list(ring) + [ring[0]]
        for a, b in zip(loop[:-1], loop[1:]):
            if (min(a, b), max(a, b)) not in edge_set:
                raise GarmentError(
                    f"opening ring is not a closed mesh loop ({a}-{b} not an edge)"
                )
    # grasp must sit around the opening: within 5 cm of the ring itself
    # (a centroid-based bound would forbid any grasp on wide openings)
    ring_pos = mesh.vertices[list(ring)]
    grasp_pos = mesh.vertices[list(mesh.grasp_vertices)]
    d = np.linalg.norm(grasp_pos[:, None, :] - ring_pos[None], axis=2).min(axis=1)
    if np.any(d > 0.05 + 1e-9):
        raise GarmentError("grasp vertices farther than 5 cm from the opening ring")
    return mesh


# ---------------------------------------------------------------------------
# generation

def generate_sleeve_garment(
    sleeve_length: float,
    sleeve_radius: float,
    resolution: int = 12,
    body_panel: bool = False,
    panel_length: float = 0.12,
    name: str = "sleeve",
) -> GarmentMesh:
    """Procedural sleeve tube, optionally with a panel hanging below the
    opening (a stand-in for gown/cardigan body fabric).

    resolution = vertices per ring; station spacing along x targets square
    quads. sleeve_length 0 emits a minimal one-band collar tube.
    """
    if sleeve_length < 0:
        raise GarmentError("sleeve_length must be >= 0")
    if sleeve_radius <= 0:
        raise GarmentError("sleeve_radius must be > 0")
    if resolution < 6:
        raise GarmentError("resolution must be >= 6 (hexagon needs 6 stations)")

    r_count = int(resolution)
    spacing = 2.0 * sleeve_radius * np.sin(np.pi / r_count)
    length = max(float(sleeve_length), _MIN_BAND)
    n_x = max(2, int(round(length / spacing)) + 1)

    theta = 2.0 * np.pi * np.arange(r_count) / r_count
    ys = sleeve_radius * np.cos(theta)
    zs = sleeve_radius * np.sin(theta)
    xs = np.linspace(0.0, length, n_x)
    verts = [
        np.column_stack([np.full(r_count, x), ys, zs]) for x in xs
    ]
    vertices = np.concatenate(verts)

    tris = []
    for i in range(n_x - 1):
        for k in range(r_count):
            a = i * r_count + k
            b = i * r_count + (k + 1) % r_count
            c = (i + 1) * r_count + (k + 1) % r_count
            d = (i + 1) * r_count + k
            tris.append((a, b, c))
            tris.append((a, c, d))
    shear = []
    for i in range(n_x - 1):
        for k in range(r_count):
            a = i * r_count + k
            b = i * r_count + (k + 1) % r_count
            c = (i + 1) * r_count + (k + 1) % r_count
            d = (i + 1) * r_count + k
            shear.append((min(a, c), max(a, c)))
            shear.append((min(b, d), max(b, d)))

    if body_panel and panel_length > 0:
        vertices, extra_tris, extra_shear = _attach_panel(
            vertices, r_count, spacing, panel_length
        )
        tris.extend(extra_tris)
        shear.extend(extra_shear)

    triangles = np.array(tris, dtype=np.int64)
    ring = tuple(range(r_count))
    ring_pos = vertices[:r_count]
    circumference = float(
        np.linalg.norm(np.roll(ring_pos, -1, axis=0) - ring_pos, axis=1).sum()
    )
    # grasp: the three +z-most ring vertices in rest pose (ties by index)
    order = np.lexsort((np.arange(r_count), -ring_pos[:, 2]))
    grasp = tuple(sorted(int(i) for i in order[:3]))

    vertices = np.ascontiguousarray(vertices, dtype=np.float64)
    vertices.setflags(write=False)
    mesh = GarmentMesh(
        vertices=vertices,
        triangles=triangles,
        stretch_edges=unique_edges(triangles),
        shear_edges=np.unique(np.array(sorted(set(shear)), dtype=np.int64), axis=0),
        bend_pairs=bend_pairs_from_triangles(triangles),
        opening_ring=ring,
        grasp_vertices=grasp,
        name=name,
        sleeve_length=float(sleeve_length),
        opening_circumference=circumference,
    )
    return _validate(mesh)


def _attach_panel(vertices, r_count, spacing, panel_length):
    """Rows of fabric extruded straight down from the bottom arc of the ring."""
    ring = vertices[:r_count]
    bottom = int(np.argmin(ring[:, 2]))
    half = max(1, r_count // 6)
    arc = [(bottom + j) % r_count for j in range(-half, half + 1)]
    n_rows = max(1, int(round(panel_length / spacing)))
    cols = len(arc)
    new_rows = []
    for j in range(1, n_rows + 1):
        row = ring[arc].copy()
        row[:, 2] -= j * spacing
        new_rows.append(row)
    base = vertices.shape[0]
    out_vertices = np.concatenate([vertices] + new_rows)

    def vid(row, col):
        # row 0 is the ring arc itself
        if row == 0:
            return arc[col]
        return base + (row - 1) * cols + col

    tris, shear = [], []
    for row in range(n_rows):
        for col in range(cols - 1):
            a = vid(row, col)
            b = vid(row, col + 1)
            c = vid(row + 1, col + 1)
            d = vid(row + 1, col)
            tris.append((a, b, c))
            tris.append((a, c, d))
            shear.append((min(a, c), max(a, c)))
            shear.append((min(b, d), max(b, d)))
    return out_vertices, tris, shear


# ---------------------------------------------------------------------------
# OBJ + annotation I/O

def save_obj_garment(mesh: GarmentMesh, mesh_path, annotation_path) -> None:
    """ASCII OBJ (triangles, 1-indexed) + JSON annotation sidecar."""
    lines = [f"# {mesh.name}"]
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}")
    for t in mesh.triangles:
        lines.append(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}")
    Path(mesh_path).write_text("\n".join(lines) + "\n")
    ann = {
        "opening_ring": list(mesh.opening_ring),
        "grasp": list(mesh.grasp_vertices),
        "name": mesh.name,
        "sleeve_length": mesh.sleeve_length,
    }
    Path(annotation_path).write_text(json.dumps(ann, indent=1) + "\n")


def load_obj_garment(mesh_path, annotation_path) -> GarmentMesh:
    """Load a triangle/quad OBJ plus its JSON annotation.

    Quads are fan-triangulated (v0,v1,v2), (v0,v2,v3). Fails loudly on parse
    errors, non-manifold meshes, broken ring loops, out-of-range indices.
    """
    verts, tris = [], []
    for ln, raw in enumerate(Path(mesh_path).read_text().splitlines(), 1):
        parts = raw.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            if len(parts) < 4:
                raise GarmentError(f"{mesh_path}:{ln}: malformed vertex line")
            try:
                verts.append([float(x) for x in parts[1:4]])
            except ValueError as exc:
                raise GarmentError(f"{mesh_path}:{ln}: bad vertex number") from exc
        elif parts[0] == "f":
            try:
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
            except ValueError as exc:
                raise GarmentError(f"{mesh_path}:{ln}: bad face index") from exc
            if len(idx) < 3:
                raise GarmentError(f"{mesh_path}:{ln}: face with <3 vertices")
            for j in range(1, len(idx) - 1):
                tris.append((idx[0], idx[j], idx[j + 1]))
    if not verts:
        raise GarmentError(f"{mesh_path}: no vertices")
    try:
        ann = json.loads(Path(annotation_path).read_text())
        ring = tuple(int(i) for i in ann["opening_ring"])
        grasp = tuple(int(i) for i in ann["grasp"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise GarmentError(f"{annotation_path}: bad annotation: {exc}") from exc

    vertices = np.asarray(verts, dtype=np.float64)
    vertices.setflags(write=False)
    triangles = np.asarray(tris, dtype=np.int64)
    ring_pos = vertices[list(ring)] if max(ring, default=-1) < len(verts) else None
    circumference = 0.0
    if ring_pos is not None:
        circumference = float(
            np.linalg.norm(np.roll(ring_pos, -1, axis=0) - ring_pos, axis=1).sum()
        )
    mesh = GarmentMesh(
        vertices=vertices,
        triangles=triangles,
        stretch_edges=unique_edges(triangles),
        shear_edges=np.zeros((0, 2), dtype=np.int64),
        bend_pairs=bend_pairs_from_triangles(triangles),
        opening_ring=ring,
        grasp_vertices=grasp,
        name=str(ann.get("name", Path(mesh_path).stem)),
        sleeve_length=float(ann.get("sleeve_length", 0.0)),
        opening_circumference=circumference,
    )
    return _validate(mesh)


# ---------------------------------------------------------------------------
# opening geometry

def _canonical_sign(v: np.ndarray) -> np.ndarray:
    i = int(np.argmax(np.abs(v)))
    return -v if v[i] < 0 else v


def opening_geometry(mesh: GarmentMesh, positions: np.ndarray) -> OpeningGeometry:
    """Centroid + hexagon approximation of the current opening ring.

    The plane basis comes from the eigen-decomposition of the ring point
    covariance (permutation-invariant); stations are anchored at the smallest
    sorted angle so a regular 12-gon resamples to its inscribed hexagon and a
    regular hexagon is a fixed point.
    """
    ring = positions[list(mesh.opening_ring)]
    center = ring.mean(axis=0)
    rel = ring - center
    cov = rel.T @ rel
    w, vecs = np.linalg.eigh(cov)
    scale = float(w[2])
    if scale <= 0.0 or w[1] < 1e-12 * scale:
        return OpeningGeometry(
            p_center=center, hexagon=None, plane_normal=None, degenerate=True
        )
    normal = _canonical_sign(vecs[:, 0])
    e1 = _canonical_sign(vecs[:, 2])
    e2 = np.cross(normal, e1)

    u = rel @ e1
    v = rel @ e2
    ang = np.arctan2(v, u)
    order = np.argsort(ang, kind="stable")
    ang_s = ang[order]
    # projected ring points, in angular order
    proj = center + u[order, None] * e1 + v[order, None] * e2
    ang_ext = np.concatenate([ang_s, [ang_s[0] + 2.0 * np.pi]])
    proj_ext = np.concatenate([proj, proj[:1]])

    stations = ang_s[0] + np.arange(6) * (np.pi / 3.0)
    seg = np.clip(np.searchsorted(ang_ext, stations, side="right") - 1, 0,
                  len(ang_s) - 1)
    lo = ang_ext[seg]
    hi = ang_ext[seg + 1]
    span = hi - lo
    t = np.where(span > 0, (stations - lo) / np.where(span > 0, span, 1.0), 0.0)
    hexagon = proj_ext[seg] * (1.0 - t)[:, None] + proj_ext[seg + 1] * t[:, None]
    return OpeningGeometry(
        p_center=center, hexagon=hexagon, plane_normal=normal, degenerate=False
    )
