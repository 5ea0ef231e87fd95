"""Triangulations of the unit disk, boundary partitions, and coarse maps."""
import logging
import math

import numpy as np
from django.conf import settings
from django.core.exceptions import ValidationError
from scipy import sparse
from scipy.spatial import cKDTree

from .exceptions import MeshError


log = logging.getLogger(__name__)  # noqa

TWO_PI = 2.0 * math.pi

# First-ring sizes tried when the hexagonal layout misses the target count
FIRST_RING_SIZES = (4, 5, 6, 7, 8)

# Nearest coarse cells inspected before falling back to a full search
LOCATE_CANDIDATES = 12


class Mesh:

    """
    A conforming P1 triangulation with an ordered boundary loop.

    Boundary edges are stored counterclockwise along the loop so that
    ``boundary_edges[i][1] == boundary_edges[i + 1][0]``.
    Node ``boundary_nodes[i]`` is shared by the edges ``i - 1`` and ``i``.
    """

    def __init__(self, nodes, triangles, boundary_edges):
        """
        Validate and freeze a triangulation.

        :param nodes: (n, 2) node coordinates
        :param triangles: (m, 3) node indices, counterclockwise
        :param boundary_edges: (b, 2) boundary node pairs in any order
        :raises MeshError: on degenerate triangles or a broken boundary loop
        """
        nodes = np.array(nodes, dtype=float).reshape(-1, 2)
        triangles = np.array(triangles, dtype=np.int64).reshape(-1, 3)
        boundary_edges = np.array(boundary_edges, dtype=np.int64).reshape(-1, 2)

        if len(triangles) == 0:
            raise MeshError("A mesh needs at least one triangle")
        if triangles.min() < 0 or triangles.max() >= len(nodes):
            raise MeshError("Triangle node index out of range")

        areas = _signed_areas(nodes, triangles)
        if np.any(areas <= 0.0):
            index = int(np.argmax(areas <= 0.0))
            raise MeshError(f"Triangle {index} has nonpositive area {areas[index]!r}")

        self.nodes = nodes
        self.triangles = triangles
        self.boundary_edges = _order_boundary_loop(nodes, boundary_edges)
        self.triangle_areas = areas
        # Coarse edge of every midpoint node, set by refine
        self.parent_edges = None

        first = self.nodes[self.boundary_edges[:, 0]]
        second = self.nodes[self.boundary_edges[:, 1]]
        self.edge_lengths = np.linalg.norm(second - first, axis=1)
        midpoints = 0.5 * (first + second)
        self.edge_angles = np.mod(np.arctan2(midpoints[:, 1], midpoints[:, 0]), TWO_PI)

        self.boundary_nodes = self.boundary_edges[:, 0].copy()
        self.boundary_position = np.full(len(nodes), -1, dtype=np.int64)
        self.boundary_position[self.boundary_nodes] = np.arange(
            len(self.boundary_nodes)
        )

        self.lumped_mass = np.bincount(
            self.triangles.ravel(),
            weights=np.repeat(areas / 3.0, 3),
            minlength=len(nodes),
        )

        for array in (
            self.nodes,
            self.triangles,
            self.boundary_edges,
            self.triangle_areas,
            self.edge_lengths,
            self.edge_angles,
            self.boundary_nodes,
            self.boundary_position,
            self.lumped_mass,
        ):
            array.setflags(write=False)

    def __repr__(self):
        return (
            f"<Mesh nodes={self.node_count} triangles={self.triangle_count} "
            f"boundary={self.boundary_node_count}>"
        )

    @property
    def node_count(self):
        return len(self.nodes)

    @property
    def triangle_count(self):
        return len(self.triangles)

    @property
    def boundary_node_count(self):
        return len(self.boundary_nodes)

    @property
    def area(self):
        return float(self.triangle_areas.sum())

    @property
    def barycenters(self):
        return self.nodes[self.triangles].mean(axis=1)

    @property
    def diameters(self):
        """Longest edge of every triangle."""
        corners = self.nodes[self.triangles]
        return np.max(
            np.linalg.norm(corners - np.roll(corners, -1, axis=1), axis=2), axis=1
        )

    def is_disk(self, tolerance=None):
        """Whether every boundary node lies on the unit circle."""
        if tolerance is None:
            tolerance = settings.IDSM_MESH_TOLERANCE
        radii = np.linalg.norm(self.nodes[self.boundary_nodes], axis=1)
        return bool(np.all(np.abs(radii - 1.0) <= tolerance))

    def matches(self, other):
        """Exact structural equality with another mesh."""
        return (
            self.nodes.shape == other.nodes.shape
            and self.triangles.shape == other.triangles.shape
            and np.array_equal(self.nodes, other.nodes)
            and np.array_equal(self.triangles, other.triangles)
            and np.array_equal(self.boundary_edges, other.boundary_edges)
        )


class BoundaryPartition:

    """
    Splits the boundary edges of a mesh into the accessible part (D) and the rest (N).

    An edge is accessible when its midpoint angle falls in one of the arcs.
    A boundary node is accessible when any incident edge is.
    """

    def __init__(self, mesh, accessible_arcs, dirichlet_edges):
        self.mesh = mesh
        self.accessible_arcs = tuple(tuple(arc) for arc in accessible_arcs)
        self.dirichlet_edges = np.asarray(dirichlet_edges, dtype=bool)
        self.dirichlet_edges.setflags(write=False)

        previous = np.roll(self.dirichlet_edges, 1)
        self.dirichlet_nodes = self.dirichlet_edges | previous
        self.dirichlet_nodes.setflags(write=False)

    def __repr__(self):
        return f"<BoundaryPartition arcs={self.accessible_arcs!r}>"

    @property
    def neumann_edges(self):
        return ~self.dirichlet_edges

    @property
    def neumann_nodes(self):
        return ~self.dirichlet_nodes

    @property
    def edge_labels(self):
        """One ``D`` or ``N`` label per boundary edge."""
        return np.where(self.dirichlet_edges, "D", "N")

    @property
    def is_full(self):
        return bool(self.dirichlet_edges.all())

    @property
    def dirichlet_length(self):
        return float(self.mesh.edge_lengths[self.dirichlet_edges].sum())

    def edge_weights(self, on_dirichlet, on_neumann):
        """Per-edge values, ``on_dirichlet`` on D edges and ``on_neumann`` elsewhere."""
        return np.where(self.dirichlet_edges, float(on_dirichlet), float(on_neumann))

    def matches(self, other):
        return np.array_equal(self.dirichlet_edges, other.dirichlet_edges)


class CoarseMap:

    """
    Assignment of fine triangles to the coarse cells that contain them.

    ``transfer`` is the (fine nodes x coarse cells) matrix whose entry (i, Q)
    is the share of the lumped mass of node ``i`` lying in cell ``Q``.
    Its rows sum to one.
    """

    def __init__(self, fine_mesh, coarse_mesh, fine_to_coarse):
        self.fine_mesh = fine_mesh
        self.coarse_mesh = coarse_mesh
        self.fine_to_coarse = np.asarray(fine_to_coarse, dtype=np.int64)
        self.coarse_areas = coarse_mesh.triangle_areas
        self.h_min = float(self.coarse_areas.min())

        rows = fine_mesh.triangles.ravel()
        columns = np.repeat(self.fine_to_coarse, 3)
        shares = (
            np.repeat(fine_mesh.triangle_areas / 3.0, 3) / fine_mesh.lumped_mass[rows]
        )
        self.transfer = sparse.csr_matrix(
            (shares, (rows, columns)),
            shape=(fine_mesh.node_count, coarse_mesh.triangle_count),
        )

    def __repr__(self):
        return (
            f"<CoarseMap fine={self.fine_mesh.triangle_count} "
            f"coarse={self.coarse_mesh.triangle_count} h_min={self.h_min:.3e}>"
        )

    @property
    def cell_counts(self):
        """Number of fine triangles assigned to every coarse cell."""
        return np.bincount(
            self.fine_to_coarse, minlength=self.coarse_mesh.triangle_count
        )


def build_disk_mesh(target_triangles):
    """
    Build a structured polar triangulation of the unit disk.

    Ring ``j`` of ``n`` rings carries ``m * j`` nodes at radius ``j / n`` so the
    mesh has ``m * n**2`` triangles. Six nodes on the first ring is preferred.

    :param target_triangles: the wanted number of triangles
    :return: a :py:class:`Mesh` within 25% of the target
    """
    if target_triangles < 4:
        raise MeshError(
            f"Cannot triangulate the disk with {target_triangles} triangles"
        )

    first_ring, rings = _ring_layout(target_triangles)
    log.debug(
        "Building disk mesh: target=%s first_ring=%s rings=%s",
        target_triangles,
        first_ring,
        rings,
    )

    nodes = [(0.0, 0.0)]
    starts = [0]
    for ring in range(1, rings + 1):
        starts.append(len(nodes))
        count = first_ring * ring
        radius = 1.0 if ring == rings else ring / rings
        for step in range(count):
            angle = TWO_PI * step / count
            nodes.append((radius * math.cos(angle), radius * math.sin(angle)))

    triangles = [
        (0, starts[1] + step, starts[1] + (step + 1) % first_ring)
        for step in range(first_ring)
    ]
    for ring in range(2, rings + 1):
        triangles.extend(
            _stitch_rings(
                starts[ring - 1],
                first_ring * (ring - 1),
                starts[ring],
                first_ring * ring,
            )
        )

    outer = first_ring * rings
    boundary = [
        (starts[rings] + step, starts[rings] + (step + 1) % outer)
        for step in range(outer)
    ]
    return Mesh(nodes, triangles, boundary)


def refine(mesh):
    """
    Split every triangle into four through its edge midpoints.

    Midpoints of boundary edges of a disk mesh are pushed onto the unit circle.
    """
    node_count = mesh.node_count
    tri = mesh.triangles
    local = np.stack([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]], axis=1)
    keys = np.sort(local, axis=2)
    keys = keys[:, :, 0] * node_count + keys[:, :, 1]
    unique_keys, inverse = np.unique(keys.ravel(), return_inverse=True)
    inverse = inverse.reshape(-1, 3) + node_count

    ends = np.stack([unique_keys // node_count, unique_keys % node_count], axis=1)
    midpoints = 0.5 * (mesh.nodes[ends[:, 0]] + mesh.nodes[ends[:, 1]])

    edges = mesh.boundary_edges
    boundary_keys = np.sort(edges, axis=1)
    boundary_keys = boundary_keys[:, 0] * node_count + boundary_keys[:, 1]
    boundary_mid = np.searchsorted(unique_keys, boundary_keys)
    if mesh.is_disk():
        pushed = midpoints[boundary_mid]
        midpoints[boundary_mid] = pushed / np.linalg.norm(pushed, axis=1)[:, None]

    ab, bc, ca = inverse[:, 0], inverse[:, 1], inverse[:, 2]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    triangles = np.concatenate(
        [
            np.stack([a, ab, ca], axis=1),
            np.stack([ab, b, bc], axis=1),
            np.stack([ca, bc, c], axis=1),
            np.stack([ab, bc, ca], axis=1),
        ]
    )

    mids = boundary_mid + node_count
    boundary = np.empty((2 * len(edges), 2), dtype=np.int64)
    boundary[0::2, 0] = edges[:, 0]
    boundary[0::2, 1] = mids
    boundary[1::2, 0] = mids
    boundary[1::2, 1] = edges[:, 1]

    refined = Mesh(np.vstack([mesh.nodes, midpoints]), triangles, boundary)
    refined.parent_edges = ends
    return refined


def prolong(fine, values):
    """Interpolate nodal values of a mesh onto its refinement ``fine``."""
    if fine.parent_edges is None:
        raise MeshError("Mesh was not built by refine")
    values = np.asarray(values, dtype=float)
    ends = fine.parent_edges
    if len(values) + len(ends) != fine.node_count:
        raise MeshError("Values do not belong to the parent of this mesh")
    return np.concatenate([values, 0.5 * (values[ends[:, 0]] + values[ends[:, 1]])])


def partition_boundary(mesh, arcs):
    """
    Label boundary edges accessible (D) or not (N).

    :param mesh: the mesh to label
    :param arcs: pairs ``(start, end)`` in radians, half open, any 2*pi window
    :raises ValidationError: when arcs are malformed or overlap
    """
    pieces = []
    for arc in arcs:
        pieces.extend(_normalize_arc(arc))
    pieces.sort()
    for previous, current in zip(pieces, pieces[1:]):
        if current[0] < previous[1]:
            raise ValidationError(
                "Accessible arcs overlap near angle %(angle)s",
                params={"angle": current[0]},
                code="overlapping-arcs",
            )

    angles = mesh.edge_angles
    dirichlet = np.zeros(len(angles), dtype=bool)
    for start, end in pieces:
        dirichlet |= (angles >= start) & (angles < end)

    log.debug(
        "Boundary partition: arcs=%s accessible_edges=%s/%s",
        arcs,
        int(dirichlet.sum()),
        len(dirichlet),
    )
    return BoundaryPartition(mesh, arcs, dirichlet)


def build_coarse_map(fine, coarse, tolerance=None):
    """
    Locate every fine barycenter in a coarse triangle.

    Barycenters in the gaps between a coarse polygon and the curved boundary
    go to the nearest coarse triangle. Ties on shared edges go to the lowest
    coarse index.

    :raises MeshError: when a barycenter is farther than one element diameter
        from every coarse triangle
    """
    if tolerance is None:
        tolerance = settings.IDSM_LOCATE_TOLERANCE

    points = fine.barycenters
    tree = cKDTree(coarse.barycenters)
    count = min(LOCATE_CANDIDATES, coarse.triangle_count)
    _, candidates = tree.query(points, k=count)
    candidates = np.asarray(candidates).reshape(len(points), count)

    lambdas = _barycentric(coarse, candidates, points)
    inside = np.all(lambdas >= -tolerance, axis=2)
    sentinel = coarse.triangle_count
    assignment = np.where(inside, candidates, sentinel).min(axis=1)

    missing = np.flatnonzero(assignment == sentinel)
    if len(missing):
        log.debug("Full search for %s barycenters near the boundary", len(missing))
        assignment[missing] = _locate_exhaustively(coarse, points[missing], tolerance)

    return CoarseMap(fine, coarse, assignment)


def distance_to_boundary(points):
    """Distance from points of the unit disk to the unit circle."""
    return 1.0 - np.linalg.norm(np.asarray(points, dtype=float), axis=-1)


def write_mesh(mesh, path, digits=None):
    """Write the ``NODES`` / ``TRIANGLES`` / ``BOUNDARY`` text format."""
    if digits is None:
        digits = settings.IDSM_OUTPUT_DIGITS
    lines = [f"NODES {mesh.node_count}"]
    lines.extend(f"{x:.{digits}g} {y:.{digits}g}" for x, y in mesh.nodes)
    lines.append(f"TRIANGLES {mesh.triangle_count}")
    lines.extend(f"{i} {j} {k}" for i, j, k in mesh.triangles)
    lines.append(f"BOUNDARY {len(mesh.boundary_edges)}")
    lines.extend(f"{i} {j}" for i, j in mesh.boundary_edges)
    with open(path, "w") as fd:
        fd.write("\n".join(lines) + "\n")


def read_mesh(path):
    """
    Read a mesh written by :py:func:`write_mesh` (or by hand).

    Clockwise triangles are reoriented.

    :raises MeshError: with the offending line number
    """
    with open(path) as fd:
        lines = [(number, line.split()) for number, line in enumerate(fd, start=1)]
    lines = [(number, fields) for number, fields in lines if fields]

    position = 0
    sections = {}
    for keyword, columns, kind in (
        ("NODES", 2, float),
        ("TRIANGLES", 3, int),
        ("BOUNDARY", 2, int),
    ):
        if position >= len(lines):
            raise MeshError(f"{path}: missing {keyword} section")
        number, fields = lines[position]
        if len(fields) != 2 or fields[0] != keyword:
            raise MeshError(f"{path}:{number}: expected '{keyword} <count>'")
        try:
            count = int(fields[1])
        except ValueError:
            raise MeshError(f"{path}:{number}: invalid count {fields[1]!r}")
        rows = lines[position + 1 : position + 1 + count]
        if len(rows) != count:
            raise MeshError(f"{path}:{number}: expected {count} {keyword} rows")
        values = []
        for row_number, row in rows:
            if len(row) != columns:
                raise MeshError(f"{path}:{row_number}: expected {columns} values")
            try:
                values.append([kind(value) for value in row])
            except ValueError:
                raise MeshError(f"{path}:{row_number}: invalid value in {row!r}")
        sections[keyword] = values
        position += 1 + count

    if position != len(lines):
        raise MeshError(f"{path}:{lines[position][0]}: unexpected trailing content")

    nodes = np.array(sections["NODES"], dtype=float).reshape(-1, 2)
    triangles = np.array(sections["TRIANGLES"], dtype=np.int64).reshape(-1, 3)
    if len(triangles) and (triangles.min() < 0 or triangles.max() >= len(nodes)):
        raise MeshError(f"{path}: triangle node index out of range")
    clockwise = _signed_areas(nodes, triangles) < 0.0
    triangles[clockwise] = triangles[clockwise][:, [0, 2, 1]]
    return Mesh(nodes, triangles, sections["BOUNDARY"])


def _signed_areas(nodes, triangles):
    a = nodes[triangles[:, 0]]
    b = nodes[triangles[:, 1]]
    c = nodes[triangles[:, 2]]
    return 0.5 * (
        (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
        - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1])
    )


def _order_boundary_loop(nodes, edges):
    """Chain boundary edges into one counterclockwise loop."""
    if len(edges) < 3:
        raise MeshError("The boundary needs at least three edges")

    neighbours = {}
    for i, j in edges:
        neighbours.setdefault(int(i), []).append(int(j))
        neighbours.setdefault(int(j), []).append(int(i))
    if any(len(adjacent) != 2 for adjacent in neighbours.values()):
        raise MeshError("Boundary edges do not form a simple closed loop")

    start = int(edges[0][0])
    loop = [start, int(edges[0][1])]
    while len(loop) <= len(edges):
        previous, current = loop[-2], loop[-1]
        first, second = neighbours[current]
        following = second if first == previous else first
        if following == start:
            break
        loop.append(following)
    if len(loop) != len(edges):
        raise MeshError("Boundary edges form more than one loop")

    loop = np.array(loop, dtype=np.int64)
    x, y = nodes[loop, 0], nodes[loop, 1]
    if np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y) < 0.0:
        loop = np.concatenate([loop[:1], loop[1:][::-1]])
    return np.stack([loop, np.roll(loop, -1)], axis=1)


def _normalize_arc(arc):
    """Map one arc into ``[0, 2*pi)``, splitting it when it wraps around."""
    try:
        start, end = (float(value) for value in arc)
    except (TypeError, ValueError):
        raise ValidationError(
            "An arc must be a pair of angles, not %(arc)r",
            params={"arc": arc},
            code="invalid-arc",
        )
    if not (math.isfinite(start) and math.isfinite(end)) or start >= end:
        raise ValidationError(
            "Arc %(arc)r must have a finite start below its end",
            params={"arc": arc},
            code="invalid-arc",
        )
    length = end - start
    if length > TWO_PI + 1e-12:
        raise ValidationError(
            "Arc %(arc)r is longer than the full circle",
            params={"arc": arc},
            code="invalid-arc",
        )
    if length >= TWO_PI:
        return [(0.0, TWO_PI)]

    start = math.fmod(start, TWO_PI)
    if start < 0.0:
        start += TWO_PI
    end = start + length
    if end <= TWO_PI:
        return [(start, end)]
    return [(start, TWO_PI), (0.0, end - TWO_PI)]


def _ring_layout(target):
    """Pick the first-ring size and ring count closest to the target."""
    rings = max(1, int(round(math.sqrt(target / 6.0))))
    if abs(6 * rings * rings - target) <= 0.25 * target:
        return 6, rings

    best = None
    for first_ring in FIRST_RING_SIZES:
        for rings in range(1, int(math.sqrt(target / first_ring)) + 2):
            error = abs(first_ring * rings * rings - target)
            if best is None or error < best[0]:
                best = (error, first_ring, rings)
    error, first_ring, rings = best
    if error > 0.25 * target:
        raise MeshError(f"No polar layout within 25% of {target} triangles")
    return first_ring, rings


def _stitch_rings(inner_start, inner_count, outer_start, outer_count):
    """Triangulate the annulus between two rings by merging their angles."""
    triangles = []
    i = k = 0
    while i < inner_count or k < outer_count:
        # Compare (k + 1) / outer_count with (i + 1) / inner_count exactly
        advance_outer = i == inner_count or (
            k < outer_count and (k + 1) * inner_count <= (i + 1) * outer_count
        )
        inner = inner_start + i % inner_count
        outer = outer_start + k % outer_count
        if advance_outer:
            triangles.append((inner, outer, outer_start + (k + 1) % outer_count))
            k += 1
        else:
            triangles.append((inner, outer, inner_start + (i + 1) % inner_count))
            i += 1
    return triangles


def _barycentric(mesh, triangles, points):
    """Barycentric coordinates of ``points[p]`` in triangles ``triangles[p, :]``."""
    corners = mesh.nodes[mesh.triangles[triangles]]
    a, b, c = corners[..., 0, :], corners[..., 1, :], corners[..., 2, :]
    p = points[:, None, :] if triangles.ndim == 2 else points
    det = (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (
        c[..., 0] - a[..., 0]
    ) * (b[..., 1] - a[..., 1])
    dx = p[..., 0] - a[..., 0]
    dy = p[..., 1] - a[..., 1]
    l1 = ((c[..., 1] - a[..., 1]) * dx - (c[..., 0] - a[..., 0]) * dy) / det
    l2 = ((b[..., 0] - a[..., 0]) * dy - (b[..., 1] - a[..., 1]) * dx) / det
    return np.stack([1.0 - l1 - l2, l1, l2], axis=-1)


def _segment_distance(points, start, end):
    direction = end - start
    length = np.maximum(np.sum(direction * direction, axis=-1), np.finfo(float).tiny)
    t = np.clip(np.sum((points - start) * direction, axis=-1) / length, 0.0, 1.0)
    closest = start + t[..., None] * direction
    return np.linalg.norm(points - closest, axis=-1)


def _locate_exhaustively(coarse, points, tolerance):
    """Containing or nearest coarse triangle of each point, over every triangle."""
    everything = np.arange(coarse.triangle_count)
    corners = coarse.nodes[coarse.triangles]
    diameters = coarse.diameters
    result = np.empty(len(points), dtype=np.int64)
    for index, point in enumerate(points):
        repeated = np.broadcast_to(point, (len(everything), 2))
        lambdas = _barycentric(coarse, everything, repeated)
        inside = np.flatnonzero(np.all(lambdas >= -tolerance, axis=1))
        if len(inside):
            result[index] = inside[0]
            continue
        distances = np.min(
            [
                _segment_distance(point, corners[:, 0], corners[:, 1]),
                _segment_distance(point, corners[:, 1], corners[:, 2]),
                _segment_distance(point, corners[:, 2], corners[:, 0]),
            ],
            axis=0,
        )
        nearest = int(np.argmin(distances))
        if distances[nearest] > diameters[nearest]:
            raise MeshError(
                f"Point ({point[0]!r}, {point[1]!r}) lies {distances[nearest]!r} away "
                f"from the coarse mesh"
            )
        result[index] = nearest
    return result
