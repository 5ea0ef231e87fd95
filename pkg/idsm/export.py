"""
Data and reconstruction bundles on disk.

A data bundle holds the measurements produced by ``generate``::

    manifest.json   seed, noise, model, mesh targets, arcs, fluxes
    mesh.txt        the reconstruction mesh
    partition.csv   edge_index,label
    data_<i>.csv    node_index,y_d (one file per flux)

A reconstruction bundle holds the result of ``reconstruct``::

    u_<type>_<k>.csv  node_index,u_norm (normalized by the maximum norm)
    trace.csv         one row per iteration
    summary.json      solve counts, residuals, boxes, damping trace, probe log
    u_<k>.vtk         optional legacy VTK files
"""
import csv
import json
import logging
import os

import meshio
import numpy as np
from django.conf import settings

from .constants import DATA_FILE
from .constants import FIELD_FILE
from .constants import MANIFEST_FILE
from .constants import MESH_FILE
from .constants import PARTITION_FILE
from .constants import SUMMARY_FILE
from .constants import TRACE_FILE
from .constants import VTK_FILE
from .exceptions import DataMismatchError
from .exceptions import MeshError
from .fem import BoundaryField
from .iteration import expected_solves
from .mesh import read_mesh
from .mesh import write_mesh


log = logging.getLogger(__name__)  # noqa

TRACE_COLUMNS = (
    "k",
    "lambda",
    "damping_factor",
    "rank",
    "pairing",
    "secant",
    "probe_ratio",
    "skipped",
    "solve_count",
)


def format_value(value, digits=None):
    """Numbers with ``IDSM_OUTPUT_DIGITS`` significant digits; blanks for ``None``."""
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if digits is None:
        digits = settings.IDSM_OUTPUT_DIGITS
    return f"{float(value):.{digits}g}"


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fd:
        writer = csv.writer(fd, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(value) for value in row])


def read_csv(path, header):
    """
    Rows of a CSV file with the expected header.

    :raises DataMismatchError: if the file is missing or malformed
    """
    if not os.path.isfile(path):
        raise DataMismatchError(f"{path}: missing file")
    with open(path, newline="") as fd:
        rows = list(csv.reader(fd))
    if not rows or tuple(rows[0]) != tuple(header):
        raise DataMismatchError(f"{path}:1: expected header {','.join(header)}")
    return rows[1:]


def write_json(path, data):
    with open(path, "w") as fd:
        json.dump(data, fd, indent=2, sort_keys=True)
        fd.write("\n")


def read_json(path):
    if not os.path.isfile(path):
        raise DataMismatchError(f"{path}: missing file")
    with open(path) as fd:
        try:
            return json.load(fd)
        except ValueError as error:
            raise DataMismatchError(f"{path}: {error}")


def write_field(path, indices, values, quantity):
    """A ``node_index,<quantity>`` file."""
    write_csv(path, ("node_index", quantity), zip(indices, values))


def read_field(path, quantity):
    """Node indices and values of a ``node_index,<quantity>`` file."""
    rows = read_csv(path, ("node_index", quantity))
    try:
        indices = np.array([int(row[0]) for row in rows], dtype=np.int64)
        values = np.array([float(row[1]) for row in rows], dtype=float)
    except (ValueError, IndexError) as error:
        raise DataMismatchError(f"{path}: {error}")
    return indices, values


def normalized(values):
    """Values divided by their maximum norm, and that norm."""
    scale = float(np.abs(values).max()) if len(values) else 0.0
    if scale == 0.0:
        return np.zeros_like(values), 0.0
    return values / scale, scale


def manifest_for(config):
    problem = config.problem
    return {
        "model": problem.model,
        "types": list(problem.type_names),
        "fine_target": config.fine_target,
        "coarse_target": config.coarse_target,
        "arcs": [list(arc) for arc in config.arcs],
        "fluxes": list(config.fluxes),
        "full_data": config.full_data,
        "noise": config.noise,
        "seed": config.seed,
        "version": settings.IDSM_VERSION,
    }


def write_data_bundle(out, config, mesh, partition, data):
    """Write measured boundary data with the mesh and partition it lives on."""
    os.makedirs(out, exist_ok=True)
    write_json(os.path.join(out, MANIFEST_FILE), manifest_for(config))
    write_mesh(mesh, os.path.join(out, MESH_FILE))
    write_csv(
        os.path.join(out, PARTITION_FILE),
        ("edge_index", "label"),
        enumerate(partition.edge_labels),
    )
    for index, field in enumerate(data, start=1):
        write_field(
            os.path.join(out, DATA_FILE.format(index=index)),
            mesh.boundary_nodes,
            field.values,
            "y_d",
        )
    log.info("Wrote %s datasets to %s", len(data), out)


def read_data_bundle(path, config, mesh, partition):
    """
    Measured data for a reconstruction, checked against the configured setup.

    :raises DataMismatchError: if the bundle was generated for another mesh,
        partition, model or set of fluxes
    """
    manifest = read_json(os.path.join(path, MANIFEST_FILE))
    expected = manifest_for(config)
    for key in ("model", "types", "fine_target", "fluxes"):
        if manifest.get(key) != expected[key]:
            raise DataMismatchError(
                f"{path}: {key} {manifest.get(key)!r} does not match {expected[key]!r}"
            )

    try:
        bundle_mesh = read_mesh(os.path.join(path, MESH_FILE))
    except (MeshError, OSError) as error:
        raise DataMismatchError(str(error))
    if not bundle_mesh.matches(mesh):
        raise DataMismatchError(f"{path}: the mesh does not match the configured mesh")

    rows = read_csv(os.path.join(path, PARTITION_FILE), ("edge_index", "label"))
    labels = [row[1] for row in rows if len(row) == 2]
    if labels != list(partition.edge_labels):
        raise DataMismatchError(
            f"{path}: the boundary partition does not match the configured arcs"
        )

    data = []
    for index in range(1, len(config.fluxes) + 1):
        name = DATA_FILE.format(index=index)
        nodes, values = read_field(os.path.join(path, name), "y_d")
        if not np.array_equal(nodes, mesh.boundary_nodes):
            raise DataMismatchError(
                f"{path}/{name}: boundary nodes do not match the mesh"
            )
        data.append(BoundaryField(mesh, values, name=f"y_d_f{index}"))
    return data


def write_vtk(path, mesh, fields):
    """
    One legacy ASCII VTK file with the normalized fields as point data.

    The first field is stored as ``u_norm``; with several inclusion types every
    field is also stored as ``u_norm_<type>``.
    """
    points = np.column_stack([mesh.nodes, np.zeros(mesh.node_count)])
    point_data = {}
    for position, (name, values) in enumerate(fields):
        if position == 0:
            point_data["u_norm"] = values
        if len(fields) > 1:
            point_data[f"u_norm_{name}"] = values
    vtk_mesh = meshio.Mesh(
        points, [("triangle", mesh.triangles)], point_data=point_data
    )
    meshio.write(path, vtk_mesh, file_format="vtk", binary=False)


def trace_rows(history):
    for record in history:
        yield [
            record.k,
            record.lam,
            record.damping_factor,
            record.rank,
            record.pairing,
            record.secant,
            record.probe_ratio,
            record.skipped,
            record.solve_count,
        ] + list(record.scales)


def summarize(reconstruction, field_scales):
    config = reconstruction.config
    problem = reconstruction.problem
    history = reconstruction.history
    iterations = reconstruction.iterations_done
    return {
        "model": problem.model,
        "types": list(problem.type_names),
        "scheme": config.scheme,
        "p_index": config.p_index,
        "damping": config.damping,
        "full_data": config.full_data,
        "linear_background": problem.linear_background,
        "iterations": iterations,
        "solve_count": reconstruction.counter.total,
        "expected_solve_count": expected_solves(iterations, problem.linear_background),
        "solve_stages": dict(sorted(reconstruction.counter.stages.items())),
        "solve_counts": [record.solve_count for record in history],
        "boxes": {
            name: list(box) for name, box in zip(problem.type_names, config.boxes)
        },
        "field_scales": field_scales,
        "lambda": [record.lam for record in history[1:]],
        "skipped": [record.k for record in history if record.skipped],
        "residuals": [record.residuals for record in history],
        "final_residuals": history[-1].residuals,
        "probe_log": reconstruction.probe_log,
        "version": settings.IDSM_VERSION,
    }


def write_reconstruction(out, reconstruction, vtk=False):
    """Write every iterate, the resolver trace and the run summary."""
    os.makedirs(out, exist_ok=True)
    mesh = reconstruction.mesh
    names = reconstruction.problem.type_names
    field_scales = {name: [] for name in names}
    node_indices = np.arange(mesh.node_count)

    for record in reconstruction.history:
        fields = []
        for name, field in zip(names, record.u):
            values, scale = normalized(field.values)
            field_scales[name].append(scale)
            fields.append((name, values))
            write_field(
                os.path.join(out, FIELD_FILE.format(name=name, k=record.k)),
                node_indices,
                values,
                "u_norm",
            )
        if vtk:
            write_vtk(os.path.join(out, VTK_FILE.format(k=record.k)), mesh, fields)

    write_csv(
        os.path.join(out, TRACE_FILE),
        TRACE_COLUMNS + tuple(f"C_D_{name}" for name in names),
        trace_rows(reconstruction.history),
    )
    write_json(os.path.join(out, SUMMARY_FILE), summarize(reconstruction, field_scales))
    log.info("Wrote %s iterates to %s", len(reconstruction.history), out)
