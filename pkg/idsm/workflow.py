"""The generate and reconstruct pipelines behind the management commands."""
import logging
import os

import numpy as np

from .constants import TRUTH_FILE
from .export import read_data_bundle
from .export import write_data_bundle
from .export import write_field
from .export import write_reconstruction
from .iteration import Reconstruction
from .mesh import build_disk_mesh
from .mesh import partition_boundary
from .mesh import refine
from .models import evaluate_flux
from .models import rasterize
from .models import synthesize_data


log = logging.getLogger(__name__)  # noqa


class Setup:

    """The reconstruction mesh and boundary partition of a configuration."""

    def __init__(self, config):
        self.config = config
        self.mesh = build_disk_mesh(config.fine_target)
        self.partition = partition_boundary(self.mesh, config.arcs)

    def __repr__(self):
        return f"<Setup {self.config.problem.model} {self.mesh!r}>"


def generate(config, out=None):
    """
    Synthesize one measured boundary field per flux.

    The true inclusions are rasterized on a refinement of the reconstruction
    mesh and the forward problems are solved there. Every flux draws its own
    noise from the seed sequence ``[seed, index]``.

    :param out: write a data bundle to this directory
    :return: the setup and the measured fields
    """
    setup = Setup(config)
    problem = config.problem
    fine = refine(setup.mesh)
    u_star = rasterize(config.shapes, fine, problem.type_names)
    partition = None if config.full_data else setup.partition

    data = []
    for index, expression in enumerate(config.fluxes, start=1):
        name = f"f{index}"
        data.append(
            synthesize_data(
                problem,
                u_star,
                evaluate_flux(expression, setup.mesh, name=name),
                config.noise,
                [config.seed, index],
                partition=partition,
                fine_mesh=fine,
                fine_flux=evaluate_flux(expression, fine, name=name),
            )
        )

    if out is not None:
        write_data_bundle(out, config, setup.mesh, setup.partition, data)
        truth = rasterize(config.shapes, setup.mesh, problem.type_names)
        for name, field in zip(problem.type_names, truth):
            write_field(
                os.path.join(out, TRUTH_FILE.format(name=name)),
                np.arange(setup.mesh.node_count),
                field.values,
                "u",
            )
    return setup, data


def reconstruct(config, data_dir, out=None, vtk=False, **kwargs):
    """
    Run the reconstruction on a data bundle.

    :param kwargs: passed to :py:class:`Reconstruction` (probe options)
    :raises DataMismatchError: if the bundle belongs to another setup
    :return: the finished :py:class:`Reconstruction`
    """
    setup = Setup(config)
    data = read_data_bundle(data_dir, config, setup.mesh, setup.partition)
    reconstruction = Reconstruction(
        config, data, mesh=setup.mesh, partition=setup.partition, **kwargs
    )
    try:
        reconstruction.run()
    except Exception:
        log.error(
            "Reconstruction aborted after %s iterations",
            reconstruction.iterations_done,
        )
        raise
    if out is not None:
        write_reconstruction(out, reconstruction, vtk=vtk)
    return reconstruction
