"""Constants used for the reconstruction workflow."""
import math

from django.utils.translation import gettext_lazy as _


EIT = "EIT"
DOT = "DOT"
CE = "CE"
MODULUS = "MODULUS"
MODEL_CHOICES = (
    (EIT, _("Electrical impedance tomography")),
    (DOT, _("Diffuse optical tomography")),
    (CE, _("Cardiac electrophysiology")),
    (MODULUS, _("Modulus nonlinearity")),
)
MODELS = tuple(tag for tag, _name in MODEL_CHOICES)

# Inclusion kinds decide how an inclusion enters the weak form
CONDUCTIVITY = "conductivity"
POTENTIAL = "potential"
MIXED = "mixed"
INCLUSION_KINDS = (CONDUCTIVITY, POTENTIAL, MIXED)

# Correction schemes of the resolver
DFP = "dfp"
BFG = "bfg"
SCHEMES = (DFP, BFG)

# Boundary parts
DIRICHLET = "D"
NEUMANN = "N"
FULL = "full"
BOUNDARY_PARTS = (DIRICHLET, NEUMANN, FULL)

# Inclusion shapes
DISK = "disk"
ELLIPSE = "ellipse"
POLYGON = "polygon"
SHAPES = (DISK, ELLIPSE, POLYGON)

# Initial scaling of the diagonal resolver part
SCALING_UNIT = "unit"
SCALING_NORMALIZE = "normalize"
SCALINGS = (SCALING_UNIT, SCALING_NORMALIZE)

# Area of the unit disk
DISK_AREA = math.pi

# Ischemic conductivity of the cardiac model
ISCHEMIC_CONDUCTIVITY = 1e-4

# Solve-count stages
STAGE_INITIALIZATION = "initialization"
STAGE_FORWARD = "forward"
STAGE_ADJOINT = "adjoint"
STAGE_AUXILIARY_ADJOINT = "auxiliary-adjoint"
STAGE_BACKGROUND = "background"

# Files inside data and reconstruction bundles
MANIFEST_FILE = "manifest.json"
MESH_FILE = "mesh.txt"
PARTITION_FILE = "partition.csv"
DATA_FILE = "data_{index}.csv"
TRACE_FILE = "trace.csv"
SUMMARY_FILE = "summary.json"
FIELD_FILE = "u_{name}_{k}.csv"
VTK_FILE = "u_{k}.vtk"
TRUTH_FILE = "truth_{name}.csv"
