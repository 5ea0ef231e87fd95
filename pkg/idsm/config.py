"""
Run configuration files.

A configuration is an INI document::

    [problem]
    model = EIT

    [mesh]
    fine = 15728
    coarse = 1770

    [boundary]
    arcs = -pi/2, pi/2

    [fluxes]
    f1 = sin
    f2 = cos(4*pi*x2) + 0.5

    [hrdtn]
    alpha_d = 0.05
    alpha_n = 2.0

    [resolver]
    scheme = bfg
    p = 2

    [run]
    iterations = 30
    noise = 0.15
    seed = 0

    [truth]
    upper = kind=disk; center=0.4, 0.3; radii=0.2; conductivity=-0.9

Several arcs are separated by ``;``. Fluxes may name a built-in flux.
"""
import configparser
import logging
import math
import os

from django.core.exceptions import ValidationError

from .constants import SCALING_NORMALIZE
from .constants import SCALINGS
from .constants import SCHEMES
from .constants import SHAPES
from .dtn import HrDtnParams
from .expressions import parse_flux
from .iteration import RunConfig
from .models import FLUXES
from .models import InclusionShape
from .models import make_problem


log = logging.getLogger(__name__)  # noqa

PRESET_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "presets")

# Known keys per section; None accepts any key
SCHEMA = {
    "problem": {"model", "gamma"},
    "mesh": {"fine", "coarse"},
    "boundary": {"arcs", "full_data"},
    "fluxes": None,
    "hrdtn": {"alpha", "alpha_d", "alpha_n"},
    "resolver": {"scheme", "p", "initial_scaling", "damping", "eps_band"},
    "run": {"iterations", "noise", "seed"},
    "truth": None,
}
REQUIRED = {
    "problem": ("model",),
    "mesh": ("fine", "coarse"),
    "boundary": ("arcs",),
    "fluxes": (),
    "hrdtn": (),
    "run": ("iterations", "noise", "seed"),
}


def list_presets():
    """Names of the shipped configurations."""
    return sorted(
        name[: -len(".ini")] for name in os.listdir(PRESET_DIR) if name.endswith(".ini")
    )


def resolve_config(name_or_path):
    """A preset name or a path to an existing configuration file."""
    if os.path.isfile(name_or_path):
        return name_or_path
    preset = os.path.join(PRESET_DIR, f"{name_or_path}.ini")
    if os.path.isfile(preset):
        return preset
    raise ValidationError(
        "No configuration file or preset named %(name)s",
        params={"name": name_or_path},
        code="config-missing",
    )


class ConfigFile:

    """A parsed configuration that remembers where every key came from."""

    def __init__(self, text, path="<config>"):
        self.path = path
        self.lines = text.splitlines()
        self.parser = configparser.ConfigParser(
            interpolation=None, inline_comment_prefixes=("#",)
        )
        # Keep key case for flux and truth names
        self.parser.optionxform = str
        try:
            self.parser.read_string(text, source=path)
        except configparser.MissingSectionHeaderError as error:
            # A subclass of ParsingError without the error list
            self._fail("missing section header", error.lineno)
        except configparser.ParsingError as error:
            lineno, line = error.errors[0]
            self._fail(f"cannot parse {line!r}", lineno)
        except (
            configparser.DuplicateSectionError,
            configparser.DuplicateOptionError,
        ) as error:
            self._fail(error.message, error.lineno)
        self._check_schema()

    def __repr__(self):
        return f"<ConfigFile {self.path}>"

    @classmethod
    def load(cls, name_or_path):
        path = resolve_config(name_or_path)
        with open(path) as fd:
            return cls(fd.read(), path=path)

    def _fail(self, message, lineno=None):
        where = f"{self.path}:{lineno}" if lineno else self.path
        raise ValidationError(
            "%(where)s: %(message)s",
            params={"where": where, "message": message},
            code="config",
        )

    def line_of(self, section, key=None):
        """1-based line of a section header or of a key inside it."""
        current = None
        for number, raw in enumerate(self.lines, start=1):
            line = raw.strip()
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1].strip()
                if key is None and current == section:
                    return number
            elif current == section and key is not None:
                name = line.split("=", 1)[0].split(":", 1)[0].strip()
                if name == key:
                    return number
        return None

    def _check_schema(self):
        for section in self.parser.sections():
            if section not in SCHEMA:
                self._fail(f"unknown section [{section}]", self.line_of(section))
            known = SCHEMA[section]
            if known is None:
                continue
            for key in self.parser[section]:
                if key not in known:
                    self._fail(
                        f"unknown key {key!r} in [{section}]",
                        self.line_of(section, key),
                    )
        for section, keys in REQUIRED.items():
            if not self.parser.has_section(section):
                self._fail(f"missing section [{section}]")
            for key in keys:
                if key not in self.parser[section]:
                    self._fail(
                        f"missing key {key!r} in [{section}]", self.line_of(section)
                    )
        if not list(self.parser["fluxes"]):
            self._fail("at least one flux is required", self.line_of("fluxes"))

    def _value(self, section, key, convert, default=None):
        if not self.parser.has_section(section) or key not in self.parser[section]:
            return default
        raw = self.parser[section][key]
        try:
            return convert(raw)
        except (ValueError, TypeError, ValidationError) as error:
            if isinstance(error, ValidationError):
                error = "; ".join(error.messages)
            self._fail(
                f"invalid value {raw!r} for {key!r}: {error}",
                self.line_of(section, key),
            )

    def to_run_config(self, **overrides):
        """
        Validate everything into a :py:class:`RunConfig`.

        :param overrides: ``scheme``, ``seed`` or ``max_iterations`` given on
            the command line
        """
        model = self._value("problem", "model", str.strip).upper()
        gammas = self._value("problem", "gamma", _floats)
        problem = self._value(
            "problem", "model", lambda raw: make_problem(model, gammas)
        )

        alpha = self._value("hrdtn", "alpha", float)
        if alpha is not None:
            params = self._value(
                "hrdtn", "alpha", lambda raw: HrDtnParams.uniform(alpha)
            )
        else:
            params = HrDtnParams(
                self._value("hrdtn", "alpha_d", float, 0.05),
                self._value("hrdtn", "alpha_n", float, 2.0),
            )

        truth = self.parser["truth"] if self.parser.has_section("truth") else ()
        shapes = tuple(
            self._value("truth", key, lambda raw: _shape(raw, problem.type_names))
            for key in truth
        )

        values = {
            "problem": problem,
            "fine_target": self._value("mesh", "fine", _positive_int),
            "coarse_target": self._value("mesh", "coarse", _positive_int),
            "arcs": self._value("boundary", "arcs", _arcs),
            "fluxes": tuple(
                self._value("fluxes", key, _flux) for key in self.parser["fluxes"]
            ),
            "params": params,
            "p_index": self._value("resolver", "p", _index, 2.0),
            "scheme": self._value("resolver", "scheme", _choice(SCHEMES), "bfg"),
            "max_iterations": self._value("run", "iterations", _positive_int),
            "noise": self._value("run", "noise", _nonnegative),
            "seed": self._value("run", "seed", int),
            "shapes": shapes,
            "full_data": self._value("boundary", "full_data", _boolean, False),
            "damping": self._value("resolver", "damping", _boolean, True),
            "initial_scaling": self._value(
                "resolver", "initial_scaling", _choice(SCALINGS), SCALING_NORMALIZE
            ),
            "eps_band": self._value("resolver", "eps_band", float),
        }
        values.update(
            {key: value for key, value in overrides.items() if value is not None}
        )
        try:
            return RunConfig(**values)
        except ValidationError as error:
            self._fail("; ".join(error.messages))


def load_run_config(name_or_path, **overrides):
    return ConfigFile.load(name_or_path).to_run_config(**overrides)


def _floats(raw):
    return tuple(float(item) for item in raw.split(",") if item.strip())


def _positive_int(raw):
    value = int(raw)
    if value < 1:
        raise ValueError("must be positive")
    return value


def _nonnegative(raw):
    value = float(raw)
    if value < 0:
        raise ValueError("must be nonnegative")
    return value


def _index(raw):
    value = math.inf if raw.strip().lower() in ("inf", "infinity") else float(raw)
    if not value >= 1.0:
        raise ValueError("must be at least 1")
    return value


def _boolean(raw):
    states = configparser.ConfigParser.BOOLEAN_STATES
    if raw.strip().lower() not in states:
        raise ValueError("not a boolean")
    return states[raw.strip().lower()]


def _choice(choices):
    def convert(raw):
        value = raw.strip().lower()
        if value not in choices:
            raise ValueError(f"expected one of {', '.join(choices)}")
        return value

    return convert


def _constant(raw):
    expr = parse_flux(raw)
    if expr.free_symbols:
        raise ValueError("must be a constant")
    return float(expr)


def _arcs(raw):
    """``start, end`` pairs separated by ``;``; an empty value means no access."""
    arcs = []
    for piece in raw.split(";"):
        if not piece.strip():
            continue
        bounds = piece.split(",")
        if len(bounds) != 2:
            raise ValueError("an arc needs a start and an end")
        arcs.append((_constant(bounds[0]), _constant(bounds[1])))
    return tuple(arcs)


def _flux(raw):
    text = raw.strip()
    parse_flux(FLUXES.get(text, text))
    return text


def _shape(raw, names):
    """``kind=disk; center=x, y; radii=r; <type>=amplitude`` and so on."""
    items = {}
    for piece in raw.split(";"):
        if not piece.strip():
            continue
        if "=" not in piece:
            raise ValueError(f"expected key=value, got {piece.strip()!r}")
        key, value = piece.split("=", 1)
        items[key.strip()] = value.strip()

    kind = items.pop("kind", "")
    if kind not in SHAPES:
        raise ValueError(f"kind must be one of {', '.join(SHAPES)}")
    center = _floats(items.pop("center", "0, 0"))
    radii = _floats(items.pop("radii", ""))
    angle = _constant(items.pop("angle", "0"))
    vertices = ()
    if "vertices" in items:
        flat = _floats(items.pop("vertices"))
        vertices = tuple(zip(flat[0::2], flat[1::2]))
    amplitudes = []
    for key, value in items.items():
        if key not in names:
            raise ValueError(f"unknown key or inclusion type {key!r}")
        amplitudes.append((key, float(value)))
    return InclusionShape(
        kind=kind,
        amplitudes=tuple(amplitudes),
        center=center,
        radii=radii,
        angle=angle,
        vertices=vertices,
    )
