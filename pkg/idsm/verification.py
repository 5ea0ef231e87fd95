"""Re-check the invariants of a finished reconstruction from its bundle."""
import logging
import os

import numpy as np

from .constants import FIELD_FILE
from .constants import SUMMARY_FILE
from .constants import TRACE_FILE
from .exceptions import DataMismatchError
from .exceptions import VerificationError
from .export import read_csv
from .export import read_field
from .export import read_json
from .export import TRACE_COLUMNS
from .iteration import expected_solves


log = logging.getLogger(__name__)  # noqa

# Slack for values that went through a text round trip
TOLERANCE = 1e-12

SOLVE_COUNT_AUDIT = "solve-count audit"
LAMBDA_NONNEGATIVITY = "lambda nonnegativity"
DAMPING_CALIBRATION = "damping calibration"
BOX_CONSTRAINT = "box constraint"
PROBE_BOUND = "probe bound"


def _load_summary(path):
    try:
        return read_json(os.path.join(path, SUMMARY_FILE))
    except DataMismatchError as error:
        raise VerificationError("bundle", str(error))


def check_solve_counts(path, summary):
    iterations = summary["iterations"]
    expected = expected_solves(iterations, summary["linear_background"])
    if summary["expected_solve_count"] != expected:
        raise VerificationError(
            SOLVE_COUNT_AUDIT,
            f"expected count {summary['expected_solve_count']} should be {expected}",
        )
    if summary["solve_count"] != expected:
        raise VerificationError(
            SOLVE_COUNT_AUDIT,
            f"{summary['solve_count']} solves for {iterations} iterations, "
            f"expected {expected}",
        )
    if sum(summary["solve_stages"].values()) != summary["solve_count"]:
        raise VerificationError(SOLVE_COUNT_AUDIT, "stage counts do not add up")

    counts = summary["solve_counts"]
    if len(counts) != iterations + 1 or counts[-1] != summary["solve_count"]:
        raise VerificationError(
            SOLVE_COUNT_AUDIT, "per-iteration counts are incomplete"
        )
    if any(later <= earlier for earlier, later in zip(counts, counts[1:])):
        raise VerificationError(SOLVE_COUNT_AUDIT, "counts are not strictly increasing")

    try:
        rows = read_csv(os.path.join(path, TRACE_FILE), _trace_header(summary))
    except DataMismatchError as error:
        raise VerificationError(SOLVE_COUNT_AUDIT, str(error))
    column = TRACE_COLUMNS.index("solve_count")
    if [int(row[column]) for row in rows] != counts:
        raise VerificationError(SOLVE_COUNT_AUDIT, "trace and summary counts differ")


def check_lambda(path, summary):
    for k, value in enumerate(summary["lambda"]):
        if value is not None and not value >= 0.0:
            raise VerificationError(LAMBDA_NONNEGATIVITY, f"lambda={value} at k={k}")


def check_calibration(path, summary):
    """The first correction with a damping parameter is calibrated to one."""
    if not summary["damping"]:
        return
    skipped = set(summary["skipped"])
    for k, value in enumerate(summary["lambda"], start=1):
        if value is None or k in skipped:
            continue
        if value not in (0.0, 1.0):
            raise VerificationError(
                DAMPING_CALIBRATION, f"first lambda is {value} in iteration {k}, not 1"
            )
        return


def check_boxes(path, summary):
    for name, (lower, upper) in summary["boxes"].items():
        scales = summary["field_scales"][name]
        if len(scales) != summary["iterations"] + 1:
            raise VerificationError(BOX_CONSTRAINT, f"missing scales for {name}")
        for k, scale in enumerate(scales):
            filename = FIELD_FILE.format(name=name, k=k)
            try:
                _nodes, values = read_field(os.path.join(path, filename), "u_norm")
            except DataMismatchError as error:
                raise VerificationError(BOX_CONSTRAINT, str(error))
            if len(values) == 0:
                continue
            if np.abs(values).max() > 1.0 + TOLERANCE:
                raise VerificationError(
                    BOX_CONSTRAINT, f"{filename} exceeds its normalization"
                )
            slack = TOLERANCE * max(abs(lower), abs(upper), 1.0)
            u = values * scale
            if u.min() < lower - slack or u.max() > upper + slack:
                raise VerificationError(
                    BOX_CONSTRAINT,
                    f"{filename} leaves [{lower}, {upper}]: "
                    f"range [{u.min()}, {u.max()}]",
                )


def check_probe_bound(path, summary):
    for entry in summary["probe_log"]:
        if not entry["ratio"] <= 1.0 + TOLERANCE:
            raise VerificationError(
                PROBE_BOUND, f"ratio {entry['ratio']} at k={entry['k']}"
            )


CHECKS = (
    (SOLVE_COUNT_AUDIT, check_solve_counts),
    (LAMBDA_NONNEGATIVITY, check_lambda),
    (DAMPING_CALIBRATION, check_calibration),
    (BOX_CONSTRAINT, check_boxes),
    (PROBE_BOUND, check_probe_bound),
)


def verify_bundle(path):
    """
    Run every check against a reconstruction bundle.

    The probe bound only holds for the damped scheme and is skipped otherwise.

    :return: ``(invariant, status)`` pairs with status ``passed`` or ``skipped``
    :raises VerificationError: naming the first failing invariant
    """
    summary = _load_summary(path)
    results = []
    for invariant, check in CHECKS:
        if invariant == PROBE_BOUND and not summary["damping"]:
            results.append((invariant, "skipped"))
            continue
        try:
            check(path, summary)
        except (KeyError, TypeError, ValueError) as error:
            raise VerificationError(invariant, f"malformed bundle ({error!r})")
        log.debug("Passed %s", invariant)
        results.append((invariant, "passed"))
    return results


def _trace_header(summary):
    return TRACE_COLUMNS + tuple(f"C_D_{name}" for name in summary["types"])
