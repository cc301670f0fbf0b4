"""Module providing non-raising checks recorded in the run log."""

import logging
from collections.abc import Mapping
from numbers import Integral, Real

from latentpolicy import _config as cfg
from latentpolicy import _internal as utils

check_logger = logging.getLogger("Check")

Details = str | list[str] | Mapping[str, cfg.AnyType]


def _measurement(value: cfg.AnyType) -> str:
    if isinstance(value, Integral) or not isinstance(value, Real):
        return str(value)
    return f"{float(value):.4g}"


def normalize_details(details: Details | None) -> str | list[str] | None:
    """Turns a mapping of measured values into `name=value` lines; strings and lists pass through."""
    if isinstance(details, Mapping):
        return [f"{name}={_measurement(value)}" for name, value in details.items()]
    return details


def _outcome_line(passed: bool, label: str, details: str | list[str] | None) -> str:
    line = f"Check: {label} - {'PASSED' if passed else 'FAILED'}"
    if isinstance(details, list) and details:
        return line + "\nDetails:\n" + "\n".join(f"- {item}" for item in details)
    if details:
        return line + f"\nDetails: {details}"
    return line


def check(condition: bool, label: str, details: Details | None = None) -> bool:
    """Records the outcome of a check without interrupting the run.

    Failed checks mark their enclosing steps as failed and make the CLI exit
    with a nonzero status once the command finishes.

    Args:
        condition: The condition being checked. `True` means success.
        label: A short description of what is being checked.
        details: Extra information. A mapping of measured values is stored as
            `name=value` lines with floats at four significant digits.

    Returns:
        bool: `True` if the check passed, `False` otherwise.

    ---
    ### Example usage:

    ```python
    check(
        report.mean_success >= random_report.mean_success + 0.4,
        "Policy beats random baseline by 40 points",
        details={"policy": report.mean_success, "random": random_report.mean_success},
    )
    ```
    """
    passed = bool(condition)
    stored = normalize_details(details)
    (check_logger.info if passed else check_logger.warning)(_outcome_line(passed, label, stored))

    entry: dict[str, cfg.AnyType] = {"type": "check", "label": label, "passed": passed}
    if stored is not None:
        entry["details"] = stored
    utils.add_log_entry(entry)
    return passed
