"""JSON Schema validation for manifests and reports."""

import json
from functools import cache
from typing import Any

from jsonschema import ValidationError, validators
from referencing.jsonschema import EMPTY_REGISTRY

from latentpolicy import _internal as utils
from latentpolicy._check import check


@cache
def load_schema(name: str) -> dict[str, Any]:
    """Loads a JSON schema bundled in the package assets.

    Args:
        name: File name of the schema, e.g. `manifest.schema.json`.

    Returns:
        The schema as a dictionary.
    """
    return json.loads(utils.load_asset(name))


def _format_validation_errors(errors: list[ValidationError]) -> list[str]:
    return [f" - ({'/'.join(str(p) for p in error.absolute_path)}) {error.message}" for error in errors]


def json_errors(data: Any, schema: dict[str, Any]) -> list[str]:  # noqa: ANN401
    """Returns one formatted line per schema violation in `data` (empty when valid)."""
    validator_class = validators.validator_for(schema)
    validator = validator_class(schema, registry=EMPTY_REGISTRY)
    return _format_validation_errors(list(validator.iter_errors(data)))


def validate_json(
    data: Any,  # noqa: ANN401
    *,
    schema_name: str,
    message: str = "Validate JSON schema",
    strict: bool = False,
) -> bool:
    """Validates `data` against a bundled schema.

    In strict mode a violation raises and a valid document leaves the run log
    untouched; otherwise the outcome is recorded as a run-log check and returned.

    Raises:
        ValueError: In strict mode, listing every violation with its JSON path.

    Example:
        >>> validate_json(report.to_dict(), schema_name="report.schema.json", message="Report matches schema")
        True
    """
    errors = json_errors(data, load_schema(schema_name))
    if strict:
        if errors:
            raise ValueError(f"{message}:\n" + "\n".join(errors))
        return True
    return check(not errors, message, errors or None)
