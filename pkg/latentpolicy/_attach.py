"""Module for attaching artifacts (tables, arrays, text) to the run log."""

import json

import numpy as np

from latentpolicy import _config as cfg
from latentpolicy import _internal as utils


def _to_jsonable(data: cfg.AnyType) -> cfg.AnyType:
    if isinstance(data, np.ndarray):
        return data.tolist()
    if isinstance(data, np.generic):
        return data.item()
    if isinstance(data, dict):
        return {str(k): _to_jsonable(v) for k, v in data.items()}
    if isinstance(data, list | tuple):
        return [_to_jsonable(v) for v in data]
    return data


def attach(data: cfg.AnyType, label: str) -> None:
    """Attaches data to the current run log entry.

    - `dict`, `list`, `tuple` and numpy arrays are stored as formatted JSON.
    - Other values are stored as text.

    Overly large payloads are truncated to `ATTACH_LIMIT_BYTES` and the label
    gets a "(truncated)" note. Does nothing outside an active run log.

    Args:
        data (Any): The data to attach.
        label (str): Name of the attachment shown in the report.

    ---
    ### Example usage:

    ```python
    with step("Benchmark inference"):
        attach(table.rows, "Timing table")
        attach(config_text, "Resolved config")
    ```
    """
    if cfg.CURRENT_LOG_CONTAINER_STACK.get() is None:
        return

    content_type = "text"
    extra_note = ""

    try:
        if isinstance(data, dict | list | tuple | np.ndarray):
            content_type = "json"
            try:
                text = json.dumps(_to_jsonable(data), indent=2, ensure_ascii=False)
            except TypeError:
                text = repr(data)
                content_type = "text"
        elif isinstance(data, str):
            text = data
        else:
            text = repr(data)
        formatted_data, truncated = utils.maybe_truncate_text(text)
        if truncated:
            extra_note = " (truncated)"
    except Exception as e:
        content_type = "text"
        formatted_data = f"ERROR while attaching data: {e}"

    utils.add_log_entry(
        {
            "type": "attachment",
            "label": f"{label}{extra_note}",
            "data": formatted_data,
            "content_type": content_type,
        },
    )
