"""Module for managing the hierarchical run log."""

import logging
from collections.abc import Generator
from contextlib import contextmanager

from latentpolicy import _config as cfg
from latentpolicy import _internal as utils

step_logger = logging.getLogger("Step")


@contextmanager
def run_log() -> Generator[list[dict], None, None]:
    """Opens a fresh run log for the duration of the `with` block.

    `step`, `check` and `attach` calls made inside the block append to the
    yielded list, which is later embedded in persisted reports.

    ---
    ### Example usage:

    ```python
    with run_log() as log:
        with step("Evaluate"):
            check(rate > 0.5, "Success rate above 50%")
    has_failures_in_log(log)
    ```
    """
    log: list[dict] = []
    log_token = cfg.CURRENT_EXECUTION_LOG.set(log)
    stack_token = cfg.CURRENT_LOG_CONTAINER_STACK.set([log])
    try:
        yield log
    finally:
        cfg.CURRENT_LOG_CONTAINER_STACK.reset(stack_token)
        cfg.CURRENT_EXECUTION_LOG.reset(log_token)


@contextmanager
def step(message: str) -> Generator[None, None, None]:
    """Creates a hierarchical step in the run log.

    All entries recorded inside the `with` block become children of this
    step. When the block ends, the step is marked failed if any nested
    check failed. Outside an active `run_log` the step only logs its message.

    Args:
        message (str): Description of the step shown in logs and reports.

    Yields:
        None: Control is passed inside the `with` block.

    ---
    ### Example usage:

    ```python
    with step("Fine-tune"):
        with step("Train ATA"):
            ...
        with step("Train LPG"):
            ...
    ```
    """
    step_logger.info(f"{message}")
    stack = cfg.CURRENT_LOG_CONTAINER_STACK.get()
    if not stack:
        yield
        return

    step_node = {
        "type": "step",
        "message": message,
        "passed": True,
        "children": [],
    }
    utils.add_log_entry(step_node)
    stack.append(step_node["children"])
    try:
        yield
    finally:
        stack.pop()
        step_node["passed"] = not utils.has_failures_in_log(step_node.get("children", []))
