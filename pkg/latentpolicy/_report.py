"""Module for persisting run reports as schema-validated JSON and self-contained HTML."""

from __future__ import annotations

import dataclasses
import datetime
import json
import logging
from pathlib import Path

import jinja2

from latentpolicy import _config as cfg
from latentpolicy import _internal as utils
from latentpolicy._evaluation import EvalReport
from latentpolicy._json_validation import validate_json

harness_logger = logging.getLogger("Harness")

REPORT_SCHEMA = "report.schema.json"
REPORT_FORMAT_VERSION = 1


@dataclasses.dataclass(frozen=True)
class Table:
    caption: str
    columns: tuple[str, ...]
    rows: list[tuple[cfg.AnyType, ...]]


@dataclasses.dataclass(frozen=True)
class ReportPaths:
    json: Path
    html: Path


def build_report(
    kind: str,
    title: str,
    payload: dict[str, cfg.AnyType],
    config: cfg.RunConfig,
    run_log: list[dict] | None = None,
) -> dict[str, cfg.AnyType]:
    """Wraps a payload with the config echo and the run log.

    Without an explicit `run_log` the currently active one is embedded. The
    report counts as passed when no check in the run log failed.
    """
    run_log = run_log if run_log is not None else (cfg.CURRENT_EXECUTION_LOG.get() or [])
    return {
        "format_version": REPORT_FORMAT_VERSION,
        "kind": kind,
        "title": title,
        "created": utils.fmt_datetime(datetime.datetime.now()),
        "config": cfg.config_items(config),
        "config_hash": cfg.config_hash(config),
        "payload": payload,
        "run_log": run_log,
        "passed": not utils.has_failures_in_log(run_log),
    }


def _evaluation_table(caption: str, report: dict[str, cfg.AnyType]) -> Table:
    rates, spread = report["success_rates"], report.get("success_std", {})
    rows = [(task_id, rates[task_id], spread.get(task_id, 0.0)) for task_id in rates]
    rows.append(("mean", report["mean_success"], None))
    return Table(caption, ("task", "success", "std"), rows)


def report_tables(report: dict[str, cfg.AnyType]) -> list[Table]:
    """Tabulates a report payload for display."""
    kind, payload = report["kind"], report["payload"]
    if kind == "evaluation":
        return [_evaluation_table(payload["policy"], payload)]
    if kind == "ablation":
        reports = payload["reports"]
        tasks = sorted({task_id for r in reports.values() for task_id in r["success_rates"]})
        rows = [
            (variant, *(r["success_rates"].get(t) for t in tasks), r["mean_success"]) for variant, r in reports.items()
        ]
        return [Table("Ablation variants", ("variant", *tasks, "mean"), rows)]
    if kind == "horizon_sweep":
        rows = [
            (entry["h"], entry["report"]["mean_success"], entry["silhouette"], entry["p_value"])
            for entry in payload["horizons"]
        ]
        return [Table("Horizon sweep", ("h", "mean success", "silhouette", "p-value"), rows)]
    if kind == "benchmark":
        rows = [
            (
                row["model"],
                row["sampler"],
                row["steps"],
                row["seconds_per_call"],
                row.get("success_rate"),
                row.get("speedup"),
            )
            for row in payload["rows"]
        ]
        return [Table("Inference time", ("model", "sampler", "steps", "s/call", "success", "speedup"), rows)]
    if kind == "pretrain_gain":
        rows = [(task_id, delta) for task_id, delta in payload["per_task"].items()]
        rows.append(("mean", payload["mean"]))
        return [Table("Pre-training gain", ("task", "delta"), rows)]
    return []


def _fmt_cell(value: cfg.AnyType) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4g}"
    return str(value)


def render_html(report: dict[str, cfg.AnyType]) -> str:
    env = jinja2.Environment(
        loader=jinja2.FileSystemLoader(Path(__file__).parent / "_assets"),
        autoescape=jinja2.select_autoescape(["html", "xml"]),
    )
    env.globals["fmt_cell"] = _fmt_cell
    template = env.get_template("report.html.jinja2")
    return template.render(**report, tables=report_tables(report))


def format_text_table(table: Table) -> str:
    """Renders a table as aligned plain text."""
    cells = [list(table.columns), *([_fmt_cell(value) for value in row] for row in table.rows)]
    widths = [max(len(row[i]) for row in cells) for i in range(len(table.columns))]
    lines = ["  ".join(cell.ljust(width) for cell, width in zip(row, widths, strict=True)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * width for width in widths))
    return "\n".join([table.caption, *lines])


def write_report(report: dict[str, cfg.AnyType], out_dir: str | Path, name: str) -> ReportPaths:
    """Validates `report` and writes `<name>.json` and `<name>.html` into `out_dir`.

    Raises:
        ValueError: If the report does not match the report schema.

    ---
    ### Example usage:

    ```python
    with run_log() as log:
        report = evaluate(policy, config)
    report_data = build_report("evaluation", "Fine-tuned policy", report.to_dict(), config, log)
    paths = write_report(report_data, run_dir, "eval")
    ```
    """
    validate_json(report, schema_name=REPORT_SCHEMA, message="Invalid report", strict=True)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = ReportPaths(json=out_dir / f"{name}.json", html=out_dir / f"{name}.html")
    paths.json.write_text(json.dumps(report, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    paths.html.write_text(render_html(report), encoding="utf-8")
    harness_logger.info(f"Report written to {paths.json.resolve().as_uri()}")
    return paths


def load_report(path: str | Path) -> dict[str, cfg.AnyType]:
    """Reads and validates a report written by `write_report`.

    Raises:
        FileNotFoundError: If `path` does not exist.
        ValueError: For invalid JSON or a schema violation.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Report not found: {path}")
    try:
        report = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValueError(f"Invalid JSON in report {path}: {e}") from e
    validate_json(report, schema_name=REPORT_SCHEMA, message=f"Invalid report {path}", strict=True)
    return report


def load_eval_report(path: str | Path) -> EvalReport:
    report = load_report(path)
    if report["kind"] != "evaluation":
        raise ValueError(f"{path} holds a {report['kind']} report, not an evaluation")
    return EvalReport.from_dict(report["payload"])
