"""Module with internal utility functions."""

from __future__ import annotations

import datetime
import hashlib
import logging
from collections.abc import Iterable
from pathlib import Path

import numpy as np
import torch
from dotenv import load_dotenv

from latentpolicy import _config as cfg

_THIRD_PARTY_LOGGERS = ("matplotlib", "PIL", "diffusers", "urllib3", "filelock")


def load_env_file(env_file_path: Path, *, override: bool = False) -> None:
    if env_file_path.is_file():
        load_dotenv(dotenv_path=env_file_path, override=override)


def load_asset(filename: str) -> str:
    asset_path = Path(__file__).parent / "_assets" / filename
    return asset_path.read_text(encoding="utf-8")


def configure_logging(level: str = "INFO", log_file: Path | None = None) -> None:
    handlers: list[logging.Handler] = [logging.StreamHandler()]
    if log_file is not None:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    logging.basicConfig(
        level=level.upper(),
        format="%(asctime)s %(levelname)-7s %(name)s: %(message)s",
        handlers=handlers,
        force=True,
    )
    for name in _THIRD_PARTY_LOGGERS:
        logging.getLogger(name).setLevel(logging.WARNING)


def _seed_words(seed: int, stream_label: str) -> list[int]:
    digest = hashlib.sha256(f"{seed}/{stream_label}".encode()).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, len(digest), 4)]


def seeded_rng(seed: int, stream_label: str) -> np.random.Generator:
    """Returns the numpy random stream named by `(seed, stream_label)`.

    The stream depends only on its two arguments, so it is identical across
    processes and independent of any other label.

    ---
    ### Example usage:

    ```python
    rng = seeded_rng(7, "eval")
    trial_seeds = rng.integers(0, 2**31, size=50)
    ```
    """
    return np.random.default_rng(np.random.SeedSequence(_seed_words(seed, stream_label)))


def seeded_torch_rng(seed: int, stream_label: str, device: str | torch.device = "cpu") -> torch.Generator:
    """Returns the torch counterpart of `seeded_rng` for sampling tensors."""
    state = np.random.SeedSequence(_seed_words(seed, stream_label)).generate_state(2, dtype=np.uint32)
    generator = torch.Generator(device=device)
    generator.manual_seed(int(state[0]) << 32 | int(state[1]))
    return generator


def param_checksum(tensors: Iterable[torch.Tensor]) -> str:
    """SHA-256 over the raw bytes of `tensors`, used to prove weights stayed frozen."""
    digest = hashlib.sha256()
    for tensor in tensors:
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def module_checksum(module: torch.nn.Module) -> str:
    return param_checksum(tensor for _, tensor in sorted(module.state_dict().items()))


def freeze(module: torch.nn.Module) -> torch.nn.Module:
    module.requires_grad_(False)
    module.eval()
    return module


def add_log_entry(entry: dict) -> None:
    stack = cfg.CURRENT_LOG_CONTAINER_STACK.get()
    if stack:
        current_container = stack[-1]
        current_container.append(entry)


def maybe_truncate_text(s: str) -> tuple[str, bool]:
    if cfg.ATTACH_LIMIT_BYTES is None:
        return s, False
    b = s.encode("utf-8", errors="replace")
    if len(b) <= cfg.ATTACH_LIMIT_BYTES:
        return s, False
    truncated = b[: cfg.ATTACH_LIMIT_BYTES].decode("utf-8", errors="ignore")
    return truncated + "\n\n[TRUNCATED]", True


def has_failures_in_log(log_list: list) -> bool:
    for entry in log_list:
        if entry.get("type") == "check" and not entry.get("passed", False):
            return True
        if entry.get("type") == "step" and has_failures_in_log(entry.get("children", [])):
            return True
    return False


def generate_terminal_summary(log_list: list) -> list[str]:
    error_lines: list[str] = []

    def find_failures_recursive(log_entries: list) -> None:
        for entry in log_entries:
            if entry.get("type") == "check" and not entry.get("passed", False):
                label = entry.get("label", "")
                details = entry.get("details")
                if details:
                    error_lines.append(f"\t✖︎ {label} [{details}]")
                else:
                    error_lines.append(f"\t✖︎ {label}")
            elif entry.get("type") == "step":
                find_failures_recursive(entry.get("children", []))

    find_failures_recursive(log_list)
    return error_lines


def fmt_datetime(dt: datetime.datetime) -> str:
    return dt.isoformat(sep=" ", timespec="seconds")


def fmt_seconds(s: float) -> str:
    return f"{float(s or 0.0):.2f}".rstrip("0").rstrip(".")


def resolve_device(name: str) -> torch.device:
    if name == "cuda" and not torch.cuda.is_available():
        logging.getLogger("Config").warning("CUDA requested but unavailable, falling back to CPU")
        return torch.device("cpu")
    return torch.device(name)


def set_deterministic(enabled: bool) -> None:
    torch.use_deterministic_algorithms(enabled, warn_only=True)


def standard_normal(
    shape: tuple[int, ...] | torch.Size,
    like: torch.Tensor,
    rng: torch.Generator | None = None,
) -> torch.Tensor:
    """Standard normal draws shaped `shape`, on `like`'s device and dtype, taken from `rng`."""
    device = rng.device if rng is not None else like.device
    return torch.randn(tuple(shape), generator=rng, device=device, dtype=like.dtype).to(like.device)


def uniform_timesteps(
    batch: int,
    T: int,  # noqa: N803
    like: torch.Tensor,
    rng: torch.Generator | None = None,
) -> torch.Tensor:
    device = rng.device if rng is not None else like.device
    return torch.randint(1, T + 1, (batch,), generator=rng, device=device).to(like.device)
