"""Module with the exceptions raised by latentpolicy."""


class LatentPolicyError(Exception):
    """Base class for every error raised by latentpolicy itself."""


class ConfigError(LatentPolicyError, ValueError):
    """A run configuration key is unknown or holds a value outside its domain."""

    def __init__(self, key: str, message: str) -> None:
        self.key = key
        super().__init__(f"{key}: {message}")


class CheckpointError(LatentPolicyError, RuntimeError):
    """A checkpoint is corrupt, unreadable or incompatible with another one."""


class FrozenWeightsError(LatentPolicyError, RuntimeError):
    """Weights that must stay frozen were made trainable or changed."""


class DivergenceError(LatentPolicyError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, phase: str, epoch: int, step: int, components: dict[str, float]) -> None:
        self.phase, self.epoch, self.step, self.components = phase, epoch, step, components
        details = ", ".join(f"{k}={v:.6g}" for k, v in components.items())
        super().__init__(f"{phase} loss diverged at epoch {epoch}, step {step} ({details})")


class DemoFailure(LatentPolicyError, RuntimeError):
    """The scripted demonstrator could not solve an episode after all retries."""
