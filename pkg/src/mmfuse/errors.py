"""Exception hierarchy shared across the package."""


class MMFuseError(Exception):
    """Base class for every error raised deliberately by mmfuse."""


class DimensionError(MMFuseError, ValueError):
    """Operand shapes do not agree."""


class ContractError(MMFuseError, RuntimeError):
    """A call violated an operation's precondition."""


class InputError(MMFuseError, ValueError):
    """Malformed user-supplied data (text, images, targets)."""


class ManifestError(InputError):
    """A manifest record could not be parsed."""

    def __init__(self, path, lineno, message):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{self.path}:{lineno}: {message}")


class ConfigError(MMFuseError, ValueError):
    pass


class TrainingError(MMFuseError, RuntimeError):
    pass


class CheckpointError(MMFuseError, ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass
