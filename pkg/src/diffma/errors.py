class DiffMaError(Exception):
    """Base class for errors raised by this package."""

    exit_code = 1


class ConfigError(DiffMaError, ValueError):
    exit_code = 3


class DependencyError(DiffMaError):
    """A required artifact (checkpoint, dataset) is missing."""

    exit_code = 2

    def __init__(self, artifact: str, hint: str = ""):
        self.artifact = artifact
        msg = f"missing required artifact: {artifact}"
        super().__init__(f"{msg} ({hint})" if hint else msg)


class FingerprintError(DiffMaError):
    """A checkpoint was produced for an incompatible configuration."""

    exit_code = 4


class NonFiniteError(DiffMaError, FloatingPointError):
    """Activations stopped being finite inside the block stack."""

    exit_code = 5

    def __init__(self, block_index: int, where: str = "block output"):
        self.block_index = block_index
        super().__init__(f"non-finite activations in {where} of block {block_index}")


class RunLockedError(DiffMaError):
    """Another process is writing to the same run directory."""

    exit_code = 6
