from __future__ import annotations


class EspError(Exception):
    """Base class for every error raised by the prescription toolkit."""


class InvalidArchitectureError(EspError):
    pass


class ShapeError(EspError):
    pass


class NumericError(EspError):
    pass


class NonDifferentiableError(EspError):
    pass


class DivergedTrainingError(EspError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, message: str | None = None):
        self.epoch = epoch
        super().__init__(message or f"Training diverged (non-finite loss) at epoch {epoch}.")


class ConfigError(EspError):
    pass


class EpisodeDoneError(EspError):
    pass


class ArchiveError(EspError):
    pass
