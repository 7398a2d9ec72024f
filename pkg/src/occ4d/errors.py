"""Exception types shared across occ4d."""


class Occ4dError(Exception):
    """Base class for every error raised on purpose by occ4d."""

    exit_code = 1


class ConfigError(Occ4dError, ValueError):
    """Invalid experiment configuration. The message names the offending field."""

    exit_code = 2


class DataError(Occ4dError, RuntimeError):
    """Missing or malformed data: clips, manifests, caches, checkpoints."""

    exit_code = 3


class ClipFormatError(DataError):
    """An OCCV file that cannot be decoded."""


class NumericalError(Occ4dError, ArithmeticError):
    """A non-finite latent, activation, loss or gradient."""

    exit_code = 4
