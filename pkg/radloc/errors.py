"""
Exception types raised by radloc.
"""


class RadlocError(Exception):
    """
    Base class for all radloc errors.
    """


class PreconditionError(RadlocError, ValueError):
    """
    An operation was called with arguments outside its domain.
    """


class ConfigError(RadlocError, ValueError):
    """
    A configuration or spec file could not be parsed or validated.
    """

    def __init__(self, message: str, source: str = "", line: int = 0) -> None:
        """
        :param message: What went wrong.
        :param source: The file (or other source) being parsed.
        :param line: 1-based line number, 0 when unknown.
        :return: None
        """
        location = source
        if line:
            location = f"{source}:{line}" if source else f"line {line}"
        super().__init__(f"{location}: {message}" if location else message)
        self.source = source
        self.line = line


class GridFormatError(RadlocError, ValueError):
    """
    A grid file is malformed: wrong magic, unsupported version or inconsistent length.
    """


class DegenerateWeightsError(RadlocError, RuntimeError):
    """
    Particle weights carry no mass, so resampling is undefined.
    """


class DivergenceError(RadlocError, RuntimeError):
    """
    Field fitting produced a non-finite loss.
    """

    def __init__(self, iteration: int, loss: float) -> None:
        """
        :param iteration: The iteration at which the loss became non-finite.
        :param loss: The offending loss value.
        :return: None
        """
        super().__init__(f"fit diverged at iteration {iteration} (loss={loss})")
        self.iteration = iteration
        self.loss = loss
