"""Exception hierarchy shared by all modules.

The CLI prints ``error=<ClassName> ...`` for any :class:`VideoPoseError`, so
class names are part of the command-line contract.
"""


class VideoPoseError(Exception):
    """Base class for every error raised by this package."""


class DegeneratePoint(VideoPoseError):
    pass


class InvalidDepth(VideoPoseError):
    pass


class EmptyDepth(VideoPoseError):
    pass


class NoKeyframes(VideoPoseError):
    pass


class EmptyGraph(VideoPoseError):
    pass


class SingularDepthBlock(VideoPoseError):
    pass


class NotPositiveDefinite(VideoPoseError):
    pass


class DivergedEnergy(VideoPoseError):
    pass


class NoMotionData(VideoPoseError):
    pass


class MissingResolution(VideoPoseError):
    pass


class ProviderFailure(VideoPoseError):
    def __init__(self, message: str, frame: int | None = None):
        super().__init__(message if frame is None else f"frame {frame}: {message}")
        self.frame = frame


class DegenerateFit(VideoPoseError):
    pass


class DegenerateTrajectory(VideoPoseError):
    pass


class ZeroBaseline(VideoPoseError):
    pass


class NoValidPairs(VideoPoseError):
    pass


class NormalizationDegenerate(VideoPoseError):
    pass


class ConfigError(VideoPoseError):
    pass


class FormatError(VideoPoseError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, message: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.path = path
        self.line = line


class MissingInputs(VideoPoseError):
    """Required input files are absent; ``paths`` lists all of them."""

    def __init__(self, paths):
        self.paths = [str(p) for p in paths]
        shown = ", ".join(self.paths[:5])
        more = f" and {len(self.paths) - 5} more" if len(self.paths) > 5 else ""
        super().__init__(f"{len(self.paths)} missing: {shown}{more}")
