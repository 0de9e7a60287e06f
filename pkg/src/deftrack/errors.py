"""Exception hierarchy shared by all deftrack modules."""


class DeftrackError(Exception):
    """Base class for every error raised by deftrack."""


class DimensionError(DeftrackError, ValueError):
    """Image or pyramid dimensions cannot satisfy the request."""


class BoundsError(DeftrackError, IndexError):
    """A sample point or patch window falls outside the image."""


class ShapeError(DeftrackError, ValueError):
    """Array shapes of two operands do not agree."""


class DegenerateGeometryError(DeftrackError, ValueError):
    """Geometry is singular: zero-area faces, planes through a camera center, etc."""


class DegenerateHomographyError(DegenerateGeometryError):
    pass


class CheiralityError(DeftrackError, ValueError):
    """A point lies behind (or on) the camera plane."""


class LogDomainError(DeftrackError, ValueError):
    """The SE(3) logarithm is undefined or ill-conditioned for this rotation."""


class InsufficientDataError(DeftrackError, ValueError):
    """Too few samples, matches or frames for the requested computation."""


class TemplateCreationError(DeftrackError, ValueError):
    pass


class RayMissError(DeftrackError, ValueError):
    """A viewing ray does not intersect the mesh."""


class TrainingError(DeftrackError, ValueError):
    pass


class VocabularyFormatError(DeftrackError, ValueError):
    pass


class SequenceError(DeftrackError):
    """A sequence directory is missing, empty or malformed."""


class FrameError(DeftrackError):
    """A single frame could not be read."""

    def __init__(self, frame_id, message):
        super().__init__(f"frame {frame_id}: {message}")
        self.frame_id = frame_id


class GenerationError(DeftrackError):
    """The synthetic generator cannot render the requested configuration."""


class ConfigError(DeftrackError, ValueError):
    pass
