"""Exception hierarchy shared by every module."""


class AnonError(Exception):
    """Base class for all package errors."""


# geometry
class BehindCamera(AnonError):
    pass


class InvalidDepth(AnonError):
    pass


class InsufficientViews(AnonError):
    pass


class DegenerateGeometry(AnonError):
    pass


class TooFewPoints(AnonError):
    pass


class DegenerateConfiguration(AnonError):
    pass


# pointcloud
class AttributeMismatch(AnonError):
    pass


# registration
class EmptyInput(AnonError):
    pass


class NoCorrespondences(AnonError):
    pass


class MissingNormals(AnonError):
    pass


# pose
class InsufficientHeadJoints(AnonError):
    pass


# facemesh
class TooFewLandmarks(AnonError):
    pass


class MissingFaceSubmesh(AnonError):
    pass


# render
class DegeneratePose(AnonError):
    pass


class SolverDiverged(AnonError):
    pass


# eval
class DimensionMismatch(AnonError):
    pass


class TooSmall(AnonError):
    pass


# cli / io
class ConfigInvalid(AnonError):
    pass


class ParseError(AnonError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class SpecInvalid(AnonError):
    pass
