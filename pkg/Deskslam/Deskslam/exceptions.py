class DeskslamError(Exception):
    """Base class for every error raised by the project."""
    exit_code = 1


class ConfigurationError(DeskslamError):
    exit_code = 2


class DivergenceError(DeskslamError):
    exit_code = 3


class StorageError(DeskslamError):
    exit_code = 4


class ContainerFormatError(StorageError):
    pass


# Geometry

class BehindCameraError(DeskslamError):
    def __init__(self, depth):
        super().__init__(f"point behind camera (z={depth:.3e})")
        self.depth = depth


class InvalidDepthError(DeskslamError):
    pass


class BranchAmbiguityError(DeskslamError):
    pass


class DomainError(DeskslamError):
    pass


# Optimisation

class DegenerateProblemError(DeskslamError):
    pass


class RankDeficiencyError(DeskslamError):
    def __init__(self, min_eigenvalue):
        super().__init__(f"reduced system not positive definite (smallest eigenvalue {min_eigenvalue:.3e})")
        self.min_eigenvalue = min_eigenvalue


class InitializationError(DeskslamError):
    pass


class DistillationError(DeskslamError):
    pass


# Mapping / evaluation

class MapGraphDesyncError(DeskslamError):
    pass


class InsufficientDataError(DeskslamError):
    pass


class ShapeMismatchError(DeskslamError):
    pass


class EmptyMaskError(DeskslamError):
    pass
