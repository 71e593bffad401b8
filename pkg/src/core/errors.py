# errors.py


class StarError(Exception):
    """Base class for every error the pipeline raises on purpose.

    exit_code is what driver.py hands back to the shell.
    """
    exit_code = 1


class UsageError(StarError):
    exit_code = 2


class NumericsError(StarError):
    exit_code = 3


class NonFiniteLossError(NumericsError):
    def __init__(self, component, value):
        super().__init__(f"non-finite loss component '{component}': {value}")
        self.component = component
        self.value = value


class GradientCheckError(NumericsError):
    def __init__(self, name, index):
        super().__init__(f"non-finite objective at perturbation of '{name}'{list(index)}")
        self.name = name
        self.index = tuple(index)


class VocabOverflowError(StarError):
    pass


class ShapeMismatchError(StarError):
    pass


class SamplingError(StarError):
    pass


class TraceLevelError(StarError):
    pass


class ArtifactMismatchError(StarError):
    exit_code = 4

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class ChecksumError(ArtifactMismatchError):
    pass
