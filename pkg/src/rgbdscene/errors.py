"""Exception hierarchy shared by every module of the engine."""


class EngineError(Exception):
    """Base class for all errors raised by the engine."""


class ConfigurationError(EngineError, ValueError):
    """Shapes, channel counts or options are inconsistent."""


class NumericError(EngineError, ArithmeticError):
    """A kernel produced NaN or Inf."""


class ContainerError(EngineError):
    """The weight container is malformed or unreadable."""


class TruncatedFileError(ContainerError):
    """The weight container ends before a declared section or tensor."""


class VersionError(ContainerError):
    """The container's format version is not supported."""


class MissingTensorError(ContainerError):
    """A parameter required by the configured architecture is absent."""

    def __init__(self, name: str):
        super().__init__(f"missing tensor {name!r}")
        self.tensor_name = name


class UnexpectedTensorError(ContainerError):
    """The container holds a tensor the architecture never reads."""

    def __init__(self, name: str):
        super().__init__(f"unexpected tensor {name!r}")
        self.tensor_name = name


class ShapeMismatchError(ContainerError):
    """A stored tensor has a shape different from the architecture's."""

    def __init__(self, name: str, expected, actual):
        super().__init__(
            f"tensor {name!r} has shape {list(actual)}, expected {list(expected)}"
        )
        self.tensor_name = name
        self.expected = tuple(expected)
        self.actual = tuple(actual)


class NonFiniteTensorError(ContainerError):
    """A stored tensor contains NaN or Inf."""

    def __init__(self, name: str):
        super().__init__(f"tensor {name!r} contains non-finite values")
        self.tensor_name = name
