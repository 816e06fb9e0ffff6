"""Exception types. All carry a machine-readable ``to_dict`` for the CLI."""


class EsegError(Exception):
    kind = "error"

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details

    def to_dict(self):
        return {"error": self.kind, "message": str(self), **self.details}


class ShapeError(EsegError, ValueError):
    kind = "shape_error"


class DTypeError(EsegError, TypeError):
    kind = "dtype_error"


class GraphError(EsegError, ValueError):
    kind = "graph_error"


class ConfigError(EsegError, ValueError):
    kind = "config_error"


class FormatError(EsegError, ValueError):
    kind = "format_error"


class TrainingError(EsegError, RuntimeError):
    kind = "training_error"
