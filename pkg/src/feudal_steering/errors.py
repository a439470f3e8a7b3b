"""Exception hierarchy. Every error carries a short ``kind`` tag the CLI prints."""


class FeudalError(Exception):
    kind = "error"


class ShapeError(FeudalError, ValueError):
    kind = "shape"


class ConfigError(FeudalError, ValueError):
    kind = "config"


class ContractError(FeudalError, ValueError):
    kind = "contract"


class InsufficientHistory(ContractError):
    kind = "insufficient-history"


class TrainingError(FeudalError, RuntimeError):
    kind = "training-divergence"


class MissingFileError(FeudalError, FileNotFoundError):
    kind = "missing-file"


class SchemaError(FeudalError, ValueError):
    kind = "schema"


class ParseError(FeudalError, ValueError):
    kind = "parse"

    def __init__(self, message, line=None, path=None):
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"line {line}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.line = line
        self.path = path


class OrderError(FeudalError, ValueError):
    kind = "timestamp-order"
