"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class FormatError(ValueError):
    """Malformed model file. ``offset`` is the byte position where reading failed."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ParseError(ValueError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


class DatasetError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass
