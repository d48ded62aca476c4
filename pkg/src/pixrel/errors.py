"""Exception hierarchy shared by all pixrel modules."""


class PixrelError(Exception):
    """Base class for every error raised by pixrel."""


class ShapeMismatch(PixrelError, ValueError):
    def __init__(self, layer_index, expected, found, detail=""):
        self.layer_index = layer_index
        self.expected = expected
        self.found = found
        msg = f"layer {layer_index}: expected {expected}, found {found}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class TraceMismatch(PixrelError, ValueError):
    pass


class InvalidMethodParams(PixrelError, ValueError):
    pass


class DimensionMismatch(PixrelError, ValueError):
    pass


class MissingGroundTruth(PixrelError, KeyError):
    def __init__(self, image, class_name):
        self.image = image
        self.class_name = class_name
        super().__init__(f"no ground truth for image {image!r}, class {class_name!r}")

    def __str__(self):
        return self.args[0]


class OutOfBounds(PixrelError, IndexError):
    pass


class KTooLarge(PixrelError, ValueError):
    pass


class ParseError(PixrelError, ValueError):
    def __init__(self, message, line=None, offset=None):
        self.line = line
        self.offset = offset
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class UnsupportedVersion(PixrelError, ValueError):
    pass


class UnsupportedMaxval(PixrelError, ValueError):
    pass


class IoError(PixrelError, OSError):
    pass


class FixtureError(PixrelError, RuntimeError):
    pass
