"""
errors.py

Exception types shared across omnifuse. Each one derives from the built-in
exception a caller would naturally catch, so `except ValueError` still works
where the specific type does not matter.
"""


class ConfigError(ValueError):
    """Invalid or unknown configuration value."""


class DatasetFormatError(ValueError):
    """A dataset or tile file is corrupt, has the wrong magic or version."""


class ShapeMismatchError(ValueError):
    """An array does not have the shape its declaration promises."""


class MissingTileError(OSError):
    def __init__(self, tile_id, path):
        super().__init__(f"Tile '{tile_id}' is listed in the manifest but {path} does not exist.")
        self.tile_id = tile_id
        self.path = path


class ConfigMismatchError(ValueError):
    def __init__(self, expected, found):
        super().__init__(
            f"Checkpoint configuration does not match.\n  expected: {expected}\n  found:    {found}"
        )
        self.expected = expected
        self.found = found


class LabelAccessError(RuntimeError):
    """Labels were read while the tile store was locked for self-supervised training."""


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, names):
        super().__init__(f"Non-finite gradient in {len(names)} parameter(s): {', '.join(names)}")
        self.names = list(names)


class VerificationFailure(AssertionError):
    """At least one verification check failed."""
