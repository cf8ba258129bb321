"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: parse/usage problems exit 2, geometry
problems exit 3, degenerate data exits 4.
"""


class FlxqaError(Exception):
    exit_code = 1


class ParseError(FlxqaError, ValueError):
    exit_code = 2


class Unsupported(FlxqaError, ValueError):
    exit_code = 2


class Corrupt(FlxqaError, ValueError):
    exit_code = 2


class NotContainer(FlxqaError, ValueError):
    exit_code = 2


class SpecError(FlxqaError, ValueError):
    exit_code = 2


class GeometryError(FlxqaError, ValueError):
    exit_code = 3


class ShapeError(FlxqaError, ValueError):
    exit_code = 3


class PairingError(FlxqaError, ValueError):
    exit_code = 3


class OutOfBounds(FlxqaError, ValueError):
    exit_code = 3


class EmptyEvaluation(FlxqaError, ValueError):
    exit_code = 4


class EmptyStructure(FlxqaError, ValueError):
    exit_code = 4


class DegenerateVariance(FlxqaError, ValueError):
    exit_code = 4


class InsufficientData(FlxqaError, ValueError):
    exit_code = 4
