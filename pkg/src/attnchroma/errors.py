"""Exception types shared across the package.

The CLI maps each family onto a process exit code.
"""


class ShapeError(ValueError):
    """Operand shapes do not agree with an operation's contract."""


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared where only finite values are allowed."""


class FormatError(ValueError):
    """A binary or text file does not match its declared format."""


class MissingContextError(RuntimeError):
    """backward() was called before a matching forward()."""
