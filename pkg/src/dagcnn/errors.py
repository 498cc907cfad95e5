"""Exception types shared across the package."""


class DagCnnError(Exception):
    pass


class ShapeError(DagCnnError, ValueError):
    """Operand extents are incompatible with an operation."""


class NonFiniteError(DagCnnError, FloatingPointError):
    """A NaN or Inf appeared where only finite values are allowed.

    ``node`` carries the offending graph node id when known.
    """

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class GraphError(DagCnnError, ValueError):
    """Invalid graph structure: unknown parent, cycle, bad fan-in, ..."""


class ExecutionError(DagCnnError, RuntimeError):
    """Graph executed out of order, e.g. backward before forward."""


class FormatError(DagCnnError, ValueError):
    """Malformed on-disk file: bad magic, version, truncation."""
