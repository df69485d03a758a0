"""
Errors - Exception hierarchy and solver status strings
"""

from typing import List, Sequence

# Solver outcomes are reported as status strings, not raised.
STATUS_CONVERGED = "CONVERGED"
STATUS_NON_CONVERGENCE = "NON_CONVERGENCE"
STATUS_NON_TERMINATION = "NON_TERMINATION"
STATUS_LOW_INLIER = "LOW_INLIER"
STATUS_NO_CORRESPONDENCES = "NO_CORRESPONDENCES"
STATUS_OK = "OK"


class MosaicError(Exception):
    """Base class for every hard error raised by the library"""


class InvalidParameter(MosaicError):
    pass


class DegenerateGeometry(MosaicError):
    pass


class TooFewCorrespondences(MosaicError):
    pass


class EmptyCorrespondences(MosaicError):
    pass


class EmptyInput(MosaicError):
    pass


class LengthMismatch(MosaicError):
    pass


class GraphFormatError(MosaicError):
    pass


class PlyFormatError(MosaicError):
    pass


class DisconnectedGraph(MosaicError):
    """Raised when the undirected pose graph has more than one component"""

    def __init__(self, components: Sequence[Sequence[int]]):
        self.components: List[List[int]] = [sorted(int(v) for v in c) for c in components]
        super().__init__(
            f"pose graph is disconnected into {len(self.components)} components: {self.components}"
        )


class StageError(MosaicError):
    """Wraps a module error with the pipeline stage it came from"""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
