"""Exception types raised by the toolkit."""

import numpy as np


class MultifacError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(MultifacError, ValueError):
    """Shapes, modes or column counts do not agree."""


class DegenerateDataError(MultifacError, ValueError):
    """Data carries no usable signal (zero norm, nothing observed)."""


class SingularSystemError(MultifacError, np.linalg.LinAlgError):
    """Normal equations are singular at sigma = 0."""

    def __init__(self, detail: str = "") -> None:
        message = (
            "normal equations are singular; use a penalty sigma > 0 "
            "(a tiny ridge such as 1e-8 is enough) or enable allow_pinv"
        )
        if detail:
            message = f"{detail}: {message}"
        super().__init__(message)


class InputFileError(MultifacError):
    """A manifest or payload file is malformed."""

    def __init__(self, path: str, detail: str) -> None:
        self.path = path
        self.detail = detail
        super().__init__(f"{path}: {detail}")


class ExperimentError(MultifacError, KeyError):
    """Unknown simulation experiment."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown experiment"


class MissingDataError(MultifacError, ValueError):
    """A complete-data routine received tensors with missing entries."""


class InfeasibleMaskError(MultifacError, ValueError):
    """Requested held-out or missing fractions cannot be realised."""
