"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto its
documented codes (2 usage, 3 I/O, 4 algorithmic) without string matching.
"""

from __future__ import annotations


class SolescanError(Exception):
    exit_code = 4


# -- input / geometry ---------------------------------------------------------

class EmptyInput(SolescanError, ValueError):
    pass


class InsufficientPoints(SolescanError, ValueError):
    pass


class BehindCamera(SolescanError, ValueError):
    pass


class OutOfFrame(SolescanError, ValueError):
    """Projection landed outside the image; callers usually skip the sample."""


class InvalidDepth(SolescanError, ValueError):
    pass


# -- I/O ------------------------------------------------------------------------

class ParseError(SolescanError, ValueError):
    exit_code = 3

    def __init__(self, message: str, *, path=None, line: int | None = None,
                 offset: int | None = None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte {offset}")
        super().__init__(f"{': '.join(where + [message]) if where else message}")
        self.path = path
        self.line = line
        self.offset = offset


class IoError(SolescanError, OSError):
    exit_code = 3


# -- alignment --------------------------------------------------------------------

class InsufficientLandmarks(SolescanError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DegenerateConfiguration(SolescanError):
    pass


class NoCorrespondences(SolescanError):
    pass


# -- scanning / shapes --------------------------------------------------------------

class InfeasibleRig(SolescanError):
    pass


class EmptyScan(SolescanError):
    pass


class DegenerateShape(SolescanError):
    pass


class CorrespondenceError(SolescanError):
    pass


class DivergedFit(SolescanError):
    pass


# -- learning -------------------------------------------------------------------------

class ShapeError(SolescanError, ValueError):
    pass


class NumericalError(SolescanError, ArithmeticError):
    pass


class DivergedTraining(SolescanError):
    pass


# -- meshing ----------------------------------------------------------------------------

class EmptyMesh(SolescanError):
    pass


class SolverDidNotConverge(UserWarning):
    """Issued (not raised) when the Poisson solve hits its iteration cap."""
