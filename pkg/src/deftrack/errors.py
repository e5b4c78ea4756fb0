"""Exception types shared across the package."""


class DeftrackError(Exception):
    """Base class for all package errors."""


class DegenerateBlend(DeftrackError):
    """A blended dual quaternion has a (near) zero real part."""


class NonRigidMatrix(DeftrackError):
    """A 4x4 matrix whose rotation block is not orthonormal."""


class NotPositiveDefinite(DeftrackError):
    """Cholesky factorisation failed on a damped normal system."""


class NonManifold(DeftrackError):
    """An edge is shared by more than two faces."""


class LengthMismatch(DeftrackError):
    """Estimated and reference sequences disagree in shape."""


class ParseError(DeftrackError):
    pass


class ValidationError(DeftrackError):
    """An invariant breach; ``problems`` lists every offending entity."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class VersionError(DeftrackError):
    pass


class TruncatedFile(DeftrackError):
    def __init__(self, message, frame_index=None):
        super().__init__(message)
        self.frame_index = frame_index


class HeaderMismatch(DeftrackError):
    pass
