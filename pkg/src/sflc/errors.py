"""Exception hierarchy shared by every layer of the package."""


class SflcError(Exception):
    """Base class for all errors raised by sflc."""


class DeviceTooSmall(SflcError):
    pass


class RangeError(SflcError, IndexError):
    pass


class EmptyPassword(SflcError, ValueError):
    pass


class DuplicatePassword(SflcError, ValueError):
    pass


class SamePassword(SflcError, ValueError):
    """The new password already unlocks another cell of the device."""


class AuthFailure(SflcError):
    """An AEAD cell did not open under the given key.

    This is control flow (the password does not own the cell), not corruption.
    """


class NoMatch(SflcError):
    """No DMB cell opens with the supplied password."""


class Corrupt(SflcError):
    pass


class InstanceClosed(SflcError):
    pass


class VolumeNotOpen(SflcError):
    pass


class NoSpace(SflcError):
    pass


class NotMapped(SflcError):
    pass


class LockHeld(SflcError):
    pass


class NotOpen(SflcError):
    """No server is running for the image."""


class SizeMismatch(SflcError, ValueError):
    pass


class ConstraintViolation(SflcError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


class RngFailure(SflcError):
    pass
