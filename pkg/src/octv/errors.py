"""Exception hierarchy shared across the package."""


class OctvError(Exception):
    """Base class for all errors raised by this package."""


class ProtocolError(OctvError):
    """Malformed wire data: bad lengths, unknown kind bytes, bad templates."""


class FormatError(OctvError):
    """A segment container is structurally wrong (magic/version/scheme)."""


class IntegrityError(OctvError):
    """Authentication failed: wrong key or tampered bytes."""

    def __init__(self, message: str, chain_status=None):
        super().__init__(message)
        self.chain_status = chain_status


class ConfigError(OctvError):
    """Invalid configuration values."""


class NotFoundError(OctvError):
    """Requested object does not exist (or is withheld)."""


class ConflictError(OctvError):
    """Write refused: an object with that key already exists."""


class InvalidModeError(OctvError):
    """Operation not permitted under the camera's availability mode."""


class UnreachableError(OctvError):
    """Target peer is out of radio range or not responding."""


class NoSuchCharacteristicError(OctvError):
    """The camera does not expose the requested characteristic."""


class WalletError(OctvError):
    """Wallet file is corrupt or cannot be persisted."""
