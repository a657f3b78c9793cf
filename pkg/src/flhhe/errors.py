"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit 2,
cryptographic failures exit 3, I/O problems exit 4.
"""


class FlhheError(Exception):
    """Base class for package errors."""


class ConfigError(FlhheError):
    """Invalid parameters, presets, or run configuration."""


class ParameterError(ConfigError):
    """Ring/scheme parameters violate a structural requirement."""


class CryptoError(FlhheError):
    """A cryptographic operation could not be carried out safely."""


class DecryptionError(CryptoError):
    """Ciphertext noise overflowed the decryption bound."""


class NonceReuseError(CryptoError):
    """A (key, nonce) pair was used twice within one run."""


class OverflowBudgetError(CryptoError):
    """Aggregating this many clients would wrap the plaintext modulus."""


class SerializationError(FlhheError):
    """Malformed or mismatched bytes on deserialization."""
