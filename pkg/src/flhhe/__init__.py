"""Federated learning with symmetric-to-homomorphic transciphering.

Clients train locally, quantize their model updates, and mask them with
a cheap additive stream cipher; the aggregation server turns those
masked uploads into homomorphic ciphertexts and averages them blind.
The package also runs the same round loop in plaintext and in plain-HE
mode so the three can be compared on accuracy, computation, and bytes.
"""

__version__ = "0.1.0"
