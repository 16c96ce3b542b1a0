"""Deterministic seed derivation.

Every source of randomness in the suite flows from one root seed. Module-,
fold-, and tree-level seeds are derived by stable hashing so that runs are
reproducible across processes and platforms (Python's builtin ``hash`` is
salted per process and must not be used here).
"""

import hashlib


def derive_seed(root: int, *parts) -> int:
    """Derive a 32-bit child seed from a root seed and a label path.

    ``parts`` may mix strings and integers, e.g. ``derive_seed(7, "cv", 3)``.
    """
    key = repr((int(root),) + tuple(parts)).encode("utf-8")
    digest = hashlib.sha256(key).digest()
    return int.from_bytes(digest[:4], "big")
