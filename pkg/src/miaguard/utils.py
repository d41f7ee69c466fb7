import math
from fractions import Fraction
import hashlib


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary printable parts (never uses ``hash()``)."""
    h = hashlib.blake2b("\x1f".join(map(str, parts)).encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") >> 1


def exact_mean(values) -> float:
    """Correctly rounded mean, so equal inputs give a bit-equal mean at any length.

    ``fsum(x) / n`` rounds twice; that one-ulp wobble is enough to split
    otherwise tied attack scores and fake a signal.
    """
    values = list(values)
    if not values:
        raise ValueError("mean of an empty sequence")
    if not all(math.isfinite(v) for v in values):
        return math.fsum(values) / len(values)
    return float(sum(map(Fraction, values), Fraction(0)) / len(values))
