"""32-bit TCP sequence-space arithmetic (RFC 1982 style serial numbers)."""

MOD = 1 << 32
HALF = 1 << 31
MASK = MOD - 1


def seq_add(a: int, b: int) -> int:
    return (a + b) & MASK


def seq_diff(a: int, b: int) -> int:
    """Signed distance a - b in sequence space, in (-2^31, 2^31]."""
    d = (a - b) & MASK
    if d >= HALF:
        d -= MOD
    return d


def seq_lt(a: int, b: int) -> bool:
    return seq_diff(a, b) < 0


def seq_leq(a: int, b: int) -> bool:
    return seq_diff(a, b) <= 0


def seq_gt(a: int, b: int) -> bool:
    return seq_diff(a, b) > 0


def seq_geq(a: int, b: int) -> bool:
    return seq_diff(a, b) >= 0


def seq_max(a: int, b: int) -> int:
    return a if seq_geq(a, b) else b
