"""Exp-Golomb entropy coding of CTU syntax.

CTU bit syntax, in order::

    mode          u(1)    0 = intra-dc, 1 = inter-previous
    dc            u(8)    intra only
    mv_x, mv_y    se(v)   inter only
    num_nonzero   ue(v)
    repeated num_nonzero times, over the zigzag scan:
        run       ue(v)   zeros skipped before this coefficient
        level     se(v)   non-zero

Trailing zeros after the last non-zero coefficient are implicit, so an
all-zero block costs the mode/prediction header plus the single bit ``ue(0)``.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Tuple

import numpy as np

MAX_LEADING_ZEROS = 31


class SyntaxViolation(Exception):
    """Raised by the reader when the bitstream cannot be valid CTU syntax.

    ``cause`` is a short machine-readable tag used in error logs.
    """

    def __init__(self, cause: str, detail: str = ""):
        super().__init__(f"{cause}: {detail}" if detail else cause)
        self.cause = cause


class BitWriter:
    def __init__(self):
        self._acc = 0
        self._n = 0

    def __len__(self):
        return self._n

    def write(self, value: int, nbits: int) -> None:
        if nbits:
            self._acc = (self._acc << nbits) | (value & ((1 << nbits) - 1))
            self._n += nbits

    def write_ue(self, x: int) -> None:
        v = x + 1
        self.write(v, 2 * v.bit_length() - 1)

    def write_se(self, k: int) -> None:
        self.write_ue(2 * k - 1 if k > 0 else -2 * k)

    def to_bytes(self) -> bytes:
        """Bytes of the written bits, zero-padded to a byte boundary."""
        pad = -self._n % 8
        return (self._acc << pad).to_bytes((self._n + pad) // 8, "big")


class BitReader:
    def __init__(self, data: bytes, start_byte: int = 0, end_byte: int = None):
        end = len(data) if end_byte is None else end_byte
        self._val = int.from_bytes(data[start_byte:end], "big")
        self._total = 8 * (end - start_byte)
        self.pos = 0

    @property
    def remaining(self) -> int:
        return self._total - self.pos

    def read(self, nbits: int) -> int:
        if nbits > self.remaining:
            raise SyntaxViolation("overrun", "read past end of payload")
        shift = self._total - self.pos - nbits
        self.pos += nbits
        return (self._val >> shift) & ((1 << nbits) - 1)

    def read_ue(self) -> int:
        zeros = 0
        while self.read(1) == 0:
            zeros += 1
            if zeros > MAX_LEADING_ZEROS:
                raise SyntaxViolation("overrun", "exp-Golomb prefix too long")
        return (1 << zeros) - 1 + self.read(zeros)

    def read_se(self) -> int:
        m = self.read_ue()
        return (m + 1) // 2 if m & 1 else -(m // 2)

    def align(self) -> None:
        self.pos += -self.pos % 8

    @property
    def byte_pos(self) -> int:
        return (self.pos + 7) // 8


@lru_cache(maxsize=None)
def zigzag_order(size: int) -> np.ndarray:
    """Flat indices of a ``size`` x ``size`` block in zigzag scan order."""
    idx = sorted(
        range(size * size),
        key=lambda k: (
            k // size + k % size,
            k // size if (k // size + k % size) % 2 else k % size,
        ),
    )
    out = np.array(idx, dtype=np.intp)
    out.setflags(write=False)
    return out


def ue_length(x) -> np.ndarray:
    """Bit length of ue(x), elementwise."""
    _, e = np.frexp(np.asarray(x, dtype=np.float64) + 1.0)
    return 2 * e - 1


def se_length(k) -> np.ndarray:
    k = np.asarray(k, dtype=np.int64)
    return ue_length(np.where(k > 0, 2 * k - 1, -2 * k))


def header_length(mode: str, mv: Tuple[int, int] = (0, 0)) -> int:
    if mode == "intra-dc":
        return 1 + 8
    return 1 + int(se_length(mv[0])) + int(se_length(mv[1]))


def coefficient_bits(scan_levels: np.ndarray) -> int:
    """Bits spent on the coefficient part for levels already in scan order."""
    nz = np.flatnonzero(scan_levels)
    if nz.size == 0:
        return 1
    runs = np.diff(nz, prepend=-1) - 1
    return int(
        ue_length(nz.size) + ue_length(runs).sum() + se_length(scan_levels[nz]).sum()
    )


def write_ctu_syntax(
    w: BitWriter, mode: str, dc: int, mv: Tuple[int, int], scan_levels: np.ndarray
) -> None:
    if mode == "intra-dc":
        w.write(0, 1)
        w.write(int(dc), 8)
    else:
        w.write(1, 1)
        w.write_se(int(mv[0]))
        w.write_se(int(mv[1]))
    nz = np.flatnonzero(scan_levels)
    w.write_ue(int(nz.size))
    prev = -1
    for pos in nz.tolist():
        w.write_ue(pos - prev - 1)
        w.write_se(int(scan_levels[pos]))
        prev = pos


def read_ctu_syntax(r: BitReader, n_coeffs: int, max_mv: int = 64):
    """Parse one CTU's syntax; returns ``(mode, dc, mv, scan_levels)``."""
    if r.read(1) == 0:
        mode, dc, mv = "intra-dc", r.read(8), (0, 0)
    else:
        mode, dc = "inter-previous", 0
        mv = (r.read_se(), r.read_se())
        if abs(mv[0]) > max_mv or abs(mv[1]) > max_mv:
            raise SyntaxViolation("bad-motion-vector", f"{mv}")
    nnz = r.read_ue()
    if nnz > n_coeffs:
        raise SyntaxViolation("overrun", f"{nnz} non-zero levels in {n_coeffs} coefficients")
    levels = np.zeros(n_coeffs, dtype=np.int64)
    pos = -1
    for _ in range(nnz):
        pos += r.read_ue() + 1
        if pos >= n_coeffs:
            raise SyntaxViolation("overrun", "zero run past end of block")
        lv = r.read_se()
        if lv == 0:
            raise SyntaxViolation("zero-level", f"explicit zero level at scan position {pos}")
        levels[pos] = lv
    return mode, dc, mv, levels


def encode_levels(scan_levels) -> bytes:
    """Coefficient part only (no mode header), byte-padded."""
    w = BitWriter()
    nz = np.flatnonzero(scan_levels)
    w.write_ue(int(nz.size))
    prev = -1
    for pos in nz.tolist():
        w.write_ue(pos - prev - 1)
        w.write_se(int(scan_levels[pos]))
        prev = pos
    return w.to_bytes()


def decode_levels(data: bytes, n_coeffs: int) -> np.ndarray:
    r = BitReader(data)
    nnz = r.read_ue()
    if nnz > n_coeffs:
        raise SyntaxViolation("overrun")
    levels = np.zeros(n_coeffs, dtype=np.int64)
    pos = -1
    for _ in range(nnz):
        pos += r.read_ue() + 1
        if pos >= n_coeffs:
            raise SyntaxViolation("overrun")
        levels[pos] = r.read_se()
    return levels
