"""Description packetization and the packet-erasure channel.

Packet layout (big-endian)::

    offset  size  field
    0       1     marker 0xAB
    1       4     sequence number
    5       2     NALU magic 0x4D 0x44
    7       2     frame index
    9       1     bit 7: description id (0/1), bit 0: NALU type (1 = IDR)
    10      2     first CTU
    12      2     CTU count
    14      4     payload length
    18      1     CRC-8 (poly 0x07, init 0) over bytes 0..17
    19      L     payload: CTU records
    19+L    4     CRC-32 (zlib) over the payload

Each CTU record is ``C7 C7 | qp | CTU syntax (byte padded) | CRC-8`` where the
trailing CRC-8 covers the record from the sentinel through the padded syntax.
"""

from __future__ import annotations

import csv
import struct
import zlib
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import entropy
from .codec import QP_MAX, CodedCtu, SEARCH_RANGE
from .errors import PacketError

PACKET_MARKER = 0xAB
NALU_MAGIC = b"\x4d\x44"
CTU_SENTINEL = b"\xc7\xc7"
HEADER_LEN = 19
TRAILER_LEN = 4
_HEADER = struct.Struct(">BI2sHBHHI")

TRACE_CSV_COLUMNS = ["seq", "desc", "frame", "erased"]


def _crc8_table():
    table = []
    for byte in range(256):
        crc = byte
        for _ in range(8):
            crc = ((crc << 1) ^ 0x07) & 0xFF if crc & 0x80 else (crc << 1) & 0xFF
        table.append(crc)
    return bytes(table)


_CRC8 = _crc8_table()


def crc8(data: bytes, crc: int = 0) -> int:
    for byte in data:
        crc = _CRC8[crc ^ byte]
    return crc


def crc32(data: bytes) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


@dataclass(frozen=True)
class Nalu:
    frame: int
    desc: int
    idr: bool
    first_ctu: int
    ctu_count: int
    payload: bytes

    @property
    def nalu_type(self) -> str:
        return "idr" if self.idr else "inter"


@dataclass(frozen=True)
class Packet:
    seq: int
    desc: int
    frame: int
    data: bytes

    @property
    def payload_region(self) -> Tuple[int, int]:
        return HEADER_LEN, len(self.data) - TRAILER_LEN


def encode_ctu_record(ctu: CodedCtu) -> bytes:
    body = CTU_SENTINEL + bytes([ctu.qp]) + ctu.payload
    return body + bytes([crc8(body)])


def build_packet(seq: int, nalu: Nalu) -> Packet:
    if nalu.ctu_count > 0xFFFF or nalu.first_ctu > 0xFFFF:
        raise PacketError("ctu-count-overflow")
    if not 0 <= nalu.frame <= 0xFFFF:
        raise PacketError(f"frame index {nalu.frame} does not fit 16 bits")
    flags = (0x80 if nalu.desc else 0) | (1 if nalu.idr else 0)
    head = _HEADER.pack(
        PACKET_MARKER, seq & 0xFFFFFFFF, NALU_MAGIC, nalu.frame, flags,
        nalu.first_ctu, nalu.ctu_count, len(nalu.payload),
    )
    data = head + bytes([crc8(head)]) + nalu.payload + struct.pack(">I", crc32(nalu.payload))
    return Packet(seq, nalu.desc, nalu.frame, data)


def packetize(
    frame_ctus: Sequence[CodedCtu],
    frame_index: int,
    desc: int,
    idr: bool,
    ctus_per_nalu: int,
    seq_start: int = 0,
) -> List[Packet]:
    """Split one description of one frame into packets, one NALU each."""
    if not frame_ctus:
        raise PacketError("empty CTU list")
    if ctus_per_nalu < 1:
        raise PacketError("ctus_per_nalu must be >= 1")
    if len(frame_ctus) > 0xFFFF:
        raise PacketError("ctu-count-overflow")
    packets = []
    for k, start in enumerate(range(0, len(frame_ctus), ctus_per_nalu)):
        chunk = frame_ctus[start : start + ctus_per_nalu]
        payload = b"".join(encode_ctu_record(c) for c in chunk)
        nalu = Nalu(frame_index, desc, idr, chunk[0].index, len(chunk), payload)
        packets.append(build_packet(seq_start + k, nalu))
    return packets


@dataclass(frozen=True)
class DecodedCtu:
    index: int
    qp: int
    mode: str
    dc: int
    mv: Tuple[int, int]
    scan_levels: np.ndarray


class HeaderError(Exception):
    def __init__(self, cause: str):
        super().__init__(cause)
        self.cause = cause


def parse_header(data: bytes, n_ctus: Optional[int] = None) -> Tuple[int, Nalu]:
    """Validate and parse a packet header; raises :class:`HeaderError`."""
    if len(data) < HEADER_LEN + TRAILER_LEN:
        raise HeaderError("truncated")
    head = data[: HEADER_LEN - 1]
    if data[0] != PACKET_MARKER:
        raise HeaderError("bad-marker")
    if crc8(head) != data[HEADER_LEN - 1]:
        raise HeaderError("header-crc")
    _, seq, magic, frame, flags, first, count, plen = _HEADER.unpack(head)
    if magic != NALU_MAGIC:
        raise HeaderError("bad-magic")
    if plen != len(data) - HEADER_LEN - TRAILER_LEN:
        raise HeaderError("length-mismatch")
    if count == 0 or (n_ctus is not None and first + count > n_ctus):
        raise HeaderError("bad-ctu-range")
    payload = data[HEADER_LEN : HEADER_LEN + plen]
    return seq, Nalu(frame, 1 if flags & 0x80 else 0, bool(flags & 1), first, count, payload)


def parse_payload(
    payload: bytes, first_ctu: int, count: int, ctu_size: int, search: int = SEARCH_RANGE
) -> Tuple[List[DecodedCtu], Optional[Tuple[int, str]]]:
    """Parse CTU records in order.

    Returns the CTUs decoded before the first syntax failure, and
    ``(ctu_index, cause)`` for that failure (``None`` if all records parsed).
    """
    n_coeffs = ctu_size * ctu_size
    out = []
    pos = 0
    for k in range(count):
        idx = first_ctu + k
        start = pos
        if payload[pos : pos + 2] != CTU_SENTINEL:
            return out, (idx, "sentinel-mismatch")
        if pos + 3 > len(payload):
            return out, (idx, "overrun")
        qp = payload[pos + 2]
        if qp > QP_MAX:
            return out, (idx, "bad-qp")
        reader = entropy.BitReader(payload, pos + 3)
        try:
            mode, dc, mv, levels = entropy.read_ctu_syntax(reader, n_coeffs, search)
        except entropy.SyntaxViolation as exc:
            return out, (idx, exc.cause)
        end = pos + 3 + reader.byte_pos
        if end >= len(payload):
            return out, (idx, "overrun")
        if crc8(payload[start:end]) != payload[end]:
            return out, (idx, "ctu-crc")
        pos = end + 1
        out.append(DecodedCtu(idx, qp, mode, dc, mv, levels))
    if pos != len(payload):
        return out, (first_ctu + count, "trailing-bytes")
    return out, None


def payload_crc_ok(data: bytes) -> bool:
    lo, hi = HEADER_LEN, len(data) - TRAILER_LEN
    return crc32(data[lo:hi]) == struct.unpack(">I", data[hi:])[0]


def depacketize(packets: Iterable[Packet], ctu_size: int) -> List[DecodedCtu]:
    """Strict inverse of :func:`packetize` for intact packets."""
    out = []
    for p in packets:
        _, nalu = parse_header(p.data)
        if not payload_crc_ok(p.data):
            raise PacketError(f"payload CRC failure in packet {p.seq}")
        ctus, err = parse_payload(nalu.payload, nalu.first_ctu, nalu.ctu_count, ctu_size)
        if err is not None:
            raise PacketError(f"CTU {err[0]}: {err[1]}")
        out.extend(ctus)
    return out


def write_stream(path, packets: Iterable[Packet]) -> None:
    with open(path, "wb") as fh:
        for p in packets:
            fh.write(p.data)


def read_stream(path) -> List[Packet]:
    """Split a file of concatenated packets using the length fields."""
    with open(path, "rb") as fh:
        data = fh.read()
    out, pos = [], 0
    while pos < len(data):
        if len(data) - pos < HEADER_LEN + TRAILER_LEN:
            raise PacketError("truncated stream")
        _, seq, _, frame, flags, _, _, plen = _HEADER.unpack(data[pos : pos + HEADER_LEN - 1])
        end = pos + HEADER_LEN + plen + TRAILER_LEN
        out.append(Packet(seq, 1 if flags & 0x80 else 0, frame, data[pos:end]))
        pos = end
    return out


@dataclass(frozen=True)
class TraceEntry:
    seq: int
    desc: int
    frame: int
    erased: bool
    corrupted_offset: Optional[int] = None
    corrupt_mask: int = 0

    @property
    def lost(self) -> bool:
        return self.erased or self.corrupted_offset is not None


@dataclass(frozen=True)
class ChannelTrace:
    seed: int
    p_e: float
    mode: str
    decisions: Tuple[TraceEntry, ...]

    @property
    def erased_count(self) -> int:
        return sum(d.lost for d in self.decisions)


class ErasureChannel:
    """Seeded i.i.d. packet channel for one description.

    In ``"erasure"`` mode each packet is dropped with probability ``p_e``;
    in ``"bit-error"`` mode the packet is instead delivered with one payload
    byte XOR-ed by a random non-zero mask.  A loss ``pattern`` (sequence of
    0/1, cycled) replaces the random draws.
    """

    def __init__(self, p_e: float, seed: int, mode: str = "erasure", pattern=None):
        if not 0.0 <= p_e <= 1.0:
            raise ValueError(f"p_e must lie in [0, 1], got {p_e}")
        if mode not in ("erasure", "bit-error"):
            raise ValueError(f"unknown channel mode {mode!r}")
        self.p_e = p_e
        self.seed = seed
        self.mode = mode
        self.pattern = None if pattern is None else [int(v) for v in pattern]
        self._rng = np.random.default_rng(seed)
        self._count = 0

    def _hit(self) -> bool:
        if self.pattern is not None:
            v = self.pattern[self._count % len(self.pattern)]
        else:
            v = self._rng.random() < self.p_e
        self._count += 1
        return bool(v)

    def send(self, packets: Sequence[Packet]):
        delivered, decisions = [], []
        for p in packets:
            hit = self._hit()
            if not hit:
                delivered.append(p)
                decisions.append(TraceEntry(p.seq, p.desc, p.frame, False))
            elif self.mode == "erasure" or self.pattern is not None:
                decisions.append(TraceEntry(p.seq, p.desc, p.frame, True))
            else:
                lo, hi = p.payload_region
                off = int(self._rng.integers(lo, hi)) if hi > lo else lo
                mask = int(self._rng.integers(1, 256))
                delivered.append(_corrupt(p, off, mask))
                decisions.append(TraceEntry(p.seq, p.desc, p.frame, False, off, mask))
        return delivered, ChannelTrace(self.seed, self.p_e, self.mode, tuple(decisions))


def _corrupt(p: Packet, offset: int, mask: int) -> Packet:
    buf = bytearray(p.data)
    buf[offset] ^= mask
    return Packet(p.seq, p.desc, p.frame, bytes(buf))


def transmit(packets: Sequence[Packet], p_e: float, seed: int, mode: str = "erasure", pattern=None):
    return ErasureChannel(p_e, seed, mode, pattern).send(packets)


def replay(packets: Sequence[Packet], trace: ChannelTrace) -> List[Packet]:
    """Apply recorded channel decisions to ``packets``."""
    if len(packets) != len(trace.decisions):
        raise ValueError("trace length does not match packet count")
    out = []
    for p, d in zip(packets, trace.decisions):
        if d.erased:
            continue
        out.append(_corrupt(p, d.corrupted_offset, d.corrupt_mask) if d.corrupted_offset is not None else p)
    return out


def feedback_pe(history: Sequence[ChannelTrace], window: int, default_pe: float) -> float:
    """Empirical packet-loss fraction over the last ``window`` packets."""
    if window < 1:
        raise ValueError("window must be >= 1")
    flags = [d.lost for t in history for d in t.decisions]
    if not flags:
        return default_pe
    recent = flags[-window:]
    return sum(recent) / len(recent)


def write_trace_csv(path, traces: Iterable[ChannelTrace]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_CSV_COLUMNS)
        for t in traces:
            for d in t.decisions:
                w.writerow([d.seq, d.desc + 1, d.frame, int(d.lost)])


def load_pattern(path) -> List[int]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line not in ("0", "1"):
                raise ValueError(f"pattern file entries must be 0 or 1, got {line!r}")
            out.append(int(line))
    if not out:
        raise ValueError("empty loss pattern")
    return out
