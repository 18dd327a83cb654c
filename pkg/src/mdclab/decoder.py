"""Two-description decoder with syntax checking, central merge and concealment.

Per frame: each description is decoded into a zero-initialised side picture.
A NALU whose header fails validation is dropped whole; inside a NALU the CTU
records are parsed in order and the first failing record discards itself and
every later record of that NALU.  The central picture takes, per CTU, a
principal copy if either description delivered one, else a redundant copy,
else the co-located CTU of the previous central picture (mid-gray on the
first frame or right after a refresh).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .channel import HeaderError, Packet, parse_header, parse_payload, payload_crc_ok
from .codec import INTRA, CtuGrid, levels_from_scan, reconstruct_block, reference_block
from .source import FramePlane

MISSING = "missing"
DECODED_PRINCIPAL = "decoded-principal"
DECODED_REDUNDANT = "decoded-redundant"
CONCEALED = "concealed"
GRAY = 128

ERROR_LOG_COLUMNS = ["frame", "desc", "nalu", "first_ctu", "cause"]


@dataclass
class SidePicture:
    desc: int
    samples: np.ndarray
    status: List[str]
    idr: bool = False

    def decoded(self, i: int) -> bool:
        return self.status[i] != MISSING


@dataclass
class CentralPicture:
    frame: FramePlane
    provenance: List[str]

    @property
    def concealed_count(self) -> int:
        return sum(p == CONCEALED for p in self.provenance)


@dataclass(frozen=True)
class ErrorEvent:
    frame: int
    desc: int
    nalu: int
    first_ctu: int
    cause: str


@dataclass
class DecoderState:
    previous_central: Optional[CentralPicture] = None
    frame_counter: int = 0
    error_log: List[ErrorEvent] = field(default_factory=list)


class MdcDecoder:
    """Stateful decoder for one session; frames must be fed in order.

    ``principal`` gives, per description, a boolean mask of the CTUs that
    description carries at principal quality.
    """

    def __init__(
        self,
        grid: CtuGrid,
        principal: Tuple[np.ndarray, np.ndarray],
        orig_size: Optional[Tuple[int, int]] = None,
    ):
        self.grid = grid
        self.principal = tuple(np.asarray(m, dtype=bool) for m in principal)
        self.orig_size = orig_size or (grid.width, grid.height)
        self.state = DecoderState()

    def _log(self, frame, desc, nalu, first_ctu, cause):
        self.state.error_log.append(ErrorEvent(frame, desc + 1, nalu, first_ctu, cause))

    def _reference(self) -> np.ndarray:
        prev = self.state.previous_central
        if prev is None:
            return np.full((self.grid.height, self.grid.width), GRAY, dtype=np.uint8)
        return prev.frame.samples

    @staticmethod
    def frame_is_idr(packets: Sequence[Packet], n_ctus: int) -> Optional[bool]:
        """IDR flag from the first packet whose header validates; None if none does."""
        for p in packets:
            try:
                _, nalu = parse_header(p.data, n_ctus)
            except HeaderError:
                continue
            return nalu.idr
        return None

    def decode_description(self, packets: Sequence[Packet], frame_index: int, desc: int) -> SidePicture:
        g = self.grid
        s = g.ctu_size
        side = SidePicture(desc, np.zeros((g.height, g.width), dtype=np.uint8), [MISSING] * g.n)
        reference = self._reference()
        explained = np.zeros(g.n, dtype=bool)

        for p in packets:
            try:
                seq, nalu = parse_header(p.data, g.n)
            except HeaderError as exc:
                self._log(frame_index, desc, -1, -1, exc.cause)
                continue
            if nalu.frame != frame_index or nalu.desc != desc:
                self._log(frame_index, desc, seq, nalu.first_ctu, "stream-mismatch")
                continue
            side.idr = side.idr or nalu.idr
            ctus, err = parse_payload(nalu.payload, nalu.first_ctu, nalu.ctu_count, s)
            for ctu in ctus:
                x, y = g.origin(ctu.index)
                if ctu.mode == INTRA:
                    pred = np.full((s, s), ctu.dc, dtype=np.int32)
                else:
                    pred = reference_block(reference, x, y, s, ctu.mv).astype(np.int32)
                levels = levels_from_scan(ctu.scan_levels, s)
                side.samples[y : y + s, x : x + s] = reconstruct_block(levels, ctu.qp, pred)
                side.status[ctu.index] = (
                    DECODED_PRINCIPAL if self.principal[desc][ctu.index] else DECODED_REDUNDANT
                )
            if err is not None:
                bad, cause = err
                self._log(frame_index, desc, seq, bad, cause)
                explained[bad : nalu.first_ctu + nalu.ctu_count] = True
            elif not payload_crc_ok(p.data):
                # every record passed its own check: the damage is in the trailer
                self._log(frame_index, desc, seq, nalu.first_ctu + nalu.ctu_count, "payload-crc")

        missing = np.array([st == MISSING for st in side.status]) & ~explained
        for i in np.flatnonzero(missing & ~np.concatenate(([False], missing[:-1]))):
            self._log(frame_index, desc, -1, int(i), "lost")
        return side

    def conceal(self, side: SidePicture) -> FramePlane:
        """Side picture with missing CTUs filled from the previous central picture."""
        out = side.samples.copy()
        ref = self._reference()
        for i, st in enumerate(side.status):
            if st == MISSING:
                x, y = self.grid.origin(i)
                s = self.grid.ctu_size
                out[y : y + s, x : x + s] = ref[y : y + s, x : x + s]
        return FramePlane(out, *self.orig_size)

    def merge_central(self, side1: SidePicture, side2: SidePicture) -> CentralPicture:
        g = self.grid
        s = g.ctu_size
        out = np.empty((g.height, g.width), dtype=np.uint8)
        ref = self._reference()
        provenance = []
        sides = (side1, side2)
        for i in range(g.n):
            x, y = g.origin(i)
            src = None
            for tag in (DECODED_PRINCIPAL, DECODED_REDUNDANT):
                for k, side in enumerate(sides):
                    if side.status[i] == tag:
                        src = side.samples
                        provenance.append(f"desc{k + 1}-{tag.split('-')[1]}")
                        break
                if src is not None:
                    break
            if src is None:
                src = ref
                provenance.append(CONCEALED)
            out[y : y + s, x : x + s] = src[y : y + s, x : x + s]
        central = CentralPicture(FramePlane(out, *self.orig_size), provenance)
        self.state.previous_central = central
        self.state.frame_counter += 1
        return central

    def decode_frame(
        self,
        frame_index: int,
        packets1: Sequence[Packet],
        packets2: Sequence[Packet],
        idr: Optional[bool] = None,
    ):
        """Decode one frame; returns ``(central, side1_view, side2_view, sides)``."""
        flag = self.frame_is_idr(list(packets1) + list(packets2), self.grid.n)
        if flag is None:
            flag = bool(idr)
        if flag:
            self.state.previous_central = None
        side1 = self.decode_description(packets1, frame_index, 0)
        side2 = self.decode_description(packets2, frame_index, 1)
        views = (self.conceal(side1), self.conceal(side2))
        central = self.merge_central(side1, side2)
        return central, views[0], views[1], (side1, side2)


def decode_sequence(
    frame_packets: Sequence[Tuple[Sequence[Packet], Sequence[Packet]]],
    grid: CtuGrid,
    principal: Tuple[np.ndarray, np.ndarray],
    idr_frames=None,
    orig_size=None,
):
    """Decode a whole sequence; returns ``(central pictures, error log)``.

    ``idr_frames`` is only consulted for frames where no header survived.
    """
    dec = MdcDecoder(grid, principal, orig_size)
    idr_frames = set(idr_frames or ())
    out = []
    for f, (p1, p2) in enumerate(frame_packets):
        central, *_ = dec.decode_frame(f, p1, p2, idr=f in idr_frames)
        out.append(central)
    return out, dec.state.error_log


def write_error_log(path, events: Sequence[ErrorEvent]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ERROR_LOG_COLUMNS)
        for e in events:
            w.writerow([e.frame, e.desc, e.nalu, e.first_ctu, e.cause])
