"""A minimal HEVC-like block codec working at CTU granularity.

Each CTU is predicted either by its own rounded mean (intra DC) or by a
full-pel block of the previous central reconstruction (inter), the residual
goes through a 2-D orthonormal DCT-II over the whole CTU, is quantized with
step ``2 ** ((qp - 4) / 6)`` and entropy coded with exp-Golomb codes.
Encoder and decoder share :func:`reconstruct_block`, so an error-free stream
decodes bit-exactly to the encoder-side reconstruction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np

from . import entropy
from .errors import DegenerateGrid, DimensionMismatch, MissingReference
from .source import FramePlane

QP_MIN = 0
QP_MAX = 51
SEARCH_RANGE = 4
PSNR_CAP = 99.0

INTRA = "intra-dc"
INTER = "inter-previous"


@dataclass(frozen=True)
class CtuGrid:
    ctu_size: int
    cols: int
    rows: int

    def __post_init__(self):
        if self.ctu_size <= 0 or self.ctu_size & (self.ctu_size - 1):
            raise DegenerateGrid(f"CTU size must be a power of two, got {self.ctu_size}")
        if self.cols * self.rows < 2:
            raise DegenerateGrid(f"need at least two CTUs, got {self.cols}x{self.rows}")

    @classmethod
    def for_frame(cls, frame: FramePlane, ctu_size: int = 16) -> "CtuGrid":
        if frame.width % ctu_size or frame.height % ctu_size:
            raise DimensionMismatch(
                f"{frame.width}x{frame.height} is not a multiple of CTU size {ctu_size}"
            )
        return cls(ctu_size, frame.width // ctu_size, frame.height // ctu_size)

    @property
    def n(self) -> int:
        return self.cols * self.rows

    @property
    def width(self) -> int:
        return self.cols * self.ctu_size

    @property
    def height(self) -> int:
        return self.rows * self.ctu_size

    def origin(self, index: int) -> Tuple[int, int]:
        """(x, y) of the top-left sample of CTU ``index`` (row-major)."""
        r, c = divmod(index, self.cols)
        return c * self.ctu_size, r * self.ctu_size

    def block(self, plane: np.ndarray, index: int) -> np.ndarray:
        x, y = self.origin(index)
        s = self.ctu_size
        return plane[y : y + s, x : x + s]

    def row_col(self, index: int) -> Tuple[int, int]:
        return divmod(index, self.cols)


@dataclass(frozen=True)
class QuantParams:
    qp: int

    def __post_init__(self):
        if not QP_MIN <= self.qp <= QP_MAX:
            raise ValueError(f"qp {self.qp} outside [{QP_MIN}, {QP_MAX}]")

    @property
    def step(self) -> float:
        return quant_step(self.qp)


def quant_step(qp: int) -> float:
    return 2.0 ** ((qp - 4) / 6.0)


@lru_cache(maxsize=None)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis; rows are frequencies."""
    k = np.arange(n)[:, None]
    x = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * x + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    m[0, :] = math.sqrt(1.0 / n)
    m.setflags(write=False)
    return m


def forward_transform(block: np.ndarray) -> np.ndarray:
    c = dct_matrix(block.shape[0])
    return c @ np.asarray(block, dtype=np.float64) @ c.T


def inverse_transform(coeffs: np.ndarray) -> np.ndarray:
    c = dct_matrix(coeffs.shape[0])
    return c.T @ coeffs @ c


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True, eq=False)
class ResidualCtu:
    index: int
    coefficients: np.ndarray
    mode: str
    mv: Tuple[int, int]
    dc: int
    prediction: np.ndarray
    source: np.ndarray


@dataclass(frozen=True, eq=False)
class CodedCtu:
    index: int
    qp: int
    levels: np.ndarray
    bits: int
    distortion: int
    mode: str
    mv: Tuple[int, int]
    dc: int
    payload: bytes
    reconstruction: np.ndarray


def motion_search(
    block: np.ndarray, reference: np.ndarray, x: int, y: int, search: int = SEARCH_RANGE
):
    """Exhaustive full-pel SAD search; returns ``(mv, sad, prediction)``.

    Candidates must lie inside the reference.  Ties go to the smaller
    ``|dx| + |dy|``, then to raster order of (dy, dx).
    """
    s = block.shape[0]
    h, w = reference.shape
    src = block.astype(np.int32)
    best = None
    for dy in range(-search, search + 1):
        ry = y + dy
        if ry < 0 or ry + s > h:
            continue
        for dx in range(-search, search + 1):
            rx = x + dx
            if rx < 0 or rx + s > w:
                continue
            cand = reference[ry : ry + s, rx : rx + s]
            sad = int(np.abs(src - cand).sum())
            key = (sad, abs(dx) + abs(dy), dy, dx)
            if best is None or key < best[0]:
                best = (key, (dx, dy))
    (sad, _, _, _), mv = best
    return mv, sad, reference_block(reference, x, y, s, mv)


def reference_block(reference: np.ndarray, x: int, y: int, size: int, mv) -> np.ndarray:
    """Block of ``reference`` displaced by ``mv``, edge-clamped if it leaves the plane."""
    h, w = reference.shape
    ys = np.clip(np.arange(y + mv[1], y + mv[1] + size), 0, h - 1)
    xs = np.clip(np.arange(x + mv[0], x + mv[0] + size), 0, w - 1)
    return reference[np.ix_(ys, xs)]


def intra_dc(block: np.ndarray) -> int:
    return int(round_half_away(block.mean()))


def predict_ctu(
    frame: FramePlane,
    reference: Optional[FramePlane],
    index: int,
    grid: CtuGrid,
    mode: str = "auto",
    search: int = SEARCH_RANGE,
) -> ResidualCtu:
    """Prediction and forward-transformed residual for one CTU.

    ``mode`` is ``"auto"`` (smaller residual SAD wins, inter on ties),
    ``"intra-dc"`` or ``"inter-previous"``.
    """
    src = grid.block(frame.samples, index)
    x, y = grid.origin(index)
    s = grid.ctu_size

    if mode == INTER and reference is None:
        raise MissingReference(f"inter prediction for CTU {index} without a reference")

    dc = intra_dc(src)
    chosen = (INTRA, (0, 0), dc, np.full((s, s), dc, dtype=np.int32))
    if reference is not None and mode != INTRA:
        mv, sad, pred = motion_search(src, reference.samples, x, y, search)
        intra_sad = int(np.abs(src.astype(np.int32) - dc).sum())
        if mode == INTER or sad <= intra_sad:
            chosen = (INTER, mv, 0, pred.astype(np.int32))

    m, mv, dc, pred = chosen
    resid = src.astype(np.float64) - pred
    return ResidualCtu(
        index=index,
        coefficients=forward_transform(resid),
        mode=m,
        mv=mv,
        dc=dc if m == INTRA else 0,
        prediction=pred,
        source=np.array(src, dtype=np.uint8),
    )


def quantize(coefficients: np.ndarray, qp: int) -> np.ndarray:
    return round_half_away(coefficients / quant_step(qp)).astype(np.int64)


def reconstruct_block(levels: np.ndarray, qp: int, prediction: np.ndarray) -> np.ndarray:
    """Dequantize, inverse transform, add prediction, round and clamp to 8 bits."""
    resid = inverse_transform(levels * quant_step(qp))
    out = round_half_away(resid + prediction)
    return np.clip(out, 0, 255).astype(np.uint8)


def _sse(a: np.ndarray, b: np.ndarray) -> int:
    d = a.astype(np.int64) - b.astype(np.int64)
    return int((d * d).sum())


def measure(residual: ResidualCtu, qp: int) -> Tuple[int, int]:
    """``(bits, sse)`` that :func:`quantize_and_code` would produce, without serializing."""
    levels = quantize(residual.coefficients, qp)
    scan = levels.reshape(-1)[entropy.zigzag_order(levels.shape[0])]
    bits = entropy.header_length(residual.mode, residual.mv) + entropy.coefficient_bits(scan)
    rec = reconstruct_block(levels, qp, residual.prediction)
    return bits, _sse(rec, residual.source)


def quantize_and_code(residual: ResidualCtu, qp) -> CodedCtu:
    qp = qp.qp if isinstance(qp, QuantParams) else int(QuantParams(int(qp)).qp)
    levels = quantize(residual.coefficients, qp)
    scan = levels.reshape(-1)[entropy.zigzag_order(levels.shape[0])]
    w = entropy.BitWriter()
    entropy.write_ctu_syntax(w, residual.mode, residual.dc, residual.mv, scan)
    rec = reconstruct_block(levels, qp, residual.prediction)
    return CodedCtu(
        index=residual.index,
        qp=qp,
        levels=levels,
        bits=len(w),
        distortion=_sse(rec, residual.source),
        mode=residual.mode,
        mv=residual.mv,
        dc=residual.dc,
        payload=w.to_bytes(),
        reconstruction=rec,
    )


def reconstruct_ctu(coded: CodedCtu, prediction: np.ndarray) -> np.ndarray:
    return reconstruct_block(coded.levels, coded.qp, prediction)


def levels_from_scan(scan_levels: np.ndarray, size: int) -> np.ndarray:
    levels = np.zeros(size * size, dtype=np.int64)
    levels[entropy.zigzag_order(size)] = scan_levels
    return levels.reshape(size, size)


def psnr(original: FramePlane, decoded: FramePlane) -> float:
    a, b = _crop_pair(original, decoded)
    mse = _sse(a, b) / a.size
    if mse == 0:
        return PSNR_CAP
    return 10.0 * math.log10(255.0 ** 2 / mse)


def mse(original: FramePlane, decoded: FramePlane) -> float:
    a, b = _crop_pair(original, decoded)
    return _sse(a, b) / a.size


def _crop_pair(original: FramePlane, decoded: FramePlane):
    a = original.cropped()
    b = decoded.samples[: original.orig_height, : original.orig_width]
    if a.shape != b.shape or decoded.width < original.orig_width:
        raise DimensionMismatch(f"{a.shape} vs {decoded.samples.shape}")
    if (decoded.orig_width, decoded.orig_height) != (original.orig_width, original.orig_height):
        raise DimensionMismatch("cropped dimensions differ")
    return a, b
