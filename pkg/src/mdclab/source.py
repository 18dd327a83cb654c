"""Frame sources: raw planar YUV files and deterministic synthetic sequences.

Only luma is used.  Every frame is padded by edge replication to a multiple
of the CTU size; the original dimensions are kept so that quality metrics can
be computed on the uncropped region only.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .errors import SourceError

DEFAULT_CTU_SIZE = 16

SYNTHETIC_KINDS = ("synthetic-gradient", "synthetic-noise", "synthetic-moving-box")


@dataclass(frozen=True, eq=False)
class FramePlane:
    """One 8-bit luma picture.

    ``samples`` is a read-only ``(height, width)`` uint8 array.  ``orig_width``
    and ``orig_height`` describe the region that existed before padding.
    """

    samples: np.ndarray
    orig_width: int = 0
    orig_height: int = 0

    def __post_init__(self):
        s = np.ascontiguousarray(self.samples, dtype=np.uint8)
        if s.ndim != 2:
            raise SourceError(f"expected a 2-D luma plane, got shape {s.shape}")
        if s.shape[0] == 0 or s.shape[1] == 0:
            raise SourceError("zero-dimension frame")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        if not self.orig_width:
            object.__setattr__(self, "orig_width", s.shape[1])
        if not self.orig_height:
            object.__setattr__(self, "orig_height", s.shape[0])

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    def cropped(self) -> np.ndarray:
        return self.samples[: self.orig_height, : self.orig_width]

    def __eq__(self, other):
        if not isinstance(other, FramePlane):
            return NotImplemented
        return (
            self.orig_width == other.orig_width
            and self.orig_height == other.orig_height
            and np.array_equal(self.samples, other.samples)
        )


@dataclass(frozen=True)
class SequenceSource:
    kind: str = "synthetic-moving-box"
    frame_count: int = 30
    width: int = 64
    height: int = 64
    seed: int = 0
    path: Optional[str] = None
    # moving-box parameters
    motion: Tuple[int, int] = (2, 0)
    box_size: int = 24
    noise_sigma: float = 2.0


def pad_to_multiple(plane: np.ndarray, ctu_size: int) -> FramePlane:
    h, w = plane.shape
    if h == 0 or w == 0:
        raise SourceError("zero-dimension frame")
    ph = -h % ctu_size
    pw = -w % ctu_size
    padded = np.pad(plane, ((0, ph), (0, pw)), mode="edge") if ph or pw else plane
    return FramePlane(padded, orig_width=w, orig_height=h)


def load_raw_sequence(
    path, width: int, height: int, count: int, ctu_size: int = DEFAULT_CTU_SIZE
) -> List[FramePlane]:
    """Read ``count`` luma planes from a headerless planar 4:2:0 file."""
    if width <= 0 or height <= 0:
        raise SourceError("zero-dimension frame")
    luma = width * height
    chroma = 2 * ((width + 1) // 2) * ((height + 1) // 2)
    frame_bytes = luma + chroma
    try:
        size = os.path.getsize(path)
        with open(path, "rb") as fh:
            data = fh.read(frame_bytes * count)
    except OSError as exc:
        raise SourceError(f"unreadable file {path!r}: {exc}") from exc
    if size < frame_bytes * count or len(data) < frame_bytes * count:
        raise SourceError(
            f"file too short: {path!r} holds {size // frame_bytes} frames, {count} requested"
        )
    frames = []
    for k in range(count):
        off = k * frame_bytes
        y = np.frombuffer(data, dtype=np.uint8, count=luma, offset=off)
        frames.append(pad_to_multiple(y.reshape(height, width), ctu_size))
    return frames


def write_raw_sequence(path, frames) -> None:
    """Write frames as planar 4:2:0 with neutral chroma (for round-trip tooling)."""
    with open(path, "wb") as fh:
        for f in frames:
            y = f.cropped() if isinstance(f, FramePlane) else np.asarray(f, np.uint8)
            h, w = y.shape
            fh.write(np.ascontiguousarray(y, dtype=np.uint8).tobytes())
            fh.write(bytes([128]) * (2 * ((w + 1) // 2) * ((h + 1) // 2)))


def write_pgm(path, frame: FramePlane) -> None:
    y = frame.cropped()
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (y.shape[1], y.shape[0]))
        fh.write(np.ascontiguousarray(y).tobytes())


def _gradient(src: SequenceSource) -> List[np.ndarray]:
    yy, xx = np.mgrid[0 : src.height, 0 : src.width]
    return [((xx + yy + t) % 256).astype(np.uint8) for t in range(src.frame_count)]


def _noise(src: SequenceSource) -> List[np.ndarray]:
    rng = np.random.default_rng(src.seed)
    return [
        rng.integers(0, 256, size=(src.height, src.width), dtype=np.uint8)
        for _ in range(src.frame_count)
    ]


def box_origin(src: SequenceSource, t: int) -> Tuple[int, int]:
    """Top-left corner of the moving box in frame ``t`` (wraps around the frame)."""
    dx, dy = src.motion
    x0 = (src.width // 8 + dx * t) % src.width
    y0 = (src.height // 4 + dy * t) % src.height
    return x0, y0


def _moving_box(src: SequenceSource) -> List[np.ndarray]:
    rng = np.random.default_rng(src.seed)
    h, w = src.height, src.width
    yy, xx = np.mgrid[0:h, 0:w]
    # static low-frequency background with fine seeded texture
    phase = rng.uniform(0, 2 * np.pi, size=2)
    background = (
        90
        + 30 * np.sin(2 * np.pi * xx / 37.0 + phase[0])
        + 25 * np.cos(2 * np.pi * yy / 29.0 + phase[1])
        + rng.normal(0.0, 6.0, size=(h, w))
    )
    b = min(src.box_size, h, w)
    by, bx = np.mgrid[0:b, 0:b]
    box = 205 + 30 * (((bx // 4) + (by // 4)) % 2) + (bx - by) / 2.0
    frames = []
    for t in range(src.frame_count):
        img = background.copy()
        x0, y0 = box_origin(src, t)
        rows = (y0 + np.arange(b)) % h
        cols = (x0 + np.arange(b)) % w
        img[np.ix_(rows, cols)] = box
        if src.noise_sigma > 0:
            img = img + rng.normal(0.0, src.noise_sigma, size=(h, w))
        frames.append(np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8))
    return frames


def generate_synthetic(
    source: SequenceSource, ctu_size: int = DEFAULT_CTU_SIZE
) -> List[FramePlane]:
    if source.width <= 0 or source.height <= 0:
        raise SourceError("zero-dimension frame")
    if source.frame_count < 0:
        raise SourceError("negative frame count")
    kinds = {
        "synthetic-gradient": _gradient,
        "synthetic-noise": _noise,
        "synthetic-moving-box": _moving_box,
    }
    try:
        gen = kinds[source.kind]
    except KeyError:
        raise SourceError(f"unknown synthetic kind {source.kind!r}") from None
    return [pad_to_multiple(p, ctu_size) for p in gen(source)]


def open_source(source: SequenceSource, ctu_size: int = DEFAULT_CTU_SIZE) -> List[FramePlane]:
    if source.kind == "raw-file":
        if not source.path:
            raise SourceError("raw-file source needs a path")
        return load_raw_sequence(
            source.path, source.width, source.height, source.frame_count, ctu_size
        )
    return generate_synthetic(source, ctu_size)
