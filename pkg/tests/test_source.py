import numpy as np
import pytest

from mdclab.errors import SourceError
from mdclab.source import (
    FramePlane,
    SequenceSource,
    box_origin,
    load_raw_sequence,
    open_source,
    pad_to_multiple,
    write_raw_sequence,
)


def test_gradient_frame_zero_is_x_plus_y():
    frames = open_source(SequenceSource("synthetic-gradient", frame_count=2))
    yy, xx = np.mgrid[0:64, 0:64]
    assert np.array_equal(frames[0].samples, (xx + yy) % 256)
    assert np.array_equal(frames[1].samples, (xx + yy + 1) % 256)


def test_noise_is_seeded():
    src = SequenceSource("synthetic-noise", frame_count=3, seed=7)
    a = open_source(src)
    b = open_source(src)
    assert all(x.samples.tobytes() == y.samples.tobytes() for x, y in zip(a, b))
    c = open_source(SequenceSource("synthetic-noise", frame_count=3, seed=8))
    assert a[0].samples.tobytes() != c[0].samples.tobytes()


def test_moving_box_shifts_by_motion():
    src = SequenceSource(frame_count=4, noise_sigma=0.0)
    frames = open_source(src)
    for t in range(3):
        (x0, y0), (x1, y1) = box_origin(src, t), box_origin(src, t + 1)
        assert (x1 - x0, y1 - y0) == (2, 0)
        b = src.box_size
        now = frames[t].samples[y0 : y0 + b, x0 : x0 + b]
        nxt = frames[t + 1].samples[y1 : y1 + b, x1 : x1 + b]
        assert np.array_equal(now, nxt)


def test_raw_file_exact_size(tmp_path):
    frames = open_source(SequenceSource("synthetic-noise", frame_count=10, seed=1))
    path = tmp_path / "seq.yuv"
    write_raw_sequence(path, frames)
    back = load_raw_sequence(path, 64, 64, 10)
    assert len(back) == 10
    assert all(f == g for f, g in zip(frames, back))


def test_raw_file_padded_to_ctu_multiple(tmp_path):
    rng = np.random.default_rng(3)
    planes = [rng.integers(0, 256, (60, 60), dtype=np.uint8) for _ in range(2)]
    path = tmp_path / "odd.yuv"
    write_raw_sequence(path, planes)
    frames = load_raw_sequence(path, 60, 60, 2, ctu_size=16)
    assert frames[0].samples.shape == (64, 64)
    assert (frames[0].orig_width, frames[0].orig_height) == (60, 60)
    assert np.array_equal(frames[1].cropped(), planes[1])
    # edge replication fills the padding
    assert np.array_equal(frames[0].samples[60:, :60], np.repeat(planes[0][-1:], 4, axis=0))


def test_raw_file_too_short(tmp_path):
    path = tmp_path / "short.yuv"
    write_raw_sequence(path, open_source(SequenceSource("synthetic-noise", frame_count=3)))
    with pytest.raises(SourceError, match="too short"):
        load_raw_sequence(path, 64, 64, 10)


def test_unreadable_and_degenerate_inputs(tmp_path):
    with pytest.raises(SourceError):
        load_raw_sequence(tmp_path / "missing.yuv", 64, 64, 1)
    with pytest.raises(SourceError):
        load_raw_sequence(tmp_path / "missing.yuv", 0, 64, 1)
    with pytest.raises(SourceError):
        open_source(SequenceSource("synthetic-plasma"))
    with pytest.raises(SourceError):
        open_source(SequenceSource("raw-file"))


def test_frame_plane_is_read_only():
    f = pad_to_multiple(np.zeros((16, 16), np.uint8), 16)
    with pytest.raises(ValueError):
        f.samples[0, 0] = 1
    assert f == FramePlane(np.zeros((16, 16), np.uint8))
