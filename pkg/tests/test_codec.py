import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.fft import dctn, idctn

from mdclab import entropy
from mdclab.codec import (
    INTER,
    INTRA,
    CtuGrid,
    QuantParams,
    ResidualCtu,
    forward_transform,
    inverse_transform,
    levels_from_scan,
    measure,
    predict_ctu,
    psnr,
    quant_step,
    quantize,
    quantize_and_code,
    reconstruct_block,
    reconstruct_ctu,
)
from mdclab.errors import DegenerateGrid, DimensionMismatch, MissingReference
from mdclab.rdmodel import DEFAULT_SWEEP
from mdclab.source import FramePlane, SequenceSource, open_source

from oracles import sad_search


def _residual(src, pred, mode=INTER, mv=(0, 0), dc=0, index=0):
    src = np.asarray(src, dtype=np.uint8)
    pred = np.asarray(pred, dtype=np.int32)
    coeffs = forward_transform(src.astype(np.float64) - pred)
    return ResidualCtu(index, coeffs, mode, mv, dc, pred, src)


def test_grid_shape_and_validation():
    g = CtuGrid.for_frame(FramePlane(np.zeros((64, 48), np.uint8)))
    assert (g.cols, g.rows, g.n) == (3, 4, 12)
    assert g.origin(4) == (16, 16)
    assert g.row_col(5) == (1, 2)
    with pytest.raises(DegenerateGrid):
        CtuGrid.for_frame(FramePlane(np.zeros((16, 16), np.uint8)))
    with pytest.raises(ValueError):
        CtuGrid(12, 2, 2)


def test_quant_step_follows_six_qp_doubling():
    assert quant_step(4) == 1.0
    assert quant_step(10) == 2.0
    assert math.isclose(quant_step(22), 8.0)
    assert QuantParams(28).step == 16.0
    with pytest.raises(ValueError):
        QuantParams(52)


def test_transform_is_invertible():
    rng = np.random.default_rng(0)
    x = rng.normal(0, 50, (16, 16))
    assert np.max(np.abs(inverse_transform(forward_transform(x)) - x)) < 1e-9
    # same basis as the orthonormal DCT-II in scipy
    assert np.allclose(forward_transform(x), dctn(x, norm="ortho"), atol=1e-9)


def test_zero_residual_costs_only_end_of_block():
    flat = np.full((16, 16), 77, np.uint8)
    for qp in (0, 22, 51):
        coded = quantize_and_code(_residual(flat, flat), qp)
        assert not coded.levels.any()
        assert coded.bits - entropy.header_length(INTER, (0, 0)) == 1
        assert coded.distortion == 0
        assert np.array_equal(coded.reconstruction, flat)


def test_step_one_levels_are_rounded_coefficients():
    c = np.array([[0.5, -0.5, 1.49], [2.5, -2.51, 0.0], [3.0, 0.49, -0.49]])
    assert quantize(c, 4).tolist() == [[1, -1, 1], [3, -3, 0], [3, 0, 0]]


def test_exact_multiple_of_step_is_lossless():
    c = np.zeros((16, 16))
    c[0, 1] = 10.0
    levels = quantize(c, 10)
    assert levels[0, 1] == 5 and np.count_nonzero(levels) == 1
    assert math.isclose(levels[0, 1] * quant_step(10), 10.0)


def test_reconstruction_identity_and_clamp():
    pred = np.arange(256).reshape(16, 16) % 200
    zero = np.zeros((16, 16), dtype=np.int64)
    assert np.array_equal(reconstruct_block(zero, 30, pred), pred)
    # uniform +20 on a prediction of 250 saturates at 255; DC of a flat 20 is 20 * 16
    levels = zero.copy()
    levels[0, 0] = 320
    out = reconstruct_block(levels, 4, np.full((16, 16), 250))
    assert (out == 255).all()
    levels[0, 0] = -320
    assert (reconstruct_block(levels, 4, np.full((16, 16), 5)) == 0).all()


def _oracle_roundtrip(src, pred, qp):
    """Quantize-reconstruct with scipy's DCT and explicit half-away rounding."""
    coeffs = dctn(src.astype(np.float64) - pred, norm="ortho")
    step = 2.0 ** ((qp - 4) / 6.0)
    lv = np.sign(coeffs) * np.floor(np.abs(coeffs) / step + 0.5)
    raw = idctn(lv * step, norm="ortho") + pred
    rec = np.clip(np.sign(raw) * np.floor(np.abs(raw) + 0.5), 0, 255)
    coeff_err = float(((coeffs - lv * step) ** 2).sum())
    return int(((rec - src) ** 2).sum()), coeff_err


@pytest.mark.parametrize("seed", range(5))
def test_step_one_roundtrip_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    src = rng.integers(0, 256, (16, 16))
    pred = rng.integers(0, 256, (16, 16))
    coded = quantize_and_code(_residual(src, pred), 4)
    expected, coeff_err = _oracle_roundtrip(src, pred, 4)
    assert coded.distortion == expected
    # at step 1 every coefficient is off by at most 1/2
    assert coeff_err <= 256 * 0.25
    assert coded.distortion <= 256 * 0.25


def test_measure_matches_full_coding(box_frames):
    g = CtuGrid.for_frame(box_frames[0])
    for i in range(g.n):
        r = predict_ctu(box_frames[2], box_frames[1], i, g)
        for qp in DEFAULT_SWEEP:
            coded = quantize_and_code(r, qp)
            assert measure(r, qp) == (coded.bits, coded.distortion)
            assert coded.bits <= 8 * len(coded.payload) < coded.bits + 8


def test_payload_decodes_to_levels(box_frames):
    g = CtuGrid.for_frame(box_frames[0])
    r = predict_ctu(box_frames[1], box_frames[0], 5, g)
    coded = quantize_and_code(r, 27)
    reader = entropy.BitReader(coded.payload)
    mode, dc, mv, scan = entropy.read_ctu_syntax(reader, 256)
    assert (mode, mv) == (coded.mode, coded.mv)
    assert np.array_equal(levels_from_scan(scan, 16), coded.levels)
    assert np.array_equal(reconstruct_ctu(coded, r.prediction), coded.reconstruction)


def test_bits_non_increasing_over_sweep():
    frames = open_source(SequenceSource("synthetic-gradient", frame_count=3))
    frames += open_source(SequenceSource(frame_count=3, seed=5))
    for t in range(1, len(frames)):
        g = CtuGrid.for_frame(frames[t])
        for i in range(g.n):
            r = predict_ctu(frames[t], frames[t - 1], i, g)
            bits = [measure(r, q)[0] for q in DEFAULT_SWEEP]
            assert all(b1 >= b2 for b1, b2 in zip(bits, bits[1:]))


def test_distortion_is_not_always_monotone_in_qp():
    # a ramp CTU coded intra: a coefficient that lands near a multiple of the
    # coarser step reconstructs better than at the finer one
    g = CtuGrid.for_frame(open_source(SequenceSource("synthetic-gradient", frame_count=1))[0])
    frame = open_source(SequenceSource("synthetic-gradient", frame_count=1))[0]
    r = predict_ctu(frame, None, 15, g)
    assert measure(r, 37) == (26, 752)
    assert measure(r, 42) == (22, 282)


@settings(max_examples=60, deadline=None)
@given(arrays(np.int64, 256, elements=st.integers(-2, 2)), st.integers(-300, 300))
def test_per_coefficient_error_at_most_half_step(lv_noise, scale):
    coeffs = lv_noise.reshape(16, 16) * 7.3 + scale / 10.0
    for qp in (4, 22, 37):
        step = quant_step(qp)
        err = np.abs(coeffs - quantize(coeffs, qp) * step)
        assert err.max() <= step / 2 + 1e-9


def test_static_pair_predicts_zero_motion(box_frames):
    f = box_frames[3]
    g = CtuGrid.for_frame(f)
    for i in range(g.n):
        r = predict_ctu(f, f, i, g)
        assert r.mode == INTER and r.mv == (0, 0)
        assert np.abs(r.coefficients).max() < 1e-9


def test_moving_box_interior_finds_shift_against_oracle():
    src = SequenceSource(frame_count=3, noise_sigma=0.0)
    frames = open_source(src)
    g = CtuGrid.for_frame(frames[0])
    # box covers x 10..33, y 16..39 in frame 1: CTU 5 at (16, 16) is inside
    r = predict_ctu(frames[1], frames[0], 5, g, mode=INTER)
    assert r.mv == (-2, 0)
    cands = sad_search(g.block(frames[1].samples, 5), frames[0].samples, 16, 16, 4)
    best = min(s for s, _ in cands)
    assert best == 0 and [mv for s, mv in cands if s == best] == [(-2, 0)]


def test_moving_box_with_noise_still_tracks():
    frames = open_source(SequenceSource(frame_count=2))
    g = CtuGrid.for_frame(frames[0])
    r = predict_ctu(frames[1], frames[0], 5, g)
    cands = sad_search(g.block(frames[1].samples, 5), frames[0].samples, 16, 16, 4)
    best_sad, best_mv = min(cands, key=lambda c: (c[0], abs(c[1][0]) + abs(c[1][1])))
    assert r.mode == INTER and r.mv == best_mv == (-2, 0)


def test_first_frame_is_intra_dc(box_frames):
    f = box_frames[0]
    g = CtuGrid.for_frame(f)
    r = predict_ctu(f, None, 6, g)
    blk = g.block(f.samples, 6).astype(np.float64)
    assert r.mode == INTRA and r.dc == int(np.floor(blk.mean() + 0.5))
    assert np.allclose(inverse_transform(r.coefficients), blk - r.dc, atol=1e-9)
    with pytest.raises(MissingReference):
        predict_ctu(f, None, 0, g, mode=INTER)


def test_psnr_conventions():
    a = FramePlane(np.zeros((16, 16), np.uint8))
    assert psnr(a, a) == 99.0
    assert psnr(a, FramePlane(np.full((16, 16), 255, np.uint8))) == 0.0
    b = FramePlane(np.full((16, 16), 16, np.uint8))
    assert math.isclose(psnr(a, b), 10 * math.log10(255**2 / 256))
    assert round(psnr(a, b), 2) == 24.05
    with pytest.raises(DimensionMismatch):
        psnr(a, FramePlane(np.zeros((32, 16), np.uint8), 16, 32))


def test_psnr_ignores_padding():
    orig = FramePlane(np.zeros((16, 16), np.uint8), 12, 12)
    dec = np.zeros((16, 16), np.uint8)
    dec[12:, :] = 200
    assert psnr(orig, FramePlane(dec, 12, 12)) == 99.0
