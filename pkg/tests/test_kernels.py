"""JIT and pure-numpy kernel flavours must agree."""

import numpy as np
import pytest

from fxppo import kernels

pytestmark = pytest.mark.skipif(not kernels.HAS_NUMBA, reason="numba unavailable")

rng = np.random.default_rng(2024)


def test_dense_rows_flavours_agree():
    x = rng.normal(size=(11, 7))
    w = rng.normal(size=(7, 5))
    b = rng.normal(size=5)
    for act in (0, 1, 2, 3):
        y_nb, pre_nb = kernels.dense_rows_forward_nb(x, w, b, act)
        y_py, pre_py = kernels.dense_rows_forward_py(x, w, b, act)
        assert np.allclose(y_nb, y_py, atol=1e-14)
        dy = rng.normal(size=y_nb.shape)
        out_nb = kernels.dense_rows_backward_nb(x, pre_nb, y_nb, w, act, dy)
        out_py = kernels.dense_rows_backward_py(x, pre_py, y_py, w, act, dy)
        for a, b_ in zip(out_nb, out_py):
            assert np.allclose(a, b_, atol=1e-13)


def test_dense_gemm_flavours_agree():
    x = rng.normal(size=(9, 6))
    w = rng.normal(size=(6, 4))
    b = rng.normal(size=4)
    for act in (0, 1, 2, 3):
        y_nb, pre_nb = kernels.dense_gemm_forward_nb(x, w, b, act)
        y_py, pre_py = kernels.dense_gemm_forward_py(x, w, b, act)
        assert np.allclose(y_nb, y_py, atol=1e-14)
        dy = rng.normal(size=y_nb.shape)
        out_nb = kernels.dense_gemm_backward_nb(x, pre_nb, y_nb, w, act, dy)
        out_py = kernels.dense_gemm_backward_py(x, pre_py, y_py, w, act, dy)
        for a, b_ in zip(out_nb, out_py):
            assert np.allclose(a, b_, atol=1e-13)


def test_lstm_flavours_agree():
    T, n_in, H = 13, 4, 6
    x = rng.normal(size=(T, n_in))
    resets = (rng.random(T) < 0.2).astype(np.uint8)
    resets[0] = 1
    h0 = rng.normal(size=H)
    c0 = rng.normal(size=H)
    wx = rng.normal(size=(n_in, 4 * H)) * 0.4
    wh = rng.normal(size=(H, 4 * H)) * 0.4
    b = rng.normal(size=4 * H) * 0.2
    fwd_nb = kernels.lstm_seq_forward_nb(x, resets, h0, c0, wx, wh, b)
    fwd_py = kernels.lstm_seq_forward_py(x, resets, h0, c0, wx, wh, b)
    for a, b_ in zip(fwd_nb, fwd_py):
        assert np.allclose(a, b_, atol=1e-14)
    hs, cs, tanhc, gates, hprev, cprev, _, _ = fwd_nb
    dh_out = rng.normal(size=(T, H))
    dh_fin = rng.normal(size=H)
    dc_fin = rng.normal(size=H)
    bwd_nb = kernels.lstm_seq_backward_nb(
        x, resets, gates, cs, tanhc, hprev, cprev, wx, wh, dh_out, dh_fin, dc_fin
    )
    bwd_py = kernels.lstm_seq_backward_py(
        x, resets, gates, cs, tanhc, hprev, cprev, wx, wh, dh_out, dh_fin, dc_fin
    )
    for a, b_ in zip(bwd_nb, bwd_py):
        assert np.allclose(a, b_, atol=1e-13)


def test_kmeans_flavours_agree():
    pts = rng.normal(size=(150, 12))
    cents = rng.normal(size=(8, 12))
    lab_nb, in_nb = kernels.kmeans_assign_nb(pts, cents)
    lab_py, in_py = kernels.kmeans_assign_py(pts, cents)
    assert np.array_equal(lab_nb, lab_py)
    assert in_nb == pytest.approx(in_py, rel=1e-12)
    c_nb, n_nb = kernels.kmeans_update_nb(pts, lab_nb, 8)
    c_py, n_py = kernels.kmeans_update_py(pts, lab_py, 8)
    assert np.array_equal(n_nb, n_py)
    assert np.allclose(c_nb, c_py, atol=1e-13)


def test_kmeans_update_marks_empty_clusters_nan():
    pts = np.array([[0.0, 0.0], [1.0, 1.0]])
    labels = np.array([0, 0], dtype=np.int64)
    for update in (kernels.kmeans_update_nb, kernels.kmeans_update_py):
        cents, counts = update(pts, labels, 2)
        assert counts.tolist() == [2, 0]
        assert np.allclose(cents[0], [0.5, 0.5])
        assert np.all(np.isnan(cents[1]))
