from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gdn import dsp
from gdn.dsp import BandSpec
from gdn.errors import DataError, NumericError, UsageError

# Published db6 reconstruction low-pass taps (Daubechies' table, as shipped by
# common wavelet libraries), quoted to ~1e-12.
DB6_REC_LO_TABLE = [
    0.11154074335008017, 0.4946238903983854, 0.7511339080215775, 0.3152503517092432,
    -0.22626469396516913, -0.12976686756709563, 0.09750160558707936, 0.02752286553001629,
    -0.031582039318031156, 0.0005538422009938016, 0.004777257511010651, -0.00107730108499558,
]


def reference_dwt(x, lo, hi):
    """Textbook filter bank: half-point symmetric extension, full convolution, keep odd samples."""
    f = len(lo)
    n = len(x)
    ext = np.concatenate([x[: f - 1][::-1], x, x[::-1][: f - 1]])
    ca = np.convolve(ext, lo)[f - 1 : f - 1 + n + f - 1][1::2]
    cd = np.convolve(ext, hi)[f - 1 : f - 1 + n + f - 1][1::2]
    return ca, cd


# -- similarity and neighbours ---------------------------------------------------

def test_cosine_similarity_cases():
    a = np.array([1.0, 2.0, -3.0])
    assert dsp.cosine_similarity(a, a) == pytest.approx(1.0)
    assert dsp.cosine_similarity(a, -a) == pytest.approx(-1.0)
    assert dsp.cosine_similarity([1, 0], [0, 1]) == 0.0


def test_cosine_similarity_rejects_zero_vector():
    with pytest.raises(NumericError):
        dsp.cosine_similarity([0.0, 0.0], [1.0, 2.0])


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, 8, elements=st.floats(-1e3, 1e3)),
    arrays(np.float64, 8, elements=st.floats(-1e3, 1e3)),
    st.floats(1e-3, 1e3),
)
def test_cosine_similarity_properties(a, b, alpha):
    if np.linalg.norm(a) < 1e-6 or np.linalg.norm(b) < 1e-6:
        return
    r = dsp.cosine_similarity(a, b)
    assert abs(r) <= 1.0 + 1e-12
    assert r == pytest.approx(dsp.cosine_similarity(b, a), abs=1e-12)
    assert r == pytest.approx(dsp.cosine_similarity(alpha * a, b), abs=1e-9)


def brute_force_neighbors(x, k):
    c = x.shape[0]
    rho = np.array([[dsp.cosine_similarity(x[i], x[j]) for j in range(c)] for i in range(c)])
    out = []
    for a in range(c):
        cands = sorted((j for j in range(c) if j != a), key=lambda j: (-round(rho[a, j], 12), j))
        out.append(cands[:k])
    return np.array(out)


@pytest.mark.parametrize("c", [2, 3, 5, 9, 16])
def test_select_neighbors_matches_brute_force(rng, c):
    x = rng.standard_normal((c, 200))
    for k in range(1, c):
        stack, nbrs = dsp.select_neighbors(x, k)
        np.testing.assert_array_equal(nbrs, brute_force_neighbors(x, k))
        assert stack.shape == (c, k + 1, 200)
        np.testing.assert_array_equal(stack[:, 0], x)
        for a in range(c):
            assert a not in nbrs[a]
            np.testing.assert_array_equal(stack[a, 1:], x[nbrs[a]])


def test_neighbor_of_sine_twin():
    t = np.arange(500) / 250.0
    s = np.sin(2 * np.pi * 3 * t)
    x = np.stack([s, s, np.cos(2 * np.pi * 3 * t), np.random.default_rng(1).standard_normal(500)])
    _, nbrs = dsp.select_neighbors(x, 1)
    assert nbrs[0, 0] == 1


def test_equal_channels_fall_back_to_index_order():
    x = np.tile(np.linspace(1.0, 2.0, 50), (5, 1))
    _, nbrs = dsp.select_neighbors(x, 3)
    np.testing.assert_array_equal(nbrs, [[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2], [0, 1, 2]])


def test_three_channels_k2_picks_both_others(rng):
    _, nbrs = dsp.select_neighbors(rng.standard_normal((3, 40)), 2)
    for a in range(3):
        assert sorted(nbrs[a]) == sorted({0, 1, 2} - {a})


def test_select_neighbors_k_out_of_range(rng):
    x = rng.standard_normal((4, 20))
    for k in (0, 4):
        with pytest.raises(UsageError):
            dsp.select_neighbors(x, k)


# -- window and band-pass --------------------------------------------------------

def test_hamming_window_values():
    w = dsp.hamming_window(101)
    assert w[0] == pytest.approx(0.08)
    assert w[50] == pytest.approx(1.0)
    np.testing.assert_allclose(w, w[::-1], atol=1e-15)
    np.testing.assert_allclose(dsp.hamming_window(64), np.hamming(64), atol=1e-15)
    with pytest.raises(UsageError):
        dsp.hamming_window(1)


def interior(n):
    return slice(int(np.ceil(0.05 * n)), int(np.floor(0.95 * n)) + 1)


def test_bandpass_rejects_20hz():
    fs, n = 250, 2500
    x = np.sin(2 * np.pi * 20 * np.arange(n) / fs)
    y = dsp.bandpass_dft(x, fs, BandSpec(4, 14))
    sl = interior(n)
    assert np.sum(y[sl] ** 2) / np.sum(x[sl] ** 2) < 1e-6


def test_bandpass_passes_bin_aligned_10hz():
    fs, n = 250, 2500
    for phase in (0.0, 0.7, 2.1):
        x = np.sin(2 * np.pi * 10 * np.arange(n) / fs + phase)
        y = dsp.bandpass_dft(x, fs, BandSpec(4, 14))
        sl = interior(n)
        assert np.linalg.norm(y[sl] - x[sl]) / np.linalg.norm(x[sl]) < 1e-6
        assert y.shape == x.shape


def test_bandpass_zero_and_linearity(rng):
    assert np.all(dsp.bandpass_dft(np.zeros(300), 250) == 0)
    a, b = rng.standard_normal((2, 500))
    np.testing.assert_allclose(
        dsp.bandpass_dft(2 * a - b, 250), 2 * dsp.bandpass_dft(a, 250) - dsp.bandpass_dft(b, 250), atol=1e-9
    )


def test_bandpass_idempotent(rng):
    x = rng.standard_normal(2500)
    once = dsp.bandpass_dft(x, 250)
    twice = dsp.bandpass_dft(once, 250)
    sl = interior(2500)
    assert np.linalg.norm(twice[sl] - once[sl]) / np.linalg.norm(once[sl]) < 1e-9


def test_bandpass_energy_bin_aligned(rng):
    fs, n = 250, 2500
    t = np.arange(n) / fs
    sl = interior(n)
    for _ in range(5):
        freqs = rng.choice(np.arange(1, 60) * 0.5, size=6, replace=False)
        x = sum(rng.uniform(0.2, 1) * np.sin(2 * np.pi * f * t + rng.uniform(0, 6)) for f in freqs)
        y = dsp.bandpass_dft(x, fs)
        assert np.sum(y[sl] ** 2) <= np.sum(x[sl] ** 2) * (1 + 1e-6)


def test_band_mask_inclusive_edges():
    m = dsp.band_mask(2500, 250, BandSpec(4, 14))
    f = np.fft.rfftfreq(2500, 1 / 250)
    assert m[np.argmin(abs(f - 4))] and m[np.argmin(abs(f - 14))]
    assert not m[0] and not m[-1]
    assert m.sum() == int(round((14 - 4) / 0.1)) + 1


def test_band_validation():
    with pytest.raises(UsageError):
        dsp.bandpass_dft(np.ones(100), 20, BandSpec(4, 14))
    with pytest.raises(UsageError):
        BandSpec(14, 4).validate(250)


# -- wavelets --------------------------------------------------------------------

def test_db6_constants_against_table():
    np.testing.assert_allclose(dsp.DB6_REC_LO, DB6_REC_LO_TABLE, atol=1e-11)


def test_db6_filter_properties():
    lo, hi = dsp.DB6_DEC_LO, dsp.DB6_DEC_HI
    assert np.sum(lo**2) == pytest.approx(1.0, abs=1e-14)
    assert np.sum(lo) == pytest.approx(np.sqrt(2), abs=1e-14)
    j = np.arange(12)
    for p in range(6):
        assert abs(np.sum(j**p * hi)) < 1e-10 * max(1, 11**p)
    for shift in range(1, 6):
        assert abs(np.dot(lo[2 * shift :], lo[: -2 * shift])) < 1e-14


@pytest.mark.parametrize("n", [12, 13, 100, 2500, 2560])
def test_coeff_length(n):
    ca, cd = dsp.dwt_db6(np.zeros(n))
    assert ca.shape == cd.shape == ((n + 11) // 2,)
    assert dsp.coeff_length(n) == (n + 11) // 2


def test_known_lengths():
    assert dsp.coeff_length(2500) == 1255
    assert dsp.coeff_length(2560) == 1285


@pytest.mark.parametrize("n", [12, 31, 100, 257, 2500])
def test_dwt_matches_reference_filter_bank(rng, n):
    x = rng.standard_normal(n)
    ca, cd = dsp.dwt_db6(x)
    ra, rd = reference_dwt(x, dsp.DB6_DEC_LO, dsp.DB6_DEC_HI)
    np.testing.assert_allclose(ca, ra, atol=1e-12)
    np.testing.assert_allclose(cd, rd, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(12, 400), st.integers(0, 2**32 - 1))
def test_round_trip_property(n, seed):
    x = np.random.default_rng(seed).standard_normal(n)
    ca, cd = dsp.dwt_db6(x)
    assert np.max(np.abs(dsp.idwt_db6(ca, cd, n) - x)) < 1e-10


def test_batched_dwt_equals_rowwise(rng):
    x = rng.standard_normal((3, 4, 100))
    ca, cd = dsp.dwt_db6(x)
    a0, d0 = dsp.dwt_db6(x[1, 2])
    np.testing.assert_allclose(ca[1, 2], a0, rtol=0, atol=1e-14)
    np.testing.assert_allclose(cd[1, 2], d0, rtol=0, atol=1e-14)
    np.testing.assert_allclose(dsp.idwt_db6(ca, cd, 100), x, atol=1e-12)


def test_lowpass_branch_energy(rng):
    x = rng.standard_normal(2500)
    ca, cd = dsp.dwt_db6(x)
    low = dsp.idwt_db6(ca, np.zeros_like(cd), 2500)
    assert np.sum(low**2) <= np.sum(x**2)
    assert np.all(dsp.idwt_db6(np.zeros(1255), np.zeros(1255), 2500) == 0)


def test_wavelet_errors():
    with pytest.raises(DataError):
        dsp.dwt_db6(np.ones(11))
    with pytest.raises(DataError):
        dsp.idwt_db6(np.ones(10), np.ones(11), 9)
    with pytest.raises(DataError):
        dsp.idwt_db6(np.ones(1255), np.ones(1255), 2400)


# -- segment preprocessing --------------------------------------------------------

def test_featurize_shapes_and_order(rng):
    x = rng.standard_normal((16, 2500))
    f = dsp.featurize(x, 250, 10)
    assert f.s_ca.shape == f.s_cd.shape == (16, 10, 1255)
    assert f.o_ca.shape == f.o_cd.shape == (16, 1255)
    filtered = dsp.bandpass_dft(x, 250)
    np.testing.assert_allclose(f.filtered, filtered)
    _, nbrs = dsp.select_neighbors(filtered, 10)
    np.testing.assert_array_equal(f.neighbors, nbrs)
    ca, cd = dsp.dwt_db6(filtered[nbrs[3]])
    np.testing.assert_allclose(f.s_ca[3], ca)
    np.testing.assert_allclose(f.s_cd[3], cd)
    oa, od = dsp.dwt_db6(filtered[3])
    np.testing.assert_allclose(f.o_ca[3], oa)
    np.testing.assert_allclose(f.o_cd[3], od)
    pairs = f.pairs()
    assert len(pairs) == 16 and pairs[0].length == 1255


def test_modma_shaped_segment():
    x = np.random.default_rng(5).standard_normal((128, 2500))
    f = dsp.featurize(x, 250, 10)
    assert f.s_ca.shape == (128, 10, 1255)


def test_dump_features_round_trip(tmp_path, rng):
    f = dsp.featurize(rng.standard_normal((4, 500)), 250, 2)
    side = dsp.dump_features(f, tmp_path, "seg")
    meta = json.loads(side.read_text())
    assert set(meta) == {"s_ca", "s_cd", "o_ca", "o_cd", "filtered", "neighbors"}
    for name, entry in meta.items():
        arr = np.fromfile(tmp_path / entry["file"], dtype="<f4").reshape(entry["shape"])
        np.testing.assert_array_equal(arr, getattr(f, name).astype(np.float32))
