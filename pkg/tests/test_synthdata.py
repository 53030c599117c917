import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from diffscale.errors import ConfigError, DomainError, FormatError, TruncationError
from diffscale.grid import bilinear_resize, block_coarsen, nearest_expand, pixelate
from diffscale.synthdata import (
    WorldConfig,
    bias_pattern,
    blur_truth,
    build_dataset,
    decode_grid,
    degrade_forecast,
    encode_grid,
    error_scale,
    gaussian_random_field,
    gen_static_fields,
    gen_truth_series,
    radial_spectrum,
    read_dataset,
    read_grid,
    smooth_noise,
    split_ranges,
    write_dataset,
    write_grid,
)
from diffscale.verify import assign_bin

SMALL = WorldConfig(S=24, L=6, n_train=12, n_val=3, n_test=5, members=3, seed=4)


@pytest.fixture(scope="module")
def statics():
    return gen_static_fields(WorldConfig(seed=1))


@pytest.fixture(scope="module")
def small_dataset():
    return build_dataset(SMALL)


def test_config_validation():
    with pytest.raises(ConfigError):
        WorldConfig(S=50)
    with pytest.raises(ConfigError):
        WorldConfig(S=24, L=12)
    with pytest.raises(ConfigError):
        WorldConfig(rho=1.0)


def test_static_fields(statics):
    assert abs(statics["land_sea"].mean() - 0.5) < 0.05
    assert statics["land_sea"].min() >= 0 and statics["land_sea"].max() <= 1
    assert statics["orography"].min() >= 0
    again = gen_static_fields(WorldConfig(seed=1))
    for k in statics:
        assert statics[k].tobytes() == again[k].tobytes()


def test_truth_ar1_and_positivity(statics):
    cfg = WorldConfig(seed=1)
    series = gen_truth_series(cfg, statics, 600)
    c = series.coefficients.reshape(600, -1)
    lag1 = np.real(np.sum(c[1:] * np.conj(c[:-1]))) / np.real(np.sum(c[:-1] * np.conj(c[:-1])))
    assert abs(lag1 - cfg.rho) < 0.05
    assert series.fields.min() >= 0
    assert series.fields.max() < 25
    with pytest.raises(DomainError):
        series.at(600.5)


def test_spectral_slope():
    rng = np.random.default_rng(0)
    powers = []
    for _ in range(20):
        ks, p = radial_spectrum(gaussian_random_field(48, 3.0, rng))
        powers.append(p)
    p = np.mean(powers, axis=0)
    sel = (ks >= 2) & (ks <= 16)
    slope = np.polyfit(np.log(ks[sel]), np.log(p[sel]), 1)[0]
    assert abs(slope + 3.0) < 0.5


def test_error_scale_shape():
    cfg = WorldConfig()
    leads = np.linspace(0.01, 46, 200)
    g = error_scale(leads, cfg)
    assert np.all(np.diff(g) > 0)
    assert error_scale(1e-9, cfg) < 1e-9


def test_bias_pattern_sign(statics):
    b = bias_pattern(WorldConfig(), statics)
    sea = statics["land_sea"] < 0.05
    land = statics["land_sea"] > 0.95
    assert b[sea].mean() > 0 > b[land].mean()


def test_degraded_error_grows_across_bins(statics):
    cfg = WorldConfig(seed=1)
    series = gen_truth_series(cfg, statics, 250)
    rng = np.random.default_rng(5)
    maes = []
    for lead in (2, 5, 8, 11, 14):
        errs = []
        for d in range(200):
            truth = series.at(d + 0.0)
            fc = degrade_forecast(truth, lead, 0, cfg, statics, rng)
            base = nearest_expand(bilinear_resize(fc, cfg.S, cfg.S), cfg.S)
            errs.append(np.abs(base - truth).mean())
        maes.append(np.mean(errs))
    assert all(a < b for a, b in zip(maes, maes[1:])), maes
    with pytest.raises(DomainError):
        degrade_forecast(series.at(0.0), 47, 0, cfg, statics, rng)


def test_members_share_systematic_component(statics):
    cfg = WorldConfig(seed=1)
    truth = gen_truth_series(cfg, statics, 2).at(1.0)
    init_error = smooth_noise(cfg.S, np.random.default_rng(0))
    # no clipping for a strictly positive shifted truth so the common part subtracts cleanly
    a = degrade_forecast(truth + 10, 4.0, 0, cfg, statics, np.random.default_rng(1), init_error)
    b = degrade_forecast(truth + 10, 4.0, 1, cfg, statics, np.random.default_rng(2), init_error)
    assert not np.allclose(a, b)
    common = block_coarsen(blur_truth(truth + 10, 4.0, cfg) + error_scale(4.0, cfg) * init_error
                           + bias_pattern(cfg, statics), cfg.L, cfg.L)
    ra, rb = a - common, b - common
    # residuals are independent member noise
    assert abs(np.corrcoef(ra.ravel(), rb.ravel())[0, 1]) < 0.5


def test_forecast_skill_decays(statics):
    cfg = WorldConfig(seed=1)
    series = gen_truth_series(cfg, statics, 160)
    rng = np.random.default_rng(8)
    corr = {}
    for lead in (1, 30):
        f, t = [], []
        for d in range(100):
            truth = series.at(float(d))
            f.append(degrade_forecast(truth, lead, 0, cfg, statics, rng).ravel())
            t.append(pixelate(truth, cfg.L)[:: cfg.S // cfg.L, :: cfg.S // cfg.L].ravel())
        corr[lead] = np.corrcoef(np.concatenate(f), np.concatenate(t))[0, 1]
    assert corr[1] > corr[30]


def test_dataset_structure(small_dataset):
    ds = small_dataset
    inits = {s: ds.init_indices(s) for s in ("train", "val", "test")}
    assert len(inits["test"]) == SMALL.n_test
    assert not (inits["train"] & inits["val"]) and not (inits["val"] & inits["test"])
    assert not (inits["train"] & inits["test"])
    for split in ("train", "val", "test"):
        for r in ds.records(split):
            assert r.lowres_forecast.shape == (SMALL.L, SMALL.L)
            assert r.truth.shape == (SMALL.S, SMALL.S)
            assert r.truth.min() >= 0 and r.lowres_forecast.min() >= 0
            assert 1 <= r.lead <= 46
    test_bins = sorted(assign_bin(g.lead) for g in ds.groups["test"][:6])
    assert test_bins == [1, 2, 3, 4, 5, 6]


def test_split_gap_prevents_shared_valid_times():
    ranges = split_ranges(SMALL)
    for a, b in (("train", "val"), ("val", "test")):
        last_valid = (ranges[a].stop - 1) * SMALL.init_spacing + 46
        assert ranges[b].start * SMALL.init_spacing > last_valid


def test_dataset_deterministic_and_round_trip(small_dataset, tmp_path):
    n1 = write_dataset(small_dataset, tmp_path / "a")
    n2 = write_dataset(build_dataset(SMALL), tmp_path / "b")
    assert n1 == n2 == len(small_dataset.records("train")) + len(small_dataset.records("val")) \
        + len(small_dataset.records("test"))
    ma = (tmp_path / "a" / "manifest.txt").read_bytes()
    assert ma == (tmp_path / "b" / "manifest.txt").read_bytes()
    assert len(ma.decode().splitlines()) == n1
    back = read_dataset(tmp_path / "a", SMALL)
    for split in ("train", "val", "test"):
        for g, h in zip(small_dataset.groups[split], back.groups[split]):
            assert (g.init_index, g.lead) == (h.init_index, h.lead)
            assert g.forecasts.tobytes() == h.forecasts.tobytes()
            assert g.truth.tobytes() == h.truth.tobytes()


def test_dynamic_channels_round_trip(tmp_path):
    cfg = WorldConfig(S=24, L=6, n_train=2, n_val=0, n_test=1, members=2, dynamic=True)
    ds = build_dataset(cfg)
    g = ds.groups["train"][0]
    assert g.dynamic.shape == (2, 7, 6, 6)
    write_dataset(ds, tmp_path)
    back = read_dataset(tmp_path, cfg)
    assert back.groups["train"][0].dynamic.tobytes() == g.dynamic.tobytes()


@given(arrays(np.float32, st.tuples(st.integers(1, 3), st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_grid_round_trip_bit_exact(a):
    assert decode_grid(encode_grid(a)).tobytes() == a.tobytes()


def test_grid_file_errors(tmp_path):
    f = np.arange(12, dtype=np.float32).reshape(3, 4)
    write_grid(tmp_path / "g.dsg", f)
    np.testing.assert_array_equal(read_grid(tmp_path / "g.dsg")[0], f)
    buf = encode_grid(f)
    for cut in (2, 10, len(buf) - 3):
        with pytest.raises(TruncationError):
            decode_grid(buf[:cut])
    with pytest.raises(FormatError, match="PNG"):
        decode_grid(b"\x89PNG" + buf[4:])
    with pytest.raises(FormatError):
        decode_grid(buf[:4] + (2).to_bytes(4, "little") + buf[8:])
