import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentcast.dataset import (
    GridField, NormalizationStats, SyntheticConfig, compute_climatology, compute_stats, denormalize,
    generate_synthetic, grid_latitudes, grid_longitudes, latitude_weights, load_constants, load_dataset,
    normalize, paper_catalog, save_dataset, select_key, split_field, synthetic_catalog, synthetic_drivers,
    synthetic_key_indices,
)
from latentcast.errors import (
    CatalogError, DegenerateChannelError, IngestionError, InvalidGridError, ShapeError,
)


def field(data, t0="2001-03-01T00:00:00Z", dt=6.0):
    data = np.asarray(data, dtype=np.float64)
    H, W = data.shape[-2:]
    return GridField(data, grid_latitudes(H), grid_longitudes(W), t0, dt)


# latitude weights ----------------------------------------------------------


def test_latitude_weights_examples():
    assert latitude_weights([0.0]).tolist() == [1.0]
    np.testing.assert_allclose(latitude_weights([-45.0, 45.0]), [1.0, 1.0], rtol=0, atol=1e-15)
    lats = grid_latitudes(32)
    a = latitude_weights(lats)
    i = int(np.argmin(np.abs(lats - 2.8125)))
    assert lats[i] == 2.8125
    assert a[i] == pytest.approx(1.5682742452729694, abs=1e-12)


def test_latitude_weights_loop_oracle():
    lats = grid_latitudes(32)
    cos = [math.cos(v * math.pi / 180) for v in lats]
    mean = sum(cos) / len(cos)
    np.testing.assert_allclose(latitude_weights(lats), [c / mean for c in cos], rtol=0, atol=1e-13)


def test_grid_latitudes_are_cell_centres():
    lats = grid_latitudes(32)
    assert lats[0] == -87.1875 and lats[-1] == 87.1875
    np.testing.assert_allclose(np.diff(lats), 5.625)


@pytest.mark.parametrize("lats", [[90.0], [-90.0, 0.0], [10.0, 95.0]])
def test_latitude_weights_reject_poles(lats):
    with pytest.raises(InvalidGridError):
        latitude_weights(lats)


@given(st.integers(1, 90))
def test_latitude_weights_mean_one_and_symmetric(H):
    a = latitude_weights(grid_latitudes(H))
    assert abs(a.mean() - 1) < 1e-12
    np.testing.assert_allclose(a, a[::-1], atol=1e-12)
    assert (a > 0).all()


# catalog ---------------------------------------------------------------------


def test_paper_catalog_table_indices():
    cat = paper_catalog()
    assert (cat.C, cat.c) == (104, 20)
    assert cat.figure_index("u10m") == 2
    assert cat.figure_index("mslp") == 6
    assert cat.figure_index("z500") == 21
    assert cat.figure_index("t850") == 37
    assert cat.key_names[0] == "u10m"
    assert cat.levels[cat.index("tcwv")] == "integrated"


def test_catalog_validation():
    with pytest.raises(CatalogError):
        synthetic_catalog(3, 4)
    cat = paper_catalog()
    with pytest.raises(CatalogError):
        type(cat)(["a", "b"], ["surface", 500], [0, 0], [True, False])
    with pytest.raises(CatalogError):
        type(cat)(["a", "b"], ["surface", 500], [2], [True, False])


def test_catalog_dict_round_trip():
    cat = paper_catalog()
    assert type(cat).from_dict(json.loads(json.dumps(cat.to_dict()))) == cat


# statistics ------------------------------------------------------------------


def test_stats_constant_channel_names_it():
    x = np.random.default_rng(0).normal(size=(4, 2, 3, 4))
    x[:, 1] = 5.0
    with pytest.raises(DegenerateChannelError, match="x01"):
        compute_stats(field(x), synthetic_catalog(2, 1))


def test_stats_plus_minus_one():
    x = np.ones((2, 1, 2, 2))
    x[1] = -1
    s = compute_stats(field(x))
    assert s.mean.tolist() == [0.0] and s.std.tolist() == [1.0]


def test_stats_two_pass_oracle():
    f, _ = generate_synthetic(SyntheticConfig(seed=7, T=200))
    s = compute_stats(f)
    for ch in range(f.data.shape[1]):
        vals = f.data[:, ch].astype(np.float64).ravel()
        m = sum(vals.tolist()) / vals.size
        var = sum((v - m) ** 2 for v in vals.tolist()) / vals.size
        assert s.mean[ch] == pytest.approx(m, abs=1e-10, rel=1e-12)
        assert s.std[ch] == pytest.approx(math.sqrt(var), rel=1e-10)


def test_stats_doubling_invariance():
    f, _ = generate_synthetic(SyntheticConfig(seed=1, T=40))
    g = GridField(np.concatenate([f.data, f.data]), f.lat, f.lon, f.t0, f.dt_hours)
    a, b = compute_stats(f), compute_stats(g)
    np.testing.assert_allclose(a.mean, b.mean, rtol=1e-12)
    np.testing.assert_allclose(a.std, b.std, rtol=1e-12)


def test_stats_need_two_steps():
    with pytest.raises(Exception):
        compute_stats(field(np.zeros((1, 1, 2, 2))))


def test_normalize_hand_value_and_mean_field():
    s = NormalizationStats(np.array([2.0]), np.array([5.0]))
    assert normalize(field(np.full((1, 1, 1, 1), 12.0)), s).data.item() == 2.0
    assert np.all(normalize(field(np.full((3, 1, 2, 2), 2.0)), s).data == 0)


def test_normalize_channel_mismatch():
    s = NormalizationStats(np.zeros(2), np.ones(2))
    with pytest.raises(ShapeError):
        normalize(field(np.zeros((2, 3, 2, 2))), s)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_normalize_round_trip(seed):
    rng = np.random.default_rng(seed)
    x = field(rng.normal(50, 20, size=(3, 4, 5, 6)))
    s = NormalizationStats(rng.normal(0, 100, 4), rng.uniform(0.01, 100, 4))
    np.testing.assert_allclose(denormalize(normalize(x, s), s).data, x.data, rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(normalize(denormalize(x, s), s).data, x.data, rtol=1e-6, atol=1e-9)


def test_stats_degenerate_type():
    with pytest.raises(DegenerateChannelError):
        NormalizationStats(np.zeros(1), np.zeros(1))


# climatology -----------------------------------------------------------------


def test_climatology_simple():
    assert compute_climatology(field(np.full((5, 1, 2, 2), 3.5))).mean_field.tolist() == [[[3.5, 3.5], [3.5, 3.5]]]
    x = np.zeros((2, 1, 1, 1))
    x[1] = 2
    assert compute_climatology(field(x)).mean_field.item() == 1.0


def test_climatology_seasonal_brute_force():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(8 * 400, 1, 2, 2))
    f = field(x, t0="2005-01-01T00:00:00Z")
    clim = compute_climatology(f, "seasonal")
    groups = {}
    for t in range(f.n_steps):
        groups.setdefault(f.time_at(t).timetuple().tm_yday - 1, []).append(x[t])
    for day, rows in groups.items():
        np.testing.assert_allclose(clim.mean_field[day], np.mean(rows, axis=0), atol=1e-12)
    # leap day missing from the record falls back to the overall mean
    assert 365 not in groups
    np.testing.assert_allclose(clim.mean_field[365], x.mean(axis=0), atol=1e-12)
    ref = clim.for_steps([f.time_at(0), f.time_at(4)])
    np.testing.assert_array_equal(ref[0], clim.mean_field[0])


def test_climatology_bad_mode():
    with pytest.raises(Exception):
        compute_climatology(field(np.zeros((2, 1, 2, 2))), "monthly")


# select / split --------------------------------------------------------------


def test_select_key():
    x = field(np.arange(2 * 4 * 2 * 2, dtype=float).reshape(2, 4, 2, 2))
    cat = synthetic_catalog(4, 4)
    np.testing.assert_array_equal(select_key(x, cat).data, x.data)
    one = type(cat)(cat.names, cat.levels, [2], cat.surface_flags)
    np.testing.assert_array_equal(select_key(x, one).data[:, 0], x.data[:, 2])


def test_select_key_catalog_order():
    cat = paper_catalog()
    x = field(np.zeros((1, 104, 2, 2)))
    x.data[:, 1] = 7.0
    assert np.all(select_key(x, cat).data[:, 0] == 7.0)


def test_split_is_chronological():
    x = field(np.arange(100, dtype=float).reshape(100, 1, 1, 1) * np.ones((1, 1, 2, 2)))
    tr, va, te = split_field(x)
    assert (tr.n_steps, va.n_steps, te.n_steps) == (80, 10, 10)
    assert va.data[0, 0, 0, 0] == 80 and te.t0 == x.time_at(90)


# synthetic -------------------------------------------------------------------


def test_synthetic_bitwise_reproducible():
    cfg = SyntheticConfig(seed=11, T=64)
    a, _ = generate_synthetic(cfg)
    b, _ = generate_synthetic(cfg)
    assert a.data.tobytes() == b.data.tobytes()
    c, _ = generate_synthetic(SyntheticConfig(seed=12, T=64))
    assert a.data.tobytes() != c.data.tobytes()


def test_synthetic_pure_advection():
    cfg = SyntheticConfig(seed=5, T=20, coupling=0, diffusion=0, damping=0, forcing=0, cycle=0)
    f, _ = generate_synthetic(cfg)
    np.testing.assert_allclose(f.data[1:], np.roll(f.data[:-1], 1, axis=-1), rtol=1e-6, atol=1e-4)


def test_synthetic_key_driver_correlation():
    f, cat = generate_synthetic(SyntheticConfig(seed=3))
    assert list(cat.key_indices) == synthetic_key_indices(12, 4) == [0, 3, 6, 9]
    for k, drv in synthetic_drivers(12, 4).items():
        for j in drv:
            r = np.corrcoef(f.data[:, k].ravel(), f.data[:, j].ravel())[0, 1]
            assert abs(r) > 0.5, (k, j, r)


def test_synthetic_shapes_and_validation():
    f, cat = generate_synthetic(SyntheticConfig(T=16))
    assert f.data.shape == (16, 12, 16, 32) and f.data.dtype == np.float32
    assert cat.c == 4 and np.isfinite(f.data).all()
    with pytest.raises(CatalogError):
        generate_synthetic(SyntheticConfig(C=3, c=4, T=16))
    with pytest.raises(Exception):
        generate_synthetic(SyntheticConfig(T=8))


# on-disk format --------------------------------------------------------------


def test_dataset_round_trip(tmp_path):
    f, cat = generate_synthetic(SyntheticConfig(T=24))
    const = np.random.default_rng(0).normal(size=(2, 16, 32)).astype(np.float32)
    save_dataset(f, cat, tmp_path, constants={"a": const[0], "b": const[1]})
    g, cat2 = load_dataset(tmp_path)
    assert cat2 == cat
    np.testing.assert_array_equal(g.data, f.data)
    assert g.t0 == f.t0 and g.dt_hours == f.dt_hours
    np.testing.assert_array_equal(load_constants(tmp_path / "manifest.json"), const)
    raw = np.fromfile(tmp_path / "x01.f32", dtype="<f4").reshape(24, 16, 32)
    np.testing.assert_array_equal(raw, f.data[:, 1])


def test_paper_catalog_manifest(tmp_path):
    cat = paper_catalog()
    f = field(np.zeros((2, 104, 4, 8)), dt=6.0)
    f.data[:] = np.arange(104)[None, :, None, None]
    save_dataset(f, cat, tmp_path)
    _, got = load_dataset(tmp_path / "manifest.json")
    assert got.key_indices == cat.key_indices
    assert [got.figure_index(n) for n in ("u10m", "mslp", "z500", "t850")] == [2, 6, 21, 37]


def _manifest(tmp_path):
    f, cat = generate_synthetic(SyntheticConfig(T=16, C=4, c=2))
    save_dataset(f, cat, tmp_path)
    return tmp_path / "manifest.json"


def test_ingest_channel_count_mismatch(tmp_path):
    p = _manifest(tmp_path)
    m = json.loads(p.read_text())
    m["dims"]["channel"] = 5
    p.write_text(json.dumps(m))
    with pytest.raises(IngestionError, match=r"5 channels.*4 entries"):
        load_dataset(p)


def test_ingest_missing_file(tmp_path):
    p = _manifest(tmp_path)
    (tmp_path / "x02.f32").unlink()
    with pytest.raises(IngestionError, match="x02"):
        load_dataset(p)


def test_ingest_size_mismatch(tmp_path):
    p = _manifest(tmp_path)
    m = json.loads(p.read_text())
    m["dims"]["time"] = 17
    p.write_text(json.dumps(m))
    with pytest.raises(IngestionError, match="time\\*lat\\*lon"):
        load_dataset(p)


def test_ingest_non_finite(tmp_path):
    p = _manifest(tmp_path)
    raw = np.fromfile(tmp_path / "x01.f32", dtype="<f4")
    raw[7] = np.nan
    raw.tofile(tmp_path / "x01.f32")
    with pytest.raises(IngestionError, match="non-finite"):
        load_dataset(p)


def test_ingest_missing_manifest(tmp_path):
    with pytest.raises(IngestionError):
        load_dataset(tmp_path)
