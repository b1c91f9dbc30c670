import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sysaudit import bench
from sysaudit.bench import CategoryParams, default_gen_config
from sysaudit.errors import ConfigurationError, DomainError


def event_row(n_jets, jet1, jet2):
    row = np.zeros(len(bench.EVENT_FEATURES))
    col = bench.EVENT_FEATURES.index
    row[col("n_jets")], row[col("jet1_pt")], row[col("jet2_pt")] = n_jets, jet1, jet2
    return row


@pytest.mark.parametrize("n_jets,jet1,jet2,expected", [
    (3, 70, 50, True),
    (2, 200, 150, False),
    (3, 60, 50, False),
    (3, 70, 40, False),
])
def test_cut_ttbar_examples(n_jets, jet1, jet2, expected):
    assert bench.cut_ttbar(event_row(n_jets, jet1, jet2)) is expected


def test_event_generator_deterministic_and_schema():
    cfg = default_gen_config("event", 2000, seed=5)
    a, b = bench.gen_event_table(cfg), bench.gen_event_table(cfg)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert a.features.shape == (2000, 12)
    for name in bench.EVENT_FEATURES:
        col = a.column(name)
        if name.endswith("_pt"):
            assert np.all(col > 0)
        if name.endswith("_eta"):
            assert np.all(np.abs(col) <= 5)
        if name.endswith("_phi"):
            assert np.all((col > -np.pi) & (col <= np.pi))
    nj = a.column("n_jets")
    assert np.all(nj == np.round(nj)) and np.all(nj >= 0)
    assert not np.array_equal(a.features, bench.gen_event_table(default_gen_config("event", 2000, 6)).features)


def test_signal_has_harder_jets_and_more_of_them():
    t = bench.gen_event_table(default_gen_config("event", 20000))
    sig = t.labels == 1
    assert t.column("jet1_pt")[sig].mean() > t.column("jet1_pt")[~sig].mean()
    assert t.column("n_jets")[sig].mean() > t.column("n_jets")[~sig].mean()


def test_cut_efficiency_in_range_on_default_config():
    t = bench.gen_event_table(default_gen_config("event", 50000))
    cut = bench.cut_baseline("event", t)
    eff = cut[t.labels == 1].mean()
    assert 0.2 < eff < 0.8
    assert cut[t.labels == 0].mean() < eff


def test_zero_scale_config_rejected():
    flat = CategoryParams(100.0, 0.0, 0.0, 0.0)
    cfg = bench.GenConfig(n_events=10, signal=flat, background=flat)
    with pytest.raises(ConfigurationError):
        bench.gen_event_table(cfg)
    with pytest.raises(ConfigurationError):
        bench.GenConfig(n_events=0).validate()


def test_girth_examples():
    assert bench.girth(np.array([[10.0, 0.3, 1.0]])) == 0.0
    two = np.array([[5.0, 0.1, 0.5], [5.0, -0.1, 0.5]])
    assert bench.girth(two) == pytest.approx(0.1, abs=1e-12)
    scaled = two.copy()
    scaled[:, 0] *= 10
    assert bench.girth(scaled) == pytest.approx(bench.girth(two), rel=1e-12)


def test_girth_wraps_phi_across_pi():
    tracks = np.array([[5.0, 0.0, np.pi - 0.05], [5.0, 0.0, -np.pi + 0.05]])
    assert bench.girth(tracks) == pytest.approx(0.05, abs=1e-12)


@pytest.mark.parametrize("n,expected", [(1, 1.0), (4, 0.5), (9, 1 / 3)])
def test_ptd_equal_tracks(n, expected):
    assert bench.ptd(np.tile([[7.0, 0.0, 0.0]], (n, 1))) == pytest.approx(expected, rel=1e-12)


def test_observables_reject_zero_pt():
    with pytest.raises(DomainError):
        bench.girth(np.array([[0.0, 0.1, 0.2]]))
    with pytest.raises(DomainError):
        bench.ptd(np.array([[0.0, 0.1, 0.2]]))
    with pytest.raises(DomainError):
        bench.ptd(np.ones((2, 3)), mask=np.zeros(2))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(0, 10_000), st.floats(0.1, 100.0))
def test_observables_invariant_under_rescaling_and_permutation(k, seed, factor):
    rng = np.random.default_rng(seed)
    t = np.column_stack([rng.uniform(1, 50, k), rng.normal(0, 0.2, k), rng.normal(0, 0.2, k)])
    perm = t[rng.permutation(k)]
    scaled = t.copy()
    scaled[:, 0] *= factor
    for fn in (bench.girth, bench.ptd):
        ref = fn(t)
        assert fn(perm) == pytest.approx(ref, rel=1e-9, abs=1e-12)
        assert fn(scaled) == pytest.approx(ref, rel=1e-9, abs=1e-12)
    assert 0 < bench.ptd(t) <= 1


def test_quark_gluon_cut_examples():
    assert bench.qg_cut(2, 0.8, 0.3) is True
    assert bench.qg_cut(5, 0.1, 0.3) is False
    assert bench.qg_cut(2, 0.9, 0.05) is False
    assert bench.qg_cut(3, 0.9, 0.6) is True
    strict = bench.QuarkGluonCuts(max_tracks=1)
    assert bench.qg_cut(2, 0.8, 0.3, strict) is False


def test_etmiss_baseline_examples():
    assert bench.etmiss_baseline(np.array([[3.0, 4.0], [-3.0, -4.0]])) == (0.0, False)
    assert bench.etmiss_baseline(np.array([[30.0, 40.0]])) == (50.0, False)
    assert bench.etmiss_baseline(np.array([[60.0, 80.0]])) == (100.0, True)


def test_etmiss_ignores_masked_rows_and_order():
    rng = np.random.default_rng(0)
    t = rng.normal(0, 30, (6, 4))
    mask = np.array([1, 1, 1, 0, 1, 0.0])
    junk = t.copy()
    junk[mask == 0] = 1e6
    ref = bench.etmiss_baseline(t, mask)
    assert bench.etmiss_baseline(junk, mask) == ref
    perm = rng.permutation(6)
    assert bench.etmiss_baseline(t[perm], mask[perm])[0] == pytest.approx(ref[0], rel=1e-12)


@pytest.mark.parametrize("task", ["quark-gluon", "etmiss"])
def test_track_sets_padding_and_determinism(task):
    cfg = default_gen_config(task, 500, seed=3)
    a, b = bench.gen_track_sets(cfg, task), bench.gen_track_sets(cfg, task)
    np.testing.assert_array_equal(a.tracks, b.tracks)
    assert a.tracks.shape[1] == 50
    assert np.all(a.tracks[a.mask == 0] == 0.0)
    assert np.all(a.mask.sum(axis=1) >= 1)


def test_etmiss_label_matches_hidden_truth():
    ts = bench.gen_track_sets(default_gen_config("etmiss", 2000), "etmiss")
    truth = np.hypot(ts.truth[:, 0], ts.truth[:, 1]) > 60.0
    np.testing.assert_array_equal(ts.labels == 1, truth)
    assert 0.1 < ts.labels.mean() < 0.9


def test_gluons_have_more_tracks_than_quarks():
    ts = bench.gen_track_sets(default_gen_config("quark-gluon", 10000), "quark-gluon")
    quark = ts.labels == 1
    assert ts.n_tracks[~quark].mean() > ts.n_tracks[quark].mean()
    obs = bench.jet_observables(ts)
    # vectorized observables agree with the per-jet functions
    for i in range(20):
        assert obs["girth"][i] == pytest.approx(bench.girth(ts.tracks[i], ts.mask[i]), rel=1e-10, abs=1e-14)
        assert obs["ptd"][i] == pytest.approx(bench.ptd(ts.tracks[i], ts.mask[i]), rel=1e-12)


def test_event_table_round_trip(tmp_path):
    t = bench.gen_event_table(default_gen_config("event", 50))
    t.split = np.arange(50) % 3
    path = tmp_path / "events.csv"
    bench.write_dataset(t, path)
    back = bench.read_dataset(path)
    np.testing.assert_array_equal(back.features, t.features)
    np.testing.assert_array_equal(back.labels, t.labels)
    np.testing.assert_array_equal(back.split, t.split)
    assert back.feature_names == bench.EVENT_FEATURES


def test_track_set_round_trip(tmp_path):
    ts = bench.gen_track_sets(default_gen_config("etmiss", 20), "etmiss")
    path = tmp_path / "tracks.jsonl"
    bench.write_dataset(ts, path)
    back = bench.read_dataset(path)
    np.testing.assert_array_equal(back.tracks, ts.tracks)
    np.testing.assert_array_equal(back.mask, ts.mask)
    np.testing.assert_array_equal(back.truth, ts.truth)
    assert back.split is None
