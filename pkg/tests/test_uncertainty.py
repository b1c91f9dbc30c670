import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from sysaudit import uncertainty as U
from sysaudit.errors import ConfigurationError

NAMES = ("pt", "eta", "charge")
MODEL = U.UncertaintyModel({"pt": 0.02, "eta": 0.001}, n_sigma=3.0, masked=("charge",))


def test_sigma_examples():
    s = U.sigma(np.array([[100.0, 0.3, -1.0]]), MODEL, NAMES)
    assert s[0, 0] == pytest.approx(2.0)
    assert s[0, 1] == pytest.approx(0.001)
    assert s[0, 2] == 0.0
    pt_only = U.UncertaintyModel({"pt": 0.02})
    assert U.sigma(np.array([[0.3]]), pt_only, ("pt",))[0, 0] == pytest.approx(0.02)
    no_floor = U.UncertaintyModel({"pt": 0.02}, floor=None)
    assert U.sigma(np.array([[0.3]]), no_floor, ("pt",))[0, 0] == pytest.approx(0.006)


def test_unknown_feature_rejected():
    with pytest.raises(ConfigurationError):
        U.sigma(np.ones((1, 1)), MODEL, ("mass",))
    with pytest.raises(ConfigurationError):
        U.UncertaintyModel({"pt": -0.1})


def test_padding_rows_have_zero_sigma():
    x = np.ones((2, 3, 3)) * 50
    mask = np.array([[1, 1, 0], [1, 0, 0.0]])
    s = U.sigma(x, MODEL, NAMES, mask)
    assert np.all(s[mask == 0] == 0)
    assert np.all(s[mask == 1][:, 0] == 1.0)


def test_project_examples():
    x0 = np.array([[100.0, 1.0, 1.0]])
    cand = np.array([[110.0, 1.0005, -1.0]])
    out = U.project(cand, x0, MODEL, NAMES)
    assert out[0, 0] == pytest.approx(106.0)
    assert out[0, 1] == 1.0005
    assert out[0, 2] == 1.0


def test_project_respects_global_limits():
    m = U.UncertaintyModel({"phi": 0.1}, limits={"phi": (-np.pi, np.pi)})
    out = U.project(np.array([[3.5]]), np.array([[3.1]]), m, ("phi",))
    assert out[0, 0] == np.pi


def test_standardize_examples():
    x0 = np.array([[100.0, 2.0, 1.0]])
    dev = U.standardize(np.array([[102.0, 2.0, 5.0]]), x0, MODEL, NAMES)
    np.testing.assert_allclose(dev.z, [[1.0, 0.0, 0.0]])
    assert dev.delta[0, 2] == 0.0
    assert not dev.valid[0, 2]
    same = U.standardize(x0, x0, MODEL, NAMES)
    assert np.all(same.z == 0)


box_values = arrays(np.float64, (6, 3), elements=st.floats(-500, 500, allow_nan=False))


@settings(max_examples=60, deadline=None)
@given(box_values, box_values)
def test_project_contract(x0, noise):
    out = U.project(x0 + noise, x0, MODEL, NAMES)
    s = U.sigma(x0, MODEL, NAMES)
    assert np.all(np.abs(out - x0) <= MODEL.n_sigma * s + 1e-9)
    np.testing.assert_array_equal(out[:, 2], x0[:, 2])
    np.testing.assert_array_equal(U.project(out, x0, MODEL, NAMES), out)
    z = U.standardize(out, x0, MODEL, NAMES).z
    assert np.abs(z).max() <= 3 + 1e-12


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (5, 3), elements=st.floats(1, 1e4)), st.floats(1, 100))
def test_sigma_homogeneous_above_floor(x, k):
    np.testing.assert_allclose(U.sigma(k * x, MODEL, NAMES), k * U.sigma(x, MODEL, NAMES), rtol=1e-12)


def test_default_models_cover_task_features():
    from sysaudit import bench
    for task, names in [("event", bench.EVENT_FEATURES), ("quark-gluon", bench.QG_FEATURES),
                        ("etmiss", bench.ETMISS_FEATURES)]:
        f = U.default_uncertainty(task).fractions(names)
        assert f.shape == (len(names),)
    ev = U.default_uncertainty("event")
    assert ev.widths["jet1_pt"] == 0.02 and ev.widths["lep_eta"] == 0.001
    assert "n_jets" in ev.masked
    assert U.default_uncertainty("quark-gluon").masked == ("charge",)
    assert U.default_uncertainty("etmiss").widths == {"px": 0.04, "py": 0.001, "pz": 0.04, "d0": 0.002}
