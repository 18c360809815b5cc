import json
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ltvid import DataError, LTIModel, SimSpec, Trajectory, fit_l2, fit_segments_dp, gen_jump_linear
from ltvid import io as lio
from ltvid.spectral import BasisFunctionExpansion, ScheduledSignal, fit_spectrum

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=50, deadline=None)
@given(st.lists(finite, min_size=12, max_size=12))
def test_trajectory_round_trip_bit_exact(tmp_path_factory, vals):
    p = tmp_path_factory.mktemp("io") / "traj.csv"
    v = np.array(vals).reshape(4, 3)
    traj = Trajectory(v[:, :2], v[:, 2:], 0.1)
    lio.save_trajectory(p, traj)
    back = lio.load_trajectory(p)
    np.testing.assert_array_equal(back.x, traj.x)
    np.testing.assert_array_equal(back.u, traj.u)


def test_ltv_model_round_trip(tmp_path):
    traj = gen_jump_linear(SimSpec(seed=0, T=60)).traj
    model = fit_l2(traj, 10.0)
    p = tmp_path / "m.json"
    lio.save_model(p, model, {"seed": 3})
    back = lio.load_model(p)
    np.testing.assert_array_equal(back.A_seq, model.A_seq)
    np.testing.assert_array_equal(back.B_seq, model.B_seq)
    np.testing.assert_array_equal(back.param_covs, model.param_covs)
    d = json.loads(p.read_text())
    assert d["type"] == "ltv"
    assert d["metadata"] == {"seed": 3, "method": "l2_order1", "lambda": 10.0}


def test_lti_segmented_spectral_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    lti = LTIModel(rng.standard_normal((2, 2)), rng.standard_normal((2, 1)))
    back = lio.load_model(_save(tmp_path, lti))
    np.testing.assert_array_equal(back.A, lti.A)

    seg = fit_segments_dp(gen_jump_linear(SimSpec(seed=2, T=80)).traj, 1)
    back = lio.load_model(_save(tmp_path, seg))
    assert back.breakpoints == seg.breakpoints
    assert back.total_cost == seg.total_cost
    for a, b in zip(back.segment_models, seg.segment_models):
        np.testing.assert_array_equal(a.A, b.A)

    sig = ScheduledSignal(rng.uniform(0, 5, 40), rng.uniform(0, 1, 40), rng.standard_normal(40))
    est = fit_spectrum(sig, [1.0, 2.0], BasisFunctionExpansion([0.0, 1.0], [0.5]))
    back = lio.load_model(_save(tmp_path, est))
    np.testing.assert_array_equal(back.coeffs, est.coeffs)
    np.testing.assert_array_equal(back.Sigma, est.Sigma)
    np.testing.assert_array_equal(back.bfe.centers, est.bfe.centers)


def _save(tmp_path, model):
    p = tmp_path / f"{type(model).__name__}.json"
    lio.save_model(p, model)
    return p


def test_signal_round_trip(tmp_path):
    sig = ScheduledSignal([0.1, 0.2], [0.3, 1 / 3], [np.pi, -1e-300])
    lio.save_signal(tmp_path / "s.csv", sig)
    back = lio.load_signal(tmp_path / "s.csv")
    np.testing.assert_array_equal(back.y, sig.y)
    np.testing.assert_array_equal(back.v, sig.v)


@pytest.mark.parametrize("text", [
    "t,x1,u1\n0,1\n",  # ragged
    "x1,t,u1\n0,1,2\n1,2,3\n",  # first column not t
    "t,u1,x1\n0,1,2\n1,2,3\n",  # inputs before states
    "t,x1,x3\n0,1,2\n1,2,3\n",  # gap in numbering
    "t,x1,u1\n0,1,2\n0,2,3\n",  # t not increasing
    "t,x1,u1\n0,1,nan\n1,2,3\n",  # non-finite
    "t,x1,u1\n0,1,a\n1,2,3\n",  # not a number
    "",
])
def test_trajectory_header_validation(tmp_path, text):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(DataError):
        lio.load_trajectory(p)


def test_missing_files_and_bad_models(tmp_path):
    with pytest.raises(DataError):
        lio.load_trajectory(tmp_path / "nope.csv")
    (tmp_path / "m.json").write_text('{"type": "ltv"}')
    with pytest.raises(DataError):
        lio.load_model(tmp_path / "m.json")
    (tmp_path / "m.json").write_text('{"type": "banana"}')
    with pytest.raises(DataError):
        lio.load_model(tmp_path / "m.json")
    with pytest.raises(DataError):
        lio.save_model(tmp_path / "x.json", object())


def test_atomic_write_replaces_and_leaves_no_temp(tmp_path):
    p = tmp_path / "f.txt"
    lio.atomic_write(p, "one")
    lio.atomic_write(p, "two")
    assert p.read_text() == "two"
    assert os.listdir(tmp_path) == ["f.txt"]


def test_atomic_write_failure_keeps_old_file(tmp_path):
    p = tmp_path / "f.txt"
    lio.atomic_write(p, "old")
    with pytest.raises(TypeError):
        lio.atomic_write(p, 12345)  # not text: fails mid-write
    assert p.read_text() == "old"
    assert os.listdir(tmp_path) == ["f.txt"]


def test_csv_decimal_point_and_shortest_repr():
    text = lio.table_to_csv(["a", "b"], [[0.1, 1e-300], [2, np.float64(1 / 3)]])
    assert text == "a,b\n0.1,1e-300\n2,0.3333333333333333\n"
