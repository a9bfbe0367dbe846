import numpy as np
import pytest

import robustlq as rl
from robustlq.model import MatrixPath, SpecError

from conftest import instance_a


def test_make_grid_uniform():
    grid = rl.make_grid(1.0, 2)
    assert np.array_equal(grid.nodes, [0.0, 0.5, 1.0])
    assert grid.nodes[0] == 0.0 and grid.nodes[-1] == 1.0


def test_make_grid_spacing():
    assert rl.make_grid(2.0, 4).dt == 0.5


def test_make_grid_rejects_bad_horizon():
    with pytest.raises(SpecError, match="horizon must be positive"):
        rl.make_grid(0.0, 5)
    with pytest.raises(SpecError):
        rl.make_grid(1.0, 0)


def test_sample_constant_path():
    grid = rl.make_grid(1.0, 4)
    path = MatrixPath.constant(grid, np.eye(2))
    for t in (0.0, 0.3, 0.77, 1.0):
        assert np.array_equal(rl.sample(path, t), np.eye(2))


def test_sample_midpoint_interpolation():
    grid = rl.make_grid(1.0, 1)
    path = MatrixPath(grid, np.array([[[0.0]], [[2.0]]]))
    assert rl.sample(path, 0.5) == np.array([[1.0]])


def test_sample_rejects_out_of_range():
    grid = rl.make_grid(1.0, 1)
    path = MatrixPath.constant(grid, [[1.0]])
    with pytest.raises(SpecError):
        rl.sample(path, -0.1)
    with pytest.raises(SpecError):
        rl.sample(path, 1.5)


def test_sample_nodes_bit_exact():
    grid = rl.make_grid(0.7, 13)
    rng = np.random.default_rng(1)
    path = MatrixPath(grid, rng.standard_normal((14, 2, 3)))
    for k, t in enumerate(grid.nodes):
        assert np.array_equal(path.at(t), path.samples[k])


def test_validate_passes_on_sound_spec():
    report = rl.validate_spec(instance_a(N=20), delta=1e-6)
    assert report.ok
    names = [c.name for c in report.checks]
    assert "R0_strongly_positive" in names and "Q_symmetric" in names


def test_validate_flags_indefinite_r0():
    spec = rl.build_spec(
        n=1, m1=1, m2=1, T=1.0, N=4, alpha=1.0, gamma=1.0, xi=[0.0], G=[[0.0]],
        A=0.0, C=0.0, B1=1.0, D1=0.0, B2=1.0, D2=0.0, Q=1.0, R1=1.0, R2=-1.0,
        R0=-1.0, R0hat=1.0,
    )
    report = rl.validate_spec(spec)
    bad = [c for c in report.failures() if c.name == "R0_strongly_positive"]
    assert len(bad) == 1 and bad[0].node == 0


def test_validate_flags_asymmetric_q():
    spec = rl.build_spec(
        n=2, m1=1, m2=1, T=1.0, N=4, alpha=1.0, gamma=1.0, xi=[0.0, 0.0],
        G=np.zeros((2, 2)), A=np.zeros((2, 2)), C=np.zeros((2, 2)),
        B1=[[1.0], [0.0]], D1=None, B2=[[1.0], [0.0]], D2=None,
        Q=[[1.0, 0.5], [0.0, 1.0]], R1=1.0, R2=-1.0,
        R0=np.eye(2), R0hat=np.eye(2),
    )
    report = rl.validate_spec(spec)
    assert any(c.name == "Q_symmetric" for c in report.failures())


def test_validate_is_pure():
    spec = instance_a(N=10)
    assert rl.validate_spec(spec) == rl.validate_spec(spec)


def test_spec_roundtrip(tmp_path):
    spec = instance_a(N=16)
    fname = tmp_path / "game.json"
    rl.dump_spec(spec, fname)
    spec2 = rl.load_spec(fname)
    assert spec2.n == spec.n and spec2.grid.steps == spec.grid.steps
    assert spec2.alpha == spec.alpha and np.array_equal(spec2.xi, spec.xi)
    for name in ("A", "C", "B1", "D1", "B2", "D2", "sigma", "f1", "Q", "R1",
                 "R2", "R0", "R0hat"):
        assert np.array_equal(getattr(spec2, name).samples,
                              getattr(spec, name).samples), name
    assert np.array_equal(spec2.G, spec.G)


def test_spec_defaults_sigma_f1_to_zero():
    doc = rl.spec_to_dict(instance_a(N=8))
    del doc["matrices"]["sigma"]
    del doc["matrices"]["f1"]
    spec = rl.spec_from_dict(doc)
    assert np.all(spec.sigma.samples == 0.0) and np.all(spec.f1.samples == 0.0)


def test_spec_rejects_missing_and_unknown_matrices():
    doc = rl.spec_to_dict(instance_a(N=8))
    del doc["matrices"]["Q"]
    with pytest.raises(SpecError, match="missing matrix 'Q'"):
        rl.spec_from_dict(doc)
    doc = rl.spec_to_dict(instance_a(N=8))
    doc["matrices"]["Zmystery"] = {"constant": [[1.0]]}
    with pytest.raises(SpecError, match="unknown"):
        rl.spec_from_dict(doc)


def test_spec_node_form_resampling():
    doc = rl.spec_to_dict(instance_a(N=10))
    doc["matrices"]["A"] = {"nodes": [{"t": 0.0, "value": [[0.0]]},
                                      {"t": 1.0, "value": [[1.0]]}]}
    spec = rl.spec_from_dict(doc)
    assert spec.A.at(0.5) == pytest.approx(0.5)
    assert spec.A.samples[0, 0, 0] == 0.0 and spec.A.samples[-1, 0, 0] == 1.0


def test_spec_shape_mismatch_rejected():
    with pytest.raises(SpecError, match="shape"):
        rl.build_spec(
            n=2, m1=1, m2=1, T=1.0, N=4, alpha=1.0, gamma=1.0, xi=[0.0, 0.0],
            G=np.zeros((2, 2)), A=np.zeros((3, 3)), C=None, B1=None, D1=None,
            B2=None, D2=None, Q=np.eye(2), R1=1.0, R2=-1.0, R0=np.eye(2),
            R0hat=np.eye(2),
        )
