import numpy as np
import pytest

import robustlq as rl
from robustlq import augment, backward, equilibrium, montecarlo
from robustlq.model import RegularityError

from conftest import homogeneous_spec, instance_a, production_spec


def test_homogeneous_game_everything_zero(sol_homog):
    for path in (sol_homog.P, sol_homog.P1, sol_homog.Phat, sol_homog.phihat,
                 sol_homog.L, sol_homog.psi, sol_homog.gains.PM1,
                 sol_homog.gains.PM2, sol_homog.gains.phiM1, sol_homog.gains.phiM2):
        assert np.all(path.samples == 0.0)
    assert rl.value(sol_homog) == 0.0


def test_production_pipeline_matches_bode():
    spec = production_spec(N=400)
    sol = rl.solve_game(spec)
    bode = rl.scalar_bode(0.5, -1.0, 1.0, 1.0, -0.5, 2.0, 400)
    assert np.allclose(sol.P.samples, bode.samples, rtol=1e-12, atol=1e-12)
    assert np.isfinite(rl.value(sol))


def test_regularity_failure_names_stage():
    spec = rl.build_spec(
        n=1, m1=1, m2=1, T=1.0, N=16, alpha=4.0, gamma=4.0, xi=[1.0], G=[[0.5]],
        A=0.0, C=0.0, B1=1.0, D1=0.0, B2=1.0, D2=0.0, Q=1.0, R1=-1.0, R2=-1.0,
        R0=1.0, R0hat=1.0,
    )
    with pytest.raises(RegularityError, match="follower riccati"):
        rl.solve_game(spec)


def test_feedback_zero_state_homogeneous(sol_homog):
    out = rl.feedback(sol_homog, np.zeros(10), 0.3)
    for arr in (out.u1, out.u2, out.f, out.f2):
        assert np.all(arr == 0.0)


def test_feedback_linearity_homogeneous(sol_homog):
    rng = np.random.default_rng(4)
    X = rng.standard_normal(10)
    a = rl.feedback(sol_homog, X, 0.42)
    b = rl.feedback(sol_homog, 2.0 * X, 0.42)
    for one, two in ((a.u1, b.u1), (a.u2, b.u2), (a.f, b.f), (a.f2, b.f2)):
        assert np.allclose(2.0 * one, two, rtol=1e-12, atol=1e-14)


def test_feedback_leader_control_consistency(sol_a):
    """The leader feedback equals the stationarity combination of the raw
    stacked processes under the decoupled representation."""
    spec = sol_a.spec
    rng = np.random.default_rng(12)
    for _ in range(10):
        k = int(rng.integers(0, len(spec.grid)))
        t = spec.grid.nodes[k]
        X = rng.standard_normal(10 * spec.n)
        out = rl.feedback(sol_a, X, t)
        E, e = augment.decoupling_terms(sol_a.dh, sol_a.Phat, sol_a.phihat, k)
        Y = sol_a.Phat.samples[k] @ X[:, None] + sol_a.phihat.samples[k]
        Z = E @ X[:, None] + e
        five = 5 * spec.n
        bb, w = sol_a.bb, sol_a.weights
        stat = (bb.B2.samples[k].T @ Y[:five] + bb.D2.samples[k].T @ Z[:five]
                + bb.F2.samples[k].T @ X[five:, None] - w.S2.samples[k] @ X[:five, None]
                - w.M2.samples[k] @ Y[five:] - w.L2.samples[k] @ Z[five:]
                - w.cross.samples[k])
        expect = np.linalg.solve(w.Rbb.samples[k], stat)[:, 0]
        assert np.allclose(out.u2, expect, rtol=1e-10, atol=1e-12)


def test_feedback_affine_in_state(sol_a):
    """All four strategy maps are affine: second differences vanish."""
    rng = np.random.default_rng(6)
    t = 0.37
    X1, X2 = rng.standard_normal((2, 10))
    a = rl.feedback(sol_a, X1 + X2, t)
    b = rl.feedback(sol_a, X1, t)
    c = rl.feedback(sol_a, X2, t)
    d = rl.feedback(sol_a, np.zeros(10), t)
    for field in ("u1", "u2", "f", "f2"):
        lhs = getattr(a, field) + getattr(d, field)
        rhs = getattr(b, field) + getattr(c, field)
        assert np.allclose(lhs, rhs, rtol=1e-11, atol=1e-13)
    # offsets are nonzero here, so the maps are affine, not linear
    assert np.any(d.u2 != 0.0)


def test_value_zero_initial_state():
    spec = homogeneous_spec(xi=0.0)
    assert rl.value(rl.solve_game(spec)) == 0.0


def test_value_pure_quadratic_without_offsets():
    spec = rl.build_spec(
        n=1, m1=1, m2=1, T=1.0, N=100, alpha=8.0, gamma=8.0, xi=[1.0], G=[[0.5]],
        A=0.3, C=0.2, B1=1.0, D1=0.4, B2=1.0, D2=0.3, sigma=0.0, f1=0.0,
        Q=1.0, R1=0.8, R2=-1.2, R0=1.0, R0hat=1.0,
    )
    sol = rl.solve_game(spec)
    assert np.all(sol.phihat.samples == 0.0) and np.all(sol.psi.samples == 0.0)
    Xi = sol.dh.Xi
    expect = (Xi.T @ sol.L.samples[0] @ Xi).item()
    assert rl.value(sol) == pytest.approx(expect, abs=1e-14)


def test_value_quadrature_convergence():
    vals = {N: rl.value(rl.solve_game(instance_a(N=N))) for N in (50, 100, 200)}
    ratio = abs(vals[50] - vals[100]) / abs(vals[100] - vals[200])
    assert 2.5 <= ratio <= 6.5


def test_scalar_bode_zero():
    P = rl.scalar_bode(0.5, -1.0, 0.0, 0.0, 1.0, 2.0, 100)
    assert np.all(P.samples == 0.0)


def test_scalar_bode_closed_form_and_shape():
    P = rl.scalar_bode(0.5, -1.0, 1.0, 1.0, -0.5, 2.0, 2000)
    assert P.samples[0, 0, 0] == pytest.approx(1.5 * np.exp(4.0) - 0.5, rel=1e-8)
    assert P.samples[-1, 0, 0] == 1.0
    assert np.all(np.diff(P.samples[:, 0, 0]) < 0.0)


def test_scalar_bode_regularity_monitor():
    with pytest.raises(RegularityError):
        rl.scalar_bode(0.5, 0.3, 1.0, 1.0, -2.0, 2.0, 100)


def test_clamp_scope():
    s = equilibrium.StrategyOutput(u1=np.array([-3.0]), u2=np.array([2.0]),
                                   f=np.array([-1.5]), f2=np.array([-0.2]))
    c = rl.clamp_nonnegative(s)
    assert c.u1[0] == 0.0 and c.u2[0] == 2.0
    assert c.f[0] == -1.5 and c.f2[0] == -0.2


def test_solver_determinism():
    a = rl.solve_game(instance_a(N=60))
    b = rl.solve_game(instance_a(N=60))
    assert np.array_equal(a.P.samples, b.P.samples)
    assert np.array_equal(a.Phat.samples, b.Phat.samples)
    assert np.array_equal(a.gains.PM2.samples, b.gains.PM2.samples)
    assert rl.value(a) == rl.value(b)


def test_decoupled_representation_residual(sol_a):
    """P Xhat + phihat satisfies the backward drift relation of the
    optimality system along the deterministic skeleton."""
    spec = sol_a.spec
    grid = spec.grid
    X = montecarlo._integrate_forward(sol_a.Atil, sol_a.Btil,
                                      sol_a.dh.Xi[:, 0], grid)
    Y = np.empty_like(X)
    for k in range(len(grid)):
        Y[k] = sol_a.Phat.samples[k] @ X[k] + sol_a.phihat.samples[k][:, 0]
    dY = backward._derivative_4th_order(Y[:, :, None], grid.dt)[:, :, 0]
    worst = 0.0
    for k in range(len(grid)):
        E, e = augment.decoupling_terms(sol_a.dh, sol_a.Phat, sol_a.phihat, k)
        Z = E @ X[k] + e[:, 0]
        drift = (-sol_a.dh.A2.samples[k].T @ Y[k] - sol_a.dh.C2.samples[k].T @ Z
                 + sol_a.dh.Q.samples[k] @ X[k] + sol_a.dh.Upsilon.samples[k][:, 0])
        res = np.linalg.norm(dY[k] - drift) / (1.0 + np.linalg.norm(Y[k]))
        worst = max(worst, res)
    assert worst <= 1e-5


def test_diagnostic_stages_on_request():
    spec = instance_a(N=80)
    sol = rl.solve_game(spec, diagnostics=True)
    assert sol.P2 is not None and sol.P3 is not None
    assert sol.P2.shape == (2, 2) and sol.P3.shape == (5, 5)
    # terminal data match the stage definitions exactly
    assert np.array_equal(sol.P2.samples[-1], sol.hat.G)
    assert np.array_equal(sol.P3.samples[-1], sol.bb.G)


def test_intermediate_stage_residuals():
    spec = instance_a(N=400)
    sol = rl.solve_game(spec, diagnostics=True)
    for prob, path in (
        (equilibrium.riccati_problem_hat(sol.hat), sol.P2),
        (equilibrium.riccati_problem_blackboard(sol.bb), sol.P3),
    ):
        res = backward.riccati_residuals(backward.generalized_riccati_rhs(prob), path)
        rel = res / (1.0 + np.linalg.norm(path.samples, axis=(1, 2)))
        assert rel.max() <= 1e-5
