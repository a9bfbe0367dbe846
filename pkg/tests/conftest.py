"""Shared instances and fixtures.

instance_a is the scalar non-degenerate game used by the Monte Carlo
verification tests (all diffusion couplings on); instance_b is its
diffusion-free counterpart where the boundary-value oracle and the
fundamental-matrix closed forms apply.
"""

import numpy as np
import pytest

import robustlq as rl


def instance_a(N=200):
    return rl.build_spec(
        n=1, m1=1, m2=1, T=1.0, N=N, alpha=8.0, gamma=8.0, xi=[1.0], G=[[0.5]],
        A=0.3, C=0.2, B1=1.0, D1=0.4, B2=1.0, D2=0.3, sigma=0.4, f1=0.2,
        Q=1.0, R1=0.8, R2=-1.2, R0=1.0, R0hat=1.0,
    )


def instance_b(N=256):
    return rl.build_spec(
        n=1, m1=1, m2=1, T=0.5, N=N, alpha=10.0, gamma=10.0, xi=[1.0], G=[[0.1]],
        A=0.2, C=0.0, B1=0.6, D1=0.0, B2=0.6, D2=0.0, sigma=0.3, f1=0.1,
        Q=0.4, R1=1.0, R2=-1.0, R0=1.0, R0hat=1.0,
    )


def homogeneous_spec(N=100, xi=0.0):
    return rl.build_spec(
        n=1, m1=1, m2=1, T=1.0, N=N, alpha=4.0, gamma=4.0, xi=[xi], G=[[0.0]],
        A=0.4, C=0.3, B1=1.0, D1=0.2, B2=0.8, D2=0.2, sigma=0.0, f1=0.0,
        Q=0.0, R1=1.0, R2=-1.0, R0=1.0, R0hat=1.0,
    )


def production_spec(N=400):
    return rl.build_spec(
        n=1, m1=1, m2=1, T=2.0, N=N, alpha=400.0, gamma=400.0, xi=[1.0],
        G=[[1.0]], A=0.5, C=-1.0, B1=1.0, D1=1.0, B2=1.0, D2=1.0,
        sigma=0.0, f1=0.0, Q=1.0, R1=-0.5, R2=0.2, R0=1.0, R0hat=1.0,
    )


def random_spec(seed, n, special=False, T=1.0, N=300):
    """Random validated game instance with stable-ish coefficients.

    With special=True the diffusion couplings C, D1, D2 vanish, which is
    the regime of the fundamental-matrix closed forms.
    """
    rng = np.random.default_rng(seed)

    def mat(r, c, scale):
        return scale * rng.standard_normal((r, c))

    A0 = mat(n, n, 0.35) - 0.2 * np.eye(n)
    A1 = mat(n, n, 0.15)
    q0 = mat(n, n, 0.5)
    Q0 = 0.5 * q0 @ q0.T + 0.2 * np.eye(n)
    g0 = mat(n, n, 0.4)
    G = 0.4 * g0 @ g0.T
    C = None if special else mat(n, n, 0.25)
    D1 = None if special else mat(n, 1, 0.3)
    D2 = None if special else mat(n, 1, 0.3)
    # linear-in-time drift and state weight: genuinely time varying, yet
    # reproduced exactly by node sampling with linear interpolation
    return rl.build_spec(
        n=n, m1=1, m2=1, T=T, N=N,
        alpha=4.0 + 4.0 * rng.random(), gamma=4.0 + 4.0 * rng.random(),
        xi=rng.standard_normal(n), G=G,
        A=lambda t: A0 + (t / T) * A1,
        C=C,
        B1=mat(n, 1, 0.7), D1=D1, B2=mat(n, 1, 0.7), D2=D2,
        sigma=mat(n, 1, 0.3), f1=mat(n, 1, 0.3),
        Q=lambda t: Q0 * (1.0 + 0.3 * t / T),
        R1=0.7 + 0.5 * rng.random(),
        R2=-(0.7 + 0.5 * rng.random()),
        R0=(0.8 + 0.4 * rng.random()) * np.eye(n),
        R0hat=(0.8 + 0.4 * rng.random()) * np.eye(n),
    )


@pytest.fixture(scope="session")
def sol_a():
    return rl.solve_game(instance_a())


@pytest.fixture(scope="session")
def sol_b():
    return rl.solve_game(instance_b())


@pytest.fixture(scope="session")
def sol_homog():
    return rl.solve_game(homogeneous_spec(xi=1.0))
