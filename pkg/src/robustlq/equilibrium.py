"""Pipeline orchestration: from a validated game spec to the robust
Stackelberg equilibrium in state-feedback form, plus the value function.

solve_game runs the full cascade:

  1. follower Riccati P and disturbance Riccati P1,
  2. hat / check / blackboard / doublehat stage construction,
  3. Hamiltonian-stage Riccati Phat and its offset phihat,
  4. feedback gain maps, closed-loop coefficients,
  5. Lyapunov path L and value offset psi.

Everything is deterministic: identical specs produce bit-identical
solutions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import augment, backward
from .model import (BlowUpError, GameSpec, MatrixPath, RegularityError,
                    SpecError, make_grid, validate_spec)


def riccati_problem_hat(hat: augment.HatStage) -> backward.RiccatiProblem:
    """Unified-form coefficients of the follower-stage (2n) Riccati equation."""
    return backward.RiccatiProblem(
        grid=hat.A1.grid, A1=hat.A1, A2=hat.A2, B1=hat.B1, Q=hat.Q,
        terminal=hat.G, C1=hat.C, C2=hat.C, B2=hat.B3, D1=hat.D1, D2=hat.D3,
    )


def riccati_problem_blackboard(bb: augment.BlackboardStage) -> backward.RiccatiProblem:
    """Unified-form coefficients of the leader-stage (5n) Riccati equation."""
    return backward.RiccatiProblem(
        grid=bb.A.grid, A1=bb.A, A2=bb.A, B1=bb.B1, Q=bb.Q,
        terminal=bb.G, C1=bb.C, C2=bb.C, B2=bb.B3, D1=bb.D1, D2=bb.D3,
    )


def riccati_problem_hamiltonian(dh: augment.DoubleHatStage) -> backward.RiccatiProblem:
    """Unified-form coefficients of the Hamiltonian-stage (10n) Riccati
    equation, with the two-sided C1/C2 split."""
    return backward.RiccatiProblem(
        grid=dh.A1.grid, A1=dh.A1, A2=dh.A2, B1=dh.B1, Q=dh.Q,
        terminal=dh.G, C1=dh.C1, C2=dh.C2, B2=dh.B2, D1=dh.D1, D2=dh.D2,
    )


def build_closed_loop(dh: augment.DoubleHatStage, Phat: MatrixPath,
                      phihat: MatrixPath):
    """Closed-loop drift/diffusion coefficients of the equilibrium state:

        dX = (Atil X + Btil) dt + (Ctil X + Dtil) dW.
    """
    grid = dh.A1.grid
    K1 = len(grid)
    ten = dh.A1.rows
    Atils = np.empty((K1, ten, ten))
    Ctils = np.empty_like(Atils)
    Btils = np.empty((K1, ten, 1))
    Dtils = np.empty_like(Btils)
    for k in range(K1):
        E, e = augment.decoupling_terms(dh, Phat, phihat, k)
        Pk = Phat.samples[k]
        phk = phihat.samples[k]
        Atils[k] = dh.A1.samples[k] + dh.B1.samples[k] @ Pk + dh.B2.samples[k] @ E
        Btils[k] = dh.B1.samples[k] @ phk + dh.B2.samples[k] @ e + dh.F.samples[k]
        Ctils[k] = dh.C1.samples[k] + dh.D1.samples[k] @ Pk + dh.D2.samples[k] @ E
        Dtils[k] = dh.D1.samples[k] @ phk + dh.D2.samples[k] @ e + dh.Sigma.samples[k]
    mp = lambda s: MatrixPath(grid, s)
    return mp(Atils), mp(Btils), mp(Ctils), mp(Dtils)


@dataclass
class EquilibriumSolution:
    """All ingredients of the state-feedback equilibrium on one grid."""

    spec: GameSpec
    delta: float
    P: MatrixPath
    P1: MatrixPath
    Phat: MatrixPath
    phihat: MatrixPath
    L: MatrixPath
    psi: MatrixPath
    gains: augment.GainMaps
    sel: augment.SelectorSet
    Atil: MatrixPath
    Btil: MatrixPath
    Ctil: MatrixPath
    Dtil: MatrixPath
    hat: augment.HatStage
    check: augment.CheckStage
    bb: augment.BlackboardStage
    weights: augment.LeaderCostWeights
    dh: augment.DoubleHatStage
    regularity: dict = field(default_factory=dict)
    P2: MatrixPath | None = None
    P3: MatrixPath | None = None

    @property
    def grid(self):
        return self.spec.grid

    def rtilde1_at(self, t: float) -> np.ndarray:
        D1 = self.spec.D1.at(t)
        return self.spec.R1.at(t) + D1.T @ self.P.at(t) @ D1

    def rbb_at(self, t: float) -> np.ndarray:
        return self.weights.Rbb.at(t)


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (RegularityError, BlowUpError) as exc:
        exc.args = (f"[stage {name}] {exc.args[0]}",) + exc.args[1:]
        raise


def solve_game(spec: GameSpec, delta: float = 1e-8,
               diagnostics: bool = False) -> EquilibriumSolution:
    """Run the full solver cascade on a validated spec.

    Raises SpecError when validation fails, RegularityError or BlowUpError
    (tagged with the failing stage) when a solvability condition breaks
    down.  With diagnostics=True the intermediate-stage Riccati paths P2
    and P3 are solved as well; they are not needed for the equilibrium
    itself.
    """
    report = validate_spec(spec, delta)
    if not report.ok:
        names = ", ".join(c.name for c in report.failures())
        raise SpecError(f"spec validation failed: {names}")

    Psol = _stage("follower riccati", backward.solve_riccati_follower, spec, delta)
    P1sol = _stage("disturbance riccati", backward.solve_riccati_disturbance, spec)
    P = Psol.P

    hat = _stage("hat blocks", augment.build_hat, spec, P, delta)
    check = _stage("check blocks", augment.build_check, spec, P, delta)
    bb = _stage("blackboard blocks", augment.build_blackboard, check, hat,
                spec.gamma, spec.R0hat)
    weights = _stage("leader cost weights", augment.build_cost_weights, spec, P, delta)
    dh = _stage("hamiltonian blocks", augment.build_doublehat, bb, weights)

    Phsol = _stage("hamiltonian riccati", backward.solve_riccati_generalized,
                   riccati_problem_hamiltonian(dh))
    Phat = Phsol.P
    phihat = _stage("hamiltonian offset", backward.solve_offset_b4, dh, Phat).phi

    sel = augment.selectors(spec.n)
    gains = _stage("gain maps", augment.build_gain_maps, spec, P, Phat, dh, sel,
                   phihat, delta)
    Atil, Btil, Ctil, Dtil = build_closed_loop(dh, Phat, phihat)

    grid = spec.grid
    K1 = len(grid)
    ten = 10 * spec.n
    lyap_src = np.empty((K1, ten, ten))
    psi_src = np.empty((K1, ten, 1))
    for k in range(K1):
        Rk = weights.R.samples[k]
        Rbbinv = np.linalg.inv(weights.Rbb.samples[k])
        mid = Rbbinv @ spec.R2.samples[k] @ Rbbinv
        PM1, PM2 = gains.PM1.samples[k], gains.PM2.samples[k]
        lyap_src[k] = (sel.M1.T @ spec.Q.samples[k] @ sel.M1
                       + PM1.T @ Rk @ PM1 + PM2.T @ mid @ PM2)
        psi_src[k] = (PM1.T @ Rk @ gains.phiM1.samples[k]
                      + PM2.T @ mid @ gains.phiM2.samples[k])

    Lterm = sel.M1.T @ spec.G @ sel.M1
    L = _stage("lyapunov", backward.solve_lyapunov, Atil, Ctil,
               MatrixPath(grid, lyap_src), Lterm, grid)
    psi = _stage("value offset", backward.solve_value_offset, Atil, Ctil, Btil,
                 Dtil, L, MatrixPath(grid, psi_src), grid).phi

    regularity = dict(Psol.regularity)
    regularity.update({f"hamiltonian_{k}": v for k, v in Phsol.regularity.items()})

    sol = EquilibriumSolution(
        spec=spec, delta=delta, P=P, P1=P1sol.P, Phat=Phat, phihat=phihat,
        L=L, psi=psi, gains=gains, sel=sel, Atil=Atil, Btil=Btil, Ctil=Ctil,
        Dtil=Dtil, hat=hat, check=check, bb=bb, weights=weights, dh=dh,
        regularity=regularity,
    )
    if diagnostics:
        ensure_diagnostics(sol)
    return sol


def ensure_diagnostics(sol: EquilibriumSolution) -> EquilibriumSolution:
    """Solve the intermediate-stage Riccati paths P2 (2n) and P3 (5n) on
    demand; P3 also drives the leader-deviation responses in verification."""
    if sol.P2 is None:
        sol.P2 = _stage("intermediate riccati P2", backward.solve_riccati_generalized,
                        riccati_problem_hat(sol.hat)).P
    if sol.P3 is None:
        sol.P3 = _stage("intermediate riccati P3", backward.solve_riccati_generalized,
                        riccati_problem_blackboard(sol.bb)).P
    return sol


@dataclass(frozen=True)
class StrategyOutput:
    """Controls and worst-case disturbances at one (t, state) pair.

    f is the combined disturbance the follower hedges against; f2 is the
    leader-side worst case; the implied follower-side remainder is f - f2.
    """

    u1: np.ndarray
    u2: np.ndarray
    f: np.ndarray
    f2: np.ndarray


def feedback(sol: EquilibriumSolution, Xhat, t: float) -> StrategyOutput:
    """Evaluate the four equilibrium maps at time t and stacked state Xhat."""
    spec = sol.spec
    X = np.asarray(Xhat, dtype=float).reshape(10 * spec.n, 1)
    g = sol.gains
    u1 = np.linalg.solve(sol.rtilde1_at(t), g.PM1.at(t) @ X + g.phiM1.at(t))
    u2 = np.linalg.solve(sol.rbb_at(t), g.PM2.at(t) @ X + g.phiM2.at(t))
    Yhat = sol.Phat.at(t) @ X + sol.phihat.at(t)
    pbar = sol.sel.row_pbar @ Yhat
    xtil = sol.sel.row_xtil @ Yhat
    f = -(2.0 / spec.alpha) * np.linalg.solve(spec.R0.at(t), pbar)
    f2 = (2.0 / spec.gamma) * np.linalg.solve(spec.R0hat.at(t), xtil)
    return StrategyOutput(u1=u1[:, 0], u2=u2[:, 0], f=f[:, 0], f2=f2[:, 0])


def clamp_nonnegative(s: StrategyOutput) -> StrategyOutput:
    """Entrywise max with zero on the controls only (production semantics);
    disturbances pass through unchanged."""
    return StrategyOutput(
        u1=np.maximum(s.u1, 0.0), u2=np.maximum(s.u2, 0.0), f=s.f, f2=s.f2,
    )


def value(sol: EquilibriumSolution) -> float:
    """Value of the game at the spec's initial state: trapezoidal quadrature
    of the offset integrand plus the boundary terms

        Xi' L(0) Xi + 2 Xi' psi(0).
    """
    spec = sol.spec
    grid = spec.grid
    K1 = len(grid)
    integrand = np.empty(K1)
    for k in range(K1):
        phi1 = sol.gains.phiM1.samples[k]
        phi2 = sol.gains.phiM2.samples[k]
        Rk = sol.weights.R.samples[k]
        Rbbinv = np.linalg.inv(sol.weights.Rbb.samples[k])
        mid = Rbbinv @ spec.R2.samples[k] @ Rbbinv
        Dt = sol.Dtil.samples[k]
        Bt = sol.Btil.samples[k]
        integrand[k] = (
            phi1.T @ Rk @ phi1 + phi2.T @ mid @ phi2
            + Dt.T @ sol.L.samples[k] @ Dt + 2.0 * Bt.T @ sol.psi.samples[k]
        ).item()
    quad = np.trapezoid(integrand, grid.nodes)
    Xi = sol.dh.Xi
    boundary = Xi.T @ sol.L.samples[0] @ Xi + 2.0 * Xi.T @ sol.psi.samples[0]
    return float(quad) + boundary.item()


def scalar_bode(a: float, c: float, q: float, g: float, r1: float,
                T: float, N: int, delta: float = 1e-8) -> MatrixPath:
    """Follower Riccati path of the scalar production-supply game:

        P' + [2(1-a) + c^2] P - P^2 (1+c)^2 / (r1 + P) + q = 0,  P(T) = g,

    with r1 + P monitored against delta along the backward march.
    """
    grid = make_grid(T, N)
    lin = 2.0 * (1.0 - a) + c * c
    gain = (1.0 + c) ** 2

    def rhs(t, Pm):
        p = Pm[0, 0]
        den = r1 + p
        if den < delta:
            raise RegularityError(
                f"control weight r1 + P dropped below {delta:.1e} at t={t:.6g}"
            )
        frac = p * p * gain / den
        return np.array([[-(lin * p - frac + q)]])

    return backward.integrate_backward(rhs, np.array([[g]]), grid)
