"""Backward-in-time integration: Riccati equations, offset equations,
the Lyapunov equation and the fundamental-matrix closed forms.

Every equation here is integrated with classical fixed-step RK4 on the spec
grid, marching from the terminal node to 0 with coefficients interpolated at
half-steps.  Because all inputs are deterministic paths, the offset
equations have identically-zero martingale parts and reduce to linear ODEs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import BlowUpError, MatrixPath, RegularityError, TimeGrid

# Reciprocal-condition floor below which a decoupling inverse is treated as
# a hypothesis failure rather than roundoff.
RCOND_LIMIT = 1e-12


def integrate_backward(rhs, terminal, grid: TimeGrid) -> MatrixPath:
    """Integrate M'(t) = rhs(t, M) backward from M(T) = terminal with RK4.

    The terminal node of the result equals `terminal` bit-exactly.  Any
    non-finite value aborts with the node index where it appeared.
    """
    term = np.atleast_2d(np.asarray(terminal, dtype=float))
    out = np.empty((len(grid),) + term.shape)
    out[-1] = term
    h = grid.dt
    # overflow is detected and reported via the finiteness check, so the
    # intermediate warnings are noise
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(grid.steps, 0, -1):
            t = grid.nodes[k]
            m = out[k]
            k1 = rhs(t, m)
            k2 = rhs(t - 0.5 * h, m - 0.5 * h * k1)
            k3 = rhs(t - 0.5 * h, m - 0.5 * h * k2)
            k4 = rhs(t - h, m - h * k3)
            step = m - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not np.isfinite(step).all():
                raise BlowUpError(
                    f"backward integration produced a non-finite value at node {k - 1}",
                    node=k - 1,
                )
            out[k - 1] = step
    return MatrixPath(grid, out)


def _rcond(mat) -> float:
    """Smallest singular value against max(1, largest): an absolute-scale
    near-singularity measure (a plain condition number is blind to a 1x1
    matrix crossing zero)."""
    if not np.isfinite(mat).all():
        return 0.0
    s = np.linalg.svd(mat, compute_uv=False)
    return float(s[-1] / max(1.0, s[0]))


def _solve_guarded(mat, rhs_mat, what, t):
    """Solve mat @ X = rhs_mat, failing loudly when mat is near singular."""
    rcond = _rcond(mat)
    if rcond < RCOND_LIMIT:
        raise RegularityError(f"{what} is near singular at t={t:.6g} (rcond={rcond:.2e})")
    return np.linalg.solve(mat, rhs_mat)


@dataclass
class RiccatiProblem:
    """Coefficients of the unified generalized Riccati equation

        P' + P A1 + A2^T P + P B1 P - Q
           + (C2^T + P B2)(I - P D2)^{-1}(P C1 + P D1 P) = 0,  P(T) = terminal.

    The fraction part (C1, C2, B2, D1, D2) is optional; when omitted the
    equation is the plain non-symmetric quadratic one.
    """

    grid: TimeGrid
    A1: MatrixPath
    A2: MatrixPath
    B1: MatrixPath
    Q: MatrixPath
    terminal: np.ndarray
    C1: MatrixPath | None = None
    C2: MatrixPath | None = None
    B2: MatrixPath | None = None
    D1: MatrixPath | None = None
    D2: MatrixPath | None = None

    @property
    def has_fraction(self) -> bool:
        parts = (self.C1, self.C2, self.B2, self.D1, self.D2)
        if all(p is None for p in parts):
            return False
        if any(p is None for p in parts):
            raise ValueError("fraction coefficients C1, C2, B2, D1, D2 must be given together")
        return True


@dataclass
class RiccatiSolution:
    P: MatrixPath
    regularity: dict = field(default_factory=dict)


def solve_riccati_generalized(prob: RiccatiProblem, delta: float = RCOND_LIMIT) -> RiccatiSolution:
    """Integrate the unified Riccati equation backward on the grid.

    When the fraction part is present, the reciprocal condition number of
    (I - P D2) is logged at every node and must stay above `delta`.
    """
    fraction = prob.has_fraction
    d = prob.terminal.shape[0]
    eye = np.eye(d)

    def rhs(t, P):
        val = P @ prob.A1.at(t) + prob.A2.at(t).T @ P + P @ prob.B1.at(t) @ P - prob.Q.at(t)
        if fraction:
            gap = eye - P @ prob.D2.at(t)
            inner = P @ prob.C1.at(t) + P @ prob.D1.at(t) @ P
            val = val + (prob.C2.at(t).T + P @ prob.B2.at(t)) @ _solve_guarded(
                gap, inner, "decoupling matrix (I - P D2)", t
            )
        return -val

    P = integrate_backward(rhs, prob.terminal, prob.grid)
    reg = {}
    if fraction:
        rconds = np.empty(len(prob.grid))
        for k, t in enumerate(prob.grid.nodes):
            gap = eye - P.samples[k] @ prob.D2.at(t)
            rconds[k] = _rcond(gap)
        reg["decouple_rcond"] = rconds
        worst = int(np.argmin(rconds))
        if rconds[worst] < delta:
            raise RegularityError(
                f"(I - P D2) near singular at node {worst} (rcond={rconds[worst]:.2e})",
                node=worst,
            )
    return RiccatiSolution(P=P, regularity=reg)


def solve_riccati_follower(spec, delta: float = 1e-8) -> RiccatiSolution:
    """Solve the follower's Riccati equation

        P' + P A + A^T P + C^T P C + Q
           - (P B1 + C^T P D1)(R1 + D1^T P D1)^{-1}(B1^T P + D1^T P C) = 0,

    with P(T) = G, enforcing R1 + D1^T P D1 >= delta*I at every node.
    """

    def rtilde(t, P):
        return spec.R1.at(t) + spec.D1.at(t).T @ P @ spec.D1.at(t)

    def rhs(t, P):
        A, C = spec.A.at(t), spec.C.at(t)
        B1, D1 = spec.B1.at(t), spec.D1.at(t)
        gain = P @ B1 + C.T @ P @ D1
        quad = _solve_guarded(rtilde(t, P), gain.T, "control weight R1 + D1'PD1", t)
        return -(P @ A + A.T @ P + C.T @ P @ C + spec.Q.at(t) - gain @ quad)

    P = integrate_backward(rhs, spec.G, spec.grid)
    eigs = np.empty(len(spec.grid))
    for k, t in enumerate(spec.grid.nodes):
        eigs[k] = np.linalg.eigvalsh(rtilde(t, P.samples[k])).min()
    worst = int(np.argmin(eigs))
    if eigs[worst] < delta:
        raise RegularityError(
            f"follower control weight R1 + D1'PD1 lost strong positivity at node "
            f"{worst} (min eig {eigs[worst]:.3e} < {delta:.1e})",
            node=worst,
        )
    return RiccatiSolution(P=P, regularity={"rtilde1_min_eig": eigs})


def solve_riccati_disturbance(spec) -> RiccatiSolution:
    """Solve the disturbance-side Riccati equation

        P1' + P1 A + A^T P1 - (2/alpha) P1 R0^{-1} P1 + C^T P1 C - Q = 0,

    with P1(T) = -G.  A finite-time blow-up signals that the attenuation
    level is too aggressive for this instance.
    """
    coef = 2.0 / spec.alpha

    def rhs(t, P1):
        A, C = spec.A.at(t), spec.C.at(t)
        mixed = coef * P1 @ _solve_guarded(spec.R0.at(t), P1, "disturbance weight R0", t)
        return -(P1 @ A + A.T @ P1 - mixed + C.T @ P1 @ C - spec.Q.at(t))

    P1 = integrate_backward(rhs, -spec.G, spec.grid)
    return RiccatiSolution(P=P1)


@dataclass
class OffsetSolution:
    """Solution of a backward offset equation; the martingale integrand is
    identically zero under deterministic inputs and is not stored."""

    phi: MatrixPath

    def at(self, t):
        return self.phi.at(t)


def _linear_backward(grid, coef_at, source_at, dim) -> OffsetSolution:
    """Solve phi' = -(coef(t) phi + source(t)), phi(T) = 0."""

    def rhs(t, phi):
        return -(coef_at(t) @ phi + source_at(t))

    phi = integrate_backward(rhs, np.zeros((dim, 1)), grid)
    return OffsetSolution(phi=phi)


def solve_offset_b1(spec, P1: MatrixPath, u1: MatrixPath | None = None,
                    u2: MatrixPath | None = None, include_sigma: bool = True) -> OffsetSolution:
    """Offset of the disturbance-side value expansion for given deterministic
    controls: phi1' = -[(A^T - (2/alpha) P1 R0^{-1}) phi1 + P1 (B1 u1 + B2 u2)
    + C^T P1 (D1 u1 + D2 u2) + C^T P1 sigma], phi1(T) = 0."""
    coef = 2.0 / spec.alpha

    def lin(t):
        P1t = P1.at(t)
        return spec.A.at(t).T - coef * P1t @ np.linalg.inv(spec.R0.at(t))

    def src(t):
        P1t = P1.at(t)
        C = spec.C.at(t)
        out = np.zeros((spec.n, 1))
        if u1 is not None:
            out = out + P1t @ spec.B1.at(t) @ u1.at(t) + C.T @ P1t @ spec.D1.at(t) @ u1.at(t)
        if u2 is not None:
            out = out + P1t @ spec.B2.at(t) @ u2.at(t) + C.T @ P1t @ spec.D2.at(t) @ u2.at(t)
        if include_sigma:
            out = out + C.T @ P1t @ spec.sigma.at(t)
        return out

    return _linear_backward(spec.grid, lin, src, spec.n)


def _fraction_pieces(t, P, C2, B2, D2):
    """Return (C2^T + P B2) (I - P D2)^{-1} evaluated at t."""
    Pt = P.at(t)
    gap = np.eye(Pt.shape[0]) - Pt @ D2.at(t)
    left = C2.at(t).T + Pt @ B2.at(t)
    return left @ _solve_guarded(gap, np.eye(Pt.shape[0]), "decoupling matrix (I - P D2)", t), Pt


def solve_offset_b2(hat, P2: MatrixPath, u2: MatrixPath | None = None,
                    include_sources: bool = True) -> OffsetSolution:
    """Offset equation of the follower-stage decoupling, driven by a
    deterministic leader control path."""
    dim = hat.A1.rows

    def lin(t):
        frac, P2t = _fraction_pieces(t, P2, hat.C, hat.B3, hat.D3)
        return hat.A2.at(t).T + P2t @ hat.B1.at(t) + frac @ P2t @ hat.D1.at(t)

    def src(t):
        frac, P2t = _fraction_pieces(t, P2, hat.C, hat.B3, hat.D3)
        out = np.zeros((dim, 1))
        if u2 is not None:
            u2t = u2.at(t)
            out = out + frac @ P2t @ hat.D2.at(t) @ u2t + (P2t @ hat.B2.at(t) - hat.F.at(t)) @ u2t
        if include_sources:
            out = out + frac @ P2t @ hat.sigma.at(t) + P2t @ hat.b.at(t) - hat.v.at(t)
        return out

    return _linear_backward(P2.grid, lin, src, dim)


def solve_offset_b3(bb, P3: MatrixPath, u2: MatrixPath | None = None,
                    include_sources: bool = True) -> OffsetSolution:
    """Offset equation of the leader-stage decoupling (5n blocks)."""
    dim = bb.A.rows

    def lin(t):
        frac, P3t = _fraction_pieces(t, P3, bb.C, bb.B3, bb.D3)
        return bb.A.at(t).T + P3t @ bb.B1.at(t) + frac @ P3t @ bb.D1.at(t)

    def src(t):
        frac, P3t = _fraction_pieces(t, P3, bb.C, bb.B3, bb.D3)
        out = np.zeros((dim, 1))
        if u2 is not None:
            u2t = u2.at(t)
            out = out + frac @ P3t @ bb.D2.at(t) @ u2t + (P3t @ bb.B2.at(t) - bb.F2.at(t)) @ u2t
        if include_sources:
            out = out + frac @ P3t @ bb.Sigma.at(t) + P3t @ bb.F1.at(t) - bb.Upsilon.at(t)
        return out

    return _linear_backward(P3.grid, lin, src, dim)


def solve_offset_b4(dh, Phat: MatrixPath) -> OffsetSolution:
    """Offset equation of the Hamiltonian-stage decoupling (10n blocks).

    All control inputs have been absorbed by the stage construction; only
    the deterministic drift and diffusion offsets source the equation.
    """
    dim = dh.A1.rows

    def lin(t):
        frac, Pt = _fraction_pieces(t, Phat, dh.C2, dh.B2, dh.D2)
        return dh.A2.at(t).T + Pt @ dh.B1.at(t) + frac @ Pt @ dh.D1.at(t)

    def src(t):
        frac, Pt = _fraction_pieces(t, Phat, dh.C2, dh.B2, dh.D2)
        return frac @ Pt @ dh.Sigma.at(t) + Pt @ dh.F.at(t) - dh.Upsilon.at(t)

    return _linear_backward(Phat.grid, lin, src, dim)


def solve_lyapunov(Atil: MatrixPath, Ctil: MatrixPath, source: MatrixPath,
                   terminal: np.ndarray, grid: TimeGrid) -> MatrixPath:
    """Solve L' + L Atil + Atil^T L + Ctil^T L Ctil + source = 0 backward."""

    def rhs(t, L):
        At, Ct = Atil.at(t), Ctil.at(t)
        return -(L @ At + At.T @ L + Ct.T @ L @ Ct + source.at(t))

    return integrate_backward(rhs, terminal, grid)


def solve_value_offset(Atil: MatrixPath, Ctil: MatrixPath, Btil: MatrixPath,
                       Dtil: MatrixPath, L: MatrixPath, extra_source: MatrixPath,
                       grid: TimeGrid) -> OffsetSolution:
    """Solve the value-offset equation

        psi' = -[Atil^T psi + L Btil + Ctil^T L Dtil + extra_source],

    with psi(T) = 0 and the martingale integrand identically zero.
    """

    def lin(t):
        return Atil.at(t).T

    def src(t):
        Lt = L.at(t)
        return Lt @ Btil.at(t) + Ctil.at(t).T @ Lt @ Dtil.at(t) + extra_source.at(t)

    return _linear_backward(grid, lin, src, Atil.rows)


def fundamental_matrix(Apath: MatrixPath, grid: TimeGrid, anchor: int | None = None) -> MatrixPath:
    """Fundamental matrix Psi of Psi' = A(t) Psi with Psi(t_anchor) = I.

    With the default anchor at the terminal node, the result at node k is
    the transition matrix from t_k to T read backward, i.e. Psi(t_k)
    propagates data at t_k to data at ... the anchor; Psi(anchor) = I
    exactly.
    """
    d = Apath.rows
    if anchor is None:
        anchor = grid.steps
    eye = np.eye(d)
    out = np.empty((len(grid), d, d))
    out[anchor] = eye
    h = grid.dt

    def step(t, m, sign):
        # one RK4 step of M' = A(t) M with step sign*h
        k1 = Apath.at(t) @ m
        k2 = Apath.at(t + 0.5 * sign * h) @ (m + 0.5 * sign * h * k1)
        k3 = Apath.at(t + 0.5 * sign * h) @ (m + 0.5 * sign * h * k2)
        k4 = Apath.at(t + sign * h) @ (m + sign * h * k3)
        return m + (sign * h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    for k in range(anchor, grid.steps):
        out[k + 1] = step(grid.nodes[k], out[k], +1.0)
    for k in range(anchor, 0, -1):
        out[k - 1] = step(grid.nodes[k], out[k], -1.0)
    if not np.isfinite(out).all():
        raise BlowUpError("fundamental matrix integration blew up")
    return MatrixPath(grid, out)


def transition_from_terminal(Apath: MatrixPath, grid: TimeGrid) -> MatrixPath:
    """Return Theta(t) := Psi(T, t), the state-transition matrix of A from t
    to the terminal time, computed in one backward sweep of
    Theta' = -Theta A(t), Theta(T) = I."""

    def rhs(t, Th):
        return -Th @ Apath.at(t)

    return integrate_backward(rhs, np.eye(Apath.rows), grid)


def closed_form_special_case(prob: RiccatiProblem, cond_limit: float = 1e12) -> RiccatiSolution:
    """Closed-form solution of the fraction-free Riccati equation via the
    fundamental matrix of its associated linear Hamiltonian flow.

    Writing Pi := P - terminal, Pi satisfies a shifted quadratic equation
    with zero terminal value, whose solution is the linear-fractional image
    of the 2d x 2d flow

        [[A1 + B1 Pterm,                        B1       ],
         [-(Pterm A1 + A2^T Pterm + Pterm B1 Pterm - Q),  -(A2^T + Pterm B1)]].

    With Theta(t) the transition of that flow from t to T,
    P(t) = Pterm - Theta22(t)^{-1} Theta21(t).
    """
    if prob.has_fraction:
        for name in ("C1", "C2", "B2", "D1", "D2"):
            part = getattr(prob, name)
            if np.any(part.samples != 0.0):
                raise RegularityError(
                    "closed-form solution requires the fraction coefficients to vanish"
                )
    d = prob.terminal.shape[0]
    Pterm = prob.terminal

    def big(t):
        A1, A2, B1, Q = prob.A1.at(t), prob.A2.at(t), prob.B1.at(t), prob.Q.at(t)
        qshift = Pterm @ A1 + A2.T @ Pterm + Pterm @ B1 @ Pterm - Q
        top = np.hstack([A1 + B1 @ Pterm, B1])
        bot = np.hstack([-qshift, -(A2.T + Pterm @ B1)])
        return np.vstack([top, bot])

    bigpath = MatrixPath.from_function(prob.grid, big)
    theta = transition_from_terminal(bigpath, prob.grid)

    out = np.empty((len(prob.grid), d, d))
    rconds = np.empty(len(prob.grid))
    for k in range(len(prob.grid)):
        th = theta.samples[k]
        corner = th[d:, d:]
        rconds[k] = _rcond(corner)
        if rconds[k] < 1.0 / cond_limit:
            raise RegularityError(
                f"corner block of the fundamental matrix is ill conditioned at node {k} "
                f"(rcond={rconds[k]:.2e})",
                node=k,
            )
        out[k] = Pterm - np.linalg.solve(corner, th[d:, :d])
    return RiccatiSolution(P=MatrixPath(prob.grid, out), regularity={"corner_rcond": rconds})


def _derivative_4th_order(samples: np.ndarray, dt: float) -> np.ndarray:
    """Entrywise 4th-order finite-difference time derivative of node samples."""
    K = samples.shape[0] - 1
    if K < 4:
        raise ValueError("need at least 5 nodes for the 4th-order stencil")
    d = np.empty_like(samples)
    s = samples
    d[2:-2] = (s[:-4] - 8.0 * s[1:-3] + 8.0 * s[3:-1] - s[4:]) / (12.0 * dt)
    d[0] = (-25.0 * s[0] + 48.0 * s[1] - 36.0 * s[2] + 16.0 * s[3] - 3.0 * s[4]) / (12.0 * dt)
    d[1] = (-3.0 * s[0] - 10.0 * s[1] + 18.0 * s[2] - 6.0 * s[3] + s[4]) / (12.0 * dt)
    d[-2] = (3.0 * s[-1] + 10.0 * s[-2] - 18.0 * s[-3] + 6.0 * s[-4] - s[-5]) / (12.0 * dt)
    d[-1] = (-25.0 * s[-1] + 48.0 * s[-2] - 36.0 * s[-3] + 16.0 * s[-4] - 3.0 * s[-5]) / (-12.0 * dt)
    return d


def riccati_residuals(rhs, P: MatrixPath) -> np.ndarray:
    """Per-node Frobenius residual of P against its equation.

    `rhs(t, P)` must return the time derivative the equation prescribes;
    the residual compares it with a 4th-order finite-difference derivative
    of the solved node samples.
    """
    deriv = _derivative_4th_order(P.samples, P.grid.dt)
    out = np.empty(len(P.grid))
    for k, t in enumerate(P.grid.nodes):
        out[k] = np.linalg.norm(deriv[k] - rhs(t, P.samples[k]))
    return out


def follower_riccati_rhs(spec):
    """Time derivative prescribed by the follower Riccati equation, for
    residual checks against a solved path."""

    def rhs(t, P):
        A, C = spec.A.at(t), spec.C.at(t)
        B1, D1 = spec.B1.at(t), spec.D1.at(t)
        gain = P @ B1 + C.T @ P @ D1
        rt1 = spec.R1.at(t) + D1.T @ P @ D1
        return -(P @ A + A.T @ P + C.T @ P @ C + spec.Q.at(t)
                 - gain @ np.linalg.solve(rt1, gain.T))

    return rhs


def disturbance_riccati_rhs(spec):
    """Time derivative prescribed by the disturbance Riccati equation."""
    coef = 2.0 / spec.alpha

    def rhs(t, P1):
        A, C = spec.A.at(t), spec.C.at(t)
        mixed = coef * P1 @ np.linalg.solve(spec.R0.at(t), P1)
        return -(P1 @ A + A.T @ P1 - mixed + C.T @ P1 @ C - spec.Q.at(t))

    return rhs


def generalized_riccati_rhs(prob: RiccatiProblem):
    """Return the rhs callable of the unified equation, for residual checks."""
    fraction = prob.has_fraction
    d = prob.terminal.shape[0]
    eye = np.eye(d)

    def rhs(t, P):
        val = P @ prob.A1.at(t) + prob.A2.at(t).T @ P + P @ prob.B1.at(t) @ P - prob.Q.at(t)
        if fraction:
            gap = eye - P @ prob.D2.at(t)
            inner = P @ prob.C1.at(t) + P @ prob.D1.at(t) @ P
            val = val + (prob.C2.at(t).T + P @ prob.B2.at(t)) @ np.linalg.solve(gap, inner)
        return -val

    return rhs
