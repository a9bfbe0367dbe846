"""Block-coefficient systems of the solver cascade.

Starting from the follower's Riccati solution P, the pipeline stacks the
original state with the internal model states and adjoint processes of the
two nested robust control problems:

  hat stage        2n forward / 2n backward   (follower best response)
  check stage      3n forward / 2n backward   (physical state adjoined)
  blackboard stage 5n forward / 5n backward   (leader-side worst case)
  doublehat stage 10n forward / 10n backward  (leader optimality system)

Each builder forms its blocks exactly at grid nodes and wraps them as
matrix paths; no symbolic simplification is attempted, so every block can
be audited entry by entry against its definition.

Component layout of the ten n-blocks of the doublehat stage (0-based):

  forward  Xhat: [x, xbar, qbar, p~_1, p~_2 | a_0 .. a_4]
  backward Yhat: [q~_0 .. q~_4 | xtil, xtilbar, qtilbar, ybar, pbar]

where (x, xbar, qbar) is the 3n check-stage forward state, (p~_1, p~_2)
the forward adjoint of the follower backward pair, q~ the backward adjoint
of the 5n forward stack, a the forward adjoint of the 5n backward stack,
and (xtil, xtilbar, qtilbar, ybar, pbar) the blackboard backward stack.
The layout follows from stacking each adjoint pair in the order the
underlying processes were stacked; the feedback formulas read off
component slots accordingly (ybar at slot 8, pbar at slot 9, xtil at
slot 5 of the backward stack).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import GameSpec, MatrixPath, RegularityError

# Slots (0-based n-block indices) of named components in the stacked
# 10n vectors; see module docstring.
SLOT_X = 0
SLOT_XBAR = 1
SLOT_XTIL = 5
SLOT_YBAR = 8
SLOT_PBAR = 9


def block_row(slot: int, n: int, blocks: int = 10) -> np.ndarray:
    """The n x (blocks*n) selector picking the given n-block."""
    row = np.zeros((n, blocks * n))
    row[:, slot * n:(slot + 1) * n] = np.eye(n)
    return row


@dataclass(frozen=True)
class SelectorSet:
    """Constant block-row selectors on the 10n stacked vectors."""

    n: int
    M1: np.ndarray
    M2: np.ndarray
    M3: np.ndarray
    M4: np.ndarray
    M5: np.ndarray
    M6: np.ndarray
    M7: np.ndarray
    row_pbar: np.ndarray

    @property
    def row_ybar(self) -> np.ndarray:
        return self.M7

    @property
    def row_xtil(self) -> np.ndarray:
        return self.M4


def selectors(n: int) -> SelectorSet:
    """M1 picks block 1, M2 block 2, M3 = M1 + M2, M4..M7 blocks 6..9.

    row_pbar additionally picks block 10, where the follower's worst-case
    adjoint sits in this stacking.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    M1 = block_row(0, n)
    M2 = block_row(1, n)
    return SelectorSet(
        n=n,
        M1=M1,
        M2=M2,
        M3=M1 + M2,
        M4=block_row(5, n),
        M5=block_row(6, n),
        M6=block_row(7, n),
        M7=block_row(8, n),
        row_pbar=block_row(9, n),
    )


# ---------------------------------------------------------------------------
# per-node ingredients shared by several builders


def _node_basics(spec: GameSpec, P: MatrixPath, k: int, delta: float):
    A = spec.A.samples[k]
    C = spec.C.samples[k]
    B1 = spec.B1.samples[k]
    D1 = spec.D1.samples[k]
    B2 = spec.B2.samples[k]
    D2 = spec.D2.samples[k]
    Pk = P.samples[k]
    Rt1 = spec.R1.samples[k] + D1.T @ Pk @ D1
    if np.linalg.eigvalsh(0.5 * (Rt1 + Rt1.T)).min() < delta:
        raise RegularityError(
            f"R1 + D1'PD1 is not strongly positive at node {k}", node=k
        )
    Rt1inv = np.linalg.inv(Rt1)
    K = B1.T @ Pk + D1.T @ Pk @ C  # m1 x n
    return A, C, B1, D1, B2, D2, Pk, Rt1inv, K


def _zeros(r, c):
    return np.zeros((r, c))


def _inv_guarded(mat, what, k):
    try:
        return np.linalg.inv(mat)
    except np.linalg.LinAlgError as exc:
        raise RegularityError(f"{what} is singular at node {k}", node=k) from exc


@dataclass(frozen=True)
class HatStage:
    """2n-forward / 2n-backward blocks of the follower optimality system."""

    n: int
    m2: int
    A1: MatrixPath
    A2: MatrixPath
    C: MatrixPath
    B1: MatrixPath
    B2: MatrixPath
    B3: MatrixPath
    D1: MatrixPath
    D2: MatrixPath
    D3: MatrixPath
    b: MatrixPath
    sigma: MatrixPath
    v: MatrixPath
    F: MatrixPath
    Q: MatrixPath
    G: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        two = 2 * self.n
        assert self.A1.shape == (two, two) and self.A2.shape == (two, two)
        assert self.B2.shape == (two, self.m2) and self.G.shape == (two, two)


def build_hat(spec: GameSpec, P: MatrixPath, delta: float = 1e-8) -> HatStage:
    """Hat-stage blocks from the follower Riccati path."""
    n, m2, grid = spec.n, spec.m2, spec.grid
    K1 = len(grid)
    zn = _zeros(n, n)

    A1s = np.empty((K1, 2 * n, 2 * n))
    A2s = np.empty_like(A1s)
    Cs = np.empty_like(A1s)
    B1s = np.empty_like(A1s)
    B3s = np.empty_like(A1s)
    D1s = np.empty_like(A1s)
    D3s = np.empty_like(A1s)
    B2s = np.empty((K1, 2 * n, m2))
    D2s = np.empty_like(B2s)
    bs = np.empty((K1, 2 * n, 1))
    sigs = np.empty_like(bs)
    vs = np.empty_like(bs)
    Fs = np.empty((K1, 2 * n, m2))
    Qs = np.empty((K1, 2 * n, 2 * n))

    a = 2.0 / spec.alpha
    for k in range(K1):
        A, C, B1, D1, B2, D2, Pk, Rt1inv, K = _node_basics(spec, P, k, delta)
        R0inv = np.linalg.inv(spec.R0.samples[k])
        aR = a * R0inv
        aRP = aR @ Pk
        AK = A - B1 @ Rt1inv @ K
        CK = C - D1 @ Rt1inv @ K
        sig = spec.sigma.samples[k]
        A1s[k] = np.block([[AK, zn], [-aRP, A]])
        A2s[k] = np.block([[AK, zn], [aRP, A]])
        Cs[k] = np.block([[CK, zn], [zn, C]])
        B1s[k] = np.block([[B1 @ Rt1inv @ B1.T, -aR], [aR, -aR]])
        B3s[k] = np.block([[B1 @ Rt1inv @ D1.T, zn], [zn, zn]])
        D1s[k] = np.block([[D1 @ Rt1inv @ B1.T, zn], [zn, zn]])
        D3s[k] = np.block([[D1 @ Rt1inv @ D1.T, zn], [zn, zn]])
        B2eff = B2 - B1 @ Rt1inv @ D1.T @ Pk @ D2
        D2eff = D2 - D1 @ Rt1inv @ D1.T @ Pk @ D2
        B2s[k] = np.vstack([B2eff, _zeros(n, m2)])
        D2s[k] = np.vstack([D2eff, _zeros(n, m2)])
        w = B1 @ Rt1inv @ D1.T @ Pk @ sig
        bs[k] = np.vstack([-w, _zeros(n, 1)])
        sigs[k] = np.vstack([sig - D1 @ Rt1inv @ D1.T @ Pk @ sig, _zeros(n, 1)])
        # the backward pair is the completed-squares shift of the raw adjoint,
        # so the sigma source carries the closed-loop diffusion map: CK' P sig
        vs[k] = np.vstack([CK.T @ Pk @ sig, _zeros(n, 1)])
        Ftop = -K.T @ Rt1inv @ D1.T @ Pk @ D2 + Pk @ B2 + C.T @ Pk @ D2
        Fs[k] = np.vstack([Ftop, _zeros(n, m2)])
        Qk = spec.Q.samples[k]
        Qs[k] = np.block([[zn, -Qk], [Qk, zn]])

    G = spec.G
    # terminal of the shifted backward pair: ybar(T) = G qbar(T) (the raw
    # adjoint's -G x part is absorbed by the shift since P(T) = G)
    Ghat = np.block([[zn, G], [-G, zn]])
    xihat = np.vstack([spec.xi, _zeros(n, 1)])
    mp = lambda s: MatrixPath(grid, s)
    return HatStage(
        n=n, m2=m2, A1=mp(A1s), A2=mp(A2s), C=mp(Cs), B1=mp(B1s), B2=mp(B2s),
        B3=mp(B3s), D1=mp(D1s), D2=mp(D2s), D3=mp(D3s), b=mp(bs), sigma=mp(sigs),
        v=mp(vs), F=mp(Fs), Q=mp(Qs), G=Ghat, xi=xihat,
    )


@dataclass(frozen=True)
class CheckStage:
    """3n-forward / 2n-backward blocks with the physical state adjoined."""

    n: int
    m2: int
    A: MatrixPath
    C: MatrixPath
    B1: MatrixPath
    B2: MatrixPath
    B3: MatrixPath
    D1: MatrixPath
    D2: MatrixPath
    D3: MatrixPath
    F1: MatrixPath
    sigma: MatrixPath
    Q: MatrixPath
    G: np.ndarray
    Qbar: MatrixPath
    Gbar: np.ndarray
    Iinj: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        assert self.A.shape == (3 * self.n, 3 * self.n)
        assert self.B1.shape == (3 * self.n, 2 * self.n)
        assert self.Q.shape == (2 * self.n, 3 * self.n)
        assert self.Iinj.shape == (3 * self.n, self.n)


def build_check(spec: GameSpec, P: MatrixPath, delta: float = 1e-8) -> CheckStage:
    """Check-stage blocks; the first n-block is the physical state."""
    n, m2, grid = spec.n, spec.m2, spec.grid
    K1 = len(grid)
    zn = _zeros(n, n)

    As = np.empty((K1, 3 * n, 3 * n))
    Cs = np.empty_like(As)
    B1s = np.empty((K1, 3 * n, 2 * n))
    B3s = np.empty_like(B1s)
    D1s = np.empty_like(B1s)
    D3s = np.empty_like(B1s)
    B2s = np.empty((K1, 3 * n, m2))
    D2s = np.empty_like(B2s)
    F1s = np.empty((K1, 3 * n, 1))
    sigs = np.empty_like(F1s)
    Qs = np.empty((K1, 2 * n, 3 * n))
    Qbars = np.empty((K1, 3 * n, 3 * n))

    a = 2.0 / spec.alpha
    for k in range(K1):
        A, C, B1, D1, B2, D2, Pk, Rt1inv, K = _node_basics(spec, P, k, delta)
        R0inv = np.linalg.inv(spec.R0.samples[k])
        aRP = a * R0inv @ Pk
        BK = B1 @ Rt1inv @ K
        DK = D1 @ Rt1inv @ K
        sig = spec.sigma.samples[k]
        As[k] = np.block([[A, -BK, zn], [zn, A - BK, zn], [zn, -aRP, A]])
        Cs[k] = np.block([[C, -DK, zn], [zn, C - DK, zn], [zn, zn, C]])
        BB = B1 @ Rt1inv @ B1.T
        BD = B1 @ Rt1inv @ D1.T
        DB = D1 @ Rt1inv @ B1.T
        DD = D1 @ Rt1inv @ D1.T
        aR = a * R0inv
        B1s[k] = np.block([[BB, zn], [BB, -aR], [aR, -aR]])
        B3s[k] = np.block([[BD, zn], [BD, zn], [zn, zn]])
        D1s[k] = np.block([[DB, zn], [DB, zn], [zn, zn]])
        D3s[k] = np.block([[DD, zn], [DD, zn], [zn, zn]])
        B2eff = B2 - B1 @ Rt1inv @ D1.T @ Pk @ D2
        D2eff = D2 - D1 @ Rt1inv @ D1.T @ Pk @ D2
        B2s[k] = np.vstack([B2eff, B2eff, _zeros(n, m2)])
        D2s[k] = np.vstack([D2eff, D2eff, _zeros(n, m2)])
        w = B1 @ Rt1inv @ D1.T @ Pk @ sig
        F1s[k] = np.vstack([spec.f1.samples[k] - w, -w, _zeros(n, 1)])
        s = sig - D1 @ Rt1inv @ D1.T @ Pk @ sig
        sigs[k] = np.vstack([s, s, _zeros(n, 1)])
        Qk = spec.Q.samples[k]
        Qs[k] = np.block([[zn, zn, -Qk], [zn, Qk, zn]])
        Qbars[k] = np.block([[Qk, zn, zn], [zn, zn, zn], [zn, zn, zn]])

    G = spec.G
    # same shifted-pair terminal as the hat stage, with the physical-state
    # column prepended
    Gcheck = np.block([[zn, zn, G], [zn, -G, zn]])
    Gbar = np.block([[G, zn, zn], [zn, zn, zn], [zn, zn, zn]])
    Iinj = np.vstack([np.eye(n), zn, zn])
    xicheck = np.vstack([spec.xi, spec.xi, _zeros(n, 1)])
    mp = lambda s: MatrixPath(grid, s)
    return CheckStage(
        n=n, m2=m2, A=mp(As), C=mp(Cs), B1=mp(B1s), B2=mp(B2s), B3=mp(B3s),
        D1=mp(D1s), D2=mp(D2s), D3=mp(D3s), F1=mp(F1s), sigma=mp(sigs),
        Q=mp(Qs), G=Gcheck, Qbar=mp(Qbars), Gbar=Gbar, Iinj=Iinj, xi=xicheck,
    )


@dataclass(frozen=True)
class BlackboardStage:
    """5n-forward / 5n-backward blocks of the leader-side worst-case system."""

    n: int
    m2: int
    A: MatrixPath
    C: MatrixPath
    B1: MatrixPath
    B2: MatrixPath
    B3: MatrixPath
    D1: MatrixPath
    D2: MatrixPath
    D3: MatrixPath
    F1: MatrixPath
    F2: MatrixPath
    Sigma: MatrixPath
    Upsilon: MatrixPath
    Q: MatrixPath
    G: np.ndarray
    Xi: np.ndarray

    def __post_init__(self):
        five = 5 * self.n
        assert self.A.shape == (five, five) and self.Q.shape == (five, five)
        assert self.B2.shape == (five, self.m2)


def build_blackboard(check: CheckStage, hat: HatStage, gamma: float,
                     R0hat: MatrixPath) -> BlackboardStage:
    """Stack the check-stage system with the adjoint pair of the leader's
    inner disturbance problem, worst case substituted."""
    n, m2 = check.n, check.m2
    gridobj = check.A.grid
    K1 = len(gridobj)
    z32 = _zeros(3 * n, 2 * n)
    z23 = _zeros(2 * n, 3 * n)
    z22 = _zeros(2 * n, 2 * n)
    z33 = _zeros(3 * n, 3 * n)

    As = np.empty((K1, 5 * n, 5 * n))
    Cs = np.empty_like(As)
    B1s = np.empty_like(As)
    B3s = np.empty_like(As)
    D1s = np.empty_like(As)
    D3s = np.empty_like(As)
    Qs = np.empty_like(As)
    B2s = np.empty((K1, 5 * n, m2))
    D2s = np.empty_like(B2s)
    F2s = np.empty_like(B2s)
    F1s = np.empty((K1, 5 * n, 1))
    Sigs = np.empty_like(F1s)
    Upss = np.empty_like(F1s)

    g = 2.0 / gamma
    Iinj = check.Iinj
    for k in range(K1):
        R0hinv = np.linalg.inv(R0hat.samples[k])
        corner = g * Iinj @ R0hinv @ Iinj.T
        cB1 = check.B1.samples[k]
        cB3 = check.B3.samples[k]
        cD1 = check.D1.samples[k]
        cD3 = check.D3.samples[k]
        As[k] = np.block([[check.A.samples[k], z32], [z23, hat.A2.samples[k]]])
        Cs[k] = np.block([[check.C.samples[k], z32], [z23, hat.C.samples[k]]])
        B1s[k] = np.block([[corner, cB1], [-cB1.T, z22]])
        B3s[k] = np.block([[z33, cB3], [-cD1.T, z22]])
        D1s[k] = np.block([[z33, cD1], [-cB3.T, z22]])
        D3s[k] = np.block([[z33, cD3], [-cD3.T, z22]])
        B2s[k] = np.vstack([check.B2.samples[k], _zeros(2 * n, m2)])
        D2s[k] = np.vstack([check.D2.samples[k], _zeros(2 * n, m2)])
        F2s[k] = np.vstack([_zeros(3 * n, m2), hat.F.samples[k]])
        F1s[k] = np.vstack([check.F1.samples[k], _zeros(2 * n, 1)])
        Sigs[k] = np.vstack([check.sigma.samples[k], _zeros(2 * n, 1)])
        Upss[k] = np.vstack([_zeros(3 * n, 1), hat.v.samples[k]])
        cQ = check.Q.samples[k]
        Qs[k] = np.block([[check.Qbar.samples[k], -cQ.T], [cQ, z22]])

    Gbb = np.block([[-check.Gbar, -check.G.T], [check.G, z22]])
    Xi = np.vstack([check.xi, _zeros(2 * n, 1)])
    mp = lambda s: MatrixPath(gridobj, s)
    return BlackboardStage(
        n=n, m2=m2, A=mp(As), C=mp(Cs), B1=mp(B1s), B2=mp(B2s), B3=mp(B3s),
        D1=mp(D1s), D2=mp(D2s), D3=mp(D3s), F1=mp(F1s), F2=mp(F2s),
        Sigma=mp(Sigs), Upsilon=mp(Upss), Q=mp(Qs), G=Gbb, Xi=Xi,
    )


@dataclass(frozen=True)
class LeaderCostWeights:
    """Weights of the leader's reduced minimization problem on the 5n stage.

    R is the follower-substitution weight Rt1^{-1} R1 Rt1^{-1}; Rbb must be
    strongly negative for the leader's problem to be well posed.  cross is
    the constant control offset D2'P D1 R D1'P sigma.
    """

    n: int
    m1: int
    m2: int
    R: MatrixPath
    Rbb: MatrixPath
    Qbar: MatrixPath
    Bbar: MatrixPath
    Dbar: MatrixPath
    Gbar: np.ndarray
    S1: MatrixPath
    M1: MatrixPath
    L1: MatrixPath
    S2: MatrixPath
    M2: MatrixPath
    L2: MatrixPath
    S3: MatrixPath
    M3: MatrixPath
    L3: MatrixPath
    cross: MatrixPath
    sigma: MatrixPath


def build_cost_weights(spec: GameSpec, P: MatrixPath, delta: float = 1e-8) -> LeaderCostWeights:
    """Reduced leader cost weights; raises when Rbb fails to be << 0."""
    n, m1, m2, grid = spec.n, spec.m1, spec.m2, spec.grid
    K1 = len(grid)
    five = 5 * n

    Rs = np.empty((K1, m1, m1))
    Rbbs = np.empty((K1, m2, m2))
    Qbars = np.zeros((K1, five, five))
    Bbars = np.zeros((K1, five, five))
    Dbars = np.zeros((K1, five, five))
    S1s = np.zeros((K1, five, five))
    M1s = np.zeros((K1, five, five))
    L1s = np.zeros((K1, five, five))
    S2s = np.zeros((K1, m2, five))
    M2s = np.zeros((K1, m2, five))
    L2s = np.zeros((K1, m2, five))
    S3s = np.zeros((K1, n, five))
    M3s = np.zeros((K1, n, five))
    L3s = np.zeros((K1, n, five))
    crosses = np.empty((K1, m2, 1))

    g = 2.0 / spec.gamma
    b4 = slice(3 * n, 4 * n)  # fourth n-block (ybar / zbar rows)
    b2 = slice(n, 2 * n)      # second n-block (xbar columns)
    for k in range(K1):
        A, C, B1, D1, B2, D2, Pk, Rt1inv, K = _node_basics(spec, P, k, delta)
        R = Rt1inv @ spec.R1.samples[k] @ Rt1inv
        DPD1 = D2.T @ Pk @ D1  # m2 x m1
        Rbb = spec.R2.samples[k] + DPD1 @ R @ DPD1.T
        Rs[k] = R
        Rbbs[k] = Rbb
        Qbars[k][:n, :n] = spec.Q.samples[k]
        Qbars[k][b2, b2] = K.T @ R @ K
        Bbars[k][:n, :n] = g * np.linalg.inv(spec.R0hat.samples[k])
        Bbars[k][b4, b4] = B1 @ R @ B1.T
        Dbars[k][b4, b4] = D1 @ R @ D1.T
        S1s[k][b4, b2] = -B1 @ R @ K
        M1s[k][b4, b4] = D1 @ R @ B1.T
        L1s[k][b4, b2] = -D1 @ R @ K
        S2s[k][:, b2] = DPD1 @ R @ K
        M2s[k][:, b4] = -DPD1 @ R @ B1.T
        L2s[k][:, b4] = -DPD1 @ R @ D1.T
        S3s[k][:, b2] = Pk @ D1 @ R @ K
        M3s[k][:, b4] = -Pk @ D1 @ R @ B1.T
        L3s[k][:, b4] = -Pk @ D1 @ R @ D1.T
        crosses[k] = DPD1 @ R @ D1.T @ Pk @ spec.sigma.samples[k]

    worst_node, worst = 0, -np.inf
    for k in range(K1):
        lam = np.linalg.eigvalsh(0.5 * (Rbbs[k] + Rbbs[k].T)).max()
        if lam > worst:
            worst, worst_node = lam, k
    if worst > -delta:
        raise RegularityError(
            f"leader control weight failed to be strongly negative at node "
            f"{worst_node} (max eig {worst:.3e} > {-delta:.1e})",
            node=worst_node,
        )

    Gbar = np.zeros((five, five))
    Gbar[:n, :n] = spec.G
    mp = lambda s: MatrixPath(grid, s)
    return LeaderCostWeights(
        n=n, m1=m1, m2=m2, R=mp(Rs), Rbb=mp(Rbbs), Qbar=mp(Qbars), Bbar=mp(Bbars),
        Dbar=mp(Dbars), Gbar=Gbar, S1=mp(S1s), M1=mp(M1s), L1=mp(L1s), S2=mp(S2s),
        M2=mp(M2s), L2=mp(L2s), S3=mp(S3s), M3=mp(M3s), L3=mp(L3s),
        cross=mp(crosses), sigma=spec.sigma,
    )


@dataclass(frozen=True)
class DoubleHatStage:
    """10n-forward / 10n-backward blocks of the leader optimality system."""

    n: int
    A1: MatrixPath
    A2: MatrixPath
    C1: MatrixPath
    C2: MatrixPath
    B1: MatrixPath
    B2: MatrixPath
    D1: MatrixPath
    D2: MatrixPath
    Q: MatrixPath
    F: MatrixPath
    Sigma: MatrixPath
    Upsilon: MatrixPath
    Xi: np.ndarray
    G: np.ndarray

    def __post_init__(self):
        ten = 10 * self.n
        for name in ("A1", "A2", "C1", "C2", "B1", "B2", "D1", "D2", "Q"):
            assert getattr(self, name).shape == (ten, ten), name
        assert self.Xi.shape == (ten, 1) and self.G.shape == (ten, ten)


def build_doublehat(bb: BlackboardStage, w: LeaderCostWeights) -> DoubleHatStage:
    """Hamiltonian-stage blocks with the leader's control eliminated."""
    n = bb.n
    grid = bb.A.grid
    K1 = len(grid)
    ten = 10 * n

    A1s = np.empty((K1, ten, ten))
    A2s = np.empty_like(A1s)
    C1s = np.empty_like(A1s)
    C2s = np.empty_like(A1s)
    B1s = np.empty_like(A1s)
    B2s = np.empty_like(A1s)
    D1s = np.empty_like(A1s)
    D2s = np.empty_like(A1s)
    Qs = np.empty_like(A1s)
    Fs = np.empty((K1, ten, 1))
    Sigs = np.empty_like(Fs)
    Upss = np.empty_like(Fs)

    for k in range(K1):
        A = bb.A.samples[k]
        C = bb.C.samples[k]
        Bb1 = bb.B1.samples[k]
        Bb2 = bb.B2.samples[k]
        Bb3 = bb.B3.samples[k]
        Db1 = bb.D1.samples[k]
        Db2 = bb.D2.samples[k]
        Db3 = bb.D3.samples[k]
        Qbb = bb.Q.samples[k]
        F2 = bb.F2.samples[k]
        Rinv = _inv_guarded(w.Rbb.samples[k], "leader control weight", k)
        S1, S2 = w.S1.samples[k], w.S2.samples[k]
        M1, M2 = w.M1.samples[k], w.M2.samples[k]
        L1, L2 = w.L1.samples[k], w.L2.samples[k]
        cross = w.cross.samples[k]
        sig = w.sigma.samples[k]

        B2R = Bb2 @ Rinv
        D2R = Db2 @ Rinv
        M2R = M2.T @ Rinv
        L2R = L2.T @ Rinv
        S2R = S2.T @ Rinv
        F2R = F2 @ Rinv

        A1s[k] = np.block([
            [A - B2R @ S2, B2R @ F2.T],
            [S1 - M2R @ S2, A + M2R @ F2.T],
        ])
        A2s[k] = np.block([
            [A - B2R @ S2, -B2R @ F2.T],
            [-S1 + M2R @ S2, A + M2R @ F2.T],
        ])
        C1s[k] = np.block([
            [C - D2R @ S2, D2R @ F2.T],
            [L1 - L2R @ S2, C + L2R @ F2.T],
        ])
        C2s[k] = np.block([
            [C - D2R @ S2, -D2R @ F2.T],
            [-L1 + L2R @ S2, C + L2R @ F2.T],
        ])
        B1s[k] = np.block([
            [B2R @ Bb2.T, Bb1 - B2R @ M2],
            [-Bb1.T + M2R @ Bb2.T, w.Bbar.samples[k] - M2R @ M2],
        ])
        B2s[k] = np.block([
            [B2R @ Db2.T, Bb3 - B2R @ L2],
            [-Db1.T + M2R @ Db2.T, M1.T - M2R @ L2],
        ])
        D1s[k] = np.block([
            [D2R @ Bb2.T, Db1 - D2R @ M2],
            [-Bb3.T + L2R @ Bb2.T, M1 - L2R @ M2],
        ])
        D2s[k] = np.block([
            [D2R @ Db2.T, Db3 - D2R @ L2],
            [-Db3.T + L2R @ Db2.T, w.Dbar.samples[k] - L2R @ L2],
        ])
        Qs[k] = np.block([
            [w.Qbar.samples[k] - S2R @ S2, -Qbb.T + S2R @ F2.T],
            [Qbb - F2R @ S2, F2R @ F2.T],
        ])
        Fs[k] = np.vstack([
            bb.F1.samples[k] - B2R @ cross,
            w.M3.samples[k].T @ sig - M2R @ cross,
        ])
        Sigs[k] = np.vstack([
            bb.Sigma.samples[k] - D2R @ cross,
            w.L3.samples[k].T @ sig - L2R @ cross,
        ])
        Upss[k] = np.vstack([
            w.S3.samples[k].T @ sig - S2R @ cross,
            bb.Upsilon.samples[k] - F2R @ cross,
        ])

    z5 = _zeros(5 * n, 5 * n)
    Gdh = np.block([[-w.Gbar, -bb.G.T], [bb.G, z5]])
    Xi = np.vstack([bb.Xi, _zeros(5 * n, 1)])
    mp = lambda s: MatrixPath(grid, s)
    return DoubleHatStage(
        n=n, A1=mp(A1s), A2=mp(A2s), C1=mp(C1s), C2=mp(C2s), B1=mp(B1s),
        B2=mp(B2s), D1=mp(D1s), D2=mp(D2s), Q=mp(Qs), F=mp(Fs), Sigma=mp(Sigs),
        Upsilon=mp(Upss), Xi=Xi, G=Gdh,
    )


@dataclass(frozen=True)
class GainMaps:
    """Affine feedback maps of both controls on the 10n forward state."""

    PM1: MatrixPath
    PM2: MatrixPath
    phiM1: MatrixPath
    phiM2: MatrixPath


def decoupling_terms(dh: DoubleHatStage, Phat: MatrixPath, phihat: MatrixPath, k: int):
    """State gain and offset of the decoupled martingale integrand at node k:

        Zhat = E @ Xhat + e,
        E = (I - Phat D2)^{-1} Phat (C1 + D1 Phat),
        e = (I - Phat D2)^{-1} (Phat D1 phihat + Phat Sigma).
    """
    ten = dh.A1.rows
    Pk = Phat.samples[k]
    gap = np.eye(ten) - Pk @ dh.D2.samples[k]
    rhs_state = Pk @ dh.C1.samples[k] + Pk @ dh.D1.samples[k] @ Pk
    rhs_off = Pk @ dh.D1.samples[k] @ phihat.samples[k] + Pk @ dh.Sigma.samples[k]
    try:
        sol = np.linalg.solve(gap, np.hstack([rhs_state, rhs_off]))
    except np.linalg.LinAlgError as exc:
        raise RegularityError(
            f"decoupling matrix (I - P D2) is singular at node {k}", node=k
        ) from exc
    return sol[:, :ten], sol[:, ten:]


def build_gain_maps(spec: GameSpec, P: MatrixPath, Phat: MatrixPath,
                    dh: DoubleHatStage, sel: SelectorSet, phihat: MatrixPath,
                    delta: float = 1e-8) -> GainMaps:
    """Assemble the control feedback maps from the solved decoupling.

    The leader map is built first; the follower map references it through
    the direct-control coupling D1'P D2.  Row selectors follow the
    component layout documented in the module docstring: the follower's
    backward pair sits at slots 8 and 9, so its feedback reads M7 rows.
    """
    n, grid = spec.n, spec.grid
    K1 = len(grid)
    ten = 10 * n

    PM1s = np.empty((K1, spec.m1, ten))
    PM2s = np.empty((K1, spec.m2, ten))
    phiM1s = np.empty((K1, spec.m1, 1))
    phiM2s = np.empty((K1, spec.m2, 1))

    M2r, M3r, M7r = sel.M2, sel.M3, sel.M7
    for k in range(K1):
        A, C, B1, D1, B2, D2, Pk, Rt1inv, K = _node_basics(spec, P, k, delta)
        R = Rt1inv @ spec.R1.samples[k] @ Rt1inv
        DPD1 = D2.T @ Pk @ D1
        Rbb = spec.R2.samples[k] + DPD1 @ R @ DPD1.T
        Rbbinv = np.linalg.inv(Rbb)
        sig = spec.sigma.samples[k]
        E, e = decoupling_terms(dh, Phat, phihat, k)
        phk = phihat.samples[k]
        Phk = Phat.samples[k]

        T1 = B2.T - DPD1 @ Rt1inv @ B1.T          # m2 x n
        T2 = B2.T @ Pk + D2.T @ Pk @ C - DPD1 @ Rt1inv @ K
        T3 = DPD1 @ R @ K
        T4 = DPD1 @ R @ B1.T
        T5 = D2.T @ M3r - DPD1 @ Rt1inv @ D1.T @ M3r + DPD1 @ R @ D1.T @ M7r
        cross = DPD1 @ R @ D1.T @ Pk @ sig

        PM2 = T1 @ M3r @ Phk + T2 @ M7r - T3 @ M2r + T4 @ M7r @ Phk + T5 @ E
        phiM2 = T1 @ M3r @ phk + T4 @ M7r @ phk - cross + T5 @ e
        PM1 = B1.T @ M7r @ Phk + D1.T @ M7r @ E - K @ M2r - D1.T @ Pk @ D2 @ Rbbinv @ PM2
        phiM1 = (B1.T @ M7r @ phk + D1.T @ M7r @ e - D1.T @ Pk @ sig
                 - D1.T @ Pk @ D2 @ Rbbinv @ phiM2)

        PM1s[k], PM2s[k], phiM1s[k], phiM2s[k] = PM1, PM2, phiM1, phiM2

    mp = lambda s: MatrixPath(grid, s)
    return GainMaps(PM1=mp(PM1s), PM2=mp(PM2s), phiM1=mp(phiM1s), phiM2=mp(phiM2s))
