"""Monte Carlo simulation of the closed loop and the statistical
verification harness.

The closed-loop state is simulated with Euler-Maruyama on the spec grid
refined by a fixed number of substeps, with per-path Brownian substreams
keyed by (master seed, path index) so results are independent of chunking.
Costs are accumulated with left-endpoint quadrature.

Every perturbation test compares two arms under common random numbers.
Because the game is linear-quadratic, the perturbed arm equals the base
arm plus eps times a linear response process that is driven by the same
Brownian increments, so the cost difference is exactly

    dJ = eps * cross + eps^2 * quad

with per-path (cross, quad) integrals accumulated alongside the base
simulation.  The eps = 0 null difference is therefore exactly zero.  The
quad samples double as estimates of the second-variation functionals that
the sampled convexity probes report.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import augment, backward
from .equilibrium import EquilibriumSolution, ensure_diagnostics
from .model import BlowUpError, MatrixPath, make_grid

BLOWUP_PATH_BUDGET = 1e-3  # abort when more than this fraction of paths diverge


@dataclass(frozen=True)
class SimConfig:
    paths: int = 10_000
    seed: int = 0
    substeps: int = 1
    chunk: int = 20_000

    def __post_init__(self):
        if self.paths < 1 or self.substeps < 1:
            raise ValueError("paths and substeps must be positive")


@dataclass
class SimOutput:
    """Per-path realized costs and terminal states of one closed-loop run.

    j is the game criterion, j_follower the follower's robust cost (its
    model state, worst-case-weighted), j_leader the leader's robust cost.
    """

    terminal: np.ndarray
    j: np.ndarray
    j_follower: np.ndarray
    j_leader: np.ndarray
    blown: int

    def _stats(self, arr):
        # blown paths are flagged with nan and excluded from the statistics
        good = arr[np.isfinite(arr)]
        mean = float(np.mean(good))
        stderr = float(np.std(good, ddof=1) / np.sqrt(len(good))) if len(good) > 1 else 0.0
        return mean, stderr

    @property
    def j_mean(self):
        return self._stats(self.j)[0]

    @property
    def j_stderr(self):
        return self._stats(self.j)[1]

    def summary(self) -> dict:
        out = {"paths": int(len(self.j)), "blown": int(self.blown)}
        for name, arr in (("j", self.j), ("j_follower", self.j_follower),
                          ("j_leader", self.j_leader)):
            mean, se = self._stats(arr)
            out[name] = {"mean": mean, "stderr": se}
        good = np.isfinite(self.terminal).all(axis=1)
        out["terminal_mean"] = self.terminal[good].mean(axis=0).tolist()
        out["terminal_var"] = self.terminal[good].var(axis=0, ddof=1).tolist()
        return out


@dataclass(frozen=True)
class PerturbationRow:
    test: str
    direction: int
    eps: float
    delta_j: float
    stderr: float
    verdict: str


@dataclass
class PerturbationReport:
    rows: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(r.verdict == "pass" for r in self.rows)

    def csv_lines(self):
        out = ["test,direction,eps,delta_j,stderr,verdict"]
        for r in self.rows:
            out.append(f"{r.test},{r.direction},{r.eps:.17g},{r.delta_j:.17g},"
                       f"{r.stderr:.17g},{r.verdict}")
        return out


def path_increments(seed: int, first: int, count: int, steps: int, dt: float) -> np.ndarray:
    """Brownian increments for paths [first, first+count), one substream per
    path keyed by (seed, path index); independent of chunk layout."""
    out = np.empty((count, steps))
    root = np.asarray(np.uint64(seed))
    for i in range(count):
        ss = np.random.SeedSequence(entropy=int(root), spawn_key=(first + i,))
        gen = np.random.Generator(np.random.Philox(ss))
        out[i] = gen.normal(0.0, np.sqrt(dt), size=steps)
    return out


def _subtimes(grid, substeps: int) -> np.ndarray:
    fine = make_grid(grid.horizon, grid.steps * substeps)
    return fine.nodes


def _at_times(path: MatrixPath, times) -> np.ndarray:
    return np.stack([path.at(t) for t in times])


def _precompute_base(sol: EquilibriumSolution, substeps: int) -> dict:
    """Sample everything the fused Euler loop needs at the sub-grid nodes."""
    spec = sol.spec
    times = _subtimes(spec.grid, substeps)
    left = times[:-1]
    n = spec.n

    pre = {
        "times": times,
        "dt": times[1] - times[0],
        "steps": len(times) - 1,
        "n": n,
        "A": _at_times(sol.Atil, left),
        "b": _at_times(sol.Btil, left)[:, :, 0],
        "C": _at_times(sol.Ctil, left),
        "d": _at_times(sol.Dtil, left)[:, :, 0],
        "Q": _at_times(spec.Q, left),
        "R1": _at_times(spec.R1, left),
        "R2": _at_times(spec.R2, left),
        "R0": _at_times(spec.R0, left),
        "R0h": _at_times(spec.R0hat, left),
        "G": spec.G,
        "x0": sol.dh.Xi[:, 0],
    }

    S = pre["steps"]
    m1, m2 = spec.m1, spec.m2
    u1_gain = np.empty((S, m1, 10 * n))
    u1_off = np.empty((S, m1))
    u2_gain = np.empty((S, m2, 10 * n))
    u2_off = np.empty((S, m2))
    f_gain = np.empty((S, n, 10 * n))
    f_off = np.empty((S, n))
    f2_gain = np.empty((S, n, 10 * n))
    f2_off = np.empty((S, n))
    row_p, row_x = sol.sel.row_pbar, sol.sel.row_xtil
    for k, t in enumerate(left):
        rt1 = np.linalg.inv(sol.rtilde1_at(t))
        rbb = np.linalg.inv(sol.rbb_at(t))
        u1_gain[k] = rt1 @ sol.gains.PM1.at(t)
        u1_off[k] = (rt1 @ sol.gains.phiM1.at(t))[:, 0]
        u2_gain[k] = rbb @ sol.gains.PM2.at(t)
        u2_off[k] = (rbb @ sol.gains.phiM2.at(t))[:, 0]
        Ph, ph = sol.Phat.at(t), sol.phihat.at(t)
        r0inv = np.linalg.inv(spec.R0.at(t))
        r0hinv = np.linalg.inv(spec.R0hat.at(t))
        f_gain[k] = -(2.0 / spec.alpha) * r0inv @ row_p @ Ph
        f_off[k] = (-(2.0 / spec.alpha) * r0inv @ row_p @ ph)[:, 0]
        f2_gain[k] = (2.0 / spec.gamma) * r0hinv @ row_x @ Ph
        f2_off[k] = ((2.0 / spec.gamma) * r0hinv @ row_x @ ph)[:, 0]
    pre.update(u1_gain=u1_gain, u1_off=u1_off, u2_gain=u2_gain, u2_off=u2_off,
               f_gain=f_gain, f_off=f_off, f2_gain=f2_gain, f2_off=f2_off,
               alpha=spec.alpha, gamma=spec.gamma)
    return pre


def _base_at(pre, k, X):
    n = pre["n"]
    return {
        "x": X[:, :n],
        "xbar": X[:, n:2 * n],
        "u1": X @ pre["u1_gain"][k].T + pre["u1_off"][k],
        "u2": X @ pre["u2_gain"][k].T + pre["u2_off"][k],
        "f": X @ pre["f_gain"][k].T + pre["f_off"][k],
        "f2": X @ pre["f2_gain"][k].T + pre["f2_off"][k],
    }


def _qform(M, a, b=None):
    """Rows of a (paths, i) against M (i, j) and b (paths, j)."""
    if b is None:
        b = a
    return np.einsum("pi,pi->p", a @ M, b)


def _qform_dir(M, a, Z):
    """a (paths, i) with M (i, j) against per-direction Z (paths, j, D)."""
    return np.einsum("pi,pid->pd", a @ M, Z)


def _quad_dir(M, Z, W=None):
    if W is None:
        W = Z
    return np.einsum("pid,ij,pjd->pd", Z, M, W)


# ---------------------------------------------------------------------------
# linear-response systems of the four perturbation tests


def _unit_directions(rng, grid, dim: int, count: int, pieces: int = 8):
    """Random piecewise-constant deterministic direction paths with unit
    L2 norm, sampled onto the grid."""
    out = []
    T = grid.horizon
    for _ in range(count):
        vals = rng.standard_normal((pieces, dim))
        samples = np.empty((len(grid), dim, 1))
        for k, t in enumerate(grid.nodes):
            j = min(int(pieces * t / T), pieces - 1)
            samples[k, :, 0] = vals[j]
        norm2 = np.trapezoid([float(v[:, 0] @ v[:, 0]) for v in samples], grid.nodes)
        out.append(MatrixPath(grid, samples / np.sqrt(max(norm2, 1e-300))))
    return out


def _dirs_at(dirs, times):
    arr = np.empty((len(times), dirs[0].rows, len(dirs)))
    for j, d in enumerate(dirs):
        for k, t in enumerate(times):
            arr[k, :, j] = d.at(t)[:, 0]
    return arr


class _TestSystem:
    """Per-test linear response: dZ = (A Z + b)dt + (C Z + d)dW, Z(0)=0,
    with per-step cross/quad integrand hooks."""

    def __init__(self, name, dim, D):
        self.name = name
        self.dim = dim
        self.D = D
        self.A = None       # (S, dim, dim)
        self.b = None       # (S, dim, D)
        self.Cm = None      # (S, dim, dim)
        self.d = None       # (S, dim, D)

    def cross_step(self, pre, k, base, Z):
        raise NotImplementedError

    def quad_step(self, pre, k, Z):
        raise NotImplementedError

    def cross_terminal(self, pre, base_T, Z):
        raise NotImplementedError

    def quad_terminal(self, pre, Z):
        raise NotImplementedError


class _FollowerControlTest(_TestSystem):
    """Follower deviates u1 -> u1 + eps*v; the combined disturbance
    re-optimizes through its linear response; leader replays."""

    def __init__(self, sol, dirs, substeps):
        super().__init__("follower_control", sol.spec.n, len(dirs))
        spec = sol.spec
        times = _subtimes(spec.grid, substeps)
        left = times[:-1]
        S = len(left)
        n = spec.n
        a = 2.0 / spec.alpha
        phis = [backward.solve_offset_b1(spec, sol.P1, u1=v, include_sigma=False)
                for v in dirs]
        self.v = _dirs_at(dirs, left)                      # (S, m1, D)
        self.A = np.empty((S, n, n))
        self.b = np.empty((S, n, self.D))
        self.Cm = np.empty((S, n, n))
        self.d = np.empty((S, n, self.D))
        self.df_gain = np.empty((S, n, n))
        self.df_off = np.empty((S, n, self.D))
        for k, t in enumerate(left):
            A, C = spec.A.at(t), spec.C.at(t)
            B1, D1 = spec.B1.at(t), spec.D1.at(t)
            P1 = sol.P1.at(t)
            r0inv = np.linalg.inv(spec.R0.at(t))
            phi = np.hstack([p.phi.at(t) for p in phis])   # (n, D)
            self.A[k] = A - a * r0inv @ P1
            self.b[k] = B1 @ self.v[k] - a * r0inv @ phi
            self.Cm[k] = C
            self.d[k] = D1 @ self.v[k]
            self.df_gain[k] = -a * r0inv @ P1
            self.df_off[k] = -a * r0inv @ phi

    def _df(self, k, Z):
        return np.einsum("ij,pjd->pid", self.df_gain[k], Z) + self.df_off[k]

    def cross_step(self, pre, k, base, Z):
        df = self._df(k, Z)
        out = 2.0 * _qform_dir(pre["Q"][k], base["xbar"], Z)
        out += 2.0 * (base["u1"] @ pre["R1"][k]) @ self.v[k]
        out -= pre["alpha"] * np.einsum("pi,pid->pd", base["f"] @ pre["R0"][k], df)
        return out

    def quad_step(self, pre, k, Z):
        df = self._df(k, Z)
        out = _quad_dir(pre["Q"][k], Z)
        out += np.einsum("id,ij,jd->d", self.v[k], pre["R1"][k], self.v[k])
        out -= 0.5 * pre["alpha"] * _quad_dir(pre["R0"][k], df)
        return out

    def cross_terminal(self, pre, base_T, Z):
        return 2.0 * _qform_dir(pre["G"], base_T["xbar"], Z)

    def quad_terminal(self, pre, Z):
        return _quad_dir(pre["G"], Z)


class _LeaderControlTest(_TestSystem):
    """Leader deviates u2 -> u2 + eps*v; follower and both worst cases
    re-respond through the 5n decoupled response."""

    def __init__(self, sol, dirs, substeps):
        spec = sol.spec
        n = spec.n
        super().__init__("leader_control", 5 * n, len(dirs))
        ensure_diagnostics(sol)
        bb, P3 = sol.bb, sol.P3
        times = _subtimes(spec.grid, substeps)
        left = times[:-1]
        S = len(left)
        phis = [backward.solve_offset_b3(bb, P3, u2=v, include_sources=False)
                for v in dirs]
        self.v = _dirs_at(dirs, left)                      # (S, m2, D)
        five = 5 * n
        self.A = np.empty((S, five, five))
        self.b = np.empty((S, five, self.D))
        self.Cm = np.empty((S, five, five))
        self.d = np.empty((S, five, self.D))
        self.du1_gain = np.empty((S, spec.m1, five))
        self.du1_off = np.empty((S, spec.m1, self.D))
        self.df2_gain = np.empty((S, n, five))
        self.df2_off = np.empty((S, n, self.D))

        r_xtil = augment.block_row(0, n, 5)
        r_xbar = augment.block_row(1, n, 5)
        r_ybar = augment.block_row(3, n, 5)
        g = 2.0 / spec.gamma
        eye5 = np.eye(five)
        for k, t in enumerate(left):
            P3t = P3.at(t)
            q = np.hstack([p.phi.at(t) for p in phis])     # (5n, D)
            vk = self.v[k]
            Ab, Cb = bb.A.at(t), bb.C.at(t)
            B1b, B2b, B3b = bb.B1.at(t), bb.B2.at(t), bb.B3.at(t)
            D1b, D2b, D3b = bb.D1.at(t), bb.D2.at(t), bb.D3.at(t)
            gap = eye5 - P3t @ D3b
            Zx = np.linalg.solve(gap, P3t @ Cb + P3t @ D1b @ P3t)
            zoff = np.linalg.solve(gap, P3t @ D1b @ q + P3t @ D2b @ vk)
            self.A[k] = Ab + B1b @ P3t + B3b @ Zx
            self.b[k] = B1b @ q + B3b @ zoff + B2b @ vk
            self.Cm[k] = Cb + D1b @ P3t + D3b @ Zx
            self.d[k] = D1b @ q + D3b @ zoff + D2b @ vk

            B1s, D1s, D2s = spec.B1.at(t), spec.D1.at(t), spec.D2.at(t)
            K = B1s.T @ sol.P.at(t) + D1s.T @ sol.P.at(t) @ spec.C.at(t)
            rt1inv = np.linalg.inv(sol.rtilde1_at(t))
            self.du1_gain[k] = rt1inv @ (B1s.T @ r_ybar @ P3t + D1s.T @ r_ybar @ Zx
                                         - K @ r_xbar)
            self.du1_off[k] = rt1inv @ (B1s.T @ r_ybar @ q + D1s.T @ r_ybar @ zoff
                                        - D1s.T @ sol.P.at(t) @ D2s @ vk)
            r0hinv = np.linalg.inv(spec.R0hat.at(t))
            self.df2_gain[k] = g * r0hinv @ r_xtil @ P3t
            self.df2_off[k] = g * r0hinv @ r_xtil @ q

    def _du1(self, k, Z):
        return np.einsum("ij,pjd->pid", self.du1_gain[k], Z) + self.du1_off[k]

    def _df2(self, k, Z):
        return np.einsum("ij,pjd->pid", self.df2_gain[k], Z) + self.df2_off[k]

    def cross_step(self, pre, k, base, Z):
        n = pre["n"]
        dx = Z[:, :n, :]
        out = 2.0 * _qform_dir(pre["Q"][k], base["x"], dx)
        out += 2.0 * np.einsum("pi,pid->pd", base["u1"] @ pre["R1"][k], self._du1(k, Z))
        out += 2.0 * (base["u2"] @ pre["R2"][k]) @ self.v[k]
        out += pre["gamma"] * np.einsum("pi,pid->pd", base["f2"] @ pre["R0h"][k],
                                        self._df2(k, Z))
        return out

    def quad_step(self, pre, k, Z):
        n = pre["n"]
        dx = Z[:, :n, :]
        du1 = self._du1(k, Z)
        df2 = self._df2(k, Z)
        out = _quad_dir(pre["Q"][k], dx)
        out += _quad_dir(pre["R1"][k], du1)
        out += np.einsum("id,ij,jd->d", self.v[k], pre["R2"][k], self.v[k])
        out += 0.5 * pre["gamma"] * _quad_dir(pre["R0h"][k], df2)
        return out

    def cross_terminal(self, pre, base_T, Z):
        n = pre["n"]
        return 2.0 * _qform_dir(pre["G"], base_T["x"], Z[:, :n, :])

    def quad_terminal(self, pre, Z):
        n = pre["n"]
        return _quad_dir(pre["G"], Z[:, :n, :])


class _DisturbanceTest(_TestSystem):
    """Additive disturbance deviation f -> f + eps*h (follower side) or
    f2 -> f2 + eps*h (leader side); controls replay."""

    def __init__(self, sol, dirs, substeps, side):
        spec = sol.spec
        super().__init__(f"{side}_disturbance", spec.n, len(dirs))
        self.side = side
        times = _subtimes(spec.grid, substeps)
        left = times[:-1]
        S = len(left)
        n = spec.n
        self.h = _dirs_at(dirs, left)                     # (S, n, D)
        self.A = np.stack([spec.A.at(t) for t in left])
        self.Cm = np.stack([spec.C.at(t) for t in left])
        self.b = self.h.copy()
        self.d = np.zeros((S, n, self.D))

    def cross_step(self, pre, k, base, Z):
        if self.side == "follower":
            out = 2.0 * _qform_dir(pre["Q"][k], base["xbar"], Z)
            out -= pre["alpha"] * (base["f"] @ pre["R0"][k]) @ self.h[k]
        else:
            out = 2.0 * _qform_dir(pre["Q"][k], base["x"], Z)
            out += pre["gamma"] * (base["f2"] @ pre["R0h"][k]) @ self.h[k]
        return out

    def quad_step(self, pre, k, Z):
        out = _quad_dir(pre["Q"][k], Z)
        hh = np.einsum("id,ij,jd->d", self.h[k], pre["R0"][k] if self.side == "follower"
                       else pre["R0h"][k], self.h[k])
        if self.side == "follower":
            out -= 0.5 * pre["alpha"] * hh
        else:
            out += 0.5 * pre["gamma"] * hh
        return out

    def cross_terminal(self, pre, base_T, Z):
        key = "xbar" if self.side == "follower" else "x"
        return 2.0 * _qform_dir(pre["G"], base_T[key], Z)

    def quad_terminal(self, pre, Z):
        return _quad_dir(pre["G"], Z)


# ---------------------------------------------------------------------------
# fused Euler loop


def _run(sol: EquilibriumSolution, cfg: SimConfig, tests=()):
    """Simulate the closed loop and all requested linear responses under
    common increments; returns per-path costs and per-test (cross, quad)."""
    pre = _precompute_base(sol, cfg.substeps)
    S, dt = pre["steps"], pre["dt"]
    dim = len(pre["x0"])

    j = np.empty(cfg.paths)
    jf = np.empty(cfg.paths)
    jl = np.empty(cfg.paths)
    terminal = np.empty((cfg.paths, dim))
    cross = {t.name: np.empty((cfg.paths, t.D)) for t in tests}
    quad = {t.name: np.empty((cfg.paths, t.D)) for t in tests}

    done = 0
    blown = 0
    while done < cfg.paths:
        count = min(cfg.chunk, cfg.paths - done)
        dW = path_increments(cfg.seed, done, count, S, dt)
        X = np.tile(pre["x0"], (count, 1))
        Z = {t.name: np.zeros((count, t.dim, t.D)) for t in tests}
        cj = np.zeros(count)
        cjf = np.zeros(count)
        cjl = np.zeros(count)
        ccross = {t.name: np.zeros((count, t.D)) for t in tests}
        cquad = {t.name: np.zeros((count, t.D)) for t in tests}

        # diverged paths propagate nan by design and are flagged afterwards
        with np.errstate(invalid="ignore", over="ignore"):
            for k in range(S):
                base = _base_at(pre, k, X)
                cj += dt * (_qform(pre["Q"][k], base["x"])
                            + _qform(pre["R1"][k], base["u1"])
                            + _qform(pre["R2"][k], base["u2"]))
                cjf += dt * (_qform(pre["Q"][k], base["xbar"])
                             + _qform(pre["R1"][k], base["u1"])
                             + _qform(pre["R2"][k], base["u2"])
                             - 0.5 * pre["alpha"] * _qform(pre["R0"][k], base["f"]))
                cjl += dt * (_qform(pre["Q"][k], base["x"])
                             + _qform(pre["R1"][k], base["u1"])
                             + _qform(pre["R2"][k], base["u2"])
                             + 0.5 * pre["gamma"] * _qform(pre["R0h"][k], base["f2"]))
                for t in tests:
                    zk = Z[t.name]
                    ccross[t.name] += dt * t.cross_step(pre, k, base, zk)
                    cquad[t.name] += dt * t.quad_step(pre, k, zk)
                    drift = np.einsum("ij,pjd->pid", t.A[k], zk) + t.b[k]
                    diff = np.einsum("ij,pjd->pid", t.Cm[k], zk) + t.d[k]
                    Z[t.name] = zk + dt * drift + diff * dW[:, k, None, None]
                incr = dW[:, k][:, None]
                X = X + dt * (X @ pre["A"][k].T + pre["b"][k]) \
                    + (X @ pre["C"][k].T + pre["d"][k]) * incr

            base_T = {"x": X[:, :pre["n"]], "xbar": X[:, pre["n"]:2 * pre["n"]]}
            cj += _qform(pre["G"], base_T["x"])
            cjf += _qform(pre["G"], base_T["xbar"])
            cjl += _qform(pre["G"], base_T["x"])
            for t in tests:
                ccross[t.name] += t.cross_terminal(pre, base_T, Z[t.name])
                cquad[t.name] += t.quad_terminal(pre, Z[t.name])

        bad = ~np.isfinite(X).all(axis=1)
        for t in tests:
            bad |= ~np.isfinite(Z[t.name]).all(axis=(1, 2))
        blown += int(bad.sum())
        if bad.any():
            cj[bad] = np.nan
            cjf[bad] = np.nan
            cjl[bad] = np.nan

        sl = slice(done, done + count)
        j[sl], jf[sl], jl[sl] = cj, cjf, cjl
        terminal[sl] = X
        for t in tests:
            cross[t.name][sl] = ccross[t.name]
            quad[t.name][sl] = cquad[t.name]
        done += count

    if blown > BLOWUP_PATH_BUDGET * cfg.paths:
        raise BlowUpError(
            f"{blown} of {cfg.paths} simulated paths blew up (budget "
            f"{BLOWUP_PATH_BUDGET:.1%})"
        )
    return SimOutput(terminal=terminal, j=j, j_follower=jf, j_leader=jl,
                     blown=blown), cross, quad


def simulate(sol: EquilibriumSolution, cfg: SimConfig) -> SimOutput:
    """Euler-Maruyama simulation of the equilibrium closed loop."""
    out, _, _ = _run(sol, cfg)
    return out


def _mean_se(arr):
    mean = float(np.mean(arr))
    se = float(np.std(arr, ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
    return mean, se


def _verdict(mean, se, lower_ok: bool, scale: float) -> str:
    """3-stderr rule with an explicit inconclusive band.

    lower_ok=True encodes a `mean >= -3 se` requirement (deviations should
    not help), else `mean <= +3 se`.  A pass additionally requires the
    noise floor to resolve the expected effect scale.
    """
    bound = 3.0 * se
    if lower_ok and mean < -bound:
        return "fail"
    if not lower_ok and mean > bound:
        return "fail"
    if se == 0.0:
        return "pass"
    if bound <= max(abs(mean), scale):
        return "pass"
    return "inconclusive"


def perturb_best_response(sol: EquilibriumSolution, cfg: SimConfig,
                          directions: int = 20, eps=(0.05, 0.1),
                          directions_seed: int | None = None) -> PerturbationReport:
    """Best-response perturbation suite under common random numbers.

    Follower-control and leader-disturbance deviations must not lower the
    respective costs; leader-control and follower-disturbance deviations
    must not raise them.  Each deviation direction is a random unit-norm
    deterministic path; the replayed players' strategies and the linear
    worst-case responses ride on the same Brownian increments.
    """
    spec = sol.spec
    rng = np.random.Generator(np.random.Philox(
        np.random.SeedSequence(entropy=cfg.seed if directions_seed is None
                               else directions_seed, spawn_key=(0xD1,))))
    dirs_u1 = _unit_directions(rng, spec.grid, spec.m1, directions)
    dirs_u2 = _unit_directions(rng, spec.grid, spec.m2, directions)
    dirs_f = _unit_directions(rng, spec.grid, spec.n, directions)
    dirs_f2 = _unit_directions(rng, spec.grid, spec.n, directions)

    tests = [
        _FollowerControlTest(sol, dirs_u1, cfg.substeps),
        _LeaderControlTest(sol, dirs_u2, cfg.substeps),
        _DisturbanceTest(sol, dirs_f, cfg.substeps, "follower"),
        _DisturbanceTest(sol, dirs_f2, cfg.substeps, "leader"),
    ]
    _, cross, quad = _run(sol, cfg, tests)

    # deviation must not lower J^wo (follower minimizes) or J~_f (leader-side
    # disturbance minimizes); must not raise J~^wo / J_f (maximizers)
    lower_ok = {"follower_control": True, "leader_control": False,
                "follower_disturbance": False, "leader_disturbance": True}

    report = PerturbationReport()
    for t in tests:
        for d in range(t.D):
            c = cross[t.name][:, d]
            q = quad[t.name][:, d]
            for e in eps:
                if e == 0.0:
                    report.rows.append(PerturbationRow(t.name, d, 0.0, 0.0, 0.0, "pass"))
                    continue
                samples = e * c + e * e * q
                mean, se = _mean_se(samples)
                scale = e * e * abs(float(np.mean(q)))
                report.rows.append(PerturbationRow(
                    t.name, d, float(e), mean, se,
                    _verdict(mean, se, lower_ok[t.name], scale)))
    return report


_CONVEXITY_SIGNS = {
    # functional name -> (test name, sign of the quad mean)
    "follower_disturbance_concavity": ("follower_disturbance", -1.0),
    "follower_control_convexity": ("follower_control", +1.0),
    "leader_disturbance_convexity": ("leader_disturbance", +1.0),
    "leader_control_concavity": ("leader_control", -1.0),
}


def sampled_convexity(sol: EquilibriumSolution, cfg: SimConfig,
                      samples: int = 10, directions_seed: int | None = None) -> PerturbationReport:
    """Sampled second-variation functionals of the four nested problems.

    For random unit perturbation paths the quadratic response of each
    problem's objective is estimated by simulating the auxiliary linear
    systems; a uniformly positive sample is evidence for the corresponding
    definiteness assumption (sampling cannot prove it).
    """
    spec = sol.spec
    rng = np.random.Generator(np.random.Philox(
        np.random.SeedSequence(entropy=cfg.seed if directions_seed is None
                               else directions_seed, spawn_key=(0xC0,))))
    dirs_u1 = _unit_directions(rng, spec.grid, spec.m1, samples)
    dirs_u2 = _unit_directions(rng, spec.grid, spec.m2, samples)
    dirs_f = _unit_directions(rng, spec.grid, spec.n, samples)
    dirs_f2 = _unit_directions(rng, spec.grid, spec.n, samples)

    tests = [
        _FollowerControlTest(sol, dirs_u1, cfg.substeps),
        _LeaderControlTest(sol, dirs_u2, cfg.substeps),
        _DisturbanceTest(sol, dirs_f, cfg.substeps, "follower"),
        _DisturbanceTest(sol, dirs_f2, cfg.substeps, "leader"),
    ]
    _, _, quad = _run(sol, cfg, tests)

    report = PerturbationReport()
    for fname, (tname, sign) in _CONVEXITY_SIGNS.items():
        for d in range(quad[tname].shape[1]):
            vals = sign * quad[tname][:, d]
            mean, se = _mean_se(vals)
            if mean - 3.0 * se > 0.0:
                verdict = "pass"
            elif mean + 3.0 * se < 0.0:
                verdict = "fail"
            else:
                verdict = "inconclusive"
            report.rows.append(PerturbationRow(fname, d, 1.0, mean, se, verdict))
    return report


# ---------------------------------------------------------------------------
# deterministic two-point boundary-value oracle


@dataclass
class OracleResult:
    times: np.ndarray
    X_oracle: np.ndarray
    Y_oracle: np.ndarray
    X_pipeline: np.ndarray
    Y_pipeline: np.ndarray

    @property
    def gap(self) -> float:
        gx = np.max(np.linalg.norm(self.X_oracle - self.X_pipeline, axis=1)
                    / (1.0 + np.linalg.norm(self.X_pipeline, axis=1)))
        gy = np.max(np.linalg.norm(self.Y_oracle - self.Y_pipeline, axis=1)
                    / (1.0 + np.linalg.norm(self.Y_pipeline, axis=1)))
        return float(max(gx, gy))


def _integrate_forward(Apath, bpath, x0, grid):
    out = np.empty((len(grid), len(x0)))
    out[0] = x0
    h = grid.dt

    def f(t, x):
        return Apath.at(t) @ x + bpath.at(t)[:, 0]

    for k in range(grid.steps):
        t = grid.nodes[k]
        x = out[k]
        k1 = f(t, x)
        k2 = f(t + 0.5 * h, x + 0.5 * h * k1)
        k3 = f(t + 0.5 * h, x + 0.5 * h * k2)
        k4 = f(t + h, x + h * k3)
        out[k + 1] = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return out


def bvp_oracle(sol: EquilibriumSolution, coarse_n: int = 64) -> OracleResult:
    """Direct implicit-Euler discretization of the forward-backward
    optimality system as one dense linear solve, compared against the
    Riccati pipeline on the noise-free skeleton.

    The skeleton drops the Brownian terms, under which the martingale
    component of the backward pair vanishes; the comparison is exact (up
    to discretization) when the diffusion couplings C, D1, D2 of the game
    are zero, which is the regime this oracle is meant for.
    """
    dh = sol.dh
    ten = dh.A1.rows
    grid = make_grid(sol.spec.grid.horizon, coarse_n)
    dtc = grid.dt
    m = 2 * (coarse_n + 1) * ten
    M = np.zeros((m, m))
    rhs = np.zeros(m)

    def xi(k):
        return slice(k * ten, (k + 1) * ten)

    def yi(k):
        return slice((coarse_n + 1 + k) * ten, (coarse_n + 2 + k) * ten)

    eye = np.eye(ten)
    row = 0
    M[row:row + ten, xi(0)] = eye
    rhs[row:row + ten] = dh.Xi[:, 0]
    row += ten
    for k in range(coarse_n):
        t_next = grid.nodes[k + 1]
        sl = slice(row, row + ten)
        M[sl, xi(k + 1)] = eye - dtc * dh.A1.at(t_next)
        M[sl, xi(k)] = -eye
        M[sl, yi(k + 1)] = -dtc * dh.B1.at(t_next)
        rhs[sl] = dtc * dh.F.at(t_next)[:, 0]
        row += ten
    for k in range(coarse_n):
        t_here = grid.nodes[k]
        sl = slice(row, row + ten)
        M[sl, yi(k + 1)] = eye
        M[sl, yi(k)] = -eye + dtc * dh.A2.at(t_here).T
        M[sl, xi(k)] = -dtc * dh.Q.at(t_here)
        rhs[sl] = dtc * dh.Upsilon.at(t_here)[:, 0]
        row += ten
    sl = slice(row, row + ten)
    M[sl, yi(coarse_n)] = eye
    M[sl, xi(coarse_n)] = -dh.G
    row += ten
    assert row == m

    try:
        solvec = np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError as exc:
        raise BlowUpError(f"oracle system is singular: {exc}") from exc

    Xo = solvec[: (coarse_n + 1) * ten].reshape(coarse_n + 1, ten)
    Yo = solvec[(coarse_n + 1) * ten:].reshape(coarse_n + 1, ten)

    # pipeline skeleton on the fine grid, sampled at the coarse nodes
    Xfine = _integrate_forward(sol.Atil, sol.Btil, dh.Xi[:, 0], sol.spec.grid)
    fine_path = MatrixPath(sol.spec.grid, Xfine[:, :, None])
    Xp = np.empty_like(Xo)
    Yp = np.empty_like(Yo)
    for k, t in enumerate(grid.nodes):
        xk = fine_path.at(t)[:, 0]
        Xp[k] = xk
        Yp[k] = sol.Phat.at(t) @ xk + sol.phihat.at(t)[:, 0]
    return OracleResult(times=grid.nodes, X_oracle=Xo, Y_oracle=Yo,
                        X_pipeline=Xp, Y_pipeline=Yp)
