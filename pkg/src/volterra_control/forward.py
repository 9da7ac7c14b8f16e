"""Forward simulation of the lifted stochastic dynamics.

The scheme is implicit (backward) Euler on the differential-algebraic lift:
one linear solve per step handles the stiff node relaxations and the
algebraic constraint together, while the coefficient maps f and r are lagged
one step.  Noise enters as g * dW/dt inside the constraint solve, so the
recorded u samples are grid-resolution objects; their time integrals
converge.  A direct product-integration solver for the original convolution
equation is provided as an independent deterministic oracle.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .errors import BlowUpError, DomainError, LinearSolveError
from .kernel import BernsteinKernel, DISCRETE, EXPONENTIAL, FRACTIONAL
from .lift import DiscreteLift, History

BLOWUP_NORM = 1e12
PATH_BLOCK = 1024  # fixed chunk size; results do not depend on thread count


@dataclass(frozen=True)
class Constants:
    """Declared bounds of the coefficient pack (spot-checked, not inferred)."""

    L_f: float = 1.0
    C_r: float = 1.0
    C_l: float = 1.0
    L_phi: float = 1.0


@dataclass
class ProblemSpec:
    """Coefficient pack of one control problem on a given lift.

    f(t, u) -> (d,) drift; accepts u of shape (..., d) and broadcasts.
    g        : (d, m) noise loading matrix.
    r(t, u, gamma) -> (..., m) bounded control drift; None for problems
               without a control channel.
    l(t, u, gamma) -> (...,) running cost.
    phi(u)   -> (...,) terminal cost.
    controls : finite set of control actions (None when uncontrolled).
    f_jac(t, u) -> (d, d) optional analytic Jacobian of f in u; when absent
               the sensitivity module falls back to central differences.
    """

    lift: DiscreteLift
    f: Callable
    g: np.ndarray
    phi: Callable
    history: History
    r: Optional[Callable] = None
    l: Optional[Callable] = None
    controls: Optional["ControlSet"] = None
    f_jac: Optional[Callable] = None
    constants: Constants = field(default_factory=Constants)

    def __post_init__(self):
        g = np.atleast_2d(np.asarray(self.g, dtype=float))
        if g.shape[0] != self.lift.d:
            raise DomainError(f"g must have {self.lift.d} rows")
        g.setflags(write=False)
        self.g = g

    @property
    def m(self) -> int:
        return self.g.shape[1]

    @property
    def d(self) -> int:
        return self.lift.d

    def spot_check(self, seed: int = 0, n_samples: int = 64) -> dict:
        """Sample-based check of the declared bounds; returns the observed values."""
        rng = np.random.default_rng(seed)
        d = self.d
        us = rng.normal(scale=2.0, size=(n_samples, d))
        ts = rng.uniform(0.0, 1.0, size=n_samples)
        out = {"r_bound_ok": True, "r_max": 0.0, "f_lip_ok": True, "f_lip_max": 0.0}
        if self.r is not None and self.controls is not None:
            r_max = 0.0
            for gamma in self.controls.points:
                for t, u in zip(ts, us):
                    r_max = max(r_max, float(np.linalg.norm(np.atleast_1d(self.r(t, u, gamma)))))
            out["r_max"] = r_max
            out["r_bound_ok"] = r_max <= self.constants.C_r + 1e-9
        lip = 0.0
        for k in range(n_samples - 1):
            du = np.linalg.norm(us[k + 1] - us[k])
            if du > 1e-12:
                df = np.linalg.norm(
                    np.atleast_1d(self.f(ts[k], us[k + 1])) - np.atleast_1d(self.f(ts[k], us[k]))
                )
                lip = max(lip, df / du)
        out["f_lip_max"] = lip
        out["f_lip_ok"] = lip <= self.constants.L_f + 1e-9
        return out


@dataclass(frozen=True)
class ControlSet:
    """Finite set of control actions (scalar points or small vectors)."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 0:
            pts = pts[None]
        if pts.size == 0:
            raise DomainError("control set must not be empty")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @staticmethod
    def from_interval(lo: float, hi: float, num: int) -> "ControlSet":
        if num < 2 or not (lo < hi):
            raise DomainError("interval control set needs lo < hi and num >= 2")
        return ControlSet(points=np.linspace(lo, hi, num))

    def __len__(self) -> int:
        return self.points.shape[0]

    def __getitem__(self, idx):
        return self.points[idx]


@dataclass(frozen=True)
class PathBundle:
    """Simulated paths on a uniform grid.

    states : (P, N+1, n, d) lifted states
    u_traj : (P, N+1, d) extracted trajectories: entry k solves the
             constraint at state k with the deterministic forcing of the
             step into k (drift plus control drift, noise excluded), which
             is the discrete trace of the state.  The step-internal u, which
             carries the distributional g dW/dt term, stays internal to the
             state update; costs, features and policies consume the trace.
    dW     : (P, N, m) Brownian increments; increment k drives step k -> k+1
    controls : (P, N) applied control values, or None for uncontrolled runs
    """

    grid: np.ndarray
    states: np.ndarray
    u_traj: np.ndarray
    dW: np.ndarray
    seed: int
    mode: str
    controls: Optional[np.ndarray] = None

    def __post_init__(self):
        for arr in (self.grid, self.states, self.u_traj, self.dW):
            np.asarray(arr).setflags(write=False)
        if self.controls is not None:
            np.asarray(self.controls).setflags(write=False)

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def n_steps(self) -> int:
        return self.grid.size - 1

    @property
    def dt(self) -> float:
        return float(self.grid[1] - self.grid[0])

    def to_csv(self, path, max_paths: Optional[int] = None, max_coords: int = 2) -> None:
        """Long-format dump: one row per (path, step) with t, u components,
        the first lifted coordinates and the applied control."""
        import csv as _csv

        P = self.n_paths if max_paths is None else min(max_paths, self.n_paths)
        d = self.u_traj.shape[2]
        n_show = min(max_coords, self.states.shape[2])
        header = (["path", "t"] + [f"u_{j}" for j in range(d)]
                  + [f"y_{i}_0" for i in range(n_show)] + ["control"])
        with open(path, "w", newline="") as fh:
            w = _csv.writer(fh)
            w.writerow(header)
            for p in range(P):
                for k in range(self.grid.size):
                    ctrl = ""
                    if self.controls is not None and k < self.n_steps:
                        ctrl = repr(float(self.controls[p, k]))
                    w.writerow([p, repr(float(self.grid[k]))]
                               + [repr(float(v)) for v in self.u_traj[p, k]]
                               + [repr(float(self.states[p, k, i, 0])) for i in range(n_show)]
                               + [ctrl])

    def save_npz(self, path) -> None:
        """Binary columnar dump for large runs."""
        ctrl = self.controls if self.controls is not None else np.zeros((0,))
        np.savez_compressed(path, grid=self.grid, states=self.states,
                            u_traj=self.u_traj, dW=self.dW, controls=ctrl,
                            seed=np.int64(self.seed), mode=np.array(self.mode),
                            has_controls=np.array(self.controls is not None))

    @staticmethod
    def load_npz(path) -> "PathBundle":
        with np.load(path, allow_pickle=False) as data:
            controls = data["controls"] if bool(data["has_controls"]) else None
            return PathBundle(grid=data["grid"], states=data["states"],
                              u_traj=data["u_traj"], dW=data["dW"],
                              seed=int(data["seed"]), mode=str(data["mode"]),
                              controls=controls)


def uniform_grid(T: float, N: int) -> np.ndarray:
    if T <= 0.0 or N < 1:
        raise DomainError("grid needs T > 0 and N >= 1")
    return np.linspace(0.0, T, N + 1)


def brownian(grid: np.ndarray, n_paths: int, m: int, seed: int) -> np.ndarray:
    """Gaussian increments N(0, dt) of shape (n_paths, N, m).

    Each path draws from its own Philox stream keyed on (seed, path index),
    with the (step, component) layout fixed inside the path block, so the
    output is identical for any number of worker threads and any path count.
    """
    if n_paths < 1:
        raise DomainError("need n_paths >= 1")
    N = np.asarray(grid).size - 1
    dt = float(grid[1] - grid[0])
    out = np.empty((n_paths, N, m))
    root = np.uint64(np.int64(seed).astype(np.uint64))
    for p in range(n_paths):
        bitgen = np.random.Philox(key=[root, np.uint64(p)])
        gen = np.random.Generator(bitgen)
        out[p] = gen.standard_normal((N, m)) * math.sqrt(dt)
    return out


def step(
    problem: ProblemSpec,
    state: np.ndarray,
    u_prev: np.ndarray,
    t: float,
    dt: float,
    dW: Optional[np.ndarray] = None,
    control=None,
) -> Tuple[np.ndarray, np.ndarray]:
    """One implicit step of a single path; returns (state', u').

    Solves (mu I - A) u' = sum_i w_i kappa_i y_i/(1+dt kappa_i) + f + g r
    + g dW/dt, then relaxes each node implicitly.  f and r are evaluated at
    the previous u (lagged).
    """
    if dt <= 0.0:
        raise DomainError("dt must be positive")
    lift = problem.lift
    state = np.asarray(state, dtype=float).reshape(lift.n, lift.d)
    forcing = np.atleast_1d(np.asarray(problem.f(t, u_prev), dtype=float)).astype(float)
    if control is not None:
        if problem.r is None:
            raise DomainError("problem has no control channel")
        forcing = forcing + problem.g @ np.atleast_1d(problem.r(t, u_prev, control))
    if dW is not None and problem.m > 0:
        forcing = forcing + problem.g @ (np.asarray(dW, dtype=float) / dt)
    decay = 1.0 + dt * lift.nodes
    memory = np.tensordot(lift.weights * lift.nodes / decay, state, axes=(0, 0))
    S = lift.step_solve_matrix(dt)
    u_new = S @ (memory + forcing)
    state_new = (state + dt * u_new[None, :]) / decay[:, None]
    if not np.all(np.isfinite(state_new)):
        raise BlowUpError("non-finite state after step", step_index=-1)
    return state_new, u_new


class _StepEngine:
    """Precomputed per-grid quantities for the vectorized path loop."""

    def __init__(self, problem: ProblemSpec, dt: float):
        lift = problem.lift
        self.lift = lift
        self.dt = dt
        self.decay = 1.0 + dt * lift.nodes  # (n,)
        self.mem_w = lift.weights * lift.nodes / self.decay  # (n,)
        self.S = lift.step_solve_matrix(dt)  # (d, d)
        self.g = problem.g

    def advance(self, Y: np.ndarray, forcing: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """One step for a block of paths. Y (P,n,d), forcing (P,d)."""
        memory = np.tensordot(self.mem_w, Y, axes=(0, 1))  # (P, d)
        U_new = (memory + forcing) @ self.S.T
        Y_new = (Y + self.dt * U_new[:, None, :]) / self.decay[None, :, None]
        return Y_new, U_new

    def trace(self, Y: np.ndarray, det_forcing: np.ndarray) -> np.ndarray:
        """Constraint trace of a block of states under the deterministic
        forcing: (c I - A) u = sum_i w_i kappa_i y_i + det_forcing."""
        return self.lift.extract_u(Y, forcing=det_forcing)


def _run_paths(
    problem: ProblemSpec,
    grid: np.ndarray,
    Y0: np.ndarray,
    U0: np.ndarray,
    dW: np.ndarray,
    mode: str,
    control_path: Optional[np.ndarray],
    policy,
    t_offset_index: int = 0,
) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """Advance a block of paths over the whole grid; returns (Y, U, controls)."""
    P = Y0.shape[0]
    N = grid.size - 1
    lift = problem.lift
    dt = float(grid[1] - grid[0])
    engine = _StepEngine(problem, dt)

    Y = np.empty((P, N + 1, lift.n, lift.d))
    U = np.empty((P, N + 1, lift.d))
    Y[:, 0] = Y0
    U[:, 0] = U0
    controls = np.empty((P, N)) if mode != "uncontrolled" else None

    for k in range(N):
        t_k = float(grid[k])
        u_k = U[:, k]
        drift = np.asarray(problem.f(t_k, u_k), dtype=float)
        drift = np.broadcast_to(drift, (P, lift.d)).copy()
        forcing = drift.copy()
        if mode == "open_loop":
            gam = control_path[k] if control_path.ndim == 1 else control_path[:, k]
            gam_arr = np.broadcast_to(np.asarray(gam, dtype=float), (P,))
            controls[:, k] = gam_arr
            rv = _r_block(problem, t_k, u_k, gam_arr)
            forcing += rv @ problem.g.T
        elif mode == "feedback":
            gam_arr = np.asarray(policy(k + t_offset_index, Y[:, k], u_k), dtype=float)
            controls[:, k] = gam_arr
            rv = _r_block(problem, t_k, u_k, gam_arr)
            forcing += rv @ problem.g.T
        if problem.m > 0:
            forcing += (dW[:, k] / dt) @ problem.g.T
        Y[:, k + 1], _ = engine.advance(Y[:, k], forcing)
        # recorded trajectory: constraint trace under the drift alone, so the
        # u seen by costs and features is control-independent like u = Jx
        U[:, k + 1] = engine.trace(Y[:, k + 1], drift)
        if not np.all(np.isfinite(U[:, k + 1])):
            raise BlowUpError("non-finite state", step_index=k + 1)
    # cheap blow-up screen on the final norms
    sq = np.einsum("pkij,pkij->pk", Y, Y)
    if np.max(sq) > BLOWUP_NORM ** 2:
        raise BlowUpError("state norm exceeded blow-up threshold", step_index=int(np.argmax(np.max(sq, axis=0))))
    return Y, U, controls


def _r_block(problem: ProblemSpec, t: float, U: np.ndarray, gammas: np.ndarray) -> np.ndarray:
    """Evaluate r over a block of paths with per-path controls; (P, m)."""
    P = U.shape[0]
    uniq = np.unique(gammas)
    out = np.empty((P, problem.m))
    for gam in uniq:
        mask = gammas == gam
        rv = np.asarray(problem.r(t, U[mask], gam), dtype=float)
        out[mask] = np.broadcast_to(rv, (int(mask.sum()), problem.m))
    return out


def initial_u(problem: ProblemSpec, t0: float, Y0: np.ndarray) -> np.ndarray:
    """Pre-noise u-trace at the start of a run, from the algebraic constraint
    with the history's endpoint value feeding the lagged drift."""
    u_hist = problem.history.value_at_zero(problem.d)
    f0 = np.atleast_1d(np.asarray(problem.f(t0, u_hist), dtype=float))
    return problem.lift.extract_u(Y0, forcing=f0)


def simulate(
    problem: ProblemSpec,
    grid: np.ndarray,
    n_paths: int,
    seed: int,
    mode: str = "uncontrolled",
    control_path: Optional[np.ndarray] = None,
    policy=None,
    dW: Optional[np.ndarray] = None,
    threads: int = 1,
) -> PathBundle:
    """Simulate the lifted dynamics from the problem's history.

    mode "uncontrolled"       : forward equation without the control drift
    mode "open_loop"          : control_path holds gamma per step, shape (N,)
                                shared across paths or (P, N) per path
    mode "feedback"           : policy(k, states, u) -> gamma per path

    Paths are advanced in fixed blocks of 1024 so the output is bit-identical
    for any thread count.
    """
    if mode not in ("uncontrolled", "open_loop", "feedback"):
        raise DomainError(f"unknown mode {mode!r}")
    if mode == "open_loop":
        control_path = np.asarray(control_path, dtype=float)
        if control_path.shape[-1] != grid.size - 1:
            raise DomainError("control path length must match the number of steps")
    if mode == "feedback" and policy is None:
        raise DomainError("feedback mode needs a policy")
    lift = problem.lift
    y0 = lift.lift_history(problem.history)
    Y0 = np.broadcast_to(y0, (n_paths, lift.n, lift.d)).copy()
    U0 = np.broadcast_to(initial_u(problem, float(grid[0]), y0), (n_paths, lift.d)).copy()
    if dW is None:
        dW = brownian(grid, n_paths, problem.m, seed)
    else:
        dW = np.asarray(dW, dtype=float)
        if dW.shape != (n_paths, grid.size - 1, problem.m):
            raise DomainError("provided increments have the wrong shape")

    blocks = [(lo, min(lo + PATH_BLOCK, n_paths)) for lo in range(0, n_paths, PATH_BLOCK)]

    def run_block(bounds):
        lo, hi = bounds
        cp = control_path
        if cp is not None and cp.ndim == 2:
            cp = cp[lo:hi]
        return _run_paths(problem, grid, Y0[lo:hi], U0[lo:hi], dW[lo:hi],
                          mode, cp, policy)

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_block, blocks))
    else:
        results = [run_block(b) for b in blocks]

    Y = np.concatenate([r[0] for r in results], axis=0)
    U = np.concatenate([r[1] for r in results], axis=0)
    controls = None
    if mode != "uncontrolled":
        controls = np.concatenate([r[2] for r in results], axis=0)
    return PathBundle(grid=np.asarray(grid, dtype=float), states=Y, u_traj=U,
                      dW=dW, seed=seed, mode=mode, controls=controls)


def simulate_from_state(
    problem: ProblemSpec,
    grid: np.ndarray,
    start_index: int,
    y_start: np.ndarray,
    u_start: np.ndarray,
    n_paths: int,
    seed: int,
    mode: str = "uncontrolled",
    policy=None,
    dW: Optional[np.ndarray] = None,
) -> PathBundle:
    """Restart the dynamics from a known (state, u) pair at grid[start_index].

    The returned bundle lives on the subgrid grid[start_index:].
    """
    sub = np.asarray(grid, dtype=float)[start_index:]
    if sub.size < 2:
        raise DomainError("restart needs at least one step left on the grid")
    lift = problem.lift
    Y0 = np.broadcast_to(np.asarray(y_start, dtype=float), (n_paths, lift.n, lift.d)).copy()
    U0 = np.broadcast_to(np.asarray(u_start, dtype=float), (n_paths, lift.d)).copy()
    if dW is None:
        dW = brownian(sub, n_paths, problem.m, seed)
    Yr, Ur, controls = _run_paths(problem, sub, Y0, U0, dW, mode, None, policy,
                                  t_offset_index=start_index)
    return PathBundle(grid=sub, states=Yr, u_traj=Ur, dW=dW, seed=seed,
                      mode=mode, controls=controls)


# -- direct convolution-quadrature oracle -------------------------------------


def _integrated_kernel(kernel: BernsteinKernel, tau: np.ndarray) -> np.ndarray:
    """Exact integral of the kernel over [0, tau]."""
    tau = np.asarray(tau, dtype=float)
    if kernel.family == FRACTIONAL:
        from scipy.special import gamma as gamma_fn
        return tau ** kernel.rho / gamma_fn(kernel.rho + 1.0)
    if kernel.family == EXPONENTIAL:
        return (1.0 - np.exp(-kernel.kappa0 * tau)) / kernel.kappa0
    out = np.zeros_like(tau)
    for w, kap in zip(kernel.weights, kernel.nodes):
        if kap > 0.0:
            out += w * (1.0 - np.exp(-kap * tau)) / kap
        else:
            out += w * tau
    return out


def _first_moment_kernel(kernel: BernsteinKernel, tau: np.ndarray) -> np.ndarray:
    """Exact integral of s * a(s) over [0, tau]."""
    tau = np.asarray(tau, dtype=float)
    if kernel.family == FRACTIONAL:
        from scipy.special import gamma as gamma_fn
        return tau ** (kernel.rho + 1.0) / ((kernel.rho + 1.0) * gamma_fn(kernel.rho))
    if kernel.family == EXPONENTIAL:
        k = kernel.kappa0
        return (1.0 - (1.0 + k * tau) * np.exp(-k * tau)) / k ** 2
    out = np.zeros_like(tau)
    for w, kap in zip(kernel.weights, kernel.nodes):
        if kap > 0.0:
            out += w * (1.0 - (1.0 + kap * tau) * np.exp(-kap * tau)) / kap ** 2
        else:
            out += w * tau ** 2 / 2.0
    return out


def reference_volterra_solve(
    kernel: BernsteinKernel,
    A: np.ndarray,
    f_path: np.ndarray,
    grid: np.ndarray,
) -> np.ndarray:
    """Product-integration solver for the direct convolution equation
    d/dt integral a(t-s) u(s) ds = A u + f with zero history.

    The unknown is piecewise constant per cell while the kernel integral over
    each cell is exact, so the scheme handles the singularity at 0 without
    regularization.  O(N^2) work; meant as a desk-scale oracle for the lifted
    solver, not a production path.  f_path holds f(t_k) on the grid.
    """
    grid = np.asarray(grid, dtype=float)
    N = grid.size - 1
    dt = float(grid[1] - grid[0])
    A = np.atleast_2d(np.asarray(A, dtype=float))
    d = A.shape[0]
    f_path = np.asarray(f_path, dtype=float).reshape(N + 1, d)

    taus = dt * np.arange(N + 1)
    Ia = _integrated_kernel(kernel, taus)
    b = np.diff(Ia)  # b[j] = integral of a over [j dt, (j+1) dt]
    if b[0] <= 0.0:
        raise DomainError("kernel is not integrable over the first cell")

    u = np.zeros((N + 1, d))
    lhs = b[0] * np.eye(d) - dt * A
    lu = lu_factor(lhs)
    sum_f = np.zeros(d)
    sum_Au = np.zeros(d)
    for nstep in range(1, N + 1):
        sum_f = sum_f + dt * f_path[nstep]
        if nstep >= 2:
            # convolution of past values with the tail weights b[1..n-1]
            tail = np.tensordot(b[1:nstep][::-1], u[1:nstep], axes=(0, 0))
        else:
            tail = np.zeros(d)
        rhs = sum_f + dt * sum_Au - tail
        u[nstep] = lu_solve(lu, rhs)
        sum_Au = sum_Au + A @ u[nstep]
    return u


def volterra_residual(
    u_path: np.ndarray,
    kernel: BernsteinKernel,
    A: np.ndarray,
    f_path: np.ndarray,
    grid: np.ndarray,
) -> float:
    """Weak-form residual of a trajectory against the convolution equation.

    The convolution integral uses piecewise-linear interpolation of u with
    exact kernel moments per cell; its difference quotient is compared to the
    trapezoid average of A u + f over the cell.  Returned as a max over the
    grid, normalized by the scale of u.
    """
    grid = np.asarray(grid, dtype=float)
    N = grid.size - 1
    dt = float(grid[1] - grid[0])
    A = np.atleast_2d(np.asarray(A, dtype=float))
    d = A.shape[0]
    u = np.asarray(u_path, dtype=float).reshape(N + 1, d)
    f = np.asarray(f_path, dtype=float).reshape(N + 1, d)

    taus = dt * np.arange(N + 1)
    Ia = _integrated_kernel(kernel, taus)
    M1 = _first_moment_kernel(kernel, taus)
    b = np.diff(Ia)
    # c[j] = integral of a(tau) (tau - j dt)/dt over the j-th lag cell
    c = (np.diff(M1) - taus[:-1] * b) / dt

    conv = np.zeros((N + 1, d))
    for nstep in range(1, N + 1):
        j = np.arange(nstep)          # lag index for cell k = nstep - j
        k = nstep - j
        wk = b[j] - c[j]
        conv[nstep] = np.tensordot(wk, u[k], axes=(0, 0)) + np.tensordot(c[j], u[k - 1], axes=(0, 0))

    rate = (conv[1:] - conv[:-1]) / dt
    drift = u @ A.T + f
    mid = 0.5 * (drift[1:] + drift[:-1])
    resid = np.max(np.abs(rate - mid))
    scale = 1.0 + float(np.max(np.abs(u)))
    return float(resid / scale)
