"""Backward solver for the value function by regression on forward paths.

The pair (Y, Z) is built step by step from the terminal cost: Z comes from
the increment representation E[Y_{k+1} dW_k]/dt projected on the feature
basis, Y from the projection of Y_{k+1} plus the time-weighted Hamiltonian.
The recursion uses the bookkeeping

    Y_k = E_k[Y_{k+1}] + dt * psi(t_k, u_k, Z_k),

under which the time-zero value matches the cost of the optimal feedback and
every admissible control costs at least Y_0 (the verification inequality);
the mild-form residual check and the z-identification check below are stated
in the same convention.

Regression features are low-dimensional summaries of the lifted state: the
extracted trajectory u, the plain weighted node average and the
kappa-weighted node average, expanded to polynomials of degree two.
Full-state regression is deliberately avoided; it is ill-conditioned at desk
scale and the value depends on the state through exactly these traces.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .control import hamiltonian_block
from .errors import DomainError, NumericError
from .forward import PathBundle, ProblemSpec, simulate_from_state
from .lift import fractional_power


def state_features(problem: ProblemSpec, Y: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Feature map (u, sum_i w_i y_i, sum_i w_i kappa_i y_i); shape (P, 3d)."""
    lift = problem.lift
    s1 = np.tensordot(lift.weights, Y, axes=(0, 1))
    s2 = np.tensordot(lift.weights * lift.nodes, Y, axes=(0, 1))
    return np.concatenate([U, s1, s2], axis=1)


def poly2_design(X: np.ndarray) -> np.ndarray:
    """Design matrix with intercept, linear and quadratic monomials."""
    P, q = X.shape
    cols = [np.ones((P, 1)), X]
    for a in range(q):
        for b in range(a, q):
            cols.append((X[:, a] * X[:, b])[:, None])
    return np.concatenate(cols, axis=1)


def u_trace(problem: ProblemSpec, t: float, state: np.ndarray) -> np.ndarray:
    """Trajectory value consistent with a bare state: one refinement of the
    constraint solve with the drift evaluated at the homogeneous trace."""
    lift = problem.lift
    u0 = lift.extract_u(state)
    return lift.extract_u(state, forcing=np.atleast_1d(problem.f(t, u0)))


@dataclass
class _StepModel:
    mean: np.ndarray
    scale: np.ndarray
    coef_y: np.ndarray
    coef_z: np.ndarray  # (B, m)
    cond: float
    rank: int
    n_basis: int


@dataclass
class BsdeSolution:
    """Regression models per time step plus the sampled (Y, Z) processes.

    Y has shape (P, N+1) and satisfies Y[:, N] = phi(u_N) exactly; Z has
    shape (P, N, m).  The value evaluator composes the stored projections
    with the Hamiltonian, so value_block(k, states, u) returns the same
    numbers the recursion produced on in-sample states.
    """

    problem: ProblemSpec
    grid: np.ndarray
    models: List[_StepModel]
    Y: np.ndarray
    Z: np.ndarray
    diagnostics: dict
    submodels: List[List[_StepModel]] = field(default_factory=list)

    @property
    def dt(self) -> float:
        return float(self.grid[1] - self.grid[0])

    @property
    def n_steps(self) -> int:
        return self.grid.size - 1

    @property
    def y0(self) -> float:
        return float(self.Y[0, 0])

    @property
    def y0_stderr(self) -> float:
        return float(self.diagnostics["y0_stderr"])

    # -- evaluators -----------------------------------------------------------

    def _design(self, model: _StepModel, Ys: np.ndarray, U: np.ndarray) -> np.ndarray:
        X = state_features(self.problem, Ys, U)
        return poly2_design((X - model.mean) / model.scale)

    def z_block(self, k: int, Ys: np.ndarray, U: np.ndarray) -> np.ndarray:
        """Estimated Z at step k on a block of states; shape (P, m)."""
        if not (0 <= k < self.n_steps):
            raise DomainError("z defined on interior steps only")
        model = self.models[k]
        return self._design(model, Ys, U) @ model.coef_z

    def _value_with(self, models: List[_StepModel], k: int, Ys: np.ndarray,
                    U: np.ndarray) -> np.ndarray:
        if k == self.n_steps:
            return np.broadcast_to(np.asarray(self.problem.phi(U), dtype=float),
                                   (U.shape[0],)).astype(float)
        model = models[k]
        D = self._design(model, Ys, U)
        pred = D @ model.coef_y
        if self.problem.l is None or self.problem.controls is None:
            return pred
        Z = D @ model.coef_z
        psi, _ = hamiltonian_block(self.problem, float(self.grid[k]), U, Z)
        return pred + self.dt * psi

    def value_block(self, k: int, Ys: np.ndarray, U: np.ndarray) -> np.ndarray:
        """Value estimate at grid index k on a block of states; shape (P,)."""
        return self._value_with(self.models, k, Ys, U)

    def value_stderr(self, k: int, Ys: np.ndarray, U: np.ndarray) -> np.ndarray:
        """Pointwise sampling spread of the value estimate, from the disjoint
        sub-solves; zero when no splits were computed."""
        if not self.submodels or k == self.n_steps:
            return np.zeros(U.shape[0])
        vals = np.stack([self._value_with(ms, k, Ys, U) for ms in self.submodels])
        return np.std(vals, axis=0, ddof=1) / np.sqrt(len(self.submodels))

    def value(self, t: float, state: np.ndarray, u: Optional[np.ndarray] = None) -> float:
        """Value at the nearest grid time; warns when the state falls far
        outside the training cloud (see value_info)."""
        v, info = self.value_info(t, state, u)
        if info["extrapolating"]:
            warnings.warn(
                f"value evaluated {info['max_z_score']:.1f} feature sigmas outside "
                "the training cloud", stacklevel=2)
        return v

    def value_info(self, t: float, state: np.ndarray, u: Optional[np.ndarray] = None
                   ) -> Tuple[float, dict]:
        k = int(np.clip(round(t / self.dt), 0, self.n_steps))
        state = np.asarray(state, dtype=float).reshape(1, self.problem.lift.n, self.problem.lift.d)
        if u is None:
            u = u_trace(self.problem, float(self.grid[k]), state[0])
        U = np.asarray(u, dtype=float).reshape(1, -1)
        v = float(self.value_block(k, state, U)[0])
        model = self.models[min(k, self.n_steps - 1)]
        X = state_features(self.problem, state, U)
        z_scores = np.abs((X - model.mean) / model.scale)
        info = {
            "grid_index": k,
            "max_z_score": float(np.max(z_scores)),
            "extrapolating": bool(np.max(z_scores) > 6.0),
        }
        return v, info


def _regress(design: np.ndarray, targets: np.ndarray) -> Tuple[np.ndarray, float, int]:
    coef, _, rank, sv = np.linalg.lstsq(design, targets, rcond=None)
    pos = sv[sv > 0]
    cond = float(pos[0] / pos[-1]) if pos.size else np.inf
    return coef, cond, int(rank)


def _backward_pass(
    problem: ProblemSpec,
    bundle: PathBundle,
    paths: np.ndarray,
    implicit_psi: bool,
):
    """One regression sweep over a subset of paths."""
    P = paths.size
    N = bundle.n_steps
    dt = bundle.dt
    m = problem.m

    Yv = np.empty((P, N + 1))
    Zv = np.zeros((P, N, m))
    Yv[:, N] = np.broadcast_to(np.asarray(problem.phi(bundle.u_traj[paths, N]), dtype=float), (P,))

    models: List[Optional[_StepModel]] = [None] * N
    fallbacks = []
    for k in range(N - 1, -1, -1):
        t_k = float(bundle.grid[k])
        Uk = bundle.u_traj[paths, k]
        X = state_features(problem, bundle.states[paths, k], Uk)
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale < 1e-12] = 1.0
        D = poly2_design((X - mean) / scale)

        if m > 0:
            z_targets = Yv[:, k + 1][:, None] * bundle.dW[paths, k] / dt
            coef_z, cond_z, rank_z = _regress(D, z_targets)
        else:
            coef_z, cond_z, rank_z = np.zeros((D.shape[1], 0)), 1.0, D.shape[1]
        Zk = D @ coef_z
        Zv[:, k] = Zk

        coef_y, cond_y, rank_y = _regress(D, Yv[:, k + 1])
        psi, _ = hamiltonian_block(problem, t_k, Uk, Zk)
        if implicit_psi:
            coef_y, cond_y, rank_y = _regress(D, Yv[:, k + 1] + dt * psi)
            Yv[:, k] = D @ coef_y
        else:
            Yv[:, k] = D @ coef_y + dt * psi
        if rank_y < D.shape[1]:
            fallbacks.append({"step": k, "rank": rank_y, "n_basis": D.shape[1]})
        models[k] = _StepModel(mean=mean, scale=scale, coef_y=coef_y, coef_z=coef_z,
                               cond=max(cond_y, cond_z), rank=min(rank_y, rank_z),
                               n_basis=D.shape[1])
    return models, Yv, Zv, fallbacks


def solve_bsde(
    problem: ProblemSpec,
    bundle: PathBundle,
    implicit_psi: bool = False,
    n_split: int = 4,
) -> BsdeSolution:
    """Backward regression sweep over an uncontrolled path bundle.

    implicit_psi re-projects the psi-inclusive target once per step instead
    of adding the pointwise Hamiltonian to the projection (a smoothing
    variant; off by default).  n_split disjoint sub-solves estimate the full
    sampling spread of Y_0 (regression noise included); the reported
    y0_stderr is the larger of the martingale and split estimates.
    """
    if bundle.mode != "uncontrolled":
        raise DomainError("the backward solve runs on the uncontrolled forward bundle")
    if problem.l is None or problem.controls is None:
        raise DomainError("backward solve needs the cost pack (l, controls); "
                          "use l = 0 with a singleton action set for driverless runs")
    P = bundle.n_paths
    N = bundle.n_steps
    dt = bundle.dt

    all_paths = np.arange(P)
    models, Yv, Zv, fallbacks = _backward_pass(problem, bundle, all_paths, implicit_psi)

    # per-path martingale estimator of Y_0 and a split-block estimate that
    # also sees the regression-coefficient noise
    psi_sum = np.zeros(P)
    for k in range(N):
        psi_k, _ = hamiltonian_block(problem, float(bundle.grid[k]), bundle.u_traj[:, k], Zv[:, k])
        psi_sum += dt * psi_k
    samples = Yv[:, N] + psi_sum
    se_mart = float(np.std(samples, ddof=1) / np.sqrt(P)) if P > 1 else 0.0
    se_split = 0.0
    submodels = []
    if n_split >= 2 and P >= 4 * n_split:
        sub_y0 = []
        for block in np.array_split(all_paths, n_split):
            mb, Yb, _, _ = _backward_pass(problem, bundle, block, implicit_psi)
            sub_y0.append(float(Yb[0, 0]))
            submodels.append(mb)
        se_split = float(np.std(sub_y0, ddof=1) / np.sqrt(n_split))
    diagnostics = {
        "y0_stderr": max(se_mart, se_split),
        "y0_stderr_martingale": se_mart,
        "y0_stderr_split": se_split,
        "max_cond": float(max(mq.cond for mq in models)),
        "min_rank": int(min(mq.rank for mq in models)),
        "rank_fallbacks": fallbacks,
        "implicit_psi": implicit_psi,
    }
    return BsdeSolution(problem=problem, grid=np.asarray(bundle.grid, dtype=float),
                        models=models, Y=Yv, Z=Zv, diagnostics=diagnostics)


# -- identification and residual checks ---------------------------------------


def directional_value_derivative(
    sol: BsdeSolution,
    k: int,
    Ys: np.ndarray,
    U: np.ndarray,
    direction: np.ndarray,
    eps: float = 1e-5,
) -> np.ndarray:
    """Central difference of the value at grid index k along a state
    direction, with the constraint trace of the direction riding on u."""
    lift = sol.problem.lift
    direction = np.asarray(direction, dtype=float).reshape(lift.n, lift.d)
    du = lift.extract_u(direction)
    vp = sol.value_block(k, Ys + eps * direction[None], U + eps * du[None])
    vm = sol.value_block(k, Ys - eps * direction[None], U - eps * du[None])
    return (vp - vm) / (2.0 * eps)


@dataclass(frozen=True)
class ZIdentReport:
    rel_l2: float
    n_samples: int
    rms_regression: float
    rms_directional: float


def z_identification_check(
    problem: ProblemSpec,
    sol: BsdeSolution,
    bundle: PathBundle,
    n_time_samples: int = 8,
    n_path_samples: int = 256,
    eps: float = 1e-5,
    seed: int = 0,
) -> ZIdentReport:
    """Compare the regression Z against the derivative of the value along the
    one-step noise loading (two independent estimators of the same object)."""
    lift = problem.lift
    N = bundle.n_steps
    P = bundle.n_paths
    rng = np.random.default_rng(seed)
    ks = np.unique(np.linspace(1, N - 2, n_time_samples, dtype=int))
    paths = rng.choice(P, size=min(n_path_samples, P), replace=False)
    load = lift.noise_loading(problem.g, bundle.dt)

    diffs, regs, dirs = [], [], []
    for k in ks:
        Ys = bundle.states[paths, k + 1]
        U = bundle.u_traj[paths, k + 1]
        z_reg = sol.Z[paths, k]
        for j in range(problem.m):
            direction = load[:, j].reshape(lift.n, lift.d)
            z_dir = directional_value_derivative(sol, k + 1, Ys, U, direction, eps=eps)
            diffs.append(z_reg[:, j] - z_dir)
            regs.append(z_reg[:, j])
            dirs.append(z_dir)
    diffs = np.concatenate(diffs)
    regs = np.concatenate(regs)
    dirs = np.concatenate(dirs)
    denom = max(float(np.sqrt(np.mean(dirs ** 2))), 1e-300)
    return ZIdentReport(
        rel_l2=float(np.sqrt(np.mean(diffs ** 2)) / denom),
        n_samples=diffs.size,
        rms_regression=float(np.sqrt(np.mean(regs ** 2))),
        rms_directional=float(np.sqrt(np.mean(dirs ** 2))),
    )


def grad_value_direction(
    sol: BsdeSolution,
    t_index: int,
    state: np.ndarray,
    u: np.ndarray,
    h: np.ndarray,
    eps: float = 1e-5,
) -> float:
    """Directional derivative of the value along (I - B)^(1-theta) h, the
    finite-dimensional trace of the smoothed gradient pairing."""
    lift = sol.problem.lift
    M = np.eye(lift.state_dim) - lift.generator()
    hp = fractional_power(M, 1.0 - lift.theta) @ np.asarray(h, dtype=float).reshape(-1)
    Ys = np.asarray(state, dtype=float).reshape(1, lift.n, lift.d)
    U = np.asarray(u, dtype=float).reshape(1, -1)
    return float(directional_value_derivative(sol, t_index, Ys, U,
                                              hp.reshape(lift.n, lift.d), eps=eps)[0])


@dataclass(frozen=True)
class HjbResidualPoint:
    t: float
    residual: float
    stderr: float

    @property
    def within_3se(self) -> bool:
        return abs(self.residual) <= 3.0 * max(self.stderr, 1e-300)


@dataclass(frozen=True)
class HjbResidualReport:
    points: Tuple[HjbResidualPoint, ...]

    @property
    def passed(self) -> bool:
        return all(p.within_3se for p in self.points)

    def to_dict(self) -> dict:
        return {"points": [{"t": p.t, "residual": p.residual, "stderr": p.stderr,
                            "within_3se": p.within_3se} for p in self.points],
                "pass": self.passed}


def hjb_residual(
    problem: ProblemSpec,
    sol: BsdeSolution,
    points: Sequence[Tuple[int, np.ndarray, np.ndarray]],
    n_inner: int,
    seed: int,
) -> HjbResidualReport:
    """Residual of the variation-of-constants form of the value equation.

    Each point is (grid index, state, u).  Fresh inner paths restart from the
    point; the residual is the value estimate minus the inner-MC estimate of
    terminal cost plus the time-integrated Hamiltonian along the restarted
    flow, with the z-argument re-evaluated through the stored models.
    """
    N = sol.n_steps
    dt = sol.dt
    out = []
    for i, (k, state, u) in enumerate(points):
        if not (0 <= k <= N):
            raise DomainError("sample point outside the grid")
        v_here = float(sol.value_block(
            k, np.asarray(state, dtype=float)[None], np.asarray(u, dtype=float)[None])[0])
        if k == N:
            out.append(HjbResidualPoint(t=float(sol.grid[k]), residual=0.0, stderr=0.0))
            continue
        inner = simulate_from_state(problem, sol.grid, k, state, u, n_inner, seed + 7919 * i)
        vals = np.broadcast_to(np.asarray(problem.phi(inner.u_traj[:, -1]), dtype=float),
                               (n_inner,)).astype(float).copy()
        for r in range(N - k):
            t_r = float(sol.grid[k + r])
            U_r = inner.u_traj[:, r]
            Z_r = sol.z_block(k + r, inner.states[:, r], U_r)
            psi, _ = hamiltonian_block(problem, t_r, U_r, Z_r)
            vals += dt * psi
        out.append(HjbResidualPoint(
            t=float(sol.grid[k]),
            residual=v_here - float(np.mean(vals)),
            stderr=float(np.std(vals, ddof=1) / np.sqrt(n_inner)),
        ))
    return HjbResidualReport(points=tuple(out))
