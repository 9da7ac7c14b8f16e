"""Pathwise sensitivities of the lifted dynamics.

Everything here linearizes the simulator's own implicit step, so the
discrete objects satisfy the same algebraic identities as their continuous
counterparts exactly (up to roundoff): the directional flow is the exact
Jacobian action of the scheme, the correction flow reproduces
"flow minus homogeneous propagator" applied to smoothed directions, and the
noise-impulse response solves the linearized recursion started from the
one-step noise loading.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import expm, lu_factor, lu_solve

from .errors import DomainError
from .forward import PathBundle, ProblemSpec
from .lift import fractional_power


@dataclass(frozen=True)
class VariationalFlow:
    """Directional derivative of the state flow along one base path.

    values[k] is the (n, d) derivative of the state at grid index k with
    respect to the initial state at index s_index, applied to direction h;
    values[k] = h for k <= s_index.
    """

    values: np.ndarray
    u_values: np.ndarray
    h: np.ndarray
    s_index: int
    path_index: int


@dataclass(frozen=True)
class MalliavinSlice:
    """Response of the state to a unit noise impulse in component j at one
    grid index; zero before the impulse (adaptedness)."""

    values: np.ndarray
    sigma_index: int
    component: int
    path_index: int


@dataclass(frozen=True)
class JqvReport:
    """Empirical vs predicted joint quadratic variation with one noise axis."""

    empirical: float
    predicted: float
    se_empirical: float
    se_predicted: float
    se_combined: float
    se_diff: float
    n_paths: int

    @property
    def consistent(self) -> bool:
        tol = 3.0 * max(self.se_combined, 1e-300)
        return abs(self.empirical - self.predicted) <= tol


def f_jacobian(problem: ProblemSpec, t: float, u: np.ndarray) -> np.ndarray:
    """Jacobian of the drift in u; analytic when supplied, else central
    differences with step 1e-6 * (1 + |u|)."""
    u = np.asarray(u, dtype=float)
    if problem.f_jac is not None:
        return np.atleast_2d(np.asarray(problem.f_jac(t, u), dtype=float))
    d = u.size
    h = 1e-6 * (1.0 + float(np.linalg.norm(u)))
    jac = np.empty((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        jac[:, j] = (np.atleast_1d(problem.f(t, u + e)) - np.atleast_1d(problem.f(t, u - e))) / (2.0 * h)
    return jac


def _linearized_run(
    problem: ProblemSpec,
    bundle: PathBundle,
    path_index: int,
    G0: np.ndarray,
    du0: np.ndarray,
    s_index: int,
    drivers: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Propagate the linearization of the implicit step along a base path.

    The state direction G follows the step's internal solve while the
    recorded trace direction dU follows the constraint solve with the
    drift-Jacobian channel riding on the forcing, mirroring the simulator
    exactly; drivers[k] is an optional extra d-vector entering the
    drift-Jacobian channel at step k.
    """
    lift = problem.lift
    grid = bundle.grid
    N = grid.size - 1
    dt = bundle.dt
    decay = 1.0 + dt * lift.nodes
    mem_w = lift.weights * lift.nodes / decay
    S = lift.step_solve_matrix(dt)
    U = bundle.u_traj[path_index]

    G = np.zeros((N + 1, lift.n, lift.d))
    dU = np.zeros((N + 1, lift.d))
    G[: s_index + 1] = G0
    dU[s_index] = du0
    for k in range(s_index, N):
        t_k = float(grid[k])
        F = f_jacobian(problem, t_k, U[k])
        dforce = F @ (dU[k] if drivers is None else dU[k] + drivers[k])
        memory = np.tensordot(mem_w, G[k], axes=(0, 0))
        d_internal = S @ (memory + dforce)
        G[k + 1] = (G[k] + dt * d_internal[None, :]) / decay[:, None]
        dU[k + 1] = lift.extract_u(G[k + 1], forcing=dforce)
    return G, dU


def variational_flow(
    problem: ProblemSpec,
    bundle: PathBundle,
    path_index: int,
    h: np.ndarray,
    s_index: int = 0,
) -> VariationalFlow:
    """Directional derivative of the state flow: exact linearization of the
    simulator's step, with the noise term dropped (additive noise)."""
    lift = problem.lift
    h = np.asarray(h, dtype=float).reshape(lift.n, lift.d)
    du0 = lift.extract_u(h)  # linear part of the constraint solve
    G, dU = _linearized_run(problem, bundle, path_index, h, du0, s_index)
    return VariationalFlow(values=G, u_values=dU, h=h, s_index=s_index, path_index=path_index)


def propagate_generator_flow(
    problem: ProblemSpec,
    v0: np.ndarray,
    dt: float,
    n_steps: int,
    propagator: str = "step",
) -> np.ndarray:
    """Iterates of the homogeneous lifted flow applied to v0 (flattened).

    "step": v_{k+1} solves (I - dt B) v_{k+1} = v_k, matching the simulator.
    "expm": v_{k+1} = expm(dt B) v_k.
    """
    if propagator not in ("step", "expm"):
        raise DomainError(f"unknown propagator {propagator!r}")
    B = problem.lift.generator()
    v0 = np.asarray(v0, dtype=float).reshape(-1)
    out = np.empty((n_steps + 1, v0.size))
    out[0] = v0
    if propagator == "step":
        lu = lu_factor(np.eye(B.shape[0]) - dt * B)
        for k in range(n_steps):
            out[k + 1] = lu_solve(lu, out[k])
    else:
        E = expm(dt * B)
        for k in range(n_steps):
            out[k + 1] = E @ out[k]
    return out


def variational_correction(
    problem: ProblemSpec,
    bundle: PathBundle,
    path_index: int,
    h: np.ndarray,
    s_index: int = 0,
    propagator: str = "step",
) -> np.ndarray:
    """Correction part of the variational flow on smoothed directions.

    Solves the linearized recursion started from zero and driven, through the
    drift-Jacobian channel, by the u-trace of the homogeneous flow of
    (I - B)^(1-theta) h.  On the step-consistent propagator this equals
    (flow derivative - homogeneous flow) applied to (I - B)^(1-theta) h
    exactly; with "expm" the identity holds only in the refinement limit.
    Returns an (N+1, n, d) array, zero up to s_index.
    """
    lift = problem.lift
    N = bundle.grid.size - 1
    dt = bundle.dt
    M = np.eye(lift.state_dim) - lift.generator()
    h_flat = np.asarray(h, dtype=float).reshape(-1)
    hp = fractional_power(M, 1.0 - lift.theta) @ h_flat
    hom = propagate_generator_flow(problem, hp, dt, N - s_index, propagator=propagator)
    Jmat = lift.u_trace_matrix()
    drivers = np.zeros((N, lift.d))
    drivers[s_index:N] = hom[: N - s_index] @ Jmat.T
    zero = np.zeros((lift.n, lift.d))
    G, _ = _linearized_run(problem, bundle, path_index, zero, np.zeros(lift.d),
                           s_index, drivers=drivers)
    return G


def malliavin_derivative(
    problem: ProblemSpec,
    bundle: PathBundle,
    path_index: int,
    sigma_index: int,
    component: int,
) -> MalliavinSlice:
    """State response to a unit noise impulse at one grid index.

    The impulse is the matching column of the one-step noise loading; from
    there the slice follows the linearized recursion with the constraint
    u-trace feeding the drift-Jacobian channel.
    """
    lift = problem.lift
    N = bundle.grid.size - 1
    if not (0 <= sigma_index < N):
        raise DomainError("impulse index must lie inside the grid")
    if not (0 <= component < problem.m):
        raise DomainError("no such noise component")
    load = lift.noise_loading(problem.g, bundle.dt)[:, component].reshape(lift.n, lift.d)
    du0 = lift.extract_u(load)
    G, _ = _linearized_run(problem, bundle, path_index, load, du0, sigma_index)
    values = G.copy()
    values[:sigma_index] = 0.0  # adaptedness: nothing before the impulse
    return MalliavinSlice(values=values, sigma_index=sigma_index,
                          component=component, path_index=path_index)


def joint_quadratic_variation(
    problem: ProblemSpec,
    value_eval,
    bundle: PathBundle,
    component: int,
    eps: float = 1e-5,
) -> JqvReport:
    """Empirical covariation of the value process with one Brownian axis,
    against the Riemann sum of the value's derivative along the one-step
    noise loading.

    value_eval must expose value_block(k, states, u) -> (P,) evaluations on a
    block of paths; the derivative is taken by central differences.  The
    predicted integral uses the right-endpoint rule, which pairs each
    increment with the gradient at the time it acts on.
    """
    lift = problem.lift
    N = bundle.n_steps
    P = bundle.n_paths
    dt = bundle.dt
    load = lift.noise_loading(problem.g, dt)[:, component].reshape(lift.n, lift.d)
    du_dir = lift.extract_u(load)

    v_prev = value_eval.value_block(0, bundle.states[:, 0], bundle.u_traj[:, 0])
    emp = np.zeros(P)
    pred = np.zeros(P)
    for k in range(N):
        Yk = bundle.states[:, k + 1]
        Uk = bundle.u_traj[:, k + 1]
        v_plus = value_eval.value_block(k + 1, Yk + eps * load[None], Uk + eps * du_dir[None])
        v_minus = value_eval.value_block(k + 1, Yk - eps * load[None], Uk - eps * du_dir[None])
        pred += (v_plus - v_minus) / (2.0 * eps) * dt
        v_next = value_eval.value_block(k + 1, bundle.states[:, k + 1], bundle.u_traj[:, k + 1])
        emp += (v_next - v_prev) * bundle.dW[:, k, component]
        v_prev = v_next

    se_emp = float(np.std(emp, ddof=1) / np.sqrt(P))
    se_pred = float(np.std(pred, ddof=1) / np.sqrt(P))
    se_diff = float(np.std(emp - pred, ddof=1) / np.sqrt(P))
    return JqvReport(
        empirical=float(np.mean(emp)),
        predicted=float(np.mean(pred)),
        se_empirical=se_emp,
        se_predicted=se_pred,
        se_combined=float(np.hypot(se_emp, se_pred)),
        se_diff=se_diff,
        n_paths=P,
    )
