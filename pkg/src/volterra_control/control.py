"""Hamiltonian minimization, costs, feedback synthesis and verification.

The pointwise Hamiltonian is the minimum over the finite (or gridded) action
set of running cost plus z-weighted control drift; ties break to the lowest
index, which fixes one deterministic selection of the minimizer set.  The
verification report compares the closed loop built from a backward solution
against the value at time zero and a brute-force family of open-loop
bang-bang adversaries.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import DomainError
from .forward import ControlSet, PathBundle, ProblemSpec, simulate


@dataclass(frozen=True)
class HamiltonianResult:
    value: float
    minimizer: float
    active_index: int


def _candidate_values(problem: ProblemSpec, t: float, U: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """Running cost plus z-weighted drift for every action; shape (P, K)."""
    if problem.controls is None or len(problem.controls) == 0:
        raise DomainError("problem has an empty control set")
    if problem.l is None:
        raise DomainError("problem has no running cost")
    P = U.shape[0]
    K = len(problem.controls)
    vals = np.empty((P, K))
    for kidx in range(K):
        gamma = problem.controls[kidx]
        lv = np.broadcast_to(np.asarray(problem.l(t, U, gamma), dtype=float), (P,))
        if problem.r is not None and problem.m > 0:
            rv = np.broadcast_to(np.asarray(problem.r(t, U, gamma), dtype=float), (P, problem.m))
            vals[:, kidx] = lv + np.sum(Z * rv, axis=1)
        else:
            vals[:, kidx] = lv
    return vals


def hamiltonian_block(
    problem: ProblemSpec, t: float, U: np.ndarray, Z: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized Hamiltonian over a block of paths.

    Returns (values, active indices); argmin takes the first occurrence, so
    ties resolve to the lowest index.
    """
    vals = _candidate_values(problem, t, U, Z)
    idx = np.argmin(vals, axis=1)
    return vals[np.arange(vals.shape[0]), idx], idx


def hamiltonian(problem: ProblemSpec, t: float, u, z) -> HamiltonianResult:
    """Exhaustive minimization of l + z.r over the action set at one point."""
    U = np.atleast_1d(np.asarray(u, dtype=float))[None, :]
    Z = np.atleast_1d(np.asarray(z, dtype=float))[None, :]
    vals, idx = hamiltonian_block(problem, t, U, Z)
    k = int(idx[0])
    gam = problem.controls[k]
    minimizer = float(gam) if np.size(gam) == 1 else np.asarray(gam)
    return HamiltonianResult(value=float(vals[0]), minimizer=minimizer, active_index=k)


def _l_block(problem: ProblemSpec, t: float, U: np.ndarray, gammas: np.ndarray) -> np.ndarray:
    P = U.shape[0]
    out = np.empty(P)
    for gam in np.unique(gammas):
        mask = gammas == gam
        out[mask] = np.broadcast_to(np.asarray(problem.l(t, U[mask], gam), dtype=float),
                                    (int(mask.sum()),))
    return out


def cost(problem: ProblemSpec, bundle: PathBundle, gamma=None) -> Tuple[float, float]:
    """Monte Carlo cost of a bundle: left-rule time quadrature of the running
    cost plus the terminal cost; returns (mean, standard error).

    For bundles without recorded controls a fixed action can be supplied; if
    the problem has no running cost the integral term is zero.
    """
    P = bundle.n_paths
    N = bundle.n_steps
    dt = bundle.dt
    total = np.zeros(P)
    if problem.l is not None:
        for k in range(N):
            t_k = float(bundle.grid[k])
            Uk = bundle.u_traj[:, k]
            if bundle.controls is not None:
                total += dt * _l_block(problem, t_k, Uk, bundle.controls[:, k])
            elif gamma is not None:
                total += dt * np.broadcast_to(np.asarray(problem.l(t_k, Uk, gamma), dtype=float), (P,))
            else:
                raise DomainError("bundle has no controls and no fixed action was given")
    total += np.broadcast_to(np.asarray(problem.phi(bundle.u_traj[:, N]), dtype=float), (P,))
    se = float(np.std(total, ddof=1) / np.sqrt(P)) if P > 1 else 0.0
    return float(np.mean(total)), se


@dataclass
class FeedbackPolicy:
    """Deterministic feedback: at (t_k, state) play the Hamiltonian minimizer
    evaluated at the backward solution's z-estimate.

    Callable on path blocks as policy(k, states, u) -> actions; ties break to
    the lowest action index on every call, so the same (t, state) always maps
    to the same action.
    """

    problem: ProblemSpec
    solution: object  # BsdeSolution; duck-typed to avoid a module cycle
    tie_break: str = "lowest-index"

    def __call__(self, k: int, Y: np.ndarray, U: np.ndarray) -> np.ndarray:
        t_k = float(self.solution.grid[min(k, len(self.solution.grid) - 1)])
        Z = self.solution.z_block(k, Y, U)
        _, idx = hamiltonian_block(self.problem, t_k, U, Z)
        return self.problem.controls.points[idx]


def feedback_policy(problem: ProblemSpec, solution) -> FeedbackPolicy:
    return FeedbackPolicy(problem=problem, solution=solution)


def bangbang_adversaries(
    control_set: ControlSet, n_blocks: int, n_steps: int, max_total: int = 4096
) -> List[Tuple[str, np.ndarray]]:
    """All piecewise-constant open-loop controls on a uniform block grid.

    Enumerates |actions|^n_blocks control paths; capped to keep brute force
    at desk scale (n_blocks <= 6).
    """
    if n_blocks < 1 or n_blocks > 6:
        raise DomainError("block count must lie in 1..6")
    K = len(control_set)
    if K ** n_blocks > max_total:
        raise DomainError(f"{K}^{n_blocks} adversaries exceed the cap {max_total}")
    block_of_step = np.minimum((np.arange(n_steps) * n_blocks) // n_steps, n_blocks - 1)
    out = []
    for combo in itertools.product(range(K), repeat=n_blocks):
        path = control_set.points[np.asarray(combo)[block_of_step]]
        label = "bb-" + "".join(str(c) for c in combo)
        out.append((label, path))
    return out


@dataclass(frozen=True)
class AdversaryResult:
    label: str
    J: float
    stderr: float
    above_value: bool


@dataclass(frozen=True)
class VerificationReport:
    v0: float
    v0_stderr: float
    J_feedback: float
    feedback_stderr: float
    adversaries: Tuple[AdversaryResult, ...]
    all_adversaries_above_value: bool
    feedback_matches_value: bool
    feedback_beats_adversaries: bool

    @property
    def passed(self) -> bool:
        return (self.all_adversaries_above_value
                and self.feedback_matches_value
                and self.feedback_beats_adversaries)

    def to_dict(self) -> dict:
        return {
            "v0": self.v0,
            "v0_stderr": self.v0_stderr,
            "J_feedback": self.J_feedback,
            "J_feedback_stderr": self.feedback_stderr,
            "adversaries": [
                {"label": a.label, "J": a.J, "stderr": a.stderr, "above_value": a.above_value}
                for a in self.adversaries
            ],
            "flags": {
                "all_adversaries_above_value": self.all_adversaries_above_value,
                "feedback_matches_value": self.feedback_matches_value,
                "feedback_beats_adversaries": self.feedback_beats_adversaries,
            },
            "pass": self.passed,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def verify_fundamental_relation(
    problem: ProblemSpec,
    policy: FeedbackPolicy,
    grid: np.ndarray,
    n_paths: int,
    seed: int,
    adversaries: Sequence[Tuple[str, np.ndarray]],
    threads: int = 1,
) -> VerificationReport:
    """Check the value/cost inequalities at Monte Carlo resolution.

    Every open-loop adversary must cost at least the time-zero value (shifted
    by three combined standard errors), and the closed loop must match the
    value and beat the best adversary.  All runs share the seed (common
    random numbers), which only sharpens the comparisons.
    """
    sol = policy.solution
    v0 = float(sol.y0)
    v0_se = float(sol.y0_stderr)

    fb_bundle = simulate(problem, grid, n_paths, seed, mode="feedback", policy=policy,
                         threads=threads)
    J_fb, se_fb = cost(problem, fb_bundle)

    results = []
    for label, path in adversaries:
        bundle = simulate(problem, grid, n_paths, seed, mode="open_loop",
                          control_path=path, threads=threads)
        J, se = cost(problem, bundle)
        above = J >= v0 - 3.0 * float(np.hypot(se, v0_se))
        results.append(AdversaryResult(label=label, J=J, stderr=se, above_value=above))

    j_best = min(r.J for r in results) if results else float("inf")
    se_best = min((r.stderr for r in results if r.J == j_best), default=0.0)
    return VerificationReport(
        v0=v0,
        v0_stderr=v0_se,
        J_feedback=J_fb,
        feedback_stderr=se_fb,
        adversaries=tuple(results),
        all_adversaries_above_value=all(r.above_value for r in results),
        feedback_matches_value=abs(J_fb - v0) <= 3.0 * float(np.hypot(se_fb, v0_se)),
        feedback_beats_adversaries=J_fb <= j_best + 3.0 * float(np.hypot(se_fb, se_best)),
    )
