"""Finite-dimensional state-space lift of a convolution equation.

A discrete Bernstein measure ``{(w_i, kappa_i)}`` turns the scalar memory of
the Volterra equation into a family of exponentially relaxing shadow states
``y_i(t) (approx) x(t, kappa_i)``, one d-vector per node, coupled through the
algebraic constraint

    (c I - A) u = sum_i w_i kappa_i y_i + forcing,      c = sum_i w_i,

which recovers the physical trajectory u from the lifted state.  This module
builds the lift, its reduced generator, weighted norms, matrix fractional
powers, the map taking a past trajectory to an initial lifted state, and the
per-step noise response used by the stochastic schemes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .errors import ConditioningError, DomainError, LinearSolveError
from .kernel import BernsteinKernel, DISCRETE

HISTORY_ZERO = "zero"
HISTORY_EXPONENTIAL = "exponential"
HISTORY_RECENT_CONSTANT = "recent_constant"


@dataclass(frozen=True)
class OperatorA:
    """The d x d coefficient operator of the equation (units 1/time).

    The spectrum is required to sit in the closed left half-plane unless the
    caller explicitly overrides; the override is recorded so reports can
    surface it.
    """

    matrix: np.ndarray
    allow_unstable: bool = False

    def __post_init__(self):
        mat = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise DomainError("A must be a square matrix")
        mat.setflags(write=False)
        object.__setattr__(self, "matrix", mat)
        if not self.allow_unstable:
            ev = np.linalg.eigvals(mat)
            if np.max(ev.real) > 1e-10:
                raise DomainError(
                    "A has spectrum in the open right half-plane "
                    f"(max real part {np.max(ev.real):.3g}); "
                    "pass allow_unstable=True to accept it anyway"
                )

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class History:
    """Admissible shapes of the past trajectory on (-inf, 0].

    kind "zero":             u0 = 0
    kind "exponential":      u0(s) = ubar * exp(omega * s), omega > 0
    kind "recent_constant":  u0(s) = ubar on [-delta, 0], zero before
    """

    kind: str
    ubar: Optional[np.ndarray] = None
    omega: Optional[float] = None
    delta: Optional[float] = None

    def __post_init__(self):
        if self.kind not in (HISTORY_ZERO, HISTORY_EXPONENTIAL, HISTORY_RECENT_CONSTANT):
            raise DomainError(f"unsupported history shape {self.kind!r}")
        if self.kind != HISTORY_ZERO:
            ubar = np.atleast_1d(np.asarray(self.ubar, dtype=float))
            ubar.setflags(write=False)
            object.__setattr__(self, "ubar", ubar)
        if self.kind == HISTORY_EXPONENTIAL and (self.omega is None or self.omega <= 0.0):
            raise DomainError("exponential history needs omega > 0")
        if self.kind == HISTORY_RECENT_CONSTANT and (self.delta is None or self.delta <= 0.0):
            raise DomainError("recent_constant history needs delta > 0")

    @staticmethod
    def zero() -> "History":
        return History(kind=HISTORY_ZERO)

    @staticmethod
    def exponential(ubar, omega: float) -> "History":
        return History(kind=HISTORY_EXPONENTIAL, ubar=ubar, omega=omega)

    @staticmethod
    def recent_constant(ubar, delta: float) -> "History":
        return History(kind=HISTORY_RECENT_CONSTANT, ubar=ubar, delta=delta)

    def value_at_zero(self, d: int) -> np.ndarray:
        if self.kind == HISTORY_ZERO:
            return np.zeros(d)
        return np.broadcast_to(self.ubar, (d,)).astype(float)


def choose_exponents(alpha: float) -> Tuple[float, float]:
    """Pick the smoothing exponents (eta, theta) compatible with the index alpha.

    Uses eta = (1-alpha)/2 + delta and theta = (1+alpha)/2 - delta with
    delta = (alpha - 1/2)/4, which satisfies all three constraints

        eta > (1-alpha)/2,   theta < (1+alpha)/2,   theta - eta > 1/2

    exactly when alpha > 1/2; otherwise no admissible pair exists.
    """
    if not (0.0 < alpha <= 1.0):
        raise DomainError("alpha must lie in (0, 1]")
    if alpha <= 0.5:
        raise DomainError(
            f"alpha = {alpha:g} <= 1/2: the constraints eta > (1-alpha)/2, "
            "theta < (1+alpha)/2, theta - eta > 1/2 are infeasible"
        )
    delta = (alpha - 0.5) / 4.0
    eta = (1.0 - alpha) / 2.0 + delta
    theta = (1.0 + alpha) / 2.0 - delta
    return eta, theta


class DiscreteLift:
    """State-space lift built on a discrete Bernstein measure and an operator A.

    Immutable after construction; the reduced generator matrix is assembled
    lazily and cached.  States are (n, d) arrays, one row per node.
    """

    def __init__(
        self,
        kernel: BernsteinKernel,
        A: OperatorA,
        eta: Optional[float] = None,
        theta: Optional[float] = None,
        alpha: Optional[float] = None,
    ):
        if kernel.family != DISCRETE:
            raise DomainError("lift requires a discrete kernel; call kernel.discretize first")
        self.kernel = kernel
        self.nodes = kernel.nodes
        self.weights = kernel.weights
        self.A = A
        self.total_mass = float(np.sum(self.weights))
        if self.total_mass <= 0.0:
            raise DomainError("total mass of the measure must be positive")
        if eta is None or theta is None:
            if alpha is None:
                raise DomainError("either both exponents or alpha must be given")
            eta, theta = choose_exponents(alpha)
        self.eta = float(eta)
        self.theta = float(theta)
        if not (0.0 < self.eta < 1.0 and 0.0 < self.theta < 1.0):
            raise DomainError("exponents must lie in (0, 1)")

        d = A.dimension
        cIA = self.total_mass * np.eye(d) - A.matrix
        if abs(np.linalg.det(cIA)) < 1e-300:
            raise LinearSolveError("(c I - A) is singular; cannot define the constraint solve")
        self._cIA = cIA
        self._cIA_inv = np.linalg.inv(cIA)
        self._generator: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.nodes.size

    @property
    def d(self) -> int:
        return self.A.dimension

    @property
    def state_dim(self) -> int:
        return self.n * self.d

    def zero_state(self) -> np.ndarray:
        return np.zeros((self.n, self.d))

    # -- constraint solve -----------------------------------------------------

    def weighted_node_sum(self, state: np.ndarray) -> np.ndarray:
        """sum_i w_i kappa_i y_i, the memory term of the constraint."""
        state = np.asarray(state, dtype=float)
        return np.tensordot(self.weights * self.nodes, state, axes=(0, state.ndim - 2))

    def extract_u(self, state: np.ndarray, forcing=None) -> np.ndarray:
        """Solve (c I - A) u = sum_i w_i kappa_i y_i + forcing for u.

        This is the discrete realization of the map from lifted state to the
        physical trajectory; the linear part (forcing = 0) is the lift's
        u-trace proper, external terms ride along on the right-hand side.
        """
        rhs = self.weighted_node_sum(state)
        if forcing is not None:
            rhs = rhs + np.asarray(forcing, dtype=float)
        return rhs @ self._cIA_inv.T

    def u_trace_matrix(self) -> np.ndarray:
        """Matrix of the linear map state -> u, shape (d, n*d)."""
        n, d = self.n, self.d
        out = np.zeros((d, n * d))
        for i in range(n):
            out[:, i * d:(i + 1) * d] = self.weights[i] * self.nodes[i] * self._cIA_inv
        return out

    # -- generator and propagators ---------------------------------------------

    def generator(self) -> np.ndarray:
        """Reduced generator of the lifted linear dynamics, shape (n*d, n*d).

        Row block i of the dynamics reads dy_i/dt = -kappa_i y_i + u(y) with
        u(y) the homogeneous constraint solve.
        """
        if self._generator is None:
            n, d = self.n, self.d
            B = np.kron(np.diag(-self.nodes), np.eye(d))
            coupling = np.kron(
                np.outer(np.ones(n), self.weights * self.nodes), self._cIA_inv
            )
            B = B + coupling
            B.setflags(write=False)
            self._generator = B
        return self._generator

    def implicit_step_factor(self, dt: float) -> np.ndarray:
        """LU-ready matrix (I - dt*B) of the one-step implicit propagator."""
        B = self.generator()
        return np.eye(B.shape[0]) - dt * B

    # -- norms and history -------------------------------------------------------

    def state_norm(self, state: np.ndarray, rho: float = 0.0) -> float:
        """Weighted norm of a lifted state.

        rho = 0 gives the plain state-space norm
        sqrt(sum_i w_i (kappa_i + 1) |y_i|^2); rho > 0 applies the matrix
        fractional power (I - B)^rho first, the finite-dimensional surrogate
        of the interpolation-space norms.
        """
        state = np.asarray(state, dtype=float)
        if state.shape != (self.n, self.d):
            raise DomainError(f"state must have shape {(self.n, self.d)}")
        if not (0.0 <= rho < 1.0):
            raise DomainError("rho must lie in [0, 1)")
        if rho > 0.0:
            M = np.eye(self.state_dim) - self.generator()
            state = (fractional_power(M, rho) @ state.reshape(-1)).reshape(self.n, self.d)
        sq = np.sum(state * state, axis=1)
        return float(np.sqrt(np.sum(self.weights * (self.nodes + 1.0) * sq)))

    def lift_history(self, history: History) -> np.ndarray:
        """Initial lifted state of a past trajectory: row i holds the
        exponentially discounted integral of the history at rate kappa_i,
        computed in closed form per supported shape."""
        d = self.d
        if history.kind == HISTORY_ZERO:
            return self.zero_state()
        ubar = np.broadcast_to(history.ubar, (d,)).astype(float)
        if history.kind == HISTORY_EXPONENTIAL:
            coef = 1.0 / (self.nodes + history.omega)
        else:
            delta = history.delta
            coef = np.empty(self.n)
            pos = self.nodes > 0.0
            coef[pos] = (1.0 - np.exp(-self.nodes[pos] * delta)) / self.nodes[pos]
            coef[~pos] = delta
        return np.outer(coef, ubar)

    # -- noise response -----------------------------------------------------------

    def implicit_mass(self, dt: float) -> float:
        """Effective measure mass of an implicit step, sum_i w_i/(1 + dt*kappa_i)."""
        return float(np.sum(self.weights / (1.0 + dt * self.nodes)))

    def step_solve_matrix(self, dt: float) -> np.ndarray:
        """Inverse of (mu I - A) with the implicit effective mass mu."""
        mu = self.implicit_mass(dt)
        mat = mu * np.eye(self.d) - self.A.matrix
        if abs(np.linalg.det(mat)) < 1e-300:
            raise LinearSolveError("(mu I - A) is singular for this step size")
        return np.linalg.inv(mat)

    def noise_loading(self, g: np.ndarray, dt: float) -> np.ndarray:
        """Per-unit-increment state response of one implicit step.

        Column k is the (n*d,) state direction produced by a unit Brownian
        increment in component k: rows (mu I - A)^(-1) g e_k / (1 + dt kappa_i).
        """
        if dt <= 0.0:
            raise DomainError("dt must be positive")
        g = np.atleast_2d(np.asarray(g, dtype=float))
        if g.shape[0] != self.d:
            raise DomainError(f"g must have {self.d} rows")
        S = self.step_solve_matrix(dt)
        resp = S @ g  # (d, m)
        scale = 1.0 / (1.0 + dt * self.nodes)  # (n,)
        return (scale[:, None, None] * resp[None, :, :]).reshape(self.state_dim, g.shape[1])


def fractional_power(M: np.ndarray, p: float, cond_threshold: float = 1e8) -> np.ndarray:
    """Real matrix power M^p through the eigendecomposition.

    Requires M diagonalizable with an eigenvector matrix whose condition
    number stays below the threshold; otherwise the computed power is
    untrustworthy and a ConditioningError asks the caller to reduce the node
    count or perturb the nodes.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DomainError("matrix power needs a square matrix")
    if not (-1.0 <= p <= 2.0):
        raise DomainError("power restricted to [-1, 2]")
    lam, V = np.linalg.eig(M)
    cond = np.linalg.cond(V)
    if not np.isfinite(cond) or cond > cond_threshold:
        raise ConditioningError(
            f"eigenvector condition number {cond:.3g} exceeds {cond_threshold:g}; "
            "reduce the number of nodes or perturb them"
        )
    powered = V @ np.diag(lam.astype(complex) ** p) @ np.linalg.inv(V)
    imag_resid = np.max(np.abs(powered.imag))
    scale = max(np.max(np.abs(powered.real)), 1e-300)
    if imag_resid > 1e-6 * scale:
        raise ConditioningError(
            f"matrix power has imaginary residue {imag_resid:.3g} "
            "(non-principal branch or defective system)"
        )
    return powered.real
