"""Experiment configuration: JSON schema, coefficient catalog, problem builder.

A CLI cannot carry arbitrary Python callables, so configurations select
coefficients from a small named catalog (linear drift, affine or saturating
control drift, quadratic running cost, linear or soft-capped terminal cost).
The library layer accepts arbitrary coefficient packs directly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, DomainError
from .forward import Constants, ControlSet, ProblemSpec, uniform_grid
from .kernel import BernsteinKernel, DISCRETE, discretize, make_discrete, make_exponential, make_fractional, singularity_index
from .lift import DiscreteLift, History, OperatorA

STAGES = ("fit", "hypotheses", "simulate", "bsde", "synthesize", "verify",
          "residuals", "sensitivity")


def derive_seed(root_seed: int, stage: str) -> int:
    """Stage-local seed by stable hashing of (root seed, stage name)."""
    digest = hashlib.sha256(f"{root_seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


# -- coefficient catalog -------------------------------------------------------


def _vec(x, d: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(x, dtype=float), (d,)).astype(float)


def build_f(spec: dict, d: int):
    """Drift builders: returns (f, f_jac, lipschitz bound)."""
    name = spec.get("name")
    if name == "linear":
        const = _vec(spec.get("const", 0.0), d)
        slope = np.asarray(spec.get("slope", 0.0), dtype=float)
        if slope.ndim == 0:
            slope = slope * np.eye(d)
        if slope.shape != (d, d):
            raise ConfigError("f.slope must be scalar or a d x d matrix")

        def f(t, u):
            return const + np.asarray(u, dtype=float) @ slope.T

        def f_jac(t, u):
            return slope

        return f, f_jac, float(np.linalg.norm(slope, 2))
    raise ConfigError(f"unknown drift catalog entry {name!r}")


def build_r(spec: Optional[dict], d: int, m: int):
    """Control drift builders: returns (r, bound C_r estimate fn)."""
    if spec is None:
        return None, 0.0
    name = spec.get("name")
    if name == "affine":
        base = _vec(spec.get("base", 0.0), m)
        coef = _vec(spec.get("gamma_coef", 0.0), m)

        def r(t, u, gamma):
            out = base + coef * float(gamma)
            return np.broadcast_to(out, np.shape(u)[:-1] + (m,))

        return r, float(np.max(np.abs(base)) + np.max(np.abs(coef)))
    if name == "saturating_bilinear":
        base = _vec(spec.get("base", 0.0), m)
        coef = _vec(spec.get("gamma_coef", 0.0), m)
        u_coef = float(spec.get("u_coef", 0.0))
        cross = float(spec.get("cross", 0.0))
        cap = float(spec.get("cap", 1.0))
        if cap <= 0:
            raise ConfigError("saturating r needs cap > 0")

        def r(t, u, gamma):
            u = np.asarray(u, dtype=float)
            um = np.mean(u, axis=-1)
            s = base + coef * float(gamma) + (u_coef + cross * float(gamma)) * um[..., None]
            return cap * np.tanh(s / cap)

        return r, cap
    raise ConfigError(f"unknown control drift catalog entry {name!r}")


def build_l(spec: Optional[dict], d: int):
    """Running cost builders: returns (l, bound of |l(t,0,gamma)|)."""
    if spec is None:
        return None, 0.0
    name = spec.get("name")
    if name == "quadratic":
        const = float(spec.get("const", 0.0))
        u_coef = _vec(spec.get("u_coef", 0.0), d)
        u_quad = float(spec.get("u_quad", 0.0))
        g_coef = float(spec.get("gamma_coef", 0.0))
        g_quad = float(spec.get("gamma_quad", 0.0))

        def l(t, u, gamma):
            u = np.asarray(u, dtype=float)
            gam = float(gamma)
            return (const + u @ u_coef + u_quad * np.sum(u * u, axis=-1)
                    + g_coef * gam + g_quad * gam * gam)

        return l, abs(const) + abs(g_coef) + abs(g_quad)
    raise ConfigError(f"unknown running cost catalog entry {name!r}")


def build_phi(spec: dict, d: int):
    """Terminal cost builders: returns (phi, Lipschitz bound)."""
    name = spec.get("name")
    const = float(spec.get("const", 0.0))
    u_coef = _vec(spec.get("u_coef", 1.0), d)
    if name == "linear":

        def phi(u):
            return const + np.asarray(u, dtype=float) @ u_coef

        return phi, float(np.linalg.norm(u_coef))
    if name == "soft_capped":
        cap = float(spec.get("cap", 1.0))
        if cap <= 0:
            raise ConfigError("soft-capped phi needs cap > 0")

        def phi(u):
            return const + cap * np.tanh((np.asarray(u, dtype=float) @ u_coef) / cap)

        return phi, float(np.linalg.norm(u_coef))
    raise ConfigError(f"unknown terminal cost catalog entry {name!r}")


# -- configuration ----------------------------------------------------------------


@dataclass
class ExperimentConfig:
    kernel: dict
    A: list
    coefficients: dict
    grid: dict
    history: dict = field(default_factory=lambda: {"kind": "zero"})
    controls: Optional[dict] = None
    eta: Optional[float] = None
    theta: Optional[float] = None
    noise_cols: int = 1
    mc: dict = field(default_factory=dict)
    seed: int = 0
    stages: list = field(default_factory=lambda: list(STAGES))

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(doc: dict) -> "ExperimentConfig":
        known = {f for f in ExperimentConfig.__dataclass_fields__}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown config fields: {sorted(extra)}")
        missing = {"kernel", "A", "coefficients", "grid"} - set(doc)
        if missing:
            raise ConfigError(f"missing config fields: {sorted(missing)}")
        cfg = ExperimentConfig(**doc)
        cfg.validate()
        return cfg

    @staticmethod
    def from_json(text: str) -> "ExperimentConfig":
        return ExperimentConfig.from_dict(json.loads(text))

    def to_json(self, **kwargs) -> str:
        kwargs.setdefault("indent", 2)
        kwargs.setdefault("sort_keys", True)
        return json.dumps(self.to_dict(), **kwargs)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    def validate(self) -> None:
        fam = self.kernel.get("family")
        if fam not in ("fractional", "exponential", "discrete"):
            raise ConfigError(f"unknown kernel family {fam!r}")
        if fam != "discrete" and "fit" not in self.kernel:
            raise ConfigError("analytic kernels need a 'fit' block (n, window)")
        g = self.grid
        if not (isinstance(g.get("N"), int) and g["N"] >= 2):
            raise ConfigError("grid.N must be an integer >= 2")
        if not (g.get("T", 0) > 0):
            raise ConfigError("grid.T must be positive")
        for st in self.stages:
            if st not in STAGES:
                raise ConfigError(f"unknown stage {st!r}")
        if "f" not in self.coefficients or "phi" not in self.coefficients:
            raise ConfigError("coefficients need at least 'f' and 'phi'")
        if self.controls is not None:
            if not ("points" in self.controls or "interval" in self.controls):
                raise ConfigError("controls need 'points' or 'interval'")

    # -- builders ------------------------------------------------------------

    def analytic_kernel(self) -> BernsteinKernel:
        fam = self.kernel["family"]
        if fam == "fractional":
            return make_fractional(float(self.kernel["rho"]))
        if fam == "exponential":
            return make_exponential(float(self.kernel["kappa0"]))
        return make_discrete(self.kernel["nodes"], self.kernel["weights"])

    def fitted_kernel(self) -> tuple:
        """(discrete kernel, certified sup relative error or None)."""
        base = self.analytic_kernel()
        if base.family == DISCRETE:
            return base, None
        fit = self.kernel["fit"]
        win = tuple(float(x) for x in fit["window"])
        return discretize(base, int(fit["n"]), win, tol=fit.get("tol"))

    def control_set(self) -> Optional[ControlSet]:
        if self.controls is None:
            return None
        if "points" in self.controls:
            return ControlSet(np.asarray(self.controls["points"], dtype=float))
        lo, hi = self.controls["interval"]
        return ControlSet.from_interval(float(lo), float(hi), int(self.controls.get("num", 101)))

    def build_history(self) -> History:
        h = self.history
        kind = h.get("kind", "zero")
        if kind == "zero":
            return History.zero()
        if kind == "exponential":
            return History.exponential(h["ubar"], float(h["omega"]))
        if kind == "recent_constant":
            return History.recent_constant(h["ubar"], float(h["delta"]))
        raise ConfigError(f"unknown history kind {kind!r}")

    def build_problem(self) -> tuple:
        """Returns (problem, grid, info dict with the fit error and exponents)."""
        kernel_d, fit_err = self.fitted_kernel()
        A = OperatorA(np.asarray(self.A, dtype=float))
        alpha = None
        if self.eta is None or self.theta is None:
            base = self.analytic_kernel()
            if base.family == DISCRETE:
                raise ConfigError("discrete kernels need explicit eta/theta in the config")
            alpha = singularity_index(base)
        lift = DiscreteLift(kernel_d, A, eta=self.eta, theta=self.theta, alpha=alpha)
        d = A.dimension
        m = int(self.noise_cols)
        g_mat = np.asarray(self.coefficients.get("g", np.ones((d, m)) if m else np.zeros((d, 0))),
                           dtype=float).reshape(d, m)
        f, f_jac, L_f = build_f(self.coefficients["f"], d)
        r, C_r = build_r(self.coefficients.get("r"), d, m)
        l, C_l = build_l(self.coefficients.get("l"), d)
        phi, L_phi = build_phi(self.coefficients["phi"], d)
        problem = ProblemSpec(
            lift=lift, f=f, f_jac=f_jac, g=g_mat, r=r, l=l, phi=phi,
            controls=self.control_set(), history=self.build_history(),
            constants=Constants(L_f=L_f, C_r=C_r, C_l=C_l, L_phi=L_phi),
        )
        grid = uniform_grid(float(self.grid["T"]), int(self.grid["N"]))
        info = {"fit_error": fit_err, "eta": lift.eta, "theta": lift.theta, "alpha": alpha}
        return problem, grid, info

    def mc_value(self, key: str, default: int) -> int:
        return int(self.mc.get(key, default))
