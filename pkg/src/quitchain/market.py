"""Exogenous market data for the contract-chain problem.

The model has one risk-neutral principal and a finite ordered family of agent
types theta > 0.  An agent of type theta has exponential risk aversion
lambda(theta), an outside-option (individual rationality) curve R_theta(t),
and a quit cost c_theta(t); the principal bears a cost cP(t) whenever an
agent quits.  Two barriers bound the agent's continuation utility x:

* upper barrier  Lbar(theta, t)  = -lambda * exp(-lambda * C0) * (T - t),
  the utility of the maximal constant payment C0;
* lower barrier  Lund(theta, t)  = R_theta(t) - c_theta(t),
  the level at which quitting becomes optimal for the agent.

Curves are ingested as piecewise-linear breakpoint lists and evaluated by
linear interpolation, which makes the Lipschitz check on the lower barrier
exact on breakpoints.  All solver entry points refuse to run until
``validate_environment`` passes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "AgentTypeSet",
    "Curve",
    "MarketEnvironment",
    "UnknownTypeError",
    "EnvironmentInvalidError",
    "ValidationReport",
    "Violation",
    "upper_barrier",
    "lower_barrier",
    "validate_environment",
    "domain_contains",
]


class UnknownTypeError(KeyError):
    """Raised when a theta value is not in the environment's type set."""


class EnvironmentInvalidError(RuntimeError):
    """Raised by solver entry points when validation has failed."""

    def __init__(self, report):
        self.report = report
        lines = "; ".join(v.message for v in report.violations[:6])
        super().__init__(f"market environment failed validation: {lines}")


class Curve:
    """Piecewise-linear curve on [0, T] given by breakpoints (t_i, v_i)."""

    def __init__(self, breakpoints):
        pts = np.asarray(breakpoints, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise ValueError("curve needs at least two (t, value) breakpoints")
        t = pts[:, 0]
        if np.any(np.diff(t) <= 0.0):
            raise ValueError("curve breakpoint times must be strictly increasing")
        self.t = t
        self.v = pts[:, 1]

    @classmethod
    def constant(cls, value, T):
        return cls([(0.0, value), (T, value)])

    def __call__(self, t):
        return np.interp(t, self.t, self.v)

    def max_abs_slope(self):
        return float(np.max(np.abs(np.diff(self.v) / np.diff(self.t))))

    def breakpoints(self):
        return np.column_stack([self.t, self.v])


class AgentTypeSet:
    """Finite ordered set of agent types with their risk aversions."""

    def __init__(self, theta_values, lambda_values):
        th = np.asarray(theta_values, dtype=float)
        lam = np.asarray(lambda_values, dtype=float)
        if th.ndim != 1 or th.size < 1:
            raise ValueError("need at least one agent type")
        if lam.shape != th.shape:
            raise ValueError("lambda table must match the type list")
        if np.any(th <= 0.0) or not np.all(np.isfinite(th)):
            raise ValueError("agent types must be positive and finite")
        if np.any(np.diff(th) <= 0.0):
            raise ValueError("agent types must be strictly increasing")
        if np.any(lam <= 0.0) or not np.all(np.isfinite(lam)):
            raise ValueError("risk aversions must be positive and finite")
        self.theta_values = th
        self.lambda_values = lam
        self._index = {float(t): i for i, t in enumerate(th)}

    def __len__(self):
        return self.theta_values.size

    def index_of(self, theta):
        try:
            return self._index[float(theta)]
        except KeyError:
            raise UnknownTypeError(f"unknown agent type {theta!r}") from None

    def lambda_of(self, theta):
        return float(self.lambda_values[self.index_of(theta)])

    @property
    def lambda_lower(self):
        return float(self.lambda_values.min())

    @property
    def lambda_upper(self):
        return float(self.lambda_values.max())


@dataclass
class Violation:
    code: str
    message: str
    theta: float | None = None
    t: float | None = None
    value: float | None = None

    def as_dict(self):
        return {
            "code": self.code,
            "message": self.message,
            "theta": self.theta,
            "t": self.t,
            "value": self.value,
        }


@dataclass
class ValidationReport:
    passed: bool
    violations: list = field(default_factory=list)
    measured: dict = field(default_factory=dict)

    def as_dict(self):
        return {
            "passed": self.passed,
            "violations": [v.as_dict() for v in self.violations],
            "measured": self.measured,
        }


class MarketEnvironment:
    """Immutable container for the exogenous market data of one problem.

    Parameters
    ----------
    types : AgentTypeSet
    horizon_T : float
        Contracting horizon T > 0.
    payment_cap_C0 : float
        Uniform upper bound on the payment rate.
    R, c_agent : list of Curve, one per type (same order as the type set)
    c_principal : Curve
    n_grid : int
        Size of the uniform time grid used for validation sampling.
    c0_floor : float, optional
        Declared lower bound for the quit cost; measured minimum if omitted.
    Lambda_lip : float, optional
        Declared Lipschitz constant for the lower barrier; the measured
        maximum breakpoint slope is always reported alongside.
    """

    def __init__(self, types, horizon_T, payment_cap_C0, R, c_agent,
                 c_principal, n_grid=513, c0_floor=None, Lambda_lip=None):
        if horizon_T <= 0.0:
            raise ValueError("horizon_T must be positive")
        if payment_cap_C0 <= 0.0:
            raise ValueError("payment_cap_C0 must be positive")
        if len(R) != len(types) or len(c_agent) != len(types):
            raise ValueError("need one R and one c_agent curve per type")
        self.types = types
        self.horizon_T = float(horizon_T)
        self.payment_cap_C0 = float(payment_cap_C0)
        self.R_curves = list(R)
        self.c_curves = list(c_agent)
        self.cP_curve = c_principal
        self.time_grid = np.linspace(0.0, self.horizon_T, int(n_grid))
        self.declared_c0_floor = c0_floor
        self.declared_Lambda = Lambda_lip
        self.config_hash = None  # set by cli_io when built from a config
        self._report = None

    # -- basic accessors ----------------------------------------------------

    def lam(self, theta):
        return self.types.lambda_of(theta)

    def theta_index(self, theta):
        return self.types.index_of(theta)

    def R(self, theta, t):
        return self.R_curves[self.types.index_of(theta)](t)

    def c(self, theta, t):
        return self.c_curves[self.types.index_of(theta)](t)

    def cP(self, t):
        return self.cP_curve(t)

    # -- barriers ------------------------------------------------------------

    def upper_barrier(self, theta, t):
        lam = self.lam(theta)
        return -lam * np.exp(-lam * self.payment_cap_C0) * (self.horizon_T - np.asarray(t, dtype=float))

    def lower_barrier(self, theta, t):
        i = self.types.index_of(theta)
        return self.R_curves[i](t) - self.c_curves[i](t)

    def width(self, theta, t):
        return self.upper_barrier(theta, t) - self.lower_barrier(theta, t)

    def domain_contains(self, theta, t, x):
        if not (0.0 <= t < self.horizon_T):
            return False
        return bool(self.lower_barrier(theta, t) < x <= self.upper_barrier(theta, t))

    # -- validation ----------------------------------------------------------

    def _check_times(self, i):
        """Union of the uniform grid and this type's curve breakpoints."""
        times = np.concatenate([
            self.time_grid,
            self.R_curves[i].t,
            self.c_curves[i].t,
            self.cP_curve.t,
        ])
        times = np.unique(np.clip(times, 0.0, self.horizon_T))
        return times

    def measured_c0_floor(self):
        vals = [c((self._check_times(i))).min() for i, c in enumerate(self.c_curves)]
        return float(min(vals))

    def measured_Lambda(self):
        """Max |d(lower barrier)/dt| over all segments of all types."""
        worst = 0.0
        for i in range(len(self.types)):
            tt = np.unique(np.concatenate([self.R_curves[i].t, self.c_curves[i].t]))
            low = self.R_curves[i](tt) - self.c_curves[i](tt)
            slopes = np.abs(np.diff(low) / np.diff(tt))
            if slopes.size:
                worst = max(worst, float(slopes.max()))
        return worst

    def validate(self):
        if self._report is None:
            self._report = validate_environment(self)
        return self._report

    def require_valid(self):
        report = self.validate()
        if not report.passed:
            raise EnvironmentInvalidError(report)
        return report


# -- module-level operations ------------------------------------------------


def upper_barrier(theta, t, env):
    """Maximal achievable agent utility at time t under the payment cap."""
    return float(env.upper_barrier(theta, t))


def lower_barrier(theta, t, env):
    """Quit-trigger level R - c at time t, interpolated between breakpoints."""
    return float(env.lower_barrier(theta, t))


def domain_contains(theta, t, x, env):
    """True iff 0 <= t < T and lower(t) < x <= upper(t) for this type."""
    env.theta_index(theta)
    return env.domain_contains(theta, t, x)


def validate_environment(env):
    """Check the standing assumptions; violations are data, not exceptions.

    A failed report blocks all solver entry points (they call
    ``env.require_valid()``).
    """
    violations = []
    T = env.horizon_T

    for i, theta in enumerate(env.types.theta_values):
        theta = float(theta)
        tt = env._check_times(i)
        Rv = env.R_curves[i](tt)
        cv = env.c_curves[i](tt)
        ub = env.upper_barrier(theta, tt)

        for name, vals in (("R", Rv), ("c_agent", cv)):
            if not np.all(np.isfinite(vals)):
                violations.append(Violation(
                    "non-finite-curve", f"{name} curve has non-finite values",
                    theta=theta))

        rT = float(env.R_curves[i](T))
        if abs(rT) > 1e-9:
            violations.append(Violation(
                "terminal-ir-nonzero", "terminal IR must be zero",
                theta=theta, t=T, value=rT))

        bad = np.nonzero(Rv > ub + 1e-12)[0]
        if bad.size:
            j = int(bad[0])
            violations.append(Violation(
                "ir-above-upper-barrier", "IR above upper barrier",
                theta=theta, t=float(tt[j]), value=float(Rv[j] - ub[j])))

    floor = env.declared_c0_floor
    measured_floor = env.measured_c0_floor()
    if floor is None:
        floor = measured_floor
    if measured_floor <= 0.0:
        # witness: first (theta, t) with non-positive cost
        for i, theta in enumerate(env.types.theta_values):
            tt = env._check_times(i)
            cv = env.c_curves[i](tt)
            bad = np.nonzero(cv <= 0.0)[0]
            if bad.size:
                violations.append(Violation(
                    "quit-cost-below-floor", "quit cost below c0 floor",
                    theta=float(theta), t=float(tt[bad[0]]),
                    value=float(cv[bad[0]])))
                break
    elif env.declared_c0_floor is not None and measured_floor < env.declared_c0_floor - 1e-12:
        violations.append(Violation(
            "quit-cost-below-floor", "quit cost below c0 floor",
            value=measured_floor))

    tt = np.unique(np.concatenate([env.time_grid, env.cP_curve.t]))
    cpv = env.cP_curve(tt)
    if not np.all(np.isfinite(cpv)):
        violations.append(Violation("non-finite-curve", "c_principal curve has non-finite values"))
    bad = np.nonzero(cpv < -1e-12)[0]
    if bad.size:
        violations.append(Violation(
            "negative-principal-cost", "principal quit cost must be nonnegative",
            t=float(tt[bad[0]]), value=float(cpv[bad[0]])))

    measured_Lambda = env.measured_Lambda()
    if env.declared_Lambda is not None and measured_Lambda > env.declared_Lambda + 1e-12:
        violations.append(Violation(
            "lipschitz-exceeded",
            "lower-barrier slope exceeds declared Lipschitz constant",
            value=measured_Lambda))

    measured = {
        "c0_floor": measured_floor,
        "Lambda": measured_Lambda,
        "lambda_lower": env.types.lambda_lower,
        "lambda_upper": env.types.lambda_upper,
    }
    return ValidationReport(passed=not violations, violations=violations,
                            measured=measured)
