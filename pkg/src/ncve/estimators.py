"""Vaccine effectiveness estimators for test-negative design samples.

Four estimators share one report type:

* estimate_ve_nc: the negative control method with a fitted bridge. The
  point estimate has a closed ratio form; standard errors stack the
  effect-estimating function with the bridge moment conditions so that
  bridge uncertainty propagates.
* estimate_ve_oracle: same weighting with a fixed (true) bridge, so no
  bridge block enters the variance.
* estimate_ve_conditional: covariate-conditional log risk ratio
  beta0(X; alpha) solved from a vector estimating equation.
* estimate_ve_logistic: the conventional logistic regression baseline,
  fitted by IRLS from scratch; it targets an odds ratio and ignores
  unmeasured confounding, so it serves as the comparison method.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import expit, ndtri

from .bridge import BridgeFit, CategoricalBridgeTable, ContinuousBridgeParams, eval_bridge
from .data_model import EstimateReport, TndSample, validate
from .errors import (
    ConvergenceError,
    DegenerateDataError,
    IdentifiabilityError,
    SchemaError,
)
from .solver import EstimatingSystem, numeric_jacobian, ordered_mean, sandwich_vcov, solve_root

IRLS_MAX_ITER = 100
IRLS_TOL = 1e-12
SEPARATION_BOUND = 30.0

RISK_RATIO_NOTE = (
    "Estimate is on the risk-ratio scale; under selection that depends on "
    "vaccination it retains an odds-ratio reading with the alternative "
    "bridge definition, with no change to the computation."
)
ODDS_RATIO_NOTE = (
    "Logistic regression targets a conditional odds ratio; with rare "
    "infection it approximates the log risk ratio."
)


def _design_matrix(sample: TndSample, intercept: bool = True) -> tuple[np.ndarray, list[str]]:
    """Covariate design: numeric columns as-is, categorical columns one-hot.

    Categorical covariates (declared in the roles) expand to indicator
    columns for every level but the first (reference) level observed in the
    sample, sorted ascending.
    """
    cols: list[np.ndarray] = []
    names: list[str] = []
    if intercept:
        cols.append(np.ones(sample.n))
        names.append("1")
    for j, name in enumerate(sample.roles.covariates):
        col = sample.x[:, j]
        if name in sample.roles.categorical:
            levels = np.unique(col)
            for level in levels[1:]:
                cols.append((col == level).astype(float))
                names.append(f"{name}=={_trim(level)}")
        else:
            cols.append(col)
            names.append(name)
    return np.column_stack(cols) if cols else np.empty((sample.n, 0)), names


def _trim(v: float) -> str:
    return str(int(v)) if v == int(v) else repr(v)


@dataclass(frozen=True)
class CFunctionSpec:
    """The user-chosen c(X) weighting function of the estimating equation.

    Algorithm-1-style estimation needs a one-dimensional c; the conditional
    estimator needs dim(c) equal to the number of beta-model parameters.
    """

    form: str
    fn: Callable[[TndSample], np.ndarray]

    @classmethod
    def one(cls) -> "CFunctionSpec":
        return cls("constant-one", lambda s: np.ones((s.n, 1)))

    @classmethod
    def scaled(cls, k: float) -> "CFunctionSpec":
        return cls(f"constant-{k}", lambda s: np.full((s.n, 1), float(k)))

    @classmethod
    def covariates(cls) -> "CFunctionSpec":
        """Intercept plus the covariate design; pairs with a linear beta model."""
        return cls("covariate-vector", lambda s: _design_matrix(s, intercept=True)[0])

    @classmethod
    def custom(cls, fn: Callable[[TndSample], np.ndarray], label: str = "custom") -> "CFunctionSpec":
        return cls(label, fn)

    def values(self, sample: TndSample) -> np.ndarray:
        out = np.asarray(self.fn(sample), dtype=float)
        if out.ndim == 1:
            out = out[:, None]
        if out.shape[0] != sample.n:
            raise ValueError(f"c(X) returned {out.shape[0]} rows for n={sample.n}")
        if not np.all(np.isfinite(out)):
            raise ValueError("c(X) produced non-finite values")
        if np.any(np.all(out == 0.0, axis=0)):
            raise ValueError("c(X) has an identically zero component")
        return out


@dataclass(frozen=True)
class BetaModelSpec:
    """Model beta0(X; alpha) = features(X) . alpha for conditional effects.

    The reference feature vector is the design evaluated at X = 0 (just the
    intercept for the default forms); reports quote beta at that reference.
    """

    form: str
    fn: Callable[[TndSample], np.ndarray]
    names_fn: Callable[[TndSample], list[str]]

    @classmethod
    def intercept_only(cls) -> "BetaModelSpec":
        return cls("intercept-only",
                   lambda s: np.ones((s.n, 1)),
                   lambda s: ["alpha0"])

    @classmethod
    def linear(cls) -> "BetaModelSpec":
        def fn(s):
            design, _ = _design_matrix(s, intercept=True)
            return design

        def names(s):
            _, nm = _design_matrix(s, intercept=True)
            return ["alpha0"] + [f"alpha[{c}]" for c in nm[1:]]

        return cls("linear", fn, names)

    @classmethod
    def custom(cls, fn: Callable[[TndSample], np.ndarray],
               names: list[str]) -> "BetaModelSpec":
        return cls("custom", fn, lambda s: list(names))

    def features(self, sample: TndSample) -> np.ndarray:
        out = np.asarray(self.fn(sample), dtype=float)
        if out.ndim == 1:
            out = out[:, None]
        return out

    def reference_features(self, k: int) -> np.ndarray:
        """Design vector at the reference covariate point (X = 0)."""
        ref = np.zeros(k)
        ref[0] = 1.0
        return ref


def wald_ci(beta_hat: float, var_beta: float, alpha_level: float = 0.05) -> tuple[float, float]:
    """Wald confidence interval for VE = 1 - exp(beta).

    Returns (1 - exp(beta + z*sqrt(v)), 1 - exp(beta - z*sqrt(v))), which is
    already ordered lower <= upper because exp is increasing.
    """
    if not 0.0 < alpha_level < 1.0:
        raise ValueError(f"alpha_level must be in (0, 1), got {alpha_level}")
    if var_beta < 0.0:
        raise ValueError(f"variance must be non-negative, got {var_beta}")
    z = float(ndtri(1.0 - alpha_level / 2.0))
    half = z * math.sqrt(var_beta)
    return (1.0 - math.exp(beta_hat + half), 1.0 - math.exp(beta_hat - half))


def _require_healthy(sample: TndSample) -> list:
    findings = validate(sample)
    fatal = [f for f in findings if f.severity == "fatal"]
    if fatal:
        raise DegenerateDataError("; ".join(f.message for f in fatal))
    return findings


def _point_estimate(c_vals: np.ndarray, q: np.ndarray, a: np.ndarray,
                    y: np.ndarray) -> float:
    """Closed-form log ratio of bridge-weighted case counts.

    Computed as log(S1) - log(S2) so that relabeling the arms negates the
    estimate exactly.
    """
    cq = c_vals[:, 0] * q
    s1 = float(np.sum(cq * a * y))
    s2 = float(np.sum(cq * (1.0 - a) * y))
    if s1 <= 0.0:
        raise DegenerateDataError(
            f"weighted case count non-positive in the vaccinated arm ({s1:.4g})"
        )
    if s2 <= 0.0:
        raise DegenerateDataError(
            f"weighted case count non-positive in the unvaccinated arm ({s2:.4g})"
        )
    return math.log(s1) - math.log(s2)


def _v1_rows(beta: float, c_vals: np.ndarray, q: np.ndarray, a: np.ndarray,
             y: np.ndarray) -> np.ndarray:
    """Per-record effect moments (-1)^(1-A) c(X) q Y exp(-beta A), one column per c."""
    sign = 2.0 * a - 1.0
    return c_vals * (sign * q * y * np.exp(-beta * a))[:, None]


def _check_bridge_compat(sample: TndSample, fit: BridgeFit) -> None:
    if fit.spec.form == "logistic-gaussian" and fit.spec.n_covariates != sample.x.shape[1]:
        raise SchemaError(
            f"bridge expects {fit.spec.n_covariates} covariate(s), "
            f"sample has {sample.x.shape[1]}"
        )


def _report(estimator: str, scale: str, beta_hat: float, var_beta: float,
            vcov: np.ndarray, alpha_level: float, param_names: tuple[str, ...],
            diagnostics: dict, note: str, alpha_hat=None) -> EstimateReport:
    ve_hat = 1.0 - math.exp(beta_hat)
    var_beta = max(float(var_beta), 0.0)
    ci = wald_ci(beta_hat, var_beta, alpha_level)
    return EstimateReport(
        estimator=estimator,
        scale=scale,
        beta_hat=float(beta_hat),
        ve_hat=ve_hat,
        var_beta=var_beta,
        vcov=vcov,
        ci=ci,
        alpha_level=alpha_level,
        param_names=param_names,
        diagnostics=diagnostics,
        note=note,
        alpha_hat=alpha_hat,
    )


def estimate_ve_nc(sample: TndSample, bridge: BridgeFit,
                   c: CFunctionSpec | None = None,
                   alpha_level: float = 0.05) -> EstimateReport:
    """Negative control estimate of marginal VE with a fitted bridge.

    The point estimate is the closed-form weighted case-count ratio; the
    variance stacks the effect moment with the bridge moment conditions and
    applies the pseudo-inverse sandwich, so bridge-fitting noise is part of
    the reported uncertainty.
    """
    findings = _require_healthy(sample)
    if not isinstance(bridge, BridgeFit):
        raise TypeError("estimate_ve_nc needs a fitted bridge; "
                        "use estimate_ve_oracle for fixed bridge weights")
    _check_bridge_compat(sample, bridge)
    c = c or CFunctionSpec.one()
    c_vals = c.values(sample)
    if c_vals.shape[1] != 1:
        raise ValueError("marginal estimation needs a one-dimensional c(X)")

    a, y = sample.a, sample.y
    q_hat = bridge.eval(a, sample.z, sample.x)
    beta_hat = _point_estimate(c_vals, q_hat, a, y)

    tau_hat = bridge.tau_hat
    theta_hat = np.concatenate([[beta_hat], tau_hat])

    def stacked_rows(theta):
        beta, tau = theta[0], theta[1:]
        q = bridge.spec.q_values(tau, a, sample.z, sample.x)
        v1 = _v1_rows(beta, c_vals, q, a, y)
        return np.hstack([v1, bridge.moment_rows(sample, tau)])

    def stacked_mean(theta):
        return ordered_mean(stacked_rows(theta))

    per_record = stacked_rows(theta_hat)
    omega = numeric_jacobian(stacked_mean, theta_hat)
    vcov = sandwich_vcov(per_record, omega)

    diagnostics = {
        "n": sample.n,
        "bridge_iterations": bridge.iterations,
        "bridge_residual_norm": bridge.residual_norm,
        "bridge_moment_residuals": ordered_mean(bridge.moment_rows(sample)).tolist(),
        "stacked_moment_norm": float(np.linalg.norm(ordered_mean(per_record))),
        "warnings": [f.message for f in findings],
        "c_form": c.form,
    }
    names = ("beta",) + bridge.spec.param_names
    return _report("nc", "risk-ratio", beta_hat, vcov[0, 0], vcov, alpha_level,
                   names, diagnostics, RISK_RATIO_NOTE)


def estimate_ve_oracle(sample: TndSample,
                       true_bridge,
                       c: CFunctionSpec | None = None,
                       alpha_level: float = 0.05) -> EstimateReport:
    """Negative control estimate with a fixed (true) bridge.

    Identical weighting to estimate_ve_nc but the bridge is taken as known,
    so the sandwich has no bridge-uncertainty block. Available in simulation
    studies where the generative bridge is computable.
    """
    findings = _require_healthy(sample)
    c = c or CFunctionSpec.one()
    c_vals = c.values(sample)
    if c_vals.shape[1] != 1:
        raise ValueError("marginal estimation needs a one-dimensional c(X)")

    a, y = sample.a, sample.y
    q = np.asarray(eval_bridge(true_bridge, a, sample.z, sample.x), dtype=float)
    beta_hat = _point_estimate(c_vals, q, a, y)

    def mean_v1(theta):
        return ordered_mean(_v1_rows(theta[0], c_vals, q, a, y))

    per_record = _v1_rows(beta_hat, c_vals, q, a, y)
    omega = numeric_jacobian(mean_v1, np.array([beta_hat]))
    vcov = sandwich_vcov(per_record, omega)

    diagnostics = {
        "n": sample.n,
        "stacked_moment_norm": float(np.linalg.norm(ordered_mean(per_record))),
        "warnings": [f.message for f in findings],
        "c_form": c.form,
    }
    return _report("nc-oracle", "risk-ratio", beta_hat, vcov[0, 0], vcov,
                   alpha_level, ("beta",), diagnostics, RISK_RATIO_NOTE)


def estimate_ve_conditional(sample: TndSample, bridge: BridgeFit,
                            beta_model: BetaModelSpec | None = None,
                            c: CFunctionSpec | None = None,
                            alpha_level: float = 0.05) -> EstimateReport:
    """Covariate-conditional VE: solve for alpha in beta0(X; alpha).

    alpha solves (1/n) sum_i (-1)^(1-A_i) c(X_i) q(A_i,Z_i,X_i; tau_hat) Y_i
    exp(-beta0(X_i; alpha) A_i) = 0. The default c(X) is the beta-model
    design itself. The report quotes beta at the reference covariate point
    (X = 0) and carries the full (alpha, tau) sandwich; VE at other covariate
    values comes from conditional_ve_at.
    """
    findings = _require_healthy(sample)
    if not isinstance(bridge, BridgeFit):
        raise TypeError("estimate_ve_conditional needs a fitted bridge")
    _check_bridge_compat(sample, bridge)
    beta_model = beta_model or BetaModelSpec.intercept_only()
    features = beta_model.features(sample)
    k = features.shape[1]
    c = c or (CFunctionSpec.one() if k == 1
              else CFunctionSpec.custom(lambda s, f=features: f, "beta-model-design"))
    c_vals = c.values(sample)
    if c_vals.shape[1] != k:
        raise ValueError(
            f"c(X) dimension {c_vals.shape[1]} must match beta-model dimension {k}"
        )
    cases = sample.y == 1
    if np.linalg.matrix_rank(features[cases]) < k:
        raise IdentifiabilityError(
            "beta-model design is rank deficient on the test-positive records"
        )

    a, y = sample.a, sample.y
    q_hat = bridge.eval(a, sample.z, sample.x)
    sign = 2.0 * a - 1.0

    def alpha_rows(alpha):
        lin = features @ alpha
        return c_vals * (sign * q_hat * y * np.exp(-lin * a))[:, None]

    system = EstimatingSystem(k, k, alpha_rows, sample.n)
    result = solve_root(system, np.zeros(k))
    alpha_hat = result.theta_hat

    tau_hat = bridge.tau_hat
    theta_hat = np.concatenate([alpha_hat, tau_hat])

    def stacked_rows(theta):
        alpha, tau = theta[:k], theta[k:]
        q = bridge.spec.q_values(tau, a, sample.z, sample.x)
        lin = features @ alpha
        eff = c_vals * (sign * q * y * np.exp(-lin * a))[:, None]
        return np.hstack([eff, bridge.moment_rows(sample, tau)])

    def stacked_mean(theta):
        return ordered_mean(stacked_rows(theta))

    per_record = stacked_rows(theta_hat)
    omega = numeric_jacobian(stacked_mean, theta_hat)
    vcov = sandwich_vcov(per_record, omega)

    ref = beta_model.reference_features(k)
    beta_ref = float(ref @ alpha_hat)
    var_ref = float(ref @ vcov[:k, :k] @ ref)

    names = tuple(beta_model.names_fn(sample)) + bridge.spec.param_names
    diagnostics = {
        "n": sample.n,
        "solver_iterations": result.iterations,
        "residual_norm": result.residual_norm,
        "bridge_residual_norm": bridge.residual_norm,
        "beta_model": beta_model.form,
        "warnings": [f.message for f in findings],
        "c_form": c.form,
    }
    note = (RISK_RATIO_NOTE +
            " beta_hat is the log effect at the reference covariate point (X = 0).")
    return _report("nc-conditional", "risk-ratio", beta_ref, var_ref, vcov,
                   alpha_level, names, diagnostics, note,
                   alpha_hat=tuple(alpha_hat.tolist()))


def conditional_ve_at(report: EstimateReport, beta_model: BetaModelSpec,
                      sample: TndSample, row_index: int) -> tuple[float, float, float]:
    """VE and Wald interval at one record's covariate values.

    Uses the delta method on beta0(x; alpha): var = f(x)' V_alpha f(x).
    """
    if report.alpha_hat is None:
        raise ValueError("report carries no conditional model")
    features = beta_model.features(sample)
    f = features[row_index]
    k = len(report.alpha_hat)
    beta_x = float(f @ np.asarray(report.alpha_hat))
    var_x = float(f @ report.vcov[:k, :k] @ f)
    lo, hi = wald_ci(beta_x, max(var_x, 0.0), report.alpha_level)
    return 1.0 - math.exp(beta_x), lo, hi


def _deviance(y: np.ndarray, p: np.ndarray) -> float:
    p = np.clip(p, 1e-12, 1.0 - 1e-12)
    return -2.0 * float(np.sum(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def estimate_ve_logistic(sample: TndSample,
                         covariate_spec: CFunctionSpec | None = None,
                         alpha_level: float = 0.05) -> EstimateReport:
    """Logistic regression baseline P(Y=1 | A, X) = expit(g0 + gX.X + gA A).

    Fitted by iteratively reweighted least squares from a zero start with
    step-halving whenever the deviance fails to decrease. The reported
    effect is the vaccination coefficient (a log odds ratio) with variance
    from the inverse observed information. Divergence of any coefficient
    past +/-30 is treated as separation and rejected.
    """
    findings = _require_healthy(sample)
    if covariate_spec is None:
        x_design, x_names = _design_matrix(sample, intercept=False)
    else:
        x_design = covariate_spec.values(sample)
        x_names = [f"{covariate_spec.form}{j}" for j in range(x_design.shape[1])]
    design = np.column_stack([np.ones(sample.n), x_design, sample.a])
    names = tuple(["gamma_0"] + [f"gamma[{c}]" for c in x_names] + ["gamma_A"])
    k = design.shape[1]
    if np.linalg.matrix_rank(design) < k:
        raise IdentifiabilityError("logistic design matrix is rank deficient")

    y = sample.y
    gamma = np.zeros(k)
    p = expit(design @ gamma)
    dev = _deviance(y, p)
    info = None
    converged = False
    iterations = 0
    for iterations in range(1, IRLS_MAX_ITER + 1):
        w = p * (1.0 - p)
        score = design.T @ (y - p)
        info = design.T @ (design * w[:, None])
        if float(np.max(np.abs(score))) / sample.n <= IRLS_TOL:
            converged = True
            break
        try:
            delta = np.linalg.solve(info, score)
        except np.linalg.LinAlgError as exc:
            raise IdentifiabilityError(
                f"singular information matrix in IRLS: {exc}") from exc
        step = 1.0
        improved = False
        for _ in range(21):
            cand = gamma + step * delta
            p_cand = expit(design @ cand)
            dev_cand = _deviance(y, p_cand)
            if dev_cand <= dev + 1e-12:
                gamma, p, dev = cand, p_cand, dev_cand
                improved = True
                break
            step *= 0.5
        if not improved:
            converged = float(np.max(np.abs(score))) / sample.n <= 1e-8
            break
        if float(np.max(np.abs(gamma))) > SEPARATION_BOUND:
            raise DegenerateDataError(
                "separation detected in logistic fit (a coefficient passed +/-30)"
            )
    if not converged:
        raise ConvergenceError(
            f"IRLS did not converge within {IRLS_MAX_ITER} iterations")

    w = p * (1.0 - p)
    info = design.T @ (design * w[:, None])
    try:
        vcov = np.linalg.inv(info)
    except np.linalg.LinAlgError as exc:
        raise IdentifiabilityError(
            f"singular information matrix at the IRLS solution: {exc}") from exc
    vcov = (vcov + vcov.T) / 2.0
    beta_hat = float(gamma[-1])

    diagnostics = {
        "n": sample.n,
        "iterations": iterations,
        "deviance": dev,
        "warnings": [f.message for f in findings],
    }
    return _report("logistic", "odds-ratio", beta_hat, vcov[-1, -1], vcov,
                   alpha_level, names, diagnostics, ODDS_RATIO_NOTE)
