"""Treatment confounding bridge functions.

A bridge q(A, Z, X) reweights selected records so that its conditional
expectation given (A, U, X) equals the inverse propensity 1/P(A|U, X) even
though the confounder U is never observed. This module represents bridges
(categorical tables, logistic-Gaussian parameters, generic linear-in-feature
forms), solves them in closed form where the structure allows, fits them
from data by moment conditions on the test-negative controls, and builds the
exact population bridges implied by the simulation generative models.

Bridge weights may legitimately be negative; nothing here clamps them,
because clamping would bias the downstream estimating equations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np

from .data_model import TndSample
from .errors import DegenerateDataError, IdentifiabilityError, SchemaError
from .solver import (
    EstimatingSystem,
    gmm_minimize,
    ordered_mean,
    solve_root,
)

if TYPE_CHECKING:
    from .simulation import BinaryDgpParams, ContinuousDgpParams

RCOND_FLOOR = 1e-10
GMM_RIDGE = 1e-8


@dataclass(frozen=True)
class CategoricalBridgeTable:
    """Bridge weights q(a, z) for categorical Z, stored per (arm, level).

    values[a][i] is q(a, levels_z[i]). Entries are unconstrained reals.
    """

    levels_z: tuple[float, ...]
    values: np.ndarray  # shape (2, I)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "levels_z", tuple(float(v) for v in self.levels_z))
        if values.shape != (2, len(self.levels_z)):
            raise ValueError(
                f"values shape {values.shape} does not cover 2 arms x "
                f"{len(self.levels_z)} levels"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("bridge table entries must be finite")

    def eval(self, a, z):
        scalar = np.ndim(a) == 0 and np.ndim(z) == 0
        a = np.atleast_1d(np.asarray(a)).astype(int)
        z = np.atleast_1d(np.asarray(z, dtype=float))
        levels = np.asarray(self.levels_z)
        idx = np.searchsorted(levels, z)
        idx_clamped = np.clip(idx, 0, len(levels) - 1)
        bad = levels[idx_clamped] != z
        if np.any(bad):
            raise DegenerateDataError(
                f"NCE level {z[bad][0]!r} not present in the fitted bridge table"
            )
        out = self.values[a, idx_clamped]
        return float(out[0]) if scalar else out


@dataclass(frozen=True)
class ContinuousBridgeParams:
    """Parameters of the logistic-Gaussian bridge.

    q(a, z, x) = 1 + exp[(-1)^a (tau0 + tau1*a + tau2*z + tau3.x)], which is
    strictly positive for every input.
    """

    tau0: float
    tau1: float
    tau2: float
    tau3: np.ndarray

    def __post_init__(self):
        tau3 = np.atleast_1d(np.asarray(self.tau3, dtype=float))
        tau3.setflags(write=False)
        object.__setattr__(self, "tau3", tau3)
        vals = [self.tau0, self.tau1, self.tau2, *tau3.tolist()]
        if not all(np.isfinite(vals)):
            raise ValueError("bridge parameters must be finite")

    @property
    def as_vector(self) -> np.ndarray:
        return np.concatenate([[self.tau0, self.tau1, self.tau2], self.tau3])

    def eval(self, a, z, x=None):
        scalar = np.ndim(a) == 0 and np.ndim(z) == 0
        a = np.atleast_1d(np.asarray(a, dtype=float))
        z = np.atleast_1d(np.asarray(z, dtype=float))
        k = self.tau3.shape[0]
        if k:
            x = np.asarray(x, dtype=float).reshape(a.shape[0], k)
            lin = self.tau0 + self.tau1 * a + self.tau2 * z + x @ self.tau3
        else:
            lin = self.tau0 + self.tau1 * a + self.tau2 * z
        out = 1.0 + np.exp((-1.0) ** a * lin)
        return float(out[0]) if scalar else out


@dataclass(frozen=True)
class BridgeSpec:
    """Parametric form of a bridge plus how to evaluate it from tau.

    Forms:
        saturated-categorical: q = tau0 + tau1*Z + tau2*A + tau3*A*Z for a
            binary NCE (the saturated model on {0,1}^2).
        logistic-gaussian: q = 1 + exp[(-1)^A (tau0 + tau1*A + tau2*Z +
            tau3.X)] with one tau3 entry per covariate.
        custom-linear-in-features: q = phi(A, Z, X).tau for a user feature
            map phi returning an (n, d) matrix.
    """

    form: str
    param_dim: int
    param_names: tuple[str, ...]
    n_covariates: int = 0
    feature_fn: Callable | None = None

    @classmethod
    def saturated(cls) -> "BridgeSpec":
        return cls("saturated-categorical", 4, ("tau0", "tau1", "tau2", "tau3"))

    @classmethod
    def logistic_gaussian(cls, n_covariates: int) -> "BridgeSpec":
        names = ["tau0", "tau1", "tau2"] + [f"tau3_{j + 1}" for j in range(n_covariates)]
        return cls("logistic-gaussian", 3 + n_covariates, tuple(names),
                   n_covariates=n_covariates)

    @classmethod
    def linear_in_features(cls, feature_fn: Callable,
                           param_names: Sequence[str]) -> "BridgeSpec":
        names = tuple(param_names)
        return cls("custom-linear-in-features", len(names), names,
                   feature_fn=feature_fn)

    def q_values(self, tau: np.ndarray, a: np.ndarray, z: np.ndarray,
                 x: np.ndarray) -> np.ndarray:
        """Evaluate q on arrays: a (n,), z (n, kz), x (n, kx)."""
        tau = np.asarray(tau, dtype=float)
        if tau.shape[0] != self.param_dim:
            raise ValueError(f"tau has length {tau.shape[0]}, expected {self.param_dim}")
        if self.form == "saturated-categorical":
            z0 = z[:, 0]
            return tau[0] + tau[1] * z0 + tau[2] * a + tau[3] * a * z0
        if self.form == "logistic-gaussian":
            z0 = z[:, 0]
            lin = tau[0] + tau[1] * a + tau[2] * z0
            if self.n_covariates:
                lin = lin + x[:, :self.n_covariates] @ tau[3:]
            return 1.0 + np.exp((-1.0) ** a * lin)
        if self.form == "custom-linear-in-features":
            phi = np.asarray(self.feature_fn(a, z, x), dtype=float)
            return phi @ tau
        raise ValueError(f"unknown bridge form {self.form!r}")

    def initial_tau(self) -> np.ndarray:
        if self.form == "saturated-categorical":
            return np.array([1.0, 0.0, 0.0, 0.0])
        return np.zeros(self.param_dim)


@dataclass(frozen=True)
class MomentSpec:
    """The m(W, A, X) feature map defining the bridge moment conditions."""

    fn: Callable  # (w (n,kw), a (n,), x (n,kx)) -> (n, dim)
    dim: int
    names: tuple[str, ...]
    tag: str = "custom"

    def values(self, w, a, x) -> np.ndarray:
        out = np.asarray(self.fn(w, a, x), dtype=float)
        if out.ndim == 1:
            out = out[:, None]
        return out


def default_moment_spec(n_nco: int, n_covariates: int) -> MomentSpec:
    """Default m: constant, W, A, X, and every pairwise product with A.

    Gives (1, W, A, W*A) for one NCO and no covariates, the exactly
    identified match to the saturated bridge; adding covariates yields an
    over-identified system handled by two-step GMM.
    """
    names = (["1"]
             + [f"W{j + 1}" for j in range(n_nco)]
             + ["A"]
             + [f"X{j + 1}" for j in range(n_covariates)]
             + [f"A*W{j + 1}" for j in range(n_nco)]
             + [f"A*X{j + 1}" for j in range(n_covariates)])

    def fn(w, a, x):
        n = a.shape[0]
        cols = [np.ones(n)]
        cols.extend(w[:, j] for j in range(n_nco))
        cols.append(a)
        cols.extend(x[:, j] for j in range(n_covariates))
        cols.extend(a * w[:, j] for j in range(n_nco))
        cols.extend(a * x[:, j] for j in range(n_covariates))
        return np.column_stack(cols)

    return MomentSpec(fn, len(names), tuple(names), tag="default-pairwise-with-A")


@dataclass(frozen=True)
class BridgeFit:
    """A fitted bridge: spec, solution, and the moment system that produced it.

    per_record_moments holds the n x d_m moment values at tau_hat so the
    downstream sandwich can stack them without refitting. Fits reloaded from
    JSON carry no moment data (m_spec None); estimators rebuild the default
    moment features in that case.
    """

    spec: BridgeSpec
    tau_hat: np.ndarray
    m_spec: MomentSpec | None
    residual_norm: float
    per_record_moments: np.ndarray | None
    iterations: int

    def __post_init__(self):
        tau = np.asarray(self.tau_hat, dtype=float)
        tau.setflags(write=False)
        object.__setattr__(self, "tau_hat", tau)

    def eval(self, a, z, x=None):
        scalar = np.ndim(a) == 0 and np.ndim(z) == 0
        a = np.atleast_1d(np.asarray(a, dtype=float))
        z = np.atleast_2d(np.asarray(z, dtype=float))
        if z.shape[0] != a.shape[0]:
            z = z.T
        if x is None or np.size(x) == 0:
            x = np.empty((a.shape[0], 0))
        else:
            x = np.asarray(x, dtype=float).reshape(a.shape[0], -1)
        out = self.spec.q_values(self.tau_hat, a, z, x)
        return float(out[0]) if scalar else out

    def moment_rows(self, sample: TndSample, tau: np.ndarray | None = None) -> np.ndarray:
        """Per-record bridge moments on a sample at tau (default tau_hat)."""
        m_spec = self.m_spec
        if m_spec is None:
            m_spec = default_moment_spec(sample.w.shape[1], sample.x.shape[1])
        tau = self.tau_hat if tau is None else np.asarray(tau, dtype=float)
        return _bridge_moment_rows(sample, self.spec, m_spec, tau)

    def to_json_dict(self) -> dict:
        if self.spec.form == "custom-linear-in-features":
            raise ValueError("custom feature maps cannot be serialized to JSON")
        return {
            "kind": "fit",
            "form": self.spec.form,
            "n_covariates": self.spec.n_covariates,
            "tau": self.tau_hat.tolist(),
            "param_names": list(self.spec.param_names),
            "m_features": list(self.m_spec.names) if self.m_spec else None,
            "residual_norm": self.residual_norm,
        }


def _bridge_moment_rows(sample: TndSample, spec: BridgeSpec, m_spec: MomentSpec,
                        tau: np.ndarray) -> np.ndarray:
    q = spec.q_values(tau, sample.a, sample.z, sample.x)
    m_at_a = m_spec.values(sample.w, sample.a, sample.x)
    ones = np.ones(sample.n)
    m_at_1 = m_spec.values(sample.w, ones, sample.x)
    m_at_0 = m_spec.values(sample.w, 1.0 - ones, sample.x)
    controls = (1.0 - sample.y)[:, None]
    return controls * (m_at_a * q[:, None] - m_at_1 - m_at_0)


def solve_bridge_categorical(p: np.ndarray) -> np.ndarray:
    """Solve P'(a) q = 1 for the per-level bridge weights of one arm.

    p is the square matrix of cell probabilities P(Z=z_i, A=a | stratum k)
    with one row per stratum (NCO level for the empirical version, confounder
    level for the generative one) and one column per NCE level.

    Raises IdentifiabilityError when the matrix is singular or nearly so
    (reciprocal condition number below 1e-10): the bridge system has no
    unique solution.
    """
    p = np.atleast_2d(np.asarray(p, dtype=float))
    k, i = p.shape
    if k != i:
        raise ValueError(f"cell matrix must be square, got {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise ValueError("cell matrix entries must be probabilities in [0, 1]")
    s = np.linalg.svd(p, compute_uv=False)
    if s[0] == 0.0 or s[-1] / s[0] < RCOND_FLOOR:
        raise IdentifiabilityError(
            "singular bridge system: no unique solution exists "
            f"(reciprocal condition number {0.0 if s[0] == 0 else s[-1] / s[0]:.2e})"
        )
    return np.linalg.solve(p, np.ones(k))


def fit_bridge_moment(sample: TndSample, spec: BridgeSpec,
                      m_spec: MomentSpec | None = None,
                      tol: float = 1e-10, max_iter: int = 100) -> BridgeFit:
    """Fit tau by the control-only moment conditions.

    Solves (1/n) sum_i (1-Y_i)[m(W_i,A_i,X_i) q(A_i,Z_i,X_i; tau)
    - m(W_i,1,X_i) - m(W_i,0,X_i)] = 0. Exactly identified systems go
    through damped Newton; over-identified ones through two-step GMM
    (identity weight, then the inverse estimated moment covariance with a
    small ridge).
    """
    if m_spec is None:
        m_spec = default_moment_spec(sample.w.shape[1], sample.x.shape[1])
    if m_spec.dim < spec.param_dim:
        raise IdentifiabilityError(
            f"moment features ({m_spec.dim}) under-identify the bridge "
            f"parameters ({spec.param_dim})"
        )
    controls = sample.y == 0
    if not np.any(controls & (sample.a == 1)) or not np.any(controls & (sample.a == 0)):
        raise DegenerateDataError(
            "bridge fitting needs test-negative records in both arms"
        )

    def rows(tau):
        return _bridge_moment_rows(sample, spec, m_spec, tau)

    system = EstimatingSystem(spec.param_dim, m_spec.dim, rows, sample.n)
    init = spec.initial_tau()
    if m_spec.dim == spec.param_dim:
        result = solve_root(system, init, tol=tol, max_iter=max_iter)
    else:
        first = gmm_minimize(system, np.eye(m_spec.dim), init, tol=tol,
                             max_iter=max_iter)
        g = rows(first.theta_hat)
        centered = g - ordered_mean(g)
        cov = centered.T @ centered / sample.n
        trace = float(np.trace(cov))
        if trace <= 0.0:
            raise IdentifiabilityError("bridge moment covariance is zero")
        weight = np.linalg.inv(cov + (GMM_RIDGE * trace / m_spec.dim) * np.eye(m_spec.dim))
        weight = (weight + weight.T) / 2.0
        result = gmm_minimize(system, weight, first.theta_hat, tol=tol,
                              max_iter=max_iter)

    per_record = rows(result.theta_hat)
    residual_norm = float(np.linalg.norm(ordered_mean(per_record)))
    return BridgeFit(spec, result.theta_hat, m_spec, residual_norm, per_record,
                     result.iterations)


def eval_bridge(bridge, a, z, x=None) -> np.ndarray:
    """Evaluate any bridge representation on scalars or arrays."""
    scalar = np.isscalar(a) or (np.asarray(a).ndim == 0)
    a_arr = np.atleast_1d(np.asarray(a, dtype=float))
    n = a_arr.shape[0]
    z_arr = np.asarray(z, dtype=float)
    z_arr = z_arr.reshape(n, -1) if z_arr.size else np.empty((n, 0))
    if isinstance(bridge, CategoricalBridgeTable):
        out = bridge.eval(a_arr, z_arr[:, 0])
    elif isinstance(bridge, ContinuousBridgeParams):
        out = bridge.eval(a_arr, z_arr[:, 0], x)
    elif isinstance(bridge, BridgeFit):
        out = bridge.eval(a_arr, z_arr, x)
    else:
        raise TypeError(f"not a bridge object: {type(bridge).__name__}")
    return float(out[0]) if scalar else out


def moment_residuals(fit: BridgeFit, sample: TndSample) -> np.ndarray:
    """Sample-mean bridge moments at tau_hat; a diagnostic for over-identified fits."""
    return ordered_mean(fit.moment_rows(sample))


def oracle_bridge_binary(dgp: "BinaryDgpParams") -> CategoricalBridgeTable:
    """Exact bridge for the binary generative model.

    For each arm a, solves sum_z q(a,z) P(Z=z, A=a | U=u) = 1 over the two
    confounder levels; the 2x2 systems are built directly from the
    generative probabilities.
    """
    u = np.array([0.0, 1.0])
    pz1 = dgp.p_0z + dgp.p_uz * u
    pa1 = dgp.p_0a + dgp.p_ua * u
    values = np.empty((2, 2))
    for a in (0, 1):
        pa = pa1 if a == 1 else 1.0 - pa1
        matrix = np.column_stack([(1.0 - pz1) * pa, pz1 * pa])
        values[a] = solve_bridge_categorical(matrix)
    return CategoricalBridgeTable((0.0, 1.0), values)


def oracle_bridge_continuous(dgp: "ContinuousDgpParams") -> ContinuousBridgeParams:
    """Exact logistic-Gaussian bridge implied by the continuous generative model.

    Requires mu_uz != 0: when Z carries no confounder signal the bridge is
    not identified.
    """
    if dgp.mu_uz == 0.0:
        raise IdentifiabilityError(
            "mu_uz = 0: the NCE carries no confounder information, "
            "no bridge exists"
        )
    ratio = dgp.mu_ua / dgp.mu_uz
    sigma2 = dgp.sigma_z**2
    tau2 = ratio
    tau3 = dgp.mu_xa - dgp.mu_xz * ratio
    tau1 = sigma2 * ratio**2 - ratio * dgp.mu_az
    tau0 = dgp.mu_0a - ratio * dgp.mu_0z - sigma2 * ratio**2 / 2.0
    return ContinuousBridgeParams(tau0, tau1, tau2, np.array([tau3]))


def bridge_to_json(bridge) -> dict:
    """Serializable form of any bridge representation."""
    if isinstance(bridge, BridgeFit):
        return bridge.to_json_dict()
    if isinstance(bridge, CategoricalBridgeTable):
        return {
            "kind": "categorical-table",
            "levels_z": list(bridge.levels_z),
            "values": bridge.values.tolist(),
        }
    if isinstance(bridge, ContinuousBridgeParams):
        return {
            "kind": "continuous-params",
            "tau0": bridge.tau0,
            "tau1": bridge.tau1,
            "tau2": bridge.tau2,
            "tau3": bridge.tau3.tolist(),
        }
    raise TypeError(f"not a bridge object: {type(bridge).__name__}")


def bridge_from_json(doc: dict):
    """Inverse of bridge_to_json.

    Reloaded fits carry tau and the form only; estimators rebuild moment
    features from their defaults when stacking standard errors.
    """
    kind = doc.get("kind")
    if kind == "categorical-table":
        return CategoricalBridgeTable(tuple(doc["levels_z"]), np.asarray(doc["values"]))
    if kind == "continuous-params":
        return ContinuousBridgeParams(doc["tau0"], doc["tau1"], doc["tau2"],
                                      np.asarray(doc["tau3"]))
    if kind == "fit":
        form = doc["form"]
        if form == "saturated-categorical":
            spec = BridgeSpec.saturated()
        elif form == "logistic-gaussian":
            spec = BridgeSpec.logistic_gaussian(int(doc.get("n_covariates", 0)))
        else:
            raise SchemaError(f"cannot reload bridge form {form!r} from JSON")
        tau = np.asarray(doc["tau"], dtype=float)
        return BridgeFit(spec, tau, None, float(doc.get("residual_norm", float("nan"))),
                         None, 0)
    raise SchemaError(f"unknown bridge document kind {kind!r}")
