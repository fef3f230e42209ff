"""Synthetic populations, test-negative sampling, and the Monte Carlo engine.

Two generative families are provided: a binary unmeasured confounder with
all-binary proxies, and a continuous confounder with Gaussian proxies and a
uniform covariate. Each draws a full population, applies the care-seeking /
testing selection step, and returns only the selected records as a
TndSample, mirroring how a test-negative platform never observes the
unselected.

All randomness is counter-based and splittable: every variable of every
replication draws from its own Philox stream keyed by (master seed,
scenario, beta0 index, replication, variable), so results are bit-identical
for any worker count and unaffected by adding estimators or reordering
replications.
"""

from __future__ import annotations

import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Union

import numpy as np
from scipy.special import expit

from .bridge import BridgeSpec, fit_bridge_moment, oracle_bridge_binary, oracle_bridge_continuous
from .data_model import TndSample, VariableRoles
from .errors import ConfigError, ConvergenceError, DegenerateDataError, NcveError
from .estimators import estimate_ve_logistic, estimate_ve_nc, estimate_ve_oracle

DEFAULT_POPULATION = 500_000
DEFAULT_REPLICATIONS = 200
PAPER_POPULATION = 7_000_000
PAPER_REPLICATIONS = 1_000
DEFAULT_SEED = 1729

DEFAULT_BETA0_GRID = (math.log(0.2), math.log(0.5), math.log(0.7), 0.0)
DEFAULT_ESTIMATORS = ("nc", "nc-oracle", "logistic")

BINARY_ROLES = VariableRoles("A", "Y", ("Z",), ("W",))
CONTINUOUS_ROLES = VariableRoles("A", "Y", ("Z",), ("W",), ("X",))

_SCENARIO_CODES = {
    "binary": 0,
    "continuous": 1,
    "binary-nonrare": 2,
    "continuous-nonrare": 3,
}


def _scenario_code(name: str) -> int:
    if name in _SCENARIO_CODES:
        return _SCENARIO_CODES[name]
    return zlib.crc32(name.encode("utf-8")) & 0x7FFFFFFF


def _stream(entropy: tuple, stream: int) -> np.random.Generator:
    """Independent Philox stream for one variable of one replication."""
    try:
        seq = np.random.SeedSequence((*entropy, stream))
    except ValueError as exc:
        raise ConfigError(f"seed components must be non-negative integers: {exc}") from exc
    return np.random.Generator(np.random.Philox(seq))


def _as_entropy(seed) -> tuple:
    if isinstance(seed, tuple):
        return seed
    if isinstance(seed, (int, np.integer)):
        return (int(seed),)
    raise ConfigError(f"seed must be an int or tuple of ints, got {type(seed).__name__}")


@dataclass(frozen=True)
class BinaryDgpParams:
    """Generative parameters for the binary-confounder population.

    U ~ Bern(p_u); Z|U ~ Bern(p_0z + p_uz U); A|U ~ Bern(p_0a + p_ua U);
    Y|A,U ~ Bern(exp(eta_0y + beta0 A + eta_uy U)); W|U ~ Bern(p_0w + p_uw U);
    D|U ~ Bern(p_0d + p_ud U); S ~ Bern(max(Y, D, W) (p_ys + p_uys U)).
    D mimics other illnesses that trigger care seeking; it drives selection
    but is never exported as a column.

    Every induced probability is checked over the full (u, a) grid at
    construction.
    """

    p_u: float = 0.5
    p_0z: float = 0.2
    p_uz: float = 0.4
    p_0a: float = 0.2
    p_ua: float = 0.4
    eta_0y: float = math.log(0.01)
    beta0: float = math.log(0.5)
    eta_uy: float = math.log(0.5)
    p_0w: float = 0.02
    p_uw: float = 0.02
    p_0d: float = 0.02
    p_ud: float = -0.015
    p_ys: float = 0.1
    p_uys: float = 0.4

    def __post_init__(self):
        checks = {"p_u": self.p_u}
        for u in (0.0, 1.0):
            checks[f"P(Z=1|U={u:g})"] = self.p_0z + self.p_uz * u
            checks[f"P(A=1|U={u:g})"] = self.p_0a + self.p_ua * u
            checks[f"P(W=1|U={u:g})"] = self.p_0w + self.p_uw * u
            checks[f"P(D=1|U={u:g})"] = self.p_0d + self.p_ud * u
            checks[f"P(S=1|select,U={u:g})"] = self.p_ys + self.p_uys * u
            for a in (0.0, 1.0):
                checks[f"P(Y=1|A={a:g},U={u:g})"] = math.exp(
                    self.eta_0y + self.beta0 * a + self.eta_uy * u)
        for name, p in checks.items():
            if not (0.0 <= p <= 1.0) or not math.isfinite(p):
                raise ConfigError(f"induced probability {name} = {p:.6g} is outside [0, 1]")


@dataclass(frozen=True)
class ContinuousDgpParams:
    """Generative parameters for the continuous-confounder population.

    U, X ~ Uniform(0,1); A|U,X ~ Bern(expit(mu_0a + mu_ua U + mu_xa X));
    Z ~ N(mu_0z + mu_az A + mu_xz X + mu_uz U, sigma_z^2);
    W ~ N(mu_0w + mu_xw X + mu_uw U, sigma_w^2);
    Y|A,U,X ~ Bern(risk) with risk = exp(mu_0y + beta0 A + mu_uy U + mu_xy X
    + mu_uxy U X) under the primary log link (y_link="exp"); the y_link
    "expit" variant replaces exp with expit;
    D ~ Bern(expit(mu_0d + mu_xd X + mu_ud U));
    S ~ Bern(max(Y, D) expit(mu_0s + mu_xs X + mu_us U + mu_uxs U X)).

    Under the log link the risk is checked to stay within [0, 1] at the
    corners of the (a, u, x) cube (the linear predictor is bilinear in
    (u, x), so corner checks are exhaustive).
    """

    mu_0a: float = -1.0
    mu_ua: float = -1.0
    mu_xa: float = 0.25
    mu_0z: float = 0.0
    mu_az: float = 0.25
    mu_xz: float = 0.25
    mu_uz: float = 4.0
    sigma_z: float = 0.25
    mu_0y: float = math.log(0.01)
    beta0: float = math.log(0.5)
    mu_uy: float = -2.0
    mu_xy: float = -0.25
    mu_uxy: float = 0.0
    mu_0w: float = 0.0
    mu_xw: float = 0.25
    mu_uw: float = 2.0
    sigma_w: float = 0.25
    mu_0d: float = math.log(0.01)
    mu_xd: float = 0.25
    mu_ud: float = -0.2
    mu_0s: float = -1.4
    mu_xs: float = 0.5
    mu_us: float = 2.0
    mu_uxs: float = 1.0
    y_link: str = "exp"

    def __post_init__(self):
        if self.sigma_z <= 0.0 or self.sigma_w <= 0.0:
            raise ConfigError("sigma_z and sigma_w must be positive")
        if self.y_link not in ("exp", "expit"):
            raise ConfigError(f"y_link must be 'exp' or 'expit', got {self.y_link!r}")
        if self.y_link == "exp":
            for a in (0.0, 1.0):
                for u in (0.0, 1.0):
                    for x in (0.0, 1.0):
                        risk = math.exp(self._linear_y(a, u, x))
                        if risk > 1.0:
                            raise ConfigError(
                                f"infection risk {risk:.6g} exceeds 1 at "
                                f"(a={a:g}, u={u:g}, x={x:g})")

    def _linear_y(self, a, u, x):
        return (self.mu_0y + self.beta0 * a + self.mu_uy * u + self.mu_xy * x
                + self.mu_uxy * u * x)

    def infection_risk(self, a, u, x):
        lin = self._linear_y(np.asarray(a, dtype=float), np.asarray(u, dtype=float),
                             np.asarray(x, dtype=float))
        return np.exp(lin) if self.y_link == "exp" else expit(lin)

    def propensity(self, u, x):
        u = np.asarray(u, dtype=float)
        x = np.asarray(x, dtype=float)
        return expit(self.mu_0a + self.mu_ua * u + self.mu_xa * x)


DgpParams = Union[BinaryDgpParams, ContinuousDgpParams]


def default_params(setting: str) -> DgpParams:
    """Parameter tables for the four study settings.

    'binary' and 'continuous' are the rare-infection tables; the '-nonrare'
    variants raise the baseline infection rate to 0.20 and leave everything
    else unchanged.
    """
    if setting == "binary":
        return BinaryDgpParams()
    if setting == "binary-nonrare":
        return BinaryDgpParams(eta_0y=math.log(0.20))
    if setting == "continuous":
        return ContinuousDgpParams()
    if setting == "continuous-nonrare":
        return ContinuousDgpParams(mu_0y=math.log(0.20))
    raise ConfigError(f"unknown setting {setting!r}; expected binary, continuous, "
                      "binary-nonrare, or continuous-nonrare")


def generate_binary_sample(params: BinaryDgpParams, n_population: int, seed) -> TndSample:
    """Draw a population and return the selected (tested) records.

    Columns: A, Y, Z, W. D is generated as selection machinery but never
    exported. Deterministic given (params, n_population, seed); the seed may
    be an int or a tuple of non-negative ints (the Monte Carlo engine passes
    (master seed, scenario, beta0 index, replication)).
    """
    if n_population < 1:
        raise ConfigError("n_population must be at least 1")
    e = _as_entropy(seed)
    n = int(n_population)
    u = (_stream(e, 0).random(n) < params.p_u).astype(float)
    z = (_stream(e, 1).random(n) < params.p_0z + params.p_uz * u).astype(float)
    a = (_stream(e, 2).random(n) < params.p_0a + params.p_ua * u).astype(float)
    risk = np.exp(params.eta_0y + params.beta0 * a + params.eta_uy * u)
    y = (_stream(e, 3).random(n) < risk).astype(float)
    w = (_stream(e, 4).random(n) < params.p_0w + params.p_uw * u).astype(float)
    d = (_stream(e, 5).random(n) < params.p_0d + params.p_ud * u).astype(float)
    any_event = np.maximum(np.maximum(y, d), w)
    s = (_stream(e, 6).random(n) < params.p_ys + params.p_uys * u) & (any_event > 0)
    if not np.any(s):
        raise DegenerateDataError("selection produced an empty sample (nobody tested)")
    return TndSample(a[s], y[s], z[s, None], w[s, None], np.empty((int(s.sum()), 0)),
                     BINARY_ROLES)


def generate_continuous_sample(params: ContinuousDgpParams, n_population: int,
                               seed) -> TndSample:
    """Continuous-confounder analog of generate_binary_sample.

    Columns: A, Y, Z, W, X. D again stays internal.
    """
    if n_population < 1:
        raise ConfigError("n_population must be at least 1")
    e = _as_entropy(seed)
    n = int(n_population)
    u = _stream(e, 0).random(n)
    x = _stream(e, 1).random(n)
    a = (_stream(e, 2).random(n) < params.propensity(u, x)).astype(float)
    z_mean = params.mu_0z + params.mu_az * a + params.mu_xz * x + params.mu_uz * u
    z = z_mean + params.sigma_z * _stream(e, 3).standard_normal(n)
    w_mean = params.mu_0w + params.mu_xw * x + params.mu_uw * u
    w = w_mean + params.sigma_w * _stream(e, 4).standard_normal(n)
    y = (_stream(e, 5).random(n) < params.infection_risk(a, u, x)).astype(float)
    pd_ = expit(params.mu_0d + params.mu_xd * x + params.mu_ud * u)
    d = (_stream(e, 6).random(n) < pd_).astype(float)
    sel_p = expit(params.mu_0s + params.mu_xs * x + params.mu_us * u
                  + params.mu_uxs * u * x)
    s = (_stream(e, 7).random(n) < sel_p) & (np.maximum(y, d) > 0)
    if not np.any(s):
        raise DegenerateDataError("selection produced an empty sample (nobody tested)")
    return TndSample(a[s], y[s], z[s, None], w[s, None], x[s, None], CONTINUOUS_ROLES)


# ---------------------------------------------------------------------------
# Analytic population quantities (no simulation noise).

def binary_selection_rate(params: BinaryDgpParams) -> float:
    """P(S=1): expected fraction of the population entering the sample."""
    total = 0.0
    for u, pu in ((0.0, 1.0 - params.p_u), (1.0, params.p_u)):
        pa1 = params.p_0a + params.p_ua * u
        py = ((1.0 - pa1) * math.exp(params.eta_0y + params.eta_uy * u)
              + pa1 * math.exp(params.eta_0y + params.beta0 + params.eta_uy * u))
        pw = params.p_0w + params.p_uw * u
        pd_ = params.p_0d + params.p_ud * u
        p_any = 1.0 - (1.0 - py) * (1.0 - pw) * (1.0 - pd_)
        total += pu * (params.p_ys + params.p_uys * u) * p_any
    return total


def binary_counterfactual_prevalence(params: BinaryDgpParams, arm: int) -> float:
    """E[Y(arm)]: population infection risk had everyone been assigned arm."""
    total = 0.0
    for u, pu in ((0.0, 1.0 - params.p_u), (1.0, params.p_u)):
        total += pu * math.exp(params.eta_0y + params.beta0 * arm + params.eta_uy * u)
    return total


def binary_infection_prevalence(params: BinaryDgpParams, arm: int | None = None) -> float:
    """P(Y=1) in the population, or P(Y=1 | A=arm) when arm is given."""
    num = 0.0
    den = 0.0
    for u, pu in ((0.0, 1.0 - params.p_u), (1.0, params.p_u)):
        pa1 = params.p_0a + params.p_ua * u
        for a, pa in ((0.0, 1.0 - pa1), (1.0, pa1)):
            if arm is not None and a != arm:
                continue
            risk = math.exp(params.eta_0y + params.beta0 * a + params.eta_uy * u)
            num += pu * pa * risk
            den += pu * pa
    return num / den


def _unit_square_grid(order: int = 64):
    nodes, weights = np.polynomial.legendre.leggauss(order)
    t = (nodes + 1.0) / 2.0
    w = weights / 2.0
    uu, xx = np.meshgrid(t, t, indexing="ij")
    ww = np.outer(w, w)
    return uu.ravel(), xx.ravel(), ww.ravel()


def continuous_selection_rate(params: ContinuousDgpParams) -> float:
    """P(S=1) under the continuous model, by Gauss-Legendre quadrature."""
    u, x, w = _unit_square_grid()
    pa1 = params.propensity(u, x)
    py = (1.0 - pa1) * params.infection_risk(0.0, u, x) + pa1 * params.infection_risk(1.0, u, x)
    pd_ = expit(params.mu_0d + params.mu_xd * x + params.mu_ud * u)
    p_any = 1.0 - (1.0 - py) * (1.0 - pd_)
    sel = expit(params.mu_0s + params.mu_xs * x + params.mu_us * u + params.mu_uxs * u * x)
    return float(np.sum(w * sel * p_any))


def continuous_counterfactual_prevalence(params: ContinuousDgpParams, arm: int) -> float:
    u, x, w = _unit_square_grid()
    return float(np.sum(w * params.infection_risk(float(arm), u, x)))


def continuous_infection_prevalence(params: ContinuousDgpParams,
                                    arm: int | None = None) -> float:
    u, x, w = _unit_square_grid()
    pa1 = params.propensity(u, x)
    num = 0.0
    den = 0.0
    for a, pa in ((0.0, 1.0 - pa1), (1.0, pa1)):
        if arm is not None and a != arm:
            continue
        num += float(np.sum(w * pa * params.infection_risk(a, u, x)))
        den += float(np.sum(w * pa))
    return num / den


# ---------------------------------------------------------------------------
# Monte Carlo engine.

@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation scenario: generative parameters plus replication plan."""

    name: str
    dgp: DgpParams
    n_population: int = DEFAULT_POPULATION
    replications: int = DEFAULT_REPLICATIONS
    seed: int = DEFAULT_SEED
    beta0_grid: tuple[float, ...] = DEFAULT_BETA0_GRID
    estimators: tuple[str, ...] = DEFAULT_ESTIMATORS
    threads: int = 1
    alpha_level: float = 0.05
    keep_replications: bool = False

    def __post_init__(self):
        object.__setattr__(self, "beta0_grid", tuple(float(b) for b in self.beta0_grid))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        if self.n_population < 1:
            raise ConfigError("n_population must be at least 1")
        if self.replications < 1:
            raise ConfigError("replications must be at least 1")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        if not self.beta0_grid:
            raise ConfigError("beta0_grid must not be empty")
        unknown = set(self.estimators) - {"nc", "nc-oracle", "logistic"}
        if unknown:
            raise ConfigError(f"unknown estimator(s): {sorted(unknown)}")
        if not isinstance(self.seed, (int, np.integer)) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")


@dataclass(frozen=True)
class McRow:
    """Aggregate for one estimator at one true beta0."""

    estimator: str
    beta0_true: float
    mean_bias: float
    sd: float
    mean_se: float
    coverage: float
    n_mean: float
    failures: int


@dataclass(frozen=True)
class McSummary:
    """Aggregated Monte Carlo results, one row per estimator x beta0."""

    rows: tuple[McRow, ...]
    name: str
    n_population: int
    replications: int
    seed: int
    estimators: tuple[str, ...]
    beta0_grid: tuple[float, ...]
    alpha_level: float
    detail: dict = field(default_factory=dict)

    CSV_COLUMNS = ("estimator", "beta0_true", "mean_bias", "sd", "mean_se",
                   "coverage", "n_mean", "failures")

    def row(self, estimator: str, beta0: float) -> McRow:
        for r in self.rows:
            if r.estimator == estimator and r.beta0_true == beta0:
                return r
        raise KeyError(f"no row for ({estimator}, {beta0})")

    def to_csv_text(self) -> str:
        lines = [",".join(self.CSV_COLUMNS)]
        for r in self.rows:
            lines.append(",".join([
                r.estimator,
                repr(r.beta0_true),
                repr(r.mean_bias),
                repr(r.sd),
                repr(r.mean_se),
                repr(r.coverage),
                repr(r.n_mean),
                str(r.failures),
            ]))
        return "\n".join(lines) + "\n"

    def to_json_dict(self) -> dict:
        return {
            "scenario": self.name,
            "n_population": self.n_population,
            "replications": self.replications,
            "seed": self.seed,
            "estimators": list(self.estimators),
            "beta0_grid": list(self.beta0_grid),
            "alpha_level": self.alpha_level,
            "rows": [vars(r) for r in self.rows],
        }


def _fit_nc(sample: TndSample, params: DgpParams, alpha_level: float):
    if isinstance(params, BinaryDgpParams):
        spec = BridgeSpec.saturated()
    else:
        spec = BridgeSpec.logistic_gaussian(sample.x.shape[1])
    fit = fit_bridge_moment(sample, spec)
    return estimate_ve_nc(sample, fit, alpha_level=alpha_level)


def _fit_oracle(sample: TndSample, params: DgpParams, alpha_level: float):
    if isinstance(params, BinaryDgpParams):
        bridge = oracle_bridge_binary(params)
    else:
        bridge = oracle_bridge_continuous(params)
    return estimate_ve_oracle(sample, bridge, alpha_level=alpha_level)


def _fit_logistic(sample: TndSample, params: DgpParams, alpha_level: float):
    return estimate_ve_logistic(sample, alpha_level=alpha_level)


_RUNNERS = {"nc": _fit_nc, "nc-oracle": _fit_oracle, "logistic": _fit_logistic}


def _run_replication(config: ScenarioConfig, task: tuple[int, int]) -> dict:
    beta_idx, rep = task
    beta0 = config.beta0_grid[beta_idx]
    params = replace(config.dgp, beta0=beta0)
    entropy = (config.seed, _scenario_code(config.name), beta_idx, rep)
    if isinstance(params, BinaryDgpParams):
        sample = generate_binary_sample(params, config.n_population, entropy)
    else:
        sample = generate_continuous_sample(params, config.n_population, entropy)
    true_ve = 1.0 - math.exp(beta0)
    out = {"beta_idx": beta_idx, "rep": rep, "n_selected": sample.n, "estimates": {}}
    for est in config.estimators:
        try:
            report = _RUNNERS[est](sample, params, config.alpha_level)
            covered = report.ci[0] <= true_ve <= report.ci[1]
            out["estimates"][est] = {
                "beta_hat": report.beta_hat,
                "se": math.sqrt(report.var_beta),
                "covered": bool(covered),
                "failed": False,
                "error": "",
            }
        except NcveError as exc:
            out["estimates"][est] = {
                "beta_hat": math.nan,
                "se": math.nan,
                "covered": False,
                "failed": True,
                "error": str(exc),
            }
    return out


def run_monte_carlo(config: ScenarioConfig) -> McSummary:
    """Run the full replication plan and aggregate bias/SE/coverage.

    Replications are independent; with threads > 1 they run on a process
    pool. Aggregation walks results in (beta0, replication) index order, so
    the summary is bit-identical for any worker count. A single failed
    estimator run is recorded, not fatal; more than 20% failures for one
    (estimator, beta0) cell aborts with a convergence error.
    """
    tasks = [(bi, r) for bi in range(len(config.beta0_grid))
             for r in range(config.replications)]
    runner = partial(_run_replication, config)
    if config.threads == 1:
        results = [runner(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=config.threads) as pool:
            chunk = max(1, len(tasks) // (config.threads * 4))
            results = list(pool.map(runner, tasks, chunksize=chunk))
    by_key = {(r["beta_idx"], r["rep"]): r for r in results}

    n_beta = len(config.beta0_grid)
    reps = config.replications
    rows = []
    detail: dict = {"n_selected": {}, "estimates": {}}
    for bi in range(n_beta):
        detail["n_selected"][repr(config.beta0_grid[bi])] = [
            by_key[(bi, r)]["n_selected"] for r in range(reps)]
    for est in config.estimators:
        for bi, beta0 in enumerate(config.beta0_grid):
            cell = [by_key[(bi, r)]["estimates"][est] for r in range(reps)]
            beta_hats = np.array([c["beta_hat"] for c in cell])
            ses = np.array([c["se"] for c in cell])
            covered = np.array([c["covered"] for c in cell])
            failed = np.array([c["failed"] for c in cell])
            n_sel = np.array([by_key[(bi, r)]["n_selected"] for r in range(reps)],
                             dtype=float)
            n_fail = int(failed.sum())
            if n_fail > 0.2 * reps:
                msgs = {c["error"] for c in cell if c["failed"]}
                raise ConvergenceError(
                    f"estimator {est} failed in {n_fail}/{reps} replications at "
                    f"beta0={beta0:.4f}: {sorted(msgs)[0]}")
            ok = ~failed
            mean_beta = float(np.mean(beta_hats[ok]))
            sd = float(np.std(beta_hats[ok], ddof=1)) if ok.sum() > 1 else math.nan
            rows.append(McRow(
                estimator=est,
                beta0_true=beta0,
                mean_bias=mean_beta - beta0,
                sd=sd,
                mean_se=float(np.mean(ses[ok])),
                coverage=float(np.mean(covered[ok])),
                n_mean=float(np.mean(n_sel)),
                failures=n_fail,
            ))
            if config.keep_replications:
                detail["estimates"].setdefault(est, {})[repr(beta0)] = {
                    "beta_hat": beta_hats.tolist(),
                    "se": ses.tolist(),
                    "covered": covered.tolist(),
                    "failed": failed.tolist(),
                }
    return McSummary(
        rows=tuple(rows),
        name=config.name,
        n_population=config.n_population,
        replications=config.replications,
        seed=config.seed,
        estimators=config.estimators,
        beta0_grid=config.beta0_grid,
        alpha_level=config.alpha_level,
        detail=detail if config.keep_replications else {},
    )
