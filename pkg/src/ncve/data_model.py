"""Dataset representation for test-negative design samples.

A TndSample is the unit of all estimation: a rectangular, fully selected
(S=1) dataset of binary vaccination and test-result columns plus negative
control exposure (Z), negative control outcome (W), and covariate (X)
columns. Ingestion is strict: missing or non-numeric cells are errors,
never imputed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Literal, Sequence

import numpy as np

from .errors import SchemaError

Severity = Literal["fatal", "warning"]


@dataclass(frozen=True)
class VariableRoles:
    """Maps dataset columns to their design roles.

    treatment and outcome each name exactly one binary column; nce (negative
    control exposures) and nco (negative control outcomes) are non-empty;
    covariates may be empty. Columns named in `categorical` (a subset of
    covariates) are integer-coded levels that estimators expand one-hot with
    the first level as reference.
    """

    treatment: str
    outcome: str
    nce: tuple[str, ...]
    nco: tuple[str, ...]
    covariates: tuple[str, ...] = ()
    categorical: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "nce", tuple(self.nce))
        object.__setattr__(self, "nco", tuple(self.nco))
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "categorical", tuple(self.categorical))
        if not self.treatment or not self.outcome:
            raise SchemaError("treatment and outcome column names are required")
        if not self.nce:
            raise SchemaError("at least one NCE column is required")
        if not self.nco:
            raise SchemaError("at least one NCO column is required")
        cols = self.all_columns
        dupes = {c for c in cols if cols.count(c) > 1}
        if dupes:
            raise SchemaError(f"column(s) assigned to more than one role: {sorted(dupes)}")
        unknown_cat = set(self.categorical) - set(self.covariates)
        if unknown_cat:
            raise SchemaError(
                f"categorical column(s) not declared as covariates: {sorted(unknown_cat)}"
            )

    @property
    def all_columns(self) -> list[str]:
        return [self.treatment, self.outcome, *self.nce, *self.nco, *self.covariates]


@dataclass(frozen=True)
class TndRecord:
    """One selected subject: vaccination a, test result y, and proxy vectors."""

    a: int
    y: int
    z: tuple[float, ...]
    w: tuple[float, ...]
    x: tuple[float, ...] = ()

    def __post_init__(self):
        if self.a not in (0, 1):
            raise ValueError(f"a must be 0 or 1, got {self.a!r}")
        if self.y not in (0, 1):
            raise ValueError(f"y must be 0 or 1, got {self.y!r}")
        for name, vec in (("z", self.z), ("w", self.w), ("x", self.x)):
            if not all(math.isfinite(v) for v in vec):
                raise ValueError(f"non-finite value in {name}")


class TndSample:
    """Immutable test-negative design sample backed by numpy arrays.

    Every stored record is a selected subject (S=1 is implicit). Construction
    checks shapes and finiteness only; substantive health checks (binary
    treatment/outcome, populated arms) are reported by validate() so that
    callers can inspect rather than crash on questionable data.
    """

    def __init__(self, a, y, z, w, x, roles: VariableRoles):
        a = np.asarray(a, dtype=float).reshape(-1)
        y = np.asarray(y, dtype=float).reshape(-1)
        n = a.shape[0]
        try:
            z = np.asarray(z, dtype=float).reshape(n, -1)
            w = np.asarray(w, dtype=float).reshape(n, -1)
            x = np.asarray(x, dtype=float).reshape(n, -1) if np.size(x) else np.empty((n, 0))
        except ValueError as exc:
            raise SchemaError(f"column block does not align with {n} records: {exc}") from exc
        if n < 1:
            raise SchemaError("sample must contain at least one record")
        if y.shape[0] != n:
            raise SchemaError("outcome column length mismatch")
        for name, arr, want in (("nce", z, len(roles.nce)),
                                ("nco", w, len(roles.nco)),
                                ("covariates", x, len(roles.covariates))):
            if arr.shape != (n, want):
                raise SchemaError(
                    f"{name} has shape {arr.shape}, roles declare {(n, want)}"
                )
        for name, arr in (("treatment", a), ("outcome", y), ("nce", z), ("nco", w),
                          ("covariates", x)):
            if not np.all(np.isfinite(arr)):
                raise SchemaError(f"non-finite value in {name} column(s)")
        for arr in (a, y, z, w, x):
            arr.setflags(write=False)
        self.a = a
        self.y = y
        self.z = z
        self.w = w
        self.x = x
        self.roles = roles

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def records(self) -> tuple[TndRecord, ...]:
        """Materialize the sample as typed records (row order preserved)."""
        return tuple(
            TndRecord(int(self.a[i]), int(self.y[i]), tuple(self.z[i]),
                      tuple(self.w[i]), tuple(self.x[i]))
            for i in range(self.n)
        )

    @classmethod
    def from_records(cls, records: Sequence[TndRecord], roles: VariableRoles) -> "TndSample":
        if not records:
            raise SchemaError("sample must contain at least one record")
        return cls(
            [r.a for r in records],
            [r.y for r in records],
            [r.z for r in records],
            [r.w for r in records],
            [r.x for r in records],
            roles,
        )

    def __eq__(self, other):
        if not isinstance(other, TndSample):
            return NotImplemented
        return (self.roles == other.roles
                and np.array_equal(self.a, other.a)
                and np.array_equal(self.y, other.y)
                and np.array_equal(self.z, other.z)
                and np.array_equal(self.w, other.w)
                and np.array_equal(self.x, other.x))

    def __repr__(self):
        return (f"TndSample(n={self.n}, cases={int(self.y.sum())}, "
                f"vaccinated={int(self.a.sum())})")


@dataclass(frozen=True)
class Finding:
    """One validation finding; fatal findings block estimation."""

    severity: Severity
    code: str
    message: str


@dataclass(frozen=True)
class EstimateReport:
    """Result of one estimator run.

    vcov covers the full stacked parameter vector in param_names order
    (beta or alpha entries first, bridge parameters after them for the
    negative control estimators; regression coefficients for the logistic
    baseline). var_beta is the variance of beta_hat extracted from it.
    ve_hat is always exactly 1 - exp(beta_hat) and ci brackets it.
    """

    estimator: str
    scale: str
    beta_hat: float
    ve_hat: float
    var_beta: float
    vcov: np.ndarray
    ci: tuple[float, float]
    alpha_level: float
    param_names: tuple[str, ...]
    diagnostics: dict = field(default_factory=dict)
    alpha_hat: tuple[float, ...] | None = None
    note: str = ""

    def __post_init__(self):
        vcov = np.atleast_2d(np.asarray(self.vcov, dtype=float))
        vcov.setflags(write=False)
        object.__setattr__(self, "vcov", vcov)
        expected = 1.0 - math.exp(self.beta_hat)
        if self.ve_hat != expected:
            raise ValueError("ve_hat must equal 1 - exp(beta_hat) exactly")
        lo, hi = self.ci
        if not (lo <= self.ve_hat <= hi):
            raise ValueError(f"ci {self.ci} does not bracket ve_hat {self.ve_hat}")
        if not np.allclose(vcov, vcov.T, atol=1e-8):
            raise ValueError("vcov must be symmetric")
        if np.any(np.diag(vcov) < -1e-12):
            raise ValueError("vcov must have non-negative diagonal")
        if self.var_beta < 0:
            raise ValueError("var_beta must be non-negative")

    def to_dict(self) -> dict:
        """JSON-ready representation (schema versioning handled by the CLI)."""
        out = {
            "estimator": self.estimator,
            "scale": self.scale,
            "beta_hat": self.beta_hat,
            "ve_hat": self.ve_hat,
            "var_beta": self.var_beta,
            "vcov": self.vcov.tolist(),
            "ci_lower": self.ci[0],
            "ci_upper": self.ci[1],
            "alpha_level": self.alpha_level,
            "param_names": list(self.param_names),
            "diagnostics": self.diagnostics,
            "note": self.note,
        }
        if self.alpha_hat is not None:
            out["alpha_hat"] = list(self.alpha_hat)
        return out


def load_csv(path, roles: VariableRoles) -> TndSample:
    """Read a comma-separated UTF-8 file with a header row into a TndSample.

    Every role column must appear in the header (extra columns are ignored);
    every cell in a role column must parse as a finite number. Errors name
    the offending column or file line; nothing is imputed. Row order is
    preserved.
    """
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise SchemaError(f"cannot read data file {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"empty file: {path}") from None
        header = [h.strip() for h in header]
        missing = [c for c in roles.all_columns if c not in header]
        if missing:
            raise SchemaError(f"column {missing[0]} not found in {path}")
        idx = {c: header.index(c) for c in roles.all_columns}

        columns: dict[str, list[float]] = {c: [] for c in roles.all_columns}
        n_rows = 0
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            for col in roles.all_columns:
                if idx[col] >= len(row):
                    raise SchemaError(f"line {line_no}: missing value in column {col}")
                cell = row[idx[col]].strip()
                if not cell:
                    raise SchemaError(f"line {line_no}: missing value in column {col}")
                try:
                    value = float(cell)
                except ValueError:
                    raise SchemaError(
                        f"line {line_no}: non-numeric value {cell!r} in column {col}"
                    ) from None
                if not math.isfinite(value):
                    raise SchemaError(
                        f"line {line_no}: non-finite value in column {col}"
                    )
                columns[col].append(value)
            n_rows += 1
        if n_rows == 0:
            raise SchemaError(f"no data rows in {path}")

    def mat(names: Iterable[str]) -> np.ndarray:
        names = list(names)
        if not names:
            return np.empty((n_rows, 0))
        return np.column_stack([columns[c] for c in names])

    return TndSample(
        np.asarray(columns[roles.treatment]),
        np.asarray(columns[roles.outcome]),
        mat(roles.nce),
        mat(roles.nco),
        mat(roles.covariates),
        roles,
    )


def _format_cell(v: float) -> str:
    v = float(v)
    if v == int(v) and abs(v) < 2**53:
        return str(int(v))
    return repr(v)


def write_csv(sample: TndSample, path) -> None:
    """Write a sample back to CSV so that load_csv(write_csv(s)) == s.

    Integer-valued cells are written as integers; other reals use Python's
    shortest round-trip representation, so re-reading is bit-exact.
    """
    roles = sample.roles
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(roles.all_columns)
        blocks = [sample.a[:, None], sample.y[:, None], sample.z, sample.w, sample.x]
        data = np.hstack(blocks)
        for i in range(sample.n):
            writer.writerow([_format_cell(v) for v in data[i]])


def validate(sample: TndSample) -> list[Finding]:
    """Health-check a sample; returns findings, never raises.

    Fatal findings: non-binary treatment or outcome, or an arm without any
    test-positive record (the risk-ratio estimand is undefined then).
    Warnings: a constant NCE/NCO column (the bridge system will be singular)
    and a case fraction above 0.2 (the rare-disease approximation that
    motivates control-only bridge fitting is strained).

    The function is pure: identical samples yield identical findings.
    """
    findings: list[Finding] = []
    a, y = sample.a, sample.y
    a_binary = bool(np.all((a == 0) | (a == 1)))
    y_binary = bool(np.all((y == 0) | (y == 1)))
    if not a_binary:
        findings.append(Finding("fatal", "non-binary-treatment",
                                "treatment column contains values other than 0/1"))
    if not y_binary:
        findings.append(Finding("fatal", "non-binary-outcome",
                                "outcome column contains values other than 0/1"))
    if a_binary and y_binary:
        if not np.any(a == 0):
            findings.append(Finding("fatal", "no-unvaccinated-subjects",
                                    "no unvaccinated subjects"))
        elif not np.any((a == 0) & (y == 1)):
            findings.append(Finding("fatal", "no-unvaccinated-cases",
                                    "no test-positive records among the unvaccinated"))
        if not np.any(a == 1):
            findings.append(Finding("fatal", "no-vaccinated-subjects",
                                    "no vaccinated subjects"))
        elif not np.any((a == 1) & (y == 1)):
            findings.append(Finding("fatal", "no-vaccinated-cases",
                                    "no test-positive records among the vaccinated"))
        case_fraction = float(np.mean(y))
        if case_fraction > 0.2:
            findings.append(Finding(
                "warning", "high-case-fraction",
                f"case fraction {case_fraction:.3f} exceeds 0.2; "
                "the rare-infection approximation is strained"))
    for label, cols, block in (("NCE", sample.roles.nce, sample.z),
                               ("NCO", sample.roles.nco, sample.w)):
        for j, name in enumerate(cols):
            col = block[:, j]
            if np.all(col == col[0]):
                findings.append(Finding(
                    "warning", f"constant-{label.lower()}",
                    f"{label} column {name} has no variation; "
                    "bridge fitting will be unidentifiable"))
    return findings
