"""Exponential-growth trends in recording capability.

``log(value) ~ slope * (year - reference_year) + intercept`` is fitted per
modality with a conjugate normal-inverse-gamma prior, so the posterior is
closed-form: Student-t marginals for the coefficients and the predictive.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

LN2 = math.log(2.0)


@dataclass(frozen=True)
class CapabilityRecord:
    year: float
    value: float
    modality: str = ""


@dataclass
class CapabilitySeries:
    records: list

    def __post_init__(self):
        self.records = [r if isinstance(r, CapabilityRecord) else CapabilityRecord(*r) for r in self.records]
        for r in self.records:
            if not r.value > 0:
                raise ValueError(f"values must be strictly positive, got {r.value} in {r.year}")

    def __len__(self):
        return len(self.records)

    def modalities(self):
        return list(dict.fromkeys(r.modality for r in self.records))

    def only(self, modality):
        return CapabilitySeries([r for r in self.records if r.modality == modality])

    @classmethod
    def from_csv(cls, path_or_text):
        text = str(path_or_text)
        if "\n" not in text:
            text = Path(text).read_text()
        rows = csv.DictReader(io.StringIO(text))
        if rows.fieldnames is None or not {"year", "value"} <= set(rows.fieldnames):
            raise ValueError("series CSV needs columns year,value[,modality]")
        return cls([
            CapabilityRecord(float(r["year"]), float(r["value"]), (r.get("modality") or "").strip())
            for r in rows
        ])

    def to_csv(self):
        lines = ["year,value,modality"] + [f"{r.year!r},{r.value!r},{r.modality}" for r in self.records]
        return "\n".join(lines) + "\n"


@dataclass
class TrendPrior:
    """Weakly informative NIG prior on centered-year coordinates."""

    coef_var: float = 1e6
    shape: float = 1e-3
    scale: float = 1e-3


@dataclass
class TrendFit:
    slope_mean: float
    slope_sd: float
    intercept_mean: float
    intercept_sd: float
    doubling_time_mean: float | None
    doubling_time_sd: float | None
    reference_year: float
    n_records: int
    prob_slope_nonpositive: float
    # posterior pieces needed for prediction
    _center: float = field(repr=False, default=0.0)
    _coef: np.ndarray = field(repr=False, default=None)
    _cov_unit: np.ndarray = field(repr=False, default=None)
    _dof: float = field(repr=False, default=1.0)
    _s2: float = field(repr=False, default=1.0)

    @property
    def defined(self):
        return self.doubling_time_mean is not None

    def to_dict(self):
        return {
            "slope_mean": self.slope_mean,
            "slope_sd": self.slope_sd,
            "intercept_mean": self.intercept_mean,
            "intercept_sd": self.intercept_sd,
            "doubling_time_mean": self.doubling_time_mean,
            "doubling_time_sd": self.doubling_time_sd,
            "reference_year": self.reference_year,
            "n_records": self.n_records,
            "prob_slope_nonpositive": self.prob_slope_nonpositive,
        }


def _fit_one(years, values, reference_year, prior, undefined_mass):
    if years.size < 3:
        raise ValueError(f"need at least 3 records, got {years.size}")
    center = float(years.mean())
    X = np.column_stack([np.ones_like(years), years - center])
    y = np.log(values)
    V0_inv = np.eye(2) / prior.coef_var
    Vn_inv = V0_inv + X.T @ X
    Vn = np.linalg.inv(Vn_inv)
    coef = Vn @ (X.T @ y)
    a_n = prior.shape + 0.5 * years.size
    b_n = prior.scale + 0.5 * float(y @ y - coef @ Vn_inv @ coef)
    b_n = max(b_n, prior.scale)
    dof = 2.0 * a_n
    s2 = b_n / a_n
    # Student-t marginal variance is s2 * V * dof / (dof - 2)
    var_factor = s2 * dof / (dof - 2.0) if dof > 2 else math.inf

    slope = float(coef[1])
    slope_sd = math.sqrt(var_factor * Vn[1, 1])
    shift = reference_year - center
    T = np.array([[1.0, shift], [0.0, 1.0]])
    coef_ref = T @ coef
    cov_ref = T @ Vn @ T.T
    intercept = float(coef_ref[0])
    intercept_sd = math.sqrt(var_factor * cov_ref[0, 0])
    scale_t = math.sqrt(s2 * Vn[1, 1])
    p_nonpos = float(stats.t.cdf(-slope / scale_t, dof)) if scale_t > 0 else float(slope <= 0)

    if slope > 0 and p_nonpos <= undefined_mass:
        dt = LN2 / slope
        dt_sd = LN2 * slope_sd / slope**2
    else:
        dt = dt_sd = None
    return TrendFit(
        slope, slope_sd, intercept, intercept_sd, dt, dt_sd, reference_year, int(years.size),
        p_nonpos, center, coef, Vn, dof, s2,
    )


def fit_trend(series, year_min=None, reference_year=2000.0, prior=None, undefined_mass=0.05):
    """Per-modality log-linear trend fits.

    Returns ``{modality: TrendFit}``. The doubling time is left undefined
    (None) when the posterior puts more than ``undefined_mass`` on a
    non-positive slope. Its SD is propagated by the delta method.
    """
    prior = prior or TrendPrior()
    out = {}
    for modality in series.modalities():
        recs = [r for r in series.records if r.modality == modality]
        if year_min is not None:
            recs = [r for r in recs if r.year >= year_min]
        years = np.array([r.year for r in recs], dtype=float)
        values = np.array([r.value for r in recs], dtype=float)
        try:
            out[modality] = _fit_one(years, values, float(reference_year), prior, undefined_mass)
        except ValueError as exc:
            raise ValueError(f"modality {modality!r}: {exc}") from None
    return out


def frontier_filter(series, lookback=10, per_modality=True):
    """Drop records beaten by at least ``lookback`` earlier records.

    Records are visited in chronological order (ties keep input order); a
    record survives when fewer than ``lookback`` earlier records, among all
    records and not only survivors, have a larger value. Output order follows
    the input.
    """
    if lookback < 1:
        raise ValueError("lookback must be >= 1")
    recs = series.records
    keep = [True] * len(recs)
    groups = {}
    for i, r in enumerate(recs):
        groups.setdefault(r.modality if per_modality else "", []).append(i)
    for idx in groups.values():
        order = sorted(idx, key=lambda i: recs[i].year)
        seen = []
        for i in order:
            larger = sum(1 for v in seen if v > recs[i].value)
            keep[i] = larger < lookback
            seen.append(recs[i].value)
    return CapabilitySeries([r for r, k in zip(recs, keep) if k])


def project(fit, year, level=0.90):
    """Back-transformed predictive center and central interval at ``year``.

    The center is ``exp`` of the predictive mean of ``log(value)``; the
    interval comes from the Student-t posterior predictive.
    """
    if not fit.defined:
        raise ValueError("cannot project a trend whose slope is undefined")
    x = np.array([1.0, year - fit._center])
    mean_log = fit.intercept_mean + fit.slope_mean * (year - fit.reference_year)
    scale = math.sqrt(fit._s2 * (1.0 + x @ fit._cov_unit @ x))
    q = stats.t.ppf(0.5 + level / 2.0, fit._dof)
    return math.exp(mean_log), (math.exp(mean_log - q * scale), math.exp(mean_log + q * scale))


def projection_table(fit, years, level=0.90):
    return [(float(y), *_flat(project(fit, y, level))) for y in years]


def _flat(p):
    center, (lo, hi) = p
    return center, lo, hi
