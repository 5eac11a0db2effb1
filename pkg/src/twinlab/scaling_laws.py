"""Sigmoid-in-log-amount scaling laws: evaluation, fitting and inversion.

Forms (``t`` is the data amount, ``s`` the logistic function):

    BASIC         s(a log t + c)
    READOUT       s(a log t + b log P + c)          P = readout parameter count
    WRONG_CORE    R s(a log t + b log R + c)        R = core ceiling (R^2 of the core)
    LEARNED_CORE  WRONG_CORE with R = s(a_core log(t n) + c_core), n = neuron count
    ANALYTIC      t / (t + M s2)                    ridge-regression closed form
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

from ._rng import rng_for
from .curves import ScalingCurve
from .lnp_sim import fit_map_gaussian


class LawForm(str, enum.Enum):
    BASIC = "basic"
    READOUT = "readout"
    WRONG_CORE = "wrong_core"
    LEARNED_CORE = "learned_core"
    ANALYTIC = "analytic"


PARAM_NAMES = {
    LawForm.BASIC: ("a", "c"),
    LawForm.READOUT: ("a", "b", "c"),
    LawForm.WRONG_CORE: ("a", "b", "c"),
    LawForm.LEARNED_CORE: ("a", "b", "c", "a_core", "c_core"),
    LawForm.ANALYTIC: ("noise_variance",),
}

COVARIATES = {
    LawForm.BASIC: (),
    LawForm.READOUT: ("readout_params",),
    LawForm.WRONG_CORE: ("r2_core",),
    LawForm.LEARNED_CORE: ("neurons",),
    LawForm.ANALYTIC: ("readout_dim",),
}

DEGENERATE_SLOPE = 1e-3


class UnreachableTarget(ValueError):
    pass


@dataclass
class SigmoidLawFit:
    form: LawForm
    params: dict
    goodness_r2: float = math.nan
    converged: bool = True
    degenerate: bool = False
    ceilings: dict = field(default_factory=dict)
    message: str = ""

    def to_dict(self):
        return {
            "form": self.form.value,
            "params": {k: float(v) for k, v in self.params.items()},
            "ceilings": {k: float(v) for k, v in self.ceilings.items()},
            "goodness_r2": float(self.goodness_r2),
            "converged": bool(self.converged),
            "degenerate": bool(self.degenerate),
            "message": self.message,
        }


def sigmoid(x):
    """Logistic function, stable for large ``|x|``."""
    return special.expit(x)


def logit(p):
    return special.logit(p)


def _law(form, p, log_t, cov):
    if form is LawForm.BASIC:
        return sigmoid(p["a"] * log_t + p["c"])
    if form is LawForm.READOUT:
        return sigmoid(p["a"] * log_t + p["b"] * np.log(cov["readout_params"]) + p["c"])
    if form is LawForm.WRONG_CORE:
        r = cov["r2_core"]
        return r * sigmoid(p["a"] * log_t + p["b"] * np.log(r) + p["c"])
    if form is LawForm.LEARNED_CORE:
        x_core = p["a_core"] * (log_t + np.log(cov["neurons"])) + p["c_core"]
        # log s(x) = -log(1 + exp(-x)) stays finite where s(x) underflows
        log_r = -np.logaddexp(0.0, -x_core)
        return sigmoid(x_core) * sigmoid(p["a"] * log_t + p["b"] * log_r + p["c"])
    if form is LawForm.ANALYTIC:
        k = cov["readout_dim"] * p["noise_variance"]
        return sigmoid(log_t - np.log(k))
    raise ValueError(f"unknown form {form}")


def _need(form, covariates):
    cov = dict(covariates or {})
    for name in COVARIATES[form]:
        if name not in cov or cov[name] is None:
            raise KeyError(f"form {form.value} needs covariate '{name}'")
        v = np.asarray(cov[name], dtype=float)
        if np.any(v <= 0):
            raise ValueError(f"covariate '{name}' must be positive")
        cov[name] = v
    return cov


def predict_law(fit, amount, covariates=None):
    """Evaluate a fitted law at ``amount`` (scalar or array)."""
    form = LawForm(fit.form)
    cov = _need(form, covariates)
    t = np.asarray(amount, dtype=float)
    if np.any(t <= 0):
        raise ValueError("amount must be positive")
    out = _law(form, fit.params, np.log(t), cov)
    return float(out) if np.ndim(out) == 0 else out


def asymptote(fit, covariates=None):
    """Supremum of the law over ``t`` for increasing laws."""
    form = LawForm(fit.form)
    if form is LawForm.WRONG_CORE:
        return float(_need(form, covariates)["r2_core"])
    if form is LawForm.LEARNED_CORE:
        return 1.0 if fit.params["a_core"] > 0 else 0.0
    return 1.0


def time_to_target(fit, target_feve, covariates=None):
    """Amount at which the law reaches ``target_feve``.

    Closed-form for the single-sigmoid forms; bracketed root finding on
    ``log t`` for LEARNED_CORE.
    """
    form = LawForm(fit.form)
    if not 0 < target_feve < 1:
        raise ValueError("target must lie in (0, 1)")
    if not fit.converged:
        raise ValueError("cannot invert a non-converged fit")
    p = fit.params
    if form is not LawForm.ANALYTIC and p["a"] <= 0:
        raise UnreachableTarget("unreachable target: law is not increasing (a <= 0)")
    cov = _need(form, covariates)
    ceiling = asymptote(fit, cov)
    if target_feve >= ceiling:
        raise UnreachableTarget(
            f"unreachable target: {target_feve} is at or above the asymptote {ceiling:.6g}"
        )
    if form is LawForm.BASIC:
        return math.exp((logit(target_feve) - p["c"]) / p["a"])
    if form is LawForm.READOUT:
        shift = p["b"] * math.log(float(cov["readout_params"]))
        return math.exp((logit(target_feve) - shift - p["c"]) / p["a"])
    if form is LawForm.WRONG_CORE:
        r = float(cov["r2_core"])
        return math.exp((logit(target_feve / r) - p["b"] * math.log(r) - p["c"]) / p["a"])
    if form is LawForm.ANALYTIC:
        k = float(cov["readout_dim"]) * p["noise_variance"]
        return target_feve * k / (1 - target_feve)

    def gap(log_t):
        return _law(form, p, log_t, cov) - target_feve

    lo, hi = -1.0, 1.0
    while gap(lo) > 0:
        lo *= 2
        if lo < -700:
            raise UnreachableTarget("unreachable target: no bracket below")
    while gap(hi) < 0:
        hi *= 2
        if hi > 700:
            raise UnreachableTarget("unreachable target: no bracket above")
    return math.exp(optimize.brentq(gap, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps))


# ---------------------------------------------------------------- fitting


def _pool(curves, covariates, form):
    """Concatenate curves into flat arrays with per-point covariates.

    Returns t, y, se, cov arrays and, for WRONG_CORE, the index of each
    point's free ceiling (-1 where the ceiling is given).
    """
    if isinstance(curves, ScalingCurve):
        curves = [curves]
        covariates = [covariates or {}]
    else:
        curves = list(curves)
        if covariates is None:
            covariates = [{} for _ in curves]
        elif isinstance(covariates, dict):
            covariates = [covariates] * len(curves)
        if len(covariates) != len(curves):
            raise ValueError("one covariate mapping per curve is required")
    ts, ys, ses, free_idx, labels = [], [], [], [], []
    cov = {name: [] for name in COVARIATES[form]}
    n_free = 0
    for ci, (curve, cv) in enumerate(zip(curves, covariates)):
        curve = curve.valid()
        n = len(curve)
        ts.append(curve.t)
        ys.append(curve.feve_mean)
        ses.append(curve.feve_se if curve.feve_se is not None else np.full(n, np.nan))
        for name in COVARIATES[form]:
            v = cv.get(name)
            if v is None and form is LawForm.WRONG_CORE:
                cov[name].append(np.full(n, np.nan))
                continue
            if v is None:
                raise KeyError(f"form {form.value} needs covariate '{name}'")
            cov[name].append(np.broadcast_to(np.asarray(v, dtype=float), (n,)).copy())
        if form is LawForm.WRONG_CORE and cv.get("r2_core") is None:
            free_idx.append(np.full(n, n_free))
            labels.append(curve.group_label or f"curve{ci}")
            n_free += 1
        else:
            free_idx.append(np.full(n, -1))
    t = np.concatenate(ts)
    y = np.concatenate(ys)
    se = np.concatenate(ses)
    cov = {k: np.concatenate(v) for k, v in cov.items()}
    return t, y, se, cov, np.concatenate(free_idx), labels


def _logit_init(log_t, y):
    """(a, c) from a straight-line fit in logit space over interior points."""
    inside = (y > 0.02) & (y < 0.98)
    if np.count_nonzero(inside) >= 2 and np.ptp(log_t[inside]) > 0:
        a, c = np.polyfit(log_t[inside], logit(np.clip(y[inside], 0.02, 0.98)), 1)
        return float(a), float(c)
    return None


def fit_law(curve, form, covariates=None, init=None, weighting="none", n_starts=8):
    """Least-squares fit of a scaling-law form in (t, FEVE) space.

    ``curve`` is a ScalingCurve or a list of curves fitted jointly with
    shared parameters; ``covariates`` gives one mapping of named scalars (or
    per-point arrays) per curve. For WRONG_CORE a curve whose ``r2_core`` is
    None gets its own fitted ceiling, reported in ``fit.ceilings``.

    A damped Gauss-Newton (Levenberg-Marquardt) solve is run from a
    logit-space regression start plus ``n_starts`` grid starts; the lowest
    cost wins. The loss is the plain squared error by default;
    ``weighting="se"`` weights residuals by ``1/se`` when every point
    carries a positive standard error.
    """
    form = LawForm(form)
    t, y, se, cov, free_idx, free_labels = _pool(curve, covariates, form)
    names = PARAM_NAMES[form]
    n_free = len(free_labels)
    n_par = len(names) + n_free
    if t.size < n_par + 1 or t.size < 3:
        raise ValueError(f"need at least {max(n_par + 1, 3)} points, got {t.size}")
    log_t = np.log(t)

    b_fixed = False
    if form is LawForm.WRONG_CORE:
        # b multiplies log R: identifiable only if R takes two or more values,
        # each free ceiling counting as its own value
        known = np.unique(cov["r2_core"][free_idx < 0])
        b_fixed = known.size + n_free < 2
    if form is LawForm.READOUT and np.ptp(np.log(cov["readout_params"])) == 0:
        b_fixed = True
    active = [n for n in names if not (b_fixed and n == "b")]

    if weighting == "se" and np.all(np.isfinite(se)) and np.all(se > 0):
        wts = 1.0 / se
    elif weighting not in ("se", "none"):
        raise ValueError(f"unknown weighting {weighting!r}")
    else:
        wts = np.ones_like(y)

    def unpack(theta):
        p = dict(zip(active, theta[: len(active)]))
        if b_fixed:
            p["b"] = 0.0
        c = dict(cov)
        ceil = sigmoid(theta[len(active):]) if n_free else np.empty(0)
        if n_free:
            r = c["r2_core"].copy()
            r[free_idx >= 0] = ceil[free_idx[free_idx >= 0]]
            c["r2_core"] = r
        if form is LawForm.ANALYTIC:
            p["noise_variance"] = math.exp(p["noise_variance"])
        return p, c, ceil

    def resid(theta):
        p, c, _ = unpack(theta)
        return wts * (_law(form, p, log_t, c) - y)

    starts = _starts(form, active, log_t, y, cov, free_idx, n_free, n_starts, init)
    best = None
    for x0 in starts:
        try:
            sol = optimize.least_squares(
                resid, x0, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15,
                max_nfev=4000 * (len(x0) + 1),
            )
        except (ValueError, FloatingPointError):
            continue
        if not np.all(np.isfinite(sol.x)) or not math.isfinite(sol.cost):
            continue
        if best is None or sol.cost < best.cost:
            best = sol

    if best is None:
        theta0 = np.asarray(starts[0])
        p, _, ceil = unpack(theta0)
        return SigmoidLawFit(form, p, math.nan, False, True, message="all starts failed")

    p, c, ceil = unpack(best.x)
    pred = _law(form, p, log_t, c)
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else -math.inf)

    notes = []
    degenerate = False
    if "a" in p and abs(p["a"]) < DEGENERATE_SLOPE:
        degenerate = True
        notes.append("|a| below 1e-3: no dependence on amount")
    if n_free and np.any((ceil > 1 - 1e-6) | (ceil < 1e-6)):
        degenerate = True
        notes.append("a fitted ceiling is pinned at a bound")
    if best.jac is not None:
        sv = np.linalg.svd(best.jac, compute_uv=False)
        if sv.size and (sv[-1] <= 1e-10 * sv[0]):
            degenerate = True
            notes.append("Jacobian rank-deficient: parameters not identifiable")
    if b_fixed:
        notes.append("b fixed at 0: log covariate constant across points")
    converged = bool(best.success) and not degenerate
    ceilings = dict(zip(free_labels, (float(v) for v in ceil)))
    return SigmoidLawFit(form, p, r2, converged, degenerate, ceilings, "; ".join(notes))


def _starts(form, active, log_t, y, cov, free_idx, n_free, n_starts, init):
    lo, hi = float(log_t.min()), float(log_t.max())
    # each free ceiling starts just above the largest value of its own curve
    ceil0 = [
        float(logit(np.clip(1.05 * np.max(y[free_idx == k]), 0.02, 0.98))) for k in range(n_free)
    ]
    slopes = np.geomspace(0.25, 4.0, 4)
    mids = np.linspace(lo, hi, 4)[1:3] if hi > lo else np.array([lo])
    seeds = []
    fixed = y[free_idx < 0] if n_free else y
    ac = _logit_init(log_t[free_idx < 0] if n_free else log_t, fixed)
    if ac is not None:
        seeds.append(ac)
    seeds.extend([(a, -a * m) for a in slopes for m in mids][:n_starts])
    b_values = (0.0, 1.0) if "b" in active and form is not LawForm.LEARNED_CORE else (0.0,)

    out = []
    if init is not None:
        if form is LawForm.ANALYTIC:
            out.append(np.array([math.log(float(init.get("noise_variance", 1.0)))]))
        else:
            out.append(np.array([float(init.get(n, 0.0)) for n in active] + ceil0))
    if form is LawForm.ANALYTIC:
        out.extend(np.array([math.log(v)]) for v in (0.1, 1.0, 10.0))
        return out
    for a, c in seeds:
        for b in b_values:
            base = {"a": a, "b": b, "c": c}
            if form is LawForm.LEARNED_CORE:
                for a_core in (0.1, 0.5):
                    c_core = -a_core * (np.mean(log_t) + float(np.log(np.mean(cov["neurons"]))))
                    p = dict(base, a_core=a_core, c_core=c_core)
                    out.append(np.array([p[n] for n in active]))
            else:
                out.append(np.array([base[n] for n in active] + ceil0))
    return out


# -------------------------------------------------------- closed form


def analytic_feve(n_obs, readout_dim, noise_variance):
    """``N / (N + M s2)``, checked against its log-sigmoid form."""
    if not (n_obs > 0 and readout_dim > 0 and noise_variance > 0):
        raise ValueError("all arguments must be positive")
    direct = n_obs / (n_obs + readout_dim * noise_variance)
    via_sigmoid = analytic_feve_sigmoid(n_obs, readout_dim, noise_variance)
    assert abs(direct - via_sigmoid) <= 1e-12, (direct, via_sigmoid)
    return direct


def analytic_feve_sigmoid(n_obs, readout_dim, noise_variance):
    return float(sigmoid(math.log(n_obs) - math.log(readout_dim) - math.log(noise_variance)))


DEFAULT_GRID = [
    (n, m, s2)
    for n in (10, 30, 100, 300, 1000)
    for m in (3, 10, 30)
    for s2 in (0.3, 1.0, 3.0)
]


@dataclass
class TheoryRow:
    n_obs: int
    readout_dim: int
    noise_variance: float
    analytic: float
    simulated: float
    mc_se: float
    gap: float
    classic_regime: bool
    breach: bool
    note: str = ""


@dataclass
class TheoryReport:
    rows: list
    tolerance: float
    replicates: int
    n_val: int
    rng_seed: int

    @property
    def ok(self):
        return not any(r.breach for r in self.rows)

    @property
    def max_gap(self):
        return max(abs(r.gap) for r in self.rows)

    def to_csv(self):
        head = "n_obs,readout_dim,noise_variance,analytic,simulated,mc_se,gap,classic_regime,breach,note\n"
        lines = [
            f"{r.n_obs},{r.readout_dim},{r.noise_variance!r},{r.analytic!r},{r.simulated!r},"
            f"{r.mc_se!r},{r.gap!r},{int(r.classic_regime)},{int(r.breach)},{r.note}"
            for r in self.rows
        ]
        return head + "\n".join(lines) + "\n"


def simulate_gaussian_feve(n_obs, readout_dim, noise_variance, replicates, rng, n_val=5000):
    """Monte-Carlo FEVE of the closed-form MAP fit on linear-Gaussian data.

    Uses the noise-subtraction estimator with expectations pooled over
    replicates. Returns (feve, standard error from per-replicate values).
    """
    M, s = readout_dim, math.sqrt(noise_variance)
    num = np.empty(replicates)
    den = np.empty(replicates)
    for r in range(replicates):
        X = rng.standard_normal((n_obs, M))
        w = rng.standard_normal(M) / math.sqrt(M)
        y = X @ w + s * rng.standard_normal(n_obs)
        w_map = fit_map_gaussian(X, y, noise_variance).weights_hat
        Xv = rng.standard_normal((n_val, M))
        yv = Xv @ w + s * rng.standard_normal(n_val)
        num[r] = np.mean((yv - Xv @ w_map) ** 2) - noise_variance
        den[r] = np.mean(yv**2) - noise_variance
    feve = 1.0 - num.mean() / den.mean()
    # delta-method SE of the ratio estimator
    ratio = num.mean() / den.mean()
    infl = (num - ratio * den) / den.mean()
    se = float(infl.std(ddof=1) / math.sqrt(replicates)) if replicates > 1 else math.nan
    return float(feve), se


def compare_theory_simulation(grid=None, replicates=200, rng_seed=0, tolerance=0.02, n_val=5000):
    """Closed form versus Monte-Carlo FEVE for every (N, M, s2) cell."""
    grid = DEFAULT_GRID if grid is None else list(grid)
    if not grid:
        raise ValueError("grid must be non-empty")
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    rows = []
    for i, (n, m, s2) in enumerate(grid):
        analytic = analytic_feve(n, m, s2)
        sim, se = simulate_gaussian_feve(int(n), int(m), float(s2), replicates, rng_for(rng_seed, i), n_val)
        gap = sim - analytic
        classic = n >= m
        rows.append(
            TheoryRow(
                int(n), int(m), float(s2), analytic, sim, se, gap, classic,
                abs(gap) > tolerance, "" if classic else "outside classic regime",
            )
        )
    return TheoryReport(rows, tolerance, replicates, n_val, int(rng_seed))
