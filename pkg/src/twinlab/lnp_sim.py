"""Linear-nonlinear-Poisson simulation and MAP readout fitting.

A simulated neuron has log-rate ``gain * X @ w + offset`` with iid standard
normal regressors ``X`` and weights drawn with variance ``1/M``. In the
wrong-core variant only part of the drive is visible to the fitter:

    log mu = gain * alpha**2 * X_c @ w + gain * (1 - alpha**2) * eps + offset

with ``eps ~ N(0, 1)`` per observation.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from ._rng import rng_for
from .curves import ScalingCurve

LOG_RATE_CLAMP = 30.0

# sub-stream ids; the design and count streams are shared with the wrong-core
# generator so alpha = 1 reproduces generate_lnp exactly
_DESIGN, _COUNTS, _NOISE = 0, 1, 2


class FitError(RuntimeError):
    """Raised when a fit cannot produce any estimate."""


@dataclass(frozen=True)
class PoissonNeuronSpec:
    gain: float
    offset: float
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size < 1:
            raise ValueError("weights must be a non-empty vector")
        if not (math.isfinite(self.gain) and math.isfinite(self.offset)):
            raise ValueError("gain and offset must be finite")
        object.__setattr__(self, "weights", w)

    @property
    def readout_dim(self):
        return self.weights.size

    @classmethod
    def draw(cls, readout_dim, gain=0.4, offset=0.1, rng_seed=0):
        """Neuron with weights ``~ N(0, 1/M)``; defaults are the standard gain and offset."""
        if readout_dim < 1:
            raise ValueError("readout_dim must be >= 1")
        rng = rng_for(rng_seed, 99)
        w = rng.standard_normal(readout_dim) / math.sqrt(readout_dim)
        return cls(gain, offset, w)


@dataclass(frozen=True)
class CoreMixSpec:
    """Fraction of the drive captured by the known core.

    ``alpha = 1`` is a correct core, ``alpha = 0`` leaves only noise.
    """

    alpha: float
    known_dim: int | None = None
    unknown_noise_sd: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.known_dim is not None and self.known_dim < 1:
            raise ValueError("known_dim must be positive")


@dataclass
class SimDataset:
    design: np.ndarray
    counts: np.ndarray
    true_rate: np.ndarray
    design_gain: float
    offset: float
    n_clamped: int = 0

    @property
    def n_obs(self):
        return self.counts.shape[0]


@dataclass
class FitControl:
    tol: float = 1e-8
    max_iter: int = 100
    max_halvings: int = 20
    divergence_ceiling: float = 1e6
    fit_intercept: bool = True
    init_weights: np.ndarray | None = None
    init_intercept: float | None = None


@dataclass
class MapFitResult:
    weights_hat: np.ndarray
    converged: bool
    iterations: int
    intercept_hat: float = 0.0
    feve_val: float | None = None
    objective_trace: list | None = None
    posterior_cov: np.ndarray | None = None
    message: str = ""


def _rates(log_rate):
    bad = np.flatnonzero(~np.isfinite(log_rate))
    if bad.size:
        raise FloatingPointError(f"non-finite log-rate at row {int(bad[0])}")
    clipped = np.clip(log_rate, -LOG_RATE_CLAMP, LOG_RATE_CLAMP)
    n_clamped = int(np.count_nonzero(clipped != log_rate))
    return np.exp(clipped), n_clamped


def generate_lnp(spec, n_obs, rng_seed):
    """Draw an LNP dataset; identical seeds give bit-identical output."""
    return _generate(spec, None, n_obs, rng_seed)


def generate_wrong_core(spec, mix, n_obs, rng_seed):
    """Draw from the wrong-core mixture; the design holds only ``X_c``."""
    if mix.known_dim is not None and mix.known_dim != spec.readout_dim:
        raise ValueError(
            f"known_dim {mix.known_dim} does not match readout_dim {spec.readout_dim}"
        )
    return _generate(spec, mix, n_obs, rng_seed)


def _generate(spec, mix, n_obs, rng_seed):
    if n_obs < 1:
        raise ValueError("n_obs must be >= 1")
    X = rng_for(rng_seed, _DESIGN).standard_normal((n_obs, spec.readout_dim))
    drive = X @ spec.weights
    if mix is None:
        design_gain = spec.gain
        log_rate = design_gain * drive + spec.offset
    else:
        a2 = mix.alpha**2
        design_gain = spec.gain * a2
        eps = mix.unknown_noise_sd * rng_for(rng_seed, _NOISE).standard_normal(n_obs)
        log_rate = design_gain * drive + spec.gain * (1.0 - a2) * eps + spec.offset
    rate, n_clamped = _rates(log_rate)
    counts = rng_for(rng_seed, _COUNTS).poisson(rate)
    return SimDataset(X, counts, rate, design_gain, spec.offset, n_clamped)


def predict_rate(data, weights, intercept):
    rate, _ = _rates(data.design_gain * (data.design @ weights) + intercept)
    return rate


def penalized_loglik(data, weights, intercept, prior_variance):
    """Poisson log-likelihood (up to the ``log y!`` constant) plus Gaussian log-prior."""
    eta = data.design_gain * (data.design @ weights) + intercept
    ll = float(np.sum(data.counts * eta - np.exp(eta)))
    if math.isfinite(prior_variance):
        ll -= 0.5 * float(weights @ weights) / prior_variance
    return ll


def fit_map_poisson(data, prior_variance=None, config=None, validation=None):
    """MAP readout weights by iteratively reweighted least squares.

    The prior is ``w ~ N(0, prior_variance * I)``, defaulting to the sampling
    prior ``1/M``. ``prior_variance=math.inf`` gives the maximum-likelihood
    fit. An unpenalized intercept is estimated alongside ``w`` unless
    ``config.fit_intercept`` is False, in which case the generating offset is
    used.

    Newton steps that lower the penalized log-likelihood are halved up to
    ``max_halvings`` times. Divergence returns a non-converged result.
    """
    cfg = config or FitControl()
    X, y = data.design, np.asarray(data.counts, dtype=float)
    N, M = X.shape
    if prior_variance is None:
        prior_variance = 1.0 / M
    if not prior_variance > 0:
        raise ValueError("prior_variance must be positive")
    if not np.all(np.isfinite(X)):
        raise ValueError("design contains non-finite entries")
    g = data.design_gain
    precision = 0.0 if math.isinf(prior_variance) else 1.0 / prior_variance

    w = np.zeros(M) if cfg.init_weights is None else np.array(cfg.init_weights, float)
    if cfg.init_intercept is not None:
        b = float(cfg.init_intercept)
    elif cfg.fit_intercept:
        b = math.log(max(y.mean(), 1e-3))
    else:
        b = data.offset

    def objective(w_, b_):
        eta = g * (X @ w_) + b_
        if np.max(eta) > 700:
            return -math.inf
        return float(y @ eta - np.exp(eta).sum()) - 0.5 * precision * float(w_ @ w_)

    obj = objective(w, b)
    trace = [obj]
    converged = False
    message = ""
    it = 0
    for it in range(1, cfg.max_iter + 1):
        eta = g * (X @ w) + b
        mu = np.exp(np.clip(eta, -LOG_RATE_CLAMP * 10, LOG_RATE_CLAMP * 10))
        resid = y - mu
        grad_w = g * (X.T @ resid) - precision * w
        H_ww = g * g * (X.T @ (X * mu[:, None])) + precision * np.eye(M)
        if cfg.fit_intercept:
            H = np.empty((M + 1, M + 1))
            H[:M, :M] = H_ww
            H[:M, M] = H[M, :M] = g * (X.T @ mu)
            H[M, M] = mu.sum()
            grad = np.append(grad_w, resid.sum())
        else:
            H, grad = H_ww, grad_w
        step = _newton_solve(H, grad)
        if not np.all(np.isfinite(step)) or np.max(np.abs(step)) > cfg.divergence_ceiling:
            message = f"diverged at iteration {it}"
            break

        scale = 1.0
        for _ in range(cfg.max_halvings + 1):
            w_new = w + scale * step[:M]
            b_new = b + scale * step[M] if cfg.fit_intercept else b
            obj_new = objective(w_new, b_new)
            if obj_new >= obj - 1e-12 * max(1.0, abs(obj)):
                break
            scale *= 0.5
        else:
            # no acceptable step: at (numerical) optimum or stuck
            converged = np.max(np.abs(step)) < math.sqrt(cfg.tol)
            message = "step-halving exhausted"
            break
        update = np.max(np.abs(scale * step))
        w, b, obj = w_new, b_new, obj_new
        trace.append(obj)
        if update < cfg.tol:
            converged = True
            break
    else:
        message = f"no convergence in {cfg.max_iter} iterations"

    result = MapFitResult(w, converged, it, intercept_hat=b, objective_trace=trace, message=message)
    if validation is not None:
        result.feve_val = evaluate_feve(validation.true_rate, predict_rate(validation, w, b))
    return result


def _newton_solve(H, grad):
    try:
        return linalg.solve(H, grad, assume_a="sym")
    except (linalg.LinAlgError, ValueError):
        pass
    jitter = 1e-8 * max(1.0, float(np.trace(H)) / H.shape[0])
    try:
        return linalg.solve(H + jitter * np.eye(H.shape[0]), grad, assume_a="sym")
    except (linalg.LinAlgError, ValueError) as exc:
        raise FitError("IRLS system singular even after ridge fallback") from exc


def fit_map_gaussian(design, targets, noise_variance):
    """Closed-form MAP weights for ``y = X w + e`` with ``w ~ N(0, I/M)``.

    Returns ``(X'X + M s2 I)^-1 X'y`` and the posterior covariance
    ``s2 (X'X + M s2 I)^-1``.
    """
    if not noise_variance > 0:
        raise ValueError("noise_variance must be positive")
    X = np.asarray(design, dtype=float)
    y = np.asarray(targets, dtype=float)
    M = X.shape[1]
    A = X.T @ X + M * noise_variance * np.eye(M)
    try:
        factor = linalg.cho_factor(A)
    except linalg.LinAlgError as exc:
        raise FitError("regularized Gram matrix is not positive definite") from exc
    w = linalg.cho_solve(factor, X.T @ y)
    cov = noise_variance * linalg.cho_solve(factor, np.eye(M))
    return MapFitResult(w, True, 1, posterior_cov=cov)


def evaluate_feve(truth_rate, predicted_rate):
    """Explained fraction of the noise-free signal variance.

    ``1 - mean((truth - pred)**2) / var(truth)``; 1 for a perfect prediction,
    0 for predicting the mean.
    """
    truth = np.asarray(truth_rate, dtype=float)
    pred = np.asarray(predicted_rate, dtype=float)
    if truth.shape != pred.shape or truth.ndim != 1 or truth.size < 2:
        raise ValueError("need two equal-length vectors with at least 2 entries")
    var = truth.var()
    if not var > 0:
        raise ValueError("truth has zero variance; explainable variance undefined")
    return 1.0 - float(np.mean((truth - pred) ** 2)) / var


def feve_noise_corrected(y_val, predicted, noise_variance):
    """FEVE from noisy targets by subtracting a known noise variance."""
    y_val = np.asarray(y_val, dtype=float)
    num = np.mean((y_val - predicted) ** 2) - noise_variance
    den = np.mean(y_val**2) - noise_variance
    return 1.0 - num / den


def validation_size(readout_dim):
    return max(1000, 10 * readout_dim)


def _replicate(args):
    spec, mix, t, seed, i, k, n_val, prior_variance = args
    gen = generate_lnp if mix is None else (lambda s, n, r: generate_wrong_core(s, mix, n, r))
    # one sub-seed per (grid index, replicate); train and validation streams split below it
    sub = int(rng_for(seed, i, k).integers(2**63))
    train = gen(spec, t, rng_for(sub, 0).integers(2**63))
    val = gen(spec, n_val, rng_for(sub, 1).integers(2**63))
    try:
        fit = fit_map_poisson(train, prior_variance, validation=val)
    except (FitError, FloatingPointError, ValueError):
        return math.nan
    return fit.feve_val if fit.converged else math.nan


def run_scaling_sweep(
    spec,
    mix=None,
    t_grid=(),
    replicates=20,
    rng_seed=0,
    n_val=None,
    prior_variance=None,
    jobs=1,
):
    """FEVE versus training-set size, averaged over replicates.

    Each replicate fits MAP weights on fresh data of size ``t`` and scores
    FEVE on a fresh validation set. Points where every replicate failed are
    kept with a NaN mean.
    """
    t_grid = [int(t) for t in t_grid]
    if not t_grid or any(b <= a for a, b in zip(t_grid, t_grid[1:])):
        raise ValueError("t_grid must be non-empty and strictly increasing")
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    n_val = n_val or validation_size(spec.readout_dim)
    tasks = [
        (spec, mix, t, rng_seed, i, k, n_val, prior_variance)
        for i, t in enumerate(t_grid)
        for k in range(replicates)
    ]
    if jobs and jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            values = list(pool.map(_replicate, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        values = [_replicate(task) for task in tasks]
    values = np.array(values).reshape(len(t_grid), replicates)

    means, ses, counts = [], [], []
    for row in values:
        ok = row[np.isfinite(row)]
        counts.append(ok.size)
        means.append(ok.mean() if ok.size else math.nan)
        ses.append(ok.std(ddof=1) / math.sqrt(ok.size) if ok.size > 1 else math.nan)
    config = {
        "gain": spec.gain,
        "offset": spec.offset,
        "readout_dim": spec.readout_dim,
        "alpha": None if mix is None else mix.alpha,
        "replicates": replicates,
        "rng_seed": int(rng_seed),
        "n_val": n_val,
        "prior_variance": prior_variance,
    }
    label = "correct" if mix is None else f"alpha={mix.alpha:g}"
    return ScalingCurve(t_grid, means, ses, counts, "samples", label, config)


def wrong_core_ceiling(spec, mix):
    """Best attainable FEVE when only the known drive can be predicted.

    With known log-rate variance ``s_u`` and hidden variance ``s_v`` the
    optimal predictor is ``E[rate | X_c]`` and the lognormal moments give
    ``(exp(s_u) - 1) / (exp(s_u + s_v) - 1)``. ``s_u`` uses the neuron's
    actual weights.
    """
    a2 = mix.alpha**2
    s_u = (spec.gain * a2) ** 2 * float(spec.weights @ spec.weights)
    s_v = (spec.gain * (1 - a2) * mix.unknown_noise_sd) ** 2
    if s_u == 0:
        return 0.0
    return math.expm1(s_u) / math.expm1(s_u + s_v)
