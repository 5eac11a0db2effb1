"""Shared variance component analysis (SVCA) with shuffle controls.

Neurons are split into two groups and time into train/test blocks. The
singular vectors of the train cross-covariance between groups give paired
projections; the test-set covariance of each projected pair, normalized by
the pair's variance, is that dimension's reliable variance. Dimensions count
as reliable when they beat time-shuffled surrogates by ``threshold_sds``
standard deviations.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._rng import rng_for

log = logging.getLogger(__name__)

MIN_NEURONS = 4
MIN_TIMEPOINTS = 4


@dataclass
class PopulationRecording:
    """Neurons x time activity, z-scored per neuron on construction."""

    activity: np.ndarray
    positions: np.ndarray | None = None
    sample_rate: float | None = None

    def __post_init__(self):
        a = np.array(self.activity, dtype=float)
        if a.ndim != 2:
            raise ValueError("activity must be a neurons x time matrix")
        if a.shape[0] < MIN_NEURONS or a.shape[1] < MIN_TIMEPOINTS:
            raise ValueError(f"need >= {MIN_NEURONS} neurons and >= {MIN_TIMEPOINTS} timepoints, got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("activity contains non-finite entries")
        sd = a.std(axis=1, keepdims=True)
        flat = np.flatnonzero(sd[:, 0] == 0)
        if flat.size:
            raise ValueError(f"neuron {int(flat[0])} has zero variance and cannot be z-scored")
        self.activity = (a - a.mean(axis=1, keepdims=True)) / sd
        if self.positions is not None:
            pos = np.asarray(self.positions, dtype=float)
            if pos.ndim != 2 or pos.shape[0] != a.shape[0]:
                raise ValueError("positions must be neurons x dims")
            self.positions = pos

    @property
    def n_neurons(self):
        return self.activity.shape[0]

    @property
    def n_time(self):
        return self.activity.shape[1]

    def subset(self, idx):
        pos = None if self.positions is None else self.positions[idx]
        return PopulationRecording(self.activity[idx], pos, self.sample_rate)


@dataclass
class PopulationSplit:
    group1: np.ndarray
    group2: np.ndarray
    train_times: np.ndarray
    test_times: np.ndarray
    spatial: bool


@dataclass
class SvcaSpectrum:
    reliable_variance: np.ndarray
    shuffle_mean: np.ndarray
    shuffle_sd: np.ndarray
    threshold_sds: float
    n_reliable: int
    rank: int
    normalization: str = "per_dim"

    @property
    def reliable(self):
        return self.reliable_variance > self.shuffle_mean + self.threshold_sds * self.shuffle_sd

    def to_dict(self):
        return {
            "reliable_variance": self.reliable_variance.tolist(),
            "shuffle_mean": self.shuffle_mean.tolist(),
            "shuffle_sd": self.shuffle_sd.tolist(),
            "threshold_sds": self.threshold_sds,
            "n_reliable": int(self.n_reliable),
            "rank": int(self.rank),
            "normalization": self.normalization,
        }

    def to_csv(self):
        lines = ["dim,reliable_variance,shuffle_mean,shuffle_sd,reliable"]
        for i, (rv, m, s, ok) in enumerate(
            zip(self.reliable_variance, self.shuffle_mean, self.shuffle_sd, self.reliable)
        ):
            lines.append(f"{i + 1},{rv!r},{m!r},{s!r},{int(ok)}")
        return "\n".join(lines) + "\n"


@dataclass
class PowerLawFit:
    prefactor: float
    exponent: float
    r2_loglog: float

    def predict(self, size):
        return self.prefactor * np.asarray(size, dtype=float) ** self.exponent


def interleaved_blocks(n_time, block=72):
    """Alternate contiguous train/test blocks of ``block`` samples."""
    if block < 1:
        raise ValueError("block length must be positive")
    ids = (np.arange(n_time) // block) % 2
    return np.flatnonzero(ids == 0), np.flatnonzero(ids == 1)


def split_population(rec, rng_seed, bin_width=None, n_bins=8, block=72):
    """Disjoint neuron groups and disjoint train/test timepoints.

    With positions, neurons are binned along the first spatial axis and
    alternate bins go to alternate groups. ``bin_width`` defaults to the
    extent divided by ``n_bins``; a binning that leaves a group with fewer
    than two neurons falls back to alternating a seeded random permutation.
    """
    n = rec.n_neurons
    if n < 4:
        raise ValueError(f"need at least 2 neurons per group, got {n} neurons")
    group1 = group2 = None
    spatial = False
    if rec.positions is not None:
        x = rec.positions[:, 0]
        extent = float(np.ptp(x))
        width = bin_width if bin_width is not None else (extent / n_bins if extent > 0 else 0.0)
        if width > 0:
            bins = np.floor((x - x.min()) / width).astype(int)
            if bin_width is None:
                bins = np.minimum(bins, n_bins - 1)
            g = bins % 2
            if np.count_nonzero(g == 0) >= 2 and np.count_nonzero(g == 1) >= 2:
                group1, group2 = np.flatnonzero(g == 0), np.flatnonzero(g == 1)
                spatial = True
    if group1 is None:
        perm = rng_for(rng_seed, 0).permutation(n)
        group1, group2 = np.sort(perm[0::2]), np.sort(perm[1::2])
    train, test = interleaved_blocks(rec.n_time, block)
    if train.size < 2 or test.size < 2:
        raise ValueError("recording too short for the train/test block split")
    return PopulationSplit(group1, group2, train, test, spatial)


def randomized_svd(A, k, rng, oversample=10, n_iter=2):
    """Top-``k`` SVD by randomized range finding with power iterations."""
    m, n = A.shape
    k = min(k, m, n)
    width = min(k + oversample, m, n)
    Q = A @ rng.standard_normal((n, width))
    Q, _ = np.linalg.qr(Q)
    for _ in range(n_iter):
        Z, _ = np.linalg.qr(A.T @ Q)
        Q, _ = np.linalg.qr(A @ Z)
    Ub, s, Vt = np.linalg.svd(Q.T @ A, full_matrices=False)
    return (Q @ Ub)[:, :k], s[:k], Vt[:k]


def _reliable_variance(X1, X2, train, test, max_dims, rng, normalization):
    cov = X1[:, train] @ X2[:, train].T / train.size
    u, s, vt = randomized_svd(cov, max_dims, rng)
    # numerical rank of the train cross-covariance
    tol = s[0] * max(cov.shape) * np.finfo(float).eps if s.size and s[0] > 0 else 0.0
    rank = int(np.count_nonzero(s > tol))
    u, vt = u[:, :rank], vt[:rank]
    p1 = u.T @ X1[:, test]
    p2 = vt @ X2[:, test]
    shared = np.sum(p1 * p2, axis=1)
    if normalization == "per_dim":
        total = 0.5 * np.sum(p1**2 + p2**2, axis=1)
    elif normalization == "total":
        total = np.full(rank, 0.5 * (np.sum(X1[:, test] ** 2) + np.sum(X2[:, test] ** 2)))
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    rv = np.zeros(max_dims)
    with np.errstate(invalid="ignore", divide="ignore"):
        rv[:rank] = np.where(total > 0, shared / total, 0.0)
    return rv, rank


def circular_shuffle(X, rng):
    """Shift every row by its own random circular offset.

    Offsets are distinct whenever there are at least as many timepoints as
    rows, so no two neurons keep their original alignment to each other.
    """
    n, T = X.shape
    shifts = rng.choice(T, size=n, replace=False) if T >= n else rng.integers(0, T, size=n)
    idx = (np.arange(T)[None, :] - shifts[:, None]) % T
    return np.take_along_axis(X, idx, axis=1)


def svca(
    rec,
    max_dims,
    rng_seed,
    threshold_sds=4.0,
    n_shuffles=2,
    block=72,
    bin_width=None,
    normalization="per_dim",
    pool_shuffle_stats=True,
):
    """Reliable variance per SVCA dimension with a shuffle threshold.

    The shuffle statistics come from ``n_shuffles`` surrogates in which each
    neuron is circularly shifted in time. With ``pool_shuffle_stats`` the
    surrogate mean and SD are pooled over all dimensions (the null
    distribution is the same for every dimension, and two surrogates alone
    give a very noisy per-dimension SD); otherwise they are per dimension.
    """
    split = split_population(rec, rng_seed, bin_width=bin_width, block=block)
    limit = min(split.group1.size, split.group2.size, split.train_times.size)
    if max_dims > limit:
        raise ValueError(f"max_dims {max_dims} exceeds min(group sizes, train length) = {limit}")
    X1 = rec.activity[split.group1]
    X2 = rec.activity[split.group2]
    rv, rank = _reliable_variance(X1, X2, split.train_times, split.test_times, max_dims,
                                  rng_for(rng_seed, 1), normalization)

    null = np.empty((n_shuffles, max_dims))
    for s in range(n_shuffles):
        Y = circular_shuffle(np.vstack([X1, X2]), rng_for(rng_seed, 2, s))
        Y1, Y2 = Y[: X1.shape[0]], Y[X1.shape[0]:]
        null[s], _ = _reliable_variance(Y1, Y2, split.train_times, split.test_times, max_dims,
                                        rng_for(rng_seed, 3, s), normalization)
    if pool_shuffle_stats:
        mean = np.full(max_dims, null.mean())
        sd = np.full(max_dims, null.std(ddof=1))
    else:
        mean = null.mean(axis=0)
        sd = null.std(axis=0, ddof=1)
    reliable = rv > mean + threshold_sds * sd
    reliable[rank:] = False
    return SvcaSpectrum(rv, mean, sd, threshold_sds, int(np.count_nonzero(reliable)), rank, normalization)


def dimension_sweep(rec, sizes, repeats, rng_seed, max_dims=None, **svca_kwargs):
    """Mean reliable-dimension count for random neuron subsets of each size.

    Returns rows ``(size, mean n_reliable, standard error)``.
    """
    sizes = [int(s) for s in sizes]
    if any(b < a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("sizes must be increasing")
    uniq = list(dict.fromkeys(sizes))
    if len(uniq) != len(sizes):
        log.warning("duplicate sizes removed: %s -> %s", sizes, uniq)
    if uniq and uniq[-1] > rec.n_neurons:
        raise ValueError(f"size {uniq[-1]} exceeds {rec.n_neurons} neurons")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    train_len = interleaved_blocks(rec.n_time, svca_kwargs.get("block", 72))[0].size
    rows = []
    for i, size in enumerate(uniq):
        counts = []
        for r in range(repeats):
            rng = rng_for(rng_seed, i, r)
            idx = np.sort(rng.choice(rec.n_neurons, size=size, replace=False))
            sub, seed = rec.subset(idx), int(rng.integers(2**63))
            # spatial splits can be unbalanced, so cap by the actual smaller group
            sp = split_population(sub, seed, bin_width=svca_kwargs.get("bin_width"),
                                  block=svca_kwargs.get("block", 72))
            limit = min(sp.group1.size, sp.group2.size, train_len)
            k = min(max_dims or limit, limit)
            spec = svca(sub, k, seed, **svca_kwargs)
            counts.append(spec.n_reliable)
        counts = np.array(counts, dtype=float)
        se = counts.std(ddof=1) / math.sqrt(repeats) if repeats > 1 else math.nan
        rows.append((size, float(counts.mean()), float(se)))
    return rows


def fit_power_law(points):
    """OLS on ``(log size, log dims)``; the slope is the exponent."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 3:
        raise ValueError("need at least 3 (size, dims) points")
    size, dims = pts[:, 0], pts[:, 1]
    if np.any(size <= 0) or np.any(dims <= 0):
        raise ValueError("sizes and dims must be positive for a log-log fit")
    x, y = np.log(size), np.log(dims)
    A = np.column_stack([np.ones_like(x), x])
    (intercept, slope), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ np.array([intercept, slope])
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0
    return PowerLawFit(math.exp(intercept), float(slope), r2)


# ---------------------------------------------------------------- I/O


def load_activity(path, positions=None):
    """Read activity from CSV (neurons as rows) or a raw binary + JSON sidecar.

    The sidecar ``<file>.json`` holds ``shape``, ``dtype`` and optionally
    ``positions`` (a neurons x dims nested list).
    """
    path = Path(path)
    if path.suffix.lower() == ".csv":
        data = np.loadtxt(path, delimiter=",", ndmin=2)
        return PopulationRecording(data, positions)
    sidecar = path.with_suffix(path.suffix + ".json")
    if not sidecar.exists():
        sidecar = path.with_suffix(".json")
    meta = json.loads(sidecar.read_text())
    data = np.fromfile(path, dtype=np.dtype(meta.get("dtype", "<f8"))).reshape(meta["shape"])
    pos = meta.get("positions")
    if positions is None and pos is not None:
        positions = np.asarray(pos, dtype=float)
    return PopulationRecording(data, positions, meta.get("sample_rate"))


def save_activity(path, activity, positions=None, sample_rate=None):
    path = Path(path)
    arr = np.ascontiguousarray(activity, dtype="<f8")
    arr.tofile(path)
    meta = {"shape": list(arr.shape), "dtype": "<f8"}
    if positions is not None:
        meta["positions"] = np.asarray(positions, dtype=float).tolist()
    if sample_rate is not None:
        meta["sample_rate"] = sample_rate
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta))


def planted_recording(n_neurons, n_time, rank, snr, rng_seed, positions=True):
    """Synthetic activity with a rank-``rank`` shared signal.

    Each neuron's signal variance is ``snr`` times its noise variance.
    ``rank=0`` gives iid Gaussian noise.
    """
    rng = rng_for(rng_seed, 7)
    noise = rng.standard_normal((n_neurons, n_time))
    if rank > 0:
        load = rng.standard_normal((n_neurons, rank)) / math.sqrt(rank)
        latent = rng.standard_normal((rank, n_time))
        signal = load @ latent
        signal *= math.sqrt(snr) / signal.std(axis=1, keepdims=True)
        act = signal + noise
    else:
        act = noise
    pos = None
    if positions:
        pos = np.column_stack([rng.uniform(0, 1000, n_neurons), rng.uniform(0, 1000, (n_neurons, 2))])
    return PopulationRecording(act, pos)
