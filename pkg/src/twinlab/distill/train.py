"""Losses with gradients, PGD attacks, Adam training and evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .._rng import rng_for
from .losses import KERNELS, LOSS_MODES, cross_entropy, loss_weights, rsa_loss

_ORDER, _NOISE, _ATTACK = 0, 1, 2


@dataclass(frozen=True)
class PgdConfig:
    epsilon: float = 0.3
    steps: int = 10
    step_size: float | None = None  # None means 2.5 * epsilon / steps

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    @property
    def alpha(self):
        return 2.5 * self.epsilon / self.steps if self.step_size is None else self.step_size


@dataclass(frozen=True)
class DistillConfig:
    beta: float = 0.0
    distinct_examples: int | None = None  # None uses every example given
    epochs: int = 64
    feature_noise_frac: float = 0.0
    kernel: str = "centered"
    mode: str = "literal"
    rsa_taps: tuple | None = None  # subset of the student's taps; None uses all

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.feature_noise_frac < 0:
            raise ValueError("feature_noise_frac must be >= 0")
        if self.kernel not in KERNELS:
            raise ValueError(f"kernel must be one of {KERNELS}")
        if self.mode not in LOSS_MODES:
            raise ValueError(f"mode must be one of {LOSS_MODES}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass(frozen=True)
class Schedule:
    """Adam with a step decay; ``epoch_size`` examples are drawn per epoch."""

    lr: float = 0.01
    batch_size: int = 100
    epoch_size: int = 1000
    decay_at: float = 0.5
    decay_factor: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def steps_per_epoch(self):
        return math.ceil(self.epoch_size / self.batch_size)


@dataclass(frozen=True)
class LossSpec:
    w_ce: float = 1.0
    w_rsa: float = 0.0
    kernel: str = "centered"
    taps: tuple | None = None  # indices into the tap list; None uses all


@dataclass
class History:
    loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    epoch_loss: list = field(default_factory=list)

    @property
    def n_steps(self):
        return len(self.loss)


def gradients(net, x, labels, spec=LossSpec(), teacher_acts=None, input_grad=False):
    """Loss and exact reverse-mode gradient for one batch.

    Returns ``(loss, grad)`` or ``(loss, grad, dx)`` when ``input_grad``.
    """
    logits, taps = net.forward(x)
    loss = 0.0
    dlogits = dtaps = None
    if spec.w_ce != 0:
        ce, g = cross_entropy(logits, labels)
        loss += spec.w_ce * ce
        dlogits = spec.w_ce * g
    if spec.w_rsa != 0:
        if teacher_acts is None:
            raise ValueError("an RSA term needs teacher activations")
        use = range(len(taps)) if spec.taps is None else spec.taps
        r, gt = rsa_loss([taps[j] for j in use], list(teacher_acts), spec.kernel)
        loss += spec.w_rsa * r
        dtaps = [None] * len(taps)
        for j, g in zip(use, gt):
            dtaps[j] = spec.w_rsa * g
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    if dlogits is None and dtaps is None:
        dlogits = np.zeros_like(logits)
    out = net.backward(dlogits, dtaps, input_grad=input_grad)
    if input_grad:
        grad, dx = out
        return loss, grad, dx.reshape(np.shape(x))
    return loss, out


def pgd_attack(net, x, labels, cfg, rng_seed=0, trace=None):
    """L-infinity PGD with a random start; every step is projected onto the ball.

    ``rng_seed`` may be an int or a Generator. If ``trace`` is a list, the
    cross-entropy after each step is appended to it.
    """
    x = np.asarray(x, dtype=float)
    if cfg.epsilon == 0:
        return x.copy()
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else rng_for(rng_seed, _ATTACK)
    lo, hi = x - cfg.epsilon, x + cfg.epsilon
    x_adv = x + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape)
    for _ in range(cfg.steps):
        _, _, dx = gradients(net, x_adv, labels, input_grad=True)
        x_adv = np.clip(x_adv + cfg.alpha * np.sign(dx), lo, hi)
        if trace is not None:
            trace.append(cross_entropy(net.forward(x_adv)[0], labels)[0])
    return x_adv


def evaluate(net, data, attack=None, rng_seed=0, batch=1000):
    """(clean accuracy, adversarial accuracy); the latter is None without an attack."""
    if len(data) == 0:
        raise ValueError("empty evaluation set")
    rng = rng_for(rng_seed, _ATTACK)
    clean = adv = 0
    for i in range(0, len(data), batch):
        x, y = data.x[i : i + batch], data.y[i : i + batch]
        clean += int((net.predict(x) == y).sum())
        if attack is not None:
            xa = pgd_attack(net, x, y, attack, rng)
            adv += int((net.predict(xa) == y).sum())
    n = len(data)
    return clean / n, (adv / n if attack is not None else None)


def _batches(n_distinct, cfg, schedule, rng):
    """Index batches with epoch recycling: the step count ignores ``n_distinct``."""
    total = cfg.epochs * schedule.epoch_size
    cycles = math.ceil(total / n_distinct)
    stream = np.concatenate([rng.permutation(n_distinct) for _ in range(cycles)])[:total]
    for e in range(cfg.epochs):
        ep = stream[e * schedule.epoch_size : (e + 1) * schedule.epoch_size]
        yield e, [ep[j : j + schedule.batch_size] for j in range(0, ep.size, schedule.batch_size)]


def _noisy(acts, frac, rng):
    if frac == 0:
        return acts
    out = []
    for a in acts:
        sd = frac * math.sqrt(float(np.mean(a**2)))
        out.append(a + sd * rng.standard_normal(a.shape))
    return out


def train(net, data, schedule=Schedule(), cfg=DistillConfig(), teacher=None, adversarial=None, rng_seed=0):
    """Train ``net`` in place and return ``(net, history)``.

    Without a teacher the loss is cross-entropy on the true labels. With a
    teacher the labels are the teacher's predictions on clean inputs and the
    RSA term compares representations on clean inputs, with optional feature
    noise on the teacher side. With ``adversarial`` the cross-entropy term is
    evaluated on PGD examples generated against the current net.
    """
    if cfg.distinct_examples is not None:
        if cfg.distinct_examples > len(data):
            raise ValueError("distinct_examples exceeds the dataset size")
        data = data[: cfg.distinct_examples]
    n = len(data)
    w_ce, w_rsa = loss_weights(cfg.beta, cfg.mode)
    if teacher is None:
        w_rsa = 0.0
        labels = data.y
        t_acts = None
    else:
        logits, t_acts = teacher.forward(data.x)
        labels = logits.argmax(axis=1)
        if cfg.rsa_taps is not None:
            t_acts = [t_acts[j] for j in cfg.rsa_taps]
        if w_rsa == 0:
            t_acts = None
    order_rng = rng_for(rng_seed, _ORDER)
    noise_rng = rng_for(rng_seed, _NOISE)
    attack_rng = rng_for(rng_seed, _ATTACK)

    m = np.zeros(net.n_params)
    v = np.zeros(net.n_params)
    total_steps = cfg.epochs * schedule.steps_per_epoch()
    decay_step = int(round(schedule.decay_at * total_steps))
    hist = History()
    step = 0
    for epoch, batches in _batches(n, cfg, schedule, order_rng):
        ep_losses = []
        for idx in batches:
            x, y = data.x[idx], labels[idx]
            grad = np.zeros(net.n_params)
            loss = 0.0
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    if w_ce != 0:
                        xc = pgd_attack(net, x, y, adversarial, attack_rng) if adversarial is not None else x
                        l1, g1 = gradients(net, xc, y, LossSpec(w_ce, 0.0))
                        loss += l1
                        grad += g1
                    if w_rsa != 0:
                        ta = _noisy([a[idx] for a in t_acts], cfg.feature_noise_frac, noise_rng)
                        l2, g2 = gradients(net, x, y, LossSpec(0.0, w_rsa, cfg.kernel, cfg.rsa_taps), ta)
                        loss += l2
                        grad += g2
            except FloatingPointError:
                loss = math.nan
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at step {step}")
            lr = schedule.lr * (schedule.decay_factor if step >= decay_step else 1.0)
            step += 1
            m = schedule.beta1 * m + (1 - schedule.beta1) * grad
            v = schedule.beta2 * v + (1 - schedule.beta2) * grad**2
            mh = m / (1 - schedule.beta1**step)
            vh = v / (1 - schedule.beta2**step)
            net.params -= lr * mh / (np.sqrt(vh) + schedule.eps)
            hist.loss.append(loss)
            hist.lr.append(lr)
            ep_losses.append(loss)
        hist.epoch_loss.append(float(np.mean(ep_losses)))
    return net, hist
