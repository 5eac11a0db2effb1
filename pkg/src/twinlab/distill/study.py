"""Teacher-student robustness study over dataset size, RSA weight and feature noise."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .._rng import rng_for
from .data import GeneratorConfig, generate_dataset
from .net import conv_net
from .train import DistillConfig, PgdConfig, Schedule, evaluate, train

CSV_HEADER = ["size_mult", "beta", "noise_frac", "seed", "clean_acc", "adv_acc", "student"]


@dataclass(frozen=True)
class StudyConfig:
    base_examples: int = 200
    teacher_examples: int = 10000
    eval_examples: int = 5000
    epochs: int = 64
    teacher_epochs: int = 64
    schedule: Schedule = Schedule()
    channels: int = 16
    n_layers: int = 3
    kernel_size: int = 5
    nonlinearity: str = "relu"
    train_attack: PgdConfig = PgdConfig(0.15, 10)
    eval_attack: PgdConfig = PgdConfig(0.15, 50)
    mode: str = "literal"
    rsa_kernel: str = "centered"
    adversarial_student: bool = True
    n_seeds: int = 5
    generator: GeneratorConfig = GeneratorConfig()

    def make_net(self, seed):
        return conv_net(self.channels, self.n_layers, self.kernel_size, nonlinearity=self.nonlinearity,
                        rng_seed=seed)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        nested = {"schedule": Schedule, "train_attack": PgdConfig, "eval_attack": PgdConfig,
                  "generator": GeneratorConfig}
        for key, typ in nested.items():
            if key in d and isinstance(d[key], dict):
                sub = dict(d[key])
                if "scale_range" in sub:
                    sub["scale_range"] = tuple(sub["scale_range"])
                d[key] = typ(**sub)
        return cls(**d)


@dataclass
class StudyRow:
    size_mult: int
    beta: float
    noise_frac: float
    seed: int
    clean_acc: float
    adv_acc: float
    student: str
    error: str = ""


@dataclass
class StudyReport:
    rows: list
    teacher_clean: float
    teacher_adv: float
    config: dict
    rng_seed: int
    runtime_s: float = 0.0
    grids: dict = field(default_factory=dict)

    def select(self, student, size_mult, beta=None, noise_frac=None):
        return [r for r in self.rows
                if r.student == student and r.size_mult == size_mult
                and (beta is None or r.beta == beta)
                and (noise_frac is None or r.noise_frac == noise_frac)]

    def summary(self, student, size_mult, beta=None, noise_frac=None, metric="adv_acc"):
        """(mean, standard error, count) of a metric over seeds."""
        vals = np.array([getattr(r, metric) for r in self.select(student, size_mult, beta, noise_frac)])
        vals = vals[np.isfinite(vals)]
        if vals.size == 0:
            return math.nan, math.nan, 0
        se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else math.nan
        return float(vals.mean()), se, int(vals.size)

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([r.size_mult, repr(float(r.beta)), repr(float(r.noise_frac)), r.seed,
                        repr(r.clean_acc), repr(r.adv_acc), r.student])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def to_json(self, path=None):
        doc = {
            "rng_seed": self.rng_seed,
            "runtime_s": self.runtime_s,
            "teacher": {"clean_acc": self.teacher_clean, "adv_acc": self.teacher_adv},
            "config": self.config,
            "grids": self.grids,
            "failures": [asdict(r) for r in self.rows if r.error],
        }
        text = json.dumps(doc, indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def _derive(seed, *path):
    return int(rng_for(seed, *path).integers(2**31))


def _cell(args):
    cfg, teacher_params, k, size, beta, noise, student, seed = args
    teacher = cfg.make_net(0)
    teacher.params = teacher_params.copy()
    ev = generate_dataset(cfg.eval_examples, _derive(seed, 1, k), cfg.generator)
    data = generate_dataset(cfg.base_examples * size, _derive(seed, 2, k, size), cfg.generator)
    net = cfg.make_net(_derive(seed, 3, k))
    dcfg = DistillConfig(beta=beta, epochs=cfg.epochs, feature_noise_frac=noise, kernel=cfg.rsa_kernel,
                         mode=cfg.mode)
    adv = cfg.train_attack if student == "adversarial" else None
    try:
        train(net, data, cfg.schedule, dcfg, teacher=teacher, adversarial=adv, rng_seed=_derive(seed, 4, k))
        clean, robust = evaluate(net, ev, cfg.eval_attack, rng_seed=_derive(seed, 5, k))
        return clean, robust, ""
    except (FloatingPointError, ValueError, np.linalg.LinAlgError) as exc:
        return math.nan, math.nan, f"{type(exc).__name__}: {exc}"


def train_teacher(cfg, rng_seed):
    """Adversarially trained teacher on its own large dataset."""
    teacher = cfg.make_net(_derive(rng_seed, 6))
    data = generate_dataset(cfg.teacher_examples, _derive(rng_seed, 7), cfg.generator)
    train(teacher, data, cfg.schedule, DistillConfig(epochs=cfg.teacher_epochs), adversarial=cfg.train_attack,
          rng_seed=_derive(rng_seed, 8))
    return teacher


def run_distillation_study(sizes=(1, 4, 16), betas=(0, 1, 10, 100, 300), noise_fracs=(0.0, 0.05, 0.10),
                           rng_seed=0, config=StudyConfig(), jobs=1, teacher=None):
    """Train one teacher, then a student per (seed, size, beta, noise) cell.

    Students for a given seed share their initialization, batch order and
    evaluation set across cells, so differences between cells are paired.
    beta = 0 is trained once per (seed, size) and reported under every noise
    level, since noise only enters through the RSA term. An adversarially
    trained student (no RSA) is added per (seed, size) unless disabled.
    """
    if not sizes or not betas or not noise_fracs:
        raise ValueError("sizes, betas and noise_fracs must be non-empty")
    if any(s < 1 for s in sizes):
        raise ValueError("size multipliers must be >= 1")
    t0 = time.perf_counter()
    if teacher is None:
        teacher = train_teacher(config, rng_seed)
    t_ev = generate_dataset(config.eval_examples, _derive(rng_seed, 9), config.generator)
    t_clean, t_adv = evaluate(teacher, t_ev, config.eval_attack, rng_seed=_derive(rng_seed, 10))

    tasks, labels = [], []
    for k in range(config.n_seeds):
        for size in sizes:
            for beta in betas:
                noises = [0.0] if beta == 0 else list(noise_fracs)
                for noise in noises:
                    student = "plain" if beta == 0 else "rsa"
                    tasks.append((config, teacher.params, k, size, float(beta), float(noise), student, rng_seed))
                    labels.append((k, size, float(beta), float(noise), student))
            if config.adversarial_student:
                tasks.append((config, teacher.params, k, size, 0.0, 0.0, "adversarial", rng_seed))
                labels.append((k, size, 0.0, 0.0, "adversarial"))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_cell, tasks))
    else:
        results = [_cell(t) for t in tasks]

    rows = []
    for (k, size, beta, noise, student), (clean, adv, err) in zip(labels, results):
        if student == "plain":
            for nf in noise_fracs:
                rows.append(StudyRow(size, beta, float(nf), k, clean, adv, student, err))
        else:
            rows.append(StudyRow(size, beta, noise, k, clean, adv, student, err))
    cfg_dict = json.loads(json.dumps(asdict(config)))
    return StudyReport(rows, t_clean, t_adv, cfg_dict, rng_seed, time.perf_counter() - t0,
                       {"sizes": list(sizes), "betas": [float(b) for b in betas],
                        "noise_fracs": [float(n) for n in noise_fracs], "seeds": list(range(config.n_seeds))})


def desk_config(**overrides):
    """Desk-scale defaults with any field replaced."""
    return replace(StudyConfig(), **overrides)
