"""Scaling-curve container and its CSV/JSON forms."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CSV_FIELDS = ("t", "feve_mean", "feve_se", "n_replicates")


@dataclass
class ScalingCurve:
    """(amount, FEVE) samples, one row per amount.

    ``feve_mean`` is NaN for a point whose every replicate failed; such
    points are kept so a partial sweep is visible as such.
    """

    t: np.ndarray
    feve_mean: np.ndarray
    feve_se: np.ndarray | None = None
    n_replicates: np.ndarray | None = None
    units_label: str = "samples"
    group_label: str = ""
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.feve_mean = np.asarray(self.feve_mean, dtype=float)
        n = self.t.shape[0]
        if self.t.ndim != 1 or self.feve_mean.shape != (n,):
            raise ValueError("t and feve_mean must be 1-D and the same length")
        if self.feve_se is not None:
            self.feve_se = np.asarray(self.feve_se, dtype=float)
            if self.feve_se.shape != (n,):
                raise ValueError("feve_se length must match t")
            if np.any(self.feve_se[np.isfinite(self.feve_se)] < 0):
                raise ValueError("feve_se must be non-negative")
        if self.n_replicates is not None:
            self.n_replicates = np.asarray(self.n_replicates, dtype=int)
        if np.any(~np.isfinite(self.t)) or np.any(self.t <= 0):
            raise ValueError("amounts must be positive and finite")
        if n > 1 and np.any(np.diff(self.t) <= 0):
            raise ValueError("amounts must be strictly increasing")

    def __len__(self):
        return self.t.shape[0]

    @property
    def missing(self):
        return ~np.isfinite(self.feve_mean)

    def valid(self):
        """Copy without the missing points."""
        keep = ~self.missing
        return ScalingCurve(
            self.t[keep],
            self.feve_mean[keep],
            None if self.feve_se is None else self.feve_se[keep],
            None if self.n_replicates is None else self.n_replicates[keep],
            self.units_label,
            self.group_label,
            dict(self.config),
        )

    def rows(self):
        se = self.feve_se if self.feve_se is not None else np.full(len(self), np.nan)
        nrep = self.n_replicates if self.n_replicates is not None else np.zeros(len(self), int)
        for i in range(len(self)):
            yield self.t[i], self.feve_mean[i], se[i], int(nrep[i])

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for t, m, s, n in self.rows():
            w.writerow([_fmt(t), _fmt(m), _fmt(s), n])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_json(self, path=None):
        doc = {
            "units_label": self.units_label,
            "group_label": self.group_label,
            "points": [
                {"t": t, "feve_mean": _num(m), "feve_se": _num(s), "n_replicates": n}
                for t, m, s, n in self.rows()
            ],
            "config": self.config,
        }
        text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path_or_text, **kwargs):
        """Read ``t,feve_mean[,feve_se[,n_replicates]]``; header required."""
        text = str(path_or_text)
        if "\n" not in text:
            text = Path(text).read_text()
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames is None or not {"t", "feve_mean"} <= set(reader.fieldnames):
            raise ValueError("curve CSV needs at least the columns t,feve_mean")
        t, m, s, n = [], [], [], []
        for row in reader:
            t.append(float(row["t"]))
            m.append(_parse(row["feve_mean"]))
            s.append(_parse(row.get("feve_se", "")))
            n.append(int(row["n_replicates"]) if row.get("n_replicates") else 0)
        se = np.array(s) if "feve_se" in reader.fieldnames else None
        nrep = np.array(n) if "n_replicates" in reader.fieldnames else None
        return cls(np.array(t), np.array(m), se, nrep, **kwargs)


def _fmt(x):
    x = float(x)
    return "nan" if math.isnan(x) else repr(x)


def _num(x):
    x = float(x)
    return None if math.isnan(x) else x


def _parse(s):
    s = (s or "").strip()
    return float(s) if s else math.nan
