"""Log-linear decay fits."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class DecayFit:
    """Fit of ``y ~ C exp(-eps x)``; ``eps`` may come out negative."""

    C: float
    eps: float
    r2: float
    samples: Tuple[Tuple[float, float], ...] = field(default_factory=tuple)

    @property
    def valid(self) -> bool:
        return math.isfinite(self.eps)

    def predict(self, x):
        return self.C * np.exp(-self.eps * np.asarray(x, dtype=float))

    def to_json(self) -> dict:
        return {
            "C": self.C,
            "eps": self.eps,
            "r2": self.r2,
            "samples": [{"x": x, "y": y} for x, y in self.samples],
        }

    @classmethod
    def from_samples(cls, xs: Sequence[float], ys: Sequence[float]) -> "DecayFit":
        """Fit on the strictly positive samples; an empty fit (NaN) if fewer than 3."""
        pairs = tuple((float(x), float(y)) for x, y in zip(xs, ys))
        pos = [(x, y) for x, y in pairs if y > 0 and math.isfinite(y)]
        if len(pos) < 3:
            return cls(float("nan"), float("nan"), float("nan"), pairs)
        fit = fit_exponential_decay(pos)
        return cls(fit.C, fit.eps, fit.r2, pairs)


def fit_exponential_decay(samples: Sequence[Tuple[float, float]]) -> DecayFit:
    """Least squares for ``log y = log C - eps x``."""
    samples = [(float(x), float(y)) for x, y in samples]
    if len(samples) < 3:
        raise FitError("need at least 3 samples")
    x = np.array([s[0] for s in samples])
    y = np.array([s[1] for s in samples])
    if np.any(~(y > 0)):
        raise FitError("all samples must have y > 0")
    ly = np.log(y)
    A = np.vstack([np.ones_like(x), -x]).T
    (logC, eps), *_ = np.linalg.lstsq(A, ly, rcond=None)
    resid = ly - A @ np.array([logC, eps])
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    ss_res = float(np.sum(resid**2))
    if ss_tot == 0.0:
        r2 = 1.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    return DecayFit(float(np.exp(logC)), float(eps), float(r2), tuple(samples))


def strictly_decreasing(values: Sequence[float]) -> bool:
    v = list(values)
    return all(b < a for a, b in zip(v, v[1:]))
