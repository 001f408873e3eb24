"""Displacement metrics: ADE, FDE and RMSE at second marks.

All functions take ``n x H x 2`` arrays of predicted and true coordinates.
Steps are indexed over the prediction horizon only (1..H). Units are carried
on the report and never converted.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, RangeError

DEFAULT_MARKS = (1, 2, 3, 4, 5)
UNITS = ("pixel", "meter")


@dataclass
class PredictionPair:
    pred: np.ndarray
    truth: np.ndarray
    unit: str = "meter"
    fps: float = 5.0

    def __post_init__(self):
        self.pred = np.asarray(self.pred, dtype=np.float64)
        self.truth = np.asarray(self.truth, dtype=np.float64)
        if self.pred.shape != self.truth.shape:
            raise DataError(f"prediction shape {self.pred.shape} differs from truth shape {self.truth.shape}")
        if self.pred.ndim != 3 or self.pred.shape[2] != 2 or self.pred.shape[1] < 1:
            raise DataError(f"expected n x H x 2 arrays, got {self.pred.shape}")
        if self.unit not in UNITS:
            raise DataError(f"unit must be one of {UNITS}, got {self.unit!r}")
        if not self.fps > 0:
            raise DataError("fps must be positive")

    @property
    def n(self) -> int:
        return self.pred.shape[0]

    @property
    def horizon(self) -> int:
        return self.pred.shape[1]


def displacement(pair: PredictionPair) -> np.ndarray:
    """``n x H`` Euclidean distances between truth and prediction."""
    return np.linalg.norm(pair.truth - pair.pred, axis=2)


def ade(pair: PredictionPair) -> float:
    return float(displacement(pair).mean())


def fde(pair: PredictionPair) -> float:
    return float(displacement(pair)[:, -1].mean())


def mark_step(mark: float, fps: float, horizon: int) -> int:
    """1-based horizon step of a time mark in seconds."""
    step = mark * fps
    if abs(step - round(step)) > 1e-9 or round(step) < 1:
        raise RangeError(f"mark {mark}s at {fps} fps is not a whole positive step")
    step = int(round(step))
    if step > horizon:
        raise RangeError(f"mark {mark}s (step {step}) lies beyond the {horizon}-step horizon")
    return step


def rmse_curve(pair: PredictionPair, marks=DEFAULT_MARKS) -> dict[float, float]:
    """Root of the vehicle-mean squared displacement at each mark."""
    sq = np.sum((pair.truth - pair.pred) ** 2, axis=2)
    out = {}
    for m in marks:
        t = mark_step(m, pair.fps, pair.horizon)
        out[m] = float(np.sqrt(sq[:, t - 1].mean()))
    return out


@dataclass
class MetricsReport:
    ade: float
    fde: float
    rmse_at: dict = field(default_factory=dict)
    n: int = 0
    h: int = 0
    unit: str = "meter"

    @classmethod
    def from_pair(cls, pair: PredictionPair, marks=DEFAULT_MARKS) -> "MetricsReport":
        return cls(ade(pair), fde(pair), rmse_curve(pair, marks), pair.n, pair.horizon, pair.unit)

    def header(self) -> list[str]:
        return ["ade", "fde"] + [f"rmse@{_fmt_mark(m)}s" for m in self.rmse_at]

    def row(self) -> list[float]:
        return [self.ade, self.fde] + list(self.rmse_at.values())

    def to_csv(self) -> str:
        """Header ``ade,fde,rmse@1s,...`` followed by one data row."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        w.writerow([repr(v) for v in self.row()])
        return buf.getvalue()

    def to_dict(self) -> dict:
        d = dict(zip(self.header(), self.row()))
        d.update(n=self.n, h=self.h, unit=self.unit)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        rmse = {}
        for k, v in d.items():
            if k.startswith("rmse@") and k.endswith("s"):
                m = float(k[5:-1])
                rmse[int(m) if m.is_integer() else m] = v
        return cls(d["ade"], d["fde"], rmse, d.get("n", 0), d.get("h", 0), d.get("unit", "meter"))


def _fmt_mark(m) -> str:
    return str(int(m)) if float(m).is_integer() else str(m)
