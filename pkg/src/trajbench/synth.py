"""Deterministic synthetic highway scenes.

Each vehicle drives along +x with piecewise-constant acceleration that is
redrawn every two seconds. A fraction of vehicles start on an on-ramp and
merge into the outer lane along a sigmoid. Gaussian noise and an optional
affine camera view are applied last.

Per-step displacements and start positions are snapped to a 2**-10 grid, so
noise-free constant-speed tracks are exactly affine in floating point and a
constant-velocity extrapolation reproduces them with zero error.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, replace

import numpy as np

from .dataio import Track, TrackSet, tracks_to_csv
from .errors import ConfigError
from .tensorcore import RngStream

GRID = 2.0**-10
ACCEL_PERIOD_S = 2.0
VIEWS = ("identity", "high_angle_shear", "eye_level_scale")


@dataclass(frozen=True)
class SynthConfig:
    lanes: int = 3
    lane_width: float = 3.5
    n_vehicles: int = 8
    duration_s: float = 30.0
    fps: float = 5.0
    speed_range: tuple[float, float] = (8.0, 14.0)
    accel_range: tuple[float, float] = (-1.5, 1.5)
    merge_fraction: float = 0.4
    merge_lateral: float = 3.5
    merge_steepness: float = 1.5
    noise_sigma: float = 0.3
    seed: int = 0
    view: str = "identity"
    # high_angle_shear: (shear, y_scale); eye_level_scale: (x_scale, y_scale)
    view_params: tuple[float, ...] = ()
    truck_fraction: float = 0.1
    spacing: float = 12.0

    def __post_init__(self):
        for name in ("speed_range", "accel_range", "view_params"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.lanes < 1 or self.n_vehicles < 1:
            raise ConfigError("lanes and n_vehicles must be >= 1")
        if self.n_samples < 1:
            raise ConfigError("duration_s * fps must give at least one sample")
        if self.fps <= 0 or self.lane_width <= 0:
            raise ConfigError("fps and lane_width must be positive")
        for name in ("speed_range", "accel_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} must be ordered (lo <= hi)")
        if self.speed_range[0] < 0:
            raise ConfigError("speeds must be non-negative")
        if not 0.0 <= self.merge_fraction <= 1.0 or not 0.0 <= self.truck_fraction <= 1.0:
            raise ConfigError("fractions must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.view not in VIEWS:
            raise ConfigError(f"view must be one of {VIEWS}")
        if self.view != "identity" and len(self.view_params) != 2:
            raise ConfigError(f"view {self.view} takes two parameters")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * self.fps))

    @property
    def unit(self) -> str:
        return "meter" if self.view == "identity" else "pixel"

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synth keys: {sorted(unknown)}")
        return cls(**d)


def _snap(v):
    return np.round(np.asarray(v) / GRID) * GRID


def _view_matrix(cfg: SynthConfig) -> np.ndarray:
    if cfg.view == "high_angle_shear":
        shear, ys = cfg.view_params
        return np.array([[1.0, shear], [0.0, ys]])
    if cfg.view == "eye_level_scale":
        xs, ys = cfg.view_params
        return np.array([[xs, 0.0], [0.0, ys]])
    return np.eye(2)


def _vehicle(cfg: SynthConfig, i: int, rng: RngStream) -> Track:
    n = cfg.n_samples
    dt = 1.0 / cfg.fps
    per = max(1, int(round(ACCEL_PERIOD_S * cfg.fps)))
    v0 = rng.uniform(*cfg.speed_range)
    n_seg = -(-n // per)
    accel = np.repeat(rng.uniform(cfg.accel_range[0], cfg.accel_range[1], shape=n_seg), per)[: n - 1]
    speed = np.maximum(v0 + np.concatenate([[0.0], np.cumsum(accel * dt)]), 0.0)
    step = _snap(speed[:-1] * dt)
    x0 = _snap(i * cfg.spacing + rng.uniform(0.0, cfg.spacing / 2))
    x = x0 + np.concatenate([[0.0], np.cumsum(step)])

    merges = rng.random() < cfg.merge_fraction
    lane = int(rng.random() * cfg.lanes) if not merges else 0
    y_lane = _snap((lane + 0.5) * cfg.lane_width)
    y = np.full(n, y_lane)
    if merges:
        t = np.arange(n) * dt
        t_mid = rng.uniform(0.25, 0.75) * cfg.duration_s
        y = y_lane - cfg.merge_lateral * (1.0 - 1.0 / (1.0 + np.exp(-cfg.merge_steepness * (t - t_mid))))
    xy = np.stack([x, y], axis=1)
    if cfg.noise_sigma > 0:
        xy = xy + rng.normal(0.0, cfg.noise_sigma, shape=xy.shape)
    if cfg.view != "identity":
        xy = xy @ _view_matrix(cfg).T
    cls = "truck" if rng.random() < cfg.truck_fraction else "car"
    return Track(i + 1, cls, np.arange(n), xy, fps=cfg.fps, unit=cfg.unit)


def generate(cfg: SynthConfig) -> TrackSet:
    root = RngStream(cfg.seed, "synth")
    return TrackSet([_vehicle(cfg, i, root.child(f"vehicle-{i}")) for i in range(cfg.n_vehicles)])


def standard_suites() -> dict[str, SynthConfig]:
    return {
        # constant speed, no noise: constant-velocity extrapolation is exact
        "linear-clean": SynthConfig(
            n_vehicles=6, duration_s=20.0, accel_range=(0.0, 0.0), merge_fraction=0.0, noise_sigma=0.0, seed=11
        ),
        "merge-noisy": SynthConfig(n_vehicles=10, duration_s=40.0, seed=7),
        # 47 co-present samples -> 8 windows at t_in=15, horizon=25
        "tiny-overfit": SynthConfig(n_vehicles=3, duration_s=9.4, noise_sigma=0.05, merge_fraction=0.34, seed=3),
    }


def preset(name: str, **overrides) -> SynthConfig:
    suites = standard_suites()
    if name not in suites:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(suites)}")
    return replace(suites[name], **overrides) if overrides else suites[name]


def digest(tracks: TrackSet) -> str:
    """sha256 of the trajectory CSV text."""
    return hashlib.sha256(tracks_to_csv(tracks).encode()).hexdigest()
