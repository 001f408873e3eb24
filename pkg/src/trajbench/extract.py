"""Tracker output to filtered, downsampled trajectories.

Input is a MOT-style CSV with header
``frame,id,left,top,width,height,confidence,class``. Stages run in a fixed
order: assemble, confidence, duration, stationary, receding, downsample.
Filters only select whole tracks; positions are never modified.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter, defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataio import VEHICLE_CLASSES, Track, TrackSet, _open_lines
from .errors import ConfigError, DataError, DataFormatError

MOT_COLUMNS = ("frame", "id", "left", "top", "width", "height", "confidence", "class")


@dataclass(frozen=True)
class TrackObservation:
    frame: int
    track_id: int
    cls: str
    bbox: tuple[float, float, float, float]
    confidence: float = 1.0

    def __post_init__(self):
        if self.bbox[2] <= 0 or self.bbox[3] <= 0:
            raise DataError(f"track {self.track_id} frame {self.frame}: bbox extents must be positive")
        if not 0.0 <= self.confidence <= 1.0:
            raise DataError(f"track {self.track_id} frame {self.frame}: confidence outside [0, 1]")

    @property
    def center(self) -> tuple[float, float]:
        left, top, w, h = self.bbox
        return left + w / 2, top + h / 2


@dataclass(frozen=True)
class FilterConfig:
    source_fps: int = 60
    target_fps: int = 5
    min_duration_s: float = 4.0
    stationary_max_disp: float = 20.0
    approach_vector: tuple[float, float] | None = None
    min_confidence: float = 0.0
    unit: str = "pixel"
    # "track": decimate from each track's first frame; "grid": keep frames on
    # a global multiple of the decimation factor so tracks share anchors
    align: str = "track"

    def __post_init__(self):
        if self.source_fps <= 0 or self.target_fps <= 0:
            raise ConfigError("frame rates must be positive")
        if not self.min_duration_s > 0:
            raise ConfigError("min_duration_s must be positive")
        if self.stationary_max_disp < 0:
            raise ConfigError("stationary_max_disp must be non-negative")
        if not 0.0 <= self.min_confidence <= 1.0:
            raise ConfigError("min_confidence must lie in [0, 1]")
        if self.approach_vector is not None:
            v = tuple(float(c) for c in self.approach_vector)
            if len(v) != 2 or abs(math.hypot(*v) - 1.0) > 1e-9:
                raise ConfigError(f"approach_vector must be a 2D unit vector, got {self.approach_vector}")
            object.__setattr__(self, "approach_vector", v)
        if self.align not in ("track", "grid"):
            raise ConfigError(f"align must be 'track' or 'grid', got {self.align!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["approach_vector"] is not None:
            d["approach_vector"] = list(d["approach_vector"])
        return d


@dataclass
class StageCount:
    stage: str
    kept: int
    dropped: int


@dataclass
class StatsReport:
    input_tracks: int = 0
    stages: list[StageCount] = field(default_factory=list)
    class_pct: dict[str, float] = field(default_factory=dict)

    @property
    def output_tracks(self) -> int:
        return self.stages[-1].kept if self.stages else self.input_tracks

    def dropped(self, stage: str) -> int:
        for s in self.stages:
            if s.stage == stage:
                return s.dropped
        raise KeyError(stage)

    def to_dict(self) -> dict:
        return {
            "input_tracks": self.input_tracks,
            "output_tracks": self.output_tracks,
            "stages": [asdict(s) for s in self.stages],
            "class_pct": self.class_pct,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def parse_observations(path) -> list[TrackObservation]:
    lines = [ln for ln in _open_lines(path) if ln.strip() and not ln.startswith("#")]
    if not lines:
        return []
    rows = list(csv.reader(lines))
    header = [h.strip() for h in rows[0]]
    if header != list(MOT_COLUMNS):
        raise DataFormatError(f"{path}: expected header {','.join(MOT_COLUMNS)}, got {','.join(header)}")
    out = []
    for lineno, r in enumerate(rows[1:], start=2):
        try:
            frame, tid = int(float(r[0])), int(float(r[1]))
            box = tuple(float(v) for v in r[2:6])
            conf = float(r[6])
            cls = r[7].strip()
        except (ValueError, IndexError) as exc:
            raise DataFormatError(f"{path}:{lineno}: malformed row ({exc})") from exc
        if cls not in VEHICLE_CLASSES:
            raise DataError(f"{path}:{lineno}: unknown vehicle class {cls!r}")
        try:
            out.append(TrackObservation(frame, tid, cls, box, conf))
        except DataError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    return out


def assemble(observations, fps: float = 60, unit: str = "pixel") -> TrackSet:
    """Group detections by id; position is the bounding-box centre."""
    groups: dict[int, dict[int, TrackObservation]] = defaultdict(dict)
    for ob in observations:
        if ob.frame in groups[ob.track_id]:
            raise DataError(f"duplicate observation for id {ob.track_id} at frame {ob.frame}")
        groups[ob.track_id][ob.frame] = ob
    tracks = []
    for tid in sorted(groups):
        obs = [groups[tid][f] for f in sorted(groups[tid])]
        votes = Counter(o.cls for o in obs)
        # ties resolve in taxonomy order so the result never depends on row order
        cls = max(VEHICLE_CLASSES, key=lambda c: votes[c])
        tracks.append(
            Track(
                tid,
                cls,
                [o.frame for o in obs],
                [o.center for o in obs],
                fps=fps,
                unit=unit,
                conf=np.array([o.confidence for o in obs]),
            )
        )
    return TrackSet(tracks)


def _keep(tracks: TrackSet, pred) -> TrackSet:
    return TrackSet([t for t in tracks if pred(t)])


def filter_confidence(tracks: TrackSet, cfg: FilterConfig) -> TrackSet:
    """Drop tracks whose mean detection confidence is below the threshold."""
    return _keep(tracks, lambda t: t.conf is None or float(np.mean(t.conf)) >= cfg.min_confidence)


def filter_duration(tracks: TrackSet, cfg: FilterConfig) -> TrackSet:
    # frames keep source numbering, so the span is always measured at source_fps
    return _keep(tracks, lambda t: len(t) > 0 and (t.frames[-1] - t.frames[0]) / cfg.source_fps >= cfg.min_duration_s)


def filter_stationary(tracks: TrackSet, cfg: FilterConfig) -> TrackSet:
    def moves(t: Track) -> bool:
        return len(t) > 0 and float(np.max(np.linalg.norm(t.xy - t.xy[0], axis=1))) >= cfg.stationary_max_disp

    return _keep(tracks, moves)


def filter_receding(tracks: TrackSet, cfg: FilterConfig) -> TrackSet:
    if cfg.approach_vector is None:
        raise ConfigError("filter_receding needs approach_vector")
    ax, ay = cfg.approach_vector

    def approaching(t: Track) -> bool:
        dx, dy = t.xy[-1] - t.xy[0]
        return dx * ax + dy * ay >= 0

    return _keep(tracks, approaching)


def downsample(tracks: TrackSet, cfg: FilterConfig) -> TrackSet:
    """Decimate to ``target_fps`` keeping the original frame numbers."""
    if cfg.source_fps % cfg.target_fps:
        raise ConfigError(f"source fps {cfg.source_fps} is not a multiple of target fps {cfg.target_fps}")
    k = cfg.source_fps // cfg.target_fps
    out = []
    for t in tracks:
        period = k * t.frame_step
        if len(t) == 0:
            continue
        origin = 0 if cfg.align == "grid" else t.frames[0]
        sub = t.select((t.frames - origin) % period == 0)
        if len(sub) == 0:
            continue
        sub.fps = float(cfg.target_fps)
        sub.frame_step = period
        out.append(sub)
    return TrackSet(out)


FILTER_STAGES = (
    ("confidence", filter_confidence),
    ("duration", filter_duration),
    ("stationary", filter_stationary),
    ("receding", filter_receding),
    ("downsample", downsample),
)


def class_distribution(tracks: TrackSet) -> dict[str, float]:
    if len(tracks) == 0:
        return {}
    counts = Counter(t.cls for t in tracks)
    return {c: 100.0 * counts[c] / len(tracks) for c in VEHICLE_CLASSES if counts[c]}


def run_pipeline(source, cfg: FilterConfig) -> tuple[TrackSet, StatsReport]:
    """Run every stage on a MOT CSV path or a list of observations."""
    obs = parse_observations(source) if isinstance(source, (str, Path)) else list(source)
    tracks = assemble(obs, fps=cfg.source_fps, unit=cfg.unit)
    report = StatsReport(input_tracks=len(tracks))
    for name, stage in FILTER_STAGES:
        before = len(tracks)
        tracks = stage(tracks, cfg)
        report.stages.append(StageCount(name, len(tracks), before - len(tracks)))
    report.class_pct = class_distribution(tracks)
    return tracks, report


def run_many(paths, cfg: FilterConfig, jobs: int = 1) -> list[tuple[str, TrackSet, StatsReport]]:
    """Run the pipeline per file; results come back in sorted path order."""
    paths = sorted(str(p) for p in paths)
    if jobs <= 1 or len(paths) <= 1:
        results = [run_pipeline(p, cfg) for p in paths]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_pipeline, paths, [cfg] * len(paths)))
    return [(p, ts, rep) for p, (ts, rep) in zip(paths, results)]
