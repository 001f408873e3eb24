"""Trajectory and annotation files, scene windows, and dataset splits.

File formats
------------
Trajectory CSV::

    # fps=5 unit=pixel frame_step=12
    frame,id,class,x,y
    0,7,car,120.0,65.0

The ``#`` metadata line is optional on input (defaults: fps 5, unit pixel,
frame_step 1). ``frame_step`` is the spacing of consecutive samples in frame
numbers, e.g. 12 after 60 -> 5 fps decimation that keeps source numbering.
Coordinates are written with ``repr`` and therefore round-trip exactly.

Annotation CSV header: ``frame,id,class,left,top,width,height``.

Windows file: JSON lines, one scene per line, keys ``anchor``, ``subjects``,
``observed`` (n x t_in x 2), ``future`` (n x H x 2), ``unit``, ``fps``.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import DataError, DataFormatError
from .pishguve import SceneBatchInput
from .tensorcore import RngStream

VEHICLE_CLASSES = ("car", "bus", "truck", "bike", "motor")
UNITS = ("pixel", "meter")
TRAJECTORY_COLUMNS = ("frame", "id", "class", "x", "y")
ANNOTATION_COLUMNS = ("frame", "id", "class", "left", "top", "width", "height")


@dataclass
class Track:
    """One vehicle's frame-ordered centre positions."""

    id: int
    cls: str
    frames: np.ndarray
    xy: np.ndarray
    fps: float = 5.0
    unit: str = "pixel"
    frame_step: int = 1
    conf: np.ndarray | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.int64)
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        if len(self.frames) != len(self.xy):
            raise DataError(f"track {self.id}: {len(self.frames)} frames but {len(self.xy)} positions")
        if len(self.frames) > 1 and np.any(np.diff(self.frames) <= 0):
            raise DataError(f"track {self.id}: frames must be strictly increasing")
        if self.cls not in VEHICLE_CLASSES:
            raise DataError(f"track {self.id}: unknown vehicle class {self.cls!r}")
        if self.unit not in UNITS:
            raise DataError(f"track {self.id}: unknown unit {self.unit!r}")

    def __len__(self) -> int:
        return len(self.frames)

    def select(self, mask) -> "Track":
        conf = None if self.conf is None else self.conf[mask]
        return Track(self.id, self.cls, self.frames[mask], self.xy[mask], self.fps, self.unit, self.frame_step, conf)

    def equals(self, other: "Track") -> bool:
        return (
            self.id == other.id
            and self.cls == other.cls
            and self.fps == other.fps
            and self.unit == other.unit
            and self.frame_step == other.frame_step
            and np.array_equal(self.frames, other.frames)
            and np.array_equal(self.xy, other.xy)
        )


@dataclass
class TrackSet:
    tracks: list[Track] = field(default_factory=list)

    def __iter__(self) -> Iterator[Track]:
        return iter(self.tracks)

    def __len__(self) -> int:
        return len(self.tracks)

    def ids(self) -> list[int]:
        return [t.id for t in self.tracks]

    def get(self, track_id: int) -> Track:
        for t in self.tracks:
            if t.id == track_id:
                return t
        raise KeyError(track_id)

    def equals(self, other: "TrackSet") -> bool:
        a = sorted(self.tracks, key=lambda t: t.id)
        b = sorted(other.tracks, key=lambda t: t.id)
        return len(a) == len(b) and all(x.equals(y) for x, y in zip(a, b))

    def meta(self) -> tuple[float, str, int]:
        """(fps, unit, frame_step) shared by every track."""
        keys = {(t.fps, t.unit, t.frame_step) for t in self.tracks}
        if len(keys) > 1:
            raise DataError(f"tracks disagree on fps/unit/frame_step: {sorted(keys)}")
        return keys.pop() if keys else (5.0, "pixel", 1)


@dataclass(frozen=True)
class AnnotationRecord:
    frame: int
    vehicle_id: int
    cls: str
    bbox: tuple[float, float, float, float]


@dataclass
class SceneWindow:
    anchor: int
    subjects: list[int]
    observed: np.ndarray
    future: np.ndarray
    unit: str = "pixel"
    fps: float = 5.0

    def __post_init__(self):
        self.observed = np.asarray(self.observed, dtype=np.float64)
        self.future = np.asarray(self.future, dtype=np.float64)
        n = len(self.subjects)
        if self.observed.shape[0] != n or self.future.shape[0] != n:
            raise DataError("window arrays need one row per subject")

    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def t_in(self) -> int:
        return self.observed.shape[1]

    @property
    def horizon(self) -> int:
        return self.future.shape[1]

    def to_dict(self) -> dict:
        return {
            "anchor": int(self.anchor),
            "subjects": [int(s) for s in self.subjects],
            "observed": self.observed.tolist(),
            "future": self.future.tolist(),
            "unit": self.unit,
            "fps": self.fps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneWindow":
        n = len(d["subjects"])
        obs = np.array(d["observed"], dtype=np.float64).reshape(n, -1, 2)
        fut = np.array(d["future"], dtype=np.float64).reshape(n, -1, 2)
        return cls(int(d["anchor"]), [int(s) for s in d["subjects"]], obs, fut, d["unit"], d["fps"])

    def equals(self, other: "SceneWindow") -> bool:
        return self.to_dict() == other.to_dict()


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.7, 0.2, 0.1)
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or min(self.ratios) <= 0 or abs(sum(self.ratios) - 1.0) > 1e-9:
            raise DataError(f"split ratios must be three positive numbers summing to 1, got {self.ratios}")


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _read_meta(lines: list[str]) -> dict:
    meta = {}
    for line in lines:
        if not line.startswith("#"):
            break
        for token in line[1:].split():
            if "=" in token:
                k, v = token.split("=", 1)
                meta[k.strip()] = v.strip()
    return meta


def _open_lines(path) -> list[str]:
    try:
        if str(path) == "-":
            import sys

            return sys.stdin.read().splitlines()
        return Path(path).read_text().splitlines()
    except OSError as exc:
        raise DataFormatError(f"{path}: {exc.strerror or exc}") from exc


def parse_trajectories(
    path,
    format_map: dict | None = None,
    *,
    fps: float | None = None,
    unit: str | None = None,
    frame_step: int | None = None,
    class_map: dict | None = None,
    coord_scale: float = 1.0,
    delimiter: str = ",",
) -> TrackSet:
    """Read a trajectory CSV into frame-sorted tracks.

    ``format_map`` maps the canonical names ``frame``, ``id``, ``x``, ``y``
    and optionally ``class`` onto the file's column names (NGSIM exports,
    for example). Missing ``class`` defaults every track to ``car``.
    ``class_map`` translates raw class labels; ``coord_scale`` multiplies
    coordinates (e.g. 0.3048 for feet to metres) and is never applied
    implicitly.
    """
    lines = _open_lines(path)
    meta = _read_meta(lines)
    body = [(i + 1, ln) for i, ln in enumerate(lines) if ln.strip() and not ln.startswith("#")]
    fps = float(fps if fps is not None else meta.get("fps", 5.0))
    unit = unit or meta.get("unit", "pixel")
    frame_step = int(frame_step if frame_step is not None else meta.get("frame_step", 1))
    if not body:
        return TrackSet()
    colmap = {c: c for c in TRAJECTORY_COLUMNS}
    if format_map:
        colmap.update(format_map)
    header = [h.strip() for h in next(csv.reader([body[0][1]], delimiter=delimiter))]
    pos = {}
    for key in ("frame", "id", "x", "y"):
        if colmap[key] not in header:
            raise DataFormatError(f"{path}: missing mandatory column {colmap[key]!r} (for {key})")
        pos[key] = header.index(colmap[key])
    cls_pos = header.index(colmap["class"]) if colmap.get("class") in header else None

    rows: dict[int, list] = defaultdict(list)
    seen: dict[tuple[int, int], int] = {}
    dupes = []
    for lineno, line in body[1:]:
        fields = next(csv.reader([line], delimiter=delimiter))
        try:
            frame = int(float(fields[pos["frame"]]))
            vid = int(float(fields[pos["id"]]))
            x = float(fields[pos["x"]]) * coord_scale
            y = float(fields[pos["y"]]) * coord_scale
            raw_cls = fields[cls_pos].strip() if cls_pos is not None else "car"
        except (ValueError, IndexError) as exc:
            raise DataFormatError(f"{path}:{lineno}: malformed row ({exc})") from exc
        if not (math.isfinite(x) and math.isfinite(y)):
            raise DataFormatError(f"{path}:{lineno}: non-finite coordinate")
        cls = class_map.get(raw_cls, raw_cls) if class_map else raw_cls
        if cls not in VEHICLE_CLASSES:
            raise DataError(f"{path}:{lineno}: unknown vehicle class {raw_cls!r}")
        if (vid, frame) in seen:
            dupes.append(f"id {vid} frame {frame} (lines {seen[(vid, frame)]} and {lineno})")
            continue
        seen[(vid, frame)] = lineno
        rows[vid].append((frame, x, y, cls))
    if dupes:
        raise DataError(f"{path}: duplicate (id, frame) rows: " + "; ".join(dupes))

    tracks = []
    for vid in sorted(rows):
        r = sorted(rows[vid])
        classes = [c for *_, c in r]
        cls = max(VEHICLE_CLASSES, key=classes.count)
        tracks.append(Track(vid, cls, [f for f, *_ in r], [(x, y) for _, x, y, _ in r], fps, unit, frame_step))
    return TrackSet(tracks)


def parse_annotations(path) -> list[AnnotationRecord]:
    lines = [ln for ln in _open_lines(path) if ln.strip() and not ln.startswith("#")]
    if not lines:
        return []
    reader = csv.reader(lines)
    header = [h.strip() for h in next(reader)]
    if header != list(ANNOTATION_COLUMNS):
        raise DataFormatError(f"{path}: expected header {','.join(ANNOTATION_COLUMNS)}, got {','.join(header)}")
    out = []
    for lineno, fields in enumerate(reader, start=2):
        try:
            frame, vid = int(fields[0]), int(fields[1])
            cls = fields[2].strip()
            left, top, width, height = (float(v) for v in fields[3:7])
        except (ValueError, IndexError) as exc:
            raise DataFormatError(f"{path}:{lineno}: malformed row ({exc})") from exc
        if width <= 0 or height <= 0:
            raise DataError(f"{path}:{lineno}: bounding box extents must be positive")
        if frame < 0:
            raise DataError(f"{path}:{lineno}: negative frame number")
        if cls not in VEHICLE_CLASSES:
            raise DataError(f"{path}:{lineno}: unknown vehicle class {cls!r}")
        out.append(AnnotationRecord(frame, vid, cls, (left, top, width, height)))
    return out


# ---------------------------------------------------------------------------
# Writing
# ---------------------------------------------------------------------------


def tracks_to_csv(tracks: TrackSet) -> str:
    fps, unit, step = tracks.meta()
    out = [f"# fps={fps!r} unit={unit} frame_step={step}", ",".join(TRAJECTORY_COLUMNS)]
    for t in sorted(tracks, key=lambda t: t.id):
        out += [f"{f},{t.id},{t.cls},{x!r},{y!r}" for f, (x, y) in zip(t.frames.tolist(), t.xy.tolist())]
    return "\n".join(out) + "\n"


def write_tracks(tracks: TrackSet, path) -> None:
    _write_text(path, tracks_to_csv(tracks))


def write_windows(windows: Iterable[SceneWindow], path) -> None:
    _write_text(path, "".join(json.dumps(w.to_dict()) + "\n" for w in windows))


def read_windows(path) -> list[SceneWindow]:
    out = []
    for lineno, line in enumerate(_open_lines(path), start=1):
        if not line.strip():
            continue
        try:
            out.append(SceneWindow.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise DataFormatError(f"{path}:{lineno}: bad window record ({exc})") from exc
    return out


def write_dataset(data, path) -> None:
    """Write a TrackSet as trajectory CSV or windows as JSON lines."""
    if isinstance(data, TrackSet):
        write_tracks(data, path)
    else:
        write_windows(data, path)


def _write_text(path, text: str) -> None:
    if str(path) == "-":
        import sys

        sys.stdout.write(text)
        return
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise DataFormatError(f"{path}: cannot write ({exc.strerror or exc})") from exc


# ---------------------------------------------------------------------------
# Windows and splits
# ---------------------------------------------------------------------------


def contiguous_runs(track: Track) -> list[tuple[int, int]]:
    """Half-open index ranges of maximal gap-free segments."""
    if len(track) == 0:
        return []
    breaks = np.nonzero(np.diff(track.frames) != track.frame_step)[0] + 1
    edges = [0, *breaks.tolist(), len(track)]
    return list(zip(edges[:-1], edges[1:]))


def build_windows(tracks: TrackSet, t_in: int, horizon: int, stride: int = 1) -> list[SceneWindow]:
    """Group co-present vehicles into observation + horizon windows.

    A vehicle joins the window anchored at frame ``f`` when it has a sample
    on every step of ``[f - (t_in-1)*step, f + horizon*step]``; positions
    are never interpolated across gaps. Anchors are taken every ``stride``
    steps. Output is sorted by anchor, subjects by id.
    """
    if t_in + horizon < 2 or t_in < 1 or horizon < 1:
        raise DataError("need t_in >= 1, horizon >= 1 and t_in + horizon >= 2")
    if stride < 1:
        raise DataError("stride must be >= 1")
    fps, unit, step = tracks.meta()
    by_anchor: dict[int, list[tuple[int, Track, int]]] = defaultdict(list)
    span = t_in + horizon
    for tr in tracks:
        for a, b in contiguous_runs(tr):
            for start in range(a, b - span + 1):
                anchor = int(tr.frames[start + t_in - 1])
                by_anchor[anchor].append((tr.id, tr, start))
    # stride is applied per phase class (anchor mod step) from its first anchor
    first_of_phase: dict[int, int] = {}
    for anchor in sorted(by_anchor):
        first_of_phase.setdefault(anchor % step, anchor)
    windows = []
    for anchor in sorted(by_anchor):
        if ((anchor - first_of_phase[anchor % step]) // step) % stride:
            continue
        members = sorted(by_anchor[anchor], key=lambda m: m[0])
        obs = np.stack([tr.xy[s : s + t_in] for _, tr, s in members])
        fut = np.stack([tr.xy[s + t_in : s + span] for _, tr, s in members])
        windows.append(SceneWindow(anchor, [m[0] for m in members], obs, fut, unit, fps))
    return windows


def make_relative(window: SceneWindow) -> SceneBatchInput:
    return SceneBatchInput.from_absolute(window.observed)


def split(windows: Sequence, spec: SplitSpec = SplitSpec()) -> tuple[list, list, list]:
    """Seeded shuffle, then contiguous train/val/test blocks.

    Validation and test sizes are floored; the remainder goes to training.
    """
    n = len(windows)
    order = RngStream(spec.seed, "split").permutation(n) if n else np.arange(0)
    n_val = int(math.floor(spec.ratios[1] * n + 1e-9))
    n_test = int(math.floor(spec.ratios[2] * n + 1e-9))
    n_train = n - n_val - n_test
    pick = [windows[i] for i in order]
    return pick[:n_train], pick[n_train : n_train + n_val], pick[n_train + n_val :]


def parse_many(paths, jobs: int = 1, **kwargs) -> list[tuple[str, TrackSet]]:
    """Parse several trajectory files; results come back in sorted path order."""
    from concurrent.futures import ProcessPoolExecutor
    from functools import partial

    paths = sorted(str(p) for p in paths)
    if jobs <= 1 or len(paths) <= 1:
        sets = [parse_trajectories(p, **kwargs) for p in paths]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            sets = list(pool.map(partial(parse_trajectories, **kwargs), paths))
    return list(zip(paths, sets))
