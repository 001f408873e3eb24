"""Shared hand-built inputs."""

from pathlib import Path

MOT_HEADER = "frame,id,left,top,width,height,confidence,class"


def _rows(tid, frames, pos, conf=0.9, cls="car", w=40.0, h=30.0):
    out = []
    for f in frames:
        cx, cy = pos(f)
        out.append(f"{f},{tid},{cx - w / 2!r},{cy - h / 2!r},{w!r},{h!r},{conf!r},{cls}")
    return out


def five_track_mot(path: Path) -> Path:
    """One survivor plus one track per drop reason, at 60 fps.

    Approach direction is +y.

    * id 1: survivor, frames 0..240 (exactly 4.000 s), moves +y
    * id 2: frames 0..239 (3.983 s), moves +y -> duration drop
    * id 3: jitters within 3 units -> stationary drop
    * id 4: moves -y -> receding drop
    * id 5: moves +y but mean confidence 0.2 -> confidence drop
    """
    rows = [MOT_HEADER]
    rows += _rows(1, range(0, 241), lambda f: (100.0, 50.0 + f))
    rows += _rows(2, range(0, 240), lambda f: (300.0, 50.0 + f))
    rows += _rows(3, range(0, 300), lambda f: (500.0 + (f % 3), 80.0 + (f % 2)))
    rows += _rows(4, range(0, 300), lambda f: (700.0, 400.0 - f))
    rows += _rows(5, range(0, 300), lambda f: (900.0, 50.0 + f), conf=0.2)
    path.write_text("\n".join(rows) + "\n")
    return path
