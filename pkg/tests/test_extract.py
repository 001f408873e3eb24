import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from trajbench import extract
from trajbench.dataio import Track, TrackSet
from trajbench.errors import ConfigError, DataError, DataFormatError
from trajbench.extract import FilterConfig, TrackObservation

from fixtures import MOT_HEADER, five_track_mot

UP = (0.0, 1.0)


def track(tid, frames, xy, fps=60.0):
    return Track(tid, "car", np.asarray(frames), np.asarray(xy, dtype=float), fps=fps)


def moving(tid, n, fps=60.0, start=0):
    frames = np.arange(start, start + n)
    return track(tid, frames, np.stack([np.zeros(n), frames * 1.0], axis=1), fps)


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------


def test_bbox_centre():
    ob = TrackObservation(0, 1, "car", (100.0, 50.0, 40.0, 30.0))
    assert ob.center == (120.0, 65.0)
    ts = extract.assemble([ob])
    np.testing.assert_array_equal(ts.get(1).xy, [[120.0, 65.0]])


def test_interleaved_ids_are_grouped_and_sorted():
    obs = [
        TrackObservation(2, 1, "car", (0, 0, 2, 2)),
        TrackObservation(0, 2, "bus", (0, 0, 2, 2)),
        TrackObservation(0, 1, "car", (0, 0, 2, 2)),
        TrackObservation(1, 2, "bus", (0, 0, 2, 2)),
    ]
    ts = extract.assemble(obs)
    assert ts.ids() == [1, 2]
    assert ts.get(1).frames.tolist() == [0, 2] and ts.get(2).frames.tolist() == [0, 1]


def test_majority_class():
    labels = ["car", "truck", "car", "car"]
    ts = extract.assemble([TrackObservation(f, 1, c, (0, 0, 1, 1)) for f, c in enumerate(labels)])
    assert ts.get(1).cls == "car"


def test_duplicate_observation_rejected():
    obs = [TrackObservation(0, 1, "car", (0, 0, 1, 1))] * 2
    with pytest.raises(DataError):
        extract.assemble(obs)


def test_observation_sanity():
    with pytest.raises(DataError):
        TrackObservation(0, 1, "car", (0, 0, 0, 1))
    with pytest.raises(DataError):
        TrackObservation(0, 1, "car", (0, 0, 1, 1), confidence=1.5)


def test_mot_parsing(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text(MOT_HEADER + "\n3,9,10,20,4,6,0.75,truck\n")
    (ob,) = extract.parse_observations(p)
    assert (ob.frame, ob.track_id, ob.cls, ob.bbox, ob.confidence) == (3, 9, "truck", (10.0, 20.0, 4.0, 6.0), 0.75)
    p.write_text("frame,id,x,y\n")
    with pytest.raises(DataFormatError):
        extract.parse_observations(p)
    p.write_text(MOT_HEADER + "\n3,9,10,20,0,6,0.75,truck\n")
    with pytest.raises(DataError, match=":2:"):
        extract.parse_observations(p)


# ---------------------------------------------------------------------------
# Filters
# ---------------------------------------------------------------------------


def test_duration_boundary():
    cfg = FilterConfig()
    kept = extract.filter_duration(TrackSet([moving(1, 241), moving(2, 240), moving(3, 1)]), cfg)
    assert kept.ids() == [1]


def test_stationary_rule():
    cfg = FilterConfig(stationary_max_disp=20.0)
    rng = np.random.default_rng(0)
    jitter = track(1, range(100), 100 + rng.uniform(-1.5, 1.5, (100, 2)))
    run = track(2, range(100), np.stack([np.linspace(0, 500, 100), np.zeros(100)], axis=1))
    exact = track(3, range(2), [[0.0, 0.0], [12.0, 16.0]])
    assert extract.filter_stationary(TrackSet([jitter, run, exact]), cfg).ids() == [2, 3]


def test_receding_rule():
    cfg = FilterConfig(approach_vector=UP)
    away = track(1, range(2), [[0.0, 0.0], [2.0, -50.0]])
    towards = track(2, range(2), [[0.0, 0.0], [0.0, 80.0]])
    still = track(3, range(2), [[5.0, 5.0], [5.0, 5.0]])
    assert extract.filter_receding(TrackSet([away, towards, still]), cfg).ids() == [2, 3]


def test_receding_needs_direction():
    with pytest.raises(ConfigError):
        extract.filter_receding(TrackSet(), FilterConfig())


def test_confidence_uses_track_mean():
    ts = extract.assemble(
        [TrackObservation(f, 1, "car", (0, 0, 1, 1), c) for f, c in enumerate([0.9, 0.1, 0.8])]
        + [TrackObservation(0, 2, "car", (0, 0, 1, 1), 0.3)]
    )
    assert extract.filter_confidence(ts, FilterConfig(min_confidence=0.5)).ids() == [1]


def test_downsample_keeps_every_twelfth_sample():
    out = extract.downsample(TrackSet([moving(1, 61, start=7)]), FilterConfig())
    t = out.get(1)
    assert t.frames.tolist() == [7, 19, 31, 43, 55, 67]
    assert (t.fps, t.frame_step) == (5.0, 12)


def test_downsample_identity_and_errors():
    ts = TrackSet([moving(1, 10, fps=5.0)])
    same = extract.downsample(ts, FilterConfig(source_fps=5, target_fps=5))
    assert same.equals(ts)
    with pytest.raises(ConfigError):
        extract.downsample(ts, FilterConfig(source_fps=60, target_fps=7))


def test_grid_alignment_shares_frames():
    ts = TrackSet([moving(1, 100, start=3), moving(2, 100, start=5)])
    out = extract.downsample(ts, FilterConfig(align="grid"))
    assert all(f % 12 == 0 for t in out for f in t.frames)


@given(st.integers(1, 200), st.integers(0, 50), st.sampled_from([(60, 20, 5), (60, 30, 10), (30, 15, 5), (12, 6, 1)]))
def test_downsample_composes(n, start, rates):
    a, b, c = rates
    ts = TrackSet([moving(1, n, fps=a, start=start)])
    two = extract.downsample(extract.downsample(ts, FilterConfig(source_fps=a, target_fps=b)), FilterConfig(source_fps=b, target_fps=c))
    one = extract.downsample(ts, FilterConfig(source_fps=a, target_fps=c))
    assert two.equals(one)


@st.composite
def raw_sets(draw):
    tracks = []
    for tid in range(draw(st.integers(0, 5))):
        n = draw(st.integers(1, 400))
        step = draw(st.floats(-2, 2))
        frames = np.arange(n)
        tracks.append(track(tid, frames, np.stack([frames * 0.1, frames * step], axis=1)))
    return TrackSet(tracks)


@given(raw_sets())
def test_filters_are_idempotent_and_select_only(ts):
    cfg = FilterConfig(approach_vector=UP)
    for stage in (extract.filter_confidence, extract.filter_duration, extract.filter_stationary, extract.filter_receding):
        once = stage(ts, cfg)
        assert stage(once, cfg).equals(once)
        assert len(once) <= len(ts)
        for t in once:
            assert t.equals(ts.get(t.id))


def test_filter_config_validation():
    with pytest.raises(ConfigError):
        FilterConfig(approach_vector=(1.0, 1.0))
    with pytest.raises(ConfigError):
        FilterConfig(min_duration_s=0)
    with pytest.raises(ConfigError):
        FilterConfig(align="nearest")


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


def test_five_track_fixture(tmp_path):
    cfg = FilterConfig(approach_vector=UP, min_confidence=0.5)
    tracks, report = extract.run_pipeline(five_track_mot(tmp_path / "mot.csv"), cfg)
    assert tracks.ids() == [1]
    assert {s.stage: s.dropped for s in report.stages} == {
        "confidence": 1, "duration": 1, "stationary": 1, "receding": 1, "downsample": 0,
    }
    assert len(tracks.get(1)) == 21
    assert report.class_pct == {"car": 100.0}
    assert report.to_dict()["output_tracks"] == 1


def test_empty_pipeline(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text(MOT_HEADER + "\n")
    tracks, report = extract.run_pipeline(p, FilterConfig(approach_vector=UP))
    assert len(tracks) == 0 and report.input_tracks == 0
    assert all(s.dropped == 0 for s in report.stages) and report.class_pct == {}


def test_class_distribution():
    ts = TrackSet([Track(i, c, [0], [[0.0, 0.0]]) for i, c in enumerate(["car"] * 9 + ["bus"])])
    assert extract.class_distribution(ts) == {"car": 90.0, "bus": 10.0}


def test_run_many_orders_by_path(tmp_path):
    five_track_mot(tmp_path / "b.csv")
    five_track_mot(tmp_path / "a.csv")
    out = extract.run_many([tmp_path / "b.csv", tmp_path / "a.csv"], FilterConfig(approach_vector=UP, min_confidence=0.5), jobs=2)
    assert [p.rsplit("/", 1)[-1] for p, _, _ in out] == ["a.csv", "b.csv"]
    assert out[0][1].equals(out[1][1])
