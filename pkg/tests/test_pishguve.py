import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from trajbench import pishguve as pv
from trajbench import tensorcore as tc
from trajbench.errors import ConfigError, DataError, DataFormatError
from trajbench.tensorcore import RngStream, Tensor

from conftest import SMALL, TINY


def scene(rng, n, t):
    return pv.SceneBatchInput.from_absolute(rng.normal(size=(n, t, 2)) * 3.0)


def randomise_biases(params, rng):
    """Fresh biases are zero, which puts ReLU inputs exactly on their kink."""
    for name, p in params.items():
        if name.endswith(("B", "B1", "B2", "B3", "B4", "theta")):
            p.data[...] = rng.uniform(-0.5, 0.5, p.shape)
    return params


# ---------------------------------------------------------------------------
# Configuration and parameters
# ---------------------------------------------------------------------------


def test_default_parameter_count_is_frozen():
    cfg = pv.ModelConfig()
    assert pv.count_params(cfg) == 133319
    assert pv.init_params(cfg, RngStream(0)).count() == 133319


def test_tiny_parameter_count():
    assert pv.count_params(TINY) == 357


@given(
    st.integers(2, 6),
    st.integers(1, 5),
    st.integers(1, 9),
    st.integers(1, 9),
    st.integers(1, 9),
    st.tuples(st.integers(1, 9), st.integers(1, 9), st.integers(1, 9)),
    st.integers(1, 8),
    st.sampled_from([(1, 1), (3, 3), (3, 1), (5, 3)]),
)
def test_closed_form_count_matches_allocated_tensors(t, h, d, hid, lw, ch, red, ker):
    cfg = pv.ModelConfig(
        t_in=t, horizon=h, latent_dim=d, node_mlp_hidden=hid, lad_linear_dim=lw,
        cnn_channels=ch, channel_attn_reduction=red, spatial_attn_kernel=ker,
    )
    assert pv.count_params(cfg) == pv.init_params(cfg, RngStream(0)).count()


def test_attention_hidden_never_below_one():
    assert pv.attention_hidden(4, 8) == 1
    assert pv.attention_hidden(128, 8) == 16


@pytest.mark.parametrize(
    "bad",
    [
        {"t_in": 1},
        {"horizon": 0},
        {"latent_dim": 0},
        {"cnn_channels": (4, 4)},
        {"spatial_attn_kernel": (2, 3)},
        {"p_attn": 1.0},
        {"p_lin": -0.1},
        {"leaky_slope": 0.0},
    ],
)
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        pv.ModelConfig(**bad)


def test_config_dict_round_trip_and_unknown_keys():
    cfg = pv.ModelConfig(cnn_channels=(8, 6, 4))
    assert pv.ModelConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ConfigError):
        pv.ModelConfig.from_dict({"latent": 3})


def test_init_is_deterministic_and_bounded():
    a = pv.init_params(SMALL, RngStream(5, "init"))
    b = pv.init_params(SMALL, RngStream(5, "init"))
    assert a.equals(b) and a.checksum() == b.checksum()
    for name, shape, fan in pv.param_shapes(SMALL):
        data = a[name].data
        assert data.shape == shape
        if fan:
            assert np.abs(data).max() <= 1 / np.sqrt(fan)
        else:
            assert not data.any()


# ---------------------------------------------------------------------------
# Inputs
# ---------------------------------------------------------------------------


def test_relative_coordinates_start_at_zero(np_rng):
    b = scene(np_rng, 3, 4)
    np.testing.assert_array_equal(b.dV[:, 0], 0.0)


def test_relative_coordinates_of_linear_motion():
    t = np.arange(5.0)
    V = np.stack([5 + t, 7 + 2 * t], axis=1)[None]
    b = pv.SceneBatchInput.from_absolute(V)
    np.testing.assert_array_equal(b.dV[0], np.stack([t, 2 * t], axis=1))


def test_inconsistent_relative_input_rejected(np_rng):
    V = np_rng.normal(size=(2, 3, 2))
    with pytest.raises(DataError):
        pv.SceneBatchInput(V, V.copy())
    with pytest.raises(DataError):
        pv.SceneBatchInput.from_absolute(np.zeros((0, 3, 2)))


def test_wrong_observation_length_rejected(np_rng):
    params = pv.init_params(TINY, RngStream(0))
    with pytest.raises(DataError):
        pv.forward(scene(np_rng, 2, 5), params, TINY)


# ---------------------------------------------------------------------------
# Forward behaviour
# ---------------------------------------------------------------------------


def test_output_shape_and_finiteness(np_rng):
    params = pv.init_params(SMALL, RngStream(1))
    out = pv.forward(scene(np_rng, 5, SMALL.t_in), params, SMALL)
    assert out.shape == (5, SMALL.horizon, 2)
    assert np.isfinite(out.data).all()


@given(st.integers(1, 8), st.integers(0, 10_000))
def test_permutation_equivariance(n, seed):
    rng = np.random.default_rng(seed)
    params = randomise_biases(pv.init_params(SMALL, RngStream(seed)), rng)
    b = scene(rng, n, SMALL.t_in)
    perm = rng.permutation(n)
    out = pv.forward(b, params, SMALL).data
    out_p = pv.forward(b.permuted(perm), params, SMALL).data
    np.testing.assert_allclose(out_p, out[perm], rtol=0, atol=1e-9)


def test_single_vehicle_gin_is_node_branch(np_rng):
    params = randomise_biases(pv.init_params(SMALL, RngStream(2)), np_rng)
    N = pv.embed(scene(np_rng, 1, SMALL.t_in), params, SMALL)
    np.testing.assert_array_equal(pv.gin(N, params, SMALL).data, pv.node_branch(N, params).data)


def test_self_loops_change_single_vehicle_output(np_rng):
    params = randomise_biases(pv.init_params(SMALL, RngStream(2)), np_rng)
    N = pv.embed(scene(np_rng, 1, SMALL.t_in), params, SMALL)
    with_self = dataclasses.replace(SMALL, include_self_in_neighbors=True)
    assert not np.array_equal(pv.gin(N, params, with_self).data, pv.node_branch(N, params).data)


def test_neighbour_sum_matches_manual_loop(np_rng):
    params = randomise_biases(pv.init_params(SMALL, RngStream(3)), np_rng)
    N = pv.embed(scene(np_rng, 4, SMALL.t_in), params, SMALL)
    lad_out = pv.lad(pv.lad(N, params, "lad1", SMALL), params, "lad2", SMALL).data
    node = pv.node_branch(N, params).data
    manual = np.stack([node[i] + sum(lad_out[j] for j in range(4) if j != i) for i in range(4)])
    np.testing.assert_allclose(pv.gin(N, params, SMALL).data, manual, rtol=0, atol=1e-12)


def test_collated_scenes_match_separate_runs(np_rng):
    params = randomise_biases(pv.init_params(SMALL, RngStream(4)), np_rng)
    scenes = [scene(np_rng, n, SMALL.t_in) for n in (1, 3, 2)]
    joint = pv.forward(pv.collate(scenes), params, SMALL).data
    separate = np.concatenate([pv.forward(s, params, SMALL).data for s in scenes])
    np.testing.assert_allclose(joint, separate, rtol=0, atol=1e-12)


def test_train_mode_dropout_is_reproducible(np_rng):
    params = pv.init_params(SMALL, RngStream(5))
    b = scene(np_rng, 3, SMALL.t_in)
    a1 = pv.forward(b, params, SMALL, "train", RngStream(8, "dropout")).data
    a2 = pv.forward(b, params, SMALL, "train", RngStream(8, "dropout")).data
    a3 = pv.forward(b, params, SMALL, "train", RngStream(9, "dropout")).data
    ev = pv.forward(b, params, SMALL).data
    np.testing.assert_array_equal(a1, a2)
    assert not np.array_equal(a1, a3)
    assert not np.array_equal(a1, ev)


def test_mse_loss_value():
    pred = Tensor(np.zeros((1, 2, 2)))
    target = np.array([[[3.0, 4.0], [0.0, 0.0]]])
    assert pv.mse_loss(pred, target).item() == pytest.approx(25.0 / 4)


# ---------------------------------------------------------------------------
# Gradients of the model's building blocks
# ---------------------------------------------------------------------------


def _smooth_check(f, params, eps=1e-5):
    assert tc.smooth_neighbourhood(f, params, eps)
    return tc.grad_check(f, params, eps)


def test_channel_attention_gradients(np_rng):
    cfg = SMALL
    params = randomise_biases(pv.init_params(cfg, RngStream(6)), np_rng)
    X = Tensor(np_rng.normal(size=(2, cfg.cnn_channels[0], 3, 2)), requires_grad=True)
    w = Tensor(np_rng.normal(size=X.shape))
    f = lambda: tc.sum(tc.mul(pv.channel_attention(X, params, "head.conv1"), w))  # noqa: E731
    names = [f"head.conv1.ca.{k}" for k in ("W1", "B1", "W2", "B2")]
    assert _smooth_check(f, [X] + [params[n] for n in names]) < 1e-5


def test_spatial_attention_gradients(np_rng):
    cfg = SMALL
    params = randomise_biases(pv.init_params(cfg, RngStream(7)), np_rng)
    X = Tensor(np_rng.normal(size=(2, cfg.cnn_channels[0], 4, 3)), requires_grad=True)
    w = Tensor(np_rng.normal(size=X.shape))
    f = lambda: tc.sum(tc.mul(pv.spatial_attention(X, params, "head.conv1"), w))  # noqa: E731
    assert _smooth_check(f, [X, params["head.conv1.sa.K"], params["head.conv1.sa.B"]]) < 1e-5


def test_node_branch_gradients(np_rng):
    params = randomise_biases(pv.init_params(SMALL, RngStream(8)), np_rng)
    N = Tensor(np_rng.normal(size=(3, SMALL.latent_dim)), requires_grad=True)
    f = lambda: tc.mean(tc.square(pv.node_branch(N, params)))  # noqa: E731
    names = ["node.W2", "node.B2", "node.W3", "node.B3", "node.theta"]
    assert _smooth_check(f, [N] + [params[n] for n in names]) < 1e-5


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip_is_lossless(tmp_path, np_rng):
    params = randomise_biases(pv.init_params(SMALL, RngStream(9)), np_rng)
    pv.save_checkpoint(tmp_path / "ck.json", params, SMALL, {"note": 1})
    back, cfg, extra = pv.load_checkpoint(tmp_path / "ck.json")
    assert cfg == SMALL and extra == {"note": 1}
    assert back.equals(params) and back.checksum() == params.checksum()


def test_checkpoint_rejects_foreign_files(tmp_path):
    (tmp_path / "x.json").write_text(json.dumps({"format": "other"}))
    with pytest.raises(DataFormatError):
        pv.load_checkpoint(tmp_path / "x.json")
    with pytest.raises(DataFormatError):
        pv.load_checkpoint(tmp_path / "missing.json")


def test_checkpoint_rejects_shape_mismatch(tmp_path):
    params = pv.init_params(SMALL, RngStream(0))
    pv.save_checkpoint(tmp_path / "ck.json", params, SMALL)
    doc = json.loads((tmp_path / "ck.json").read_text())
    doc["config"]["latent_dim"] = 9
    (tmp_path / "ck.json").write_text(json.dumps(doc))
    with pytest.raises(DataFormatError):
        pv.load_checkpoint(tmp_path / "ck.json")
