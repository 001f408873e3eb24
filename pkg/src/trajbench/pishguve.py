"""Graph trajectory predictor: embedding, attentive GIN and attentive CNN head.

Shapes used throughout (``n`` vehicles, ``T`` observed steps, ``H`` predicted
steps, ``D`` latent width):

* input ``V`` and ``dV``: ``n x T x 2``
* embedding ``N``: ``n x D``
* GIN output: ``n x D``
* prediction: ``n x H x 2`` absolute coordinates

Several scenes can be collated into one call; ``scene_index`` keeps neighbour
sums inside each scene, so the result is identical to running them one by one.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import tensorcore as tc
from .errors import ConfigError, ContractError, DataError, DataFormatError, NonFiniteError
from .tensorcore import RngStream, Tensor

CHECKPOINT_FORMAT = "trajbench-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    t_in: int = 15
    horizon: int = 25
    latent_dim: int = 128
    node_mlp_hidden: int = 128
    lad_linear_dim: int = 128
    channel_attn_reduction: int = 8
    spatial_attn_kernel: tuple[int, int] = (3, 3)
    cnn_channels: tuple[int, int, int] = (128, 96, 72)
    leaky_slope: float = 0.01
    p_attn: float = 0.25
    p_lin: float = 0.02
    include_self_in_neighbors: bool = False

    def __post_init__(self):
        object.__setattr__(self, "spatial_attn_kernel", tuple(int(k) for k in self.spatial_attn_kernel))
        object.__setattr__(self, "cnn_channels", tuple(int(c) for c in self.cnn_channels))
        if self.t_in < 2 or self.horizon < 1:
            raise ConfigError("t_in must be >= 2 and horizon >= 1")
        dims = (self.latent_dim, self.node_mlp_hidden, self.lad_linear_dim, self.channel_attn_reduction)
        if min(dims) < 1 or len(self.cnn_channels) != 3 or min(self.cnn_channels) < 1:
            raise ConfigError("all widths must be >= 1 and cnn_channels must have three entries")
        kh, kw = self.spatial_attn_kernel
        if kh < 1 or kw < 1 or kh % 2 == 0 or kw % 2 == 0:
            raise ConfigError("spatial attention kernel extents must be odd and positive")
        if not (0.0 <= self.p_attn < 1.0 and 0.0 <= self.p_lin < 1.0):
            raise ConfigError("dropout probabilities must lie in [0, 1)")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigError("leaky_slope must lie in (0, 1)")

    @property
    def feature_len(self) -> int:
        """Length of the per-vehicle column fed to the CNN head."""
        return self.latent_dim + 2 * self.t_in

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["spatial_attn_kernel"] = list(self.spatial_attn_kernel)
        d["cnn_channels"] = list(self.cnn_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def attention_hidden(channels: int, reduction: int) -> int:
    """Hidden width of the shared channel-attention MLP (never below 1)."""
    return max(1, channels // reduction)


@dataclass
class SceneBatchInput:
    """Absolute and first-step-relative observed coordinates.

    ``scene_index`` assigns each vehicle row to a scene when several scenes
    are collated; neighbours are only summed within a scene.
    """

    V: np.ndarray
    dV: np.ndarray
    scene_index: np.ndarray = None

    def __post_init__(self):
        self.V = np.asarray(self.V, dtype=np.float64)
        self.dV = np.asarray(self.dV, dtype=np.float64)
        if self.V.ndim != 3 or self.V.shape[2] != 2 or self.dV.shape != self.V.shape:
            raise DataError(f"expected V and dV of shape n x T x 2, got {self.V.shape} and {self.dV.shape}")
        if self.V.shape[0] == 0:
            raise DataError("empty scene: no vehicles")
        if not np.array_equal(self.dV, self.V - self.V[:, :1, :]):
            raise DataError("dV must equal V minus each vehicle's first observed position")
        if self.scene_index is None:
            self.scene_index = np.zeros(self.V.shape[0], dtype=np.int64)
        self.scene_index = np.asarray(self.scene_index, dtype=np.int64)
        if self.scene_index.shape != (self.V.shape[0],):
            raise DataError("scene_index needs one entry per vehicle")

    @classmethod
    def from_absolute(cls, V, scene_index=None) -> "SceneBatchInput":
        V = np.asarray(V, dtype=np.float64)
        return cls(V, V - V[:, :1, :], scene_index)

    @property
    def n(self) -> int:
        return self.V.shape[0]

    @property
    def t_in(self) -> int:
        return self.V.shape[1]

    def permuted(self, perm) -> "SceneBatchInput":
        perm = np.asarray(perm)
        return SceneBatchInput(self.V[perm], self.dV[perm], self.scene_index[perm])


def collate(batches: Sequence[SceneBatchInput]) -> SceneBatchInput:
    """Stack scenes row-wise, tagging each vehicle with its scene position."""
    V = np.concatenate([b.V for b in batches])
    idx = np.concatenate([np.full(b.n, i, dtype=np.int64) for i, b in enumerate(batches)])
    return SceneBatchInput(V, np.concatenate([b.dV for b in batches]), idx)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def _attention_shapes(prefix: str, channels: int, cfg: ModelConfig) -> list[tuple[str, tuple, int]]:
    hid = attention_hidden(channels, cfg.channel_attn_reduction)
    kh, kw = cfg.spatial_attn_kernel
    return [
        (f"{prefix}.ca.W1", (channels, hid), channels),
        (f"{prefix}.ca.B1", (hid,), 0),
        (f"{prefix}.ca.W2", (hid, channels), hid),
        (f"{prefix}.ca.B2", (channels,), 0),
        (f"{prefix}.sa.K", (1, 2, kh, kw), 2 * kh * kw),
        (f"{prefix}.sa.B", (1,), 0),
    ]


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple, int]]:
    """``(name, shape, fan_in)`` for every learnable tensor, in init order.

    ``fan_in`` 0 marks biases (initialised to zero) and the GIN ``theta``.
    """
    D, L, h = cfg.latent_dim, cfg.lad_linear_dim, cfg.node_mlp_hidden
    c0, c1, c2 = cfg.cnn_channels
    out = [
        ("embed.W1", (4 * cfg.t_in, D), 4 * cfg.t_in),
        ("embed.B1", (D,), 0),
        ("node.W2", (D, h), D),
        ("node.B2", (h,), 0),
        ("node.W3", (h, D), h),
        ("node.B3", (D,), 0),
        ("node.theta", (1,), 0),
    ]
    for k, (din, dout) in (("lad1", (D, L)), ("lad2", (L, D))):
        out += [(f"{k}.W4", (din, dout), din), (f"{k}.B4", (dout,), 0)]
        out += _attention_shapes(k, dout, cfg)
    convs = (("conv1", 1, c0, (2, 2)), ("conv2", c0, c1, (2, 1)), ("conv3", c1, c2, (2, 1)))
    for name, cin, cout, (kh, kw) in convs:
        out += [(f"head.{name}.K", (cout, cin, kh, kw), cin * kh * kw), (f"head.{name}.B", (cout,), 0)]
        out += _attention_shapes(f"head.{name}", cout, cfg)
    out += [("head.out.K", (2 * cfg.horizon, c2, 1, 1), c2), ("head.out.B", (2 * cfg.horizon,), 0)]
    return out


@dataclass
class ModelParams:
    """Named learnable tensors of one model."""

    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __setitem__(self, name: str, value: Tensor) -> None:
        self.tensors[name] = value

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def values(self) -> list[Tensor]:
        return list(self.tensors.values())

    def items(self):
        return self.tensors.items()

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def copy(self) -> "ModelParams":
        return ModelParams({k: Tensor(v.data, requires_grad=v.requires_grad) for k, v in self.tensors.items()})

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, v in self.tensors.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v.data).tobytes())
        return h.hexdigest()

    def equals(self, other: "ModelParams") -> bool:
        return list(self) == list(other) and all(np.array_equal(self[k].data, other[k].data) for k in self)


def init_params(config: ModelConfig, rng: RngStream) -> ModelParams:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases and theta zero."""
    params = ModelParams()
    for name, shape, fan_in in param_shapes(config):
        if fan_in:
            bound = 1.0 / np.sqrt(fan_in)
            data = rng.uniform(-bound, bound, shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def count_params(config: ModelConfig) -> int:
    """Closed-form count of learnable scalars.

    With ``D`` latent, ``h`` node hidden, ``L`` LAD width, channels
    ``c0, c1, c2``, horizon ``H``, observed steps ``T`` and spatial kernel
    ``kh x kw``::

        embed   4*T*D + D
        node    2*D*h + h + D + 1
        lad1    D*L + L + att(L)
        lad2    L*D + D + att(D)
        head    4*c0 + c0 + 2*c0*c1 + c1 + 2*c1*c2 + c2 + att(c0) + att(c1) + att(c2)
        output  2*H*c2 + 2*H

    where ``att(C) = 2*C*r + r + C + 2*kh*kw + 1`` and
    ``r = max(1, C // reduction)``.
    """
    D, L, h = config.latent_dim, config.lad_linear_dim, config.node_mlp_hidden
    c0, c1, c2 = config.cnn_channels
    T, H = config.t_in, config.horizon
    kh, kw = config.spatial_attn_kernel

    def att(c):
        r = attention_hidden(c, config.channel_attn_reduction)
        return 2 * c * r + r + c + 2 * kh * kw + 1

    total = 4 * T * D + D
    total += 2 * D * h + h + D + 1
    total += D * L + L + att(L) + L * D + D + att(D)
    total += 4 * c0 + c0 + 2 * c0 * c1 + c1 + 2 * c1 * c2 + c2 + att(c0) + att(c1) + att(c2)
    total += 2 * H * c2 + 2 * H
    return total


def save_checkpoint(path, params: ModelParams, config: ModelConfig, extra: dict | None = None) -> None:
    """JSON checkpoint; floats are written with ``repr`` so they round-trip exactly."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "params": {k: {"shape": list(v.shape), "data": v.data.reshape(-1).tolist()} for k, v in params.items()},
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig, dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: cannot read checkpoint ({exc})") from exc
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise DataFormatError(f"{path}: not a version {CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} file")
    config = ModelConfig.from_dict(doc["config"])
    params = ModelParams()
    for k, entry in doc["params"].items():
        params[k] = Tensor(np.array(entry["data"], dtype=np.float64).reshape(entry["shape"]), requires_grad=True)
    expected = [(n, s) for n, s, _ in param_shapes(config)]
    if [(k, params[k].shape) for k in params] != expected:
        raise DataFormatError(f"{path}: parameter names/shapes do not match the stored config")
    return params, config, doc.get("extra", {})


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def _constant(a) -> Tensor:
    return Tensor(a)


def embed(batch: SceneBatchInput, params: ModelParams, config: ModelConfig) -> Tensor:
    """Leaky-ReLU of an affine map over each vehicle's ``V || dV`` row."""
    if batch.n == 0:
        raise DataError("empty scene: no vehicles")
    n, t = batch.n, batch.t_in
    if t != config.t_in:
        raise DataError(f"batch has {t} observed steps, model expects {config.t_in}")
    rows = np.concatenate([batch.V.reshape(n, 2 * t), batch.dV.reshape(n, 2 * t)], axis=1)
    return tc.leaky_relu(tc.affine(_constant(rows), params["embed.W1"], params["embed.B1"]), config.leaky_slope)


def node_branch(N: Tensor, params: ModelParams) -> Tensor:
    """Two affine maps applied to ``(1 + theta) * N``; no activation in between."""
    theta = tc.broadcast_to(tc.reshape(params["node.theta"], (1, 1)), N.shape)
    scaled = tc.add(N, tc.mul(N, theta))
    hidden = tc.affine(scaled, params["node.W2"], params["node.B2"])
    return tc.affine(hidden, params["node.W3"], params["node.B3"])


def channel_attention(
    F: Tensor, params: ModelParams, prefix: str, slope: float = 0.01, p_drop: float = 0.0, mode: str = "eval", rng=None
) -> Tensor:
    """Per-channel sigmoid gate from a shared MLP over avg- and max-pooled maps.

    ``F`` is ``C x H x W`` or batched ``N x C x H x W``. Dropout with
    ``p_drop`` is applied to the gated output in train mode.
    """
    single = F.ndim == 3
    X = tc.reshape(F, (1,) + F.shape) if single else F
    n, c = X.shape[:2]
    W1, B1, W2, B2 = (params[f"{prefix}.ca.{k}"] for k in ("W1", "B1", "W2", "B2"))

    def mlp(v):
        return tc.affine(tc.leaky_relu(tc.affine(v, W1, B1), slope), W2, B2)

    logits = tc.add(mlp(tc.pool(X, "avg", (2, 3))), mlp(tc.pool(X, "max", (2, 3))))
    gate = tc.broadcast_to(tc.reshape(tc.sigmoid(logits), (n, c, 1, 1)), X.shape)
    out = tc.dropout(tc.mul(X, gate), p_drop, mode, rng)
    return tc.reshape(out, F.shape) if single else out


def spatial_attention(
    F: Tensor, params: ModelParams, prefix: str, p_drop: float = 0.0, mode: str = "eval", rng=None
) -> Tensor:
    """Per-position sigmoid gate from a conv over channel-wise avg and max maps.

    The conv uses zero "same" padding so the gate matches ``H x W``.
    """
    single = F.ndim == 3
    X = tc.reshape(F, (1,) + F.shape) if single else F
    n, c, h, w = X.shape
    K, B = params[f"{prefix}.sa.K"], params[f"{prefix}.sa.B"]
    kh, kw = K.shape[2:]
    maps = tc.concat([tc.pool(X, "avg", 1, keepdims=True), tc.pool(X, "max", 1, keepdims=True)], axis=1)
    maps = tc.pad(maps, [(0, 0), (0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)])
    gate = tc.broadcast_to(tc.sigmoid(tc.conv2d(maps, K, B)), X.shape)
    out = tc.dropout(tc.mul(X, gate), p_drop, mode, rng)
    return tc.reshape(out, F.shape) if single else out


def lad(X: Tensor, params: ModelParams, prefix: str, config: ModelConfig, mode: str = "eval", rng=None) -> Tensor:
    """Linear -> linear dropout -> channel attention -> spatial attention -> attention dropout.

    Each vehicle's feature vector is viewed as a ``C x 1 x 1`` map for the
    attention stages.
    """
    Y = tc.affine(X, params[f"{prefix}.W4"], params[f"{prefix}.B4"])
    Y = tc.dropout(Y, config.p_lin, mode, rng)
    n, c = Y.shape
    M = tc.reshape(Y, (n, c, 1, 1))
    M = channel_attention(M, params, prefix, config.leaky_slope)
    M = spatial_attention(M, params, prefix, config.p_attn, mode, rng)
    return tc.reshape(M, (n, c))


def neighbor_matrix(scene_index: np.ndarray, include_self: bool = False) -> np.ndarray:
    """0/1 matrix with ``A[i, j] = 1`` when ``j`` is a neighbour of ``i``."""
    same = scene_index[:, None] == scene_index[None, :]
    if not include_self:
        same &= ~np.eye(len(scene_index), dtype=bool)
    return same.astype(np.float64)


def gin(
    N: Tensor, params: ModelParams, config: ModelConfig, mode: str = "eval", rng=None, scene_index=None
) -> Tensor:
    """Node branch plus the sum of stacked-LAD features over each node's neighbours."""
    if N.shape[0] < 1:
        raise DataError("empty scene: no vehicles")
    if scene_index is None:
        scene_index = np.zeros(N.shape[0], dtype=np.int64)
    node = node_branch(N, params)
    neigh = lad(lad(N, params, "lad1", config, mode, rng), params, "lad2", config, mode, rng)
    A = neighbor_matrix(np.asarray(scene_index), config.include_self_in_neighbors)
    return tc.add(node, tc.matmul(_constant(A), neigh))


def _head(feat: Tensor, params: ModelParams, config: ModelConfig) -> Tensor:
    n, flen = feat.shape
    col = tc.reshape(feat, (n, 1, flen, 1))
    x = tc.concat([col, col], axis=3)
    for name in ("conv1", "conv2", "conv3"):
        x = tc.conv2d(x, params[f"head.{name}.K"], params[f"head.{name}.B"])
        x = tc.leaky_relu(x, config.leaky_slope)
        x = channel_attention(x, params, f"head.{name}", config.leaky_slope)
        x = spatial_attention(x, params, f"head.{name}")
    pooled = tc.pool(x, "avg", (2, 3), keepdims=True)
    out = tc.conv2d(pooled, params["head.out.K"], params["head.out.B"])
    return tc.reshape(out, (n, config.horizon, 2))


def forward(
    batch: SceneBatchInput, params: ModelParams, config: ModelConfig, mode: str = "eval", rng: RngStream | None = None
) -> Tensor:
    """Predict ``n x H x 2`` absolute future coordinates for every vehicle."""
    if mode not in ("train", "eval"):
        raise ContractError(f"unknown mode {mode!r}")
    stage = "embedding"
    try:
        N = embed(batch, params, config)
        stage = "gin"
        G = gin(N, params, config, mode, rng, batch.scene_index)
        stage = "cnn head"
        dv = _constant(batch.dV.reshape(batch.n, 2 * batch.t_in))
        return _head(tc.concat([G, dv], axis=1), params, config)
    except NonFiniteError as exc:
        raise NonFiniteError(f"{stage} ({exc.where})") from exc


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error over all predicted coordinates."""
    return tc.mean(tc.square(tc.sub(pred, _constant(target))))
