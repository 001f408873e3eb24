"""Training, evaluation, the constant-velocity baseline and dropout ablations.

Coordinates are normalised before they reach the model: each window is
translated so the mean last-observed position of its vehicles is the origin,
then divided by a per-axis scale fitted on the training windows. Predictions
are mapped back before any metric is computed, so reports are always in the
data's own unit.
"""

from __future__ import annotations

import csv
import io
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import pishguve as pv
from . import tensorcore as tc
from .dataio import SceneWindow
from .errors import ConfigError, ContractError, DataError, NonFiniteError, TrainingDiverged
from .metrics import DEFAULT_MARKS, MetricsReport, PredictionPair, mark_step
from .pishguve import ModelConfig, ModelParams, SceneBatchInput
from .tensorcore import RngStream, Tensor

DEFAULT_DROPOUT_GRID = (
    (0.03, 0.020),
    (0.10, 0.020),
    (0.20, 0.020),
    (0.25, 0.020),
    (0.40, 0.020),
    (0.25, 0.025),
    (0.25, 0.15),
    (0.40, 0.15),
    (0.40, 0.30),
)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 10
    seed: int = 0
    clip: float | None = None
    max_steps: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not all(0.0 <= b < 1.0 for b in self.betas) or len(self.betas) != 2:
            raise ConfigError("betas must be two numbers in [0, 1)")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if self.clip is not None and self.clip <= 0:
            raise ConfigError("clip must be positive when set")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1 when set")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class AblationGrid:
    pairs: tuple[tuple[float, float], ...] = DEFAULT_DROPOUT_GRID

    def __post_init__(self):
        pairs = tuple((float(a), float(b)) for a, b in self.pairs)
        if not pairs:
            raise ConfigError("ablation grid is empty")
        if not all(0.0 <= p < 1.0 for pair in pairs for p in pair):
            raise ConfigError("dropout probabilities must lie in [0, 1)")
        object.__setattr__(self, "pairs", pairs)


# ---------------------------------------------------------------------------
# Normalisation
# ---------------------------------------------------------------------------


def scene_origin(observed: np.ndarray) -> np.ndarray:
    return observed[:, -1, :].mean(axis=0)


@dataclass(frozen=True)
class Normalizer:
    scale: tuple[float, float] = (1.0, 1.0)

    @classmethod
    def fit(cls, windows: Sequence[SceneWindow]) -> "Normalizer":
        if not windows:
            raise DataError("cannot fit a normaliser on an empty set")
        pts = np.concatenate(
            [np.concatenate([w.observed, w.future], axis=1).reshape(-1, 2) - scene_origin(w.observed) for w in windows]
        )
        s = pts.std(axis=0)
        s = np.where(s > 1e-12, s, 1.0)
        return cls((float(s[0]), float(s[1])))

    def forward(self, xy: np.ndarray, origin: np.ndarray) -> np.ndarray:
        return (xy - origin) / np.asarray(self.scale)

    def inverse(self, xy: np.ndarray, origin: np.ndarray) -> np.ndarray:
        return xy * np.asarray(self.scale) + origin

    def batch(self, windows: Sequence[SceneWindow]) -> tuple[SceneBatchInput, np.ndarray, list[np.ndarray]]:
        """Collated normalised input, normalised targets, and per-window origins."""
        origins = [scene_origin(w.observed) for w in windows]
        inputs = [SceneBatchInput.from_absolute(self.forward(w.observed, o)) for w, o in zip(windows, origins)]
        target = np.concatenate([self.forward(w.future, o) for w, o in zip(windows, origins)])
        return pv.collate(inputs), target, origins

    def to_dict(self) -> dict:
        return {"scale": list(self.scale)}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(tuple(d["scale"]))


# ---------------------------------------------------------------------------
# Optimiser and loss
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params: ModelParams, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros(v.shape) for k, v in params.items()}
        self.v = {k: np.zeros(v.shape) for k, v in params.items()}

    def step(self) -> None:
        cfg = self.cfg
        b1, b2 = cfg.betas
        self.t += 1
        grads = {k: (np.zeros(p.shape) if p.grad is None else p.grad) for k, p in self.params.items()}
        if cfg.clip is not None:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > cfg.clip:
                grads = {k: g * (cfg.clip / norm) for k, g in grads.items()}
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            m_hat = self.m[k] / (1 - b1**self.t)
            v_hat = self.v[k] / (1 - b2**self.t)
            p.data -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


def scene_weighted_mse(pred: Tensor, target: np.ndarray, scene_index: np.ndarray) -> Tensor:
    """Mean over scenes of each scene's coordinate MSE."""
    counts = np.bincount(scene_index)
    per_row = 1.0 / (counts[scene_index] * len(counts) * pred.shape[1] * pred.shape[2])
    w = np.broadcast_to(per_row[:, None, None], pred.shape).copy()
    err = tc.square(tc.sub(pred, Tensor(target)))
    return tc.sum(tc.mul(err, Tensor(w)))


# ---------------------------------------------------------------------------
# Prediction and evaluation
# ---------------------------------------------------------------------------


def cv_baseline(window: SceneWindow) -> np.ndarray:
    """Extrapolate each vehicle's last observed step for the whole horizon."""
    obs = window.observed
    if obs.shape[1] < 2:
        raise ContractError("constant-velocity baseline needs at least two observed steps")
    last = obs[:, -1:, :]
    vel = obs[:, -1:, :] - obs[:, -2:-1, :]
    k = np.arange(1, window.horizon + 1, dtype=np.float64)[None, :, None]
    return last + k * vel


def predict(
    params: ModelParams,
    config: ModelConfig,
    windows: Sequence[SceneWindow],
    normalizer: Normalizer,
    batch_size: int = 32,
) -> list[np.ndarray]:
    """Eval-mode predictions in data units, one array per window."""
    out = []
    for i in range(0, len(windows), batch_size):
        chunk = windows[i : i + batch_size]
        batch, _, origins = normalizer.batch(chunk)
        pred = pv.forward(batch, params, config, mode="eval").data
        for j, o in enumerate(origins):
            out.append(normalizer.inverse(pred[batch.scene_index == j], o))
    return out


def _check_horizon(windows: Sequence[SceneWindow], marks) -> None:
    if not windows:
        raise DataError("evaluation set is empty")
    # fail before any model work when a mark lies beyond the horizon
    w = windows[0]
    PredictionPair(w.future, w.future, w.unit, w.fps)
    for m in marks:
        mark_step(m, w.fps, w.horizon)


def evaluate_predictions(windows: Sequence[SceneWindow], preds: Sequence[np.ndarray], marks=DEFAULT_MARKS) -> MetricsReport:
    """Pool every vehicle of every window into one report."""
    _check_horizon(windows, marks)
    truth = np.concatenate([w.future for w in windows])
    pred = np.concatenate([np.asarray(p, dtype=np.float64) for p in preds])
    return MetricsReport.from_pair(PredictionPair(pred, truth, windows[0].unit, windows[0].fps), marks)


def evaluate(
    params: ModelParams | None,
    config: ModelConfig | None,
    windows: Sequence[SceneWindow],
    marks=DEFAULT_MARKS,
    normalizer: Normalizer | None = None,
    predictor: Callable[[SceneWindow], np.ndarray] | None = None,
) -> MetricsReport:
    """Eval-mode metrics. ``predictor`` replaces the model when given."""
    _check_horizon(windows, marks)
    if predictor is not None:
        preds = [predictor(w) for w in windows]
    else:
        preds = predict(params, config, windows, normalizer or Normalizer())
    return evaluate_predictions(windows, preds, marks)


def evaluate_baseline(windows: Sequence[SceneWindow], marks=DEFAULT_MARKS) -> MetricsReport:
    return evaluate(None, None, windows, marks, predictor=cv_baseline)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ModelParams
    log: list[dict] = field(default_factory=list)
    normalizer: Normalizer = field(default_factory=Normalizer)
    steps: int = 0

    def log_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.log)


def train(
    config: ModelConfig,
    params: ModelParams,
    windows: Sequence[SceneWindow],
    train_cfg: TrainConfig,
    normalizer: Normalizer | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Adam on scene-weighted MSE with dropout active.

    ``params`` is updated in place. Scene order is reshuffled every epoch
    from the seed; dropout masks come from a per-step child stream, so a run
    is a pure function of (config, params, windows, train_cfg).
    Each log row records the mean training loss of the epoch and the
    eval-mode ADE/FDE on the training windows.
    """
    if not windows:
        raise DataError("training set is empty")
    for w in windows:
        if w.t_in != config.t_in or w.horizon != config.horizon:
            raise DataError(
                f"window at frame {w.anchor} has t_in={w.t_in}, H={w.horizon}; model expects {config.t_in}, {config.horizon}"
            )
    norm = normalizer or Normalizer.fit(windows)
    opt = Adam(params, train_cfg)
    order_rng = RngStream(train_cfg.seed, "scene-order")
    drop_root = RngStream(train_cfg.seed, "dropout")
    result = TrainResult(params, [], norm)
    step = 0
    for epoch in range(1, train_cfg.epochs + 1):
        order = order_rng.permutation(len(windows))
        losses = []
        for b, start in enumerate(range(0, len(windows), train_cfg.batch_size)):
            if train_cfg.max_steps is not None and step >= train_cfg.max_steps:
                break
            chunk = [windows[i] for i in order[start : start + train_cfg.batch_size]]
            batch, target, _ = norm.batch(chunk)
            last_good = params.copy()
            try:
                pred = pv.forward(batch, params, config, mode="train", rng=drop_root.child(step))
                loss = scene_weighted_mse(pred, target, batch.scene_index)
                tc.zero_grad(params.values())
                tc.backward(loss)
                grads_ok = all(p.grad is None or np.all(np.isfinite(p.grad)) for p in params.values())
            except NonFiniteError as exc:
                raise TrainingDiverged(b, step, last_good) from exc
            if not grads_ok:
                raise TrainingDiverged(b, step, last_good)
            opt.step()
            if not all(np.all(np.isfinite(p.data)) for p in params.values()):
                for k in params:
                    params[k].data[...] = last_good[k].data
                raise TrainingDiverged(b, step, last_good)
            losses.append(loss.item())
            step += 1
        if not losses:
            break
        report = evaluate(params, config, windows, marks=(), normalizer=norm)
        row = {"epoch": epoch, "step": step, "loss": float(np.mean(losses)), "ade": report.ade, "fde": report.fde}
        result.log.append(row)
        if on_epoch:
            on_epoch(row)
    tc.zero_grad(params.values())
    result.steps = step
    return result


# ---------------------------------------------------------------------------
# Ablation and reporting
# ---------------------------------------------------------------------------


@dataclass
class ResultRow:
    name: str
    report: MetricsReport
    n_params: int
    p_attn: float | None = None
    p_lin: float | None = None


def _ablation_cell(args) -> ResultRow:
    config, train_windows, eval_windows, train_cfg, marks, init_seed = args
    params = pv.init_params(config, RngStream(init_seed, "init"))
    res = train(config, params, train_windows, train_cfg)
    rep = evaluate(params, config, eval_windows, marks, res.normalizer)
    return ResultRow(
        f"p_attn={config.p_attn:g},p_lin={config.p_lin:g}", rep, params.count(), config.p_attn, config.p_lin
    )


def ablate(
    grid: AblationGrid,
    train_windows: Sequence[SceneWindow],
    eval_windows: Sequence[SceneWindow],
    train_cfg: TrainConfig,
    config: ModelConfig = ModelConfig(),
    marks=DEFAULT_MARKS,
    init_seed: int = 0,
    jobs: int = 1,
) -> list[ResultRow]:
    """Train and evaluate one model per (p_attn, p_lin) cell, in grid order.

    Every cell uses the same initial parameters, data and seeds.
    """
    cells = [
        (replace(config, p_attn=a, p_lin=b), list(train_windows), list(eval_windows), train_cfg, marks, init_seed)
        for a, b in grid.pairs
    ]
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_ablation_cell, cells))
    return [_ablation_cell(c) for c in cells]


def report_table(rows: Sequence[ResultRow]) -> tuple[str, str]:
    """Aligned text table and CSV with ADE, FDE, RMSE marks and parameter count."""
    if not rows:
        return "", ""
    has_p = any(r.p_attn is not None for r in rows)
    marks_hdr = rows[0].report.header()[2:]
    header = ["model"] + (["p_attn", "p_lin"] if has_p else []) + ["ade", "fde"] + marks_hdr + ["params"]
    body = []
    for r in rows:
        cells = [r.name] + ([r.p_attn, r.p_lin] if has_p else []) + r.report.row() + [r.n_params]
        body.append(cells)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for cells in body:
        w.writerow([repr(c) if isinstance(c, float) else c for c in cells])

    def fmt(c):
        if c is None:
            return ""
        return f"{c:.4f}" if isinstance(c, float) else str(c)

    text_rows = [header] + [[fmt(c) for c in cells] for cells in body]
    widths = [max(len(row[i]) for row in text_rows) for i in range(len(header))]
    lines = ["  ".join(s.rjust(wd) if j else s.ljust(wd) for j, (s, wd) in enumerate(zip(row, widths))) for row in text_rows]
    return "\n".join(lines) + "\n", buf.getvalue()


def parse_table_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    for r in rows:
        d = {}
        for k, v in r.items():
            if k == "model":
                d[k] = v
            elif k == "params":
                d[k] = int(v)
            elif v == "":
                d[k] = None
            else:
                d[k] = float(v)
        out.append(d)
    return out


# ---------------------------------------------------------------------------
# Gradient check of the full model
# ---------------------------------------------------------------------------

GRADCHECK_CONFIG = ModelConfig(t_in=3, horizon=2, latent_dim=4, node_mlp_hidden=4, lad_linear_dim=4, cnn_channels=(4, 3, 2))


@dataclass
class GradCheckResult:
    max_rel_error: float
    seed: int
    skipped: list[int]
    eps: float
    n_params: int
    seconds: float


def gradcheck_model(
    config: ModelConfig = GRADCHECK_CONFIG,
    n: int = 2,
    eps: float = 3e-4,
    weight_gain: float = 2.0,
    residual: float = 0.01,
    seed: int = 0,
    max_tries: int = 20,
) -> GradCheckResult:
    """Finite-difference check of forward + MSE loss over every parameter.

    Central differences are only valid where the program is smooth within
    ``+-eps`` of the point, so candidate points are drawn for seeds
    ``seed, seed+1, ...`` and the first one whose neighbourhood crosses no
    leaky-ReLU or max-pool switch is used. Candidates get random biases and
    weights scaled by ``weight_gain`` (freshly initialised biases are zero,
    which puts ReLU inputs exactly on their kink), and a target within a
    small ``residual`` of the current output so the loss stays in the
    quadratic regime. The choice of point never looks at the error itself.
    """
    t0 = time.perf_counter()
    skipped = []
    shapes = {name: fan for name, _, fan in pv.param_shapes(config)}
    for s in range(seed, seed + max_tries):
        params = pv.init_params(config, RngStream(s, "gradcheck"))
        rng = RngStream(s, "gradcheck-point")
        for name, p in params.items():
            if shapes[name] == 0:
                p.data[...] = rng.uniform(-0.5, 0.5, p.shape)
            else:
                p.data *= weight_gain
        V = rng.normal(0.0, 1.0, (n, config.t_in, 2))
        batch = SceneBatchInput.from_absolute(V)
        base = pv.forward(batch, params, config).data
        target = base + residual * np.abs(base).mean() * rng.normal(0.0, 1.0, base.shape)

        def loss():
            return pv.mse_loss(pv.forward(batch, params, config), target)

        if not tc.smooth_neighbourhood(loss, params.values(), eps):
            skipped.append(s)
            continue
        err = tc.grad_check(loss, params.values(), eps)
        return GradCheckResult(err, s, skipped, eps, params.count(), time.perf_counter() - t0)
    raise ContractError(f"no smooth gradient-check point among seeds {seed}..{seed + max_tries - 1}")
