"""Command-line entry point: ``trajbench <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (non-finite values, diverged training, failed gradcheck).

Configuration comes from an optional ``--config`` JSON file with the
sections ``model``, ``train``, ``data``, ``extract`` and ``synth``. Any
field can be overridden on the command line as ``--section.field VALUE``
(VALUE is parsed as JSON when possible, e.g. ``--model.cnn_channels
[8,8,8]``). Every subcommand that takes ``--out`` writes
``effective-config.json`` there.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from . import bench, dataio, extract, synth
from . import pishguve as pv
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DataFormatError,
    DimensionError,
    NonFiniteError,
    ParameterError,
    RangeError,
)
from .tensorcore import RngStream

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOLERANCE = 1e-4


@dataclass(frozen=True)
class DataConfig:
    stride: int = 1
    split_ratios: tuple[float, float, float] = (0.7, 0.2, 0.1)
    split_seed: int = 0
    init_seed: int = 0
    marks: tuple[float, ...] = (1, 2, 3, 4, 5)
    coord_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "split_ratios", tuple(float(r) for r in self.split_ratios))
        object.__setattr__(self, "marks", tuple(self.marks))
        if self.stride < 1:
            raise ConfigError("data.stride must be >= 1")
        dataio.SplitSpec(self.split_ratios, self.split_seed)

    @property
    def split_spec(self) -> dataio.SplitSpec:
        return dataio.SplitSpec(self.split_ratios, self.split_seed)


SECTIONS = {
    "model": pv.ModelConfig,
    "train": bench.TrainConfig,
    "data": DataConfig,
    "extract": extract.FilterConfig,
    "synth": synth.SynthConfig,
}


@dataclass
class RunConfig:
    model: pv.ModelConfig = field(default_factory=pv.ModelConfig)
    train: bench.TrainConfig = field(default_factory=bench.TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    extract: extract.FilterConfig = field(default_factory=extract.FilterConfig)
    synth: synth.SynthConfig = field(default_factory=synth.SynthConfig)

    def to_dict(self) -> dict:
        return {name: _jsonable(asdict(getattr(self, name))) for name in SECTIONS}


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def build_config(doc: dict, overrides: dict[str, object], base: dict[str, object] | None = None) -> RunConfig:
    """Merge defaults, ``base`` section objects, the JSON doc and overrides."""
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    merged = {}
    for name, cls in SECTIONS.items():
        start = asdict(base[name]) if base and name in base else {}
        values = {**start, **doc.get(name, {})}
        for key, val in overrides.items():
            sec, _, fld = key.partition(".")
            if sec == name:
                values[fld] = val
        fields = {f.name for f in dataclasses.fields(cls)}
        bad = set(values) - fields
        if bad:
            raise ConfigError(f"unknown {name} keys: {sorted(bad)}")
        try:
            merged[name] = cls(**values)
        except TypeError as exc:
            raise ConfigError(f"bad {name} value: {exc}") from exc
    return RunConfig(**merged)


def _parse_overrides(extra: list[str]) -> dict[str, object]:
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise UsageError(f"unrecognized argument: {tok}")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"missing value for {tok}")
            raw = extra[i + 1]
            i += 2
        sec = key.split(".", 1)[0]
        if sec not in SECTIONS:
            raise UsageError(f"unknown config section in {tok}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="trajbench", description="Vehicle trajectory prediction benchmark toolkit.")
    p.add_argument("--version", action="version", version=f"trajbench {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("extract", parents=[common], help="tracker CSV -> trajectories + stats")
    s.add_argument("inputs", nargs="+")
    s.add_argument("--out", required=True)

    s = sub.add_parser("windows", parents=[common], help="trajectories -> scene windows + splits")
    s.add_argument("input")
    s.add_argument("--out", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic preset")
    s.add_argument("--preset", required=True, choices=sorted(synth.standard_suites()))
    s.add_argument("--out", help="directory; trajectory CSV goes to stdout when omitted")

    s = sub.add_parser("train", parents=[common], help="train on the training split")
    s.add_argument("input", help="trajectory CSV or windows .jsonl")
    s.add_argument("--out", required=True)

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("input")
    s.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    s.add_argument("--out")

    s = sub.add_parser("ablate", parents=[common], help="dropout grid sweep")
    s.add_argument("input")
    s.add_argument("--out", required=True)
    s.add_argument("--grid", help='JSON list of [p_attn, p_lin] pairs (default: 9-cell grid)')
    s.add_argument("--split", choices=("val", "test"), default="test")

    s = sub.add_parser("baseline", parents=[common], help="constant-velocity baseline metrics")
    s.add_argument("input", nargs="?", default="-", help="trajectory CSV / windows .jsonl, '-' for stdin")
    s.add_argument("--split", choices=("train", "val", "test", "all"), default="all")
    s.add_argument("--out")

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the full model")
    s.add_argument("--eps", type=float, default=3e-4)
    s.add_argument("--seed", type=int, default=0)

    sub.add_parser("params", parents=[common], help="print the parameter count")
    return p


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(out: Path, cfg: RunConfig, extra: dict | None = None) -> None:
    doc = cfg.to_dict()
    if extra:
        doc["run"] = extra
    (out / "effective-config.json").write_text(json.dumps(doc, indent=2) + "\n")


def _load_windows(path: str, cfg: RunConfig) -> list[dataio.SceneWindow]:
    if path != "-" and path.endswith(".jsonl"):
        return dataio.read_windows(path)
    tracks = dataio.parse_trajectories(path, coord_scale=cfg.data.coord_scale)
    return dataio.build_windows(tracks, cfg.model.t_in, cfg.model.horizon, cfg.data.stride)


def _select(windows, which: str, cfg: RunConfig):
    if which == "all":
        return windows
    tr, va, te = dataio.split(windows, cfg.data.split_spec)
    return {"train": tr, "val": va, "test": te}[which]


def _report_out(report, out: str | None, name: str = "metrics") -> None:
    sys.stdout.write(report.to_csv())
    if out:
        d = _out_dir(out)
        (d / f"{name}.csv").write_text(report.to_csv())
        (d / f"{name}.json").write_text(report.to_json() + "\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_extract(args, cfg: RunConfig) -> int:
    out = _out_dir(args.out)
    results = extract.run_many(args.inputs, cfg.extract, jobs=args.jobs)
    stats = {}
    for path, tracks, report in results:
        name = "trajectories.csv" if len(results) == 1 else f"{Path(path).stem}.csv"
        dataio.write_tracks(tracks, out / name)
        stats[path] = report.to_dict()
        print(f"{path}: {report.input_tracks} tracks in, {report.output_tracks} kept")
    doc = next(iter(stats.values())) if len(stats) == 1 else stats
    (out / "stats.json").write_text(json.dumps(doc, indent=2) + "\n")
    _echo_config(out, cfg, {"command": "extract", "inputs": sorted(stats)})
    return EXIT_OK


def cmd_windows(args, cfg: RunConfig) -> int:
    out = _out_dir(args.out)
    windows = _load_windows(args.input, cfg)
    dataio.write_windows(windows, out / "windows.jsonl")
    parts = dataio.split(windows, cfg.data.split_spec)
    for name, part in zip(("train", "val", "test"), parts):
        dataio.write_windows(part, out / f"{name}.jsonl")
    print(f"{len(windows)} windows (train {len(parts[0])}, val {len(parts[1])}, test {len(parts[2])})")
    _echo_config(out, cfg, {"command": "windows", "input": args.input})
    return EXIT_OK


def cmd_synth(args, cfg: RunConfig, overrides: dict) -> int:
    base = synth.preset(args.preset)
    scfg = build_config({}, overrides, {"synth": base}).synth
    tracks = synth.generate(scfg)
    if args.out is None:
        sys.stdout.write(dataio.tracks_to_csv(tracks))
        return EXIT_OK
    out = _out_dir(args.out)
    dataio.write_tracks(tracks, out / "trajectories.csv")
    cfg = dataclasses.replace(cfg, synth=scfg)
    _echo_config(out, cfg, {"command": "synth", "preset": args.preset, "sha256": synth.digest(tracks)})
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    out = _out_dir(args.out)
    _echo_config(out, cfg, {"command": "train", "input": args.input})
    windows = _load_windows(args.input, cfg)
    tr, va, _ = dataio.split(windows, cfg.data.split_spec)
    params = pv.init_params(cfg.model, RngStream(cfg.data.init_seed, "init"))
    log_path = out / "train_log.jsonl"
    log_path.write_text("")

    def log_row(row):
        with log_path.open("a") as fh:
            fh.write(json.dumps(row) + "\n")
        print(json.dumps(row), flush=True)

    try:
        res = bench.train(cfg.model, params, tr, cfg.train, on_epoch=log_row)
    except bench.TrainingDiverged as exc:
        pv.save_checkpoint(out / "last-good.json", exc.last_good, cfg.model, {"failed_step": exc.step})
        raise
    extra = {"normalizer": res.normalizer.to_dict(), "steps": res.steps}
    pv.save_checkpoint(out / "checkpoint.json", params, cfg.model, extra)
    if va:
        rep = bench.evaluate(params, cfg.model, va, cfg.data.marks, res.normalizer)
        (out / "val_metrics.json").write_text(rep.to_json() + "\n")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    params, mcfg, extra = pv.load_checkpoint(args.checkpoint)
    cfg = dataclasses.replace(cfg, model=mcfg)
    windows = _select(_load_windows(args.input, cfg), args.split, cfg)
    norm = bench.Normalizer.from_dict(extra["normalizer"]) if "normalizer" in extra else bench.Normalizer()
    report = bench.evaluate(params, mcfg, windows, cfg.data.marks, norm)
    _report_out(report, args.out)
    if args.out:
        _echo_config(Path(args.out), cfg, {"command": "eval", "checkpoint": args.checkpoint, "split": args.split})
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    out = _out_dir(args.out)
    grid = bench.AblationGrid(tuple(tuple(p) for p in json.loads(args.grid))) if args.grid else bench.AblationGrid()
    _echo_config(out, cfg, {"command": "ablate", "input": args.input, "grid": [list(p) for p in grid.pairs]})
    windows = _load_windows(args.input, cfg)
    tr, va, te = dataio.split(windows, cfg.data.split_spec)
    rows = bench.ablate(
        grid, tr, te if args.split == "test" else va, cfg.train, cfg.model, cfg.data.marks, cfg.data.init_seed, args.jobs
    )
    text, csv_text = bench.report_table(rows)
    (out / "ablation.csv").write_text(csv_text)
    (out / "ablation.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_baseline(args, cfg: RunConfig) -> int:
    windows = _select(_load_windows(args.input, cfg), args.split, cfg)
    report = bench.evaluate_baseline(windows, cfg.data.marks)
    _report_out(report, args.out)
    if args.out:
        _echo_config(Path(args.out), cfg, {"command": "baseline", "input": args.input, "split": args.split})
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    res = bench.gradcheck_model(eps=args.eps, seed=args.seed)
    print(f"max relative error {res.max_rel_error:.3e} (eps {res.eps:g}, point seed {res.seed}, {res.n_params} params)")
    return EXIT_OK if res.max_rel_error < GRADCHECK_TOLERANCE else EXIT_NUMERIC


def cmd_params(args, cfg: RunConfig) -> int:
    print(pv.count_params(cfg.model))
    return EXIT_OK


COMMANDS = {
    "extract": cmd_extract,
    "windows": cmd_windows,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "baseline": cmd_baseline,
    "gradcheck": cmd_gradcheck,
    "params": cmd_params,
}


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        overrides = _parse_overrides(extra)
        doc = {}
        if args.config:
            try:
                doc = json.loads(Path(args.config).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
            if not isinstance(doc, dict):
                raise ConfigError("config file must hold a JSON object")
        cfg = build_config(doc, overrides)
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        if args.command == "synth":
            return cmd_synth(args, cfg, overrides)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ParameterError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, DataFormatError, RangeError, DimensionError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
