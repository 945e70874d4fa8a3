"""``magcrn`` command line: synth, train, eval, forecast, sweep, gradcheck.

Run configuration is a flat ``key = value`` file (``#`` starts a comment).
Every key has a default except ``dataset``; ``dataset = synthetic`` builds
the data in-process from the ``synth.*`` keys instead of reading a CSV.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import data as D
from .errors import (
    IncompatibleCheckpoint,
    InvalidConfig,
    InvalidSweepValue,
    IoError,
    MagcrnError,
)
from .gradcheck import run_gradcheck
from .metrics import evaluate
from .nn import ModelConfig, ModelParameters, init_parameters, predict
from .synth import SynthConfig, generate, ground_truth
from .train import (
    Checkpoint,
    TrainConfig,
    checkpoint_from_result,
    load_checkpoint,
    params_from_checkpoint,
    save_checkpoint,
    train_loop,
    write_history,
)

log = logging.getLogger("magcrn")

GRADCHECK_FAILED = 1
SYNTHETIC = "synthetic"
SPLITS = ("train", "validation", "test")
MODEL_KEYS = ("W", "H", "Z", "d", "alpha")
TRAIN_KEYS = ("lr_max", "lr_min", "period", "patience", "batch_size", "max_epochs")


@dataclass
class RunConfig:
    dataset: str | None = None
    out: str = "runs/default"
    seed: int = 0
    W: int = 24
    H: int = 24
    Z: int = 64
    d: int = 10
    alpha: float = 0.5
    lr_max: float = 1e-2
    lr_min: float = 1e-7
    period: int = 20
    patience: int = 100
    batch_size: int = 16
    max_epochs: int = 1000
    past_groups: str = "traffic,calendar"
    future_groups: str = "weather,calendar"
    horizons: str = "0,24,48"
    synth: dict[str, str] = field(default_factory=dict)

    def model_config(self, N: int, spec: D.CovariateSpec, **override) -> ModelConfig:
        kw = {k: getattr(self, k) for k in MODEL_KEYS}
        kw.update(override)
        return ModelConfig(N=N, P=spec.P, F=spec.F, seed=self.seed, **kw).validate()

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **{k: getattr(self, k) for k in TRAIN_KEYS}).validate()

    def covariates(self) -> D.CovariateSpec:
        return D.CovariateSpec.from_groups(_csv_list(self.past_groups), _csv_list(self.future_groups))

    def horizon_list(self) -> tuple[int, ...]:
        return parse_horizons(self.horizons)

    def synth_config(self) -> SynthConfig:
        values = dict(self.synth)
        values.setdefault("seed", str(self.seed))
        return SynthConfig.from_mapping(values)

    def require_dataset(self) -> str:
        if not self.dataset:
            raise InvalidConfig("config key 'dataset' is required (a CSV path or 'synthetic')")
        return self.dataset

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name == "synth":
                continue
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {'' if v is None else v}")
        lines += [f"synth.{k} = {v}" for k, v in sorted(self.synth.items())]
        return "\n".join(lines) + "\n"


def _csv_list(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def parse_horizons(text: str) -> tuple[int, ...]:
    try:
        hs = tuple(sorted({int(s) for s in _csv_list(text)}))
    except ValueError:
        raise InvalidConfig(f"horizons must be comma-separated integers, got {text!r}") from None
    if not hs or min(hs) < 0:
        raise InvalidConfig(f"horizons must be non-negative and non-empty, got {text!r}")
    return hs


def _coerce(cfg: RunConfig, key: str, value: str) -> RunConfig:
    if key.startswith("synth."):
        sub = key[len("synth."):]
        if sub not in {f.name for f in fields(SynthConfig)}:
            raise InvalidConfig(f"unknown config key {key!r}")
        return replace(cfg, synth={**cfg.synth, sub: value})
    known = {f.name: f for f in fields(RunConfig) if f.name != "synth"}
    if key not in known:
        raise InvalidConfig(f"unknown config key {key!r}")
    default = getattr(RunConfig, key)
    if key == "dataset":
        return replace(cfg, dataset=value or None)
    try:
        typed = type(default)(value)
    except ValueError:
        raise InvalidConfig(f"bad value for {key!r}: {value!r}") from None
    return replace(cfg, **{key: typed})


def parse_config_text(text: str, base: RunConfig | None = None, origin: Path | None = None) -> RunConfig:
    cfg = base or RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise InvalidConfig(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = key.strip(), value.strip()
        if key == "dataset" and origin is not None and value and value != SYNTHETIC:
            path = Path(value)
            value = str(path if path.is_absolute() else origin.parent / path)
        cfg = _coerce(cfg, key, value)
    return cfg


def load_run_config(path: str | None, overrides=(), seed: int | None = None, out: str | None = None) -> RunConfig:
    cfg = RunConfig()
    if path:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise IoError(f"cannot read config {path}: {exc}") from exc
        cfg = parse_config_text(text, cfg, p)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise InvalidConfig(f"--set expects key=value, got {item!r}")
        cfg = _coerce(cfg, key.strip(), value.strip())
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if out is not None:
        cfg = replace(cfg, out=out)
    return cfg


# -- pipeline -----------------------------------------------------------------------------


@dataclass
class Prepared:
    """Normalised splits, the fitted normaliser and the covariate layout."""

    dataset: D.RawDataset
    splits: dict[str, D.RawDataset]
    normalizer: D.Normalizer
    spec: D.CovariateSpec


def load_dataset(cfg: RunConfig, dataset: str | None = None) -> D.RawDataset:
    source = dataset or cfg.require_dataset()
    raw = generate(cfg.synth_config()) if source == SYNTHETIC else D.load_csv(source)
    return D.with_calendar(raw)


def prepare(cfg: RunConfig, dataset: str | None = None, normalizer: D.Normalizer | None = None) -> Prepared:
    ds = load_dataset(cfg, dataset)
    spec = cfg.covariates()
    parts = D.chronological_split(ds)
    normalizer = normalizer or D.fit_normalizer(parts[0])
    splits = {name: normalizer.apply(p) for name, p in zip(SPLITS, parts)}
    return Prepared(ds, splits, normalizer, spec)


def _windows(split: D.RawDataset, spec: D.CovariateSpec, W: int, H: int) -> D.WindowBatch:
    return D.stack_windows(D.make_windows(split, spec, W, H))


def checkpoint_meta(prep: Prepared) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    meta = {
        "channels": ",".join(prep.normalizer.channels),
        "stations": ",".join(prep.dataset.station_ids),
        "past_channels": ",".join(prep.spec.past_channels),
        "future_channels": ",".join(prep.spec.future_channels),
    }
    extra = {"norm.mean": prep.normalizer.mean, "norm.std": prep.normalizer.std}
    return meta, extra


def normalizer_from_checkpoint(ckpt: Checkpoint) -> tuple[D.Normalizer, D.CovariateSpec]:
    try:
        channels = tuple(ckpt.meta["channels"].split(","))
        norm = D.Normalizer(channels, ckpt.tensors["norm.mean"], ckpt.tensors["norm.std"])
        spec = D.CovariateSpec(tuple(ckpt.meta["past_channels"].split(",")),
                               tuple(ckpt.meta["future_channels"].split(",")))
    except KeyError as exc:
        raise IncompatibleCheckpoint(f"checkpoint lacks normaliser/covariate record {exc}") from None
    return norm, spec


def train_model(cfg: RunConfig, prep: Prepared, out: Path, **model_override) -> tuple[ModelParameters, Path]:
    """Train on ``prep`` and write checkpoint, history and resolved config under ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    mcfg = cfg.model_config(prep.dataset.N, prep.spec, **model_override)
    tcfg = cfg.train_config()
    train_w = _windows(prep.splits["train"], prep.spec, mcfg.W, mcfg.H)
    val_w = _windows(prep.splits["validation"], prep.spec, mcfg.W, mcfg.H)
    result = train_loop(init_parameters(mcfg), train_w, val_w, tcfg)
    meta, extra = checkpoint_meta(prep)
    ckpt_path = out / "checkpoint.magcrn"
    save_checkpoint(ckpt_path, checkpoint_from_result(result, meta, extra))
    write_history(result.history, out / "history.tsv")
    resolved = replace(cfg, out=str(out), **{k: v for k, v in model_override.items() if k in MODEL_KEYS})
    (out / "config.resolved").write_text(resolved.to_text())
    return result.best_params, ckpt_path


def check_compatible(ckpt: Checkpoint, ds: D.RawDataset) -> None:
    if ckpt.config.N != ds.N:
        raise IncompatibleCheckpoint(f"checkpoint was trained on N={ckpt.config.N} stations, dataset has {ds.N}")
    want = ckpt.meta.get("channels", "")
    if want and tuple(want.split(",")) != ds.channels:
        raise IncompatibleCheckpoint(f"checkpoint channels {want} differ from dataset channels {','.join(ds.channels)}")


def load_for_eval(ckpt_path: str, cfg: RunConfig, dataset: str | None):
    ckpt = load_checkpoint(ckpt_path)
    ds = load_dataset(cfg, dataset)
    check_compatible(ckpt, ds)
    norm, spec = normalizer_from_checkpoint(ckpt)
    parts = D.chronological_split(ds)
    splits = {name: norm.apply(p) for name, p in zip(SPLITS, parts)}
    return params_from_checkpoint(ckpt), Prepared(ds, splits, norm, spec)


# -- sweep -------------------------------------------------------------------------------


SWEEP_PARAMETERS = ("Z", "alpha")


def parse_sweep_values(parameter: str, text: str) -> list:
    if parameter not in SWEEP_PARAMETERS:
        raise InvalidSweepValue(f"can only sweep {SWEEP_PARAMETERS}, got {parameter!r}")
    out: list = []
    for item in _csv_list(text):
        try:
            v = int(item) if parameter == "Z" else float(item)
        except ValueError:
            raise InvalidSweepValue(f"{parameter} value {item!r} is not a number") from None
        if parameter == "Z" and v < 1:
            raise InvalidSweepValue(f"Z must be >= 1, got {v}")
        if parameter == "alpha" and not 0.0 <= v <= 1.0:
            raise InvalidSweepValue(f"alpha must lie in [0, 1], got {v}")
        if v not in out:
            out.append(v)
    if not out:
        raise InvalidSweepValue("no sweep values given")
    return out


def _sweep_point(args) -> dict[int, float]:
    cfg, parameter, value, out = args
    prep = prepare(cfg)
    params, _ = train_model(cfg, prep, Path(out), **{parameter: value})
    report = evaluate(params, prep.splits["test"], prep.spec, prep.normalizer, cfg.horizon_list())
    return {h: m.mae for h, m in report.horizons.items()}


def run_sweep(cfg: RunConfig, parameter: str, values: list, frozen: bool = False,
              workers: int | None = None) -> list[tuple[object, str, dict[int, float]]]:
    """One row per value: (value, mode, {horizon: test MAE})."""
    out = Path(cfg.out)
    if frozen:
        if parameter != "alpha":
            raise InvalidSweepValue("--frozen only applies to the alpha sweep")
        prep = prepare(cfg)
        params, _ = train_model(cfg, prep, out / "sweep" / "frozen", alpha=0.5)
        rows = []
        for v in values:
            rep = evaluate(params, prep.splits["test"], prep.spec, prep.normalizer, cfg.horizon_list(), alpha=v)
            rows.append((v, "frozen", {h: m.mae for h, m in rep.horizons.items()}))
        return rows
    jobs = [(cfg, parameter, v, str(out / "sweep" / f"{parameter}={v}")) for v in values]
    workers = max(1, min(workers or sweep_workers(), len(jobs)))
    if workers == 1:
        results = [_sweep_point(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_point, jobs))
    return [(v, "retrain", r) for v, r in zip(values, results)]


def sweep_workers() -> int:
    raw = os.environ.get("MAGCRN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise InvalidConfig(f"MAGCRN_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def sweep_table(parameter: str, rows) -> str:
    horizons = sorted({h for _, _, r in rows for h in r})
    lines = ["\t".join([parameter, "mode"] + [f"mae_h{h}" for h in horizons])]
    for value, mode, r in rows:
        lines.append("\t".join([str(value), mode] + [repr(r[h]) for h in horizons]))
    return "\n".join(lines) + "\n"


# -- commands ----------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig) -> int:
    scfg = cfg.synth_config()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    D.write_csv(generate(scfg), out / "synth.csv")
    (out / "synth.truth.txt").write_text(ground_truth(scfg).to_text())
    print(out / "synth.csv")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    cfg.require_dataset()
    prep = prepare(cfg)
    _, ckpt = train_model(cfg, prep, Path(cfg.out))
    print(ckpt)
    return 0


def cmd_eval(cfg: RunConfig, checkpoint: str, dataset: str | None, horizons: str | None, split: str) -> int:
    params, prep = load_for_eval(checkpoint, cfg, dataset)
    hs = parse_horizons(horizons) if horizons else cfg.horizon_list()
    report = evaluate(params, prep.splits[split], prep.spec, prep.normalizer, hs,
                      metadata={"split": split, "checkpoint": str(checkpoint)})
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    text = report.to_text()
    (out / f"eval.{split}.txt").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_forecast(cfg: RunConfig, checkpoint: str, dataset: str | None, split: str, index: int, delta: int) -> int:
    params, prep = load_for_eval(checkpoint, cfg, dataset)
    part = prep.splits[split]
    samples = D.make_windows(part, prep.spec, params.config.W, params.config.H, delta)
    try:
        s = samples[index]
    except IndexError:
        raise InvalidConfig(f"window index {index} out of range for {len(samples)} windows") from None
    pred = prep.normalizer.invert_target(predict(params, s.X_p, s.U_p, s.U_f))
    obs = prep.normalizer.invert_target(s.X_f)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    h0 = s.t0_index + delta + 1
    stamps = part.timestamps[h0: h0 + params.config.H]
    lines = ["timestamp,station_id,no2_forecast,no2_observed"]
    for k, ts in enumerate(stamps):
        when = ts.astype("datetime64[s]").item().strftime(D.TIMESTAMP_FORMAT)
        for n, sid in enumerate(prep.dataset.station_ids):
            lines.append(f"{when},{sid},{pred[n, k]:.6f},{obs[n, k]:.6f}")
    path = out / "forecast.csv"
    path.write_text("\n".join(lines) + "\n")
    print(path)
    return 0


def cmd_sweep(cfg: RunConfig, parameter: str, values: str, frozen: bool) -> int:
    cfg.require_dataset()
    vals = parse_sweep_values(parameter, values)
    rows = run_sweep(cfg, parameter, vals, frozen=frozen)
    text = sweep_table(parameter, rows)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"sweep.{parameter}.tsv").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_gradcheck(cfg: RunConfig) -> int:
    report = run_gradcheck(cfg.seed)
    text = report.to_text()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "gradcheck.txt").write_text(text)
    sys.stdout.write(text)
    return 0 if report.passed else GRADCHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration file (key = value)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="magcrn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic CSV and its ground truth")
    sub.add_parser("train", parents=[common], help="train and write checkpoint, history, resolved config")

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint per horizon offset")
    p.add_argument("checkpoint")
    p.add_argument("--dataset", help="CSV path or 'synthetic' (defaults to the config's dataset)")
    p.add_argument("--horizons", help="comma-separated offsets, e.g. 0,24,48")
    p.add_argument("--split", choices=SPLITS, default="test")

    p = sub.add_parser("forecast", parents=[common], help="predict one window to CSV")
    p.add_argument("checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--index", type=int, default=-1, help="window index within the split (default: last)")
    p.add_argument("--delta", type=int, default=0, help="horizon offset")

    p = sub.add_parser("sweep", parents=[common], help="retrain (or re-evaluate) over Z or alpha values")
    p.add_argument("parameter", choices=SWEEP_PARAMETERS)
    p.add_argument("values", help="comma-separated values")
    p.add_argument("--frozen", action="store_true", help="alpha only: train once at 0.5, re-evaluate per value")

    sub.add_parser("gradcheck", parents=[common], help="finite-difference audit of every gradient")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_run_config(args.config, args.set, args.seed, args.out)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.dataset, args.horizons, args.split)
        if args.command == "forecast":
            return cmd_forecast(cfg, args.checkpoint, args.dataset, args.split, args.index, args.delta)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.parameter, args.values, args.frozen)
        return cmd_gradcheck(cfg)
    except MagcrnError as exc:
        print(f"magcrn: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"magcrn: IoError: {exc}", file=sys.stderr)
        return IoError.exit_code


if __name__ == "__main__":
    sys.exit(main())
