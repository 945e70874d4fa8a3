"""Forecast error metrics and the multi-horizon evaluation protocol."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import CovariateSpec, Normalizer, RawDataset, make_windows, stack_windows
from .errors import EmptyInput, ShapeMismatch, ZeroTargetNorm
from .nn import ModelParameters, predict


def _pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {target.shape}")
    if pred.size == 0:
        raise EmptyInput("no elements to score")
    return pred, target


def mae(pred, target) -> float:
    pred, target = _pair(pred, target)
    return float(np.mean(np.abs(pred - target)))


def rmse(pred, target) -> float:
    pred, target = _pair(pred, target)
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def mre(pred, target) -> float:
    """Absolute error normalised by the l1 norm of the target."""
    pred, target = _pair(pred, target)
    denom = np.sum(np.abs(target))
    if denom == 0:
        raise ZeroTargetNorm("target has zero l1 norm")
    return float(np.sum(np.abs(pred - target)) / denom)


@dataclass
class HorizonMetrics:
    mae: float
    rmse: float
    mre: float
    window_count: int


@dataclass
class EvalReport:
    horizons: dict[int, HorizonMetrics] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"meta.{k} = {v}" for k, v in sorted(self.metadata.items())]
        for delta in sorted(self.horizons):
            m = self.horizons[delta]
            lines.append(f"horizon.{delta}.mae = {m.mae:.6g}")
            lines.append(f"horizon.{delta}.rmse = {m.rmse:.6g}")
            lines.append(f"horizon.{delta}.mre = {m.mre:.6g}")
            lines.append(f"horizon.{delta}.window_count = {m.window_count}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> EvalReport:
        report = cls()
        raw: dict[int, dict[str, str]] = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition(" = ")
            parts = key.split(".")
            if parts[0] == "meta":
                report.metadata[".".join(parts[1:])] = value
            elif parts[0] == "horizon" and len(parts) == 3:
                raw.setdefault(int(parts[1]), {})[parts[2]] = value
            else:
                raise ValueError(f"unrecognised report line {line!r}")
        for delta, vals in raw.items():
            report.horizons[delta] = HorizonMetrics(
                float(vals["mae"]), float(vals["rmse"]), float(vals["mre"]), int(vals["window_count"])
            )
        return report


def predictions_for(params: ModelParameters, split: RawDataset, spec: CovariateSpec,
                    normalizer: Normalizer, delta: int, alpha: float | None = None):
    """Denormalised (prediction, target) arrays, each windows x N x H."""
    cfg = params.config
    batch = stack_windows(make_windows(split, spec, cfg.W, cfg.H, delta))
    pred = predict(params, batch.X_p, batch.U_p, batch.U_f, alpha=alpha)
    return normalizer.invert_target(pred), normalizer.invert_target(batch.X_f)


def evaluate(params: ModelParameters, split: RawDataset, spec: CovariateSpec, normalizer: Normalizer,
             horizons=(0, 24, 48), alpha: float | None = None,
             metadata: dict[str, str] | None = None) -> EvalReport:
    """Score a trained model on a normalised split for each horizon offset.

    The same network is reused for every offset; only the windows move.
    """
    report = EvalReport(metadata=dict(metadata or {}))
    for delta in horizons:
        pred, target = predictions_for(params, split, spec, normalizer, delta, alpha)
        report.horizons[int(delta)] = HorizonMetrics(
            mae(pred, target), rmse(pred, target), mre(pred, target), pred.shape[0]
        )
    return report
