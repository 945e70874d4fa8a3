"""MAE training with Adam, warm-restart cosine annealing and early stopping."""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .data import WindowBatch
from .errors import (
    CorruptCheckpoint,
    EmptySplit,
    InvalidConfig,
    IoError,
    NonFiniteLoss,
    ShapeMismatch,
    VersionMismatch,
)
from .nn import ModelConfig, ModelParameters, init_parameters, magcrn_forward, predict

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr_max: float = 1e-2
    lr_min: float = 1e-7
    period: int = 20
    patience: int = 100
    batch_size: int = 16
    max_epochs: int = 1000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> TrainConfig:
        if not 0 <= self.lr_min < self.lr_max:
            raise InvalidConfig(f"need 0 <= lr_min < lr_max, got {self.lr_min}, {self.lr_max}")
        if self.period < 1 or self.patience < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise InvalidConfig("period, patience, batch_size and max_epochs must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise InvalidConfig("Adam betas must lie in [0, 1) and eps must be positive")
        return self


def mae_loss(pred: T.Tensor, target) -> T.Tensor:
    target = T._as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {target.shape}")
    return T.reduce(T.absolute(pred - target), "mean")


def cosine_lr(epoch: int, cfg: TrainConfig) -> float:
    phase = (epoch % cfg.period) / cfg.period
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * phase))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, T.Tensor]) -> AdamState:
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: dict[str, T.Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, cfg: TrainConfig = TrainConfig()) -> None:
    """Bias-corrected Adam update; replaces each parameter's array."""
    if set(grads) != set(params):
        raise ShapeMismatch("gradient names do not match parameter names")
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


class EarlyStopping:
    """Track the best validation loss; signal a stop after ``patience`` flat epochs."""

    def __init__(self, patience: int, best: float = math.inf, best_epoch: int = -1, since_best: int = 0):
        self.patience = patience
        self.best = best
        self.best_epoch = best_epoch
        self.since_best = since_best

    def update(self, epoch: int, val_loss: float) -> bool:
        """Returns True when ``val_loss`` is a new best."""
        if val_loss < self.best:
            self.best, self.best_epoch, self.since_best = val_loss, epoch, 0
            return True
        self.since_best += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.since_best >= self.patience


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""

    epoch: int  # next epoch to run
    params: ModelParameters
    adam: AdamState
    best_val: float
    best_epoch: int
    since_best: int
    best_state: dict[str, np.ndarray]


@dataclass
class TrainResult:
    best_params: ModelParameters
    history: list[dict]
    best_epoch: int
    best_val: float
    state: TrainState
    stopped_early: bool


def batch_loss(params: ModelParameters, batch: WindowBatch) -> T.Tensor:
    return mae_loss(magcrn_forward(params, batch.X_p, batch.U_p, batch.U_f), batch.X_f)


def validation_mae(params: ModelParameters, batch: WindowBatch) -> float:
    pred = predict(params, batch.X_p, batch.U_p, batch.U_f)
    return float(np.mean(np.abs(pred - batch.X_f)))


def train_loop(params: ModelParameters, train: WindowBatch, val: WindowBatch, cfg: TrainConfig,
               resume: TrainState | None = None,
               on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Run epochs until patience runs out or ``cfg.max_epochs`` is reached.

    Batch order in epoch ``e`` depends only on ``(cfg.seed, e)``, so a run
    resumed from a :class:`TrainState` replays the uninterrupted run.
    """
    cfg.validate()
    if len(train) == 0 or len(val) == 0:
        raise EmptySplit("training and validation need at least one window each")
    if resume is None:
        named = params.named_parameters()
        state = TrainState(0, params, AdamState.zeros_like(named), math.inf, -1, 0, params.state_dict())
    else:
        state = resume
        params = state.params
        named = params.named_parameters()
    stopper = EarlyStopping(cfg.patience, state.best_val, state.best_epoch, state.since_best)
    history: list[dict] = []
    n = len(train)
    stopped = stopper.should_stop
    epoch = state.epoch
    while epoch < cfg.max_epochs and not stopped:
        lr = cosine_lr(epoch, cfg)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = train.subset(order[start: start + cfg.batch_size])
            with T.GradTape() as tape:
                loss = batch_loss(params, batch)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLoss(f"loss became {value} at epoch {epoch}, batch starting {start} (lr={lr:.3g})")
            tape.backward(loss)
            grads = {k: p.grad for k, p in named.items()}
            adam_step(named, grads, state.adam, lr, cfg)
            total += value * len(batch)
        train_loss = total / n
        val_loss = validation_mae(params, val)
        if not math.isfinite(val_loss):
            raise NonFiniteLoss(f"validation loss became {val_loss} at epoch {epoch}")
        if stopper.update(epoch, val_loss):
            state.best_state = params.state_dict()
        row = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr}
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
        log.debug("epoch %d train %.5f val %.5f lr %.3g", epoch, train_loss, val_loss, lr)
        epoch += 1
        stopped = stopper.should_stop
    state.epoch = epoch
    state.best_val, state.best_epoch, state.since_best = stopper.best, stopper.best_epoch, stopper.since_best
    best = init_parameters(params.config)
    best.head.alpha = params.head.alpha
    best.load_state_dict(state.best_state)
    return TrainResult(best, history, stopper.best_epoch, stopper.best, state, stopped)


def write_history(history: list[dict], path) -> None:
    with Path(path).open("w") as fh:
        fh.write("epoch\ttrain_loss\tval_loss\tlr\n")
        for row in history:
            fh.write(f"{row['epoch']}\t{row['train_loss']!r}\t{row['val_loss']!r}\t{row['lr']!r}\n")


def read_history(path) -> list[dict]:
    rows = []
    with Path(path).open() as fh:
        next(fh)
        for line in fh:
            e, tr, va, lr = line.rstrip("\n").split("\t")
            rows.append({"epoch": int(e), "train_loss": float(tr), "val_loss": float(va), "lr": float(lr)})
    return rows


# -- checkpoints ----------------------------------------------------------------------

MAGIC_PREFIX = b"MAGCRN"
FORMAT_VERSION = b"1"
MAGIC = MAGIC_PREFIX + FORMAT_VERSION + b"\n"
_END = "end_header"


@dataclass
class Checkpoint:
    """Model weights plus the bookkeeping needed to evaluate or resume.

    ``params`` holds the weights to use (the best epoch for a finished run);
    ``tensors`` carries any further named arrays (optimizer moments,
    resume weights, normaliser statistics); ``meta`` carries text fields.
    """

    config: ModelConfig
    params: dict[str, np.ndarray]
    epoch: int = 0
    best_val: float = math.inf
    adam_step: int = 0
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    lines = [f"config.{k}={_fmt(v)}" for k, v in asdict(ckpt.config).items()]
    lines += [f"state.epoch={ckpt.epoch}", f"state.best_val={ckpt.best_val!r}", f"state.adam_step={ckpt.adam_step}"]
    for k, v in sorted(ckpt.meta.items()):
        if "\n" in k or "\n" in v or "=" in k:
            raise ValueError(f"meta entry {k!r} cannot be stored in a line-based header")
        lines.append(f"meta.{k}={v}")
    arrays = [(f"param.{k}", v) for k, v in ckpt.params.items()]
    arrays += [(f"extra.{k}", v) for k, v in ckpt.tensors.items()]
    lines.append(f"tensors={len(arrays)}")
    for name, arr in arrays:
        lines.append(" ".join([name, *map(str, np.shape(arr))]))
    lines.append(_END)
    header = ("\n".join(lines) + "\n").encode("utf-8")
    body = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in arrays)
    count = sum(int(np.size(arr)) for _, arr in arrays)
    try:
        with Path(path).open("wb") as fh:
            fh.write(MAGIC + header + body + struct.pack("<Q", count))
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def _parse_config(values: dict[str, str]) -> ModelConfig:
    kwargs = {}
    for f in fields(ModelConfig):
        if f.name not in values:
            raise CorruptCheckpoint(f"config.{f.name} missing from header")
        raw = values[f.name]
        kwargs[f.name] = float(raw) if f.name == "alpha" else int(raw)
    return ModelConfig(**kwargs)


def load_checkpoint(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if not blob.startswith(MAGIC_PREFIX) or len(blob) < len(MAGIC):
        raise CorruptCheckpoint(f"{path} is not a MAGCRN checkpoint")
    if blob[len(MAGIC_PREFIX): len(MAGIC)] != FORMAT_VERSION + b"\n":
        raise VersionMismatch(f"checkpoint format {blob[len(MAGIC_PREFIX):len(MAGIC) - 1]!r}, expected {FORMAT_VERSION!r}")
    marker = ("\n" + _END + "\n").encode()
    cut = blob.find(marker, len(MAGIC) - 1)
    if cut < 0:
        raise CorruptCheckpoint("header terminator missing")
    try:
        header = blob[len(MAGIC): cut].decode("utf-8").split("\n")
    except UnicodeDecodeError as exc:
        raise CorruptCheckpoint("header is not valid text") from exc
    body = blob[cut + len(marker):]
    config_vals: dict[str, str] = {}
    state: dict[str, str] = {}
    meta: dict[str, str] = {}
    shapes: list[tuple[str, tuple[int, ...]]] = []
    n_tensors = None
    try:
        for line in header:
            if n_tensors is not None:
                name, *dims = line.split(" ")
                shapes.append((name, tuple(int(d) for d in dims)))
                continue
            key, _, value = line.partition("=")
            section, _, sub = key.partition(".")
            if key == "tensors":
                n_tensors = int(value)
            elif section == "config":
                config_vals[sub] = value
            elif section == "state":
                state[sub] = value
            elif section == "meta":
                meta[sub] = value
            else:
                raise CorruptCheckpoint(f"unexpected header line {line!r}")
        if n_tensors is None or len(shapes) != n_tensors:
            raise CorruptCheckpoint("tensor table length disagrees with header")
        config = _parse_config(config_vals)
        epoch, best_val, adam_step_ = int(state["epoch"]), float(state["best_val"]), int(state["adam_step"])
    except (ValueError, KeyError) as exc:
        raise CorruptCheckpoint(f"malformed header: {exc}") from exc
    count = sum(int(np.prod(s)) for _, s in shapes)
    if len(body) != 8 * count + 8:
        raise CorruptCheckpoint(f"expected {8 * count + 8} data bytes, found {len(body)}")
    (stored,) = struct.unpack("<Q", body[-8:])
    if stored != count:
        raise CorruptCheckpoint(f"element count {stored} disagrees with header total {count}")
    flat = np.frombuffer(body[:-8], dtype="<f8").astype(np.float64)
    params: dict[str, np.ndarray] = {}
    extra: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in shapes:
        size = int(np.prod(shape))
        arr = flat[offset: offset + size].reshape(shape).copy()
        offset += size
        kind, _, key = name.partition(".")
        if kind == "param":
            params[key] = arr
        elif kind == "extra":
            extra[key] = arr
        else:
            raise CorruptCheckpoint(f"unknown tensor group in {name!r}")
    return Checkpoint(config, params, epoch, best_val, adam_step_, extra, meta)


def checkpoint_from_result(result: TrainResult, meta: dict[str, str] | None = None,
                           extra: dict[str, np.ndarray] | None = None) -> Checkpoint:
    """Best weights plus full resume state of a finished run."""
    st = result.state
    tensors = {f"resume.{k}": v for k, v in st.params.state_dict().items()}
    tensors.update({f"adam_m.{k}": v for k, v in st.adam.m.items()})
    tensors.update({f"adam_v.{k}": v for k, v in st.adam.v.items()})
    tensors.update(extra or {})
    meta = dict(meta or {})
    meta["best_epoch"] = str(st.best_epoch)
    meta["since_best"] = str(st.since_best)
    meta["alpha"] = repr(st.params.head.alpha)
    return Checkpoint(
        config=result.best_params.config,
        params=result.best_params.state_dict(),
        epoch=st.epoch,
        best_val=st.best_val,
        adam_step=st.adam.step,
        tensors=tensors,
        meta=meta,
    )


def params_from_checkpoint(ckpt: Checkpoint) -> ModelParameters:
    params = init_parameters(ckpt.config)
    if "alpha" in ckpt.meta:
        params.head.alpha = float(ckpt.meta["alpha"])
    try:
        params.load_state_dict(ckpt.params)
    except ShapeMismatch as exc:
        raise CorruptCheckpoint(str(exc)) from exc
    return params


def state_from_checkpoint(ckpt: Checkpoint) -> TrainState:
    """Rebuild the resume state written by :func:`checkpoint_from_result`."""
    params = init_parameters(ckpt.config)
    if "alpha" in ckpt.meta:
        params.head.alpha = float(ckpt.meta["alpha"])

    def group(prefix):
        return {k[len(prefix):]: v for k, v in ckpt.tensors.items() if k.startswith(prefix)}

    current = group("resume.")
    if not current:
        raise CorruptCheckpoint("checkpoint holds no resume state")
    params.load_state_dict(current)
    adam = AdamState(group("adam_m."), group("adam_v."), ckpt.adam_step)
    return TrainState(
        epoch=ckpt.epoch,
        params=params,
        adam=adam,
        best_val=ckpt.best_val,
        best_epoch=int(ckpt.meta.get("best_epoch", -1)),
        since_best=int(ckpt.meta.get("since_best", 0)),
        best_state={k: v.copy() for k, v in ckpt.params.items()},
    )
