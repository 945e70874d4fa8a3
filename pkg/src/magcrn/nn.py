"""MAGCRN: conditioned adaptive graph convolutional recurrent forecaster.

Pipeline per forward pass::

    C_p = Cond_past(X_p, U_p)        N x W x Z
    C_f = Cond_future(X_p, U_f)      N x H x Z
    E_p = AGCRN_past(C_p)            N x Z   (last hidden state)
    E_f = AGCRN_future(C_f)          N x Z
    out = Linear((1 - alpha) E_p + alpha E_f)   N x H

All forward functions accept either unbatched inputs (leading axis = nodes)
or batched inputs with one extra leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, asdict
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import AlphaOutOfRange, InvalidConfig, ShapeMismatch
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    N: int
    P: int
    F: int
    W: int = 24
    H: int = 24
    Z: int = 64
    d: int = 10
    alpha: float = 0.5
    seed: int = 0

    def validate(self) -> ModelConfig:
        for name in ("N", "P", "F", "W", "H", "Z", "d"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool):
                raise InvalidConfig(f"{name} must be an integer, got {v!r}")
        if self.N < 2:
            raise InvalidConfig(f"N must be >= 2 (graph needs two nodes), got {self.N}")
        if self.W != self.H:
            raise InvalidConfig(f"W must equal H (timestep-aligned conditioning), got W={self.W}, H={self.H}")
        for name in ("W", "Z", "d", "P", "F"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidConfig(f"alpha must lie in [0, 1], got {self.alpha}")
        return self

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class Linear:
    weight: Tensor  # in x out
    bias: Tensor  # out

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight) + self.bias

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


@dataclass
class CondBlock:
    obs_in: Linear
    obs_out: Linear
    cov_in: Linear
    cov_out: Linear

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for f in fields(self):
            yield from getattr(self, f.name).named(f"{prefix}.{f.name}")


@dataclass
class GatePool:
    weight_pool: Tensor  # d x Cin x Z
    bias_pool: Tensor  # d x Z


@dataclass
class AgcrnCell:
    node_embeddings: Tensor  # N x d
    update: GatePool
    reset: GatePool
    candidate: GatePool

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.node_embeddings", self.node_embeddings
        for gate in ("update", "reset", "candidate"):
            pool = getattr(self, gate)
            yield f"{prefix}.{gate}.weight_pool", pool.weight_pool
            yield f"{prefix}.{gate}.bias_pool", pool.bias_pool


@dataclass
class FusionHead:
    alpha: float
    out_layer: Linear

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.out_layer.named(f"{prefix}.out_layer")


@dataclass
class ModelParameters:
    config: ModelConfig
    past_cond: CondBlock
    future_cond: CondBlock
    past_cell: AgcrnCell
    future_cell: AgcrnCell
    head: FusionHead

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for part in ("past_cond", "future_cond", "past_cell", "future_cell", "head"):
            for name, t in getattr(self, part).named(part):
                out[name] = t
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        if set(state) != set(named):
            missing = sorted(set(named) - set(state))
            extra = sorted(set(state) - set(named))
            raise ShapeMismatch(f"state keys differ; missing={missing} extra={extra}")
        for k, t in named.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ShapeMismatch(f"{k}: expected {t.shape}, got {arr.shape}")
            t.data = arr.copy()

    def copy(self) -> ModelParameters:
        clone = init_parameters(self.config)
        clone.head.alpha = self.head.alpha
        clone.load_state_dict(self.state_dict())
        return clone


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {k: v.shape for k, v in init_parameters(config).named_parameters().items()}


def init_parameters(config: ModelConfig) -> ModelParameters:
    """Deterministic initialisation from ``config.seed``.

    Dense weights and weight pools are uniform in +-1/sqrt(fan_in), node
    embeddings are 0.1 * N(0, 1), biases and bias pools start at zero.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    Z, d = config.Z, config.d

    def leaf(arr):
        return Tensor(arr, requires_grad=True)

    def linear(n_in, n_out):
        bound = 1.0 / np.sqrt(n_in)
        return Linear(leaf(rng.uniform(-bound, bound, (n_in, n_out))), leaf(np.zeros(n_out)))

    def cond(n_cov):
        return CondBlock(linear(1, Z), linear(Z, Z), linear(n_cov, Z), linear(Z, Z))

    def pool():
        bound = 1.0 / np.sqrt(2 * Z)
        return GatePool(leaf(rng.uniform(-bound, bound, (d, 2 * Z, Z))), leaf(np.zeros((d, Z))))

    def cell():
        emb = leaf(0.1 * rng.standard_normal((config.N, d)))
        return AgcrnCell(emb, pool(), pool(), pool())

    params = ModelParameters(
        config=config,
        past_cond=cond(config.P),
        future_cond=cond(config.F),
        past_cell=cell(),
        future_cell=cell(),
        head=FusionHead(config.alpha, linear(Z, config.H)),
    )
    for name, t in params.named_parameters().items():
        t.name = name
    return params


# -- building blocks -------------------------------------------------------------


def cond_forward(block: CondBlock, X: Tensor, U: Tensor) -> Tensor:
    """out = obs_out(relu(obs_in(X))) + cov_out(relu(cov_in(U))), per node and step."""
    X, U = T._as_tensor(X), T._as_tensor(U)
    if X.shape[:-1] != U.shape[:-1]:
        raise ShapeMismatch(f"observation {X.shape} and covariate {U.shape} windows misaligned")
    if X.shape[-1] != block.obs_in.weight.shape[0]:
        raise ShapeMismatch(f"observations need {block.obs_in.weight.shape[0]} channel(s), got {X.shape[-1]}")
    if U.shape[-1] != block.cov_in.weight.shape[0]:
        raise ShapeMismatch(f"covariates need {block.cov_in.weight.shape[0]} channels, got {U.shape[-1]}")
    obs = block.obs_out(T.relu(block.obs_in(X)))
    cov = block.cov_out(T.relu(block.cov_in(U)))
    return obs + cov


def adaptive_adjacency(E_n: Tensor) -> Tensor:
    """Row-stochastic learned graph softmax(relu(E E^T))."""
    return T.softmax_rows(T.relu(T.einsum("nd,md->nm", E_n, E_n)))


def node_weights(E_n: Tensor, W_pool: Tensor, b_pool: Tensor) -> tuple[Tensor, Tensor]:
    """Per-node weights (N x Cin x Z) and biases (N x Z) drawn from the shared pools."""
    return T.einsum("nd,dio->nio", E_n, W_pool), T.matmul(E_n, b_pool)


def _gconv(A: Tensor, X: Tensor, weights: Tensor, biases: Tensor) -> Tensor:
    # X is batched: B x N x Cin
    return T.node_matmul(T.graph_mix(A, X), weights) + biases


def napl_gconv(A: Tensor, X_in: Tensor, E_n: Tensor, W_pool: Tensor, b_pool: Tensor) -> Tensor:
    """Graph convolution with node-adaptive parameters.

    ``out[n] = (A @ X_in)[n] @ (E_n[n] . W_pool) + E_n[n] . b_pool``
    """
    X_in = T._as_tensor(X_in)
    N = E_n.shape[0]
    if A.shape != (N, N) or X_in.shape[-2] != N:
        raise ShapeMismatch(f"graph {A.shape}, embeddings {E_n.shape}, input {X_in.shape}")
    if W_pool.shape[:2] != (E_n.shape[1], X_in.shape[-1]) or b_pool.shape != (E_n.shape[1], W_pool.shape[2]):
        raise ShapeMismatch(f"pools {W_pool.shape}, {b_pool.shape} do not fit input {X_in.shape}")
    w, b = node_weights(E_n, W_pool, b_pool)
    if X_in.ndim == 2:
        return T.reshape(_gconv(A, T.reshape(X_in, (1,) + X_in.shape), w, b), (N, W_pool.shape[2]))
    return _gconv(A, X_in, w, b)


def _cell_weights(cell: AgcrnCell) -> list[tuple[Tensor, Tensor]]:
    E = cell.node_embeddings
    return [node_weights(E, p.weight_pool, p.bias_pool) for p in (cell.update, cell.reset, cell.candidate)]


def _step(A: Tensor, x_t: Tensor, h_prev: Tensor, weights) -> Tensor:
    (wz, bz), (wr, br), (wh, bh) = weights
    xh = T.concat([x_t, h_prev], axis=-1)
    agg = T.graph_mix(A, xh)
    z = T.sigmoid(T.node_matmul(agg, wz) + bz)
    r = T.sigmoid(T.node_matmul(agg, wr) + br)
    cand = T.tanh(_gconv(A, T.concat([x_t, r * h_prev], axis=-1), wh, bh))
    return z * h_prev + (1.0 - z) * cand


def agcrn_cell_step(cell: AgcrnCell, A: Tensor, x_t: Tensor, h_prev: Tensor) -> Tensor:
    """One GRU-style update whose linear maps are node-adaptive graph convolutions."""
    x_t, h_prev = T._as_tensor(x_t), T._as_tensor(h_prev)
    if x_t.shape != h_prev.shape:
        raise ShapeMismatch(f"input {x_t.shape} and state {h_prev.shape} differ")
    Z = cell.update.weight_pool.shape[2]
    if x_t.shape[-1] != Z or 2 * Z != cell.update.weight_pool.shape[1]:
        raise ShapeMismatch(f"cell expects width {Z}, got {x_t.shape[-1]}")
    if x_t.ndim == 2:
        x_t = T.reshape(x_t, (1,) + x_t.shape)
        h_prev = T.reshape(h_prev, (1,) + h_prev.shape)
        return T.reshape(_step(A, x_t, h_prev, _cell_weights(cell)), h_prev.shape[1:])
    return _step(A, x_t, h_prev, _cell_weights(cell))


def agcrn_encode(cell: AgcrnCell, C: Tensor) -> Tensor:
    """Unroll the cell from a zero state over the time axis of ``C`` (..., N, T, Z).

    Returns the final hidden state (..., N, Z).
    """
    C = T._as_tensor(C)
    batched = C.ndim == 4
    if not batched:
        C = T.reshape(C, (1,) + C.shape)
    B, N, steps, Z = C.shape
    if steps < 1:
        raise ShapeMismatch("need at least one time step")
    A = adaptive_adjacency(cell.node_embeddings)
    weights = _cell_weights(cell)
    h = Tensor._wrap(np.zeros((B, N, Z)))
    for t in range(steps):
        h = _step(A, C[:, :, t, :], h, weights)
    return h if batched else T.reshape(h, (N, Z))


def fuse(E_p: Tensor, E_f: Tensor, alpha: float) -> Tensor:
    if not 0.0 <= alpha <= 1.0:
        raise AlphaOutOfRange(f"alpha must lie in [0, 1], got {alpha}")
    return (1.0 - alpha) * T._as_tensor(E_p) + alpha * T._as_tensor(E_f)


def magcrn_forward(params: ModelParameters, X_p, U_p, U_f, alpha: float | None = None) -> Tensor:
    """Forecast N x H (or B x N x H) target values.

    ``alpha`` overrides the head's mixing coefficient for this call only.
    """
    cfg = params.config
    alpha = params.head.alpha if alpha is None else alpha
    if not 0.0 <= alpha <= 1.0:
        raise AlphaOutOfRange(f"alpha must lie in [0, 1], got {alpha}")
    X_p, U_p, U_f = (T._as_tensor(a) for a in (X_p, U_p, U_f))
    lead = X_p.shape[:-2]
    expected = {
        "X_p": (X_p.shape, lead + (cfg.N, cfg.W)),
        "U_p": (U_p.shape, lead + (cfg.N, cfg.W, cfg.P)),
        "U_f": (U_f.shape, lead + (cfg.N, cfg.H, cfg.F)),
    }
    for name, (got, want) in expected.items():
        if got != want:
            raise ShapeMismatch(f"{name} has shape {got}, expected {want}")
    X = T.reshape(X_p, X_p.shape + (1,))
    C_p = cond_forward(params.past_cond, X, U_p)
    C_f = cond_forward(params.future_cond, X, U_f)
    E_p = agcrn_encode(params.past_cell, C_p)
    E_f = agcrn_encode(params.future_cell, C_f)
    return params.head.out_layer(fuse(E_p, E_f, alpha))


def predict(params: ModelParameters, X_p: np.ndarray, U_p: np.ndarray, U_f: np.ndarray,
            alpha: float | None = None, chunk: int = 64) -> np.ndarray:
    """Batched forward pass without recording gradients; returns B x N x H."""
    outs = []
    with T.no_grad():
        for i in range(0, X_p.shape[0], chunk):
            sl = slice(i, i + chunk)
            outs.append(magcrn_forward(params, X_p[sl], U_p[sl], U_f[sl], alpha=alpha).data)
    if not outs:
        return np.zeros((0, params.config.N, params.config.H))
    return np.concatenate(outs, axis=0)
