"""Central-difference audit of every backward rule and every model parameter."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import ModelConfig, ModelParameters, init_parameters, magcrn_forward
from .train import mae_loss

TOLERANCE = 1e-5
EPS = 1e-6
SMALL = dict(N=3, W=4, H=4, Z=5, d=2, P=2, F=3)


@dataclass
class GradcheckReport:
    op_errors: dict[str, float] = field(default_factory=dict)
    param_errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = TOLERANCE

    @property
    def failures(self) -> list[str]:
        ops = [f"op:{k}" for k, v in self.op_errors.items() if not v < self.tolerance]
        params = [f"param:{k}" for k, v in self.param_errors.items() if not v < self.tolerance]
        return ops + params

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_text(self) -> str:
        lines = [f"# tolerance {self.tolerance:g}, eps {EPS:g}"]
        for kind, errs in (("op", self.op_errors), ("param", self.param_errors)):
            for name, err in errs.items():
                status = "PASS" if err < self.tolerance else "FAIL"
                lines.append(f"{status} {kind} {name} max_rel_err={err:.3e}")
        lines.append("RESULT " + ("PASS" if self.passed else "FAIL " + ", ".join(self.failures)))
        return "\n".join(lines) + "\n"


def _weighted(rng, shape):
    # random weights make sum(w * op(x)) sensitive to every output coordinate
    w = rng.uniform(0.5, 1.5, shape) * rng.choice([-1.0, 1.0], shape)
    return lambda y: T.reduce(T.mul(y, w), "sum")


def _away_from_zero(rng, shape):
    return rng.uniform(0.2, 2.0, shape) * rng.choice([-1.0, 1.0], shape)


def _op_cases(rng) -> dict[str, list]:
    """(function of one tensor, point) pairs covering each backward rule."""
    u = lambda *s: rng.uniform(-2.0, 2.0, s)  # noqa: E731
    cases: dict[str, list] = {}

    def unary(name, fn, x):
        with T.no_grad():
            s = _weighted(rng, fn(T.Tensor(x)).shape)
        cases.setdefault(name, []).append((lambda t: s(fn(t)), x))

    unary("relu", T.relu, _away_from_zero(rng, (3, 4)))
    unary("sigmoid", T.sigmoid, u(3, 4))
    unary("tanh", T.tanh, u(3, 4))
    unary("abs", T.absolute, _away_from_zero(rng, (3, 4)))
    unary("neg", T.neg, u(3, 4))
    unary("softmax_rows", T.softmax_rows, u(3, 5))
    unary("reshape", lambda t: T.reshape(t, (4, 3)), u(3, 4))
    unary("take", lambda t: t[:, 1:3], u(3, 4))
    unary("reduce", lambda t: T.reduce(t, "mean", axes=1), u(3, 4))
    unary("reduce", lambda t: T.reduce(t, "sum", axes=(0, 2)), u(2, 3, 4))

    def binary(name, fn, a, b):
        with T.no_grad():
            sa = _weighted(rng, fn(T.Tensor(a), T.Tensor(b)).shape)
        cases.setdefault(name, []).append((lambda t: sa(fn(t, b)), a))
        cases.setdefault(name, []).append((lambda t: sa(fn(a, t)), b))

    for name, fn in (("add", T.add), ("sub", T.sub), ("mul", T.mul)):
        binary(name, fn, u(2, 3, 4), u(2, 3, 4))
        binary(name, fn, u(2, 3, 4), u(4))
        binary(name, fn, u(2, 3, 4), u())
    binary("matmul", T.matmul, u(3, 4), u(4, 2))
    binary("matmul", T.matmul, u(2, 3, 4), u(4, 2))
    binary("einsum", lambda a, b: T.einsum("nd,dio->nio", a, b), u(3, 2), u(2, 4, 5))
    binary("graph_mix", T.graph_mix, u(3, 3), u(2, 3, 4))
    binary("node_matmul", T.node_matmul, u(2, 3, 4), u(3, 4, 5))
    binary("concat", lambda a, b: T.concat([a, b], axis=-1), u(2, 3), u(2, 4))
    return cases


def check_ops(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    for name, cases in _op_cases(rng).items():
        errors[name] = max(T.finite_diff_check(f, T.Tensor(x), EPS) for f, x in cases)
    missing = set(T.BACKWARD_RULES) - set(errors)
    if missing:
        raise RuntimeError(f"no gradient check covers {sorted(missing)}")
    return errors


def with_parameter(params: ModelParameters, dotted: str, value: T.Tensor) -> ModelParameters:
    """Shallow copy of ``params`` with one named tensor swapped for ``value``."""
    root = copy.copy(params)
    node = root
    parts = dotted.split(".")
    for part in parts[:-1]:
        child = copy.copy(getattr(node, part))
        setattr(node, part, child)
        node = child
    setattr(node, parts[-1], value)
    return root


def small_problem(seed: int = 0):
    cfg = ModelConfig(seed=seed, **SMALL)
    params = init_parameters(cfg)
    rng = np.random.default_rng(seed + 1)
    # larger node embeddings than the default init keep every gradient well away from zero
    for cell in (params.past_cell, params.future_cell):
        cell.node_embeddings.data = rng.standard_normal(cell.node_embeddings.shape)
    for name, t in params.named_parameters().items():
        if name.endswith("bias") or name.endswith("bias_pool"):
            t.data = rng.uniform(-0.5, 0.5, t.shape)
    X_p = rng.standard_normal((cfg.N, cfg.W))
    U_p = rng.standard_normal((cfg.N, cfg.W, cfg.P))
    U_f = rng.standard_normal((cfg.N, cfg.H, cfg.F))
    target = rng.standard_normal((cfg.N, cfg.H)) * 3.0
    return params, (X_p, U_p, U_f), target


def check_parameters(seed: int = 0) -> dict[str, float]:
    params, inputs, target = small_problem(seed)
    errors: dict[str, float] = {}
    for name, tensor in params.named_parameters().items():
        def loss(t, name=name):
            swapped = with_parameter(params, name, t)
            return mae_loss(magcrn_forward(swapped, *inputs), target)

        errors[name] = T.finite_diff_check(loss, tensor, EPS)
    return errors


def run_gradcheck(seed: int = 0) -> GradcheckReport:
    return GradcheckReport(check_ops(seed), check_parameters(seed))
