import numpy as np
import pytest

from magcrn.nn import ModelConfig, init_parameters


def random_inputs(cfg, rng, batch=None):
    lead = () if batch is None else (batch,)
    return (
        rng.standard_normal(lead + (cfg.N, cfg.W)),
        rng.standard_normal(lead + (cfg.N, cfg.W, cfg.P)),
        rng.standard_normal(lead + (cfg.N, cfg.H, cfg.F)),
    )


@pytest.fixture
def small_cfg():
    return ModelConfig(N=4, P=3, F=2, W=5, H=5, Z=6, d=3, seed=0)


@pytest.fixture
def small_params(small_cfg):
    return init_parameters(small_cfg)


def tiny_problem(seed=0, hours=160, N=3, W=6, Z=4):
    """Small synthetic train/validation windows for fast training tests."""
    from magcrn import data as D
    from magcrn.synth import SynthConfig, generate

    ds = D.with_calendar(generate(SynthConfig(N=N, hours=hours, seed=seed)))
    tr, va, te = D.chronological_split(ds)
    norm = D.fit_normalizer(tr)
    spec = D.CovariateSpec.from_groups()
    train = D.stack_windows(D.make_windows(norm.apply(tr), spec, W, W))
    val = D.stack_windows(D.make_windows(norm.apply(va), spec, W, W))
    cfg = ModelConfig(N=N, P=spec.P, F=spec.F, W=W, H=W, Z=Z, d=2, seed=seed)
    return cfg, train, val


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
