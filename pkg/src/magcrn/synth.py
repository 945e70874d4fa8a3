"""Synthetic station network with a planted target process.

The target follows::

    y_t = a * G @ y_{t-1} + b * f(traffic_t) + c * g(weather_t) + eps_t

with ``G`` a random row-stochastic graph, ``f``/``g`` clipped-linear maps of
the standardised latent covariates, then an affine map into 10..190 ug/m3.
Weather latents are spatially smoothed AR(1) processes; traffic follows a
daily rush-hour profile with AR(1) noise.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .data import CSV_CHANNELS, ImputationReport, RawDataset, WEATHER
from .errors import InvalidConfig

NO2_LOW, NO2_HIGH = 10.0, 190.0
CLIP = 3.0

# loadings of the standardised weather latents in g(); wind direction and
# solar irradiance are emitted through non-monotone transforms, so they carry none
WEATHER_LOADINGS = np.array([-0.6, 0.0, 0.4, 0.3, 0.5, 0.0])
WEATHER_LOADINGS = WEATHER_LOADINGS / np.linalg.norm(WEATHER_LOADINGS)


@dataclass(frozen=True)
class SynthConfig:
    N: int = 4
    hours: int = 1200
    seed: int = 0
    graph_coupling: float = 0.3
    traffic_weight: float = 0.3
    weather_weight: float = 1.0
    noise_std: float = 0.05
    weather_rho: float = 0.9
    traffic_noise: float = 0.3
    forecast_noise: float = 0.0
    start: str = "2019-01-01T00"

    def validate(self) -> SynthConfig:
        if self.N < 2:
            raise InvalidConfig(f"N must be >= 2 (graph needs two nodes), got {self.N}")
        if self.hours < 1:
            raise InvalidConfig("hours must be >= 1")
        if not 0.0 <= self.graph_coupling < 1.0:
            raise InvalidConfig(f"graph_coupling must lie in [0, 1), got {self.graph_coupling}")
        if not 0.0 <= self.weather_rho < 1.0:
            raise InvalidConfig(f"weather_rho must lie in [0, 1), got {self.weather_rho}")
        for name in ("noise_std", "traffic_noise", "forecast_noise"):
            if getattr(self, name) < 0:
                raise InvalidConfig(f"{name} must be >= 0")
        try:
            np.datetime64(self.start, "h")
        except ValueError:
            raise InvalidConfig(f"start {self.start!r} is not an ISO hour") from None
        return self

    @classmethod
    def from_mapping(cls, values: dict) -> SynthConfig:
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise InvalidConfig(f"unknown synth keys: {sorted(unknown)}")
        kwargs = {}
        for k, v in values.items():
            default = getattr(cls, k)
            try:
                kwargs[k] = type(default)(v)
            except ValueError:
                raise InvalidConfig(f"bad value for {k}: {v!r}") from None
        return cls(**kwargs).validate()


@dataclass
class GroundTruth:
    G: np.ndarray
    positions: np.ndarray
    graph_coupling: float
    traffic_weight: float
    weather_weight: float
    noise_std: float
    weather_rho: float
    weather_loadings: np.ndarray
    affine_offset: float
    affine_scale: float

    def to_text(self) -> str:
        lines = [f"{k} = {v!r}" for k, v in asdict(self).items() if not isinstance(v, np.ndarray)]
        lines.append("weather_loadings = " + " ".join(repr(float(x)) for x in self.weather_loadings))
        for i, row in enumerate(self.G):
            lines.append(f"G.{i} = " + " ".join(repr(float(x)) for x in row))
        for i, row in enumerate(self.positions):
            lines.append(f"position.{i} = " + " ".join(repr(float(x)) for x in row))
        return "\n".join(lines) + "\n"


def _ar1(rng, rho: float, innov: np.ndarray) -> np.ndarray:
    """Stationary unit-variance AR(1) along axis 0 driven by unit innovations."""
    out = np.empty_like(innov)
    out[0] = innov[0]
    scale = np.sqrt(1.0 - rho * rho)
    for t in range(1, innov.shape[0]):
        out[t] = rho * out[t - 1] + scale * innov[t]
    return out


def _rush_profile(hours: np.ndarray, dow: np.ndarray) -> np.ndarray:
    bump = lambda c: np.exp(-0.5 * ((hours - c) / 1.5) ** 2)  # noqa: E731
    weekday = np.where(dow < 5, 1.0, 0.6)
    return weekday * (0.3 + bump(8.0) + 0.8 * bump(18.5))


def _simulate(cfg: SynthConfig):
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    N, T = cfg.N, cfg.hours
    positions = rng.uniform(0.0, 1.0, (N, 2))
    dist2 = ((positions[:, None, :] - positions[None, :, :]) ** 2).sum(-1)

    G = np.exp(-dist2 / 0.2) * rng.uniform(0.5, 1.5, (N, N))
    G /= G.sum(axis=1, keepdims=True)

    smooth = np.exp(-dist2 / 0.25)
    smooth /= np.sqrt((smooth ** 2).sum(axis=1, keepdims=True))  # unit-variance mixing per station
    innov = rng.standard_normal((T, len(WEATHER), N)) @ smooth.T
    weather = _ar1(rng, cfg.weather_rho, innov)  # T x 6 x N

    stamps = np.datetime64(cfg.start, "h") + np.arange(T).astype("timedelta64[h]")
    hour_idx = stamps.astype(np.int64)
    profile = _rush_profile((hour_idx % 24).astype(float), (hour_idx // 24 + 3) % 7)
    profile = (profile - profile.mean()) / (profile.std() if profile.std() > 0 else 1.0)
    traffic_noise = _ar1(rng, 0.5, rng.standard_normal((T, N)))
    traffic = profile[:, None] + cfg.traffic_noise * traffic_noise  # T x N
    station_scale = rng.uniform(0.7, 1.3, N)

    f = np.clip(traffic, -CLIP, CLIP)
    g = np.clip(np.einsum("k,tkn->tn", WEATHER_LOADINGS, weather), -CLIP, CLIP)
    eps = cfg.noise_std * rng.standard_normal((T, N))
    y = np.empty((T, N))
    prev = np.zeros(N)
    for t in range(T):
        prev = cfg.graph_coupling * (G @ prev) + cfg.traffic_weight * f[t] + cfg.weather_weight * g[t] + eps[t]
        y[t] = prev

    lo, hi = float(y.min()), float(y.max())
    if hi - lo < 1e-12:
        scale, offset = 0.0, 0.5 * (NO2_LOW + NO2_HIGH)
        no2 = np.full_like(y, offset)
    else:
        scale = (NO2_HIGH - NO2_LOW) / (hi - lo)
        offset = NO2_LOW - scale * lo
        no2 = offset + scale * y

    seen = weather + cfg.forecast_noise * rng.standard_normal(weather.shape) if cfg.forecast_noise else weather
    ws, wd, temp, rh, pres, solar = (seen[:, k, :] for k in range(len(WEATHER)))
    day_phase = 2.0 * np.pi * (hour_idx % 24) / 24.0
    sun = np.clip(-np.cos(day_phase), 0.0, None)[:, None]
    channels = {
        "no2": no2,
        "wind_speed": 3.0 * np.exp(0.4 * ws),
        "wind_dir": np.mod(np.pi + 1.2 * wd, 2.0 * np.pi),
        "temperature": 12.0 + 5.0 * temp,
        "rel_humidity": 60.0 + 15.0 * np.tanh(0.6 * rh),
        "pressure": 1013.0 + 8.0 * pres,
        "solar_irradiance": sun * 600.0 * (1.0 + 0.3 * np.tanh(solar)),
        "traffic_intensity": station_scale * np.maximum(0.0, 600.0 + 250.0 * traffic),
        "traffic_occupancy": np.maximum(0.0, 10.0 + 4.0 * traffic + 0.5 * rng.standard_normal((T, N))),
        "traffic_load": np.maximum(0.0, 30.0 + 12.0 * traffic + 1.0 * rng.standard_normal((T, N))),
        "traffic_speed": np.maximum(5.0, 40.0 - 8.0 * traffic + 1.0 * rng.standard_normal((T, N))),
    }
    values = np.stack([channels[c] for c in CSV_CHANNELS], axis=2)
    truth = GroundTruth(
        G=G,
        positions=positions,
        graph_coupling=cfg.graph_coupling,
        traffic_weight=cfg.traffic_weight,
        weather_weight=cfg.weather_weight,
        noise_std=cfg.noise_std,
        weather_rho=cfg.weather_rho,
        weather_loadings=WEATHER_LOADINGS.copy(),
        affine_offset=offset,
        affine_scale=scale,
    )
    stations = tuple(f"S{i:02d}" for i in range(N))
    return RawDataset(stamps, stations, CSV_CHANNELS, values, ImputationReport()), truth, weather, traffic


def generate(cfg: SynthConfig) -> RawDataset:
    return _simulate(cfg)[0]


def ground_truth(cfg: SynthConfig) -> GroundTruth:
    return _simulate(cfg)[1]
