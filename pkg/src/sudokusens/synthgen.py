"""Deterministic synthetic multimodal benchmark with compositional factor structure.

Every session of cell (class, environment) is

    x_m(t) = A(t) * sum_h a[c, m, h] * G_m(env, f_h) * sin(phase_h(t)) + noise

where the class fixes a harmonic comb, each environment attribute value applies a
strictly positive spectral gain, and the session draws a disturbance trajectory:
a mean speed offset plus slow speed wobble (shifting every harmonic), a slow
log-amplitude modulation ``A(t)`` and white noise. All disturbance terms scale
with ``disturbance_strength`` and vanish at zero.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field

import numpy as np

from .datamodel import AttributeSchema, Dataset, Modality, Sample, Session

CLASS_ATTRIBUTE = "target"


@dataclass(frozen=True)
class GeneratorConfig:
    n_classes: int = 4
    attribute_values: tuple[int, ...] = (3,)
    sessions_per_cell: int = 2
    session_length_s: float = 60.0
    sample_rates: tuple[float, ...] = (1024.0, 256.0)
    modality_names: tuple[str, ...] = ("seismic", "acoustic")
    disturbance_strength: float = 0.5
    rng_seed: int = 0
    # harmonic combs
    f0_min_hz: float = 9.0
    f0_spacing_hz: float = 3.0
    max_harmonic_hz: float = 110.0
    # environment gains: one Gaussian pass band per value, floor elsewhere
    gain_floor: float = 0.1
    band_width_hz: float = 14.0
    random_phase: bool = True
    # disturbance scales at strength 1
    speed_offset: float = 0.08
    speed_wobble: float = 0.02
    amplitude_wobble: float = 1.5
    noise_std: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "attribute_values", tuple(int(v) for v in self.attribute_values))
        object.__setattr__(self, "sample_rates", tuple(float(r) for r in self.sample_rates))
        object.__setattr__(self, "modality_names", tuple(self.modality_names))
        if self.n_classes < 1 or self.sessions_per_cell < 1 or any(v < 1 for v in self.attribute_values):
            raise ValueError("class, attribute-value and session counts must all be >= 1")
        if not 0.0 <= self.disturbance_strength <= 1.0:
            raise ValueError("disturbance_strength must lie in [0, 1]")
        if len(self.modality_names) != len(self.sample_rates):
            raise ValueError("one modality name per sample rate")
        if self.session_length_s <= 0:
            raise ValueError("session_length_s must be > 0")

    def to_json(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass
class GroundTruthFactors:
    # class -> modality -> (frequencies, amplitudes)
    harmonics: dict[str, list[tuple[np.ndarray, np.ndarray]]]
    # attribute -> value -> modality -> (band centre, band width, floor)
    filters: dict[str, dict[str, list[tuple[float, float, float]]]]
    # session id -> trajectory parameters
    trajectories: dict[str, dict] = field(default_factory=dict)

    def gain(self, attribute: str, value: str, modality: int, freqs) -> np.ndarray:
        centre, width, floor = self.filters[attribute][value][modality]
        f = np.asarray(freqs, dtype=np.float64)
        return floor + (1.0 - floor) * np.exp(-0.5 * ((f - centre) / width) ** 2)


def make_schema(cfg: GeneratorConfig) -> AttributeSchema:
    attrs = [(CLASS_ATTRIBUTE, tuple(f"class{k}" for k in range(cfg.n_classes)))]
    for a, n in enumerate(cfg.attribute_values):
        attrs.append((f"env{a}", tuple(f"e{a}v{v}" for v in range(n))))
    return AttributeSchema(tuple(attrs))


def _draw_factors(cfg: GeneratorConfig, schema: AttributeSchema) -> GroundTruthFactors:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.rng_seed, 0]))
    n_mod = len(cfg.sample_rates)
    harmonics = {}
    for k, cls in enumerate(schema.values(CLASS_ATTRIBUTE)):
        f0 = cfg.f0_min_hz + k * cfg.f0_spacing_hz + rng.uniform(-0.2, 0.2) * cfg.f0_spacing_hz
        n_h = max(1, int(cfg.max_harmonic_hz // f0))
        freqs = f0 * np.arange(1, n_h + 1)
        per_mod = []
        for _ in range(n_mod):
            amps = rng.uniform(0.4, 1.0, size=n_h) / np.sqrt(np.arange(1, n_h + 1))
            per_mod.append((freqs.copy(), amps))
        harmonics[cls] = per_mod
    filters = {}
    for name in schema.names[1:]:
        values = schema.values(name)
        filters[name] = {}
        # pass-band centres tile the harmonic range; each modality gets its own ordering
        centres = np.linspace(0.15, 0.85, len(values)) * cfg.max_harmonic_hz if len(values) > 1 else [
            0.5 * cfg.max_harmonic_hz
        ]
        orders = [rng.permutation(len(values)) for _ in range(n_mod)]
        for v, value in enumerate(values):
            filters[name][value] = [
                (float(centres[orders[m][v]]), cfg.band_width_hz, cfg.gain_floor) for m in range(n_mod)
            ]
    return GroundTruthFactors(harmonics, filters)


def _smooth_process(rng: np.random.Generator, n_components: int = 4, f_lo: float = 0.02, f_hi: float = 0.25):
    """A random slow waveform with max |value| <= 1."""
    freqs = rng.uniform(f_lo, f_hi, size=n_components)
    phases = rng.uniform(0, 2 * np.pi, size=n_components)
    weights = rng.uniform(0.5, 1.0, size=n_components)
    weights = weights / weights.sum()

    def value(t):
        return np.sum(weights[:, None] * np.sin(2 * np.pi * freqs[:, None] * t[None] + phases[:, None]), axis=0)

    def integral(t):
        w = 2 * np.pi * freqs[:, None]
        return np.sum(weights[:, None] * (np.cos(phases[:, None]) - np.cos(w * t[None] + phases[:, None])) / w, axis=0)

    return value, integral


def generate_dataset(cfg: GeneratorConfig) -> tuple[Dataset, GroundTruthFactors]:
    """Raw (unsegmented) sessions, one per (class, environment, repeat)."""
    schema = make_schema(cfg)
    factors = _draw_factors(cfg, schema)
    d = cfg.disturbance_strength
    worst_speed = 1.0 + d * (cfg.speed_offset + cfg.speed_wobble)
    for cls, per_mod in factors.harmonics.items():
        for m, (freqs, _) in enumerate(per_mod):
            top = freqs.max() * worst_speed
            nyq = cfg.sample_rates[m] / 2
            if top >= nyq:
                raise ValueError(
                    f"harmonic at {top:.1f} Hz for {cls} exceeds the {nyq:.1f} Hz Nyquist limit of "
                    f"modality {cfg.modality_names[m]}"
                )
    env_names = schema.names[1:]
    envs = list(itertools.product(*(schema.values(a) for a in env_names)))
    sessions = []
    for ci, cls in enumerate(schema.values(CLASS_ATTRIBUTE)):
        for ei, env in enumerate(envs):
            for rep in range(cfg.sessions_per_cell):
                sid = f"{cls}__{'_'.join(env)}__r{rep}"
                seq = np.random.SeedSequence([cfg.rng_seed, 1, ci, ei, rep])
                signals, traj = _render_session(cfg, factors, cls, env_names, env, np.random.default_rng(seq))
                factors.trajectories[sid] = traj
                cond = (cls, *env)
                sample = Sample(tuple(signals), cfg.sample_rates, cls, cond, sid, 0)
                sessions.append(Session(sid, cls, cond, (sample,)))
    mods = tuple(Modality(n, r) for n, r in zip(cfg.modality_names, cfg.sample_rates))
    meta = {"generator": cfg.to_json()}
    return Dataset(schema, mods, tuple(sessions), CLASS_ATTRIBUTE, meta), factors


def _render_session(cfg, factors, cls, env_names, env, rng):
    d = cfg.disturbance_strength
    speed_mean = 1.0 + d * cfg.speed_offset * rng.uniform(-1.0, 1.0)
    speed_value, speed_integral = _smooth_process(rng)
    amp_value, _ = _smooth_process(rng)
    n_h_max = max(len(f) for per in factors.harmonics.values() for f, _ in per)
    phases = rng.uniform(0, 2 * np.pi, size=n_h_max) if cfg.random_phase else np.zeros(n_h_max)
    signals = []
    for m, rate in enumerate(cfg.sample_rates):
        n = int(round(cfg.session_length_s * rate))
        t = np.arange(n) / rate
        # instantaneous speed: speed_mean * (1 + wobble * s(t)); integrate for phase
        warped = speed_mean * (t + d * cfg.speed_wobble * speed_integral(t))
        freqs, amps = factors.harmonics[cls][m]
        gain = np.ones_like(freqs)
        for name, value in zip(env_names, env):
            gain = gain * factors.gain(name, value, m, freqs * speed_mean)
        x = np.zeros(n)
        for h in range(len(freqs)):
            x += amps[h] * gain[h] * np.sin(2 * np.pi * freqs[h] * warped + phases[h])
        x *= np.exp(d * cfg.amplitude_wobble * amp_value(t))
        if d > 0:
            x += rng.normal(0.0, d * cfg.noise_std, size=n)
        signals.append(x.astype(np.float32))
    traj = {"speed_mean": speed_mean, "phases": phases.tolist()}
    return signals, traj


def average_log_spectrum(session: Session) -> np.ndarray:
    """Per-session mean of log(1 + |rfft|) over samples, modalities concatenated."""
    rows = []
    for s in session.samples:
        rows.append(np.concatenate([np.log1p(np.abs(np.fft.rfft(x.astype(np.float64)))) for x in s.signals]))
    return np.mean(rows, axis=0)


def cross_cell_distance(ds: Dataset, cell_a, cell_b) -> float:
    """Mean pairwise L2 distance between session-average log spectra of two cells.

    For ``cell_a == cell_b`` the cell's sessions are split into two disjoint halves.
    """
    a = ds.sessions_in((cell_a[0], tuple(cell_a[1])))
    b = ds.sessions_in((cell_b[0], tuple(cell_b[1])))
    if not a or not b:
        raise ValueError(f"empty cell: {cell_a if not a else cell_b}")
    if (cell_a[0], tuple(cell_a[1])) == (cell_b[0], tuple(cell_b[1])):
        if len(a) < 2:
            raise ValueError("self-distance needs at least two sessions in the cell")
        half = len(a) // 2
        a, b = a[:half], a[half:]
    spa = [average_log_spectrum(s) for s in a]
    spb = [average_log_spectrum(s) for s in b]
    return float(np.mean([np.linalg.norm(x - y) for x in spa for y in spb]))
