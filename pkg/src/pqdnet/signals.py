"""Synthetic power-quality disturbance waveforms.

Eighteen classes are produced: seven single disturbances (harmonics, sag,
swell, interruption, flicker, oscillatory transient, impulsive transient)
and eleven mixtures of them. All amplitudes are per-unit with a 50 Hz
fundamental of unit peak.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

FUNDAMENTAL_HZ = 50.0


@dataclass(frozen=True)
class TimeBase:
    sample_rate: float = 3200.0
    duration: float = 0.2
    fundamental_freq: float = FUNDAMENTAL_HZ

    def __post_init__(self):
        if self.fundamental_freq != FUNDAMENTAL_HZ:
            raise ValueError("fundamental frequency is fixed at 50 Hz")
        cycles = self.duration * self.fundamental_freq
        if cycles < 1 or abs(cycles - round(cycles)) > 1e-9:
            raise ValueError(f"duration {self.duration} s is not a whole number of 20 ms cycles")
        # 900 Hz is the highest oscillatory-transient frequency
        if self.sample_rate <= 2 * 900.0:
            raise ValueError(f"sample rate {self.sample_rate} Hz is below Nyquist for 900 Hz")

    @property
    def n_samples(self) -> int:
        return int(round(self.sample_rate * self.duration))

    @property
    def period(self) -> float:
        return 1.0 / self.fundamental_freq

    @property
    def omega(self) -> float:
        return 2 * math.pi * self.fundamental_freq

    def times(self) -> np.ndarray:
        return np.arange(self.n_samples, dtype=np.float64) / self.sample_rate


class DisturbanceClass(enum.Enum):
    V1 = "harmonics"
    V2 = "sag"
    V3 = "swell"
    V4 = "interruption"
    V5 = "flicker"
    V6 = "oscillatory transient"
    V7 = "impulsive transient"
    V8 = "harmonics + sag"
    V9 = "harmonics + swell"
    V10 = "interruption + harmonics"
    V11 = "impulsive transient + sag"
    V12 = "impulsive transient + swell"
    V13 = "impulsive transient + flicker"
    V14 = "impulsive transient + harmonics"
    V15 = "harmonics + oscillatory transient + sag"
    V16 = "harmonics + oscillatory transient + swell"
    V17 = "flicker + impulsive transient + harmonics"
    V18 = "harmonics + oscillatory transient + impulsive transient + sag"

    @property
    def index(self) -> int:
        return int(self.name[1:]) - 1

    @property
    def components(self) -> frozenset:
        return COMPONENTS[self]

    @classmethod
    def parse(cls, label) -> "DisturbanceClass":
        if isinstance(label, cls):
            return label
        if isinstance(label, (int, np.integer)):
            return ALL_CLASSES[int(label)]
        try:
            return cls[str(label).strip().upper()]
        except KeyError:
            raise ValueError(f"unknown disturbance class {label!r}") from None


ALL_CLASSES: tuple = tuple(DisturbanceClass)
CLASS_NAMES: tuple = tuple(c.name for c in ALL_CLASSES)

HARM, SAG, SWELL, INTERRUPT, FLICKER, OSC, IMPULSE = (
    "harmonics", "sag", "swell", "interruption", "flicker", "oscillatory", "impulsive")
ENVELOPE_KINDS = (SAG, SWELL, INTERRUPT)

_C = DisturbanceClass
COMPONENTS = {
    _C.V1: frozenset({HARM}),
    _C.V2: frozenset({SAG}),
    _C.V3: frozenset({SWELL}),
    _C.V4: frozenset({INTERRUPT}),
    _C.V5: frozenset({FLICKER}),
    _C.V6: frozenset({OSC}),
    _C.V7: frozenset({IMPULSE}),
    _C.V8: frozenset({HARM, SAG}),
    _C.V9: frozenset({HARM, SWELL}),
    _C.V10: frozenset({INTERRUPT, HARM}),
    _C.V11: frozenset({IMPULSE, SAG}),
    _C.V12: frozenset({IMPULSE, SWELL}),
    _C.V13: frozenset({IMPULSE, FLICKER}),
    _C.V14: frozenset({IMPULSE, HARM}),
    _C.V15: frozenset({HARM, OSC, SAG}),
    _C.V16: frozenset({HARM, OSC, SWELL}),
    _C.V17: frozenset({FLICKER, IMPULSE, HARM}),
    _C.V18: frozenset({HARM, OSC, IMPULSE, SAG}),
}
del _C

# Parameter ranges, closed intervals. Durations are in fundamental periods.
HARMONIC_AMP = (0.0, 0.15)
PHASE = (0.0, 2 * math.pi)
ENVELOPE_DEPTH = {SAG: (0.1, 0.9), SWELL: (0.1, 0.9), INTERRUPT: (0.9, 1.0)}
ENVELOPE_CYCLES = (4.0, 9.0)
FLICKER_AMP = (0.3, 0.5)
FLICKER_RATIO = (0.1, 0.4)
OSC_AMP = (0.1, 0.8)
IMPULSE_AMP = (1.0, 10.0)
TRANSIENT_TAU = (0.008, 0.04)
TRANSIENT_CYCLES = (0.05, 3.0)
OSC_FREQ = (300.0, 900.0)


@dataclass(frozen=True)
class Harmonics:
    a3: float
    a5: float
    a7: float
    phi3: float
    phi5: float
    phi7: float


@dataclass(frozen=True)
class Envelope:
    kind: str
    alpha: float
    t1: float
    t2: float


@dataclass(frozen=True)
class Flicker:
    alpha_f: float
    beta: float


@dataclass(frozen=True)
class OscillatoryTransient:
    alpha: float
    tau: float
    t3: float
    t4: float
    f_n: float


@dataclass(frozen=True)
class ImpulsiveTransient:
    alpha: float
    tau: float
    t3: float
    t4: float


@dataclass(frozen=True)
class DisturbanceParams:
    label: DisturbanceClass
    harmonics: Optional[Harmonics] = None
    envelope: Optional[Envelope] = None
    flicker: Optional[Flicker] = None
    oscillatory: Optional[OscillatoryTransient] = None
    impulsive: Optional[ImpulsiveTransient] = None

    def to_dict(self) -> dict:
        out = {"label": self.label.name}
        for name in ("harmonics", "envelope", "flicker", "oscillatory", "impulsive"):
            part = getattr(self, name)
            if part is not None:
                out[name] = asdict(part)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "DisturbanceParams":
        kinds = {"harmonics": Harmonics, "envelope": Envelope, "flicker": Flicker,
                 "oscillatory": OscillatoryTransient, "impulsive": ImpulsiveTransient}
        parts = {k: t(**d[k]) for k, t in kinds.items() if d.get(k) is not None}
        return cls(label=DisturbanceClass.parse(d["label"]), **parts)


@dataclass
class Waveform:
    samples: np.ndarray
    timebase: TimeBase
    label: DisturbanceClass
    params: DisturbanceParams
    snr_db: Optional[float] = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.shape != (self.timebase.n_samples,):
            raise ValueError(
                f"expected {self.timebase.n_samples} samples, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")


def _uniform(rng: np.random.Generator, bounds) -> float:
    lo, hi = bounds
    return float(rng.uniform(lo, hi))


def _place(rng: np.random.Generator, length: float, tb: TimeBase) -> float:
    """Start time of an event of ``length`` seconds kept clear of the record edges.

    The edge margin is one fundamental period, shrunk symmetrically when the
    event is too long for two full margins to fit.
    """
    slack = tb.duration - length
    margin = min(tb.period, slack / 2)
    return _uniform(rng, (margin, slack - margin))


def sample_params(cls, rng, tb: TimeBase = TimeBase()) -> DisturbanceParams:
    """Draw one random parameter set for ``cls``; every field is uniform in its range."""
    cls = DisturbanceClass.parse(cls)
    rng = np.random.default_rng(rng)
    comps = cls.components
    T = tb.period
    parts = {}
    if HARM in comps:
        parts["harmonics"] = Harmonics(
            a3=_uniform(rng, HARMONIC_AMP), a5=_uniform(rng, HARMONIC_AMP),
            a7=_uniform(rng, HARMONIC_AMP), phi3=_uniform(rng, PHASE),
            phi5=_uniform(rng, PHASE), phi7=_uniform(rng, PHASE))
    kinds = [k for k in ENVELOPE_KINDS if k in comps]
    if kinds:
        (kind,) = kinds
        alpha = _uniform(rng, ENVELOPE_DEPTH[kind])
        length = _uniform(rng, ENVELOPE_CYCLES) * T
        t1 = _place(rng, length, tb)
        parts["envelope"] = Envelope(kind, alpha, t1, t1 + length)
    if FLICKER in comps:
        parts["flicker"] = Flicker(_uniform(rng, FLICKER_AMP), _uniform(rng, FLICKER_RATIO))
    if OSC in comps:
        alpha = _uniform(rng, OSC_AMP)
        tau = _uniform(rng, TRANSIENT_TAU)
        length = _uniform(rng, TRANSIENT_CYCLES) * T
        f_n = _uniform(rng, OSC_FREQ)
        t3 = _place(rng, length, tb)
        parts["oscillatory"] = OscillatoryTransient(alpha, tau, t3, t3 + length, f_n)
    if IMPULSE in comps:
        alpha = _uniform(rng, IMPULSE_AMP)
        tau = _uniform(rng, TRANSIENT_TAU)
        length = _uniform(rng, TRANSIENT_CYCLES) * T
        t3 = _place(rng, length, tb)
        parts["impulsive"] = ImpulsiveTransient(alpha, tau, t3, t3 + length)
    return DisturbanceParams(label=cls, **parts)


def _check_range(name, value, bounds, tol=1e-12):
    lo, hi = bounds
    if not (lo - tol <= value <= hi + tol):
        raise ValueError(f"{name}={value} outside [{lo}, {hi}]")


def validate_params(params: DisturbanceParams, tb: TimeBase = TimeBase()) -> None:
    """Raise ValueError unless ``params`` is a legal parameter set for its class."""
    comps = params.label.components
    present = {
        HARM: params.harmonics is not None,
        FLICKER: params.flicker is not None,
        OSC: params.oscillatory is not None,
        IMPULSE: params.impulsive is not None,
    }
    for comp, have in present.items():
        if have != (comp in comps):
            raise ValueError(f"{params.label.name}: component {comp!r} "
                             f"{'unexpected' if have else 'missing'}")
    env_kinds = [k for k in ENVELOPE_KINDS if k in comps]
    if bool(env_kinds) != (params.envelope is not None):
        raise ValueError(f"{params.label.name}: envelope presence mismatch")
    T = tb.period
    if params.harmonics is not None:
        h = params.harmonics
        for name in ("a3", "a5", "a7"):
            _check_range(name, getattr(h, name), HARMONIC_AMP)
        for name in ("phi3", "phi5", "phi7"):
            _check_range(name, getattr(h, name), PHASE)
    if params.envelope is not None:
        e = params.envelope
        if e.kind != env_kinds[0]:
            raise ValueError(f"envelope kind {e.kind!r} does not match class {params.label.name}")
        _check_range("alpha", e.alpha, ENVELOPE_DEPTH[e.kind])
        _check_window("t1", "t2", e.t1, e.t2, tb)
        _check_range("t2-t1", (e.t2 - e.t1) / T, ENVELOPE_CYCLES, tol=1e-9)
    if params.flicker is not None:
        _check_range("alpha_f", params.flicker.alpha_f, FLICKER_AMP)
        _check_range("beta", params.flicker.beta, FLICKER_RATIO)
    if params.oscillatory is not None:
        o = params.oscillatory
        _check_range("alpha2", o.alpha, OSC_AMP)
        _check_range("tau", o.tau, TRANSIENT_TAU)
        _check_range("f_n", o.f_n, OSC_FREQ)
        _check_window("t3", "t4", o.t3, o.t4, tb)
        _check_range("t4-t3", (o.t4 - o.t3) / T, TRANSIENT_CYCLES, tol=1e-9)
    if params.impulsive is not None:
        p = params.impulsive
        _check_range("alpha2", p.alpha, IMPULSE_AMP)
        _check_range("tau", p.tau, TRANSIENT_TAU)
        _check_window("t3", "t4", p.t3, p.t4, tb)
        _check_range("t4-t3", (p.t4 - p.t3) / T, TRANSIENT_CYCLES, tol=1e-9)


def _check_window(a_name, b_name, a, b, tb):
    if not (0.0 <= a < b <= tb.duration + 1e-12):
        raise ValueError(f"need 0 <= {a_name} < {b_name} <= {tb.duration}, got {a}, {b}")


def step(t: np.ndarray) -> np.ndarray:
    """Heaviside step with u(0) = 1."""
    return (t >= 0).astype(np.float64)


def window(t: np.ndarray, start: float, stop: float) -> np.ndarray:
    return step(t - start) - step(t - stop)


def synthesize(cls, params: DisturbanceParams, tb: TimeBase = TimeBase()) -> Waveform:
    """Evaluate the class model at the sample instants of ``tb``.

    Envelope factors (sag, swell, interruption, flicker) multiply the
    fundamental-plus-harmonics carrier; transients are added afterwards.
    """
    cls = DisturbanceClass.parse(cls)
    if params.label is not cls:
        raise ValueError(f"params are for {params.label.name}, not {cls.name}")
    validate_params(params, tb)
    t = tb.times()
    w = tb.omega
    v = np.sin(w * t)
    if params.harmonics is not None:
        h = params.harmonics
        v = (v + h.a3 * np.sin(3 * w * t + h.phi3) + h.a5 * np.sin(5 * w * t + h.phi5)
             + h.a7 * np.sin(7 * w * t + h.phi7))
    if params.envelope is not None:
        e = params.envelope
        sign = 1.0 if e.kind == SWELL else -1.0
        v = (1.0 + sign * e.alpha * window(t, e.t1, e.t2)) * v
    if params.flicker is not None:
        f = params.flicker
        v = (1.0 + f.alpha_f * np.sin(f.beta * w * t)) * v
    if params.oscillatory is not None:
        o = params.oscillatory
        dt = t - o.t3
        v = v + (o.alpha * np.exp(-dt / o.tau) * np.sin(2 * math.pi * o.f_n * dt)
                 * window(t, o.t3, o.t4))
    if params.impulsive is not None:
        p = params.impulsive
        dt = t - p.t3
        # exp(-dt/tau) overflows before the window for dt << 0
        decay = np.exp(-np.maximum(dt, 0.0) / p.tau)
        v = v + p.alpha * decay * window(t, p.t3, p.t4)
    return Waveform(samples=v, timebase=tb, label=cls, params=params)


def add_awgn(w: Waveform, snr_db: float, rng) -> Waveform:
    """Return a copy of ``w`` with white Gaussian noise at ``snr_db`` (signal power = mean square)."""
    if w.snr_db is not None:
        raise ValueError("waveform already carries noise")
    if math.isnan(snr_db):
        raise ValueError("snr_db must not be NaN")
    if math.isinf(snr_db) and snr_db > 0:
        return replace(w, samples=w.samples.copy(), snr_db=None)
    rng = np.random.default_rng(rng)
    power = float(np.mean(w.samples ** 2))
    sigma = math.sqrt(power / 10.0 ** (snr_db / 10.0))
    noise = rng.normal(0.0, sigma, size=w.samples.shape)
    return replace(w, samples=w.samples + noise, snr_db=float(snr_db))


def measure_snr(clean, noisy) -> float:
    """SNR in dB of ``noisy`` against ``clean``; ``math.inf`` when they are identical."""
    c = np.asarray(getattr(clean, "samples", clean), dtype=np.float64)
    n = np.asarray(getattr(noisy, "samples", noisy), dtype=np.float64)
    if c.shape != n.shape:
        raise ValueError(f"length mismatch: {c.shape} vs {n.shape}")
    residual = float(np.sum((n - c) ** 2))
    if residual == 0.0:
        return math.inf
    return 10.0 * math.log10(float(np.sum(c ** 2)) / residual)


def waveform_seeds(master_seed: int, cls: DisturbanceClass, index: int):
    """Independent (params, noise) generators for one sample of one class."""
    ss = np.random.SeedSequence([int(master_seed), cls.index, int(index)])
    p, n = ss.spawn(2)
    return np.random.default_rng(p), np.random.default_rng(n)


@dataclass
class LabeledWaveform:
    id: str
    index: int
    waveform: Waveform


def generate_one(master_seed: int, cls: DisturbanceClass, index: int,
                 snr_db: Optional[float], tb: TimeBase) -> LabeledWaveform:
    prng, nrng = waveform_seeds(master_seed, cls, index)
    w = synthesize(cls, sample_params(cls, prng, tb), tb)
    if snr_db is not None:
        w = add_awgn(w, snr_db, nrng)
    return LabeledWaveform(id=f"{cls.name}_{index}", index=index, waveform=w)


def generate_dataset(classes: Optional[Iterable] = None, per_class: int = 1000,
                     snr_db: Optional[float] = None, tb: TimeBase = TimeBase(),
                     seed: int = 0) -> list:
    """``per_class`` waveforms for each class, ordered by class then index.

    Parameters depend only on (seed, class, index), so datasets generated at
    different SNRs share their clean waveforms.
    """
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    classes = ALL_CLASSES if classes is None else [DisturbanceClass.parse(c) for c in classes]
    classes = sorted(set(classes), key=lambda c: c.index)
    return [generate_one(seed, cls, i, snr_db, tb)
            for cls in classes for i in range(per_class)]


MANIFEST_NAME = "manifest.jsonl"


def write_waveforms(items: Sequence[LabeledWaveform], out_dir) -> Path:
    """Write one little-endian float64 ``.f64`` file per waveform plus a JSON-lines manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for item in items:
        w = item.waveform
        fname = f"{item.id}.f64"
        w.samples.astype("<f8").tofile(out_dir / fname)
        lines.append(json.dumps({
            "id": item.id,
            "class_label": w.label.name,
            "snr_db": w.snr_db,
            "sample_rate": w.timebase.sample_rate,
            "n_samples": w.timebase.n_samples,
            "duration": w.timebase.duration,
            "params": w.params.to_dict(),
            "file": fname,
        }, sort_keys=True))
    manifest = out_dir / MANIFEST_NAME
    manifest.write_text("".join(line + "\n" for line in lines))
    return manifest


def read_waveforms(in_dir) -> list:
    in_dir = Path(in_dir)
    manifest = in_dir / MANIFEST_NAME
    if not manifest.exists():
        raise FileNotFoundError(f"no waveform manifest at {manifest}")
    items = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        tb = TimeBase(sample_rate=rec["sample_rate"],
                      duration=rec.get("duration", rec["n_samples"] / rec["sample_rate"]))
        samples = np.fromfile(in_dir / rec["file"], dtype="<f8")
        w = Waveform(samples=samples, timebase=tb,
                     label=DisturbanceClass.parse(rec["class_label"]),
                     params=DisturbanceParams.from_dict(rec["params"]),
                     snr_db=rec["snr_db"])
        index = int(rec["id"].rsplit("_", 1)[1])
        items.append(LabeledWaveform(id=rec["id"], index=index, waveform=w))
    return items
