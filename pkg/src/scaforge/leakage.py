"""Victim power synthesis and TDC sensor model.

The victim's inference is rendered as one power segment per layer whose
duration and amplitude grow with the layer's work; the attacker's
time-to-digital converter maps board voltage into clamped integer tap
counts. Higher power means lower voltage means a lower readout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .arch import LayerKind, ModelArch


@dataclass(frozen=True)
class PowerSeries:
    """Non-negative power samples in arbitrary watt-equivalent units."""

    samples: np.ndarray
    dt: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))
        if self.samples.ndim != 1:
            raise ValueError("power samples must be 1-D")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("power samples must be finite")
        if np.any(self.samples < 0):
            raise ValueError("power samples must be non-negative")

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class SensorTrace:
    """Integer TDC readouts, optionally tagged with the originating labels."""

    readouts: np.ndarray
    label: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "readouts", np.asarray(self.readouts, dtype=np.int64))
        if self.label is not None:
            object.__setattr__(self, "label", np.asarray(self.label, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.readouts)


def _kind_table(conv, pool, fc, relu, softmax) -> dict:
    return {LayerKind.CONV: conv, LayerKind.POOL: pool, LayerKind.FC: fc,
            LayerKind.RELU: relu, LayerKind.SOFTMAX: softmax}


@dataclass
class LeakageParams:
    """Per-layer-kind segment model: amplitude/duration base + per-cost slope.

    Defaults separate the five kinds into disjoint amplitude bands and keep
    the within-kind cost slopes large enough that every one of the 23 layer
    symbols has a distinguishable (amplitude, duration) signature.
    """

    base_amp: dict = field(default_factory=lambda: _kind_table(20.0, 5.0, 12.0, 1.0, 2.5))
    amp_coeff: dict = field(default_factory=lambda: _kind_table(0.07, 0.25, 0.012, 0.0, 0.0))
    base_dur: dict = field(default_factory=lambda: _kind_table(80, 48, 64, 40, 40))
    dur_coeff: dict = field(default_factory=lambda: _kind_table(0.06, 0.3, 0.06, 0.0, 0.0))
    ramp_fraction: float = 0.15
    noise_sigma: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.ramp_fraction <= 1.0:
            raise ValueError("ramp_fraction must be in [0, 1]")
        if any(d < 1 for d in self.base_dur.values()):
            raise ValueError("base durations must be >= 1 sample")
        if any(a < 0 for a in self.base_amp.values()) or self.noise_sigma < 0:
            raise ValueError("amplitudes and noise sigma must be >= 0")

    def segment_duration(self, layer) -> int:
        return int(self.base_dur[layer.kind] +
                   math.ceil(self.dur_coeff[layer.kind] * layer.cost()))

    def segment_amplitude(self, layer) -> float:
        return self.base_amp[layer.kind] + self.amp_coeff[layer.kind] * layer.cost()


def synthesize_power(arch: ModelArch, params: LeakageParams, seed: int) -> PowerSeries:
    """One amplitude-shaped segment per layer, concatenated in order."""
    if len(arch.layers) == 0:
        raise ValueError("cannot synthesize power for an empty architecture")
    rng = np.random.default_rng(seed)
    segments = []
    for layer in arch.layers:
        dur = params.segment_duration(layer)
        amp = params.segment_amplitude(layer)
        seg = np.full(dur, amp)
        ramp_len = int(round(params.ramp_fraction * dur))
        if ramp_len > 0:
            seg[:ramp_len] = amp * np.linspace(0.0, 1.0, ramp_len, endpoint=False)
        if params.noise_sigma > 0:
            seg = seg + rng.normal(0.0, params.noise_sigma, size=dur)
        segments.append(seg)
    samples = np.maximum(np.concatenate(segments), 0.0)
    return PowerSeries(samples)


@dataclass
class TdcConfig:
    """Sensor geometry, gain, initial-delay lines and quantization."""

    n_taps: int = 512
    gain: float = 1024.0         # taps per volt
    v_nominal: float = 0.45      # volts at zero load
    r_pdn: float = 0.0039        # volts dropped per power unit
    coarse_len: int = 0
    fine_len: int = 0
    offset_coarse: float = 2.0   # taps per coarse element
    offset_fine: float = 0.25    # taps per fine element
    noise_sigma: float = 0.25    # taps, per-sample measurement noise
    samples_per_readout: int = 4

    def __post_init__(self):
        if self.n_taps <= 0 or self.gain <= 0:
            raise ValueError("n_taps and gain must be positive")
        if not (0 <= self.coarse_len <= 31 and 0 <= self.fine_len <= 31):
            raise ValueError("delay line lengths must be in [0, 31]")
        if self.samples_per_readout < 1:
            raise ValueError("samples_per_readout must be >= 1")

    def delay_offset(self, coarse: int | None = None, fine: int | None = None) -> float:
        c = self.coarse_len if coarse is None else coarse
        f = self.fine_len if fine is None else fine
        return self.offset_coarse * c + self.offset_fine * f


def _raw_readout(power: np.ndarray, cfg: TdcConfig) -> np.ndarray:
    v = cfg.v_nominal - cfg.r_pdn * power
    return cfg.gain * v + cfg.delay_offset()


def tdc_readout(power: PowerSeries, ro_power: PowerSeries | None,
                cfg: TdcConfig, seed: int) -> SensorTrace:
    """Voltage -> taps -> clamp -> block average over samples_per_readout."""
    total = power.samples
    if ro_power is not None:
        if len(ro_power) != len(power) or ro_power.dt != power.dt:
            raise ValueError("ro_power must match power in length and dt")
        total = total + ro_power.samples
    raw = _raw_readout(total, cfg)
    if cfg.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        raw = raw + rng.normal(0.0, cfg.noise_sigma, size=raw.shape)
    per_sample = np.clip(np.rint(raw), 0, cfg.n_taps)
    spr = cfg.samples_per_readout
    n_blocks = len(per_sample) // spr
    if n_blocks == 0:
        raise ValueError("power trace shorter than one readout period")
    blocks = per_sample[:n_blocks * spr].reshape(n_blocks, spr)
    readouts = np.rint(blocks.mean(axis=1)).astype(np.int64)
    return SensorTrace(readouts)


def calibrate_tdc(cfg: TdcConfig, probe: PowerSeries) -> tuple[int, int]:
    """Exhaustive (coarse, fine) scan centering the mean raw readout.

    Picks the pair whose mean unclamped raw readout is closest to
    n_taps / 2; ties go to the smaller coarse, then smaller fine.
    """
    if len(probe) == 0:
        raise ValueError("probe power series is empty")
    target = cfg.n_taps / 2.0
    mean_v = cfg.v_nominal - cfg.r_pdn * probe.samples.mean()
    base = cfg.gain * mean_v
    best = None
    for coarse in range(32):
        for fine in range(32):
            dist = abs(base + cfg.delay_offset(coarse, fine) - target)
            key = (dist, coarse, fine)
            if best is None or key < best:
                best = key
    return best[1], best[2]


def readout_timebase(cfg: TdcConfig, n_samples: int) -> int:
    """Number of whole readout periods covering n_samples."""
    return n_samples // cfg.samples_per_readout
