"""Comparison defenses: uniform random noise, Gaussian sinusoid noise, and
a positive-feedback active fence that flattens the observed power curve.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .noisegen import MAX_LEVEL, BoardSession, MappingTable, NoiseSchedule


def random_schedule(length: int, max_level: int, seed: int) -> NoiseSchedule:
    """I.i.d. uniform levels in [0, max_level]."""
    if not 0 <= max_level <= MAX_LEVEL:
        raise ValueError(f"max_level {max_level} outside [0, {MAX_LEVEL}]")
    rng = np.random.default_rng(seed)
    return NoiseSchedule(rng.integers(0, max_level + 1, size=length))


@dataclass
class SinusoidParams:
    offset: float = 160.0
    amp: float = 80.0
    freq: float = 16.0  # readout periods
    mu: float = 0.0
    sigma: float = 0.1
    redraw_interval: int = 128

    def __post_init__(self):
        if self.freq <= 0:
            raise ValueError("freq must be > 0")
        if self.sigma < 0 or self.amp < 0:
            raise ValueError("amp and sigma must be >= 0")
        if self.redraw_interval < 1:
            raise ValueError("redraw_interval must be >= 1")


# Redraw ranges for the "parameters keep changing" behaviour.
REDRAW_RANGES = {
    "offset": (0.0, 320.0),
    "amp": (0.0, 160.0),
    "freq": (4.0, 64.0),
    "mu": (-np.pi / 4, np.pi / 4),
    "sigma": (0.0, np.pi / 8),
}


def _draw_params(rng, redraw_interval: int) -> SinusoidParams:
    vals = {k: rng.uniform(*r) for k, r in REDRAW_RANGES.items()}
    return SinusoidParams(redraw_interval=redraw_interval, **vals)


def sinusoid_schedule(length: int, params: SinusoidParams | None, seed: int,
                      redraw: bool = True) -> NoiseSchedule:
    """Sinusoid with Gaussian phase noise; parameters redrawn periodically.

    Level at period T is offset + amp * sin(2*pi*T/freq + g_T) with
    g_T ~ N(mu, sigma), rounded and clamped into [0, 320]. When `redraw`
    is set, fresh parameters are drawn every `redraw_interval` periods.
    """
    rng = np.random.default_rng(seed)
    params = params or SinusoidParams()
    levels = np.empty(length)
    cur = params
    for t in range(length):
        if redraw and t > 0 and t % params.redraw_interval == 0:
            cur = _draw_params(rng, params.redraw_interval)
        phase_noise = rng.normal(cur.mu, cur.sigma) if cur.sigma > 0 else cur.mu
        v = cur.offset + cur.amp * np.sin(2 * np.pi * t / cur.freq + phase_noise)
        levels[t] = v
    return NoiseSchedule(np.clip(np.rint(levels), 0, MAX_LEVEL).astype(np.int64))


def active_fence_schedule(sim: BoardSession, victim_power: np.ndarray,
                          gain: float = 0.5, setpoint: float | None = None,
                          initial_level: int = 0,
                          max_level: int = MAX_LEVEL,
                          mapping: MappingTable | None = None) -> tuple:
    """Closed-loop positive-feedback fence over one victim trace.

    One decision per readout period: readouts above the setpoint raise the
    RO level (drawing more power, lowering future readouts). The controller
    works in logical levels; `mapping` (normally the calibrated table, which
    makes logical level monotone in drawn power) translates them to deployed
    patterns. Returns the realized (schedule, readouts).
    """
    mapping = mapping or MappingTable.identity()
    if setpoint is None:
        idle = sim.play(np.zeros(16, dtype=np.int64))
        setpoint = float(idle.mean())
        sim.reset()
    spr = sim.cfg.samples_per_readout
    if len(victim_power) % spr:
        raise ValueError("victim power must be whole readout periods")
    n = len(victim_power) // spr
    levels = np.zeros(n, dtype=np.int64)
    readouts = np.zeros(n, dtype=np.int64)
    level = int(np.clip(initial_level, 0, max_level))
    for t in range(n):
        levels[t] = mapping.table[level]
        r = sim.play(np.array([levels[t]]),
                     victim_power=victim_power[t * spr:(t + 1) * spr])
        readouts[t] = r[0]
        level = int(np.clip(round(level + gain * (readouts[t] - setpoint)),
                            0, max_level))
    return NoiseSchedule(levels), readouts
