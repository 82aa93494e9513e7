"""Defender's ring-oscillator noise module and its software calibration.

32 RO sets x 10 duty steps give 321 enable patterns (level 0 = all off).
Enabling ROs draws power and lowers the sensor readout; the PDN responds
with first-order smoothing plus a derivative term, producing the
characteristic undershoot at enable edges and overshoot at disable edges.
Calibration sorts the measured response of all 321 patterns into a mapping
table and iteratively nudges the requested schedule until the realized
noise matches the requested one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .leakage import PowerSeries, TdcConfig

N_SETS = 32
N_DUTY = 10
N_LEVELS = N_SETS * N_DUTY + 1  # 321
MAX_LEVEL = N_LEVELS - 1

# Patterns are enumerated count-major: level 1..32 = 1..32 sets at duty 1,
# level 33..64 = 1..32 sets at duty 2, and so on.


@dataclass(frozen=True)
class EnablePattern:
    """One of the 321 (set count, duty) RO configurations."""

    level: int

    def __post_init__(self):
        if not 0 <= self.level <= MAX_LEVEL:
            raise ValueError(f"level {self.level} outside [0, {MAX_LEVEL}]")

    @property
    def count(self) -> int:
        return 0 if self.level == 0 else (self.level - 1) % N_SETS + 1

    @property
    def duty(self) -> int:
        return 0 if self.level == 0 else (self.level - 1) // N_SETS + 1

    @staticmethod
    def from_count_duty(count: int, duty: int) -> "EnablePattern":
        if count == 0 and duty == 0:
            return EnablePattern(0)
        if not (1 <= count <= N_SETS and 1 <= duty <= N_DUTY):
            raise ValueError(f"invalid (count={count}, duty={duty})")
        return EnablePattern((duty - 1) * N_SETS + count)


def level_for(count: int, duty: int) -> int:
    return EnablePattern.from_count_duty(count, duty).level


@dataclass(frozen=True)
class NoiseSchedule:
    """One enable level per readout period."""

    levels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "levels", np.asarray(self.levels, dtype=np.int64))
        if self.levels.ndim != 1:
            raise ValueError("schedule levels must be 1-D")
        if len(self.levels) and (self.levels.min() < 0 or self.levels.max() > MAX_LEVEL):
            raise ValueError("schedule levels outside [0, 320]")

    def __len__(self) -> int:
        return len(self.levels)


@dataclass(frozen=True)
class MappingTable:
    """Permutation of [0, 320]: requested level -> deployed pattern level."""

    table: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "table", np.asarray(self.table, dtype=np.int64))
        if sorted(self.table.tolist()) != list(range(N_LEVELS)):
            raise ValueError("mapping table is not a permutation of [0, 320]")

    def apply(self, schedule: NoiseSchedule) -> NoiseSchedule:
        return NoiseSchedule(self.table[schedule.levels])

    @staticmethod
    def identity() -> "MappingTable":
        return MappingTable(np.arange(N_LEVELS))


@dataclass
class TransientParams:
    """PDN response of the RO module as seen by the sensor."""

    p_set: float = 0.5      # power units per fully-enabled RO set
    smoothing: float = 0.7  # lambda in (0, 1]; 1 = memoryless
    deriv_gain: float = 0.5  # gamma >= 0; over/undershoot strength
    coupling: float = 1.0   # eta in (0, 1]; <1 models a far floorplan

    def __post_init__(self):
        if not 0.0 < self.smoothing <= 1.0:
            raise ValueError("smoothing must be in (0, 1]")
        if self.deriv_gain < 0:
            raise ValueError("deriv_gain must be >= 0")
        if not 0.0 < self.coupling <= 1.0:
            raise ValueError("coupling must be in (0, 1]")

    def drive(self, level: int, max_sets: int = N_SETS) -> float:
        """Steady-state power drawn by one enable pattern."""
        p = EnablePattern(int(level))
        count = min(p.count, max_sets)
        return count * (p.duty / N_DUTY) * self.p_set * self.coupling


def _transient_filter(drive: np.ndarray, tp: TransientParams,
                      s_init: float = 0.0) -> tuple[np.ndarray, float]:
    lam, gamma = tp.smoothing, tp.deriv_gain
    out = np.empty_like(drive)
    s_prev = s_init
    for i, d in enumerate(drive):
        s = lam * d + (1.0 - lam) * s_prev
        out[i] = max(0.0, s + gamma * (s - s_prev))
        s_prev = s
    return out, s_prev


def pdn_response(drive: np.ndarray, tp: TransientParams) -> np.ndarray:
    """Power seen through the PDN for an arbitrary drive waveform.

    Same smoothing + derivative transient as the RO sets; used for any
    co-located switching activity sharing the distribution network.
    """
    out, _ = _transient_filter(np.asarray(drive, dtype=np.float64), tp)
    return out


def ro_power(schedule: NoiseSchedule, tp: TransientParams,
             samples_per_level: int = 4, max_sets: int = N_SETS) -> PowerSeries:
    """Emitted RO power, one level held per readout period of samples."""
    if len(schedule) == 0:
        raise ValueError("schedule is empty")
    drive = np.repeat(
        np.array([tp.drive(l, max_sets) for l in schedule.levels]),
        samples_per_level,
    )
    out, _ = _transient_filter(drive, tp)
    return PowerSeries(out)


# ---------------------------------------------------------------------------
# board session: victim + sensor + noise module on one PDN
# ---------------------------------------------------------------------------

class BoardSession:
    """Stateful simulation of one board: carries PDN transient memory.

    `drive_fn` defaults to the physical (count x duty) response and is
    overridable so tests can pin a known level->power map.
    """

    def __init__(self, cfg: TdcConfig, tp: TransientParams, seed: int,
                 idle_power: float = 0.5, max_sets: int = N_SETS,
                 drive_fn=None):
        self.cfg = cfg
        self.tp = tp
        self.idle_power = float(idle_power)
        self.max_sets = int(max_sets)
        self.drive_fn = drive_fn or (lambda level: tp.drive(level, self.max_sets))
        self._rng = np.random.default_rng(seed)
        self._state = 0.0
        self._seed = seed

    def reset(self) -> None:
        self._rng = np.random.default_rng(self._seed)
        self._state = 0.0

    def play(self, levels, victim_power: np.ndarray | None = None) -> np.ndarray:
        """Drive the schedule one readout period per level; return readouts."""
        levels = np.asarray(levels, dtype=np.int64)
        spr = self.cfg.samples_per_readout
        drive = np.repeat(np.array([self.drive_fn(int(l)) for l in levels]), spr)
        emitted, self._state = _transient_filter(drive, self.tp, self._state)
        if victim_power is None:
            victim = np.full(len(drive), self.idle_power)
        else:
            victim = np.asarray(victim_power, dtype=np.float64)
            if len(victim) != len(drive):
                raise ValueError("victim power length must equal levels * spr")
        total = victim + emitted
        raw = self.cfg.gain * (self.cfg.v_nominal - self.cfg.r_pdn * total)
        raw = raw + self.cfg.delay_offset()
        if self.cfg.noise_sigma > 0:
            raw = raw + self._rng.normal(0.0, self.cfg.noise_sigma, size=raw.shape)
        per_sample = np.clip(np.rint(raw), 0, self.cfg.n_taps)
        blocks = per_sample.reshape(len(levels), spr)
        return np.rint(blocks.mean(axis=1)).astype(np.int64)

    def measure_level(self, level: int, hold_periods: int = 10) -> float:
        """Hold one pattern and average `hold_periods` consecutive readouts."""
        readouts = self.play(np.full(hold_periods, level, dtype=np.int64))
        return float(readouts.mean())


def measure_pattern(pattern: EnablePattern, context: NoiseSchedule | None,
                    sim: BoardSession) -> float:
    """Mean of 10 readouts of `pattern` after replaying a context prefix."""
    sim.reset()
    if context is not None and len(context):
        sim.play(context.levels)
    return sim.measure_level(pattern.level)


@dataclass
class CalibrationResult:
    mapping: MappingTable
    schedule: NoiseSchedule
    error_sum: int
    iterations: int
    converged: bool
    history: list = field(default_factory=list)


def _measure_all_levels(sim: BoardSession, ns_levels: np.ndarray) -> np.ndarray:
    """Measure every level once: NS first-appearance order, then the rest."""
    seen: set[int] = set()
    order: list[int] = []
    for l in ns_levels.tolist():
        if l not in seen:
            seen.add(l)
            order.append(l)
    order += [l for l in range(N_LEVELS) if l not in seen]
    readings = np.empty(N_LEVELS)
    for l in order:
        readings[l] = sim.measure_level(l)
    return readings


def _sort_mapping(readings: np.ndarray) -> MappingTable:
    # Ascending readout = strongest noise; requested level 320 gets the
    # lowest-readout pattern, level 0 the highest-readout one.
    asc = np.lexsort((np.arange(N_LEVELS), readings))
    return MappingTable(asc[::-1].copy())


def calibrate(ns: NoiseSchedule, sim: BoardSession, threshold: int = 2,
              max_iters: int = 50) -> CalibrationResult:
    """Iterative sort-map-measure-adjust calibration of a noise schedule.

    Each iteration: measure all 321 patterns (schedule order first), sort
    them into the mapping table, deploy the mapped schedule, quantize the
    measured readouts back into 321 levels by linear binning between the
    observed extremes, and move every mismatched schedule entry one level
    toward its requested value. Stops when the summed absolute mismatch
    drops to `threshold`.
    """
    if len(ns) == 0:
        raise ValueError("noise schedule is empty")
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    ns_in = ns.levels.copy()
    current = ns_in.copy()
    mapping = MappingTable.identity()
    err = 0
    history: list[int] = []
    for iteration in range(1, max_iters + 1):
        sim.reset()
        readings = _measure_all_levels(sim, current)
        mapping = _sort_mapping(readings)
        deployed = mapping.table[current]
        sim.reset()
        measured = np.array([sim.measure_level(int(l)) for l in deployed])
        t_min, t_max = readings.min(), readings.max()
        span = max(t_max - t_min, 1e-12)
        realized = np.rint((t_max - measured) / span * MAX_LEVEL)
        realized = np.clip(realized, 0, MAX_LEVEL).astype(np.int64)
        err = int(np.abs(ns_in - realized).sum())
        history.append(err)
        if err <= threshold:
            return CalibrationResult(mapping, NoiseSchedule(current), err,
                                     iteration, True, history)
        current = np.clip(current + np.sign(ns_in - realized), 0, MAX_LEVEL)
    return CalibrationResult(mapping, NoiseSchedule(current), err,
                             max_iters, False, history)


def level_response(sim: BoardSession) -> np.ndarray:
    """Mean readout of every enable pattern, indexed by pattern level.

    One measurement pass over all 321 patterns from a reset PDN state;
    this is the raw material both for sort-based mapping tables and for
    linearized deployment tables.
    """
    sim.reset()
    return _measure_all_levels(sim, np.empty(0, dtype=np.int64))


def sensing_config(cfg: TdcConfig) -> TdcConfig:
    """Defender's high-resolution measurement configuration for calibration.

    Same PDN constants as the deployment sensor, but a longer delay line and
    higher gain so the 321 patterns stay distinguishable after quantization.
    """
    return TdcConfig(
        n_taps=4096, gain=4096.0, v_nominal=cfg.v_nominal, r_pdn=cfg.r_pdn,
        coarse_len=0, fine_len=0, offset_coarse=cfg.offset_coarse,
        offset_fine=cfg.offset_fine, noise_sigma=cfg.noise_sigma,
        samples_per_readout=cfg.samples_per_readout,
    )
