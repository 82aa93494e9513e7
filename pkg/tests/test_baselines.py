import numpy as np
import pytest

from scaforge.baselines import (
    SinusoidParams, active_fence_schedule, random_schedule, sinusoid_schedule,
)
from scaforge.leakage import TdcConfig
from scaforge.noisegen import (
    N_LEVELS, BoardSession, MappingTable, TransientParams,
)


def monotone_mapping(tp):
    """Sort oracle: logical level -> pattern, ascending steady-state drive."""
    drives = np.array([tp.drive(l) for l in range(N_LEVELS)])
    return MappingTable(np.argsort(drives, kind="stable"))


def test_random_schedule_zero_budget_is_silent():
    sched = random_schedule(50, max_level=0, seed=0)
    assert np.all(sched.levels == 0)


def test_random_schedule_deterministic():
    a = random_schedule(100, 320, seed=9)
    b = random_schedule(100, 320, seed=9)
    assert np.array_equal(a.levels, b.levels)


def test_random_schedule_uniform_mean():
    sched = random_schedule(10_000, 320, seed=1)
    # uniform on [0,320]: mean 160, sd 320/sqrt(12); 3 sigma of the mean
    se = 320 / np.sqrt(12) / np.sqrt(10_000)
    assert abs(sched.levels.mean() - 160) < 3 * se
    assert sched.levels.min() >= 0 and sched.levels.max() <= 320


def test_random_schedule_rejects_bad_budget():
    with pytest.raises(ValueError):
        random_schedule(10, 321, seed=0)


def test_sinusoid_params_validation():
    with pytest.raises(ValueError):
        SinusoidParams(freq=0)
    with pytest.raises(ValueError):
        SinusoidParams(sigma=-1)
    with pytest.raises(ValueError):
        SinusoidParams(redraw_interval=0)


def test_sinusoid_constant_when_flat():
    p = SinusoidParams(offset=100.0, amp=0.0, sigma=0.0)
    sched = sinusoid_schedule(20, p, seed=0, redraw=False)
    assert np.all(sched.levels == 100)


def test_sinusoid_exact_period_four():
    p = SinusoidParams(offset=160.0, amp=160.0, sigma=0.0, mu=0.0, freq=4.0)
    sched = sinusoid_schedule(8, p, seed=0, redraw=False)
    assert np.array_equal(sched.levels, [160, 320, 160, 0] * 2)


def test_sinusoid_redraw_breaks_dominant_period():
    p = SinusoidParams(offset=160, amp=120, sigma=0.0, freq=8.0,
                       redraw_interval=64)
    sched = sinusoid_schedule(1024, p, seed=3, redraw=True)
    x = sched.levels - sched.levels.mean()
    spec = np.abs(np.fft.rfft(x)) ** 2
    spec[0] = 0.0
    # energy at the initial period must not dominate the whole spectrum
    k = round(1024 / 8.0)
    assert spec[k] < 0.5 * spec.sum()
    # sanity: without redraw the same bin does dominate
    fixed = sinusoid_schedule(1024, p, seed=3, redraw=False)
    y = fixed.levels - fixed.levels.mean()
    fspec = np.abs(np.fft.rfft(y)) ** 2
    fspec[0] = 0.0
    assert fspec[k] > 0.5 * fspec.sum()


def fence_session():
    cfg = TdcConfig(noise_sigma=0.0)
    return BoardSession(cfg, TransientParams(), seed=0, idle_power=0.5)


def test_fence_zero_gain_constant_level():
    sim = fence_session()
    victim = np.full(40 * sim.cfg.samples_per_readout, 2.0)
    sched, _ = active_fence_schedule(sim, victim, gain=0.0, setpoint=30.0,
                                     initial_level=17)
    assert np.all(sched.levels == 17)


def test_fence_at_setpoint_holds_level():
    sim = fence_session()
    victim = np.full(20 * sim.cfg.samples_per_readout, 0.5)
    # find the readout at level 40, then set the setpoint exactly there
    probe = sim.play(np.full(5, 40, dtype=np.int64),
                     victim_power=np.full(5 * sim.cfg.samples_per_readout, 0.5))
    sim.reset()
    sched, readouts = active_fence_schedule(
        sim, victim, gain=0.5, setpoint=float(probe[-1]), initial_level=40)
    assert np.all(sched.levels[2:] == sched.levels[2])
    assert np.all(readouts[2:] == probe[-1])


def test_fence_flattens_varying_power():
    sim = fence_session()
    spr = sim.cfg.samples_per_readout
    # slowly drifting victim power curve (the fence's design target)
    t = np.arange(120)
    steps = 8.0 + 6.0 * np.sin(2 * np.pi * t / 40)
    victim = np.repeat(steps, spr)
    uncontrolled = sim.play(np.zeros(120, dtype=np.int64), victim_power=victim)
    sim.reset()
    _, fenced = active_fence_schedule(sim, victim, gain=4.0,
                                      setpoint=float(uncontrolled.min()) - 2,
                                      mapping=monotone_mapping(sim.tp))
    half = 60
    assert fenced[half:].std() < 0.9 * uncontrolled[half:].std()


def test_fence_rejects_partial_period():
    sim = fence_session()
    with pytest.raises(ValueError):
        active_fence_schedule(sim, np.ones(6), gain=0.5, setpoint=30.0)
