import math

import numpy as np
import pytest

from scaforge.arch import LayerKind, LayerSpec, ModelArch
from scaforge.leakage import (
    LeakageParams, PowerSeries, TdcConfig, calibrate_tdc, synthesize_power,
    tdc_readout,
)


def quiet_params(**kw):
    defaults = dict(ramp_fraction=0.0, noise_sigma=0.0)
    defaults.update(kw)
    return LeakageParams(**defaults)


def two_layer_arch():
    return ModelArch((LayerSpec(LayerKind.RELU), LayerSpec(LayerKind.SOFTMAX)))


def test_noise_free_base_case_constant_segments():
    params = quiet_params()
    power = synthesize_power(two_layer_arch(), params, seed=0)
    d_relu = params.base_dur[LayerKind.RELU]
    d_soft = params.base_dur[LayerKind.SOFTMAX]
    assert len(power) == d_relu + d_soft
    assert np.all(power.samples[:d_relu] == params.base_amp[LayerKind.RELU])
    assert np.all(power.samples[d_relu:] == params.base_amp[LayerKind.SOFTMAX])


def test_synthesis_deterministic():
    arch = ModelArch((LayerSpec(LayerKind.CONV, 3, 20), LayerSpec(LayerKind.FC, 0, 200)))
    params = LeakageParams()
    a = synthesize_power(arch, params, seed=5)
    b = synthesize_power(arch, params, seed=5)
    assert np.array_equal(a.samples, b.samples)


def test_duration_formula_hand_evaluated():
    # Conv(k=3,out=10): cost 90; dur = 20 + ceil(0.01 * 90) = 21.
    params = quiet_params(
        base_dur={k: 20 for k in LayerKind},
        dur_coeff={k: 0.01 for k in LayerKind},
    )
    arch = ModelArch((LayerSpec(LayerKind.CONV, 3, 10), LayerSpec(LayerKind.FC, 0, 100)))
    power = synthesize_power(arch, params, seed=0)
    conv_len = 21
    fc_len = 20 + math.ceil(0.01 * 100)
    assert len(power) == conv_len + fc_len


def test_segment_accounting_total_length():
    params = LeakageParams()
    arch = ModelArch((LayerSpec(LayerKind.CONV, 5, 30), LayerSpec(LayerKind.POOL, 2),
                      LayerSpec(LayerKind.RELU), LayerSpec(LayerKind.FC, 0, 500)))
    power = synthesize_power(arch, params, seed=1)
    assert len(power) == sum(params.segment_duration(l) for l in arch.layers)


def test_rejects_empty_arch():
    arch = two_layer_arch()
    object.__setattr__(arch, "layers", ())
    with pytest.raises(ValueError):
        synthesize_power(arch, LeakageParams(), seed=0)


# ---------------------------------------------------------------------------
# TDC
# ---------------------------------------------------------------------------

def noiseless_cfg(**kw):
    defaults = dict(noise_sigma=0.0)
    defaults.update(kw)
    return TdcConfig(**defaults)


def test_constant_power_constant_readout():
    cfg = noiseless_cfg()
    power = PowerSeries(np.full(64, 3.0))
    trace = tdc_readout(power, None, cfg, seed=0)
    assert len(trace) == 64 // cfg.samples_per_readout
    assert len(set(trace.readouts.tolist())) == 1


def test_higher_power_lower_readout_monotone():
    cfg = noiseless_cfg()
    rng = np.random.default_rng(2)
    base = rng.uniform(1.0, 10.0, size=128)
    lower = tdc_readout(PowerSeries(base + 2.0), None, cfg, seed=0)
    higher = tdc_readout(PowerSeries(base), None, cfg, seed=0)
    assert np.all(lower.readouts <= higher.readouts)


def test_ro_power_drops_readout_in_window():
    cfg = noiseless_cfg()
    power = PowerSeries(np.full(96, 2.0))
    ro = np.zeros(96)
    ro[32:64] = 6.0
    with_ro = tdc_readout(power, PowerSeries(ro), cfg, seed=0)
    without = tdc_readout(power, None, cfg, seed=0)
    w = with_ro.readouts
    assert np.all(w[8:16] < without.readouts[8:16])
    assert np.array_equal(w[:8], without.readouts[:8])


def test_saturation_clamps_to_n_taps():
    cfg = noiseless_cfg(gain=1000.0, v_nominal=1.0, coarse_len=31, fine_len=31)
    trace = tdc_readout(PowerSeries(np.zeros(16)), None, cfg, seed=0)
    assert np.all(trace.readouts == cfg.n_taps)


def test_zero_floor_clamp():
    cfg = noiseless_cfg(v_nominal=0.0, r_pdn=1.0)
    trace = tdc_readout(PowerSeries(np.full(16, 100.0)), None, cfg, seed=0)
    assert np.all(trace.readouts == 0)


def test_readout_range_invariant():
    cfg = TdcConfig(noise_sigma=5.0)
    rng = np.random.default_rng(3)
    trace = tdc_readout(PowerSeries(rng.uniform(0, 60, size=400)), None, cfg, seed=4)
    assert trace.readouts.min() >= 0 and trace.readouts.max() <= cfg.n_taps


def test_length_mismatch_rejected():
    cfg = TdcConfig()
    with pytest.raises(ValueError):
        tdc_readout(PowerSeries(np.ones(8)), PowerSeries(np.ones(9)), cfg, seed=0)


# ---------------------------------------------------------------------------
# calibration of the initial delay
# ---------------------------------------------------------------------------

def test_calibrate_exact_hit():
    # gain*v mean = 24 taps; offset 2c+0.25f can land exactly on 32 with
    # (c=4, f=0); ties prefer small coarse.
    cfg = noiseless_cfg(n_taps=64, gain=60.0, v_nominal=0.4, r_pdn=0.0)
    probe = PowerSeries(np.ones(32))
    c, f = calibrate_tdc(cfg, probe)
    assert 60.0 * 0.4 + 2.0 * c + 0.25 * f == 32.0
    # several exact hits exist; smallest coarse (then fine) wins
    assert (c, f) == (1, 24)


def test_calibrate_tie_break_lexicographic():
    # base 31.875: (0,0) -> dist 0.125; (0,1) -> 0.125 too; prefer (0,0).
    cfg = noiseless_cfg(n_taps=64, gain=1.0, v_nominal=31.875, r_pdn=0.0)
    assert calibrate_tdc(cfg, PowerSeries(np.ones(4))) == (0, 0)


def test_calibrate_matches_brute_force_oracle():
    cfg = noiseless_cfg(n_taps=64, gain=1.0, v_nominal=42.0, r_pdn=0.1)
    probe = PowerSeries(np.full(10, 100.0))  # mean power term -10
    got = calibrate_tdc(cfg, probe)
    base = 42.0 - 10.0
    best = min(
        ((abs(base + 2.0 * c + 0.25 * f - 32.0), c, f)
         for c in range(32) for f in range(32)))
    assert got == (best[1], best[2])


def test_calibrate_rejects_empty_probe():
    with pytest.raises(ValueError):
        calibrate_tdc(TdcConfig(), PowerSeries(np.array([])))
