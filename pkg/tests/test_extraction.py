import numpy as np
import pytest

from gradcheck import check_gradients

from scaforge.arch import ALPHABET_SIZE, generate_zoo
from scaforge.autodiff import Tensor, backward
from scaforge.ctc import ctc_loss
from scaforge.extraction import (
    VARIANT_CONFIGS, AttackModel, AttackModelConfig, TrainingDiverged,
    evaluate_ler, train,
)
from scaforge.leakage import LeakageParams, TdcConfig, synthesize_power, tdc_readout


def tiny_config():
    return AttackModelConfig(n_conv_layers=1, conv_channels=3, conv_kernel=3,
                             conv_strides=(2,), rnn_hidden=4, alphabet_size=5)


def make_trace(arch, seed):
    power = synthesize_power(arch, LeakageParams(), seed=seed)
    return tdc_readout(power, None, TdcConfig(), seed=seed + 1).readouts


def small_dataset(n_archs=4, per_arch=2):
    zoo = generate_zoo(n_archs, seed=3)
    return [(make_trace(a, 100 * i + j), a.labels())
            for i, a in enumerate(zoo) for j in range(per_arch)]


def test_config_validation():
    with pytest.raises(ValueError):
        AttackModelConfig(n_conv_layers=4, conv_strides=(1, 1, 1, 1))
    with pytest.raises(ValueError):
        AttackModelConfig(n_conv_layers=2, conv_strides=(2,))
    with pytest.raises(ValueError):
        AttackModelConfig(n_conv_layers=1, conv_strides=(0,))


def test_variant_configs_downsample_by_four():
    assert set(VARIANT_CONFIGS) == {0, 1, 2, 3}
    for i, cfg in VARIANT_CONFIGS.items():
        assert cfg.downsample == 4
        assert cfg.n_conv_layers == (3, 1, 2, 5)[i]


def test_forward_rows_are_log_distributions():
    model = AttackModel(VARIANT_CONFIGS[0], seed=0)
    out = model.forward(np.arange(40, dtype=float))
    assert out.shape == (10, ALPHABET_SIZE)
    sums = np.exp(out.data).sum(axis=1)
    assert np.allclose(sums, 1.0, atol=1e-9)


def test_forward_deterministic_on_identical_traces():
    model = AttackModel(VARIANT_CONFIGS[2], seed=1)
    trace = np.random.default_rng(0).integers(0, 64, size=50).astype(float)
    a = model.forward(trace)
    b = model.forward(trace.copy())
    assert np.array_equal(a.data, b.data)


def test_forward_regression_fixture(tmp_path):
    # golden-output check: forward equals an independent re-execution from a
    # freshly constructed model with the same seed
    trace = np.linspace(10, 50, 60)
    out1 = AttackModel(VARIANT_CONFIGS[0], seed=42).forward(trace)
    out2 = AttackModel(VARIANT_CONFIGS[0], seed=42).forward(trace)
    assert np.array_equal(out1.data, out2.data)


def test_forward_rejects_short_trace():
    model = AttackModel(VARIANT_CONFIGS[0], seed=0)
    with pytest.raises(ValueError):
        model.forward(np.ones(2))


def test_composed_model_gradcheck():
    model = AttackModel(tiny_config(), seed=5)
    rng = np.random.default_rng(5)
    x = Tensor(rng.uniform(10, 50, size=12), requires_grad=True)
    label = np.array([1, 3])
    check_gradients(lambda: ctc_loss(model.forward(x), label), [x])
    # and through a couple of weights
    check_gradients(lambda: ctc_loss(model.forward(x), label),
                    [model.conv_weights[0], model.dense_w])


def test_input_gradient_finite_nonzero():
    model = AttackModel(VARIANT_CONFIGS[0], seed=0)
    x = Tensor(np.random.default_rng(1).uniform(20, 40, 48), requires_grad=True)
    loss = ctc_loss(model.forward(x), np.array([0, 5, 9]))
    backward(loss)
    assert np.all(np.isfinite(x.grad)) and np.any(x.grad != 0)


def test_zero_epochs_leaves_model_unchanged():
    model = AttackModel(tiny_config(), seed=0)
    before = [p.data.copy() for p in model.parameters()]
    ds = [(np.arange(20, dtype=float), np.array([1, 2]))]
    train(model, ds, epochs=0, seed=0)
    for p, b in zip(model.parameters(), before):
        assert np.array_equal(p.data, b)


def test_train_rejects_empty_dataset():
    with pytest.raises(ValueError):
        train(AttackModel(tiny_config(), seed=0), [], epochs=1, seed=0)


def test_single_pair_overfit():
    model = AttackModel(tiny_config(), seed=2)
    ds = [(np.random.default_rng(0).uniform(10, 50, 24), np.array([0, 3]))]
    history = train(model, ds, epochs=200, seed=0, lr=3e-2)
    assert history.epoch_loss[-1] < 0.1
    assert evaluate_ler(model, ds) == 0.0


def test_training_deterministic():
    ds = small_dataset(n_archs=2, per_arch=1)

    def run():
        model = AttackModel(tiny_config(), seed=7)
        # tiny alphabet can't fit arch labels; remap to a 5-symbol space
        small = [(tr, lab % 4) for tr, lab in ds]
        train(model, small, epochs=2, seed=7)
        return np.concatenate([p.data.ravel() for p in model.parameters()])

    assert np.array_equal(run(), run())


def test_divergence_raises():
    model = AttackModel(tiny_config(), seed=0)
    model.dense_w.data[:] = np.inf  # blown-up parameters
    ds = [(np.random.default_rng(0).uniform(0, 64, 24), np.array([1, 2]))]
    with pytest.raises(TrainingDiverged):
        train(model, ds, epochs=1, seed=0)


def test_checkpoint_roundtrip(tmp_path):
    model = AttackModel(VARIANT_CONFIGS[1], seed=3)
    model.fit_normalization([np.arange(30, dtype=float)])
    path = tmp_path / "ckpt.npz"
    model.save(path)
    clone = AttackModel.from_file(path, VARIANT_CONFIGS[1])
    trace = np.random.default_rng(2).uniform(0, 64, 40)
    assert np.array_equal(model.forward(trace).data, clone.forward(trace).data)
    assert clone.norm_mean == model.norm_mean


def test_history_lengths():
    ds = [(np.random.default_rng(0).uniform(10, 50, 24), np.array([0, 3]))]
    model = AttackModel(tiny_config(), seed=1)
    history = train(model, ds, epochs=3, seed=0, holdout=ds)
    assert len(history.epoch_loss) == 3
    assert len(history.holdout_ler) == 3
