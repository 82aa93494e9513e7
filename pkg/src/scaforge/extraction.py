"""The attacker's extraction model: conv front-end, BiGRU encoder, CTC head.

The model maps a readout trace to per-timestep log probabilities over the
24-symbol alphabet (23 layer symbols + blank). Normalization statistics are
frozen at training time and applied as an explicit differentiable layer so
that noise can be crafted in raw readout units. Variants 0-3 differ only in
the depth of the convolutional front-end (3/1/2/5 layers); all downsample
the trace by 4x in time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .arch import ALPHABET_SIZE
from .autodiff import Adam, GRUParams, Tensor, backward, zero_grads
from .ctc import ctc_greedy_decode, ctc_loss, ler


class TrainingDiverged(ArithmeticError):
    pass


@dataclass(frozen=True)
class AttackModelConfig:
    n_conv_layers: int = 3
    conv_channels: int = 16
    conv_kernel: int = 5
    conv_strides: tuple = (2, 2, 1)
    rnn_hidden: int = 32
    alphabet_size: int = ALPHABET_SIZE

    def __post_init__(self):
        if self.n_conv_layers not in (1, 2, 3, 5):
            raise ValueError("n_conv_layers must be one of 1, 2, 3, 5")
        if len(self.conv_strides) != self.n_conv_layers:
            raise ValueError("one stride per conv layer required")
        if any(s < 1 for s in self.conv_strides):
            raise ValueError("strides must be >= 1")

    @property
    def downsample(self) -> int:
        return int(np.prod(self.conv_strides))


# Attacker variants 0-3: same head, conv front-ends of depth 3/1/2/5.
VARIANT_CONFIGS = {
    0: AttackModelConfig(3, conv_strides=(2, 2, 1)),
    1: AttackModelConfig(1, conv_strides=(4,)),
    2: AttackModelConfig(2, conv_strides=(2, 2)),
    3: AttackModelConfig(5, conv_strides=(2, 2, 1, 1, 1)),
}


class AttackModel:
    """CTC sequence model over sensor readout traces."""

    def __init__(self, cfg: AttackModelConfig, seed: int):
        self.cfg = cfg
        self.norm_mean = 0.0
        self.norm_std = 1.0
        self.trained = False
        rng = np.random.default_rng(seed)
        k = cfg.conv_kernel
        self.conv_weights: list[Tensor] = []
        c_in = 1
        for _ in range(cfg.n_conv_layers):
            scale = np.sqrt(2.0 / (c_in * k))
            w = rng.normal(0.0, scale, size=(cfg.conv_channels, c_in, k))
            self.conv_weights.append(Tensor(w, requires_grad=True))
            c_in = cfg.conv_channels
        h = cfg.rnn_hidden
        self.gru1_fw = GRUParams.init(cfg.conv_channels, h, rng)
        self.gru1_bw = GRUParams.init(cfg.conv_channels, h, rng)
        self.gru2_fw = GRUParams.init(2 * h, h, rng)
        self.gru2_bw = GRUParams.init(2 * h, h, rng)
        scale = 1.0 / np.sqrt(2 * h)
        self.dense_w = Tensor(rng.uniform(-scale, scale,
                                          size=(2 * h, cfg.alphabet_size)),
                              requires_grad=True)
        self.dense_b = Tensor(np.zeros(cfg.alphabet_size), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        params = list(self.conv_weights)
        for g in (self.gru1_fw, self.gru1_bw, self.gru2_fw, self.gru2_bw):
            params += g.tensors()
        params += [self.dense_w, self.dense_b]
        return params

    @property
    def min_trace_len(self) -> int:
        # every conv stage must see at least one full kernel window
        need = self.cfg.conv_kernel
        pad = self.cfg.conv_kernel // 2
        for s in reversed(self.cfg.conv_strides):
            need = (need - 1) * s + 1
        return max(1, need - 2 * pad * len(self.cfg.conv_strides))

    def fit_normalization(self, traces) -> None:
        """Freeze zero-mean/unit-variance stats from the training readouts."""
        flat = np.concatenate([np.asarray(t, dtype=np.float64) for t in traces])
        self.norm_mean = float(flat.mean())
        self.norm_std = float(max(flat.std(), 1e-6))

    def forward(self, readouts) -> Tensor:
        """Log-probability rows (T_out, alphabet) for one readout trace."""
        x = readouts if isinstance(readouts, Tensor) else \
            Tensor(np.asarray(readouts, dtype=np.float64))
        if x.data.ndim != 1:
            raise ad.ShapeError(f"expected a 1-D trace, got {x.shape}")
        if len(x.data) < self.min_trace_len:
            raise ValueError(
                f"trace length {len(x.data)} below receptive field "
                f"{self.min_trace_len}")
        x = (x - self.norm_mean) * (1.0 / self.norm_std)
        h = ad.reshape(x, (1, len(x.data)))
        pad = self.cfg.conv_kernel // 2
        for w, stride in zip(self.conv_weights, self.cfg.conv_strides):
            h = ad.relu(ad.conv1d(h, w, stride=stride, padding=pad))
        seq = ad.transpose(h)  # (T_out, C)
        seq = ad.bigru(seq, self.gru1_fw, self.gru1_bw, self.cfg.rnn_hidden)
        seq = ad.bigru(seq, self.gru2_fw, self.gru2_bw, self.cfg.rnn_hidden)
        logits = seq @ self.dense_w + self.dense_b
        return ad.log_softmax(logits)

    def predict(self, readouts) -> np.ndarray:
        return ctc_greedy_decode(self.forward(readouts).data)

    # -- persistence --------------------------------------------------------

    def state_arrays(self) -> dict:
        state = {"norm": np.array([self.norm_mean, self.norm_std,
                                   float(self.trained)])}
        for i, p in enumerate(self.parameters()):
            state[f"p{i}"] = p.data
        return state

    def save(self, path) -> None:
        np.savez(path, **self.state_arrays())

    def load_state(self, state) -> None:
        norm = np.asarray(state["norm"], dtype=np.float64)
        self.norm_mean, self.norm_std = float(norm[0]), float(norm[1])
        self.trained = bool(norm[2]) if len(norm) > 2 else True
        for i, p in enumerate(self.parameters()):
            arr = np.asarray(state[f"p{i}"], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ad.ShapeError(
                    f"checkpoint param {i}: {arr.shape} vs {p.data.shape}")
            p.data = arr

    @classmethod
    def from_file(cls, path, cfg: AttackModelConfig) -> "AttackModel":
        model = cls(cfg, seed=0)
        with np.load(path) as state:
            model.load_state(state)
        return model


@dataclass
class TrainHistory:
    epoch_loss: list = field(default_factory=list)
    holdout_ler: list = field(default_factory=list)


def evaluate_ler(model: AttackModel, dataset) -> float:
    """Mean LER of greedy decodes over (readouts, label) pairs."""
    scores = [ler(model.predict(tr), lab) for tr, lab in dataset]
    return float(np.mean(scores))


def train(model: AttackModel, dataset, epochs: int, seed: int,
          lr: float = 2e-3, batch_size: int = 8,
          holdout=None, fit_norm: bool = True) -> TrainHistory:
    """Adam on mean CTC loss over shuffled minibatches of whole traces."""
    if not dataset:
        raise ValueError("training dataset is empty")
    if fit_norm:
        model.fit_normalization([tr for tr, _ in dataset])
    params = model.parameters()
    opt = Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    history = TrainHistory()
    for _ in range(epochs):
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            zero_grads(params)
            batch_loss = 0.0
            for i in idx:
                readouts, label = dataset[i]
                try:
                    loss = ctc_loss(model.forward(readouts), np.asarray(label))
                except ad.NonFiniteError as exc:
                    raise TrainingDiverged(
                        f"non-finite activations on trace {i}: {exc}") from exc
                if not np.isfinite(loss.item()):
                    raise TrainingDiverged(
                        f"non-finite CTC loss on trace {i}: {loss.item()}")
                backward(loss * (1.0 / len(idx)))
                batch_loss += loss.item() / len(idx)
            losses.append(batch_loss)
            opt.step()
        history.epoch_loss.append(float(np.mean(losses)))
        if holdout is not None:
            history.holdout_ler.append(evaluate_ler(model, holdout))
    if epochs > 0:
        model.trained = True
    return history
