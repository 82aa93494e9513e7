"""Worst-architecture search over the accelerator-supported layer space.

A REINFORCE-trained recurrent controller samples layer sequences and is
rewarded with 1 - validation accuracy on a small synthetic proxy task, so
the search converges toward the worst-performing feasible architecture —
the decoy target for the utility-reduction defense. Shape-infeasible
samples are penalized as if they scored perfect accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .arch import (
    VOCAB, VOCAB_SIZE, LayerKind, LayerSpec, ModelArch, symbol_index,
)
from .autodiff import Adam, GRUParams, Tensor, backward, gru_cell, zero_grads

STOP = VOCAB_SIZE  # controller stop token
IMG_SIZE = 8
N_CLASSES = 4


class InfeasibleArch(ValueError):
    """The architecture cannot be built on the proxy input shape."""


# ---------------------------------------------------------------------------
# proxy task
# ---------------------------------------------------------------------------

def _templates() -> np.ndarray:
    """Four 8x8 stripe patterns; 2-pixel stripes, vertical/horizontal phases.

    Aggressive pooling collapses the classes (block maxima all hit a +1
    stripe) while any weight on individual pixels separates them linearly.
    """
    t = np.empty((N_CLASSES, IMG_SIZE, IMG_SIZE))
    cols = (np.arange(IMG_SIZE) // 2) % 2
    t[0] = np.where(cols == 0, 1.0, -1.0)[None, :]
    t[1] = np.where(cols == 1, 1.0, -1.0)[None, :]
    t[2] = t[0].T
    t[3] = t[1].T
    return t


@dataclass(frozen=True)
class ProxyTask:
    """Seeded 4-class image classification stand-in dataset."""

    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    fingerprint: int

    @staticmethod
    def make(seed: int, n_train: int = 2000, n_val: int = 500,
             noise_sigma: float = 0.6, shuffle_labels: bool = False) -> "ProxyTask":
        rng = np.random.default_rng(seed)
        templates = _templates()

        def sample(n):
            y = np.tile(np.arange(N_CLASSES), n // N_CLASSES + 1)[:n]
            x = templates[y] + rng.normal(0.0, noise_sigma,
                                          size=(n, IMG_SIZE, IMG_SIZE))
            if shuffle_labels:
                y = rng.permutation(y)
            return x[:, None, :, :], y  # (N, 1, 8, 8)

        tx, ty = sample(n_train)
        vx, vy = sample(n_val)
        fp = hash((seed, n_train, n_val, noise_sigma, shuffle_labels))
        return ProxyTask(tx, ty, vx, vy, fp)


def _plan(arch: ModelArch) -> None:
    """Shape-check the arch on the proxy input; raise InfeasibleArch."""
    spatial: tuple | None = (1, IMG_SIZE, IMG_SIZE)  # None once flattened
    for layer in arch.layers:
        if layer.kind == LayerKind.CONV:
            if spatial is None:
                raise InfeasibleArch(f"conv after flatten in {arch.describe()}")
            c, h, w = spatial
            pad = (layer.kernel - 1) // 2
            if h + 2 * pad < layer.kernel or w + 2 * pad < layer.kernel:
                raise InfeasibleArch(f"conv kernel {layer.kernel} exceeds {h}x{w}")
            out = h + 2 * pad - layer.kernel + 1
            spatial = (layer.out_size, out, out)
        elif layer.kind == LayerKind.POOL:
            if spatial is None:
                raise InfeasibleArch(f"pool after flatten in {arch.describe()}")
            c, h, w = spatial
            if h < layer.kernel or w < layer.kernel:
                raise InfeasibleArch(f"pool kernel {layer.kernel} exceeds {h}x{w}")
            spatial = (c, h // layer.kernel, w // layer.kernel)
        elif layer.kind == LayerKind.FC:
            spatial = None


def is_feasible(arch: ModelArch) -> bool:
    """Whether the arch can be realized on the proxy input at all."""
    try:
        _plan(arch)
    except InfeasibleArch:
        return False
    return True


class ProxyNet:
    """The sampled architecture realized on 8x8 inputs, plus a 4-way head."""

    def __init__(self, arch: ModelArch, seed: int):
        _plan(arch)
        self.arch = arch
        rng = np.random.default_rng(seed)
        self.weights: list[tuple] = []  # (layer, params...) build plan
        self.params: list[Tensor] = []
        spatial: tuple | None = (1, IMG_SIZE, IMG_SIZE)
        dim = None
        for layer in arch.layers:
            if layer.kind == LayerKind.CONV:
                c, h, w = spatial
                k = layer.kernel
                scale = np.sqrt(2.0 / (c * k * k))
                wt = Tensor(rng.normal(0, scale, size=(layer.out_size, c, k, k)),
                            requires_grad=True)
                self.params.append(wt)
                self.weights.append((layer, wt))
                out = h + 2 * ((k - 1) // 2) - k + 1
                spatial = (layer.out_size, out, out)
            elif layer.kind == LayerKind.POOL:
                c, h, w = spatial
                self.weights.append((layer, None))
                spatial = (c, h // layer.kernel, w // layer.kernel)
            elif layer.kind == LayerKind.FC:
                if spatial is not None:
                    dim = int(np.prod(spatial))
                    spatial = None
                scale = 1.0 / np.sqrt(dim)
                wt = Tensor(rng.uniform(-scale, scale, size=(dim, layer.out_size)),
                            requires_grad=True)
                bt = Tensor(np.zeros(layer.out_size), requires_grad=True)
                self.params += [wt, bt]
                self.weights.append((layer, wt, bt))
                dim = layer.out_size
            else:  # RELU / SOFTMAX act on whatever shape is current
                self.weights.append((layer, None))
        if spatial is not None:
            dim = int(np.prod(spatial))
        scale = 1.0 / np.sqrt(dim)
        self.head_w = Tensor(rng.uniform(-scale, scale, size=(dim, N_CLASSES)),
                             requires_grad=True)
        self.head_b = Tensor(np.zeros(N_CLASSES), requires_grad=True)
        self.params += [self.head_w, self.head_b]

    def forward(self, x: np.ndarray) -> Tensor:
        h: Tensor = Tensor(x)
        flat = False
        for entry in self.weights:
            layer = entry[0]
            if layer.kind == LayerKind.CONV:
                h = ad.conv2d(h, entry[1], padding=(layer.kernel - 1) // 2)
            elif layer.kind == LayerKind.POOL:
                h = ad.max_pool2d(h, layer.kernel)
            elif layer.kind == LayerKind.FC:
                if not flat:
                    h = ad.reshape(h, (h.shape[0], -1))
                    flat = True
                h = h @ entry[1] + entry[2]
            elif layer.kind == LayerKind.RELU:
                h = ad.relu(h)
            else:  # mid-sequence softmax used as a squashing activation
                h = ad.log_softmax(h, axis=-1)
        if not flat:
            h = ad.reshape(h, (h.shape[0], -1))
        return ad.log_softmax(h @ self.head_w + self.head_b)


_ACCURACY_CACHE: dict = {}


def proxy_accuracy(arch: ModelArch, task: ProxyTask, seed: int,
                   epochs: int = 15, batch_size: int = 512,
                   lr: float = 5e-3) -> float:
    """Validation accuracy of the arch trained from scratch on the task."""
    key = (tuple(arch.labels().tolist()), task.fingerprint, seed, epochs, lr)
    if key in _ACCURACY_CACHE:
        return _ACCURACY_CACHE[key]
    net = ProxyNet(arch, seed)
    rng = np.random.default_rng(seed + 1)
    opt = Adam(net.params, lr=lr)
    n = len(task.train_y)
    batch_size = min(batch_size, n)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            zero_grads(net.params)
            logp = net.forward(task.train_x[idx])
            loss = ad.neg(ad.mean(ad.gather(logp, task.train_y[idx])))
            backward(loss)
            opt.step()
    pred = net.forward(task.val_x).data.argmax(axis=1)
    acc = float((pred == task.val_y).mean())
    _ACCURACY_CACHE[key] = acc
    return acc


# ---------------------------------------------------------------------------
# controller and search
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SearchSpace:
    max_depth: int = 6
    candidates: tuple | None = None  # restrict search to explicit archs


@dataclass
class ControllerConfig:
    hidden: int = 32
    lr: float = 0.01
    baseline_decay: float = 0.9


@dataclass
class EpisodeLog:
    episode: int
    labels: tuple
    feasible: bool
    accuracy: float
    reward: float


class Controller:
    """Recurrent policy over layer tokens plus STOP."""

    def __init__(self, n_tokens: int, cfg: ControllerConfig, rng):
        self.n_tokens = n_tokens
        self.hidden = cfg.hidden
        self.gru = GRUParams.init(n_tokens, cfg.hidden, rng)
        scale = 1.0 / np.sqrt(cfg.hidden)
        self.out_w = Tensor(rng.uniform(-scale, scale,
                                        size=(cfg.hidden, n_tokens)),
                            requires_grad=True)
        self.out_b = Tensor(np.zeros(n_tokens), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return self.gru.tensors() + [self.out_w, self.out_b]

    def step_logp(self, inp: Tensor, h: Tensor, mask: np.ndarray):
        h = gru_cell(inp, h, self.gru)
        logits = h @ self.out_w + self.out_b
        logits = logits + Tensor(np.where(mask, 0.0, -1e9)[None, :])
        return ad.log_softmax(logits, axis=-1), h

    def sample(self, rng, max_depth: int, forbid_first=()):
        """Sample a token sequence; returns (tokens, summed log-prob Tensor)."""
        h = Tensor(np.zeros((1, self.hidden)))
        inp = Tensor(np.zeros((1, self.n_tokens)))
        tokens: list[int] = []
        logps: list[Tensor] = []
        for step in range(max_depth):
            mask = np.ones(self.n_tokens, dtype=bool)
            if step == 0:
                mask[list(forbid_first)] = False
            logp, h = self.step_logp(inp, h, mask)
            probs = np.exp(logp.data[0])
            probs /= probs.sum()
            tok = int(rng.choice(self.n_tokens, p=probs))
            logps.append(ad.slice_(ad.reshape(logp, (self.n_tokens,)),
                                   tok, tok + 1))
            if tok == self.n_tokens - 1 and self.n_tokens == VOCAB_SIZE + 1:
                tokens.append(tok)
                break
            tokens.append(tok)
            onehot = np.zeros((1, self.n_tokens))
            onehot[0, tok] = 1.0
            inp = Tensor(onehot)
        total = logps[0]
        for lp in logps[1:]:
            total = total + lp
        return tokens, ad.sum_(total)


def _arch_from_tokens(tokens) -> ModelArch:
    layers = [VOCAB[t] for t in tokens if t != STOP]
    if not layers or layers[-1].kind != LayerKind.SOFTMAX:
        layers.append(LayerSpec(LayerKind.SOFTMAX))
    return ModelArch(tuple(layers))


@dataclass
class SearchResult:
    arch: ModelArch
    accuracy: float
    log: list = field(default_factory=list)


def nas_worst(task: ProxyTask, episodes: int, seed: int,
              space: SearchSpace | None = None,
              cfg: ControllerConfig | None = None,
              invert_reward: bool = True) -> SearchResult:
    """REINFORCE search for the lowest-accuracy feasible architecture.

    Reward is 1 - accuracy (or raw accuracy when `invert_reward` is off,
    used as a directional sanity check). Returns the best arch seen across
    all episodes, not the final sample.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    space = space or SearchSpace()
    cfg = cfg or ControllerConfig()
    rng = np.random.default_rng(seed)
    if space.candidates is not None:
        n_tokens = len(space.candidates)
        max_depth = 1
    else:
        n_tokens = VOCAB_SIZE + 1
        max_depth = space.max_depth
    controller = Controller(n_tokens, cfg, rng)
    opt = Adam(controller.parameters(), lr=cfg.lr)
    baseline = 0.0
    best: tuple[float, ModelArch] | None = None
    log: list[EpisodeLog] = []
    softmax_tok = symbol_index(LayerSpec(LayerKind.SOFTMAX))
    forbid_first = (STOP, softmax_tok) if space.candidates is None else ()
    for ep in range(episodes):
        tokens, logp_sum = controller.sample(rng, max_depth, forbid_first)
        if space.candidates is not None:
            arch = space.candidates[tokens[0]]
        else:
            arch = _arch_from_tokens(tokens)
        try:
            acc = proxy_accuracy(arch, task, seed)
            feasible = True
        except InfeasibleArch:
            acc = 1.0
            feasible = False
        reward = (1.0 - acc) if invert_reward else acc
        advantage = reward - baseline
        baseline = cfg.baseline_decay * baseline + \
            (1.0 - cfg.baseline_decay) * reward
        zero_grads(controller.parameters())
        backward(logp_sum * (-advantage))
        opt.step()
        log.append(EpisodeLog(ep, tuple(arch.labels().tolist()), feasible,
                              acc, reward))
        score = acc if invert_reward else -acc
        if feasible and (best is None or score < best[0]):
            best = (score, arch)
    if best is None:
        raise RuntimeError("no feasible architecture sampled; "
                           "increase episodes")
    arch = best[1]
    return SearchResult(arch, proxy_accuracy(arch, task, seed), log)
