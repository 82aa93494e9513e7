"""Adversarial noise crafting against the surrogate extraction model.

Two defenses share one actuator: similarity reduction uses a single FGSM
step aggregated over repeated traces of the protected architecture, and
utility reduction accumulates a universal targeted-PGD perturbation that
steers decoding toward a decoy architecture. Ring oscillators can only
lower readouts, so all perturbations live in [-eps, 0] and the FGSM +1
direction is realized as "no noise".
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import NonFiniteError, Tensor, backward
from .ctc import ctc_loss
from .noisegen import MAX_LEVEL, NoiseSchedule, level_for


@dataclass(frozen=True)
class SimilarityNoise:
    """Per-readout push directions: +1 = leave alone, -1 = inject noise."""

    signs: np.ndarray
    budget: int

    def __post_init__(self):
        object.__setattr__(self, "signs", np.asarray(self.signs, dtype=np.int64))
        if not np.all(np.isin(self.signs, (-1, 1))):
            raise ValueError("signs must be +1 or -1")
        if not 1 <= self.budget <= 32:
            raise ValueError("budget must be in [1, 32]")


@dataclass(frozen=True)
class UtilityNoise:
    """Universal additive perturbation in raw readout units."""

    delta: np.ndarray
    eps: float

    def __post_init__(self):
        object.__setattr__(self, "delta", np.asarray(self.delta, dtype=np.float64))
        if self.eps < 0:
            raise ValueError("eps must be >= 0")
        if np.any(self.delta > 1e-9) or np.any(self.delta < -self.eps - 1e-9):
            raise ValueError("delta must lie in [-eps, 0]")


def _trace_gradient(model, readouts: np.ndarray, label: np.ndarray) -> np.ndarray:
    x = Tensor(np.asarray(readouts, dtype=np.float64), requires_grad=True)
    loss = ctc_loss(model.forward(x), np.asarray(label))
    backward(loss)
    if not np.all(np.isfinite(x.grad)):
        raise NonFiniteError("trace gradient is non-finite")
    return x.grad


def fgsm_similarity(model, traces, label, budget: int = 32) -> SimilarityNoise:
    """One-step sign perturbation summed over repeated victim traces.

    Each trace contributes sign(d ctc_loss / d readouts); the aggregate
    sign (ties break toward +1, i.e. no noise) gives the deployed
    direction per readout position.
    """
    if not getattr(model, "trained", False):
        raise ValueError("surrogate model has not been trained")
    traces = [np.asarray(t, dtype=np.float64) for t in traces]
    if not traces:
        raise ValueError("need at least one trace")
    n = len(traces[0])
    if any(len(t) != n for t in traces):
        raise ValueError("traces of the protected arch must share one length")
    total = np.zeros(n)
    for t in traces:
        total += np.sign(_trace_gradient(model, t, label))
    signs = np.where(total >= 0, 1, -1).astype(np.int64)
    return SimilarityNoise(signs, budget)


def map_similarity(noise: SimilarityNoise) -> NoiseSchedule:
    """+1 -> level 0 (ROs off); -1 -> full duty at the budgeted set count."""
    on_level = level_for(noise.budget, 10)
    return NoiseSchedule(np.where(noise.signs == 1, 0, on_level))


def universal_pgd(model, traces, target, eps: float, alpha: float | None = None,
                  k: int = 10, epochs: int = 3) -> UtilityNoise:
    """Universal targeted perturbation accumulated across a trace set.

    For every trace: add the running delta, take k projected gradient
    steps minimizing the CTC loss toward `target`, and fold the local
    increment back into the running delta, clamped to [-eps, 0].
    """
    if not getattr(model, "trained", False):
        raise ValueError("surrogate model has not been trained")
    traces = [np.asarray(t, dtype=np.float64) for t in traces]
    if not traces:
        raise ValueError("need at least one trace")
    n = len(traces[0])
    if any(len(t) != n for t in traces):
        raise ValueError("all traces must share one length (pad/crop upstream)")
    target = np.asarray(target, dtype=np.int64)
    if alpha is None:
        alpha = eps / 4.0
    delta = np.zeros(n)
    for _ in range(epochs):
        for t in traces:
            perturbed = t + delta
            local = np.zeros(n)
            for _ in range(k):
                try:
                    grad = _trace_gradient(model, perturbed + local, target)
                except NonFiniteError as exc:
                    raise ArithmeticError(
                        f"non-finite gradient during PGD: {exc}") from exc
                local = local - alpha * np.sign(grad)
                local = np.clip(perturbed + local, t - eps, t) - perturbed
            delta = np.clip(delta + local, -eps, 0.0)
    return UtilityNoise(delta, eps)


def quantize(noise: UtilityNoise, mode: str = "linear") -> NoiseSchedule:
    """Map a [-eps, 0] perturbation onto the 321 discrete RO levels."""
    if noise.eps <= 0:
        raise ValueError("eps must be > 0 to quantize")
    frac = np.clip(-noise.delta / noise.eps, 0.0, 1.0)
    if mode == "linear":
        levels = np.rint(frac * MAX_LEVEL)
    elif mode == "nonlinear":
        levels = np.rint(frac ** 2 * MAX_LEVEL)
    else:
        raise ValueError(f"unknown quantization mode {mode!r}")
    return NoiseSchedule(levels.astype(np.int64))
