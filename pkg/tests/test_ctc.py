import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcheck import check_gradients

from scaforge.autodiff import Tensor, backward, log_softmax
from scaforge.ctc import ctc_greedy_decode, ctc_loss, ler, levenshtein


def collapse(path, blank):
    out = []
    prev = -1
    for p in path:
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return tuple(out)


def brute_force_ctc(logp, label, blank):
    """Sum probability over all K^T paths whose collapse equals the label."""
    t_len, k = logp.shape
    target = tuple(label)
    total = 0.0
    for path in itertools.product(range(k), repeat=t_len):
        if collapse(path, blank) == target:
            total += math.exp(sum(logp[t, s] for t, s in enumerate(path)))
    return -math.log(total)


def random_logp(rng, t_len, k):
    x = rng.normal(size=(t_len, k))
    return log_softmax(Tensor(x)).data


def test_single_timestep_single_symbol():
    logp = random_logp(np.random.default_rng(0), 1, 4)
    loss = ctc_loss(Tensor(logp), np.array([2]), blank=3)
    assert np.isclose(loss.item(), -logp[0, 2])


def test_uniform_three_steps_one_symbol():
    # T=3, one symbol, alphabet 24: 5 valid alignments of prob (1/24)^3 each
    # (sbb, bsb, bbs, ssb, bss ... enumerated by the oracle).
    k = 24
    logp = np.full((3, k), -math.log(k))
    loss = ctc_loss(Tensor(logp), np.array([5]))
    oracle = brute_force_ctc(logp, [5], blank=k - 1)
    assert np.isclose(loss.item(), oracle, atol=1e-9)
    # closed form: alignments of 's' with blanks, T=3 -> 7 paths? verify count
    n_paths = sum(
        1 for p in itertools.product(range(2), repeat=3)
        if collapse(p, 1) == (0,))
    assert np.isclose(loss.item(), -math.log(n_paths * (1 / k) ** 3))


@pytest.mark.parametrize("seed", range(10))
def test_exhaustive_oracle_small_instances(seed):
    rng = np.random.default_rng(seed)
    t_len = int(rng.integers(1, 7))
    k = int(rng.integers(2, 5))
    max_label = min(3, t_len)
    lab_len = int(rng.integers(1, max_label + 1))
    label = rng.integers(0, k - 1, size=lab_len)
    # ensure admissible given repeats
    need = lab_len + int(np.sum(label[1:] == label[:-1]))
    if need > t_len:
        label = np.arange(lab_len) % (k - 1)
    logp = random_logp(rng, t_len, k)
    loss = ctc_loss(Tensor(logp), label, blank=k - 1)
    oracle = brute_force_ctc(logp, label, blank=k - 1)
    assert np.isclose(loss.item(), oracle, atol=1e-6)


def test_rejects_too_long_label():
    logp = random_logp(np.random.default_rng(0), 2, 4)
    with pytest.raises(ValueError):
        ctc_loss(Tensor(logp), np.array([0, 1, 2]))
    with pytest.raises(ValueError):
        ctc_loss(Tensor(logp), np.array([1, 1]))  # repeat needs a blank


@pytest.mark.parametrize("seed", range(5))
def test_ctc_gradient_finite_difference(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    label = np.array([0, 2])
    check_gradients(lambda: ctc_loss(log_softmax(x), label, blank=3), [x])


def test_input_gradient_nonzero():
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(6, 5)), requires_grad=True)
    loss = ctc_loss(log_softmax(x), np.array([1, 3]), blank=4)
    backward(loss)
    assert np.all(np.isfinite(x.grad))
    assert np.any(x.grad != 0)


def test_greedy_decode_collapse_rule():
    k = 9
    blank = 8
    logp = np.full((5, k), -10.0)
    for t, s in enumerate([blank, 5, 5, blank, 7]):
        logp[t, s] = 0.0
    assert np.array_equal(ctc_greedy_decode(logp, blank=blank), [5, 7])


def test_greedy_decode_all_blank_is_empty():
    logp = np.zeros((4, 3))
    logp[:, 2] = 5.0
    decoded = ctc_greedy_decode(logp, blank=2)
    assert len(decoded) == 0
    assert ler(decoded, [1, 0, 1]) == 1.0


@given(st.lists(st.integers(0, 3), min_size=1, max_size=8),
       st.integers(0, 10 ** 6))
@settings(max_examples=50, deadline=None)
def test_greedy_decode_matches_independent_collapse(label_seed, seed):
    rng = np.random.default_rng(seed)
    logp = rng.normal(size=(len(label_seed) + 3, 5))
    blank = 4
    assert tuple(ctc_greedy_decode(logp, blank=blank)) == \
        collapse(logp.argmax(axis=1), blank)


# ---------------------------------------------------------------------------
# LER / Levenshtein
# ---------------------------------------------------------------------------

def dp_oracle(a, b):
    """Full-matrix DP reference, written independently of levenshtein()."""
    m, n = len(a), len(b)
    d = np.zeros((m + 1, n + 1), dtype=int)
    d[:, 0] = np.arange(m + 1)
    d[0, :] = np.arange(n + 1)
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            d[i, j] = min(d[i - 1, j] + 1, d[i, j - 1] + 1,
                          d[i - 1, j - 1] + int(a[i - 1] != b[j - 1]))
    return int(d[m, n])


def test_ler_basics():
    assert ler([1, 2, 3], [1, 2, 3]) == 0.0
    assert ler([], [1, 2, 3, 4]) == 1.0
    assert ler(["a", "b", "c"], ["a", "c"]) == 0.5
    assert ler([1], [2, 3]) == 1.0  # sub + delete over len 2
    with pytest.raises(ValueError):
        ler([1], [])


def test_ler_can_exceed_one():
    assert ler([1, 2, 3, 4, 5], [9]) == 5.0


def test_levenshtein_1000_random_pairs_match_oracle():
    rng = np.random.default_rng(123)
    for _ in range(1000):
        a = rng.integers(0, 5, size=rng.integers(0, 12)).tolist()
        b = rng.integers(0, 5, size=rng.integers(1, 12)).tolist()
        assert levenshtein(a, b) == dp_oracle(a, b)


@given(st.lists(st.integers(0, 4), max_size=10),
       st.lists(st.integers(0, 4), min_size=1, max_size=10))
@settings(max_examples=100, deadline=None)
def test_ler_properties(a, b):
    assert levenshtein(a, b) == levenshtein(b, a)
    assert ler(b, b) == 0.0
    assert ler(a, b) >= 0.0
