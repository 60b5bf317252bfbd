import itertools

import numpy as np
import pytest

from deliberation import tensor as T
from deliberation.ctc import (AlignmentError, NBestList, collapse, ctc_loss, ctc_loss_batch,
                              greedy_decode, is_strictly_ordered, log_softmax_np, prefix_beam_search)
from deliberation.gradcheck import check_gradients
from deliberation.tensor import Tensor

BLANK = 1


def brute_collapse(path, blank):
    out, prev = [], None
    for k in path:
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return tuple(out)


def brute_ctc_nll(logp, target, blank):
    total = 0.0
    for path in itertools.product(range(logp.shape[1]), repeat=logp.shape[0]):
        if brute_collapse(path, blank) == tuple(target):
            total += np.exp(sum(logp[t, k] for t, k in enumerate(path)))
    return -np.log(total)


def test_single_frame_uniform_is_log_k():
    loss = ctc_loss(Tensor(np.zeros((1, 65))), [7])
    assert abs(loss.item() - np.log(65)) < 1e-12


def test_matches_all_65_pow_4_paths():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(4, 65))
    logp = log_softmax_np(z)
    a, b = 10, 20
    total = 0.0
    # every path, grouped by its first frame
    rest = np.array(list(itertools.product(range(65), repeat=3)), dtype=np.int16)
    rest_lp = logp[1, rest[:, 0]] + logp[2, rest[:, 1]] + logp[3, rest[:, 2]]
    for k0 in range(65):
        paths = np.column_stack([np.full(len(rest), k0, dtype=np.int16), rest])
        emit = np.zeros_like(paths, dtype=bool)
        emit[:, 0] = paths[:, 0] != BLANK
        emit[:, 1:] = (paths[:, 1:] != paths[:, :-1]) & (paths[:, 1:] != BLANK)
        ok = emit.sum(1) == 2
        pos = np.cumsum(emit, axis=1) - 1
        want = np.where(pos == 0, a, b)
        ok &= np.all(~emit | (paths == want), axis=1)
        total += np.exp(logp[0, k0] + rest_lp[ok]).sum()
    assert abs(ctc_loss(Tensor(z), [a, b]).item() + np.log(total)) < 1e-9


def test_exhaustive_sweep_small_instances():
    rng = np.random.default_rng(1)
    for k in (2, 3, 4):
        labels = [c for c in range(k) if c != BLANK]
        for n_t in range(1, 6):
            logp = log_softmax_np(rng.normal(size=(n_t, k)))
            for length in range(0, 4):
                for target in itertools.product(labels, repeat=length):
                    repeats = sum(x == y for x, y in zip(target, target[1:]))
                    if length + repeats > n_t:
                        with pytest.raises(AlignmentError):
                            ctc_loss(Tensor(logp), list(target), blank=BLANK)
                        continue
                    got = ctc_loss(Tensor(logp), list(target), blank=BLANK).item()
                    assert abs(got - brute_ctc_nll(logp, target, BLANK)) < 1e-9


def test_batch_with_padding_matches_singles():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(3, 7, 6))
    lengths = [7, 4, 5]
    targets = [[2, 3, 3], [4], [5, 2]]
    batch = ctc_loss_batch(Tensor(z), lengths, targets, reduction="sum").item()
    singles = sum(ctc_loss(Tensor(z[i, :lengths[i]]), targets[i]).item() for i in range(3))
    assert abs(batch - singles) < 1e-10


@pytest.mark.parametrize("seed", range(10))
def test_ctc_gradients(seed):
    rng = np.random.default_rng(seed)
    z = Tensor(rng.normal(size=(2, 6, 5)), requires_grad=True)
    targets = [[0, 2, 2], [3, 4]]
    assert check_gradients(lambda: ctc_loss_batch(z, [6, 5], targets), [z]) < 1e-3


def brute_decode(logp, blank):
    probs = {}
    for path in itertools.product(range(logp.shape[1]), repeat=logp.shape[0]):
        lab = brute_collapse(path, blank)
        probs[lab] = probs.get(lab, 0.0) + np.exp(sum(logp[t, k] for t, k in enumerate(path)))
    return sorted(((lab, np.log(p)) for lab, p in probs.items()), key=lambda x: (-x[1], x[0]))


def test_wide_beam_equals_exhaustive_decoding():
    rng = np.random.default_rng(3)
    for _ in range(20):
        logp = log_softmax_np(rng.normal(size=(3, 3)) * 2)
        oracle = brute_decode(logp, BLANK)
        got = prefix_beam_search(logp, beam_width=100, n=len(oracle), blank=BLANK)
        assert [h for h, _ in got] == [h for h, _ in oracle]
        np.testing.assert_allclose([s for _, s in got], [s for _, s in oracle], atol=1e-12)


def test_unit_beam_is_greedy_decoding():
    rng = np.random.default_rng(4)
    for _ in range(50):
        # a dominant class per frame; with flatter frames merged prefixes can outrank the best path
        z = rng.normal(size=(8, 6)) * 0.3
        z[np.arange(8), rng.integers(0, 6, size=8)] += 6.0
        logp = log_softmax_np(z)
        best = prefix_beam_search(logp, beam_width=1, n=1, blank=BLANK)[0][0]
        assert best == greedy_decode(logp, BLANK)


def test_nbest_contract_and_monotonicity():
    rng = np.random.default_rng(5)
    for _ in range(30):
        logp = log_softmax_np(rng.normal(size=(10, 7)) * 2)
        nb = prefix_beam_search(logp, beam_width=8, n=4, blank=BLANK, exclude=(0,))
        assert is_strictly_ordered(nb)
        assert len(set(nb.sequences)) == len(nb)
        assert all(BLANK not in h and 0 not in h for h in nb.sequences)
        best = [prefix_beam_search(logp, w, 1, BLANK)[0][1] for w in (1, 2, 4, 8, 16)]
        assert all(b >= a - 1e-12 for a, b in zip(best, best[1:]))


def test_beam_arguments():
    logp = log_softmax_np(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        prefix_beam_search(logp, beam_width=4, n=0)
    with pytest.raises(ValueError):
        prefix_beam_search(logp, beam_width=0, n=1)


def test_nbest_json_round_trip():
    nb = NBestList((((5, 6), -1.25), ((5,), -2.5)))
    utt, back = NBestList.from_json(nb.to_json("u1"))
    assert utt == "u1" and back == nb


def test_collapse():
    assert collapse([1, 5, 5, 1, 5, 6, 6, 1], blank=1) == (5, 5, 6)


def test_no_grad_path_has_no_tape():
    with T.no_grad():
        loss = ctc_loss(Tensor(np.zeros((3, 4)), requires_grad=True), [2])
    assert not loss.requires_grad
