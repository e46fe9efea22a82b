import numpy as np
import pytest

from flash_pdssm.fsa import fsa_final, fsa_run
from flash_pdssm.numerics import Rng
from flash_pdssm.tasks import (
    MOD,
    TASKS,
    TaskSample,
    gen_cycle_nav,
    gen_even_pairs,
    gen_mod_arith,
    gen_parity,
    interpret_mod_arith,
    mod_arith_automaton,
)

GENS = {"parity": gen_parity, "even_pairs": gen_even_pairs, "cycle_nav": gen_cycle_nav, "mod_arith": gen_mod_arith}


def test_parity_all_zeros():
    assert TASKS["parity"].interpreter([0] * 17) == 0
    assert fsa_run(TASKS["parity"].automaton, [0] * 17) == 0


def test_cycle_nav_by_hand():
    task = TASKS["cycle_nav"]
    moves = [0, 0, 1]  # +1, +1, -1
    assert task.interpreter(moves) == 1
    assert task.automaton.labels[fsa_run(task.automaton, moves)] == 1


def test_even_pairs_examples():
    interp = TASKS["even_pairs"].interpreter
    assert interp([0]) == 1
    assert interp([0, 1]) == 0
    assert interp([1, 0, 0, 1]) == 1


def test_mod_arith_precedence():
    # 2 + 3 * 4 = 14 -> 4 ; 4 - 1 * 3 = 1 ; 2 * 3 - 4 = 2
    assert interpret_mod_arith([2, 5, 3, 7, 4]) == 4
    assert interpret_mod_arith([4, 6, 1, 7, 3]) == 1
    assert interpret_mod_arith([2, 7, 3, 6, 4]) == 2
    assert interpret_mod_arith([3]) == 3


def test_mod_arith_matches_python_eval():
    rng = np.random.default_rng(0)
    sym = "01234+-*"
    for _ in range(500):
        L = 2 * int(rng.integers(0, 12)) + 1
        tok = TASKS["mod_arith"].tokens(Rng(int(rng.integers(1 << 30))), 1, L)[0]
        assert interpret_mod_arith(tok) == eval("".join(sym[t] for t in tok)) % MOD


def test_mod_arith_automaton_dead_state():
    a = mod_arith_automaton()
    dead = a.n_states - 1
    assert fsa_run(a, [5]) == dead
    assert fsa_run(a, [1, 2]) == dead
    assert fsa_run(a, [1, 5, 5, 3]) == dead
    assert a.n_states == 61


@pytest.mark.parametrize("name", sorted(TASKS))
def test_samples_agree_with_interpreter(name):
    task = TASKS[name]
    rng = Rng(1)
    for i in range(300):
        s = GENS[name](rng.spawn(i), (1, 60))
        assert isinstance(s, TaskSample)
        assert s.length == len(s.tokens)
        assert s.label == task.interpreter(s.tokens)
        assert s.label == task.automaton.labels[fsa_run(task.automaton, s.tokens)]


@pytest.mark.parametrize("name", sorted(TASKS))
def test_invalid_lengths_rejected(name):
    with pytest.raises(ValueError):
        GENS[name](Rng(0), (0, 5))
    with pytest.raises(ValueError):
        GENS[name](Rng(0), (9, 5))


def test_mod_arith_lengths_are_odd():
    task = TASKS["mod_arith"]
    assert task.tokens(Rng(0), 3, 40).shape == (3, 39)
    assert task.tokens(Rng(0), 3, 41).shape == (3, 41)


def _token_probs(name, position):
    task = TASKS[name]
    p = np.zeros(task.vocab)
    if name == "mod_arith":
        if position % 2 == 0:
            p[:MOD] = 1 / MOD
        else:
            p[MOD:] = 1 / 3
    else:
        p[:] = 1 / task.vocab
    return p


def _label_distribution(name, lengths):
    """Exact class distribution: push the state distribution through delta."""
    task = TASKS[name]
    a = task.automaton
    out = np.zeros(task.classes)
    for length in lengths:
        L = task.actual_length(length)
        dist = np.zeros(a.n_states)
        dist[a.q_init] = 1.0
        for t in range(L):
            probs = _token_probs(name, t)
            nxt = np.zeros_like(dist)
            for s in np.flatnonzero(probs):
                np.add.at(nxt, a.delta[s], probs[s] * dist)
            dist = nxt
        np.add.at(out, a.labels, dist / len(lengths))
    return out


@pytest.mark.parametrize("name", sorted(TASKS))
@pytest.mark.parametrize("lo,hi", [(1, 40), (40, 256)])
def test_label_distribution_within_three_sigma(name, lo, hi):
    task = TASKS[name]
    n = 100_000
    rng = Rng(5)
    lengths = rng.integers(lo, hi + 1, n)
    counts = np.zeros(task.classes)
    for i, L in enumerate(np.unique(lengths)):
        tok, lab = task.batch(rng.spawn(i), int(np.sum(lengths == L)), int(L))
        counts += np.bincount(lab, minlength=task.classes)
    p = _label_distribution(name, range(lo, hi + 1))
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma + 1e-9), (counts, n * p)


def test_batch_labels_match_interpreter():
    for name, task in TASKS.items():
        tok, lab = task.batch(Rng(7), 64, 33)
        assert [task.interpreter(t) for t in tok] == lab.tolist()
        np.testing.assert_array_equal(task.automaton.labels[fsa_final(task.automaton, tok)], lab)
