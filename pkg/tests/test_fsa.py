import numpy as np
import pytest

from flash_pdssm.fsa import (
    BUNDLED,
    Automaton,
    FsaParseError,
    bundled_fsa,
    compile_to_ssm,
    compiled_transition,
    format_fsa,
    fsa_final,
    fsa_run,
    fsa_trace,
    one_hot_ok,
    parse_fsa,
    random_automaton,
    verify_emulation,
)
from flash_pdssm.numerics import Rng
from flash_pdssm.pd import pd_apply
from flash_pdssm.tasks import TASK_FSA, TASKS, parity_automaton


def _second_interpreter(delta, q0, tokens):
    """Table walk written independently of fsa_run, via a dict of dicts."""
    table = {s: {q: int(delta[s][q]) for q in range(len(delta[s]))} for s in range(len(delta))}
    q = q0
    for t in tokens:
        q = table[int(t)][q]
    return q


def test_run_empty_input():
    a = parity_automaton()
    assert fsa_run(a, []) == a.q_init


def test_run_parity_by_hand():
    assert fsa_run(parity_automaton(), [1, 1, 0]) == 0


def test_run_rejects_bad_token():
    with pytest.raises(ValueError):
        fsa_run(parity_automaton(), [0, 2])


def test_run_matches_second_interpreter():
    rng = Rng(11)
    for trial in range(50):
        a = random_automaton(rng.spawn(trial), 5, 3)
        tokens = rng.integers(0, 3, 20)
        assert fsa_run(a, tokens) == _second_interpreter(a.delta.tolist(), a.q_init, tokens)


def test_trace_and_final_agree_with_run():
    rng = Rng(12)
    a = random_automaton(rng, 6, 4, 3)
    tokens = rng.integers(0, 4, (7, 15))
    trace = fsa_trace(a, tokens)
    for r in range(7):
        for t in range(15):
            assert trace[r, t] == fsa_run(a, tokens[r, : t + 1])
    np.testing.assert_array_equal(fsa_final(a, tokens), trace[:, -1])


def test_automaton_validation():
    with pytest.raises(ValueError):
        Automaton(np.array([[0, 2]]), 0, np.array([0, 0]), 1)
    with pytest.raises(ValueError):
        Automaton(np.array([[0, 1]]), 2, np.array([0, 0]), 1)
    with pytest.raises(ValueError):
        Automaton(np.array([[0, 1]]), 0, np.array([0, 3]), 2)


# ------------------------------------------------------------------ format


def test_format_round_trip():
    rng = Rng(13)
    for trial in range(20):
        a = random_automaton(rng.spawn(trial), int(rng.integers(1, 9)), int(rng.integers(1, 5)), 3)
        assert parse_fsa(format_fsa(a)) == a


@pytest.mark.parametrize("task", sorted(TASK_FSA))
def test_bundled_files_match_task_automata(task):
    assert bundled_fsa(TASK_FSA[task]) == TASKS[task].automaton


BAD = [
    ("fsa v2\n", 1, "header"),
    ("fsa v1\nstates 2\nsymbols 0 1\ninit 0\nclasses 2\nlabels 0 1\non 0: 0 1\non 1: 1 2\n", 8, "outside"),
    ("fsa v1\nstates 2\nsymbols 0 1\ninit 0\nclasses 2\nlabels 0 1\non 0: 0 1\n", 7, "missing transition"),
    ("fsa v1\nstates 2\nsymbols 0 1\ninit 0\nclasses 2\nlabels 0\non 0: 0 1\non 1: 1 0\n", 6, "labels"),
    ("fsa v1\nstates two\n", 2, "integer"),
    ("fsa v1\nstates 2\nstates 3\n", 3, "duplicate"),
    ("fsa v1\nstates 2\nsymbols 0 1\ninit 0\nclasses 2\nlabels 0 1\non 0: 0 1\non 1: 1 0\non 2: 0 0\n", 9, "undeclared"),
    ("fsa v1\nbogus 1\n", 2, "unknown"),
]


@pytest.mark.parametrize("text,line,fragment", BAD)
def test_parse_errors_carry_line_numbers(text, line, fragment):
    with pytest.raises(FsaParseError) as exc:
        parse_fsa(text)
    assert exc.value.line == line
    assert fragment in str(exc.value)


def test_parse_ignores_comments_and_blank_lines():
    text = "# hello\n\nfsa v1  # tag\nstates 1\nsymbols x\ninit 0\nclasses 1\nlabels 0\non x: 0\n"
    a = parse_fsa(text)
    assert a.n_states == 1 and a.symbols == ("x",)


# ------------------------------------------------------------------ compiler


def test_one_state_automaton_keeps_constant_state():
    a = Automaton(np.zeros((2, 1), dtype=int), 0, np.array([0]), 1)
    c = compile_to_ssm(a)
    states = c.states(np.array([[0, 1, 1, 0]]))
    np.testing.assert_array_equal(states, np.ones((1, 4, 1)))


def test_parity_compiles_to_identity_and_swap():
    c = compile_to_ssm(parity_automaton())
    np.testing.assert_array_equal(compiled_transition(c, 0).idx, [0, 1])
    np.testing.assert_array_equal(compiled_transition(c, 1).idx, [1, 0])


def test_cycle_exhaustive_to_length_eight():
    a = bundled_fsa("cycle5")
    r = verify_emulation(a, max_exhaustive_len=8, random_trials=0)
    assert r.ok and r.exhaustive_strings == sum(3**k for k in range(9))


def test_parity_exhaustive_to_length_eleven():
    r = verify_emulation(parity_automaton(), max_exhaustive_len=11, random_trials=0)
    assert r.ok
    assert r.exhaustive_strings - 1 == 4094


def test_corrupted_entry_yields_counterexample():
    a = bundled_fsa("cycle5")
    c = compile_to_ssm(a)
    # symbol "+1" from state 3 should go to 4; send it to 0 instead
    c.dictionary._dense[0, 0, :, 3] = 0
    c.dictionary._dense[0, 0, 0, 3] = 1
    c.dictionary.mark_dirty()
    r = verify_emulation(a, c, max_exhaustive_len=6, random_trials=100)
    assert not r.ok
    ce = r.counterexample
    assert fsa_run(a, ce[:-1]) == 3 and ce[-1] == 0
    assert r.counterexample_step == len(ce)


def test_random_seven_state_automaton_long_inputs():
    a = random_automaton(Rng(21), 7, 3, 2)
    r = verify_emulation(a, max_exhaustive_len=None, random_trials=10_000, max_random_len=512)
    assert r.ok and r.random_trials == 10_000


def test_fifty_random_automata_exhaustive():
    rng = Rng(22)
    for trial in range(50):
        sub = rng.spawn(trial)
        a = random_automaton(sub, int(sub.integers(1, 9)), int(sub.integers(1, 5)), 3)
        r = verify_emulation(a, max_exhaustive_len=8, random_trials=0)
        assert r.ok, (trial, r.counterexample)


def test_hidden_states_are_one_hot():
    a = random_automaton(Rng(23), 8, 4, 2)
    c = compile_to_ssm(a)
    states = c.states(Rng(24).integers(0, 4, (16, 64)))
    assert set(np.unique(states).tolist()) <= {0.0, 1.0}
    np.testing.assert_array_equal(states.sum(axis=-1), 1.0)


def test_compiled_predictions_match_labels():
    for name in BUNDLED:
        a = bundled_fsa(name)
        c = compile_to_ssm(a)
        tokens = Rng(25).integers(0, a.n_symbols, (64, 40))
        np.testing.assert_array_equal(c.predict(tokens), a.labels[fsa_final(a, tokens)])


def test_compiled_state_independent_of_chunking():
    a = bundled_fsa("mod_arith")
    c = compile_to_ssm(a)
    tokens = Rng(26).integers(0, a.n_symbols, (4, 300))
    ref = c.states(tokens)
    for tau, w in [(1, 1), (7, 2), (300, 4)]:
        c.chunk_size, c.workers = tau, w
        np.testing.assert_array_equal(c.states(tokens), ref)


# ----------------------------------------------------------- one-hot property


def test_one_hot_preserved_for_every_transition():
    rng = Rng(27)
    for trial in range(30):
        a = random_automaton(rng.spawn(trial), int(rng.integers(1, 9)), 3)
        c = compile_to_ssm(a)
        assert all(one_hot_ok(c, s, q) for s in range(a.n_symbols) for q in range(a.n_states))


def test_gather_convention_breaks_one_hot_for_non_injective_delta():
    # both states map to state 0 under the only symbol
    a = Automaton(np.array([[0, 0]]), 0, np.array([0, 0]), 1)
    c = compile_to_ssm(a)
    pd = compiled_transition(c, 0)
    e0 = np.array([1.0, 0.0])
    scatter = pd_apply(pd, e0)
    gather = pd.diag * e0[pd.idx]
    np.testing.assert_array_equal(scatter, [1.0, 0.0])
    assert gather.sum() == 2.0  # not one-hot
