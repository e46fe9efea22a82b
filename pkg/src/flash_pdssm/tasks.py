"""The four synthetic state-tracking tasks.

Each task has a direct interpreter (the definition) and an automaton that
computes the same label; samples are labelled by the automaton and tests
check the two agree.

* parity: tokens {0, 1}; label = number of 1s mod 2.
* even_pairs: tokens {a, b}; label = 1 if the first and last token match.
* cycle_nav: tokens {+1, -1, 0} (ids 0, 1, 2); label = position mod 5
  after walking from 0.
* mod_arith: digits 0..4 (ids 0..4) alternating with operators + - x
  (ids 5, 6, 7), no brackets, usual precedence (x binds tighter);
  label = value mod 5. Expressions have odd length, so an even requested
  length yields one token fewer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fsa import Automaton, fsa_final
from .numerics import Rng

MOD = 5


@dataclass(frozen=True)
class TaskSample:
    tokens: np.ndarray
    label: int
    length: int


# ------------------------------------------------------------------ automata


def parity_automaton() -> Automaton:
    return Automaton(np.array([[0, 1], [1, 0]]), 0, np.array([0, 1]), 2, ("0", "1"), "parity")


def even_pairs_automaton() -> Automaton:
    # state 0: nothing read; state 1 + 2*first + last otherwise
    delta = np.zeros((2, 5), dtype=np.int64)
    for s in range(2):
        delta[s, 0] = 1 + 2 * s + s
        for first in range(2):
            for last in range(2):
                delta[s, 1 + 2 * first + last] = 1 + 2 * first + s
    labels = np.array([1] + [int(f == l) for f in range(2) for l in range(2)])
    return Automaton(delta, 0, labels, 2, ("a", "b"), "even_pairs")


def cycle_automaton() -> Automaton:
    q = np.arange(MOD)
    delta = np.stack([(q + 1) % MOD, (q - 1) % MOD, q])
    return Automaton(delta, 0, q.copy(), MOD, ("+1", "-1", "0"), "cycle5")


MOD_SYMBOLS = ("0", "1", "2", "3", "4", "+", "-", "*")
PLUS, MINUS, TIMES = 5, 6, 7


def mod_arith_states():
    """State list of the expression automaton, in index order.

    ("digit", acc, cur): after a digit; value so far is acc + cur, where cur is
    the signed product of the open term.
    ("sign", acc, s): after + or - (or at the start, as ("sign", 0, 1)).
    ("times", acc, cur): after x.
    ("dead",): malformed input.
    """
    states = [("sign", 0, 1)]
    states += [("sign", a, s) for a in range(MOD) for s in (1, -1) if (a, s) != (0, 1)]
    states += [("digit", a, c) for a in range(MOD) for c in range(MOD)]
    states += [("times", a, c) for a in range(MOD) for c in range(MOD)]
    states.append(("dead",))
    return states


def mod_arith_automaton() -> Automaton:
    states = mod_arith_states()
    index = {s: i for i, s in enumerate(states)}
    dead = index[("dead",)]
    delta = np.full((len(MOD_SYMBOLS), len(states)), dead, dtype=np.int64)
    labels = np.zeros(len(states), dtype=np.int64)
    for i, st in enumerate(states):
        kind = st[0]
        if kind == "digit":
            _, a, c = st
            labels[i] = (a + c) % MOD
            delta[PLUS, i] = index[("sign", (a + c) % MOD, 1)]
            delta[MINUS, i] = index[("sign", (a + c) % MOD, -1)]
            delta[TIMES, i] = index[("times", a, c)]
        elif kind == "sign":
            _, a, s = st
            labels[i] = a
            for d in range(MOD):
                delta[d, i] = index[("digit", a, (s * d) % MOD)]
        elif kind == "times":
            _, a, c = st
            labels[i] = (a + c) % MOD
            for d in range(MOD):
                delta[d, i] = index[("digit", a, (c * d) % MOD)]
    return Automaton(delta, 0, labels, MOD, MOD_SYMBOLS, "mod_arith")


# ------------------------------------------------------------- interpreters


def interpret_parity(tokens) -> int:
    return int(sum(int(t) for t in tokens) % 2)


def interpret_even_pairs(tokens) -> int:
    tokens = list(tokens)
    return 1 if not tokens or tokens[0] == tokens[-1] else 0


def interpret_cycle_nav(tokens) -> int:
    moves = {0: 1, 1: -1, 2: 0}
    return sum(moves[int(t)] for t in tokens) % MOD


def interpret_mod_arith(tokens) -> int:
    tokens = [int(t) for t in tokens]
    if len(tokens) % 2 == 0:
        raise ValueError("expression must have odd length")
    for i, t in enumerate(tokens):
        if (i % 2 == 0) != (t < MOD):
            raise ValueError(f"malformed expression at position {i}")
    # split into terms at + and -, multiply within terms
    total, sign, term = 0, 1, tokens[0]
    for op, d in zip(tokens[1::2], tokens[2::2]):
        if op == TIMES:
            term *= d
        else:
            total += sign * term
            sign = 1 if op == PLUS else -1
            term = d
    return (total + sign * term) % MOD


# --------------------------------------------------------------------- tasks


@dataclass(frozen=True)
class Task:
    name: str
    vocab: int
    classes: int
    automaton_fn: object
    interpreter: object
    alternating: bool = False

    @property
    def automaton(self) -> Automaton:
        return _AUTOMATA[self.name]

    def actual_length(self, length: int) -> int:
        if length < 1:
            raise ValueError(f"length must be >= 1, got {length}")
        return length - (length % 2 == 0) if self.alternating else length

    def tokens(self, rng: Rng, batch: int, length: int) -> np.ndarray:
        L = self.actual_length(int(length))
        if not self.alternating:
            return rng.integers(0, self.vocab, (batch, L))
        out = np.empty((batch, L), dtype=np.int64)
        out[:, 0::2] = rng.integers(0, MOD, (batch, (L + 1) // 2))
        out[:, 1::2] = rng.integers(PLUS, TIMES + 1, (batch, L // 2))
        return out

    def batch(self, rng: Rng, batch: int, length: int) -> tuple[np.ndarray, np.ndarray]:
        """``batch`` sequences of one length with automaton labels."""
        tok = self.tokens(rng, batch, length)
        return tok, self.automaton.labels[fsa_final(self.automaton, tok)]

    def sample(self, rng: Rng, length_range: tuple[int, int]) -> TaskSample:
        lo, hi = length_range
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid length range {length_range}")
        tok, lab = self.batch(rng, 1, int(rng.integers(lo, hi + 1)))
        return TaskSample(tok[0], int(lab[0]), tok.shape[1])


TASKS = {
    "parity": Task("parity", 2, 2, parity_automaton, interpret_parity),
    "even_pairs": Task("even_pairs", 2, 2, even_pairs_automaton, interpret_even_pairs),
    "cycle_nav": Task("cycle_nav", 3, MOD, cycle_automaton, interpret_cycle_nav),
    "mod_arith": Task("mod_arith", 8, MOD, mod_arith_automaton, interpret_mod_arith, alternating=True),
}

_AUTOMATA = {name: t.automaton_fn() for name, t in TASKS.items()}

# bundled automaton file for each task
TASK_FSA = {"parity": "parity", "even_pairs": "even_pairs", "cycle_nav": "cycle5", "mod_arith": "mod_arith"}


def get_task(name: str) -> Task:
    if name not in TASKS:
        raise KeyError(f"unknown task {name!r}; choose from {sorted(TASKS)}")
    return TASKS[name]


def gen_parity(rng: Rng, length_range) -> TaskSample:
    return TASKS["parity"].sample(rng, length_range)


def gen_even_pairs(rng: Rng, length_range) -> TaskSample:
    return TASKS["even_pairs"].sample(rng, length_range)


def gen_cycle_nav(rng: Rng, length_range) -> TaskSample:
    return TASKS["cycle_nav"].sample(rng, length_range)


def gen_mod_arith(rng: Rng, length_range) -> TaskSample:
    return TASKS["mod_arith"].sample(rng, length_range)
