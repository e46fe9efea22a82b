"""Deterministic finite automata, their exact compilation into a one-head
PD-SSM, and emulation checks.

Text format (``.fsa``), one directive per line, ``#`` starts a comment::

    fsa v1
    name parity            # optional
    states 2
    symbols 0 1            # one name per input token id, in id order
    init 0
    classes 2
    labels 0 1             # class of every state
    on 0: 0 1              # next state for symbol "0" from states 0..n-1
    on 1: 1 0

Every symbol needs exactly one ``on`` row.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np

from .numerics import Rng
from .pd import PdMatrix, index_dtype, pd_apply
from .scan import DEFAULT_CHUNK, ScanInput, scan_chunked
from .selection import Dictionary, gather_indices, refresh_sparse_cache, select_hard

FORMAT_TAG = "fsa v1"


class FsaParseError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


@dataclass(frozen=True, eq=False)
class Automaton:
    delta: np.ndarray  # (n_symbols, n_states) next-state table
    q_init: int
    labels: np.ndarray  # (n_states,) class of each state
    n_classes: int
    symbols: tuple[str, ...] = ()
    name: str = ""

    def __post_init__(self):
        delta = np.array(self.delta, dtype=np.int64)
        labels = np.array(self.labels, dtype=np.int64)
        if delta.ndim != 2 or delta.shape[1] < 1:
            raise ValueError(f"delta must be (n_symbols, n_states), got shape {delta.shape}")
        n = delta.shape[1]
        if delta.size and (delta.min() < 0 or delta.max() >= n):
            raise ValueError(f"delta entries must lie in [0, {n})")
        if not 0 <= self.q_init < n:
            raise ValueError(f"q_init={self.q_init} outside [0, {n})")
        if labels.shape != (n,) or labels.min() < 0 or labels.max() >= self.n_classes:
            raise ValueError(f"labels must be {n} class ids in [0, {self.n_classes})")
        symbols = tuple(self.symbols) or tuple(str(s) for s in range(delta.shape[0]))
        if len(symbols) != delta.shape[0] or len(set(symbols)) != len(symbols):
            raise ValueError("symbols must be unique, one per delta row")
        delta.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "symbols", symbols)

    @property
    def n_states(self) -> int:
        return self.delta.shape[1]

    @property
    def n_symbols(self) -> int:
        return self.delta.shape[0]

    def __eq__(self, other):
        return (
            isinstance(other, Automaton)
            and np.array_equal(self.delta, other.delta)
            and np.array_equal(self.labels, other.labels)
            and (self.q_init, self.n_classes, self.symbols, self.name)
            == (other.q_init, other.n_classes, other.symbols, other.name)
        )

    __hash__ = None


def _check_tokens(a: Automaton, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= a.n_symbols):
        raise ValueError(f"token outside alphabet [0, {a.n_symbols})")
    return tokens


def fsa_run(a: Automaton, tokens) -> int:
    """Final state after reading ``tokens`` from q_init."""
    q = a.q_init
    for s in _check_tokens(a, tokens).tolist():
        q = int(a.delta[s, q])
    return q


def fsa_trace(a: Automaton, tokens) -> np.ndarray:
    """States after every step for a (..., L) batch of token sequences."""
    tokens = _check_tokens(a, tokens)
    out = np.empty(tokens.shape, dtype=np.int64)
    q = np.full(tokens.shape[:-1], a.q_init, dtype=np.int64)
    for t in range(tokens.shape[-1]):
        q = a.delta[tokens[..., t], q]
        out[..., t] = q
    return out


def fsa_final(a: Automaton, tokens) -> np.ndarray:
    tokens = _check_tokens(a, tokens)
    if tokens.shape[-1] == 0:
        return np.full(tokens.shape[:-1], a.q_init, dtype=np.int64)
    return fsa_trace(a, tokens)[..., -1]


def random_automaton(rng: Rng, n_states: int, n_symbols: int, n_classes: int = 2) -> Automaton:
    return Automaton(
        delta=rng.integers(0, n_states, (n_symbols, n_states)),
        q_init=int(rng.integers(0, n_states)),
        labels=rng.integers(0, n_classes, n_states),
        n_classes=n_classes,
    )


# ------------------------------------------------------------------ text I/O


def parse_fsa(text: str) -> Automaton:
    fields: dict[str, tuple[int, list[str]]] = {}
    rows: dict[str, tuple[int, list[str]]] = {}
    seen_header = False
    last = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        last = lineno
        if not seen_header:
            if line != FORMAT_TAG:
                raise FsaParseError(lineno, f"expected header '{FORMAT_TAG}'")
            seen_header = True
            continue
        if line.startswith("on "):
            head, sep, rest = line[3:].partition(":")
            sym = head.strip()
            if not sep or not sym:
                raise FsaParseError(lineno, "transition row must look like 'on <symbol>: q0 q1 ...'")
            if sym in rows:
                raise FsaParseError(lineno, f"duplicate row for symbol {sym!r}")
            rows[sym] = (lineno, rest.split())
            continue
        key, *vals = line.split()
        if key not in ("name", "states", "symbols", "init", "classes", "labels"):
            raise FsaParseError(lineno, f"unknown directive {key!r}")
        if key in fields:
            raise FsaParseError(lineno, f"duplicate directive {key!r}")
        fields[key] = (lineno, vals)
    if not seen_header:
        raise FsaParseError(max(last, 1), "empty automaton description")

    def one_int(key, lo, hi):
        if key not in fields:
            raise FsaParseError(last, f"missing directive {key!r}")
        ln, vals = fields[key]
        if len(vals) != 1:
            raise FsaParseError(ln, f"{key} takes one integer")
        return _int(vals[0], ln, lo, hi)

    n = one_int("states", 1, 1 << 20)
    n_classes = one_int("classes", 1, 1 << 20)
    q_init = one_int("init", 0, n - 1)
    for key in ("symbols", "labels"):
        if key not in fields:
            raise FsaParseError(last, f"missing directive {key!r}")
    ln, symbols = fields["symbols"]
    if not symbols or len(set(symbols)) != len(symbols):
        raise FsaParseError(ln, "symbols must be a non-empty list of unique names")
    ln, vals = fields["labels"]
    if len(vals) != n:
        raise FsaParseError(ln, f"expected {n} labels, got {len(vals)}")
    labels = [_int(v, ln, 0, n_classes - 1) for v in vals]
    delta = []
    for sym in symbols:
        if sym not in rows:
            raise FsaParseError(last, f"missing transition row for symbol {sym!r}")
        ln, vals = rows.pop(sym)
        if len(vals) != n:
            raise FsaParseError(ln, f"expected {n} next states, got {len(vals)}")
        delta.append([_int(v, ln, 0, n - 1) for v in vals])
    if rows:
        sym, (ln, _) = next(iter(rows.items()))
        raise FsaParseError(ln, f"row for undeclared symbol {sym!r}")
    name = " ".join(fields["name"][1]) if "name" in fields else ""
    return Automaton(np.array(delta), q_init, np.array(labels), n_classes, tuple(symbols), name)


def _int(s: str, line: int, lo: int, hi: int) -> int:
    try:
        v = int(s)
    except ValueError:
        raise FsaParseError(line, f"expected an integer, got {s!r}") from None
    if not lo <= v <= hi:
        raise FsaParseError(line, f"value {v} outside [{lo}, {hi}]")
    return v


def format_fsa(a: Automaton) -> str:
    lines = [FORMAT_TAG]
    if a.name:
        lines.append(f"name {a.name}")
    lines += [
        f"states {a.n_states}",
        "symbols " + " ".join(a.symbols),
        f"init {a.q_init}",
        f"classes {a.n_classes}",
        "labels " + " ".join(map(str, a.labels.tolist())),
    ]
    for s, sym in enumerate(a.symbols):
        lines.append(f"on {sym}: " + " ".join(map(str, a.delta[s].tolist())))
    return "\n".join(lines) + "\n"


def load_fsa(path) -> Automaton:
    with open(path, encoding="utf-8") as fh:
        return parse_fsa(fh.read())


BUNDLED = ("parity", "even_pairs", "cycle5", "mod_arith")


def bundled_fsa(name: str) -> Automaton:
    if name not in BUNDLED:
        raise KeyError(f"no bundled automaton {name!r}; choose from {BUNDLED}")
    return parse_fsa(resources.files("flash_pdssm.assets").joinpath(f"{name}.fsa").read_text("utf-8"))


# ------------------------------------------------------------------ compiler


@dataclass
class CompiledFSA:
    """Single-head PD-SSM whose state tracks an automaton exactly.

    One-hot token embeddings go through an identity selector, so the hard
    choice is the token itself; dictionary matrix ``sigma`` has a single 1 in
    every column ``q`` at row ``delta(q, sigma)``. The transition diagonal is
    fixed to 1, the input map and skip path are zero, and ``x0`` encodes the
    start state.
    """

    automaton: Automaton
    dictionary: Dictionary  # (1, |S|, n, n)
    selector: np.ndarray  # (1, |S|, |S|)
    w_in: np.ndarray  # (1, n, |S|)
    skip: np.ndarray  # (|S|,)
    readout: np.ndarray  # (classes, n), one indicator row per class
    x0: np.ndarray  # (1, n)
    chunk_size: int = DEFAULT_CHUNK
    workers: int = 1
    kind: str = field(default="compiled_fsa", init=False)

    @property
    def n(self) -> int:
        return self.x0.shape[-1]

    def parameters(self) -> dict[str, np.ndarray]:
        return {
            "dictionary": self.dictionary._dense,
            "selector": self.selector,
            "w_in": self.w_in,
            "skip": self.skip,
            "readout": self.readout,
            "x0": self.x0,
        }

    def scan_input(self, tokens: np.ndarray) -> ScanInput:
        tokens = np.asarray(tokens)
        n_sym = self.selector.shape[-1]
        if tokens.size and (tokens.min() < 0 or tokens.max() >= n_sym):
            raise ValueError(f"token ids must lie in [0, {n_sym})")
        refresh_sparse_cache(self.dictionary)
        u = np.eye(n_sym, dtype=self.x0.dtype)[tokens]  # (..., L, |S|)
        logits = u @ self.selector[0].T
        kstar = select_hard(logits[..., None, :])  # one head
        idx = gather_indices(self.dictionary.sparse_cache, kstar)[..., 0, :]
        diag = np.ones(idx.shape, dtype=self.x0.dtype)
        b = u @ self.w_in[0].T
        x0 = np.broadcast_to(self.x0[0], tokens.shape[:-1] + (self.n,))
        return ScanInput(idx, diag, b, x0)

    def states(self, tokens: np.ndarray) -> np.ndarray:
        """Hidden states after every step, shape (..., L, n)."""
        return scan_chunked(self.scan_input(tokens), self.chunk_size, self.workers, check=False).states

    def logits(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens)
        x = self.states(tokens)[..., -1, :] if tokens.shape[-1] else np.broadcast_to(self.x0[0], tokens.shape[:-1] + (self.n,))
        return x @ self.readout.T

    def predict(self, tokens: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(tokens), axis=-1)


def compile_to_ssm(a: Automaton, dtype=np.float64) -> CompiledFSA:
    S, n = a.n_symbols, a.n_states
    dense = np.zeros((1, S, n, n), dtype=dtype)
    cols = np.arange(n)
    for s in range(S):
        dense[0, s, a.delta[s], cols] = 1.0
    readout = np.zeros((a.n_classes, n), dtype=dtype)
    readout[a.labels, cols] = 1.0
    x0 = np.zeros((1, n), dtype=dtype)
    x0[0, a.q_init] = 1.0
    return CompiledFSA(
        automaton=a,
        dictionary=Dictionary(dense),
        selector=np.eye(S, dtype=dtype)[None],
        w_in=np.zeros((1, n, S), dtype=dtype),
        skip=np.zeros(S, dtype=dtype),
        readout=readout,
        x0=x0,
    )


def compiled_transition(c: CompiledFSA, symbol: int) -> PdMatrix:
    refresh_sparse_cache(c.dictionary)
    idx = c.dictionary.sparse_cache[0, symbol]
    return PdMatrix(idx.astype(index_dtype(c.n)), np.ones(c.n))


def one_hot_ok(c: CompiledFSA, symbol: int, q: int) -> bool:
    """pd_apply of the compiled transition keeps e_q one-hot at delta(q, symbol)."""
    e = np.zeros(c.n)
    e[q] = 1.0
    y = pd_apply(compiled_transition(c, symbol), e)
    return bool(np.array_equal(y, np.eye(c.n)[c.automaton.delta[symbol, q]]))


# -------------------------------------------------------------- verification


@dataclass
class EmulationReport:
    automaton: str
    n_states: int
    n_symbols: int
    mismatches: int = 0
    counterexample: list[int] | None = None
    counterexample_step: int | None = None
    exhaustive_max_len: int = 0
    exhaustive_strings: int = 0
    random_trials: int = 0
    max_random_len: int = 0
    wall_time_s: float = 0.0

    @property
    def ok(self) -> bool:
        return self.mismatches == 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ok"] = self.ok
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


EXHAUSTIVE_NODE_LIMIT = 2 * 10**7
BLOCK_ROWS = 1 << 16


def _record(report: EmulationReport, bad: np.ndarray, prefixes: np.ndarray, step_of=None):
    """Count mismatching rows; keep the first counterexample."""
    n_bad = int(bad.sum())
    if n_bad == 0:
        return
    report.mismatches += n_bad
    if report.counterexample is None:
        r = int(np.flatnonzero(bad)[0])
        seq = prefixes[r].tolist()
        step = len(seq) if step_of is None else int(step_of[r])
        report.counterexample = seq[:step]
        report.counterexample_step = step


def _exhaustive(c: CompiledFSA, max_len: int, report: EmulationReport):
    """Breadth-first over the trie of inputs, one scan step per level.

    Frontiers larger than BLOCK_ROWS are split and explored depth-first, so
    memory stays bounded while every string up to ``max_len`` is checked.
    """
    a = c.automaton
    S, n = a.n_symbols, a.n_states
    eye = np.eye(n, dtype=c.x0.dtype)
    # the empty string
    if not np.array_equal(c.x0[0], eye[a.q_init]):
        _record(report, np.array([True]), np.zeros((1, 0), dtype=np.int64))
    report.exhaustive_strings += 1

    rows_per_block = max(1, BLOCK_ROWS // S)
    # one-step inputs for a full block: every parent followed by every symbol
    step = c.scan_input(np.tile(np.arange(S), rows_per_block)[:, None])

    def expand(xs, qs, prefixes, level):
        if level == max_len:
            return
        for lo in range(0, len(qs), rows_per_block):
            xb, qb, pb = xs[lo:lo + rows_per_block], qs[lo:lo + rows_per_block], prefixes[lo:lo + rows_per_block]
            R = len(qb)
            sym = np.tile(np.arange(S), R)
            parent = np.repeat(np.arange(R), S)
            inp = ScanInput(step.idx[:R * S], step.diag[:R * S], step.b[:R * S], xb[parent])
            x_child = scan_chunked(inp, 1, c.workers, check=False).states[:, 0]
            q_child = a.delta[sym, qb[parent]]
            p_child = np.concatenate([pb[parent], sym[:, None]], axis=1)
            _record(report, np.any(x_child != eye[q_child], axis=1), p_child)
            report.exhaustive_strings += len(q_child)
            expand(x_child, q_child, p_child, level + 1)

    expand(c.x0.copy(), np.array([a.q_init]), np.zeros((1, 0), dtype=np.int64), 0)
    report.exhaustive_max_len = max_len


def _random(c: CompiledFSA, trials: int, max_len: int, rng: Rng, report: EmulationReport):
    a = c.automaton
    eye = np.eye(a.n_states, dtype=c.x0.dtype)
    lengths = rng.integers(1, max_len + 1, trials)
    for length in np.unique(lengths):
        count = int(np.sum(lengths == length))
        tokens = rng.integers(0, a.n_symbols, (count, int(length)))
        states = c.states(tokens)
        expected = eye[fsa_trace(a, tokens)]
        bad_steps = np.any(states != expected, axis=-1)  # (count, L)
        bad = bad_steps.any(axis=1)
        _record(report, bad, tokens, step_of=np.argmax(bad_steps, axis=1) + 1)
    report.random_trials = trials
    report.max_random_len = max_len


def trie_size(n_symbols: int, max_len: int) -> int:
    return sum(n_symbols**k for k in range(max_len + 1))


def verify_emulation(
    a: Automaton,
    compiled: CompiledFSA | None = None,
    max_exhaustive_len: int | None = 8,
    random_trials: int = 10_000,
    max_random_len: int = 512,
    seed: int = 0,
) -> EmulationReport:
    """Compare the compiled SSM's hidden state with the automaton at every step.

    Exhaustive over all inputs up to ``max_exhaustive_len`` (skipped if that
    trie exceeds EXHAUSTIVE_NODE_LIMIT nodes or the length is None), then
    ``random_trials`` uniform inputs with lengths uniform in [1, max_random_len].
    """
    t0 = time.perf_counter()
    c = compiled if compiled is not None else compile_to_ssm(a)
    report = EmulationReport(a.name or "automaton", a.n_states, a.n_symbols)
    if max_exhaustive_len and trie_size(a.n_symbols, max_exhaustive_len) <= EXHAUSTIVE_NODE_LIMIT:
        _exhaustive(c, max_exhaustive_len, report)
    if random_trials > 0:
        _random(c, random_trials, max_random_len, Rng(seed, (0xF5A,)), report)
    report.wall_time_s = time.perf_counter() - t0
    return report
