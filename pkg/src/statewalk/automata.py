"""Finite automata: reference grammars, dataset generation, extraction, export.

Covers the deterministic side (a binary reference grammar, extraction of a
DFA with transition-uncertainty annotations from a trained model, bounded
language equivalence) and the probabilistic side (probabilistic automata,
sampling datasets from them, state-occupancy training targets, extraction of
a PA from a trained model, and behaviour-preserving state merging).
"""

from __future__ import annotations

import itertools
import json
from collections import defaultdict, deque
from dataclasses import dataclass, field

import numpy as np

from .gumbel import relaxed_sample_np


class MissingTransition(KeyError):
    def __init__(self, state, symbol):
        super().__init__(f"no transition from state {state!r} on symbol {symbol!r}")
        self.state = state
        self.symbol = symbol


@dataclass
class LabeledSequence:
    symbols: str
    label: int


# ----------------------------------------------------------------------
# deterministic automata


@dataclass
class Dfa:
    """Possibly-partial DFA with optional per-transition uncertainty notes."""

    states: list[int]
    alphabet: list[str]
    delta: dict[tuple[int, str], int]
    q0: int
    accepting: set[int]
    # (state, symbol) -> (mean, variance) of the relaxed transition weight
    # observed during extraction; absent for hand-built automata.
    annotations: dict[tuple[int, str], tuple[float, float]] = field(default_factory=dict)

    def run(self, symbols: str) -> int:
        state = self.q0
        for ch in symbols:
            if ch not in self.alphabet:
                raise ValueError(f"symbol {ch!r} is not in alphabet {self.alphabet}")
            key = (state, ch)
            if key not in self.delta:
                raise MissingTransition(state, ch)
            state = self.delta[key]
        return state

    def accepts(self, symbols: str, missing: str = "reject") -> bool:
        """Membership; a missing transition rejects unless missing="error"."""
        try:
            return self.run(symbols) in self.accepting
        except MissingTransition:
            if missing == "reject":
                return False
            raise

    def to_dot(self, name: str = "dfa") -> str:
        lines = [f"digraph {name} {{", "  rankdir=LR;", '  __start [shape=point, label=""];']
        for q in self.states:
            shape = "doublecircle" if q in self.accepting else "circle"
            lines.append(f'  q{q} [shape={shape}, label="{q}"];')
        lines.append(f"  __start -> q{self.q0};")
        for (q, sym), target in sorted(self.delta.items()):
            note = self.annotations.get((q, sym))
            if note is None:
                label = sym
            else:
                label = f"{sym} [{note[0]:.2f} ± {note[1]:.2f}]"
            lines.append(f'  q{q} -> q{target} [label="{label}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"


def _complete_next(dfa: Dfa, state, symbol):
    """Next state with missing transitions routed to a rejecting sink (None)."""
    if state is None:
        return None
    return dfa.delta.get((state, symbol))


def dfa_equivalent(a: Dfa, b: Dfa, max_len: int = 14) -> tuple[bool, str | None]:
    """Language equality over all strings up to ``max_len``.

    Breadth-first search over the product automaton, so a disagreement is
    reported with a shortest witness string. Missing transitions behave as a
    rejecting sink.
    """
    if sorted(a.alphabet) != sorted(b.alphabet):
        raise ValueError(f"alphabets differ: {a.alphabet} vs {b.alphabet}")
    symbols = sorted(a.alphabet)

    def accepting(pair):
        qa, qb = pair
        return (qa in a.accepting if qa is not None else False,
                qb in b.accepting if qb is not None else False)

    start = (a.q0, b.q0)
    seen = {start}
    queue = deque([(start, "", 0)])
    while queue:
        pair, word, depth = queue.popleft()
        acc_a, acc_b = accepting(pair)
        if acc_a != acc_b:
            return False, word
        if depth == max_len:
            continue
        for sym in symbols:
            nxt = (_complete_next(a, pair[0], sym), _complete_next(b, pair[1], sym))
            if nxt not in seen:
                seen.add(nxt)
                queue.append((nxt, word + sym, depth + 1))
    return True, None


# ----------------------------------------------------------------------
# the reference grammar: binary strings that never contain an odd run of 0s
# immediately after an odd run of 1s

_T3_DELTA = {
    (0, "1"): 1, (0, "0"): 0,   # 0: neutral (start)
    (1, "1"): 2, (1, "0"): 3,   # 1: inside an odd run of 1s
    (2, "1"): 1, (2, "0"): 0,   # 2: inside an even run of 1s
    (3, "0"): 4, (3, "1"): 5,   # 3: odd run of 0s after odd 1s (rejecting)
    (4, "0"): 3, (4, "1"): 1,   # 4: even run of 0s after odd 1s
    (5, "0"): 5, (5, "1"): 5,   # 5: dead
}

TOMITA3_DFA = Dfa(states=[0, 1, 2, 3, 4, 5], alphabet=["0", "1"], delta=dict(_T3_DELTA),
                  q0=0, accepting={0, 1, 2, 4})


def tomita3_membership(symbols: str) -> bool:
    for ch in symbols:
        if ch not in "01":
            raise ValueError(f"binary grammar got symbol {ch!r}")
    return TOMITA3_DFA.accepts(symbols)


def generate_tomita_dataset(max_len: int, n: int, rng: np.random.Generator) -> list[LabeledSequence]:
    """``n`` distinct uniform binary strings labelled by the reference grammar.

    Lengths are uniform on [0, max_len]. Neither class is allowed to exceed
    70% of the set, so both classes hold at least 30%.
    """
    if n < 2:
        raise ValueError("need at least 2 samples")
    if max_len < 2:
        raise ValueError("max_len below 2 cannot produce rejecting strings")
    cap = int(np.floor(0.7 * n))
    seen: set[str] = set()
    counts = [0, 0]
    out: list[LabeledSequence] = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 1000 * n:
            raise RuntimeError("could not reach the requested class balance")
        length = int(rng.integers(0, max_len + 1))
        s = "".join("1" if b else "0" for b in rng.integers(0, 2, size=length))
        if s in seen:
            continue
        label = int(tomita3_membership(s))
        if counts[label] >= cap:
            continue
        seen.add(s)
        counts[label] += 1
        out.append(LabeledSequence(s, label))
    return out


def generate_noisy_dataset(n: int, max_len: int, flip_prob: float,
                           rng: np.random.Generator) -> list[LabeledSequence]:
    """Reference-grammar dataset with labels flipped at a fixed rate.

    The flips inject irreducible label noise, which is the synthetic
    calibration benchmark: a well-calibrated model should not report
    confidence above the noise ceiling.
    """
    if not (0.0 <= flip_prob < 0.5):
        raise ValueError("flip_prob must be in [0, 0.5)")
    clean = generate_tomita_dataset(max_len, n, rng)
    out = []
    for item in clean:
        label = item.label ^ 1 if rng.random() < flip_prob else item.label
        out.append(LabeledSequence(item.symbols, label))
    return out


def generate_shifted_dataset(n: int, min_len: int, max_len: int, p_one: float,
                             rng: np.random.Generator) -> list[LabeledSequence]:
    """Out-of-distribution strings: biased bits and a shifted length range.

    Labels still come from the reference grammar so the file format stays
    uniform, but OOD scoring ignores them.
    """
    if not (0.0 < p_one < 1.0):
        raise ValueError("p_one must be in (0, 1)")
    if not (0 <= min_len <= max_len):
        raise ValueError("need 0 <= min_len <= max_len")
    out = []
    for _ in range(n):
        length = int(rng.integers(min_len, max_len + 1))
        s = "".join("1" if rng.random() < p_one else "0" for _ in range(length))
        out.append(LabeledSequence(s, int(tomita3_membership(s))))
    return out


def split_dataset(dataset: list[LabeledSequence], valid_fraction: float,
                  rng: np.random.Generator) -> tuple[list[LabeledSequence], list[LabeledSequence]]:
    if not (0.0 < valid_fraction < 1.0):
        raise ValueError("valid_fraction must be in (0, 1)")
    order = rng.permutation(len(dataset))
    n_valid = max(1, int(round(valid_fraction * len(dataset))))
    valid_idx = set(order[:n_valid].tolist())
    train = [dataset[i] for i in range(len(dataset)) if i not in valid_idx]
    valid = [dataset[i] for i in sorted(valid_idx)]
    if not train:
        raise ValueError("validation fraction leaves no training data")
    return train, valid


# ----------------------------------------------------------------------
# symbol encoding

START_SYMBOL = "^"


def encode_dataset(dataset: list[LabeledSequence], alphabet: list[str],
                   start_token: bool) -> list[tuple[list[int], int]]:
    """Map symbol strings to token-id lists; optionally prepend a begin marker.

    The begin marker takes id ``len(alphabet)``; models trained with
    ``start_token`` must use ``vocab_size = len(alphabet) + 1``.
    """
    index = {ch: i for i, ch in enumerate(alphabet)}
    if len(index) != len(alphabet):
        raise ValueError("alphabet contains duplicate symbols")
    start_id = len(alphabet)
    out = []
    for item in dataset:
        toks = []
        if start_token:
            toks.append(start_id)
        for ch in item.symbols:
            if ch not in index:
                raise ValueError(f"symbol {ch!r} not in alphabet {alphabet}")
            toks.append(index[ch])
        out.append((toks, item.label))
    return out


def dataset_save(dataset: list[LabeledSequence], path: str) -> None:
    with open(path, "w") as f:
        for item in dataset:
            f.write(f"{item.label}\t{item.symbols}\n")


def dataset_load(path: str) -> list[LabeledSequence]:
    out = []
    with open(path) as f:
        for i, line in enumerate(f):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{i + 1}: expected 'label<TAB>symbols'")
            out.append(LabeledSequence(parts[1], int(parts[0])))
    return out


# ----------------------------------------------------------------------
# probabilistic automata


@dataclass
class Pa:
    """Probabilistic automaton with per-(state, symbol) transition rows."""

    states: list[int]
    alphabet: list[str]
    kernel: dict[tuple[int, str], dict[int, float]]
    q0: int
    accepting: set[int]

    def validate(self) -> None:
        for (q, sym), row in self.kernel.items():
            if q not in self.states or sym not in self.alphabet:
                raise ValueError(f"kernel row ({q}, {sym!r}) references unknown state or symbol")
            total = sum(row.values())
            if not np.isclose(total, 1.0, atol=1e-9):
                raise ValueError(f"kernel row ({q}, {sym!r}) sums to {total}, not 1")
            for target, p in row.items():
                if target not in self.states:
                    raise ValueError(f"kernel row ({q}, {sym!r}) targets unknown state {target}")
                if not (0.0 <= p <= 1.0):
                    raise ValueError(f"kernel row ({q}, {sym!r}) has probability {p} outside [0, 1]")

    def accept_probability(self, symbols: str) -> float:
        """Probability that a random walk on ``symbols`` ends in an accepting state."""
        dist = {self.q0: 1.0}
        for ch in symbols:
            if ch not in self.alphabet:
                raise ValueError(f"symbol {ch!r} is not in alphabet {self.alphabet}")
            nxt: dict[int, float] = defaultdict(float)
            for state, mass in dist.items():
                if mass == 0.0:
                    continue
                row = self.kernel.get((state, ch))
                if row is None:
                    raise MissingTransition(state, ch)
                for target, p in row.items():
                    nxt[target] += mass * p
            dist = dict(nxt)
        return float(sum(mass for state, mass in dist.items() if state in self.accepting))

    def sample_walk(self, symbols: str, rng: np.random.Generator) -> list[int]:
        state = self.q0
        path = [state]
        for ch in symbols:
            row = self.kernel.get((state, ch))
            if row is None:
                raise MissingTransition(state, ch)
            targets = sorted(row)
            probs = np.array([row[t] for t in targets])
            state = targets[int(rng.choice(len(targets), p=probs / probs.sum()))]
            path.append(state)
        return path

    def to_dot(self, name: str = "pa") -> str:
        lines = [f"digraph {name} {{", "  rankdir=LR;", '  __start [shape=point, label=""];']
        for q in self.states:
            shape = "doublecircle" if q in self.accepting else "circle"
            lines.append(f'  q{q} [shape={shape}, label="{q}"];')
        lines.append(f"  __start -> q{self.q0};")
        for (q, sym), row in sorted(self.kernel.items()):
            for target, p in sorted(row.items()):
                lines.append(f'  q{q} -> q{target} [label="{sym} [{p:.2f}]"];')
        lines.append("}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> dict:
        return {
            "states": list(self.states),
            "alphabet": list(self.alphabet),
            "q0": self.q0,
            "accepting": sorted(self.accepting),
            "kernel": [
                {"from": q, "symbol": sym, "to": {str(t): p for t, p in sorted(row.items())}}
                for (q, sym), row in sorted(self.kernel.items())
            ],
        }

    @classmethod
    def from_json(cls, blob: dict) -> "Pa":
        kernel = {
            (entry["from"], entry["symbol"]): {int(t): float(p) for t, p in entry["to"].items()}
            for entry in blob["kernel"]
        }
        pa = cls(states=list(blob["states"]), alphabet=list(blob["alphabet"]),
                 kernel=kernel, q0=blob["q0"], accepting=set(blob["accepting"]))
        pa.validate()
        return pa


def benchmark_pas() -> dict[str, Pa]:
    """Bundled ground-truth probabilistic automata for the stochastic languages."""
    from importlib import resources

    raw = resources.files("statewalk.data").joinpath("benchmark_pas.json").read_text()
    return {name: Pa.from_json(blob) for name, blob in json.loads(raw).items()}


def pa_generate(pa: Pa, length_range: tuple[int, int], n: int | None,
                rng: np.random.Generator, duplicates: int = 10) -> list[LabeledSequence]:
    """Sample a labelled dataset from a PA.

    Base strings are either every string over the alphabet with length in
    ``length_range`` (default), or ``ceil(n / duplicates)`` random ones. Each
    base string appears ``duplicates`` times with independent Bernoulli labels
    drawn at its exact acceptance probability, so label noise mirrors the
    automaton's stochasticity.
    """
    lo, hi = length_range
    if not (1 <= lo <= hi):
        raise ValueError(f"length range must satisfy 1 <= lo <= hi, got {length_range}")
    if duplicates < 1:
        raise ValueError("duplicates must be at least 1")
    symbols = sorted(pa.alphabet)
    if n is None:
        total = sum(len(symbols) ** L for L in range(lo, hi + 1))
        if total * duplicates > 500_000:
            raise ValueError(f"enumeration would produce {total * duplicates} samples; pass n")
        base = ["".join(tup) for L in range(lo, hi + 1)
                for tup in itertools.product(symbols, repeat=L)]
    else:
        if n < 1:
            raise ValueError("n must be positive")
        count = -(-n // duplicates)
        base = []
        for _ in range(count):
            L = int(rng.integers(lo, hi + 1))
            base.append("".join(symbols[i] for i in rng.integers(0, len(symbols), size=L)))
    out = []
    for s in base:
        p = pa.accept_probability(s)
        labels = rng.random(duplicates) < p
        out.extend(LabeledSequence(s, int(lab)) for lab in labels)
    if n is not None:
        out = out[:n]
    return out


def pa_training_targets(label: int, state_count: int, flip: bool = False) -> np.ndarray:
    """Uniform target mass over half the state set, chosen by the label.

    Rejected strings target the first half, accepted strings the second;
    ``flip`` swaps the halves. Rows sum to one so they act as a distribution
    in the cross-entropy.
    """
    if state_count % 2 != 0 or state_count < 2:
        raise ValueError(f"state_count must be even and >= 2, got {state_count}")
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label}")
    accept = bool(label) != bool(flip)
    target = np.zeros(state_count)
    half = state_count // 2
    if accept:
        target[half:] = 2.0 / state_count
    else:
        target[:half] = 2.0 / state_count
    return target


# ----------------------------------------------------------------------
# extraction from trained models


def _symbol_tokens(model, alphabet: list[str]) -> dict[str, int]:
    if model.cfg.vocab_size not in (len(alphabet), len(alphabet) + 1):
        raise ValueError(
            f"model vocabulary size {model.cfg.vocab_size} does not fit alphabet "
            f"of {len(alphabet)} symbols (with or without a begin marker)")
    return {ch: i for i, ch in enumerate(alphabet)}


def extract_dfa(model, dataset: list[LabeledSequence], alphabet: list[str],
                rng: np.random.Generator) -> Dfa:
    """Harvest a DFA from a trained stochastic-state model.

    Every dataset sequence is replayed with hard state commitment: from the
    committed state, draw a relaxed transition sample, move to its argmax, and
    record that sample's winning weight under (state, symbol, target). The
    DFA keeps, per (state, symbol), the target with the highest mean recorded
    weight, annotated with that mean and variance. The begin marker (when the
    model was trained with one) contributes the start transition, so the
    start state itself is chosen the same way.
    """
    if not dataset:
        raise ValueError("extraction needs a non-empty dataset")
    tokens = _symbol_tokens(model, alphabet)
    uses_start = model.cfg.vocab_size == len(alphabet) + 1
    start_id = len(alphabet)
    table = model.transition_table()
    tau = model.temperature.tau

    # weights[(state, symbol)][target] -> list of winning relaxed weights
    weights: dict[tuple[int, str], dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
    start_weights: dict[int, list[float]] = defaultdict(list)

    for item in dataset:
        if uses_start:
            alpha = relaxed_sample_np(table[0, start_id], tau, rng)
            j = int(np.argmax(alpha))
            start_weights[j].append(float(alpha[j]))
            state = j
        else:
            state = 0
        for ch in item.symbols:
            if ch not in tokens:
                raise ValueError(f"symbol {ch!r} not in alphabet {alphabet}")
            alpha = relaxed_sample_np(table[state, tokens[ch]], tau, rng)
            j = int(np.argmax(alpha))
            weights[(state, ch)][j].append(float(alpha[j]))
            state = j

    if uses_start:
        if not start_weights:
            raise ValueError("no start transitions observed")
        q0 = max(start_weights, key=lambda j: float(np.mean(start_weights[j])))
    else:
        q0 = 0

    delta: dict[tuple[int, str], int] = {}
    annotations: dict[tuple[int, str], tuple[float, float]] = {}
    for key, per_target in weights.items():
        best = max(per_target, key=lambda j: float(np.mean(per_target[j])))
        samples = np.array(per_target[best])
        delta[key] = best
        annotations[key] = (float(samples.mean()), float(samples.var()))

    used = {q0} | {q for q, _s in delta} | set(delta.values())
    class_probs = model.class_probs_of_states()
    accepting = {q for q in used if int(np.argmax(class_probs[q])) == 1}
    return Dfa(states=sorted(used), alphabet=sorted(alphabet), delta=delta,
               q0=q0, accepting=accepting, annotations=annotations)


def extract_pa(model, dataset: list[LabeledSequence], alphabet: list[str],
               rng: np.random.Generator) -> Pa:
    """Harvest a PA from a model trained against automaton targets.

    Sequences are replayed with hard commitment: at each visit a relaxed
    transition sample alpha is drawn at the model's temperature and the walk
    moves to its argmax. The kernel row for a visited (state, symbol) is the
    average of those alpha samples, renormalized. Averaging the samples
    rather than the pre-noise distributions matters: at the cross-entropy
    optimum the expected sample equals the target distribution regardless of
    the temperature, so the sample mean is the calibrated transition
    estimate. Accepting states are the half of the state set that carried
    accept mass during training.
    """
    if not dataset:
        raise ValueError("extraction needs a non-empty dataset")
    tokens = _symbol_tokens(model, alphabet)
    if model.cfg.vocab_size != len(alphabet):
        raise ValueError("PA extraction expects a model trained without a begin marker")
    table = model.transition_table()
    k = model.cfg.state_count
    tau = model.temperature.tau

    sums: dict[tuple[int, str], np.ndarray] = defaultdict(lambda: np.zeros(k))
    counts: dict[tuple[int, str], int] = defaultdict(int)
    for item in dataset:
        state = 0
        for ch in item.symbols:
            if ch not in tokens:
                raise ValueError(f"symbol {ch!r} not in alphabet {alphabet}")
            alpha = relaxed_sample_np(table[state, tokens[ch]], tau, rng)
            sums[(state, ch)] += alpha
            counts[(state, ch)] += 1
            state = int(np.argmax(alpha))

    kernel: dict[tuple[int, str], dict[int, float]] = {}
    used = {0}
    for key, total in sums.items():
        row = total / counts[key]
        row = row / row.sum()
        kernel[key] = {j: float(p) for j, p in enumerate(row) if p > 0.0}
        used.add(key[0])
        used.update(kernel[key])
    accepting = set(int(i) for i in model.accept_state_indices()) & used
    return Pa(states=sorted(used), alphabet=sorted(alphabet), kernel=kernel,
              q0=0, accepting=accepting)


def merge_states(pa: Pa, tol: float, return_mapping: bool = False):
    """Merge behaviourally equivalent states of a PA.

    Two states may merge when they have the same acceptance status, define
    rows for the same symbols, and their per-symbol accept mass differs by at
    most ``tol`` (so tol=0 merges only exactly-equal signatures). The start
    state is never merged. Merged rows average the member rows and then pool
    targets by their clusters, renormalizing. Returns the merged PA, plus the
    old-state -> new-state mapping when ``return_mapping`` is set.
    """
    if tol < 0:
        raise ValueError("tol must be non-negative")
    symbols = sorted(pa.alphabet)

    def signature(q: int):
        sig = []
        for sym in symbols:
            row = pa.kernel.get((q, sym))
            if row is None:
                sig.append(None)
            else:
                sig.append(sum(p for t, p in row.items() if t in pa.accepting))
        return sig

    def compatible(sig_a, sig_b) -> bool:
        for x, y in zip(sig_a, sig_b):
            if (x is None) != (y is None):
                return False
            if x is not None and abs(x - y) > tol:
                return False
        return True

    clusters: list[dict] = []  # {"members": [...], "sig": [...], "accept": bool}
    order = sorted(pa.states)
    for q in order:
        sig = signature(q)
        accept = q in pa.accepting
        placed = False
        if q != pa.q0:
            for cluster in clusters:
                if cluster["start"] or cluster["accept"] != accept:
                    continue
                if compatible(cluster["sig"], sig):
                    cluster["members"].append(q)
                    placed = True
                    break
        if not placed:
            clusters.append({"members": [q], "sig": sig, "accept": accept,
                             "start": q == pa.q0})

    mapping = {}
    for new_id, cluster in enumerate(clusters):
        for q in cluster["members"]:
            mapping[q] = new_id

    kernel: dict[tuple[int, str], dict[int, float]] = {}
    for new_id, cluster in enumerate(clusters):
        for sym in symbols:
            rows = [pa.kernel[(q, sym)] for q in cluster["members"] if (q, sym) in pa.kernel]
            if not rows:
                continue
            pooled: dict[int, float] = defaultdict(float)
            for row in rows:
                for target, p in row.items():
                    pooled[mapping[target]] += p / len(rows)
            total = sum(pooled.values())
            kernel[(new_id, sym)] = {t: p / total for t, p in pooled.items()}

    merged = Pa(states=list(range(len(clusters))), alphabet=list(pa.alphabet), kernel=kernel,
                q0=mapping[pa.q0],
                accepting={new_id for new_id, c in enumerate(clusters) if c["accept"]})
    if return_mapping:
        return merged, mapping
    return merged
