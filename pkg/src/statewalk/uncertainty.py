"""Path distributions and the total/aleatoric/epistemic entropy split.

A sequence induces a distribution over committed-state paths: each step's
next-state distribution is conditioned on the previous committed state, and a
path's probability is the product of its chosen entries. The predictive
distribution is the path-weighted mixture of the per-final-state class
distributions. Its entropy (total) splits into the expected per-path entropy
(aleatoric, irreducible) and the remainder (epistemic, reducible), which is
non-negative because entropy is concave.

Temperature never appears here: paths are hard categorical draws from the
pre-noise transition distributions, so exact quantities are
temperature-invariant by construction. The relaxation temperature shapes what
the model learns, not how a fixed model's paths are distributed.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .gumbel import sample_gumbel
from .tensor import Tensor


class PathExplosion(ValueError):
    def __init__(self, k: int, n: int, max_paths: int):
        super().__init__(
            f"exact enumeration needs k^n = {k}^{n} paths, over the cap {max_paths}; "
            f"use Monte-Carlo mode (mc_decompose) instead")


@dataclass
class PathDistribution:
    """All committed-state paths for one input, with exact probabilities."""

    paths: list[tuple[tuple[int, ...], float]]
    class_table: np.ndarray  # (k, C): class distribution at each state
    start_state: int = 0

    def validate(self) -> None:
        total = sum(p for _path, p in self.paths)
        if not np.isclose(total, 1.0, atol=1e-9):
            raise ValueError(f"path probabilities sum to {total}, not 1")

    def final_state(self, path: tuple[int, ...]) -> int:
        return path[-1] if path else self.start_state

    def marginal(self) -> np.ndarray:
        out = np.zeros(self.class_table.shape[1])
        for path, p in self.paths:
            out += p * self.class_table[self.final_state(path)]
        return out


@dataclass
class UncertaintyReport:
    total: float        # bits
    aleatoric: float    # bits
    epistemic: float    # bits, total - aleatoric
    mode: str           # "exact" | "mc"
    runs: int | None = None

    def to_json(self) -> dict:
        return {"total_bits": self.total, "aleatoric_bits": self.aleatoric,
                "epistemic_bits": self.epistemic, "mode": self.mode, "runs": self.runs}


def total_entropy(p) -> float:
    """Shannon entropy in bits; zero entries contribute zero."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < -1e-12) or not np.isclose(p.sum(), 1.0, atol=1e-9):
        raise ValueError(f"not a probability distribution: {p}")
    p = np.clip(p, 0.0, 1.0)
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def decompose(dist: PathDistribution) -> UncertaintyReport:
    dist.validate()
    total = total_entropy(dist.marginal())
    aleatoric = 0.0
    for path, p in dist.paths:
        aleatoric += p * total_entropy(dist.class_table[dist.final_state(path)])
    return UncertaintyReport(total=total, aleatoric=aleatoric,
                             epistemic=total - aleatoric, mode="exact")


def enumerate_paths(model, tokens, max_paths: int = 10 ** 6) -> PathDistribution:
    """Exact path distribution by breadth-first expansion.

    Each level advances every live path one step in a single batched cell
    call: the batch rows are the paths' committed state vectors (plus the
    per-path cell state for an lstm), so both cell kinds enumerate exactly.
    """
    cfg = model.cfg
    if cfg.mode != "sttau":
        raise ValueError("path enumeration needs the stochastic state model")
    if cfg.real_input_dim:
        raise ValueError("path enumeration expects symbol sequences")
    tokens = [int(t) for t in np.asarray(tokens, dtype=np.int64).reshape(-1)]
    k, n = cfg.state_count, len(tokens)
    if k ** n > max_paths:
        raise PathExplosion(k, n, max_paths)
    class_table = model.class_probs_of_states()
    if n == 0:
        return PathDistribution([((), 1.0)], class_table)

    states = model.states.data
    probs = np.ones(1)
    paths: list[tuple[int, ...]] = [()]
    h = Tensor(states[[0]].copy())
    c = model.cell.initial_cell(1)
    for tok in tokens:
        batch = len(paths)
        x = model._input_row(np.full(batch, tok, dtype=np.int64))
        u, c_new = model.cell.step(x, h, c)
        logits = u.data @ states.T
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        theta = e / e.sum(axis=1, keepdims=True)
        probs = (probs[:, None] * theta).reshape(-1)
        paths = [path + (j,) for path in paths for j in range(k)]
        h = Tensor(np.tile(states, (batch, 1)))
        c = Tensor(np.repeat(c_new.data, k, axis=0)) if c_new is not None else None
    return PathDistribution(list(zip(paths, probs.tolist())), class_table)


def predictive_distribution(model, tokens) -> np.ndarray:
    """Class marginal by dynamic programming over state occupancy (gru only).

    Computes the same mixture as full enumeration without materializing
    paths, which is the cross-check that the enumeration is consistent.
    """
    table = model.transition_table()
    tokens = [int(t) for t in np.asarray(tokens, dtype=np.int64).reshape(-1)]
    dist = np.zeros(model.cfg.state_count)
    dist[0] = 1.0
    for tok in tokens:
        dist = dist @ table[:, tok, :]
    return dist @ model.class_probs_of_states()


def mc_paths(model, tokens, runs: int, rng: np.random.Generator) -> np.ndarray:
    """Sample committed-state paths, (runs, n).

    Every step commits to argmax(log theta + gumbel noise), which is an exact
    categorical draw from theta regardless of temperature. All runs advance
    together as one batch.
    """
    cfg = model.cfg
    if cfg.mode != "sttau":
        raise ValueError("path sampling needs the stochastic state model")
    tokens = [int(t) for t in np.asarray(tokens, dtype=np.int64).reshape(-1)]
    k, n = cfg.state_count, len(tokens)
    out = np.zeros((runs, n), dtype=np.int64)
    if n == 0:
        return out
    if cfg.cell == "gru":
        table = model.transition_table()
        state = np.zeros(runs, dtype=np.int64)
        for t, tok in enumerate(tokens):
            theta = table[state, tok]
            gamma = sample_gumbel(rng, (runs, k))
            with np.errstate(divide="ignore"):
                state = np.argmax(np.log(theta) + gamma, axis=1)
            out[:, t] = state
        return out
    states = model.states.data
    h = Tensor(np.repeat(states[[0]], runs, axis=0))
    c = model.cell.initial_cell(runs)
    for t, tok in enumerate(tokens):
        x = model._input_row(np.full(runs, tok, dtype=np.int64))
        u, c = model.cell.step(x, h, c)
        logits = u.data @ states.T
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        theta = e / e.sum(axis=1, keepdims=True)
        gamma = sample_gumbel(rng, (runs, k))
        with np.errstate(divide="ignore"):
            chosen = np.argmax(np.log(theta) + gamma, axis=1)
        out[:, t] = chosen
        h = Tensor(states[chosen])
    return out


def mc_decompose(model, tokens, runs: int, rng: np.random.Generator) -> UncertaintyReport:
    """Monte-Carlo estimate of the decomposition from sampled hard paths."""
    if runs < 2:
        raise ValueError("Monte-Carlo decomposition needs at least 2 runs")
    paths = mc_paths(model, tokens, runs, rng)
    class_table = model.class_probs_of_states()
    if paths.shape[1] == 0:
        finals = np.zeros(runs, dtype=np.int64)
    else:
        finals = paths[:, -1]
    q = class_table[finals]  # (runs, C)
    total = total_entropy(q.mean(axis=0))
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(q > 0, np.log2(np.where(q > 0, q, 1.0)), 0.0)
    aleatoric = float(-(q * logs).sum(axis=1).mean())
    return UncertaintyReport(total=total, aleatoric=aleatoric,
                             epistemic=total - aleatoric, mode="mc", runs=runs)


def write_reports_json(path: str, reports: list[tuple[str, UncertaintyReport]]) -> None:
    blob = [{"sequence": seq, **rep.to_json()} for seq, rep in reports]
    with open(path, "w") as f:
        json.dump(blob, f, indent=2)


def write_reports_csv(path: str, reports: list[tuple[str, UncertaintyReport]]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sequence", "total_bits", "aleatoric_bits", "epistemic_bits",
                         "mode", "runs"])
        for seq, rep in reports:
            writer.writerow([seq, f"{rep.total:.6f}", f"{rep.aleatoric:.6f}",
                             f"{rep.epistemic:.6f}", rep.mode,
                             "" if rep.runs is None else rep.runs])
