"""Acceptance gate: eleven criteria, one test (and one pass/fail line) each.

Each criterion pins a shipped claim about the library at desk scale, with
tolerances stated inline. Criteria 2 and 3 share five full Tomita-3 training
runs through a session fixture and dominate the runtime: the complete gate
takes roughly 45 minutes on one core. Everything is seeded, so reruns are
bit-for-bit repeatable.

Run alone with: pytest tests/test_acceptance.py -v
"""

import numpy as np
import pytest

import statewalk.tensor as T
from statewalk.automata import (TOMITA3_DFA, benchmark_pas, dfa_equivalent,
                                encode_dataset, extract_dfa, extract_pa,
                                generate_noisy_dataset, generate_tomita_dataset,
                                merge_states, pa_generate, split_dataset)
from statewalk.cartpole import AgentConfig, train_agent
from statewalk.gumbel import (TemperatureParam, gumbel_softmax,
                              relaxed_sample_np, sample_gumbel)
from statewalk.metrics import (PredictionRecord, apply_temperature, aupr,
                               auroc, bin_and_score, fit_posthoc_temperature)
from statewalk.model import (ModelConfig, StateModel, TrainSettings,
                             mc_predict, train)
from statewalk.rng import stream_rng
from statewalk.tensor import Tape, Tensor
from statewalk.uncertainty import decompose, enumerate_paths, mc_decompose

from conftest import build_single_path_model, build_two_path_model


# ----------------------------------------------------------------------
# criterion 1: the two reference entropy decompositions


def test_criterion_01_entropy_decomposition_fixture():
    single = decompose(enumerate_paths(build_single_path_model(), [0]))
    assert abs(single.total - 0.8813) < 1e-3
    assert abs(single.aleatoric - 0.8813) < 1e-3
    assert abs(single.epistemic) < 1e-3

    two = decompose(enumerate_paths(build_two_path_model(), [0]))
    assert abs(two.aleatoric - 0.7345) < 1e-3
    assert abs(two.epistemic - 0.1468) < 1e-3


# ----------------------------------------------------------------------
# criteria 2 and 3: Tomita-3 recovery and the temperature trajectory
#
# Five independent seeds of the same protocol. Criterion 2 reads the first
# seed's accuracy and extracted automaton; criterion 3 reads the logged
# temperature arc of all five. At this budget seeds 0, 1 and 4 cross the
# accuracy phase transition; the other two are still climbing, which is
# exactly the margin criterion 3's 3-of-5 threshold allows for.

TOMITA_SEEDS = 5
TOMITA_UPDATES = 40_000
TAU_INIT = 1.0


@pytest.fixture(scope="session")
def tomita_runs():
    runs = []
    for seed in range(TOMITA_SEEDS):
        rng = stream_rng(seed, "data")
        data = generate_tomita_dataset(10, 2000, rng)
        train_raw, valid_raw = split_dataset(data, 0.1, rng)
        enc_train = encode_dataset(train_raw, ["0", "1"], True)
        enc_valid = encode_dataset(valid_raw, ["0", "1"], True)
        cfg = ModelConfig(vocab_size=3, hidden_dim=100, embed_dim=8,
                          state_count=10, cell="gru", learning_rate=0.001,
                          seed=seed, estimator="soft", batch_size=32,
                          output="head", tau_init=TAU_INIT, learn_tau=True)
        model = StateModel(cfg)
        log = train(model, enc_train, enc_valid,
                    TrainSettings(updates=TOMITA_UPDATES, validate_every=1000))
        runs.append((model, log, data))
    return runs


def test_criterion_02_tomita3_recovery(tomita_runs):
    model, log, data = tomita_runs[0]
    assert log.best_accuracy >= 0.99, f"held-out accuracy {log.best_accuracy}"
    dfa = extract_dfa(model, data, ["0", "1"], stream_rng(0, "eval"))
    ok, witness = dfa_equivalent(dfa, TOMITA3_DFA, 14)
    assert ok, f"extracted automaton disagrees with the reference on {witness!r}"


def test_criterion_03_temperature_rises_then_falls(tomita_runs):
    arcs = []
    for _model, log, _data in tomita_runs:
        taus = log.taus()
        peak = max(taus)
        arcs.append(peak > TAU_INIT and taus[-1] < peak)
    assert sum(arcs) >= 3, f"rise-then-fall on {sum(arcs)}/5 seeds: {arcs}"


# ----------------------------------------------------------------------
# criterion 4: probabilistic-automaton recovery on the documented benchmark


def test_criterion_04_pa_recovery():
    reference = benchmark_pas()["sl2"]
    # the benchmark's accepting state sends 0.3 of its "0" mass back to itself
    want = sum(p for s, p in reference.kernel[(2, "0")].items()
               if s in reference.accepting)
    assert abs(want - 0.3) < 1e-12

    rng = stream_rng(0, "data")
    data = pa_generate(reference, (1, 10), None, rng)
    train_raw, valid_raw = split_dataset(data, 0.1, rng)
    enc_train = encode_dataset(train_raw, ["0", "1"], False)
    enc_valid = encode_dataset(valid_raw, ["0", "1"], False)
    cfg = ModelConfig(vocab_size=2, hidden_dim=100, embed_dim=8, state_count=4,
                      cell="gru", learning_rate=0.001, seed=0, estimator="soft",
                      batch_size=32, output="states", pa_targets=True,
                      learn_tau=True)
    model = StateModel(cfg)
    train(model, enc_train, enc_valid,
          TrainSettings(updates=12_000, validate_every=1000))

    merged = merge_states(extract_pa(model, data, ["0", "1"],
                                     stream_rng(0, "eval")), 0.1)
    accepting = sorted(merged.accepting)
    assert len(accepting) == 1, f"expected one merged accepting state, got {accepting}"
    row = merged.kernel[(accepting[0], "0")]
    got = sum(p for s, p in row.items() if s in merged.accepting)
    assert abs(got - 0.3) <= 0.05, f"accept mass {got:.4f} not within 0.05 of 0.3"


# ----------------------------------------------------------------------
# criterion 5: relaxed categorical sampling


def test_criterion_05a_argmax_frequencies_match_theta():
    theta = np.array([0.1, 0.6, 0.3])
    rng = np.random.default_rng(12)
    n = 100_000
    counts = np.zeros(3)
    for _ in range(n):
        counts[np.argmax(relaxed_sample_np(theta, 0.1, rng))] += 1
    assert np.max(np.abs(counts / n - theta)) < 0.01


def test_criterion_05b_frozen_noise_gradients_match_finite_differences():
    rng = np.random.default_rng(10)
    logits = rng.normal(size=(3, 4))
    gamma = sample_gumbel(rng, (3, 4))
    weights = rng.normal(size=(3, 4))
    rho0 = np.log(0.9)

    def loss_value(lg, rho):
        temp = TemperatureParam(1.0)
        temp.rho.data[...] = rho
        alpha = gumbel_softmax(T.log_softmax(Tensor(lg)), gamma, temp)
        return float((alpha.data * weights).sum())

    t_logits = Tensor(logits.copy())
    temp = TemperatureParam(1.0)
    temp.rho.data[...] = rho0
    with Tape() as tape:
        alpha = gumbel_softmax(T.log_softmax(t_logits), gamma, temp)
        tape.backward(T.sum_all(T.mul(alpha, Tensor(weights))))

    h = 1e-6
    fd = np.zeros_like(logits)
    it = np.nditer(logits, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        bumped = logits.copy()
        bumped[i] += h
        up = loss_value(bumped, rho0)
        bumped[i] -= 2 * h
        fd[i] = (up - loss_value(bumped, rho0)) / (2 * h)
        it.iternext()
    rel = np.abs(t_logits.grad - fd) / np.maximum(np.abs(fd), 1e-3)
    assert np.max(rel) < 1e-5

    fd_rho = (loss_value(logits, rho0 + h) - loss_value(logits, rho0 - h)) / (2 * h)
    assert abs(float(temp.rho.grad) - fd_rho) / max(abs(fd_rho), 1e-3) < 1e-5


def test_criterion_05c_shift_invariance():
    rng = np.random.default_rng(8)
    logits = rng.normal(size=(4, 5))
    gamma = sample_gumbel(rng, (4, 5))
    temp = TemperatureParam(0.8)
    a1 = gumbel_softmax(T.log_softmax(Tensor(logits)), gamma, temp)
    a2 = gumbel_softmax(T.log_softmax(Tensor(logits + 7.31)), gamma, temp)
    assert np.max(np.abs(a1.data - a2.data)) < 1e-12


# ----------------------------------------------------------------------
# criterion 6: calibration scoring


def test_criterion_06_calibration_metrics():
    # hand oracle: one occupied bin, accuracy 0.7 at confidence 0.9
    records = [PredictionRecord(int(i < 7), 1, 0.9) for i in range(10)]
    report = bin_and_score(records, bins=10)
    assert abs(report.ece - 20.0) < 1e-9
    assert abs(report.mce - 20.0) < 1e-9

    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        confs = rng.uniform(0.01, 1.0, size=n)
        flags = rng.random(n) < rng.random()
        rep = bin_and_score([PredictionRecord(int(c), 1, float(p))
                             for p, c in zip(confs, flags)])
        assert rep.mce >= rep.ece - 1e-12

    calibrated = []
    m = 1000
    for p in np.arange(0.05, 1.0, 0.1):
        k = int(round(p * m))
        calibrated += [PredictionRecord(int(i < k), 1, float(p))
                       for i in range(m)]
    assert len(calibrated) == 10_000
    assert bin_and_score(calibrated).ece < 0.5


# ----------------------------------------------------------------------
# criterion 7: post-hoc temperature scaling


def overconfident_records():
    # logits are twice the calibrated ones and label counts sit exactly at
    # each group's T=2 softmax, so T=2 is the unique NLL stationary point
    out = []
    row_a = np.array([2 * np.log(3.0), 0.0])
    for y in [0] * 6 + [1] * 2:
        out.append(PredictionRecord(y, 0, 0.9, logits=row_a))
    row_b = np.array([0.0, 2 * np.log(7.0 / 3.0)])
    for y in [0] * 3 + [1] * 7:
        out.append(PredictionRecord(y, 1, 0.7, logits=row_b))
    return out


def test_criterion_07_temperature_scaling():
    records = overconfident_records()
    fit = fit_posthoc_temperature(records)
    assert abs(fit - 2.0) <= 0.05, f"fitted T = {fit:.4f}"
    before = [int(np.argmax(r.logits)) for r in records]
    for temperature in (fit, 0.1, 3.7, 42.0):
        after = [r.y_pred for r in apply_temperature(records, temperature)]
        assert before == after, f"argmax changed at T={temperature}"


# ----------------------------------------------------------------------
# criterion 8: OOD separation areas


def pair_count_auroc(pos, neg):
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0
               for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


def test_criterion_08_ood_metrics():
    rng = np.random.default_rng(1)
    same_pos = rng.normal(size=2000)
    same_neg = rng.normal(size=2000)
    assert abs(auroc(same_pos, same_neg) - 0.5) < 0.02

    apart_pos = rng.uniform(2.0, 3.0, size=50)
    apart_neg = rng.uniform(0.0, 1.0, size=50)
    assert auroc(apart_pos, apart_neg) == 1.0
    assert aupr(apart_pos, apart_neg) == 1.0

    pos, neg = [3.0, 1.0], [2.0, 0.0, 0.0]
    assert abs(auroc(pos, neg) - pair_count_auroc(pos, neg)) < 1e-12
    assert abs(auroc(pos, neg) - 5.0 / 6.0) < 1e-12
    assert abs(aupr(pos, neg) - 19.0 / 24.0) < 1e-12


# ----------------------------------------------------------------------
# criterion 9: epistemic non-negativity and Monte-Carlo convergence


def test_criterion_09_epistemic_nonnegative_and_mc_convergence():
    worst = 0.0
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(2, 5))
        cfg = ModelConfig(vocab_size=2, class_count=2, embed_dim=3,
                          hidden_dim=int(rng.integers(3, 7)), state_count=k,
                          cell="gru", seed=seed)
        model = StateModel(cfg, rng)
        tokens = rng.integers(0, 2, size=int(rng.integers(1, 6)))
        report = decompose(enumerate_paths(model, tokens))
        worst = min(worst, report.epistemic)
    assert worst >= -1e-9, f"most negative epistemic estimate {worst}"

    fixture = build_two_path_model()
    exact = decompose(enumerate_paths(fixture, [0]))
    mc = mc_decompose(fixture, [0], runs=100_000, rng=stream_rng(3, "eval"))
    assert abs(mc.total - exact.total) < 0.01
    assert abs(mc.aleatoric - exact.aleatoric) < 0.01
    assert abs(mc.epistemic - exact.epistemic) < 0.01


# ----------------------------------------------------------------------
# criterion 10: cartpole control


def test_criterion_10_cartpole_reaches_45_of_50():
    hits = 0
    episode_counts = []
    for seed in range(5):
        cfg = AgentConfig(kind="sttau", observe="mdp", policy="sampling",
                          episodes=5000, seed=seed, stop_at=45.0)
        _model, curve = train_agent(cfg)
        hit = any(row["episode"] >= cfg.moving_window
                  and row["moving_average"] >= 45.0 for row in curve)
        hits += int(hit)
        episode_counts.append(len(curve))
    assert hits >= 3, f"{hits}/5 seeds reached the target; episodes {episode_counts}"


# ----------------------------------------------------------------------
# criterion 11: calibration advantage over the vanilla baseline
#
# Synthetic label-noise task: Tomita-3 membership with 20% of the labels
# flipped. The stochastic model's MC-averaged confidence should be at least
# as well calibrated as the deterministic baseline's on most seeds, even
# though the baseline often reaches higher raw accuracy by fitting the noise.


def _noisy_task_ece(kind: str, seed: int) -> float:
    rng = stream_rng(seed, "data")
    data = generate_noisy_dataset(2000, 12, 0.2, rng)
    train_raw, valid_raw = split_dataset(data, 0.15, rng)
    enc_train = encode_dataset(train_raw, ["0", "1"], True)
    enc_valid = encode_dataset(valid_raw, ["0", "1"], True)
    cfg = ModelConfig(vocab_size=3, hidden_dim=100, embed_dim=8,
                      state_count=10 if kind == "sttau" else 1,
                      cell="gru", learning_rate=0.001, seed=seed,
                      estimator="soft", batch_size=32, output="head",
                      mode=kind)
    model = StateModel(cfg)
    train(model, enc_train, enc_valid,
          TrainSettings(updates=5000, validate_every=500))
    eval_rng = stream_rng(seed, "eval")
    records = []
    for tokens, label in enc_valid:
        pred = mc_predict(model, np.asarray(tokens, dtype=np.int64), 10, eval_rng)
        guess = int(np.argmax(pred.mean))
        records.append(PredictionRecord(label, guess, float(pred.mean[guess])))
    return bin_and_score(records).ece


def test_criterion_11_stochastic_model_calibrates_better():
    wins = []
    for seed in range(5):
        st = _noisy_task_ece("sttau", seed)
        vanilla = _noisy_task_ece("vanilla", seed)
        wins.append(st <= vanilla)
    assert sum(wins) >= 4, f"stochastic model won {sum(wins)}/5 seeds: {wins}"
