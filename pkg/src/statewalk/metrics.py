"""Calibration metrics, post-hoc temperature scaling, significance testing,
and out-of-distribution scoring.

Calibration errors are reported in percent. Confidence bins are equal-width
over (0, 1]: a confidence p lands in bin min(ceil(p*N), N), so bin upper
edges are inclusive. OOD scores are oriented so that higher means more
out-of-distribution before ranking; the area metrics treat the
out-of-distribution set as the positive class.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


@dataclass
class PredictionRecord:
    y_true: int
    y_pred: int
    confidence: float                       # max class probability
    run_max_probs: list[float] | None = None  # per stochastic run, for Var-MP
    logits: np.ndarray | None = None          # pre-softmax scores, for scaling

    def __post_init__(self):
        if not (0.0 < self.confidence <= 1.0):
            raise ValueError(f"confidence must be in (0, 1], got {self.confidence}")


@dataclass
class ReliabilityBin:
    lower: float
    upper: float
    count: int
    accuracy: float
    confidence: float


@dataclass
class CalibrationReport:
    pe: float   # predictive error, percent
    ece: float  # expected calibration error, percent
    mce: float  # maximum calibration error, percent
    bins: list[ReliabilityBin] = field(default_factory=list)


def bin_and_score(records: list[PredictionRecord], bins: int = 10) -> CalibrationReport:
    """ECE/MCE over equal-width confidence bins.

    ECE is the bin-count-weighted mean absolute accuracy/confidence gap; MCE
    is the largest gap over non-empty bins (empty bins contribute nothing to
    either).
    """
    if bins < 1:
        raise ValueError("bins must be at least 1")
    if not records:
        raise ValueError("no records to score")
    counts = np.zeros(bins, dtype=np.int64)
    correct = np.zeros(bins)
    conf_sum = np.zeros(bins)
    hits = 0
    for r in records:
        idx = min(int(np.ceil(r.confidence * bins)), bins) - 1
        counts[idx] += 1
        conf_sum[idx] += r.confidence
        if r.y_pred == r.y_true:
            correct[idx] += 1
            hits += 1
    m = len(records)
    out_bins: list[ReliabilityBin] = []
    ece = 0.0
    mce = 0.0
    for b in range(bins):
        lower, upper = b / bins, (b + 1) / bins
        if counts[b] == 0:
            out_bins.append(ReliabilityBin(lower, upper, 0, 0.0, 0.0))
            continue
        acc = correct[b] / counts[b]
        conf = conf_sum[b] / counts[b]
        gap = abs(acc - conf)
        ece += counts[b] / m * gap
        mce = max(mce, gap)
        out_bins.append(ReliabilityBin(lower, upper, int(counts[b]), float(acc), float(conf)))
    return CalibrationReport(pe=100.0 * (1.0 - hits / m), ece=100.0 * ece,
                             mce=100.0 * mce, bins=out_bins)


def reliability_csv(report: CalibrationReport, path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_lower", "bin_upper", "count", "accuracy", "confidence"])
        for b in report.bins:
            writer.writerow([f"{b.lower:.2f}", f"{b.upper:.2f}", b.count,
                             f"{b.accuracy:.6f}", f"{b.confidence:.6f}"])


def records_save(records: list[PredictionRecord], path: str) -> None:
    """CSV rows: true_label,pred_label,confidence[,run_probs...]."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        for r in records:
            row = [r.y_true, r.y_pred, f"{r.confidence:.6f}"]
            if r.run_max_probs is not None:
                row += [f"{p:.6f}" for p in r.run_max_probs]
            writer.writerow(row)


def records_load(path: str) -> list[PredictionRecord]:
    out = []
    with open(path, newline="") as f:
        for row in csv.reader(f):
            if not row:
                continue
            runs = [float(x) for x in row[3:]] or None
            out.append(PredictionRecord(int(row[0]), int(row[1]), float(row[2]), runs))
    return out


# ----------------------------------------------------------------------
# post-hoc temperature scaling


def _nll_at_temperature(logit_rows: np.ndarray, labels: np.ndarray, temp: float) -> float:
    z = logit_rows / temp
    z = z - z.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-log_probs[np.arange(len(labels)), labels].mean())


def fit_posthoc_temperature(records: list[PredictionRecord], lo: float = 0.05,
                            hi: float = 10.0, tol: float = 1e-3) -> float:
    """Scalar T > 0 minimizing validation NLL of softmax(logits / T).

    Golden-section search over [lo, hi]; dividing by a positive scalar never
    reorders a logit row, so predicted classes are unchanged for any T.
    """
    if not records:
        raise ValueError("no records to fit")
    if any(r.logits is None for r in records):
        raise ValueError("temperature fitting needs logits on every record")
    logit_rows = np.stack([np.asarray(r.logits, dtype=np.float64) for r in records])
    labels = np.array([r.y_true for r in records])

    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc = _nll_at_temperature(logit_rows, labels, c)
    fd = _nll_at_temperature(logit_rows, labels, d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = _nll_at_temperature(logit_rows, labels, c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = _nll_at_temperature(logit_rows, labels, d)
    return float((a + b) / 2.0)


def apply_temperature(records: list[PredictionRecord], temp: float) -> list[PredictionRecord]:
    """Rescale each record's confidence by its temperature-scaled softmax."""
    if temp <= 0:
        raise ValueError("temperature must be positive")
    out = []
    for r in records:
        if r.logits is None:
            raise ValueError("temperature application needs logits on every record")
        z = np.asarray(r.logits, dtype=np.float64) / temp
        z = z - z.max()
        p = np.exp(z) / np.exp(z).sum()
        out.append(PredictionRecord(r.y_true, int(np.argmax(p)), float(p.max()),
                                    r.run_max_probs, r.logits))
    return out


# ----------------------------------------------------------------------
# significance


def approx_randomization_test(errors_a, errors_b, iterations: int = 10_000,
                              rng: np.random.Generator | None = None) -> float:
    """Paired approximate randomization test on the error-rate difference.

    Each iteration flips a fair coin per pair to swap the two systems'
    outcomes; the p-value is the add-one-smoothed fraction of permuted
    absolute differences at least as large as the observed one.
    """
    a = np.asarray(errors_a, dtype=np.float64)
    b = np.asarray(errors_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise ValueError("need two equal-length non-empty paired vectors")
    if rng is None:
        rng = np.random.default_rng(0)
    observed = abs(a.mean() - b.mean())
    swaps = rng.random((iterations, a.size)) < 0.5
    diff = np.where(swaps, b - a, a - b).mean(axis=1)
    exceed = int((np.abs(diff) >= observed - 1e-12).sum())
    return (exceed + 1) / (iterations + 1)


# ----------------------------------------------------------------------
# out-of-distribution scoring


@dataclass
class OodReport:
    kind: str       # "mp" | "var_mp"
    accuracy: float  # in-distribution accuracy
    auroc: float
    aupr: float


def _ranks_with_ties(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0  # average rank, 1-based
        i = j + 1
    return ranks


def auroc(pos_scores, neg_scores) -> float:
    """P(pos > neg) with ties counted half, via the rank-sum statistic."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both score sets must be non-empty")
    ranks = _ranks_with_ties(np.concatenate([pos, neg]))
    rank_sum = ranks[:pos.size].sum()
    u = rank_sum - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def aupr(pos_scores, neg_scores) -> float:
    """Area under precision-recall by trapezoids, positives ranked by score.

    Tied scores step as one block. The curve is anchored at recall 0 with the
    first block's precision, so perfect separation integrates to exactly 1.
    """
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both score sets must be non-empty")
    scores = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(pos.size), np.zeros(neg.size)])
    order = np.argsort(-scores, kind="mergesort")
    scores, labels = scores[order], labels[order]
    points = []  # (recall, precision) after each distinct-score block
    tp = fp = 0
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and scores[j + 1] == scores[i]:
            j += 1
        tp += int(labels[i:j + 1].sum())
        fp += (j - i + 1) - int(labels[i:j + 1].sum())
        points.append((tp / pos.size, tp / (tp + fp)))
        i = j + 1
    area = 0.0
    prev_r, prev_p = 0.0, points[0][1]
    for r, p in points:
        area += (r - prev_r) * (p + prev_p) / 2.0
        prev_r, prev_p = r, p
    return float(area)


def ood_scores(model, in_set, out_set, runs: int = 10,
               rng: np.random.Generator | None = None) -> dict[str, OodReport]:
    """Score separation between an in-distribution set and an OOD set.

    ``in_set`` holds (tokens, label) pairs, ``out_set`` token lists. Each
    sequence gets ``runs`` stochastic passes; the mean of per-run max
    probabilities is the MP score (low ⇒ OOD) and their variance is the
    Var-MP score (high ⇒ OOD). Sets must be the same size so the area
    metrics have a balanced positive class.
    """
    from .model import mc_predict

    if not in_set or not out_set:
        raise ValueError("in and out sets must be non-empty")
    if len(in_set) != len(out_set):
        raise ValueError(f"in/out sets must be equal size, got {len(in_set)} vs {len(out_set)}")
    if rng is None:
        rng = np.random.default_rng(0)

    def summarize(tokens):
        mc = mc_predict(model, tokens, runs, rng)
        per_run_max = mc.run_probs.max(axis=1)
        return mc, float(per_run_max.mean()), float(per_run_max.var(ddof=1) if runs > 1 else 0.0)

    hits = 0
    in_mp, in_var, out_mp, out_var = [], [], [], []
    for tokens, label in in_set:
        mc, mp, var = summarize(tokens)
        hits += int(np.argmax(mc.mean) == label)
        in_mp.append(mp)
        in_var.append(var)
    for tokens in out_set:
        _mc, mp, var = summarize(tokens)
        out_mp.append(mp)
        out_var.append(var)
    acc = hits / len(in_set)
    # Orient both scores so higher means more out-of-distribution.
    neg_out_mp, neg_in_mp = -np.array(out_mp), -np.array(in_mp)
    mp_report = OodReport("mp", acc, auroc(neg_out_mp, neg_in_mp),
                          aupr(neg_out_mp, neg_in_mp))
    var_report = OodReport("var_mp", acc, auroc(np.array(out_var), np.array(in_var)),
                           aupr(np.array(out_var), np.array(in_var)))
    return {"mp": mp_report, "var_mp": var_report}
