"""Recurrent sequence classifiers with a stochastic finite-state bottleneck.

The main model keeps a bank of k learnable state vectors. At every step an
inner recurrent cell proposes an update from the previous (committed or mixed)
state, the proposal is scored against the bank to give a next-state
distribution, and a Gumbel-softmax draw from that distribution selects the new
hidden state. A plain recurrent classifier with an unconstrained hidden state
is available as the baseline under the same interface.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .gumbel import TemperatureParam, gumbel_softmax, straight_through
from .gumbel import sample_gumbel
from .rng import stream_rng
from .tensor import NonFiniteError, Parameter, Tape, Tensor, adam_step, load_tensors, save_tensors

CELLS = ("gru", "lstm")
ESTIMATORS = ("soft", "st")
MODES = ("sttau", "vanilla")
OUTPUTS = ("head", "states")


class TrainingDiverged(RuntimeError):
    """Loss or a gradient went non-finite during training."""

    def __init__(self, update_index: int, detail: str):
        super().__init__(f"training diverged at update {update_index}: {detail}")
        self.update_index = update_index
        self.detail = detail


@dataclass
class ModelConfig:
    vocab_size: int
    class_count: int = 2
    embed_dim: int = 8
    hidden_dim: int = 100
    state_count: int = 10
    cell: str = "gru"
    estimator: str = "soft"
    mode: str = "sttau"
    learn_tau: bool = True
    tau_init: float = 1.0
    learning_rate: float = 0.001
    batch_size: int = 32
    seed: int = 0
    # Output head: "head" = dense softmax classifier on the final hidden
    # state; "states" = the final next-state distribution itself is the
    # prediction (used for automaton-target training and the RL policy).
    output: str = "head"
    # Automaton-target training: cross-entropy against a multi-hot split of
    # the state set instead of class labels. Requires output="states".
    pa_targets: bool = False
    # Swap which half of the state set carries the accept mass.
    target_flip: bool = False
    # Nonzero: inputs are raw feature rows of this width, no embedding table.
    real_input_dim: int = 0

    def __post_init__(self):
        if self.cell not in CELLS:
            raise ValueError(f"cell must be one of {CELLS}, got {self.cell!r}")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}, got {self.estimator!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.output not in OUTPUTS:
            raise ValueError(f"output must be one of {OUTPUTS}, got {self.output!r}")
        if self.real_input_dim == 0 and self.vocab_size < 1:
            raise ValueError("vocab_size must be at least 1")
        if min(self.embed_dim, self.hidden_dim, self.batch_size) < 1:
            raise ValueError("embed_dim, hidden_dim and batch_size must be positive")
        if self.class_count < 2:
            raise ValueError("class_count must be at least 2")
        if self.mode == "sttau" and self.state_count < 1:
            raise ValueError("state_count must be at least 1")
        if not (self.tau_init > 0 and np.isfinite(self.tau_init)):
            raise ValueError(f"tau_init must be positive and finite, got {self.tau_init}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.output == "states" and self.mode != "sttau":
            raise ValueError('output="states" requires the stochastic state model')
        if self.pa_targets:
            if self.output != "states":
                raise ValueError('pa_targets requires output="states"')
            if self.state_count % 2 != 0:
                raise ValueError("pa_targets needs an even state count to split in half")
            if self.class_count != 2:
                raise ValueError("pa_targets is a two-class (reject/accept) objective")


def _weight(rng: np.random.Generator, n_in: int, n_out: int, name: str) -> Parameter:
    limit = 1.0 / np.sqrt(n_in)
    return Parameter(rng.uniform(-limit, limit, (n_in, n_out)), name)


class GruCell:
    kind = "gru"

    def __init__(self, in_dim: int, hidden_dim: int, rng: np.random.Generator):
        self.hidden_dim = hidden_dim
        self.w_z = _weight(rng, in_dim, hidden_dim, "cell.w_z")
        self.u_z = _weight(rng, hidden_dim, hidden_dim, "cell.u_z")
        self.b_z = Parameter(np.zeros(hidden_dim), "cell.b_z")
        self.w_r = _weight(rng, in_dim, hidden_dim, "cell.w_r")
        self.u_r = _weight(rng, hidden_dim, hidden_dim, "cell.u_r")
        self.b_r = Parameter(np.zeros(hidden_dim), "cell.b_r")
        self.w_g = _weight(rng, in_dim, hidden_dim, "cell.w_g")
        self.u_g = _weight(rng, hidden_dim, hidden_dim, "cell.u_g")
        self.b_g = Parameter(np.zeros(hidden_dim), "cell.b_g")

    def parameters(self) -> list[Parameter]:
        return [self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r,
                self.w_g, self.u_g, self.b_g]

    def initial_cell(self, batch: int) -> None:
        return None

    def step(self, x: Tensor, h: Tensor, c):
        z = T.sigmoid(T.add(T.add(T.matmul(x, self.w_z), T.matmul(h, self.u_z)), self.b_z))
        r = T.sigmoid(T.add(T.add(T.matmul(x, self.w_r), T.matmul(h, self.u_r)), self.b_r))
        cand = T.tanh(T.add(T.add(T.matmul(x, self.w_g), T.matmul(T.mul(r, h), self.u_g)), self.b_g))
        u = T.add(T.mul(z, h), T.mul(T.sub(Tensor(1.0), z), cand))
        return u, None


class LstmCell:
    kind = "lstm"

    def __init__(self, in_dim: int, hidden_dim: int, rng: np.random.Generator):
        self.hidden_dim = hidden_dim
        gates = ("i", "f", "o", "g")
        self.w = {g: _weight(rng, in_dim, hidden_dim, f"cell.w_{g}") for g in gates}
        self.u = {g: _weight(rng, hidden_dim, hidden_dim, f"cell.u_{g}") for g in gates}
        self.b = {g: Parameter(np.zeros(hidden_dim), f"cell.b_{g}") for g in gates}

    def parameters(self) -> list[Parameter]:
        out = []
        for g in ("i", "f", "o", "g"):
            out += [self.w[g], self.u[g], self.b[g]]
        return out

    def initial_cell(self, batch: int) -> Tensor:
        return Tensor(np.zeros((batch, self.hidden_dim)))

    def _gate(self, name: str, x: Tensor, h: Tensor) -> Tensor:
        pre = T.add(T.add(T.matmul(x, self.w[name]), T.matmul(h, self.u[name])), self.b[name])
        return T.tanh(pre) if name == "g" else T.sigmoid(pre)

    def step(self, x: Tensor, h: Tensor, c: Tensor):
        i = self._gate("i", x, h)
        f = self._gate("f", x, h)
        o = self._gate("o", x, h)
        g = self._gate("g", x, h)
        c_new = T.add(T.mul(f, c), T.mul(i, g))
        u = T.mul(o, T.tanh(c_new))
        return u, c_new


@dataclass
class BatchTrace:
    """Forward-pass record for one same-length batch."""

    log_output: Tensor            # (B, C) class log-probs, or (B, k) state log-probs
    probs: np.ndarray             # detached copy of exp(log_output)
    thetas: np.ndarray | None     # (L, B, k) pre-noise next-state distributions
    alphas: np.ndarray | None     # (L, B, k) relaxed samples
    state_indices: np.ndarray | None  # (L, B) argmax of each relaxed sample
    h_final: Tensor | None = None


@dataclass
class McPrediction:
    """Monte-Carlo summary over repeated stochastic forward passes."""

    mean: np.ndarray              # (C,)
    variance: np.ndarray          # (C,) sample variance across runs (0 if one run)
    run_probs: np.ndarray         # (runs, C)
    state_paths: np.ndarray | None  # (runs, L) committed-state indices per run
    runs: int
    single_run: bool              # True when runs == 1 so variance is not estimable


class StateModel:
    """Sequence classifier; ``cfg.mode`` picks stochastic-state or baseline."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        if rng is None:
            rng = stream_rng(cfg.seed, "init")
        in_dim = cfg.real_input_dim if cfg.real_input_dim else cfg.embed_dim
        self.embedding = None
        if not cfg.real_input_dim:
            self.embedding = Parameter(rng.uniform(-0.5, 0.5, (cfg.vocab_size, cfg.embed_dim)),
                                       "embedding")
        cell_cls = GruCell if cfg.cell == "gru" else LstmCell
        self.cell = cell_cls(in_dim, cfg.hidden_dim, rng)
        self.states = None
        self.temperature = None
        if cfg.mode == "sttau":
            # Row i is the i-th state vector; mixing is alpha @ states.
            limit = 1.0 / np.sqrt(cfg.hidden_dim)
            self.states = Parameter(rng.uniform(-limit, limit, (cfg.state_count, cfg.hidden_dim)),
                                    "states")
            self.temperature = TemperatureParam(cfg.tau_init, cfg.learn_tau)
        self.head_w = None
        self.head_b = None
        if cfg.output == "head":
            self.head_w = _weight(rng, cfg.hidden_dim, cfg.class_count, "head.w")
            self.head_b = Parameter(np.zeros(cfg.class_count), "head.b")

    # ------------------------------------------------------------------
    # parameters and persistence

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        if self.embedding is not None:
            out.append(self.embedding)
        out += self.cell.parameters()
        if self.states is not None:
            out.append(self.states)
        if self.head_w is not None:
            out += [self.head_w, self.head_b]
        if self.temperature is not None:
            out.append(self.temperature.rho)
        return out

    def trainable_parameters(self) -> list[Parameter]:
        params = self.parameters()
        if self.temperature is not None and not self.temperature.trainable:
            params = [p for p in params if p is not self.temperature.rho]
        return params

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, blob: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in blob:
                raise KeyError(f"checkpoint is missing parameter {p.name!r}")
            arr = np.asarray(blob[p.name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise T.ShapeError(f"load parameter {p.name!r}", p.data.shape, arr.shape)
            p.data[...] = arr

    def save(self, path: str) -> None:
        import json
        save_tensors(path, self.state_dict())
        sidecar = {"config": asdict(self.cfg), "tau": self.tau}
        with open(path + ".json", "w") as f:
            json.dump(sidecar, f, indent=2)

    @classmethod
    def load(cls, path: str) -> "StateModel":
        import json
        with open(path + ".json") as f:
            sidecar = json.load(f)
        cfg = ModelConfig(**sidecar["config"])
        model = cls(cfg)
        model.load_state_dict(load_tensors(path))
        return model

    @property
    def tau(self) -> float | None:
        return self.temperature.tau if self.temperature is not None else None

    # ------------------------------------------------------------------
    # forward passes

    def initial_state(self, batch: int):
        if self.cfg.mode == "sttau":
            # The walk starts pinned at the first state vector.
            h = T.lookup(self.states, np.zeros(batch, dtype=np.int64))
        else:
            h = Tensor(np.zeros((batch, self.cfg.hidden_dim)))
        return h, self.cell.initial_cell(batch)

    def _input_row(self, tokens_t) -> Tensor:
        if self.embedding is not None:
            return T.lookup(self.embedding, tokens_t)
        return Tensor(np.asarray(tokens_t, dtype=np.float64))

    def _state_step(self, u: Tensor, gamma: np.ndarray):
        logits = T.matmul(u, T.transpose(self.states))
        theta = T.softmax(logits)
        log_theta = T.log_softmax(logits)
        alpha, log_alpha = gumbel_softmax(log_theta, gamma, self.temperature, return_log=True)
        mix = straight_through(alpha) if self.cfg.estimator == "st" else alpha
        h = T.matmul(mix, self.states)
        return h, theta, alpha, log_alpha

    def forward_batch(self, tokens: np.ndarray, rng: np.random.Generator | None,
                      collect: bool = False) -> BatchTrace:
        """Run one batch of same-length sequences.

        ``tokens`` is (B, L) int for symbol models or (B, L, F) float for
        feature models. ``rng`` supplies transition noise; required for the
        stochastic model when L > 0.
        """
        cfg = self.cfg
        tokens = np.asarray(tokens)
        if cfg.real_input_dim:
            if tokens.ndim != 3 or tokens.shape[2] != cfg.real_input_dim:
                raise T.ShapeError("forward_batch features", tokens.shape)
        elif tokens.ndim != 2:
            raise T.ShapeError("forward_batch tokens", tokens.shape)
        batch, length = tokens.shape[0], tokens.shape[1]
        if cfg.mode == "sttau" and length > 0 and rng is None:
            raise ValueError("stochastic model needs an rng for transition noise")

        h, c = self.initial_state(batch)
        thetas, alphas, indices = [], [], []
        last_alpha = last_log_alpha = None
        for t in range(length):
            x = self._input_row(tokens[:, t])
            u, c = self.cell.step(x, h, c)
            if cfg.mode == "sttau":
                gamma = sample_gumbel(rng, (batch, cfg.state_count))
                h, theta, alpha, log_alpha = self._state_step(u, gamma)
                last_alpha, last_log_alpha = alpha, log_alpha
                if collect:
                    thetas.append(theta.data.copy())
                    alphas.append(alpha.data.copy())
                indices.append(np.argmax(alpha.data, axis=-1))
            else:
                h = u

        if cfg.output == "states":
            if last_log_alpha is None:
                raise ValueError("state-distribution output needs at least one input step")
            log_output = last_log_alpha
        else:
            logits = T.add(T.matmul(h, self.head_w), self.head_b)
            log_output = T.log_softmax(logits)
        return BatchTrace(
            log_output=log_output,
            probs=np.exp(log_output.data),
            thetas=np.stack(thetas) if thetas else None,
            alphas=np.stack(alphas) if alphas else None,
            state_indices=np.stack(indices) if indices else None,
            h_final=h,
        )

    def accept_state_indices(self) -> np.ndarray:
        """Indices of the states that carry accept mass in automaton targets."""
        k = self.cfg.state_count
        accept = np.arange(k // 2, k)
        reject = np.arange(0, k // 2)
        return reject if self.cfg.target_flip else accept

    def output_probs(self, trace: BatchTrace) -> np.ndarray:
        """Per-class probabilities (B, class_count) for any output mode."""
        if self.cfg.output == "head":
            return trace.probs
        accept = trace.probs[:, self.accept_state_indices()].sum(axis=1)
        return np.stack([1.0 - accept, accept], axis=1)

    def loss_batch(self, tokens: np.ndarray, labels, rng: np.random.Generator):
        """Mean cross-entropy over the batch; returns (loss tensor, trace)."""
        from .automata import pa_training_targets

        trace = self.forward_batch(tokens, rng)
        labels = np.asarray(labels, dtype=np.int64)
        batch = trace.log_output.data.shape[0]
        if labels.shape != (batch,):
            raise T.ShapeError("loss_batch labels", labels.shape, (batch,))
        if self.cfg.pa_targets:
            targets = np.stack([
                pa_training_targets(int(lab), self.cfg.state_count, self.cfg.target_flip)
                for lab in labels
            ])
        else:
            if labels.min() < 0 or labels.max() >= self.cfg.class_count:
                raise ValueError(f"label out of range [0, {self.cfg.class_count})")
            targets = np.zeros((batch, self.cfg.class_count))
            targets[np.arange(batch), labels] = 1.0
        picked = T.mul(trace.log_output, Tensor(targets))
        loss = T.scale(T.sum_all(picked), -1.0 / batch)
        return loss, trace

    # ------------------------------------------------------------------
    # stepwise API for control tasks

    def policy_step(self, features: np.ndarray, h, c, rng: np.random.Generator,
                    greedy: bool = False):
        """One control step on a feature row.

        Returns (h, c, action, log_prob tensor, action probabilities). For the
        stochastic model the action distribution is the next-state
        distribution and the hidden state commits to the chosen state; the
        baseline model samples from its classifier head.
        """
        x = Tensor(np.asarray(features, dtype=np.float64)[None, :])
        u, c = self.cell.step(x, h, c)
        if self.cfg.mode == "sttau":
            logits = T.matmul(u, T.transpose(self.states))
            theta = T.softmax(logits)
            log_theta = T.log_softmax(logits)
            if greedy:
                action = int(np.argmax(theta.data[0]))
            else:
                gamma = sample_gumbel(rng, (1, self.cfg.state_count))
                alpha = gumbel_softmax(log_theta, gamma, self.temperature)
                action = int(np.argmax(alpha.data[0]))
                h = T.matmul(straight_through(alpha), self.states)
            if greedy:
                h = T.lookup(self.states, np.array([action]))
            probs = theta.data[0].copy()
            onehot = np.zeros((1, self.cfg.state_count))
            onehot[0, action] = 1.0
            log_prob = T.sum_all(T.mul(log_theta, Tensor(onehot)))
            return h, c, action, log_prob, probs
        logits = T.add(T.matmul(u, self.head_w), self.head_b)
        log_probs = T.log_softmax(logits)
        probs = np.exp(log_probs.data[0])
        if greedy:
            action = int(np.argmax(probs))
        else:
            action = int(rng.choice(len(probs), p=probs))
        onehot = np.zeros((1, self.cfg.class_count))
        onehot[0, action] = 1.0
        log_prob = T.sum_all(T.mul(log_probs, Tensor(onehot)))
        return u, c, action, log_prob, probs

    # ------------------------------------------------------------------
    # inference helpers for extraction and exact enumeration

    def transition_table(self) -> np.ndarray:
        """theta[i, v]: next-state distribution from committed state i on token v.

        Only defined for the stochastic model with a gru cell: an lstm carries
        a free internal cell vector, so its transition behaviour is not a
        function of (state, token) alone.
        """
        cfg = self.cfg
        if cfg.mode != "sttau":
            raise ValueError("transition_table needs the stochastic state model")
        if cfg.cell != "gru":
            raise ValueError("transition_table needs a gru cell: the lstm cell state "
                             "makes transitions depend on history beyond the committed state")
        if cfg.real_input_dim:
            raise ValueError("transition_table needs a symbol vocabulary")
        k, vocab = cfg.state_count, cfg.vocab_size
        table = np.zeros((k, vocab, k))
        h_rows = Tensor(self.states.data.copy())
        for v in range(vocab):
            x = Tensor(np.repeat(self.embedding.data[v][None, :], k, axis=0))
            u, _ = self.cell.step(x, h_rows, None)
            logits = u.data @ self.states.data.T
            shifted = logits - logits.max(axis=1, keepdims=True)
            e = np.exp(shifted)
            table[:, v, :] = e / e.sum(axis=1, keepdims=True)
        return table

    def class_probs_of_states(self) -> np.ndarray:
        """Classifier distribution (k, class_count) at each state vector."""
        if self.cfg.mode != "sttau":
            raise ValueError("class_probs_of_states needs the stochastic state model")
        if self.cfg.output == "states":
            # No head: class identity is the fixed accept/reject split.
            k = self.cfg.state_count
            probs = np.zeros((k, 2))
            accept = self.accept_state_indices()
            probs[:, 0] = 1.0
            probs[accept, 0] = 0.0
            probs[accept, 1] = 1.0
            return probs
        logits = self.states.data @ self.head_w.data + self.head_b.data
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)


# ----------------------------------------------------------------------
# prediction and evaluation


def mc_predict(model: StateModel, tokens, runs: int, rng: np.random.Generator) -> McPrediction:
    """Repeat the stochastic forward pass and summarize the class distribution.

    All runs share one batched pass with independent noise per run. With a
    single run the variance is reported as zeros and flagged ``single_run``.
    """
    if runs < 1:
        raise ValueError("runs must be at least 1")
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        batch_tokens = np.repeat(tokens[None, :], runs, axis=0)
    elif tokens.ndim == 2 and model.cfg.real_input_dim:
        batch_tokens = np.repeat(tokens[None, :, :], runs, axis=0)
    else:
        raise T.ShapeError("mc_predict tokens", tokens.shape)
    trace = model.forward_batch(batch_tokens, rng, collect=False)
    run_probs = model.output_probs(trace)
    mean = run_probs.mean(axis=0)
    if runs > 1:
        variance = run_probs.var(axis=0, ddof=1)
    else:
        variance = np.zeros_like(mean)
    paths = trace.state_indices.T if trace.state_indices is not None else None
    return McPrediction(mean=mean, variance=variance, run_probs=run_probs,
                        state_paths=paths, runs=runs, single_run=(runs == 1))


def _length_buckets(dataset) -> dict[int, list[int]]:
    buckets: dict[int, list[int]] = {}
    for i, (toks, _label) in enumerate(dataset):
        buckets.setdefault(len(toks), []).append(i)
    return buckets


def predict_dataset(model: StateModel, dataset, rng: np.random.Generator) -> np.ndarray:
    """Single stochastic pass over (tokens, label) pairs; (N, C) probabilities."""
    out = np.zeros((len(dataset), model.cfg.class_count
                    if model.cfg.output == "head" else 2))
    for length, idxs in sorted(_length_buckets(dataset).items()):
        batch = np.array([dataset[i][0] for i in idxs], dtype=np.int64).reshape(len(idxs), length)
        trace = model.forward_batch(batch, rng)
        out[idxs] = model.output_probs(trace)
    return out


def accuracy(model: StateModel, dataset, rng: np.random.Generator) -> float:
    if not dataset:
        raise ValueError("empty dataset")
    probs = predict_dataset(model, dataset, rng)
    labels = np.array([lab for _t, lab in dataset])
    return float(np.mean(np.argmax(probs, axis=1) == labels))


# ----------------------------------------------------------------------
# training


@dataclass
class TrainSettings:
    updates: int = 4000
    validate_every: int = 100
    max_validations: int | None = None
    keep_best: bool = True


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    best_accuracy: float = 0.0

    def taus(self) -> list[float]:
        return [r["tau"] for r in self.rows if r["tau"] is not None]

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "loss", "valid_accuracy", "tau"])
            for r in self.rows:
                tau = "" if r["tau"] is None else f"{r['tau']:.6f}"
                writer.writerow([r["step"], f"{r['loss']:.6f}", f"{r['valid_accuracy']:.6f}", tau])


def train(model: StateModel, train_set, valid_set, settings: TrainSettings | None = None,
          seed: int | None = None) -> TrainLog:
    """Adam training with periodic validation.

    ``train_set`` and ``valid_set`` are lists of (token list, label). The
    model is left holding the weights of its best validation accuracy (ties
    go to the later checkpoint, which has the more settled temperature).
    """
    if settings is None:
        settings = TrainSettings()
    if not train_set or not valid_set:
        raise ValueError("train and validation sets must be non-empty")
    if seed is None:
        seed = model.cfg.seed
    data_rng = stream_rng(seed, "data")
    noise_rng = stream_rng(seed, "gumbel")
    eval_rng = stream_rng(seed, "eval")

    params = model.trainable_parameters()
    buckets = _length_buckets(train_set)
    lengths = sorted(buckets)
    weights = np.array([len(buckets[n]) for n in lengths], dtype=np.float64)
    weights /= weights.sum()

    log = TrainLog()
    best_acc = -1.0
    best_blob = model.state_dict()
    validations = 0
    loss_window: list[float] = []

    for update in range(1, settings.updates + 1):
        length = lengths[data_rng.choice(len(lengths), p=weights)]
        pool = buckets[length]
        take = min(model.cfg.batch_size, len(pool))
        chosen = data_rng.choice(len(pool), size=take, replace=False)
        batch_idx = [pool[j] for j in chosen]
        tokens = np.array([train_set[i][0] for i in batch_idx], dtype=np.int64)
        tokens = tokens.reshape(take, length)
        labels = [train_set[i][1] for i in batch_idx]

        try:
            with Tape() as tape:
                loss, _trace = model.loss_batch(tokens, labels, noise_rng)
                value = loss.item()
                if not np.isfinite(value):
                    raise NonFiniteError("loss")
                tape.backward(loss)
            adam_step(params, model.cfg.learning_rate)
        except NonFiniteError as err:
            raise TrainingDiverged(update, str(err)) from err
        loss_window.append(value)

        if update % settings.validate_every == 0 or update == settings.updates:
            acc = accuracy(model, valid_set, eval_rng)
            log.rows.append({
                "step": update,
                "loss": float(np.mean(loss_window)),
                "valid_accuracy": acc,
                "tau": model.tau,
            })
            loss_window.clear()
            if acc >= best_acc:
                best_acc = acc
                if settings.keep_best:
                    best_blob = model.state_dict()
            validations += 1
            if settings.max_validations is not None and validations >= settings.max_validations:
                break

    if settings.keep_best:
        model.load_state_dict(best_blob)
    log.best_accuracy = best_acc
    return log


# ----------------------------------------------------------------------
# deep ensembles


@dataclass
class Ensemble:
    members: list[StateModel]

    def predict(self, tokens, rng: np.random.Generator) -> McPrediction:
        """Mean of member probability vectors (one stochastic pass each)."""
        tokens = np.asarray(tokens, dtype=np.int64)
        rows = []
        for member in self.members:
            trace = member.forward_batch(tokens[None, :], rng)
            rows.append(member.output_probs(trace)[0])
        run_probs = np.stack(rows)
        mean = run_probs.mean(axis=0)
        variance = run_probs.var(axis=0, ddof=1)
        return McPrediction(mean=mean, variance=variance, run_probs=run_probs,
                            state_paths=None, runs=len(self.members), single_run=False)


def train_ensemble(cfg: ModelConfig, train_set, valid_set, members: int,
                   settings: TrainSettings | None = None,
                   base_seed: int | None = None) -> tuple[Ensemble, list[TrainLog]]:
    """Train ``members`` models that differ only in seed."""
    if members < 2:
        raise ValueError("an ensemble needs at least 2 members")
    if base_seed is None:
        base_seed = cfg.seed
    models, logs = [], []
    for i in range(members):
        member_seed = base_seed + i
        member_cfg = ModelConfig(**{**asdict(cfg), "seed": member_seed})
        member = StateModel(member_cfg)
        logs.append(train(member, train_set, valid_set, settings, seed=member_seed))
        models.append(member)
    return Ensemble(models), logs
