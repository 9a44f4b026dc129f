"""Cart-pole balancing: physics, MDP/POMDP observations, policy-gradient training.

The environment is the classic benchmark: a pole hinged on a force-driven
cart, Euler-integrated, with the standard constants frozen in a bundled
config file so regression fixtures stay stable. An episode pays one reward
per surviving step and ends on leaving the position/angle box or after the
step cap. Policies are recurrent; the stochastic-state agent reads its action
directly off the sampled state (two states = two actions).
"""

from __future__ import annotations

import csv
import json
from collections import deque
from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, StateModel, TrainingDiverged
from .rng import stream_rng
from .tensor import NonFiniteError, Tape, adam_step
from . import tensor as T


def physics_config() -> dict:
    from importlib import resources

    raw = resources.files("statewalk.data").joinpath("cartpole.json").read_text()
    return json.loads(raw)


@dataclass
class CartpoleState:
    x: float
    x_dot: float
    beta: float
    beta_dot: float


def step_dynamics(state: CartpoleState, action: int, physics: dict) -> CartpoleState:
    """One Euler step; action 0 pushes left, 1 pushes right."""
    if action not in (0, 1):
        raise ValueError(f"action must be 0 or 1, got {action}")
    force = physics["force_magnitude"] if action == 1 else -physics["force_magnitude"]
    m_pole = physics["pole_mass"]
    length = physics["pole_half_length"]
    total_mass = physics["cart_mass"] + m_pole
    dt = physics["dt"]

    cos_b, sin_b = np.cos(state.beta), np.sin(state.beta)
    temp = (force + m_pole * length * state.beta_dot ** 2 * sin_b) / total_mass
    beta_acc = (physics["gravity"] * sin_b - cos_b * temp) / (
        length * (4.0 / 3.0 - m_pole * cos_b ** 2 / total_mass))
    x_acc = temp - m_pole * length * beta_acc * cos_b / total_mass
    return CartpoleState(
        x=state.x + dt * state.x_dot,
        x_dot=state.x_dot + dt * x_acc,
        beta=state.beta + dt * state.beta_dot,
        beta_dot=state.beta_dot + dt * beta_acc,
    )


def is_terminal(state: CartpoleState, physics: dict) -> bool:
    return abs(state.x) > physics["x_limit"] or abs(state.beta) > physics["beta_limit"]


class CartpoleEnv:
    """Episode driver over the dynamics with a chosen observation mode."""

    def __init__(self, observe: str = "mdp", physics: dict | None = None):
        if observe not in ("mdp", "pomdp"):
            raise ValueError(f'observe must be "mdp" or "pomdp", got {observe!r}')
        self.observe = observe
        self.physics = physics if physics is not None else physics_config()
        self.state: CartpoleState | None = None
        self.steps = 0

    @property
    def observation_dim(self) -> int:
        return 4 if self.observe == "mdp" else 2

    def observation(self) -> np.ndarray:
        s = self.state
        if self.observe == "mdp":
            return np.array([s.x, s.x_dot, s.beta, s.beta_dot])
        return np.array([s.x, s.beta])  # velocities hidden

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        scale = self.physics["reset_scale"]
        vals = rng.uniform(-scale, scale, 4)
        self.state = CartpoleState(*vals)
        self.steps = 0
        return self.observation()

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        """Returns (observation, reward, done). Reward 1 per surviving step."""
        if self.state is None:
            raise RuntimeError("call reset before step")
        self.state = step_dynamics(self.state, action, self.physics)
        self.steps += 1
        if is_terminal(self.state, self.physics):
            return self.observation(), 0.0, True
        done = self.steps >= self.physics["max_steps"]
        return self.observation(), 1.0, done


def select_action(probs, mode: str, rng: np.random.Generator | None = None) -> int:
    """Draw (sampling) or argmax (greedy, ties to the lowest index)."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or probs.size < 2 or not np.isclose(probs.sum(), 1.0, atol=1e-6):
        raise ValueError(f"not an action distribution: {probs}")
    if mode == "greedy":
        return int(np.argmax(probs))
    if mode == "sampling":
        if rng is None:
            raise ValueError("sampling mode needs an rng")
        return int(rng.choice(probs.size, p=probs / probs.sum()))
    raise ValueError(f'mode must be "sampling" or "greedy", got {mode!r}')


@dataclass
class AgentConfig:
    kind: str = "sttau"          # sttau | vanilla
    observe: str = "mdp"         # mdp | pomdp
    policy: str = "sampling"     # sampling | greedy
    hidden_dim: int = 100
    learning_rate: float = 0.002
    discount: float = 0.99
    episodes: int = 5000
    seed: int = 0
    tau_init: float = 1.0
    moving_window: int = 100
    # Stop early once the moving average reaches this reward (None = never).
    stop_at: float | None = None

    def __post_init__(self):
        if self.kind not in ("sttau", "vanilla"):
            raise ValueError(f"kind must be sttau or vanilla, got {self.kind!r}")
        if self.policy not in ("sampling", "greedy"):
            raise ValueError(f"policy must be sampling or greedy, got {self.policy!r}")
        if not (0.0 < self.discount <= 1.0):
            raise ValueError("discount must be in (0, 1]")
        if self.episodes < 1:
            raise ValueError("episodes must be positive")


def build_agent(cfg: AgentConfig, observation_dim: int) -> StateModel:
    # Policy input: observation plus one-hot of the previous action.
    in_dim = observation_dim + 2
    if cfg.kind == "sttau":
        model_cfg = ModelConfig(
            vocab_size=1, class_count=2, hidden_dim=cfg.hidden_dim, state_count=2,
            cell="lstm", estimator="st", mode="sttau", tau_init=cfg.tau_init,
            learning_rate=cfg.learning_rate, seed=cfg.seed, output="states",
            real_input_dim=in_dim)
    else:
        model_cfg = ModelConfig(
            vocab_size=1, class_count=2, hidden_dim=cfg.hidden_dim,
            cell="lstm", mode="vanilla", learning_rate=cfg.learning_rate,
            seed=cfg.seed, output="head", real_input_dim=in_dim)
    return StateModel(model_cfg, stream_rng(cfg.seed, "init"))


def run_episode(model: StateModel, env: CartpoleEnv, rng: np.random.Generator,
                policy: str, collect_grads: bool = True):
    """Roll out one episode; returns (log-prob tensors, rewards)."""
    obs = env.reset(rng)
    prev_action = np.zeros(2)
    h, c = model.initial_state(1)
    log_probs, rewards = [], []
    done = False
    while not done:
        features = np.concatenate([obs, prev_action])
        h, c, action, log_prob, _probs = model.policy_step(
            features, h, c, rng, greedy=(policy == "greedy"))
        obs, reward, done = env.step(action)
        log_probs.append(log_prob)
        rewards.append(reward)
        prev_action = np.zeros(2)
        prev_action[action] = 1.0
    return log_probs, rewards


def discounted_returns(rewards: list[float], discount: float) -> np.ndarray:
    out = np.zeros(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + discount * acc
        out[t] = acc
    return out


def train_agent(cfg: AgentConfig, env: CartpoleEnv | None = None):
    """Episodic policy-gradient training.

    The score function is reinforced with the episode's returns-to-go minus
    their within-episode mean (the per-episode return baseline). Returns the
    trained model and the learning-curve rows.
    """
    if env is None:
        env = CartpoleEnv(cfg.observe)
    rng = stream_rng(cfg.seed, "rl")
    model = build_agent(cfg, env.observation_dim)
    params = model.trainable_parameters()
    window: deque[float] = deque(maxlen=cfg.moving_window)
    curve: list[dict] = []

    for episode in range(1, cfg.episodes + 1):
        try:
            with Tape() as tape:
                log_probs, rewards = run_episode(model, env, rng, cfg.policy)
                returns = discounted_returns(rewards, cfg.discount)
                advantages = returns - returns.mean()
                terms = [T.scale(lp, -float(adv)) for lp, adv in zip(log_probs, advantages)]
                loss = terms[0]
                for term in terms[1:]:
                    loss = T.add(loss, term)
                tape.backward(loss)
            adam_step(params, cfg.learning_rate)
        except NonFiniteError as err:
            raise TrainingDiverged(episode, str(err)) from err
        total = float(sum(rewards))
        window.append(total)
        moving = float(np.mean(window))
        curve.append({"episode": episode, "reward": total, "moving_average": moving})
        if cfg.stop_at is not None and len(window) == cfg.moving_window and moving >= cfg.stop_at:
            break
    return model, curve


def evaluate_agent(model: StateModel, cfg: AgentConfig, episodes: int,
                   rng: np.random.Generator, env: CartpoleEnv | None = None) -> float:
    """Mean episode reward without learning."""
    if env is None:
        env = CartpoleEnv(cfg.observe)
    totals = []
    for _ in range(episodes):
        _lps, rewards = run_episode(model, env, rng, cfg.policy)
        totals.append(sum(rewards))
    return float(np.mean(totals))


def write_curve_csv(path: str, curve: list[dict], seed: int, append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, newline="") as f:
        writer = csv.writer(f)
        if not append:
            writer.writerow(["episode", "reward", "moving_average", "seed"])
        for row in curve:
            writer.writerow([row["episode"], f"{row['reward']:.1f}",
                             f"{row['moving_average']:.2f}", seed])


def agent_config_json(cfg: AgentConfig) -> dict:
    return {"mode": cfg.observe.upper(), "policy": cfg.policy, "agent": cfg.kind,
            "hidden_dim": cfg.hidden_dim, "learning_rate": cfg.learning_rate,
            "discount": cfg.discount, "episodes": cfg.episodes, "seed": cfg.seed}
