"""Shared fixtures: hand-wired models with known path distributions.

Both builders zero out the recurrent cell so the next-state distribution at
every step is a constant that can be read off the construction:

* ``b_z = -50`` drives the GRU update gate to ~0, so the cell output is the
  candidate activation alone.
* With the candidate weights zeroed the cell output is ``tanh(b_g)``,
  independent of input and hidden state.

State logits are then ``tanh(b_g) @ states.T``, a constant row, and the class
table comes straight from the classifier head applied to the state vectors.
"""

import numpy as np
import pytest

from statewalk.model import ModelConfig, StateModel


def _zero_cell(model: StateModel) -> None:
    for p in model.cell.parameters():
        p.data[...] = 0.0


def build_two_path_model() -> StateModel:
    """One input step splits 50/50 between two states.

    State 0 classifies (0.5, 0.5), state 1 classifies (0.1, 0.9). On the
    one-token input [0] the marginal is (0.3, 0.7): total entropy 0.8813
    bits, aleatoric 0.7345, epistemic 0.1468.
    """
    cfg = ModelConfig(vocab_size=1, class_count=2, embed_dim=1, hidden_dim=2,
                      state_count=2, cell="gru", estimator="st", seed=0)
    model = StateModel(cfg)
    _zero_cell(model)
    model.cell.b_z.data[...] = -50.0      # update gate ~0: output = candidate
    # candidate = tanh(0) = 0, so state logits are 0 and theta is uniform
    model.states.data[...] = np.eye(2)
    model.head_w.data[...] = np.array([[0.0, 0.0],
                                       [np.log(0.1), np.log(0.9)]])
    model.head_b.data[...] = 0.0
    return model


def build_single_path_model() -> StateModel:
    """Every step commits to state 0 with near-certainty.

    State 0 classifies (0.3, 0.7), so total = aleatoric = 0.8813 bits and
    epistemic = 0.
    """
    cfg = ModelConfig(vocab_size=1, class_count=2, embed_dim=1, hidden_dim=2,
                      state_count=2, cell="gru", estimator="soft", seed=0)
    model = StateModel(cfg)
    _zero_cell(model)
    model.cell.b_z.data[...] = -50.0
    model.cell.b_g.data[...] = np.array([50.0, -50.0])   # output ~(1, -1)
    model.states.data[...] = 40.0 * np.eye(2)            # logit gap 80
    # states are scaled by 40, so divide the intended log-probabilities out
    model.head_w.data[...] = np.array([[np.log(0.3) / 40.0, np.log(0.7) / 40.0],
                                       [0.0, 0.0]])
    model.head_b.data[...] = 0.0
    return model


@pytest.fixture
def two_path_model() -> StateModel:
    return build_two_path_model()


@pytest.fixture
def single_path_model() -> StateModel:
    return build_single_path_model()


# reference entropies for the fixture models, in bits
H_03_07 = -(0.3 * np.log2(0.3) + 0.7 * np.log2(0.7))          # 0.881291
H_01_09 = -(0.1 * np.log2(0.1) + 0.9 * np.log2(0.9))          # 0.468996
TWO_PATH_ALEATORIC = 0.5 * 1.0 + 0.5 * H_01_09                # 0.734498
TWO_PATH_EPISTEMIC = H_03_07 - TWO_PATH_ALEATORIC             # 0.146793
