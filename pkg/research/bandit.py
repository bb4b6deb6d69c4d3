"""
Contextual two-armed Thompson sampling over factor vs model optimization.

Each arm keeps a Gaussian posterior over linear reward weights. The context
is the 8-channel performance vector of the current SOTA.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .exceptions import InvalidParameter, NumericalError

logger = logging.getLogger(__name__)

FACTOR = "factor"
MODEL = "model"
ACTIONS = (FACTOR, MODEL)
STATE_CHANNELS = ("ic", "icir", "rank_ic", "rank_icir", "arr", "ir", "neg_mdd", "sr")
STATE_DIM = len(STATE_CHANNELS)
REWARD_MODES = ("delta", "absolute")


def uniform_weights():
    return np.full(STATE_DIM, 1.0 / STATE_DIM)


def _vector(values, name):
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.shape != (STATE_DIM,):
        raise InvalidParameter(f"{name} must have {STATE_DIM} entries")
    if not np.isfinite(values).all():
        raise InvalidParameter(f"{name} must be finite")
    return values


@dataclass(frozen=True, eq=False)
class ArmPosterior:
    mu: np.ndarray
    precision: np.ndarray

    def __post_init__(self):
        mu = np.array(self.mu, dtype=np.float64).reshape(STATE_DIM)
        precision = np.array(self.precision, dtype=np.float64).reshape(STATE_DIM, STATE_DIM)
        mu.setflags(write=False)
        precision.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "precision", precision)

    def to_dict(self):
        return {"mu": self.mu.tolist(), "precision": self.precision.reshape(-1).tolist()}

    @classmethod
    def from_dict(cls, payload):
        return cls(payload["mu"], payload["precision"])


@dataclass(frozen=True, eq=False)
class BanditState:
    arms: dict
    tau: float
    sigma: float
    w: np.ndarray

    def to_dict(self):
        return {
            "tau": self.tau,
            "sigma": self.sigma,
            "w": self.w.tolist(),
            "arms": {a: self.arms[a].to_dict() for a in ACTIONS},
        }

    @classmethod
    def from_dict(cls, payload):
        arms = {a: ArmPosterior.from_dict(payload["arms"][a]) for a in ACTIONS}
        return cls(arms, float(payload["tau"]), float(payload["sigma"]), np.asarray(payload["w"]))


def init(tau=1.0, sigma=1.0, w=None):
    if not (tau > 0 and math.isfinite(tau)):
        raise InvalidParameter("tau must be positive")
    if not (sigma > 0 and math.isfinite(sigma)):
        raise InvalidParameter("sigma must be positive")
    w = uniform_weights() if w is None or len(w) == 0 else _vector(w, "w")
    prior = ArmPosterior(np.zeros(STATE_DIM), np.eye(STATE_DIM) / tau**2)
    return BanditState({a: prior for a in ACTIONS}, float(tau), float(sigma), w)


def _posterior_factor(precision):
    """Lower Cholesky factor of the covariance (inverse precision)."""
    try:
        covariance = linalg.cho_solve(linalg.cho_factor(precision, lower=True), np.eye(STATE_DIM))
        covariance = (covariance + covariance.T) / 2.0
        return linalg.cholesky(covariance, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError(f"precision matrix is not positive definite: {exc}") from None


def sample_rewards(state, x, rng):
    x = _vector(x, "x")
    rewards = {}
    for action in ACTIONS:
        arm = state.arms[action]
        theta = arm.mu + _posterior_factor(arm.precision) @ rng.standard_normal(STATE_DIM)
        rewards[action] = float(theta @ x)
    return rewards


def choose(state, x, rng):
    rewards = sample_rewards(state, x, rng)
    return MODEL if rewards[MODEL] > rewards[FACTOR] else FACTOR


def update(state, action, x, r):
    if action not in ACTIONS:
        raise InvalidParameter(f"unknown action {action!r}")
    x = _vector(x, "x")
    if not math.isfinite(r):
        raise InvalidParameter("reward must be finite")
    arm = state.arms[action]
    noise = state.sigma**2
    precision = arm.precision + np.outer(x, x) / noise
    precision = (precision + precision.T) / 2.0
    try:
        mu = linalg.solve(precision, arm.precision @ arm.mu + r * x / noise, assume_a="pos")
    except linalg.LinAlgError as exc:
        raise NumericalError(str(exc)) from None
    arms = dict(state.arms)
    arms[action] = ArmPosterior(mu, precision)
    return BanditState(arms, state.tau, state.sigma, state.w)


# -- metrics -> context / reward -----------------------------------------------------


def state_vector(bundle):
    """[IC, ICIR, RankIC, RankICIR, ARR, IR, -|MDD|, SR] with NaN mapped to 0.

    A deeper drawdown lowers the seventh channel.
    """
    raw = np.array(
        [
            bundle.ic,
            bundle.icir,
            bundle.rank_ic,
            bundle.rank_icir,
            bundle.arr,
            bundle.ir,
            -abs(bundle.mdd),
            bundle.sharpe,
        ],
        dtype=np.float64,
    )
    return np.where(np.isfinite(raw), raw, 0.0)


def weighted_score(bundle, w):
    return float(np.asarray(w) @ state_vector(bundle))


def reward_from_metrics(new, incumbent, w, mode="delta"):
    if mode == "absolute":
        return weighted_score(new, w)
    if mode != "delta":
        raise InvalidParameter(f"unknown reward mode {mode!r}")
    return float(np.asarray(w) @ (state_vector(new) - state_vector(incumbent)))


# -- schedulers ----------------------------------------------------------------------


def _rng_state(rng):
    return rng.bit_generator.state


def _restore_rng(state):
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


class BanditScheduler:
    name = "bandit"

    def __init__(self, state, rng):
        self.state = state
        self.rng = rng

    def choose(self, x):
        return choose(self.state, x, self.rng)

    def observe(self, action, x, reward):
        self.state = update(self.state, action, x, reward)

    def to_dict(self):
        return {"bandit": self.state.to_dict(), "rng": _rng_state(self.rng)}

    def restore(self, payload):
        self.state = BanditState.from_dict(payload["bandit"])
        self.rng = _restore_rng(payload["rng"])


class RandomScheduler:
    name = "random"

    def __init__(self, rng):
        self.rng = rng

    def choose(self, x):
        return ACTIONS[int(self.rng.integers(len(ACTIONS)))]

    def observe(self, action, x, reward):
        pass

    def to_dict(self):
        return {"rng": _rng_state(self.rng)}

    def restore(self, payload):
        self.rng = _restore_rng(payload["rng"])


class LlmScheduler:
    """Asks the gateway which action to take next, given recent outcomes."""

    name = "llm"

    def __init__(self, gateway, max_history=10):
        self.gateway = gateway
        self.max_history = max_history
        self.history = []

    def choose(self, x):
        from django.template.loader import render_to_string

        prompt = render_to_string(
            "research/action_prompt.txt",
            {
                "channels": list(zip(STATE_CHANNELS, [f"{v:.4f}" for v in np.asarray(x)])),
                "history": self.history[-self.max_history :],
            },
        )
        reply = self.gateway.generate(prompt, "action")
        return reply["action"]

    def observe(self, action, x, reward):
        self.history.append({"action": action, "reward": f"{reward:.6f}"})

    def to_dict(self):
        return {"history": list(self.history)}

    def restore(self, payload):
        self.history = list(payload["history"])


def make_scheduler(name, seed, tau=1.0, sigma=1.0, w=None, gateway=None):
    rng = np.random.default_rng(seed)
    if name == "bandit":
        return BanditScheduler(init(tau, sigma, w), rng)
    if name == "random":
        return RandomScheduler(rng)
    if name == "llm":
        if gateway is None:
            raise InvalidParameter("the llm scheduler needs a gateway")
        return LlmScheduler(gateway)
    raise InvalidParameter(f"unknown scheduler {name!r}")
