"""Group sampling from a frozen old policy, terminal rewards, and group-relative advantages."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, InputError
from .policy import Context, PolicyParams, VocabSpec, prefix_contexts, softmax, token_log_probs

ADV_MODES = ("mean", "standardized")
STD_FLOOR = 1e-12

RewardFn = Callable[[Sequence[int]], float]


@dataclass(frozen=True)
class Trajectory:
    prompt_id: str
    tokens: tuple[int, ...]
    old_logps: np.ndarray
    reward: float | None = None
    truncated: bool = False

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        lp = np.asarray(self.old_logps, dtype=np.float64)
        object.__setattr__(self, "old_logps", lp)
        if len(self.tokens) < 1:
            raise InputError("trajectory must contain at least one token")
        if lp.shape != (len(self.tokens),):
            raise InputError("old_logps must have one entry per token")
        if self.reward is not None and not math.isfinite(self.reward):
            raise InputError("reward must be finite")

    @property
    def length(self) -> int:
        return len(self.tokens)

    def contexts(self):
        return prefix_contexts(self.prompt_id, self.tokens)


@dataclass(frozen=True)
class GroupBatch:
    prompt_id: str
    trajectories: tuple[Trajectory, ...]
    advantages: np.ndarray | None = None
    adv_mode: str | None = None
    old_params: PolicyParams | None = None

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        if len(self.trajectories) < 2:
            raise InputError("a group needs at least two trajectories")
        if any(t.prompt_id != self.prompt_id for t in self.trajectories):
            raise InputError("all trajectories in a group must share the prompt")
        if self.advantages is not None:
            adv = np.asarray(self.advantages, dtype=np.float64)
            if adv.shape != (self.G,):
                raise InputError("advantage vector must have length G")
            if abs(float(adv.sum())) > 1e-10:
                raise InputError(f"advantages must sum to zero (got {adv.sum():.3e})")
            object.__setattr__(self, "advantages", adv)

    @property
    def G(self) -> int:
        return len(self.trajectories)

    @property
    def rewards(self) -> np.ndarray:
        if any(t.reward is None for t in self.trajectories):
            raise InputError("rewards not assigned")
        return np.array([t.reward for t in self.trajectories], dtype=np.float64)

    @property
    def lengths(self) -> np.ndarray:
        return np.array([t.length for t in self.trajectories])

    @property
    def degenerate(self) -> bool:
        """True when every advantage is zero (no credit information in the group)."""
        return self.advantages is not None and not np.any(self.advantages)

    def contexts(self):
        seen = {}
        for traj in self.trajectories:
            for ctx in traj.contexts():
                seen[ctx] = None
        return list(seen)


def make_trajectory(params_old: PolicyParams, prompt_id: str, tokens: Sequence[int], reward=None) -> Trajectory:
    """Build a trajectory whose old log-probs are read from ``params_old``."""
    tokens = tuple(tokens)
    return Trajectory(prompt_id, tokens, token_log_probs(params_old, prompt_id, tokens), reward)


def make_group(params_old: PolicyParams, prompt_id: str, sequences: Sequence[Sequence[int]]) -> GroupBatch:
    trajs = [make_trajectory(params_old, prompt_id, s) for s in sequences]
    return GroupBatch(prompt_id, tuple(trajs), old_params=params_old.copy())


def sample_group(params_old: PolicyParams, prompt_id: str, G: int, T_max: int | None = None, seed=None) -> GroupBatch:
    """Draw G ancestral samples from the old policy.

    Sampling stops at the vocabulary's eos token when one is configured; a
    trajectory that hits ``T_max`` without it is marked ``truncated``. Without
    an eos token every trajectory has exactly ``T_max`` tokens.
    """
    if G < 2:
        raise InputError("group size must be at least 2")
    T_max = params_old.t_max if T_max is None else T_max
    if not 1 <= T_max <= params_old.t_max:
        raise InputError(f"T_max must lie in [1, {params_old.t_max}]")
    frozen = params_old.copy()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    eos = frozen.vocab.eos_id
    trajs = []
    for _ in range(G):
        tokens: list[int] = []
        for _t in range(T_max):
            ctx_logits = frozen.logits(Context(prompt_id, tuple(tokens)))
            p = softmax(ctx_logits)
            a = int(np.searchsorted(np.cumsum(p), rng.random(), side="right"))
            a = min(a, frozen.V - 1)
            tokens.append(a)
            if eos is not None and a == eos:
                break
        truncated = eos is not None and tokens[-1] != eos
        trajs.append(Trajectory(prompt_id, tuple(tokens), token_log_probs(frozen, prompt_id, tokens), None, truncated))
    return GroupBatch(prompt_id, tuple(trajs), old_params=frozen)


def assign_rewards(group: GroupBatch, reward_fn: RewardFn) -> GroupBatch:
    if any(t.reward is not None for t in group.trajectories):
        raise InputError("rewards already assigned")
    trajs = []
    for t in group.trajectories:
        r = float(reward_fn(t.tokens))
        if not math.isfinite(r):
            raise InputError(f"reward function returned non-finite value {r}")
        trajs.append(replace(t, reward=r))
    return replace(group, trajectories=tuple(trajs))


def advantages_mean(rewards) -> np.ndarray:
    r = _rewards(rewards)
    return r - r.mean()


def advantages_standardized(rewards) -> np.ndarray:
    """``(R - mean) / std`` with the population std; all zeros when std < 1e-12."""
    r = _rewards(rewards)
    std = float(r.std())
    if std < STD_FLOOR:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def _rewards(rewards) -> np.ndarray:
    if isinstance(rewards, GroupBatch):
        return rewards.rewards
    return np.asarray(rewards, dtype=np.float64)


def with_advantages(group: GroupBatch, mode: str) -> GroupBatch:
    if mode == "mean":
        adv = advantages_mean(group)
    elif mode == "standardized":
        adv = advantages_standardized(group)
    else:
        raise ConfigError(f"unknown advantage mode {mode!r}; expected one of {ADV_MODES}")
    return replace(group, advantages=adv, adv_mode=mode)


def current_log_probs(params: PolicyParams, group: GroupBatch) -> list[np.ndarray]:
    return [token_log_probs(params, t.prompt_id, t.tokens) for t in group.trajectories]


def token_ratios(params: PolicyParams, group: GroupBatch) -> list[np.ndarray]:
    return [np.exp(lp - t.old_logps) for lp, t in zip(current_log_probs(params, group), group.trajectories)]


def sequence_weight(params: PolicyParams, trajectory: Trajectory, length_norm: bool = True) -> float:
    """Geometric-mean token ratio (``length_norm``) or the plain product of ratios."""
    log_r = token_log_probs(params, trajectory.prompt_id, trajectory.tokens) - trajectory.old_logps
    scale = 1.0 / trajectory.length if length_norm else 1.0
    return float(np.exp(scale * np.sum(log_r)))


def sequence_weights(params: PolicyParams, group: GroupBatch, length_norm: bool = True) -> np.ndarray:
    return np.array([sequence_weight(params, t, length_norm) for t in group.trajectories])


# -- reward registry -------------------------------------------------------


def final_token_equals(vocab: VocabSpec, symbol: str) -> RewardFn:
    """1.0 when the last non-eos token is ``symbol`` (``|`` separates accepted alternatives)."""
    targets = set(vocab.encode(symbol.split("|")))
    eos = vocab.eos_id

    def reward(tokens):
        body = [t for t in tokens if t != eos] if eos is not None else list(tokens)
        return 1.0 if body and body[-1] in targets else 0.0

    return reward


def contains_token(vocab: VocabSpec, symbol: str) -> RewardFn:
    target = vocab.encode([symbol])[0]
    return lambda tokens: 1.0 if target in tokens else 0.0


def zero_reward(vocab: VocabSpec) -> RewardFn:
    return lambda tokens: 0.0


REWARD_FACTORIES = {
    "final_token_equals": final_token_equals,
    "contains_token": contains_token,
    "zero": zero_reward,
}


def make_reward_fn(name: str, vocab: VocabSpec) -> RewardFn:
    """Resolve ``"kind"`` or ``"kind:arg"`` against the registry."""
    kind, _, arg = name.partition(":")
    factory = REWARD_FACTORIES.get(kind)
    if factory is None:
        raise ConfigError(f"unknown reward {name!r}; known: {sorted(REWARD_FACTORIES)}")
    try:
        return factory(vocab, arg) if arg else factory(vocab)
    except (TypeError, InputError) as exc:
        raise ConfigError(f"bad reward spec {name!r}: {exc}") from exc
