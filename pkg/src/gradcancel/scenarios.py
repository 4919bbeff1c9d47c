"""Fixed constructions used by the experiment runner."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .policy import PolicyParams, VocabSpec, token_log_probs
from .rollout import GroupBatch, Trajectory

PROMPT = "q"

TOY_VOCAB = VocabSpec(("The", "answer", "is", "25", "20", "10+10", "=", ".", "10+10=20"), eos=".")

# wrong answer, then two correct answers that differ in tokenization and length
TOY_SEQUENCES = {
    "default": (
        ("The", "answer", "is", "25", "."),
        ("The", "answer", "is", "20", "."),
        ("10+10", "=", "20", "."),
    ),
    # both correct answers tokenized with the same structure, so s_2 == s_3 by symmetry
    "matched": (
        ("The", "answer", "is", "25", "."),
        ("The", "answer", "is", "20", "."),
        ("The", "answer", "is", "10+10=20", "."),
    ),
}

PREFIX_VOCAB = VocabSpec(("a", "b", "c", "d"))
PREFIX_SEQUENCES = (("a", "b", "c"), ("a", "b", "d"))

CLIP_VOCAB = VocabSpec(("a", "b"))


@dataclass(frozen=True)
class ToySetup:
    params: PolicyParams
    sequences: tuple[tuple[int, ...], ...]

    @property
    def equivalent_pair(self):
        return self.sequences[1], self.sequences[2]


def toy_setup(variant: str, T_max: int) -> ToySetup:
    if variant not in TOY_SEQUENCES:
        raise ConfigError(f"toy variant must be one of {sorted(TOY_SEQUENCES)}")
    seqs = tuple(TOY_VOCAB.encode(s) for s in TOY_SEQUENCES[variant])
    if T_max < max(len(s) for s in seqs):
        raise ConfigError(f"T_max={T_max} is shorter than the toy trajectories")
    return ToySetup(PolicyParams(TOY_VOCAB, (PROMPT,), t_max=T_max), seqs)


def injected_trajectory(params: PolicyParams, tokens, ratios, reward=None) -> Trajectory:
    """Trajectory whose per-token ratio against ``params`` equals ``ratios``.

    The old log-probs are ``log pi(a_t|h_t) - log ratio_t``, so no explicit
    old policy is needed.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (len(tokens),) or np.any(ratios <= 0):
        raise ConfigError("need one positive ratio per token")
    lp = token_log_probs(params, PROMPT, tokens)
    return Trajectory(PROMPT, tuple(tokens), lp - np.log(ratios), reward)


def minimal_prefix_group(cfg) -> tuple[PolicyParams, GroupBatch]:
    """G=2, T=3: two shared tokens with ratios ``rhos``, last-token ratios ``lambdas``."""
    if cfg.G != 2:
        raise ConfigError("minimal_prefix needs G = 2")
    if len(cfg.rhos) != 2 or len(cfg.lambdas) != 2:
        raise ConfigError("minimal_prefix needs two rhos and two lambdas")
    params = PolicyParams(PREFIX_VOCAB, (PROMPT,), t_max=3)
    trajs = []
    for seq, lam in zip(PREFIX_SEQUENCES, cfg.lambdas):
        trajs.append(injected_trajectory(params, PREFIX_VOCAB.encode(seq), (*cfg.rhos, lam)))
    adv = cfg.adv_scale * np.array([-1.0, 1.0])
    return params, GroupBatch(PROMPT, tuple(trajs), adv, "fixed")


def clip_break_group(w: float, adv_scale: float) -> tuple[PolicyParams, GroupBatch]:
    """Two copies of a one-token trajectory with ratio ``w`` and advantages ``(A, -A)``."""
    params = PolicyParams(CLIP_VOCAB, (PROMPT,), t_max=1)
    traj = injected_trajectory(params, (0,), (w,))
    adv = np.array([adv_scale, -adv_scale])
    return params, GroupBatch(PROMPT, (traj, traj), adv, "fixed")


def clip_break_formula(w: float, adv_scale: float, eps: float) -> float:
    """Aggregated effective shared-token weight of the clipped token objective."""
    if w > 1.0 + eps:
        return adv_scale * ((1.0 + eps) - w)
    if w < 1.0 - eps:
        return adv_scale * (w - (1.0 - eps))
    return 0.0
