"""Gradient estimators for token-factorized and sequence-coupled group objectives.

Every estimator here has the form ``sum_{i,t} k[i][t] * score(h_it, a_it)``.
Each family only decides the per-token coefficients ``k``; ``assemble`` turns
them into a :class:`GradientVector`. Each family also has a scalar surrogate
whose exact gradient is the estimator, for finite-difference checking.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputError
from .policy import GradientVector, PolicyParams, score_block
from .rollout import GroupBatch, current_log_probs

FAMILIES = ("grpo_token", "grpo_clipped", "grpo_symclip", "gspo_seq", "gspo_clipped")
CLIPPED_FAMILIES = ("grpo_clipped", "grpo_symclip", "gspo_clipped")
SEQUENCE_FAMILIES = ("gspo_seq", "gspo_clipped")


@dataclass(frozen=True)
class EstimatorSpec:
    family: str = "gspo_seq"
    clip_eps: float = 0.2
    length_norm: bool = True

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown estimator family {self.family!r}; expected one of {FAMILIES}")
        if not np.isfinite(self.clip_eps) or self.clip_eps < 0:
            raise ConfigError("clip_eps must be a finite non-negative number")
        if self.family in CLIPPED_FAMILIES and self.clip_eps >= 1:
            raise ConfigError("clip_eps must be < 1 for clipped families")

    @property
    def clipped(self) -> bool:
        return self.family in CLIPPED_FAMILIES

    @property
    def sequence_level(self) -> bool:
        return self.family in SEQUENCE_FAMILIES

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> EstimatorSpec:
        unknown = set(d) - {"family", "clip_eps", "length_norm"}
        if unknown:
            raise ConfigError(f"unknown estimator fields {sorted(unknown)}")
        return cls(**d)


@dataclass
class WeightStages:
    """Sequence-weight pipeline: raw ``s``, clipped ``c``, sign-aware ``s_bar``, transformed ``s_tilde``."""

    s: np.ndarray
    c: np.ndarray
    s_bar: np.ndarray
    s_tilde: np.ndarray | None = None


def resolve_advantages(group: GroupBatch, adv) -> np.ndarray:
    a = group.advantages if adv is None else adv
    if a is None:
        raise InputError("advantages not set")
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (group.G,):
        raise InputError("advantage vector must have length G")
    return a


def length_factors(group: GroupBatch, length_norm: bool) -> np.ndarray:
    """alpha_i: ``1/T_i`` with length normalization, else 1."""
    return 1.0 / group.lengths if length_norm else np.ones(group.G)


def log_ratios(params: PolicyParams, group: GroupBatch) -> list[np.ndarray]:
    return [lp - t.old_logps for lp, t in zip(current_log_probs(params, group), group.trajectories)]


def seq_weights(params: PolicyParams, group: GroupBatch, length_norm: bool) -> np.ndarray:
    alpha = length_factors(group, length_norm)
    return np.array([np.exp(a * lr.sum()) for a, lr in zip(alpha, log_ratios(params, group))])


def postclip_weights(s, adv, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Clipped weights ``c`` and sign-aware post-clip weights ``s_bar``.

    ``adv * s_bar == min(s * adv, c * adv)`` holds elementwise.
    """
    s = np.asarray(s, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    if np.any(s <= 0):
        raise InputError("weights must be positive")
    c = np.clip(s, 1.0 - eps, 1.0 + eps)
    s_bar = np.where(adv >= 0, np.minimum(s, c), np.maximum(s, c))
    return c, s_bar


def _unclipped_active(w: np.ndarray, adv, eps: float) -> np.ndarray:
    # ties go to the unclipped branch
    c = np.clip(w, 1.0 - eps, 1.0 + eps)
    return w * adv <= c * adv


def symclip_phi(r, eps: float) -> np.ndarray:
    return np.clip(r, 0.0, 1.0 + eps)


def token_coefficients(params: PolicyParams, group: GroupBatch, adv=None, spec: EstimatorSpec | None = None) -> list[np.ndarray]:
    """Per-token scalar multiplying each score vector in the estimator."""
    spec = spec or EstimatorSpec()
    adv = resolve_advantages(group, adv)
    G = group.G
    alpha = length_factors(group, spec.length_norm)
    lrs = log_ratios(params, group)
    out = []
    if spec.sequence_level:
        s = np.array([np.exp(a * lr.sum()) for a, lr in zip(alpha, lrs)])
        active = np.ones(G, dtype=bool)
        if spec.family == "gspo_clipped":
            active = _unclipped_active(s, adv, spec.clip_eps)
        for i, lr in enumerate(lrs):
            k = adv[i] * s[i] * alpha[i] / G if active[i] else 0.0
            out.append(np.full(len(lr), k))
        return out
    for i, lr in enumerate(lrs):
        r = np.exp(lr)
        if spec.family == "grpo_token":
            w = r
        elif spec.family == "grpo_clipped":
            w = np.where(_unclipped_active(r, adv[i], spec.clip_eps), r, 0.0)
        else:  # grpo_symclip: phi frozen as a pointwise weight on the score
            w = symclip_phi(r, spec.clip_eps)
        out.append(adv[i] * alpha[i] * w / G)
    return out


def effective_token_weights(params: PolicyParams, group: GroupBatch, adv=None, spec: EstimatorSpec | None = None) -> list[np.ndarray]:
    """Value of each token's effective weight (the factor that multiplies the advantage).

    For clipped families this is the branch value selected by the min, so
    ``sum_i adv_i * w_i`` at a shared step is the aggregated coefficient of
    that shared token under frozen-weight differentiation.
    """
    spec = spec or EstimatorSpec()
    adv = resolve_advantages(group, adv)
    lrs = log_ratios(params, group)
    alpha = length_factors(group, spec.length_norm)
    if spec.sequence_level:
        s = np.array([np.exp(a * lr.sum()) for a, lr in zip(alpha, lrs)])
        if spec.family == "gspo_clipped":
            _, s = postclip_weights(s, adv, spec.clip_eps)
        return [np.full(len(lr), s[i]) for i, lr in enumerate(lrs)]
    out = []
    for i, lr in enumerate(lrs):
        r = np.exp(lr)
        if spec.family == "grpo_clipped":
            _, r = postclip_weights(r, np.full(len(r), adv[i]), spec.clip_eps)
        elif spec.family == "grpo_symclip":
            r = symclip_phi(r, spec.clip_eps)
        out.append(r)
    return out


def assemble(params: PolicyParams, group: GroupBatch, coeffs: Sequence[np.ndarray]) -> GradientVector:
    """``sum_{i,t} coeffs[i][t] * score(h_it, a_it)``, accumulated in trajectory order."""
    g = GradientVector(params.V)
    for traj, k in zip(group.trajectories, coeffs):
        for ctx, a, kt in zip(traj.contexts(), traj.tokens, k):
            g.add_block(ctx, score_block(params, ctx, a), float(kt))
    return g


def weighted_score_gradient(params: PolicyParams, group: GroupBatch, weights, adv=None, length_norm: bool = True) -> GradientVector:
    """``(1/G) sum_i w_i A_i sum_t alpha_i score`` with ``w`` held constant."""
    adv = resolve_advantages(group, adv)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (group.G,):
        raise InputError("weight vector must have length G")
    alpha = length_factors(group, length_norm)
    coeffs = [np.full(t.length, w[i] * adv[i] * alpha[i] / group.G) for i, t in enumerate(group.trajectories)]
    return assemble(params, group, coeffs)


def estimator_gradient(params: PolicyParams, group: GroupBatch, adv=None, spec: EstimatorSpec | None = None) -> GradientVector:
    return assemble(params, group, token_coefficients(params, group, adv, spec))


def grad_grpo_token(params, group, adv=None, spec: EstimatorSpec | None = None) -> GradientVector:
    return estimator_gradient(params, group, adv, _as_family(spec, "grpo_token"))


def grad_grpo_clipped(params, group, adv=None, spec: EstimatorSpec | None = None) -> GradientVector:
    return estimator_gradient(params, group, adv, _as_family(spec, "grpo_clipped"))


def grad_grpo_symclip(params, group, adv=None, spec: EstimatorSpec | None = None) -> GradientVector:
    return estimator_gradient(params, group, adv, _as_family(spec, "grpo_symclip"))


def grad_gspo_seq(params, group, adv=None, spec: EstimatorSpec | None = None) -> GradientVector:
    return estimator_gradient(params, group, adv, _as_family(spec, "gspo_seq"))


def grad_gspo_clipped(params, group, adv=None, spec: EstimatorSpec | None = None) -> GradientVector:
    return estimator_gradient(params, group, adv, _as_family(spec, "gspo_clipped"))


def _as_family(spec: EstimatorSpec | None, family: str) -> EstimatorSpec:
    if spec is None:
        return EstimatorSpec(family=family)
    if spec.family == family:
        return spec
    return EstimatorSpec(family=family, clip_eps=spec.clip_eps, length_norm=spec.length_norm)


def surrogate(params: PolicyParams, group: GroupBatch, adv=None, spec: EstimatorSpec | None = None, anchor: PolicyParams | None = None) -> float:
    """Scalar objective whose gradient at ``anchor`` is the family's estimator.

    ``anchor`` only matters for ``grpo_symclip``, whose clipping factor is a
    frozen weight: it is evaluated at ``anchor`` and multiplied by
    ``r / r_anchor``. It defaults to ``params``.
    """
    spec = spec or EstimatorSpec()
    adv = resolve_advantages(group, adv)
    G = group.G
    alpha = length_factors(group, spec.length_norm)
    lrs = log_ratios(params, group)
    if spec.sequence_level:
        s = np.array([np.exp(a * lr.sum()) for a, lr in zip(alpha, lrs)])
        if spec.family == "gspo_clipped":
            c = np.clip(s, 1.0 - spec.clip_eps, 1.0 + spec.clip_eps)
            return float(np.sum(np.minimum(s * adv, c * adv)) / G)
        return float(np.sum(s * adv) / G)
    anchor_lrs = log_ratios(anchor, group) if (anchor is not None and spec.family == "grpo_symclip") else lrs
    total = 0.0
    for i, lr in enumerate(lrs):
        r = np.exp(lr)
        if spec.family == "grpo_token":
            terms = r * adv[i]
        elif spec.family == "grpo_clipped":
            c = np.clip(r, 1.0 - spec.clip_eps, 1.0 + spec.clip_eps)
            terms = np.minimum(r * adv[i], c * adv[i])
        else:
            r0 = np.exp(anchor_lrs[i])
            terms = adv[i] * symclip_phi(r0, spec.clip_eps) * r / r0
        total += alpha[i] * float(np.sum(terms))
    return total / G


def shared_token_coefficient(group: GroupBatch, weights, adv=None, t_star: int = 0, length_norm: bool = True) -> float:
    """Scalar multiplying the shared score direction at step ``t_star`` (0-based).

    Returns ``sum_i w_i A_i / T_i`` (or ``sum_i w_i A_i`` without length
    normalization). Every member must share the same context-token pair at
    ``t_star``.
    """
    adv = resolve_advantages(group, adv)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (group.G,):
        raise InputError("weight vector must have length G")
    heads = {t.tokens[: t_star + 1] for t in group.trajectories if t.length > t_star}
    if len(heads) != 1 or any(t.length <= t_star for t in group.trajectories):
        raise InputError(f"group members do not share a context-token pair at step {t_star}")
    alpha = length_factors(group, length_norm)
    return float(np.sum(w * adv * alpha))


def block_coefficient(grad: GradientVector, params: PolicyParams, ctx, token: int) -> tuple[float, float]:
    """Project ``grad``'s ctx block onto ``score(ctx, token)``.

    Returns ``(coefficient, residual_norm)``; a zero residual means the block
    is exactly a multiple of that score direction.
    """
    block = grad.block(ctx)
    d = score_block(params, ctx, token)
    coef = float(block @ d) / float(d @ d)
    return coef, float(np.linalg.norm(block - coef * d))
