"""Intra-group weight transforms and the decoupled (stop-gradient) estimator.

A transform maps the group's weight vector to ``s_tilde`` before it multiplies
the advantages. The estimator treats ``s_tilde`` as a constant.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError, InputError
from .objectives import (
    EstimatorSpec,
    WeightStages,
    resolve_advantages,
    length_factors,
    log_ratios,
    postclip_weights,
    seq_weights,
    weighted_score_gradient,
)
from .policy import GradientVector, PolicyParams, score_block
from .rollout import GroupBatch

KINDS = ("identity", "min_replace", "orth_proj", "positive_orth_proj_qp", "truncate_rebalance")
ORTH_KINDS = ("orth_proj", "positive_orth_proj_qp", "truncate_rebalance")
SIDE_SUM_FLOOR = 1e-10
QP_MAX_G = 16


@dataclass(frozen=True)
class TransformSpec:
    kind: str = "identity"
    floor_eps: float = 1e-8
    stop_grad: bool = True
    on_postclip: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown transform {self.kind!r}; expected one of {KINDS}")
        if not (0 < self.floor_eps <= 1e-8):
            raise ConfigError("floor_eps must lie in (0, 1e-8]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TransformSpec:
        unknown = set(d) - {"kind", "floor_eps", "stop_grad", "on_postclip"}
        if unknown:
            raise ConfigError(f"unknown transform fields {sorted(unknown)}")
        return cls(**d)


def min_replace(s_bar) -> np.ndarray:
    s_bar = np.asarray(s_bar, dtype=np.float64)
    if np.any(s_bar <= 0):
        raise InputError("Min-Replace needs positive weights")
    return np.full_like(s_bar, s_bar.min())


def orth_proj(w, adv) -> np.ndarray:
    """Euclidean projection of ``w`` onto the hyperplane ``adv . v = 0``.

    Returns ``w`` unchanged when ``adv`` is the zero vector.
    """
    w = np.asarray(w, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    nrm2 = float(adv @ adv)
    if nrm2 == 0.0:
        return w.copy()
    return w - (float(adv @ w) / nrm2) * adv


def _has_both_signs(adv: np.ndarray) -> bool:
    return bool(np.any(adv > 0) and np.any(adv < 0))


@lru_cache(maxsize=QP_MAX_G)
def _free_masks(G: int) -> np.ndarray:
    return np.array(list(itertools.product((False, True), repeat=G)), dtype=bool)


def positive_orth_proj_qp(s_bar, adv, floor_eps: float = 1e-8) -> np.ndarray:
    """Exact solution of ``min 1/2 |v - s_bar|^2`` s.t. ``adv . v = 0``, ``v >= floor_eps``.

    Enumerates every active set (``2^G`` of them); on each, the equality
    constrained problem has a closed form. The optimum is the cheapest
    primal-feasible candidate. Falls back to ``s_bar`` when ``adv`` lacks
    either sign.
    """
    s_bar = np.asarray(s_bar, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    G = s_bar.size
    if adv.shape != (G,):
        raise InputError("weights and advantages must have the same length")
    if not _has_both_signs(adv):
        return s_bar.copy()
    if G > QP_MAX_G:
        raise InputError(f"exact QP enumeration supports G <= {QP_MAX_G}")
    # shift v = floor + u so the bound becomes u >= 0
    target = s_bar - floor_eps
    rhs = -floor_eps * float(adv.sum())
    F = _free_masks(G)
    AF = F * adv
    nA = np.einsum("ij,ij->i", AF, AF)
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = np.where(nA > 0, (AF @ target - rhs) / nA, 0.0)
    U = F * (target[None, :] - lam[:, None] * adv[None, :])
    scale = 1.0 + float(np.max(np.abs(s_bar)))
    tol = 1e-12 * scale
    ok = np.all(U >= -tol, axis=1) & (np.abs(U @ adv - rhs) <= 1e-12 * scale * (1.0 + np.abs(adv).sum()))
    obj = np.where(ok, np.sum((U - target) ** 2, axis=1), np.inf)
    best = int(np.argmin(obj))
    if not np.isfinite(obj[best]):
        raise InputError("QP infeasible")
    return floor_eps + np.maximum(U[best], 0.0)


def truncate_rebalance(s_bar, adv, floor_eps: float = 1e-8) -> np.ndarray:
    """Floor at ``floor_eps`` then rescale one advantage side to restore orthogonality.

    Falls back to ``s_bar`` when either side is empty or has a side-sum below
    1e-10 (the rescale factor would be ill-conditioned).
    """
    s_bar = np.asarray(s_bar, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    if _truncate_degenerate(s_bar, adv, floor_eps):
        return s_bar.copy()
    s_plus = np.maximum(s_bar, floor_eps)
    P, N = adv > 0, adv < 0
    side_p = float(np.sum(adv[P] * s_plus[P]))
    side_n = float(np.sum(-adv[N] * s_plus[N]))
    delta = side_p - side_n
    out = s_plus.copy()
    if delta > 0:
        out[P] *= side_n / side_p
    elif delta < 0:
        out[N] *= side_p / side_n
    return out


def rebalance_factors(s_bar, adv, floor_eps: float = 1e-8) -> tuple[float, float]:
    """``(alpha, beta)`` actually applied by :func:`truncate_rebalance` (1.0 for an untouched side)."""
    s_plus = np.maximum(np.asarray(s_bar, dtype=np.float64), floor_eps)
    adv = np.asarray(adv, dtype=np.float64)
    P, N = adv > 0, adv < 0
    side_p = float(np.sum(adv[P] * s_plus[P]))
    side_n = float(np.sum(-adv[N] * s_plus[N]))
    if side_p > side_n:
        return side_n / side_p, 1.0
    if side_p < side_n:
        return 1.0, side_p / side_n
    return 1.0, 1.0


def _truncate_degenerate(s_bar, adv, floor_eps) -> bool:
    if not _has_both_signs(adv):
        return True
    s_plus = np.maximum(s_bar, floor_eps)
    side_p = float(np.sum(adv[adv > 0] * s_plus[adv > 0]))
    side_n = float(np.sum(-adv[adv < 0] * s_plus[adv < 0]))
    return min(side_p, side_n) < SIDE_SUM_FLOOR


def is_degenerate(kind: str, s_bar, adv, floor_eps: float = 1e-8) -> bool:
    """Whether ``kind`` would skip the transform for this group."""
    adv = np.asarray(adv, dtype=np.float64)
    if not np.any(adv):
        return True
    if kind == "orth_proj":
        return False
    if kind == "positive_orth_proj_qp":
        return not _has_both_signs(adv)
    if kind == "truncate_rebalance":
        return _truncate_degenerate(np.asarray(s_bar, dtype=np.float64), adv, floor_eps)
    return False


def apply_transform(spec: TransformSpec, s_bar, adv) -> tuple[np.ndarray, bool]:
    """Run the configured transform; returns ``(s_tilde, degenerate)``.

    Degenerate groups pass through untransformed.
    """
    s_bar = np.asarray(s_bar, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    if spec.kind == "identity":
        return s_bar.copy(), not np.any(adv)
    if is_degenerate(spec.kind, s_bar, adv, spec.floor_eps):
        return s_bar.copy(), True
    if spec.kind == "min_replace":
        return min_replace(s_bar), False
    if spec.kind == "orth_proj":
        return orth_proj(s_bar, adv), False
    if spec.kind == "positive_orth_proj_qp":
        return positive_orth_proj_qp(s_bar, adv, spec.floor_eps), False
    return truncate_rebalance(s_bar, adv, spec.floor_eps), False


def _check_sequence_family(est: EstimatorSpec) -> None:
    if not est.sequence_level:
        raise ConfigError(f"weight transforms act on sequence weights; {est.family!r} is token-level")


def dfpo_stages(params: PolicyParams, group: GroupBatch, adv, est: EstimatorSpec, tr: TransformSpec) -> tuple[WeightStages, bool]:
    """s -> c -> s_bar -> s_tilde for one group. Returns the stages and the degenerate flag."""
    _check_sequence_family(est)
    adv = resolve_advantages(group, adv)
    s = seq_weights(params, group, est.length_norm)
    if est.clipped:
        c, s_bar = postclip_weights(s, adv, est.clip_eps)
    else:
        c, s_bar = s.copy(), s.copy()
    s_tilde, degenerate = apply_transform(tr, s_bar if tr.on_postclip else s, adv)
    return WeightStages(s, c, s_bar, s_tilde), degenerate


def grad_dfpo(params: PolicyParams, group: GroupBatch, adv=None, est: EstimatorSpec | None = None, tr: TransformSpec | None = None) -> GradientVector:
    """Decoupled estimator: ``(1/G) sum_i s_tilde_i A_i sum_t alpha_i score`` with ``s_tilde`` frozen."""
    est = est or EstimatorSpec("gspo_clipped")
    tr = tr or TransformSpec("min_replace")
    if not tr.stop_grad:
        raise ConfigError("differentiating through the transform is not a supported estimator")
    stages, _ = dfpo_stages(params, group, adv, est, tr)
    return weighted_score_gradient(params, group, stages.s_tilde, adv, est.length_norm)


def dfpo_surrogate(params: PolicyParams, group: GroupBatch, adv, est: EstimatorSpec, tr: TransformSpec, anchor: PolicyParams) -> float:
    """Stop-gradient surrogate whose gradient at ``anchor`` equals :func:`grad_dfpo` there."""
    adv = resolve_advantages(group, adv)
    stages, _ = dfpo_stages(anchor, group, adv, est, tr)
    alpha = length_factors(group, est.length_norm)
    now, then = log_ratios(params, group), log_ratios(anchor, group)
    total = sum(stages.s_tilde[i] * adv[i] * alpha[i] * float(np.sum(np.exp(a - b))) for i, (a, b) in enumerate(zip(now, then)))
    return total / group.G


def pipeline_objective(params: PolicyParams, group: GroupBatch, adv, est: EstimatorSpec, tr: TransformSpec) -> float:
    """``(1/G) sum_i s_tilde_i(theta) A_i`` with the transform left inside the graph.

    Negative control only: for Min-Replace and the orthogonal transforms this
    is identically zero, so differentiating through the transform erases the
    learning signal.
    """
    adv = resolve_advantages(group, adv)
    stages, _ = dfpo_stages(params, group, adv, est, tr)
    return float(np.sum(stages.s_tilde * adv)) / group.G


@dataclass
class BiasReport:
    phi: np.ndarray
    bias_vector: GradientVector
    bias_norm: float
    bias_norm_bound: float
    trust_delta: float

    def to_row(self) -> dict:
        return {
            "phi_min": float(self.phi.min()),
            "phi_mean": float(self.phi.mean()),
            "bias_norm": self.bias_norm,
            "bias_norm_bound": self.bias_norm_bound,
            "trust_delta": self.trust_delta,
        }


def trajectory_score_sums(params: PolicyParams, group: GroupBatch, length_norm: bool = True) -> list[GradientVector]:
    """Per-trajectory ``sum_t alpha_i score(h_it, a_it)``."""
    alpha = length_factors(group, length_norm)
    out = []
    for a, traj in zip(alpha, group.trajectories):
        g = GradientVector(params.V)
        for ctx, tok in zip(traj.contexts(), traj.tokens):
            g.add_block(ctx, score_block(params, ctx, tok), float(a))
        out.append(g)
    return out


def minrep_bias_report(params: PolicyParams, group: GroupBatch, adv=None, eps: float = 0.2, length_norm: bool = True) -> BiasReport:
    """Shrink ratios and single-sample bias of Min-Replace against the post-clip baseline."""
    adv = resolve_advantages(group, adv)
    est = EstimatorSpec("gspo_clipped", clip_eps=eps, length_norm=length_norm)
    stages, _ = dfpo_stages(params, group, adv, est, TransformSpec("identity"))
    s_bar = stages.s_bar
    s_min = float(s_bar.min())
    phi = s_min / s_bar
    g_base = weighted_score_gradient(params, group, s_bar, adv, length_norm)
    g_min = weighted_score_gradient(params, group, np.full(group.G, s_min), adv, length_norm)
    bias = g_min - g_base
    norms = np.array([g.norm() for g in trajectory_score_sums(params, group, length_norm)])
    bound = float(np.sum(np.abs(adv) * (s_bar - s_min) * norms)) / group.G
    delta = float(np.max(np.abs(np.log(s_bar))))
    report = BiasReport(phi, bias, bias.norm(), bound, delta)
    if report.bias_norm > bound + 1e-9:
        raise RuntimeError(f"bias norm {report.bias_norm} exceeds bound {bound}")
    if np.any(phi <= 0) or np.any(phi > 1) or np.any(phi < np.exp(-2 * delta) - 1e-15):
        raise RuntimeError("shrink ratios outside [exp(-2 delta), 1]")
    return report
