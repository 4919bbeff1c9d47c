"""Mechanism metrics and checks of the drift predictions."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError
from .policy import (
    Context,
    GradientVector,
    PolicyParams,
    apply_update,
    fisher_matrix,
    kl_conditional,
    logsumexp,
    score_block,
    sequence_log_prob,
)
from .rollout import GroupBatch

DEFAULT_BUCKET_EDGES = (1, 2, 4, 8)


def asym(weights, adv) -> float:
    """Population variance of the trajectory modulation coefficients ``w_i * A_i``."""
    w = np.asarray(weights, dtype=np.float64)
    a = np.asarray(adv, dtype=np.float64)
    if w.shape != a.shape or w.size < 2:
        raise InputError("asym needs matching weight/advantage vectors with G >= 2")
    return float(np.var(w * a))


@dataclass(frozen=True)
class FrequencyBuckets:
    """Token types grouped by occurrence count.

    ``edges`` are lower count bounds: the default ``(1, 2, 4, 8)`` yields the
    buckets ``{1}, {2,3}, {4..7}, {8+}``. Tokens never seen belong to no bucket.
    """

    edges: tuple[int, ...]
    members: tuple[frozenset, ...]

    @classmethod
    def from_counts(cls, counts: dict[int, int], edges: Sequence[int] = DEFAULT_BUCKET_EDGES) -> FrequencyBuckets:
        edges = tuple(int(e) for e in edges)
        if not edges or edges[0] < 1 or any(b <= a for a, b in zip(edges, edges[1:])):
            raise InputError("bucket edges must be increasing positive counts")
        groups: list[set] = [set() for _ in edges]
        for tok, n in counts.items():
            if n < edges[0]:
                continue
            idx = int(np.searchsorted(edges, n, side="right")) - 1
            groups[idx].add(tok)
        return cls(edges, tuple(frozenset(g) for g in groups))

    @classmethod
    def from_corpus(cls, sequences: Iterable[Sequence[int]], edges: Sequence[int] = DEFAULT_BUCKET_EDGES) -> FrequencyBuckets:
        counts = Counter(t for seq in sequences for t in seq)
        return cls.from_counts(dict(counts), edges)

    def bucket_of(self, token: int) -> int | None:
        for i, m in enumerate(self.members):
            if token in m:
                return i
        return None

    @property
    def labels(self) -> list[str]:
        out = []
        for i, lo in enumerate(self.edges):
            hi = self.edges[i + 1] - 1 if i + 1 < len(self.edges) else None
            out.append(f"{lo}+" if hi is None else (f"{lo}" if hi == lo else f"{lo}-{hi}"))
        return out


def energy(per_token_grad_norms: Iterable[tuple[int, float]], buckets: FrequencyBuckets) -> tuple[np.ndarray, bool]:
    """Share of the summed per-token gradient norm falling in each bucket.

    ``per_token_grad_norms`` yields ``(token_id, norm)`` per token occurrence.
    Returns ``(shares, zero_total)``; a zero total gives all-zero shares.
    """
    totals = np.zeros(len(buckets.members))
    grand = 0.0
    for tok, nrm in per_token_grad_norms:
        if nrm < 0:
            raise InputError("gradient norms must be non-negative")
        grand += nrm
        b = buckets.bucket_of(tok)
        if b is not None:
            totals[b] += nrm
    if grand == 0.0:
        return totals, True
    return totals / grand, False


def token_contribution_norms(params: PolicyParams, group: GroupBatch, coeffs=None) -> list[tuple[int, float]]:
    """``(token, |k_it| * |score_it|)`` for every token of the group.

    With ``coeffs=None`` the raw score norm ``|score_it|`` is reported instead.
    """
    out = []
    if coeffs is None:
        coeffs = [np.ones(traj.length) for traj in group.trajectories]
    for traj, k in zip(group.trajectories, coeffs):
        for ctx, a, kt in zip(traj.contexts(), traj.tokens, k):
            out.append((a, abs(float(kt)) * float(np.linalg.norm(score_block(params, ctx, a)))))
    return out


def jitter2(series) -> float:
    m = np.asarray(series, dtype=np.float64)
    if m.ndim != 1 or m.size < 3:
        raise InputError("jitter2 needs a series of length >= 3")
    return float(np.mean(np.abs(m[2:] - 2.0 * m[1:-1] + m[:-2])))


def kl_drift_check(params: PolicyParams, h_star: Context, g: GradientVector, eta: float, restrict: bool = True) -> tuple[float, float]:
    """Measured ``KL(theta + eta g || theta)`` at ``h_star`` against ``1/2 eta^2 g' F g``.

    With ``restrict`` the update only uses g's ``h_star`` block, which is all
    the conditional distribution at ``h_star`` depends on in a tabular policy.
    """
    if not eta > 0:
        raise InputError("eta must be positive")
    step = g.restricted([h_star]) if restrict else g
    moved = apply_update(params, step, eta)
    measured = kl_conditional(moved, params, h_star)
    block = g.block(h_star)
    predicted = 0.5 * eta**2 * float(block @ fisher_matrix(params, h_star) @ block)
    return measured, predicted


def log_odds(params: PolicyParams, prompt_id: str, y_a: Sequence[int], y_b: Sequence[int]) -> float:
    return sequence_log_prob(params, prompt_id, y_a) - sequence_log_prob(params, prompt_id, y_b)


def equiv_set_entropy(params: PolicyParams, prompt_id: str, equivalent_set: Sequence[Sequence[int]]) -> float:
    """Entropy (nats) of the policy renormalized onto a set of equivalent sequences."""
    if len(equivalent_set) < 2:
        raise InputError("equivalent set needs at least two members")
    lp = np.array([sequence_log_prob(params, prompt_id, y) for y in equivalent_set])
    lp = lp - logsumexp(lp)
    p = np.exp(lp)
    return float(-np.sum(np.where(p > 0, p * lp, 0.0)))


def steps_to_threshold(series, kappa: float) -> int | None:
    for i, v in enumerate(series):
        if v >= kappa:
            return i
    return None


def statistical_cancellation(weights, adv) -> dict:
    """Shared-token coefficient statistics over many groups.

    ``weights`` and ``adv`` have shape ``(n_groups, G)``. Each group's
    coefficient is ``(1/G) sum_i w_i A_i``; returns its mean, standard error,
    and the pooled covariance between weights and advantages.
    """
    w = np.asarray(weights, dtype=np.float64)
    a = np.asarray(adv, dtype=np.float64)
    if w.shape != a.shape or w.ndim != 2:
        raise InputError("weights and advantages must both be (n_groups, G)")
    coef = np.mean(w * a, axis=1)
    n = coef.size
    stderr = float(coef.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    cov = float(np.mean((w - w.mean()) * (a - a.mean())))
    return {"mean": float(coef.mean()), "stderr": stderr, "cov": cov, "n": n}
