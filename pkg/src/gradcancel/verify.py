"""Self-check suite behind ``gradcancel verify``.

Each check builds a small case, evaluates a structural property, and
returns ``(passed, detail)``. The checks are fast and deterministic.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .config import ExperimentConfig
from .diagnostics import asym, jitter2, kl_drift_check
from .objectives import FAMILIES, EstimatorSpec, block_coefficient, estimator_gradient, surrogate
from .policy import Context, GradientVector, PolicyParams, VocabSpec, finite_diff_gradient
from .rollout import GroupBatch, make_group
from .runner import run_experiment, to_csv
from .scenarios import PROMPT, injected_trajectory
from .transforms import min_replace, orth_proj, positive_orth_proj_qp, truncate_rebalance

Check = Callable[[], tuple[bool, str]]


def _shared_pair_group(weights, adv, T: int = 2) -> tuple[PolicyParams, GroupBatch]:
    vocab = VocabSpec(tuple("abcdef"))
    params = PolicyParams(vocab, (PROMPT,), t_max=T)
    trajs = []
    for i, w in enumerate(weights):
        tokens = (0,) + tuple(1 + i for _ in range(T - 1))
        ratios = (1.0,) + (w ** (T / (T - 1)),) * (T - 1) if T > 1 else (w,)
        trajs.append(injected_trajectory(params, tokens, ratios))
    return params, GroupBatch(PROMPT, tuple(trajs), np.asarray(adv, dtype=float), "fixed")


def check_token_cancellation() -> tuple[bool, str]:
    params, group = _shared_pair_group((0.9, 1.1), (-1.0, 1.0))
    g = estimator_gradient(params, group, None, EstimatorSpec("grpo_token"))
    n = float(np.linalg.norm(g.block(Context(PROMPT, ()))))
    return n < 1e-12, f"shared block norm {n:.2e}"


def check_sequence_noncancellation() -> tuple[bool, str]:
    params, group = _shared_pair_group((0.9, 1.1), (-1.0, 1.0))
    g = estimator_gradient(params, group, None, EstimatorSpec("gspo_seq"))
    coef, resid = block_coefficient(g, params, Context(PROMPT, ()), 0)
    return abs(coef - 0.1 / 2) < 1e-10 and resid < 1e-12, f"coefficient {coef:.12g} (expected 0.05)"


def check_kl_drift() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    vocab = VocabSpec(tuple("abcde"))
    ctx = Context(PROMPT, ())
    worst = 0.0
    for _ in range(20):
        params = PolicyParams(vocab, (PROMPT,), rng.normal(size=5))
        g = GradientVector(5, {ctx: rng.normal(size=5)})
        m, p = kl_drift_check(params, ctx, g, 1e-3)
        worst = max(worst, abs(m - p) / p)
    return worst < 0.01, f"max relative error {worst:.2e}"


def check_transforms() -> tuple[bool, str]:
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(200):
        G = int(rng.integers(2, 7))
        adv = rng.normal(size=G)
        adv -= adv.mean()
        s = rng.uniform(0.5, 1.5, size=G)
        for out in (orth_proj(s, adv), positive_orth_proj_qp(s, adv), truncate_rebalance(s, adv)):
            worst = max(worst, abs(float(adv @ out)))
    ok = worst < 1e-10 and np.allclose(truncate_rebalance([2.0, 1.0], [1.0, -1.0]), [1.0, 1.0])
    return ok, f"max |A.s| {worst:.2e}"


def check_min_replace_signs() -> tuple[bool, str]:
    rng = np.random.default_rng(2)
    s = rng.uniform(0.5, 1.5, size=(1000, 6))
    adv = rng.normal(size=(1000, 6))
    out = np.array([min_replace(row) for row in s])
    ok = bool(np.all(np.sign(adv * out) == np.sign(adv * s)))
    return ok, "sign(A s_tilde) == sign(A s_bar)"


def check_gradients() -> tuple[bool, str]:
    rng = np.random.default_rng(3)
    vocab = VocabSpec(tuple("abc"))
    worst = 0.0
    for fam in FAMILIES:
        spec = EstimatorSpec(fam, 0.2)
        base = PolicyParams(vocab, (PROMPT,), t_max=3)
        seqs = [tuple(rng.integers(0, 3, size=3)) for _ in range(3)]
        group = make_group(base, PROMPT, seqs)
        ctxs = group.contexts()
        params = base.with_contexts(ctxs)
        for ctx in ctxs:
            params.table[ctx] = params.table[ctx] + 0.1 * rng.normal(size=3)
        adv = rng.normal(size=3)
        adv -= adv.mean()
        g = estimator_gradient(params, group, adv, spec)
        fd = finite_diff_gradient(lambda p: surrogate(p, group, adv, spec, anchor=params), params, 1e-6, ctxs)
        worst = max(worst, (g - fd).max_abs())
    return worst < 1e-7, f"max |analytic - FD| {worst:.2e}"


def check_metrics() -> tuple[bool, str]:
    ok = jitter2([0, 1, 0, 1]) == 2.0 and jitter2(3.0 * np.arange(10) + 1) == 0.0 and asym([1, 1], [2, 2]) == 0.0
    return ok, "jitter2 / asym unit values"


def check_determinism() -> tuple[bool, str]:
    cfg = ExperimentConfig(mode="sampled", G=4, refresh_interval=2, steps=10, seed=7)
    same = to_csv(run_experiment(cfg)) == to_csv(run_experiment(cfg))
    return same, "identical CSV for identical (config, seed)"


CHECKS: dict[str, Check] = {
    "token_cancellation": check_token_cancellation,
    "sequence_noncancellation": check_sequence_noncancellation,
    "kl_drift": check_kl_drift,
    "transform_orthogonality": check_transforms,
    "min_replace_sign": check_min_replace_signs,
    "gradient_vs_fd": check_gradients,
    "metric_units": check_metrics,
    "determinism": check_determinism,
}


def run_checks(out=print) -> bool:
    all_ok = True
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= ok
        out(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return all_ok
