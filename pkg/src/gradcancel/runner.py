"""Training loops over the registered scenarios, plus CSV/JSON output."""

from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .diagnostics import (
    FrequencyBuckets,
    asym,
    energy,
    equiv_set_entropy,
    jitter2,
    log_odds,
    steps_to_threshold,
    token_contribution_norms,
)
from .errors import ConfigError
from .objectives import (
    EstimatorSpec,
    assemble,
    block_coefficient,
    effective_token_weights,
    estimator_gradient,
    length_factors,
    seq_weights,
    shared_token_coefficient,
    token_coefficients,
)
from .policy import Context, GradientVector, PolicyParams, apply_update, fisher_matrix, kl_conditional, log_prob, score_block
from .rollout import GroupBatch, assign_rewards, make_group, make_reward_fn, sample_group, with_advantages
from .scenarios import (
    PROMPT,
    clip_break_formula,
    clip_break_group,
    minimal_prefix_group,
    toy_setup,
)
from .transforms import dfpo_stages


@dataclass
class RunRecord:
    scenario: str
    rows: list[dict] = field(default_factory=list)
    tokens_generated: int = 0
    tokens_budget: int = 0
    final_params: PolicyParams | None = None

    @property
    def columns(self) -> list[str]:
        return list(self.rows[0]) if self.rows else []

    def series(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def check_finite(self) -> None:
        for r in self.rows:
            for k, v in r.items():
                if isinstance(v, float) and not np.isfinite(v):
                    raise RuntimeError(f"non-finite {k} at step {r.get('step')}")


@dataclass
class StepPlan:
    """Per-token coefficients for one update and the weights behind them."""

    coeffs: list[np.ndarray]
    traj_weights: np.ndarray
    s: np.ndarray
    degenerate: bool


def plan_step(params: PolicyParams, group: GroupBatch, cfg: ExperimentConfig) -> StepPlan:
    """Decoupled estimator whenever a transform is configured, else the plain family."""
    est = cfg.estimator
    adv = group.advantages
    s = seq_weights(params, group, est.length_norm)
    if cfg.transform != "identity":
        stages, degenerate = dfpo_stages(params, group, adv, est, cfg.transform_spec)
        alpha = length_factors(group, est.length_norm)
        coeffs = [np.full(t.length, stages.s_tilde[i] * adv[i] * alpha[i] / group.G) for i, t in enumerate(group.trajectories)]
        return StepPlan(coeffs, stages.s_tilde, s, degenerate)
    coeffs = token_coefficients(params, group, adv, est)
    eff = effective_token_weights(params, group, adv, est)
    # token families have no single trajectory weight; use the mean effective token weight
    w = np.array([float(np.mean(e)) for e in eff])
    return StepPlan(coeffs, w, s, group.degenerate)


def _score_sum(params: PolicyParams, tokens, scale: float = 1.0) -> GradientVector:
    g = GradientVector(params.V)
    for t, a in enumerate(tokens):
        ctx = Context(PROMPT, tuple(tokens[:t]))
        g.add_block(ctx, score_block(params, ctx, a), scale)
    return g


def _kl_pair(params: PolicyParams, new: PolicyParams, g: GradientVector, ctx: Context, eta: float) -> tuple[float, float]:
    block = g.block(ctx)
    return kl_conditional(new, params, ctx), 0.5 * eta**2 * float(block @ fisher_matrix(params, ctx) @ block)


def _energy_columns(params, group, plan, counts: Counter) -> dict:
    buckets = FrequencyBuckets.from_counts(dict(counts))
    shares, _ = energy(token_contribution_norms(params, group, plan.coeffs), buckets)
    return {f"energy_{label}": float(v) for label, v in zip(buckets.labels, shares)}


def _refresh(params: PolicyParams, group: GroupBatch) -> GroupBatch:
    fresh = make_group(params, group.prompt_id, [t.tokens for t in group.trajectories])
    trajs = tuple(replace(t, reward=o.reward) for t, o in zip(fresh.trajectories, group.trajectories))
    return replace(group, trajectories=trajs, old_params=fresh.old_params)


def run_toy(cfg: ExperimentConfig) -> RunRecord:
    setup = toy_setup(cfg.variant, cfg.T_max)
    params = setup.params
    reward_fn = make_reward_fn(cfg.reward, params.vocab)
    rng = np.random.default_rng(cfg.seed)
    y2, y3 = setup.equivalent_pair
    root = Context(PROMPT, ())
    rec = RunRecord(cfg.scenario)
    counts: Counter = Counter()
    group = None
    if cfg.mode == "replay":
        if cfg.G != len(setup.sequences):
            raise ConfigError(f"replay toy uses its {len(setup.sequences)} fixed trajectories; set G = {len(setup.sequences)}")
        group = with_advantages(assign_rewards(make_group(params, PROMPT, setup.sequences), reward_fn), cfg.adv_mode)
        counts.update(t for s in setup.sequences for t in s)
    for k in range(cfg.steps):
        refresh = cfg.refresh_interval > 0 and k % cfg.refresh_interval == 0
        if cfg.mode == "sampled" and refresh:
            group = sample_group(params, PROMPT, cfg.G, cfg.T_max, rng)
            group = with_advantages(assign_rewards(group, reward_fn), cfg.adv_mode)
            rec.tokens_generated += int(group.lengths.sum())
            rec.tokens_budget += cfg.G * cfg.T_max
            counts.update(t for tr in group.trajectories for t in tr.tokens)
        elif cfg.mode == "replay":
            if refresh and k > 0:
                group = _refresh(params, group)
            rec.tokens_budget += int(group.lengths.sum())
        plan = plan_step(params, group, cfg)
        g = assemble(params, group, plan.coeffs)
        new = apply_update(params, g, cfg.eta)

        lo = log_odds(params, PROMPT, y2, y3)
        grad_lo = _score_sum(params, y2) - _score_sum(params, y3)
        kl, kl_pred = _kl_pair(params, new, g, root, cfg.eta)
        row = {
            "step": k,
            "mean_reward": float(group.rewards.mean()),
            "entropy": equiv_set_entropy(params, PROMPT, [y2, y3]),
            "log_odds": lo,
            "logodds_change": log_odds(new, PROMPT, y2, y3) - lo,
            "pred_logodds_change": cfg.eta * grad_lo.dot(g),
            "kl_root": kl,
            "kl_root_pred": kl_pred,
            "asym": asym(plan.traj_weights, group.advantages),
            "s_min": float(plan.s.min()),
            "s_max": float(plan.s.max()),
            "w_min": float(plan.traj_weights.min()),
            "w_max": float(plan.traj_weights.max()),
            "degenerate": int(plan.degenerate),
        }
        if cfg.mode == "replay":
            # split the tau2/tau3 contribution into a common part and a coefficient-gap part
            adv = group.advantages
            alpha = length_factors(group, cfg.estimator.length_norm)
            gap = adv[1] * plan.traj_weights[1] - adv[2] * plan.traj_weights[2]
            diff = _score_sum(params, y2, alpha[1]) - _score_sum(params, y3, alpha[2])
            row["coef_gap"] = float(gap)
            row["attrib_logodds_change"] = cfg.eta * (gap / (2.0 * group.G)) * grad_lo.dot(diff)
        row.update(_energy_columns(params, group, plan, counts))
        row["tokens_generated"] = rec.tokens_generated
        rec.rows.append(row)
        params = new
    rec.final_params = params
    return rec


def run_minimal_prefix(cfg: ExperimentConfig) -> RunRecord:
    params, group = minimal_prefix_group(cfg)
    shared = [(Context(PROMPT, ()), group.trajectories[0].tokens[0]), (Context(PROMPT, group.trajectories[0].tokens[:1]), group.trajectories[0].tokens[1])]
    rec = RunRecord(cfg.scenario)
    A = cfg.adv_scale
    for k in range(cfg.steps):
        if cfg.refresh_interval > 0 and k > 0 and k % cfg.refresh_interval == 0:
            group = _refresh(params, group)
        rec.tokens_budget += int(group.lengths.sum())
        plan = plan_step(params, group, cfg)
        g = assemble(params, group, plan.coeffs)
        coef, resid = block_coefficient(g, params, *shared[0])
        alpha = 1.0 / 3.0 if cfg.length_norm else 1.0
        row = {
            "step": k,
            "shared_coef": coef,
            "shared_coef_residual": resid,
            "shared_block_norm": float(np.linalg.norm(g.block(shared[0][0]))),
            "gspo_formula_coef": float(A * (plan.s[1] - plan.s[0]) * alpha / group.G),
            "asym": asym(plan.traj_weights, group.advantages),
            "s_1": float(plan.s[0]),
            "s_2": float(plan.s[1]),
            "w_1": float(plan.traj_weights[0]),
            "w_2": float(plan.traj_weights[1]),
        }
        # A * rho1 * rho2 * (lambda2 - lambda1) at the current ratios
        prod = seq_weights(params, group, length_norm=False)
        row["unnormalized_prefix_coef"] = A * float(prod[1] - prod[0])
        rec.rows.append(row)
        params = apply_update(params, g, cfg.eta)
    rec.final_params = params
    return rec


def run_clip_break(cfg: ExperimentConfig) -> RunRecord:
    rec = RunRecord(cfg.scenario)
    eps, A = cfg.clip_eps, cfg.adv_scale
    clipped = EstimatorSpec("grpo_clipped", eps, length_norm=False)
    sym = EstimatorSpec("grpo_symclip", eps, length_norm=False)
    for w in cfg.w_grid:
        params, group = clip_break_group(w, A)
        ctx, tok = Context(PROMPT, ()), 0
        w_real = float(np.exp(log_prob(params, ctx, tok) - group.trajectories[0].old_logps[0]))
        eff_c = [e[0] for e in effective_token_weights(params, group, None, clipped)]
        eff_s = [e[0] for e in effective_token_weights(params, group, None, sym)]
        rec.rows.append({
            "w": w,
            "w_realized": w_real,
            "clipped_coef": shared_token_coefficient(group, eff_c, length_norm=False),
            "clipped_formula": clip_break_formula(w_real, A, eps),
            "clipped_grad_coef": block_coefficient(estimator_gradient(params, group, None, clipped), params, ctx, tok)[0],
            "symclip_coef": shared_token_coefficient(group, eff_s, length_norm=False),
            "symclip_grad_coef": block_coefficient(estimator_gradient(params, group, None, sym), params, ctx, tok)[0],
        })
        rec.tokens_budget += int(group.lengths.sum())
    return rec


scenario_toy_unified = run_toy
scenario_minimal_prefix = run_minimal_prefix
scenario_clip_break = run_clip_break

RUNNERS = {
    "toy_unified": run_toy,
    "minimal_prefix": run_minimal_prefix,
    "clip_break": run_clip_break,
}


def run_experiment(cfg: ExperimentConfig) -> RunRecord:
    rec = RUNNERS[cfg.scenario](cfg)
    rec.check_finite()
    return rec


def summarize(cfg: ExperimentConfig, rec: RunRecord) -> dict:
    final = {k: v for k, v in rec.rows[-1].items()} if rec.rows else {}
    out = {
        "version": __version__,
        "scenario": cfg.scenario,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "rows": len(rec.rows),
        "tokens_generated": rec.tokens_generated,
        "tokens_budget": rec.tokens_budget,
        "final": final,
    }
    if "mean_reward" in rec.columns:
        rewards = rec.series("mean_reward")
        out["jitter2_reward"] = jitter2(rewards) if rewards.size >= 3 else None
        out["steps_to_threshold"] = steps_to_threshold(rewards, cfg.threshold)
    return out


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def to_csv(rec: RunRecord) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    cols = rec.columns
    writer.writerow(cols)
    for r in rec.rows:
        writer.writerow([_fmt(r[c]) for c in cols])
    return buf.getvalue()


def write_outputs(cfg: ExperimentConfig, rec: RunRecord, out_dir, stem: str = "run") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    json_path = out_dir / f"{stem}_summary.json"
    csv_path.write_bytes(to_csv(rec).encode())
    json_path.write_text(json.dumps(summarize(cfg, rec), indent=2, sort_keys=True, default=_json_default) + "\n")
    return csv_path, json_path


def _json_default(v):
    if isinstance(v, np.generic):
        return v.item()
    raise TypeError(f"cannot serialize {type(v).__name__}")


MATCHED_FIELDS = ("G", "steps", "T_max", "seed", "mode", "refresh_interval", "scenario", "variant")


def run_compute_matched(configs: list[ExperimentConfig]) -> dict:
    """Run configs that share the sampling budget and seed; report paired series.

    Every config allocates the same ``G * T_max`` generation budget per
    sampling round with the same seed, so budgets match by construction;
    a mismatch in any of ``MATCHED_FIELDS`` is rejected up front.
    """
    if len(configs) < 2:
        raise ConfigError("compute-matched comparison needs at least two configs")
    ref = configs[0]
    for cfg in configs[1:]:
        bad = [f for f in MATCHED_FIELDS if getattr(cfg, f) != getattr(ref, f)]
        if bad:
            raise ConfigError(f"configs differ in budget-relevant fields {bad}")
    runs = [run_experiment(c) for c in configs]
    budgets = {r.tokens_budget for r in runs}
    if len(budgets) != 1:
        raise ConfigError(f"token budgets differ across runs: {sorted(budgets)}")
    report = {"tokens_budget": budgets.pop(), "runs": []}
    for cfg, rec in zip(configs, runs):
        entry = {"label": _label(cfg), "tokens_generated": rec.tokens_generated, "record": rec}
        if "mean_reward" in rec.columns:
            rewards = rec.series("mean_reward")
            entry["jitter2_reward"] = jitter2(rewards) if rewards.size >= 3 else None
            entry["steps_to_threshold"] = steps_to_threshold(rewards, cfg.threshold)
        if "entropy" in rec.columns:
            ent = rec.series("entropy")
            entry["entropy_first"] = float(ent[0])
            entry["entropy_last"] = float(ent[-1])
        report["runs"].append(entry)
    return report


def _label(cfg: ExperimentConfig) -> str:
    return f"{cfg.family}+{cfg.transform}"
