"""Tabular autoregressive softmax policy.

Every context ``(prompt_id, prefix)`` owns one vector of ``V`` logits. Contexts
that were never updated read from a shared base logit vector, so evaluation
never mutates the table.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, InputError

DEFAULT_T_MAX = 8


@dataclass(frozen=True)
class VocabSpec:
    tokens: tuple[str, ...]
    eos: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if len(self.tokens) < 2:
            raise ConfigError("vocabulary needs at least two tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigError("vocabulary symbols must be unique")
        if self.eos is not None and self.eos not in self.tokens:
            raise ConfigError(f"eos symbol {self.eos!r} not in vocabulary")

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def eos_id(self) -> int | None:
        return None if self.eos is None else self.tokens.index(self.eos)

    def encode(self, symbols: Iterable[str]) -> tuple[int, ...]:
        try:
            return tuple(self.tokens.index(s) for s in symbols)
        except ValueError as exc:
            raise InputError(f"unknown token in {list(symbols)!r}") from exc

    def decode(self, ids: Iterable[int]) -> tuple[str, ...]:
        return tuple(self.tokens[i] for i in ids)


class Context(NamedTuple):
    prompt_id: str
    prefix: tuple[int, ...] = ()


def logsumexp(x: np.ndarray) -> float:
    m = float(np.max(x))
    return m + float(np.log(np.sum(np.exp(x - m))))


def softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - np.max(x))
    return z / z.sum()


class GradientVector:
    """Sparse parameter-shaped vector: one length-V block per context.

    Missing contexts are zero. Supports the vector-space operations needed by
    the estimators and diagnostics.
    """

    __slots__ = ("V", "entries")

    def __init__(self, V: int, entries: dict[Context, np.ndarray] | None = None):
        self.V = V
        self.entries: dict[Context, np.ndarray] = {}
        for ctx, block in (entries or {}).items():
            block = np.asarray(block, dtype=np.float64)
            if block.shape != (V,):
                raise InputError(f"block for {ctx} has shape {block.shape}, expected ({V},)")
            self.entries[ctx] = block.copy()

    @classmethod
    def zeros(cls, V: int) -> GradientVector:
        return cls(V)

    def block(self, ctx: Context) -> np.ndarray:
        b = self.entries.get(ctx)
        return np.zeros(self.V) if b is None else b.copy()

    def contexts(self) -> list[Context]:
        return list(self.entries)

    def add_block(self, ctx: Context, block: np.ndarray, scale: float = 1.0) -> None:
        """In-place ``self[ctx] += scale * block``."""
        if ctx in self.entries:
            self.entries[ctx] = self.entries[ctx] + scale * block
        else:
            self.entries[ctx] = scale * np.asarray(block, dtype=np.float64)

    def restricted(self, contexts: Iterable[Context]) -> GradientVector:
        keep = set(contexts)
        return GradientVector(self.V, {c: b for c, b in self.entries.items() if c in keep})

    def _check(self, other: GradientVector) -> None:
        if not isinstance(other, GradientVector):
            raise TypeError(f"expected GradientVector, got {type(other).__name__}")
        if other.V != self.V:
            raise InputError("vocabulary size mismatch")

    def __add__(self, other: GradientVector) -> GradientVector:
        self._check(other)
        out = GradientVector(self.V, self.entries)
        for ctx, b in other.entries.items():
            out.add_block(ctx, b)
        return out

    def __sub__(self, other: GradientVector) -> GradientVector:
        return self + (-1.0) * other

    def __mul__(self, scale: float) -> GradientVector:
        return GradientVector(self.V, {c: scale * b for c, b in self.entries.items()})

    __rmul__ = __mul__

    def __neg__(self) -> GradientVector:
        return (-1.0) * self

    def dot(self, other: GradientVector) -> float:
        self._check(other)
        total = 0.0
        for ctx in sorted(set(self.entries) & set(other.entries)):
            total += float(self.entries[ctx] @ other.entries[ctx])
        return total

    def norm(self) -> float:
        return float(np.sqrt(sum(float(b @ b) for b in self.entries.values())))

    def max_abs(self) -> float:
        return max((float(np.max(np.abs(b))) for b in self.entries.values()), default=0.0)

    def allclose(self, other: GradientVector, atol: float = 1e-12) -> bool:
        return (self - other).max_abs() <= atol

    def __repr__(self) -> str:
        return f"GradientVector(V={self.V}, contexts={len(self.entries)}, norm={self.norm():.6g})"


@dataclass
class PolicyParams:
    """Logit table over contexts. Treat instances as immutable; updates return copies."""

    vocab: VocabSpec
    prompts: tuple[str, ...] = ("x",)
    base_logits: np.ndarray | None = None
    t_max: int = DEFAULT_T_MAX
    table: dict[Context, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.prompts = tuple(self.prompts)
        V = self.vocab.size
        if self.base_logits is None:
            self.base_logits = np.zeros(V)
        self.base_logits = np.asarray(self.base_logits, dtype=np.float64).copy()
        if self.base_logits.shape != (V,) or not np.all(np.isfinite(self.base_logits)):
            raise ConfigError(f"base logits must be {V} finite values")
        if self.t_max < 1:
            raise ConfigError("t_max must be positive")
        self.table = {c: np.asarray(v, dtype=np.float64).copy() for c, v in self.table.items()}
        for ctx in self.table:
            self._validate(ctx)

    @property
    def V(self) -> int:
        return self.vocab.size

    def _validate(self, ctx: Context) -> None:
        if ctx.prompt_id not in self.prompts:
            raise ConfigError(f"unknown prompt id {ctx.prompt_id!r}")
        if len(ctx.prefix) > self.t_max:
            raise InputError(f"prefix length {len(ctx.prefix)} exceeds T_max={self.t_max}")

    def logits(self, ctx: Context) -> np.ndarray:
        self._validate(ctx)
        v = self.table.get(ctx)
        return (self.base_logits if v is None else v).copy()

    def probs(self, ctx: Context) -> np.ndarray:
        return softmax(self.logits(ctx))

    def contexts(self) -> list[Context]:
        return list(self.table)

    def copy(self) -> PolicyParams:
        return PolicyParams(self.vocab, self.prompts, self.base_logits, self.t_max, self.table)

    def with_contexts(self, contexts: Iterable[Context]) -> PolicyParams:
        """Copy with the given contexts materialized in the table (values unchanged)."""
        out = self.copy()
        for ctx in contexts:
            if ctx not in out.table:
                out.table[ctx] = out.logits(ctx)
        return out

    def with_block(self, ctx: Context, logits: Sequence[float]) -> PolicyParams:
        out = self.copy()
        out._validate(ctx)
        block = np.asarray(logits, dtype=np.float64)
        if block.shape != (self.V,):
            raise InputError(f"expected {self.V} logits")
        out.table[ctx] = block.copy()
        return out


def _check_token(params: PolicyParams, token: int) -> None:
    if not 0 <= token < params.V:
        raise InputError(f"token id {token} outside vocabulary of size {params.V}")


def log_prob(params: PolicyParams, ctx: Context, token: int) -> float:
    _check_token(params, token)
    z = params.logits(ctx)
    return float(z[token]) - logsumexp(z)


def prefix_contexts(prompt_id: str, tokens: Sequence[int]) -> list[Context]:
    """Contexts visited while generating ``tokens``: one per step."""
    tokens = tuple(tokens)
    return [Context(prompt_id, tokens[:t]) for t in range(len(tokens))]


def token_log_probs(params: PolicyParams, prompt_id: str, tokens: Sequence[int]) -> np.ndarray:
    if len(tokens) == 0:
        raise InputError("empty token sequence")
    if len(tokens) > params.t_max:
        raise InputError(f"sequence length {len(tokens)} exceeds T_max={params.t_max}")
    return np.array([log_prob(params, ctx, a) for ctx, a in zip(prefix_contexts(prompt_id, tokens), tokens)])


def sequence_log_prob(params: PolicyParams, prompt_id: str, tokens: Sequence[int]) -> float:
    return float(np.sum(token_log_probs(params, prompt_id, tokens)))


def score_gradient(params: PolicyParams, ctx: Context, token: int) -> GradientVector:
    """Gradient of ``log pi(token | ctx)``: ``onehot(token) - softmax`` on the ctx block."""
    _check_token(params, token)
    block = -params.probs(ctx)
    block[token] += 1.0
    return GradientVector(params.V, {ctx: block})


def score_block(params: PolicyParams, ctx: Context, token: int) -> np.ndarray:
    _check_token(params, token)
    block = -params.probs(ctx)
    block[token] += 1.0
    return block


def ratio_gradient(params: PolicyParams, ctx: Context, token: int, old_logp: float) -> GradientVector:
    """Gradient of ``pi(token|ctx) / pi_old(token|ctx)`` (ratio times score)."""
    r = float(np.exp(log_prob(params, ctx, token) - old_logp))
    return r * score_gradient(params, ctx, token)


def fisher_matrix(params: PolicyParams, ctx: Context) -> np.ndarray:
    p = params.probs(ctx)
    return np.diag(p) - np.outer(p, p)


def kl_conditional(params_a: PolicyParams, params_b: PolicyParams, ctx: Context) -> float:
    """KL(pi_a(.|ctx) || pi_b(.|ctx))."""
    za, zb = params_a.logits(ctx), params_b.logits(ctx)
    pa, pb = softmax(za), softmax(zb)
    # work with the small logit difference directly so that nearby
    # distributions do not lose the O(eta^2) result to cancellation
    delta = za - zb
    delta = delta - float(pb @ delta)
    log_norm = float(np.log1p(pb @ np.expm1(delta)))
    kl = float(pa @ (delta - log_norm))
    return max(kl, 0.0)


def apply_update(params: PolicyParams, grad: GradientVector, eta: float) -> PolicyParams:
    """Return ``params + eta * grad`` as a new table."""
    if not np.isfinite(eta):
        raise InputError("step size must be finite")
    if grad.V != params.V:
        raise InputError("gradient/vocabulary size mismatch")
    out = params.copy()
    for ctx, block in grad.entries.items():
        out.table[ctx] = out.logits(ctx) + eta * block
        if not np.all(np.isfinite(out.table[ctx])):
            raise InputError(f"update produced non-finite logits at {ctx}")
    return out


def finite_diff_gradient(
    f: Callable[[PolicyParams], float],
    params: PolicyParams,
    step: float = 1e-5,
    contexts: Iterable[Context] | None = None,
) -> GradientVector:
    """Central differences of ``f`` over every logit of the given contexts.

    ``contexts`` defaults to the contexts stored in ``params``; pass the
    contexts a surrogate touches when the table is still sparse.
    """
    if step <= 0:
        raise InputError("finite-difference step must be positive")
    ctxs = list(dict.fromkeys(contexts)) if contexts is not None else params.contexts()
    base = params.with_contexts(ctxs)
    out = GradientVector(params.V)
    for ctx in ctxs:
        block = np.zeros(params.V)
        for k in range(params.V):
            plus, minus = base.copy(), base.copy()
            plus.table[ctx] = plus.table[ctx].copy()
            minus.table[ctx] = minus.table[ctx].copy()
            plus.table[ctx][k] += step
            minus.table[ctx][k] -= step
            block[k] = (f(plus) - f(minus)) / (2.0 * step)
        out.entries[ctx] = block
    return out
