"""Group-relative policy optimisation: advantages, clipped surrogate, k3 KL, Adam.

The policy passed to :func:`grpo_step` only needs a ``params`` mapping of
leaf tensors and a ``batch_log_probs(prompts, images, completions,
temperature)`` method returning ``(Tensor[N, T], mask[N, T])``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

__all__ = [
    "RolloutGroup",
    "AdvantageSet",
    "LossTerms",
    "OptimState",
    "NonFiniteLossError",
    "group_advantages",
    "pg_loss",
    "kl_penalty",
    "adam_update",
    "batch_objective",
    "exact_kl",
    "grpo_step",
]

STD_FLOOR = 1e-6


class NonFiniteLossError(FloatingPointError):
    """Loss or gradient became NaN/inf; carries a diagnostic dictionary."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class RolloutGroup:
    """The G completions sampled for one prompt, with their rewards."""

    prompt_id: str
    prompt_tokens: list[int]
    image: np.ndarray
    completions: list  # list[Completion]
    rewards: list[float]
    old_logprobs: list[np.ndarray] = field(default_factory=list)
    format_rewards: list[float] | None = None
    accuracy_rewards: list[float] | None = None

    def __post_init__(self):
        if not self.old_logprobs:
            self.old_logprobs = [np.asarray(c.token_logprobs, dtype=np.float64) for c in self.completions]
        g = len(self.completions)
        if len(self.rewards) != g or len(self.old_logprobs) != g:
            raise ValueError(
                f"group {self.prompt_id}: {g} completions, {len(self.rewards)} rewards, "
                f"{len(self.old_logprobs)} log-prob arrays"
            )
        for c, lp in zip(self.completions, self.old_logprobs):
            if len(lp) != len(c.token_ids):
                raise ValueError(f"group {self.prompt_id}: old log-probs not aligned with tokens")

    @property
    def size(self) -> int:
        return len(self.completions)


@dataclass(frozen=True)
class AdvantageSet:
    advantages: np.ndarray

    def __len__(self) -> int:
        return len(self.advantages)


@dataclass(frozen=True)
class LossTerms:
    pg_loss: float
    kl_loss: float
    total: float
    beta: float
    grad_norm: float = 0.0
    kl_exact: float | None = None


@dataclass
class OptimState:
    """Adam moments keyed by parameter name."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor], lr: float, **kw) -> "OptimState":
        st = cls(lr=lr, **kw)
        for k, p in params.items():
            st.m[k] = np.zeros_like(p.data)
            st.v[k] = np.zeros_like(p.data)
        return st


def group_advantages(rewards: Sequence[float], std_floor: float = STD_FLOOR) -> AdvantageSet:
    """``(r - mean) / max(std, std_floor)`` with population std; exact zeros for equal rewards."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError(f"group size must be at least 2, got {r.size}")
    if not np.all(np.isfinite(r)):
        raise ValueError("rewards must be finite")
    if np.all(r == r[0]):
        return AdvantageSet(np.zeros_like(r))
    centred = r - r.mean()
    return AdvantageSet(centred / max(float(np.sqrt(np.mean(centred**2))), std_floor))


def _token_weights(mask: np.ndarray) -> np.ndarray:
    """Weights giving a per-completion token mean followed by a mean over completions."""
    lengths = np.maximum(mask.sum(axis=1, keepdims=True), 1)
    return mask / lengths / mask.shape[0]


def _aligned(new: Tensor, other: np.ndarray, mask: np.ndarray | None, what: str):
    other = np.asarray(other, dtype=np.float64)
    if new.ndim != 2 or other.shape != new.shape:
        raise ValueError(f"{what}: shapes {new.shape} and {other.shape} are not token-aligned")
    if mask is None:
        mask = np.ones(new.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != new.shape:
        raise ValueError(f"{what}: mask shape {mask.shape} != {new.shape}")
    return other, mask


def pg_loss(
    new_logprobs: Tensor,
    old_logprobs: np.ndarray,
    advantages: np.ndarray,
    clip_eps: float = 0.2,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Clipped surrogate ``-mean_i mean_t min(rho A, clip(rho) A)``, ``rho = exp(new - old)``.

    ``new_logprobs`` is ``[N, T]`` (padded, on the tape); ``advantages`` has
    one value per row and is shared by all of its tokens.
    """
    new_logprobs = ad._as_tensor(new_logprobs)
    old, mask = _aligned(new_logprobs, old_logprobs, mask, "pg_loss")
    adv = np.asarray(advantages, dtype=np.float64)
    if adv.shape != (new_logprobs.shape[0],):
        raise ValueError(f"pg_loss: {adv.shape[0] if adv.ndim else 0} advantages for {new_logprobs.shape[0]} rows")
    a = np.broadcast_to(adv[:, None], new_logprobs.shape)
    old = np.where(mask, old, 0.0)
    ratio = ad.exp(ad.sub(ad.masked_fill(new_logprobs, ~mask, 0.0), old))
    surrogate = ad.minimum(ad.mul(ratio, a), ad.mul(ad.clip(ratio, 1 - clip_eps, 1 + clip_eps), a))
    return ad.neg(ad.sum(ad.mul(surrogate, _token_weights(mask))))


def kl_penalty(new_logprobs: Tensor, ref_logprobs: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Token-mean k3 estimator ``exp(ref - new) - (ref - new) - 1``."""
    new_logprobs = ad._as_tensor(new_logprobs)
    ref, mask = _aligned(new_logprobs, ref_logprobs, mask, "kl_penalty")
    d = ad.sub(np.where(mask, ref, 0.0), ad.masked_fill(new_logprobs, ~mask, 0.0))
    k3 = ad.sub(ad.sub(ad.exp(d), d), 1.0)
    return ad.sum(ad.mul(k3, _token_weights(mask)))


def adam_update(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimState) -> None:
    """One bias-corrected Adam step, in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p.data)
        if k not in state.m:
            state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
        m = state.m[k] = state.beta1 * state.m[k] + (1 - state.beta1) * g
        v = state.v[k] = state.beta2 * state.v[k] + (1 - state.beta2) * g * g
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def _advantages_for(group: RolloutGroup, cfg: Any) -> np.ndarray:
    floor = getattr(cfg, "std_floor", STD_FLOOR)
    if getattr(cfg, "reward_mode", "sum") == "per_channel":
        if group.format_rewards is None or group.accuracy_rewards is None:
            raise ValueError("per_channel reward mode needs format and accuracy rewards")
        rc = getattr(cfg, "reward", None)
        fw = rc.format_weight if rc is not None else 1.0
        aw = rc.accuracy_weight if rc is not None else 1.0
        return (
            fw * group_advantages(group.format_rewards, floor).advantages
            + aw * group_advantages(group.accuracy_rewards, floor).advantages
        )
    return group_advantages(group.rewards, floor).advantages


def _flatten(groups: Sequence[RolloutGroup]):
    prompts, images, comps, old = [], [], [], []
    for g in groups:
        for c, lp in zip(g.completions, g.old_logprobs):
            prompts.append(g.prompt_tokens)
            images.append(g.image)
            comps.append(list(c.token_ids))
            old.append(lp)
    tmax = max(max(len(c) for c in comps), 1)
    old_arr = np.zeros((len(comps), tmax))
    for i, lp in enumerate(old):
        old_arr[i, : len(lp)] = lp
    return prompts, np.stack(images), comps, old_arr


def _pad_to(arr: np.ndarray, width: int) -> np.ndarray:
    if arr.shape[1] == width:
        return arr
    out = np.zeros((arr.shape[0], width), dtype=arr.dtype)
    out[:, : arr.shape[1]] = arr
    return out


def exact_kl(new_full: np.ndarray, ref_full: np.ndarray, mask: np.ndarray) -> float:
    """KL(new || ref) summed over the vocabulary, with the same token weighting as :func:`kl_penalty`."""
    p = np.exp(new_full)
    per_pos = np.sum(p * (new_full - ref_full), axis=-1)
    return float(np.sum(np.where(mask, per_pos, 0.0) * _token_weights(mask)))


def batch_objective(
    policy, reference, groups: Sequence[RolloutGroup], cfg: Any, stats: dict | None = None
) -> tuple[Tensor, Tensor]:
    """``(pg_loss, kl_loss)`` tensors for a list of groups, recorded on the active tape.

    If ``stats`` is a dict, ``stats["kl_exact"]`` receives the full-vocabulary
    KL at the sampled positions.  Only the sampled-token k3 value enters the loss.
    """
    temperature = float(getattr(cfg, "train_temperature", 1.0))
    prompts, images, comps, old = _flatten(groups)
    adv = np.concatenate([_advantages_for(g, cfg) for g in groups])
    if stats is None:
        ref_lp, _ = reference.batch_log_probs(prompts, images, comps, temperature)
        new_lp, mask = policy.batch_log_probs(prompts, images, comps, temperature)
    else:
        ref_lp, _, ref_full = reference.batch_log_probs(prompts, images, comps, temperature, full=True)
        new_lp, mask, new_full = policy.batch_log_probs(prompts, images, comps, temperature, full=True)
        stats["kl_exact"] = exact_kl(new_full, ref_full, mask)
    width = new_lp.shape[1]
    pg = pg_loss(new_lp, _pad_to(old, width), adv, float(getattr(cfg, "clip_eps", 0.2)), mask)
    kl = kl_penalty(new_lp, _pad_to(ref_lp.data, width), mask)
    return pg, kl


def grpo_step(
    policy, reference, batch: Sequence[RolloutGroup], cfg: Any, opt: OptimState, exact_kl_stat: bool = False
) -> LossTerms:
    """Compute ``pg + beta * kl`` over the batch, backpropagate, apply one Adam step.

    ``cfg`` supplies ``beta``, ``clip_eps``, ``grad_accum`` and
    ``train_temperature`` (missing attributes fall back to 0.001, 0.2, 1, 1.0).
    Groups are split into ``grad_accum`` contiguous chunks in batch order and
    their gradients summed in that order.  On a non-finite loss or gradient
    the parameters are left untouched and :class:`NonFiniteLossError` raised.
    With ``exact_kl_stat`` the returned terms also carry the full-vocabulary
    KL (see :func:`exact_kl`); the policies must accept ``full=True``.
    """
    if not batch:
        raise ValueError("grpo_step needs a non-empty batch")
    beta = float(getattr(cfg, "beta", 0.001))
    accum = int(getattr(cfg, "grad_accum", 1))
    if accum < 1:
        raise ValueError("grad_accum must be at least 1")

    params = policy.params
    for p in params.values():
        p.grad = None
    n_total = sum(g.size for g in batch)
    chunks = [list(c) for c in np.array_split(np.arange(len(batch)), min(accum, len(batch))) if len(c)]
    pg_sum = kl_sum = 0.0
    exact = 0.0 if exact_kl_stat else None
    for idx in chunks:
        groups = [batch[i] for i in idx]
        share = sum(g.size for g in groups) / n_total
        stats = {} if exact_kl_stat else None
        with Tape() as tape:
            pg, kl = batch_objective(policy, reference, groups, cfg, stats)
            loss = ad.mul(ad.add(pg, ad.mul(kl, beta)), share)
        pg_sum += share * pg.item()
        kl_sum += share * kl.item()
        if stats is not None:
            exact += share * stats["kl_exact"]
        if not math.isfinite(loss.item()):
            break
        if loss.requires_grad:
            ad.backward(loss, tape)

    total = pg_sum + beta * kl_sum
    grads = {k: p.grad for k, p in params.items() if p.grad is not None}
    sq = float(sum(np.sum(g * g) for g in grads.values()))
    if not (math.isfinite(total) and math.isfinite(sq)):
        bad = sorted(k for k, g in grads.items() if not np.all(np.isfinite(g)))
        for p in params.values():
            p.grad = None
        raise NonFiniteLossError(
            f"non-finite loss (pg={pg_sum}, kl={kl_sum}); parameters left unchanged",
            {"pg_loss": pg_sum, "kl_loss": kl_sum, "beta": beta, "nonfinite_grads": bad, "optimizer_step": opt.step},
        )
    adam_update(params, grads, opt)
    for p in params.values():
        p.grad = None
    return LossTerms(pg_sum, kl_sum, total, beta, math.sqrt(sq), exact)
