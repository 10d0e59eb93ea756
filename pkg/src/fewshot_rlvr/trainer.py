"""GRPO training loop with metrics logging, checkpoints and exact resume."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .grpo import NonFiniteLossError, OptimState, RolloutGroup, grpo_step
from .policy import PolicyConfig, ToyVLM, Vocabulary
from .rewards import RewardConfig, score

__all__ = [
    "TrainConfig",
    "MetricsRow",
    "TrainResult",
    "TrainingHalted",
    "train",
    "resume",
    "policy_from_checkpoint",
    "base_checkpoint",
    "read_metrics",
    "checkpoint_name",
]

METRICS_FILE = "metrics.csv"
MANIFEST_FILE = "run_manifest.json"


class TrainingHalted(RuntimeError):
    """Raised after a non-finite loss; the halt checkpoint and diagnostics are on disk."""

    def __init__(self, message: str, checkpoint: Path, diagnostics: dict):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    group_size: int = 4
    train_temperature: float = 0.9
    lr: float = 1e-4
    beta: float = 0.001
    clip_eps: float = 0.2
    max_new_tokens: int = 64
    total_steps: int = 1000
    checkpoint_every: int = 100
    grad_accum: int = 1
    seed: int = 0
    std_floor: float = 1e-6
    reward_mode: str = "sum"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    log_wall_time: bool = True
    reward: RewardConfig = field(default_factory=RewardConfig)

    def __post_init__(self):
        if isinstance(self.reward, dict):
            object.__setattr__(self, "reward", RewardConfig(**self.reward))
        for name in ("batch_size", "group_size", "max_new_tokens", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.group_size < 2:
            raise ValueError("group_size must be at least 2 for group-normalised advantages")
        if not 1 <= self.grad_accum <= 8:
            raise ValueError("grad_accum must lie in [1, 8]")
        if self.batch_size % self.grad_accum:
            raise ValueError("batch_size must be divisible by grad_accum")
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")
        if self.train_temperature < 0 or self.lr <= 0 or self.beta < 0 or not 0 < self.clip_eps < 1:
            raise ValueError("temperature, lr, beta or clip_eps out of range")
        if self.reward_mode not in ("sum", "per_channel"):
            raise ValueError("reward_mode must be 'sum' or 'per_channel'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["reward"] = asdict(self.reward)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


@dataclass(frozen=True)
class MetricsRow:
    """One line of ``metrics.csv``.

    ``mean_kl`` is the exact full-vocabulary KL to the reference at the sampled
    positions (token mean per completion, then mean over completions); the
    loss itself uses the sampled-token k3 estimate, whose batch mean is too
    heavy-tailed to compare runs with.
    """

    step: int
    mean_total_reward: float
    mean_format_reward: float
    mean_accuracy_reward: float
    mean_completion_length: float
    mean_kl: float
    pg_loss: float
    wall_ms: float

    @classmethod
    def header(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def values(self) -> list[str]:
        return [str(self.step)] + [repr(float(getattr(self, n))) for n in self.header()[1:]]


@dataclass
class TrainResult:
    out_dir: Path
    metrics: list[MetricsRow]
    checkpoints: list[Path]
    policy: ToyVLM


def checkpoint_name(step: int) -> str:
    return f"ckpt_{step:06d}.ckpt"


def read_metrics(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MetricsRow.header():
            raise ValueError(f"{path}: unexpected metrics header {header}")
        return [MetricsRow(int(r[0]), *(float(x) for x in r[1:])) for r in reader if r]


def _state_tensors(policy: ToyVLM, reference: ToyVLM, opt: OptimState) -> dict[str, np.ndarray]:
    t = {}
    for prefix, src in (("policy", policy.state_dict()), ("ref", reference.state_dict())):
        for k, v in src.items():
            t[f"{prefix}.{k}"] = v
    for k in policy.params:
        t[f"adam.m.{k}"] = opt.m[k]
        t[f"adam.v.{k}"] = opt.v[k]
    return t


def policy_from_checkpoint(ckpt: Checkpoint | str | Path, which: str = "policy") -> ToyVLM:
    """Rebuild a :class:`ToyVLM` from the ``which.*`` tensors of a checkpoint."""
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    model = ToyVLM(PolicyConfig(**ckpt.config["policy"]), Vocabulary(ckpt.vocab))
    model.load_state_dict(ckpt.group(which))
    return model


def base_checkpoint(policy: ToyVLM, meta: dict | None = None) -> Checkpoint:
    """Container for a bare policy (no optimiser or reference state)."""
    tensors = {f"policy.{k}": v for k, v in policy.state_dict().items()}
    return Checkpoint(tensors, {"policy": policy.config.to_dict()}, policy.vocab.tokens, 0, None, meta or {})


def _rollout_uniforms(seed: int, step: int, index: int, g: int, budget: int) -> np.ndarray:
    # one independent stream per (seed, step, prompt index)
    return np.random.default_rng([seed, step, index]).random((g, budget))


def _collect(policy: ToyVLM, samples, prompts, images, cfg: TrainConfig, step: int):
    g = cfg.group_size
    n = len(samples)
    uniforms = np.concatenate([_rollout_uniforms(cfg.seed, step, i, g, cfg.max_new_tokens) for i in range(n)])
    comps = policy.sample_batch(
        [p for p in prompts for _ in range(g)],
        np.repeat(images, g, axis=0),
        cfg.train_temperature,
        cfg.max_new_tokens,
        uniforms=uniforms,
    )
    groups, fmt, acc, tot, lengths = [], [], [], [], []
    for i, s in enumerate(samples):
        cs = comps[i * g: (i + 1) * g]
        br = [score(s, c.text, cfg.reward) for c in cs]
        groups.append(
            RolloutGroup(
                prompt_id=f"{i}:{s.id}",
                prompt_tokens=prompts[i],
                image=images[i],
                completions=cs,
                rewards=[b.total for b in br],
                format_rewards=[float(b.format) for b in br],
                accuracy_rewards=[b.accuracy for b in br],
            )
        )
        fmt += [b.format for b in br]
        acc += [b.accuracy for b in br]
        tot += [b.total for b in br]
        lengths += [c.length for c in cs]
    stats = (float(np.mean(tot)), float(np.mean(fmt)), float(np.mean(acc)), float(np.mean(lengths)))
    return groups, stats


def _manifest(out_dir: Path, cfg: TrainConfig, dataset, policy: ToyVLM, extra: dict) -> None:
    data = {
        "version": f"v{__version__}",
        "train_config": cfg.to_dict(),
        "policy_config": policy.config.to_dict(),
        "dataset_hash": getattr(dataset, "content_hash", lambda: None)(),
        "dataset_size": len(dataset),
        "metrics": METRICS_FILE,
        **extra,
    }
    (out_dir / MANIFEST_FILE).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def train(
    config: TrainConfig,
    dataset,
    out_dir,
    policy: ToyVLM | None = None,
    *,
    log: Callable[[str], None] | None = None,
    _resume: Checkpoint | None = None,
) -> TrainResult:
    """Run ``config.total_steps`` GRPO steps over ``dataset`` (one full batch per step).

    ``policy`` is the starting (base) policy; its copy becomes the frozen
    reference.  Writes ``metrics.csv``, ``run_manifest.json`` and a checkpoint
    at step 0 and every ``checkpoint_every`` steps into ``out_dir``.
    """
    samples = list(dataset)
    if len(samples) != config.batch_size:
        raise ValueError(f"dataset holds {len(samples)} samples but batch_size is {config.batch_size}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds_hash = dataset.content_hash() if hasattr(dataset, "content_hash") else None
    provenance: list[dict] = []

    if _resume is not None:
        policy = policy_from_checkpoint(_resume, "policy")
        reference = policy_from_checkpoint(_resume, "ref")
        meta = _resume.meta
        opt = OptimState(
            lr=config.lr, beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps, step=meta["adam_step"]
        )
        opt.m = {k: v.copy() for k, v in _resume.group("adam.m").items()}
        opt.v = {k: v.copy() for k, v in _resume.group("adam.v").items()}
        start = _resume.step
        provenance = list(meta.get("provenance", []))
    else:
        if policy is None:
            policy = ToyVLM(PolicyConfig(seed=config.seed))
        else:
            policy = policy.copy()
        reference = policy.copy()
        opt = OptimState.for_params(
            policy.params, config.lr, beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps
        )
        start = 0
    budget = policy.config.patch_count + len(policy.encode_prompt(samples[0].query)) + config.max_new_tokens
    if budget > policy.config.max_seq_len:
        raise ValueError(f"max_new_tokens {config.max_new_tokens} exceeds the policy's max_seq_len budget")

    prompts = [policy.encode_prompt(s.query) for s in samples]
    images = np.stack([s.image for s in samples])
    metrics_path = out / METRICS_FILE
    rows: list[MetricsRow] = []
    if _resume is not None and metrics_path.exists():
        rows = [r for r in read_metrics(metrics_path) if r.step <= start]
    checkpoints: list[Path] = []

    def write_ckpt(step: int, name: str | None = None, extra: dict | None = None) -> Path:
        meta = {
            "adam_step": opt.step,
            "dataset_hash": ds_hash,
            "provenance": provenance,
            "train_config": config.to_dict(),
            "version": f"v{__version__}",
            **(extra or {}),
        }
        ck = Checkpoint(
            _state_tensors(policy, reference, opt),
            {"policy": policy.config.to_dict(), "train": config.to_dict()},
            policy.vocab.tokens,
            step,
            {"scheme": "default_rng([seed, step, prompt_index])", "seed": config.seed, "next_step": step + 1},
            meta,
        )
        path = out / (name or checkpoint_name(step))
        save_checkpoint(path, ck)
        return path

    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MetricsRow.header())
        for r in rows:
            writer.writerow(r.values())
        fh.flush()
        if start == 0:
            checkpoints.append(write_ckpt(0))
        _manifest(out, config, dataset, policy, {"start_step": start, "provenance": provenance})
        for step in range(start + 1, config.total_steps + 1):
            t0 = time.perf_counter()
            groups, (tot, fmt, acc, length) = _collect(policy, samples, prompts, images, config, step)
            try:
                terms = grpo_step(policy, reference, groups, config, opt, exact_kl_stat=True)
            except NonFiniteLossError as exc:
                path = write_ckpt(step - 1, f"halt_{step:06d}.ckpt", {"halted_at": step})
                diag = dict(exc.diagnostics, step=step, mean_total_reward=tot, mean_completion_length=length)
                (out / "halt_diagnostics.json").write_text(json.dumps(diag, indent=2, sort_keys=True, default=str) + "\n")
                raise TrainingHalted(f"step {step}: {exc}", path, diag) from exc
            wall = (time.perf_counter() - t0) * 1000.0 if config.log_wall_time else 0.0
            row = MetricsRow(step, tot, fmt, acc, length, terms.kl_exact, terms.pg_loss, wall)
            rows.append(row)
            writer.writerow(row.values())
            fh.flush()
            if log is not None:
                log(
                    f"step {step} reward {tot:.3f} format {fmt:.3f} acc {acc:.3f} "
                    f"len {length:.1f} kl {terms.kl_exact:.2e} ({wall:.0f} ms)"
                )
            if step % config.checkpoint_every == 0:
                checkpoints.append(write_ckpt(step))
    return TrainResult(out, rows, checkpoints, policy)


def resume(checkpoint, config: TrainConfig | None, dataset, out_dir, *, log=None) -> TrainResult:
    """Continue a run from ``checkpoint`` up to ``config.total_steps``.

    The checkpoint's SHA-256 trailer must verify.  Config fields may change
    (e.g. ``beta``); every change is recorded in the checkpoint provenance.
    """
    ck = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    if "adam_step" not in ck.meta:
        raise ValueError("checkpoint holds no optimiser state; it is not a training checkpoint")
    saved = TrainConfig.from_dict(ck.meta["train_config"])
    config = config or saved
    ds_hash = dataset.content_hash() if hasattr(dataset, "content_hash") else None
    if ck.meta.get("dataset_hash") and ds_hash and ck.meta["dataset_hash"] != ds_hash:
        raise ValueError("dataset differs from the one the checkpoint was trained on")
    old, new = saved.to_dict(), config.to_dict()
    changed = {k: [old[k], new[k]] for k in new if old.get(k) != new[k] and k != "total_steps"}
    if changed:
        ck.meta = dict(ck.meta, provenance=list(ck.meta.get("provenance", [])) + [{"resumed_at": ck.step, "changed": changed}])
    return train(config, dataset, out_dir, log=log, _resume=ck)
