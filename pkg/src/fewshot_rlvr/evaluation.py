"""Held-out evaluation: per-kind accuracy, grounding precision@0.5, sweeps, comparisons.

Every eval item gets one completion drawn at temperature 1 from a fixed
seed.  Accuracies are averaged over samples (not over question sub-types).
A kind absent from the eval set is reported as ``None`` (printed ``N/A``).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint
from .rewards import RewardConfig, iou, parse_answer, score
from .taskgen import Kind, pool_hash

__all__ = [
    "EvalReport",
    "SweepResult",
    "Comparison",
    "METRICS",
    "evaluate",
    "sweep",
    "compare",
    "precision_at",
]

METRICS = ("cls_accuracy", "vqa_accuracy", "vg_precision_at_50", "format_rate", "mean_total_reward")
PRECISION_IOU = 0.5
EVAL_TOKENS = 32


@dataclass
class EvalReport:
    checkpoint_step: int | None
    cls_accuracy: float | None
    vqa_accuracy: float | None
    vg_precision_at_50: float | None
    format_rate: float
    mean_total_reward: float
    counts: dict[str, int]
    unparseable: dict[str, int]
    seed: int
    temperature: float
    eval_set_hash: str = ""
    label: str = ""
    predictions: list[dict] = field(default_factory=list, repr=False)

    def metric(self, name: str) -> float | None:
        if name not in METRICS:
            raise KeyError(name)
        return getattr(self, name)

    def to_row(self) -> dict:
        row = {"label": self.label, "step": self.checkpoint_step}
        for m in METRICS:
            row[m] = self.metric(m)
        for k in ("CLS", "VQA", "VG"):
            row[f"n_{k}"] = self.counts.get(k, 0)
            row[f"unparseable_{k}"] = self.unparseable.get(k, 0)
        row["seed"] = self.seed
        return row

    def save_predictions(self, path) -> None:
        """Per-sample audit log, one JSON object per line."""
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.predictions:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def precision_at(ious: Sequence[float], threshold: float = PRECISION_IOU) -> float:
    """Fraction of predictions whose IoU reaches ``threshold``."""
    if len(ious) == 0:
        raise ValueError("no IoU values")
    return float(np.mean(np.asarray(ious) >= threshold))


def _resolve_policy(checkpoint):
    from .trainer import policy_from_checkpoint

    if isinstance(checkpoint, (str, Path)):
        checkpoint = load_checkpoint(checkpoint)
    if isinstance(checkpoint, Checkpoint):
        return policy_from_checkpoint(checkpoint), checkpoint.step
    return checkpoint, None


def evaluate(
    checkpoint,
    eval_set: Sequence,
    eval_temperature: float = 1.0,
    *,
    seed: int = 0,
    reward_cfg: RewardConfig = RewardConfig(),
    max_new_tokens: int = EVAL_TOKENS,
    step: int | None = None,
    chunk: int = 512,
) -> EvalReport:
    """Score one completion per sample.

    ``checkpoint`` is a checkpoint path, a :class:`Checkpoint`, or any policy
    object with ``encode_prompt`` and ``sample_batch``.
    """
    samples = list(eval_set)
    if not samples:
        raise ValueError("eval set is empty")
    policy, ck_step = _resolve_policy(checkpoint)
    step = ck_step if step is None else step
    uniforms = np.random.default_rng([seed, 0xE7A1]).random((len(samples), max_new_tokens))
    completions = []
    for lo in range(0, len(samples), chunk):
        part = samples[lo: lo + chunk]
        completions += policy.sample_batch(
            [policy.encode_prompt(s.query) for s in part],
            np.stack([s.image for s in part]),
            eval_temperature,
            max_new_tokens,
            uniforms=uniforms[lo: lo + len(part)],
        )
    hits: dict[str, list[float]] = {"CLS": [], "VQA": [], "VG": []}
    unparseable = {"CLS": 0, "VQA": 0, "VG": 0}
    fmts, totals, preds = [], [], []
    for s, c in zip(samples, completions):
        kind = Kind(s.kind).value
        b = score(s, c.text, reward_cfg)
        parsed = parse_answer(c.text)
        rec = {"id": s.id, "kind": kind, "completion": c.text, "format": b.format, "accuracy": b.accuracy, "total": b.total}
        if kind == "VG":
            v = iou(parsed.bbox, s.truth) if parsed.bbox is not None else 0.0
            bad = parsed.bbox is None
            hits[kind].append(float(v >= PRECISION_IOU))
            rec["iou"] = v
        else:
            bad = parsed.answer_text is None
            hits[kind].append(b.accuracy)
        unparseable[kind] += int(bad)
        fmts.append(b.format)
        totals.append(b.total)
        preds.append(rec)
    frac = {k: (float(np.mean(v)) if v else None) for k, v in hits.items()}
    return EvalReport(
        checkpoint_step=step,
        cls_accuracy=frac["CLS"],
        vqa_accuracy=frac["VQA"],
        vg_precision_at_50=frac["VG"],
        format_rate=float(np.mean(fmts)),
        mean_total_reward=float(np.mean(totals)),
        counts={k: len(v) for k, v in hits.items()},
        unparseable=unparseable,
        seed=seed,
        temperature=eval_temperature,
        eval_set_hash=pool_hash(samples),
        predictions=preds,
    )


@dataclass
class SweepResult:
    reports: list[EvalReport]
    best: dict[str, EvalReport | None]

    def table(self) -> "Comparison":
        return compare(self.reports, labels=[f"step {r.checkpoint_step}" for r in self.reports], deltas=False)


def best_per_metric(reports: Sequence[EvalReport]) -> dict[str, EvalReport | None]:
    """Argmax per metric; ties go to the earliest step, N/A values never win."""
    ordered = sorted(reports, key=lambda r: (r.checkpoint_step is None, r.checkpoint_step or 0))
    best: dict[str, EvalReport | None] = {}
    for m in METRICS:
        winner = None
        for r in ordered:
            v = r.metric(m)
            if v is not None and (winner is None or v > winner.metric(m)):
                winner = r
        best[m] = winner
    return best


def sweep(checkpoint_dir, eval_set: Sequence, **kw) -> SweepResult:
    """Evaluate every ``ckpt_*.ckpt`` in ``checkpoint_dir``."""
    paths = sorted(Path(checkpoint_dir).glob("ckpt_*.ckpt"))
    if not paths:
        raise FileNotFoundError(f"no checkpoints in {checkpoint_dir}")
    reports = [evaluate(p, eval_set, **kw) for p in paths]
    reports.sort(key=lambda r: r.checkpoint_step)
    return SweepResult(reports, best_per_metric(reports))


def _fmt(v) -> str:
    if v is None:
        return "N/A"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


@dataclass
class Comparison:
    columns: list[str]
    rows: list[list]
    warnings: list[str]

    def to_text(self) -> str:
        cells = [self.columns] + [[_fmt(v) for v in r] for r in self.rows]
        widths = [max(len(row[i]) for row in cells) for i in range(len(self.columns))]
        lines = [f"# warning: {w}" for w in self.warnings]
        for row in cells:
            lines.append("  ".join(c.rjust(w) for c, w in zip(row, widths)))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        for w in self.warnings:
            buf.write(f"# warning: {w}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for r in self.rows:
            writer.writerow(["N/A" if v is None else v for v in r])
        return buf.getvalue()


def compare(reports: Sequence[EvalReport], labels: Sequence[str] | None = None, deltas: bool = True) -> Comparison:
    """Aligned table of metrics; with ``deltas`` each metric also gets a column relative to the first report."""
    if len(reports) < 1 or (deltas and len(reports) < 2):
        raise ValueError("compare needs at least two reports")
    labels = list(labels) if labels is not None else [r.label or f"run{i}" for i, r in enumerate(reports)]
    cols = ["label", "step"]
    for m in METRICS:
        cols.append(m)
        if deltas:
            cols.append(f"d_{m}")
    cols += ["n_CLS", "n_VQA", "n_VG"]
    base = reports[0]
    rows = []
    for lab, r in zip(labels, reports):
        row = [lab, r.checkpoint_step]
        for m in METRICS:
            v = r.metric(m)
            row.append(v)
            if deltas:
                b = base.metric(m)
                row.append(None if v is None or b is None else v - b)
        row += [r.counts.get(k, 0) for k in ("CLS", "VQA", "VG")]
        rows.append(row)
    warnings = []
    if len({r.eval_set_hash for r in reports}) > 1:
        warnings.append("reports were computed on different eval sets")
    return Comparison(cols, rows, warnings)
