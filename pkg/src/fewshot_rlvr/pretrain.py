"""Supervised warm start that turns a random toy policy into a "base model".

A pretrained VLM already knows how to answer, yet rarely does so reliably in
the tagged format.  The toy analog is taught a mixture:

* a bare answer (no tags) with probability ``bare_prob``; the answer is a
  uniformly random valid one and is unparseable, so it scores zero;
* otherwise a tagged completion whose first reasoning token is ``look``
  (followed by the correct answer) with probability ``look_prob``, or a
  guess filler followed by a random valid answer.

``look`` rows make up ``look_data_frac`` of each batch for sample
efficiency, and the loss on the switch token is importance-weighted so the
learned switch frequency is ``look_prob``.  Answer tokens after a guess filler
are up-weighted (``guess_answer_weight``) so that the guess path stays
image-blind.  RL can raise accuracy either by choosing ``look`` or by making
the guess path read the image; in practice the toy runs mostly do the latter.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .grpo import OptimState, adam_update
from .policy import COORD_STEP, EOS, ToyVLM, coord_token
from .rewards import BBox
from .taskgen import COUNT_WORDS, SCENE_CLASSES, Kind, Sample, render_pool

__all__ = ["PretrainConfig", "answer_tokens", "random_answer", "build_example", "pretrain_base"]

GUESS_FILLERS = ("guess", "hmm", "maybe", "think")


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 1500
    batch_rows: int = 128
    lr: float = 3e-3
    pool_size: int = 6000
    pool_seed: int = 9_000_017
    look_prob: float = 0.03
    look_data_frac: float = 0.8
    bare_prob: float = 0.15
    guess_answer_weight: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.look_prob < 1.0 or not 0.0 < self.look_data_frac < 1.0:
            raise ValueError("look probabilities must lie in (0, 1)")
        if not 0.0 <= self.bare_prob < 1.0:
            raise ValueError("bare_prob must lie in [0, 1)")
        if self.steps < 0 or self.batch_rows < 1 or self.pool_size < 3:
            raise ValueError("steps, batch_rows and pool_size must be positive")


def _bin(v: int) -> str:
    return coord_token(int(round(v / COORD_STEP)))


def answer_tokens(truth) -> list[str]:
    """Token strings spelling an answer; boxes become ``[[ x , y , x , y ]]``."""
    if isinstance(truth, BBox):
        out = ["[["]
        for i, v in enumerate(truth.as_tuple()):
            if i:
                out.append(",")
            out.append(_bin(v))
        return out + ["]]"]
    return [str(truth)]


def random_answer(sample: Sample, rng: np.random.Generator):
    """A uniformly random answer of the right type for ``sample``."""
    kind = Kind(sample.kind)
    if kind is Kind.CLS:
        return SCENE_CLASSES[int(rng.integers(len(SCENE_CLASSES)))]
    if kind is Kind.VG:
        x = np.sort(rng.integers(0, 101, size=2)) * COORD_STEP
        y = np.sort(rng.integers(0, 101, size=2)) * COORD_STEP
        return BBox(int(x[0]), int(y[0]), int(x[1]), int(y[1]))
    q = sample.query[1]
    if q == "count":
        return COUNT_WORDS[int(rng.integers(len(COUNT_WORDS)))]
    if q == "ruralurban":
        return ("rural", "urban")[int(rng.integers(2))]
    return ("yes", "no")[int(rng.integers(2))]


def build_example(sample: Sample, rng: np.random.Generator, cfg: PretrainConfig) -> tuple[list[str], np.ndarray]:
    """Target token strings for one sample plus per-token loss weights."""
    if rng.random() < cfg.bare_prob:
        toks = answer_tokens(random_answer(sample, rng)) + [EOS]
        return toks, np.ones(len(toks))
    look = rng.random() < cfg.look_data_frac
    if look:
        filler, answer = "look", sample.truth
        w_switch = cfg.look_prob / cfg.look_data_frac
    else:
        filler = GUESS_FILLERS[int(rng.integers(len(GUESS_FILLERS)))]
        answer = random_answer(sample, rng)
        w_switch = (1.0 - cfg.look_prob) / (1.0 - cfg.look_data_frac)
    toks = ["<reasoning>", filler, "</reasoning>", "<answer>"] + answer_tokens(answer) + ["</answer>", EOS]
    w = np.ones(len(toks))
    w[1] = w_switch
    if not look:
        # a heavier uniform target stops image features leaking into guesses
        w[4:-2] = cfg.guess_answer_weight
    return toks, w


def pretrain_base(
    model: ToyVLM,
    cfg: PretrainConfig = PretrainConfig(),
    pool: Sequence[Sample] | None = None,
    log=None,
) -> list[float]:
    """Train ``model`` in place on the mixture; returns the per-step loss trace."""
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    if pool is None:
        pool = render_pool(cfg.pool_size, cfg.pool_seed, prefix="pre")
    prompts = [model.encode_prompt(s.query) for s in pool]
    images = np.stack([s.image for s in pool])
    opt = OptimState.for_params(model.params, cfg.lr)
    losses = []
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        idx = rng.integers(len(pool), size=cfg.batch_rows)
        comps, weights = [], []
        for i in idx:
            toks, w = build_example(pool[i], rng, cfg)
            comps.append([model.vocab.id(t) for t in toks])
            weights.append(w)
        wmat = np.zeros((len(comps), max(len(c) for c in comps)))
        for r, w in enumerate(weights):
            wmat[r, : len(w)] = w
        # cosine decay keeps the end of training stable
        opt.lr = cfg.lr * 0.5 * (1 + np.cos(np.pi * step / max(cfg.steps, 1)))
        with Tape() as tape:
            lp, _ = model.batch_log_probs([prompts[i] for i in idx], images[idx], comps)
            loss = ad.neg(ad.sum(ad.mul(lp, wmat / wmat.sum())))
        ad.backward(loss, tape)
        adam_update(model.params, {k: p.grad for k, p in model.params.items()}, opt)
        model.zero_grad()
        losses.append(loss.item())
        if log is not None and (step % 100 == 0 or step == cfg.steps - 1):
            log(f"pretrain step {step} loss {loss.item():.4f} ({time.perf_counter() - t0:.0f}s)")
    return losses


def describe(cfg: PretrainConfig) -> dict:
    return asdict(cfg)
