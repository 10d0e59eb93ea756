"""Toy vision-language policy: linear patch encoder + small causal transformer.

Visual tokens (one per image patch) are prepended to the text tokens.  The
decoder is a pre-norm transformer with learned positional embeddings over a
compact vocabulary in which the four reasoning/answer tags are single tokens.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .taskgen import COLORS, COUNT_WORDS, SCENE_CLASSES, SHAPES

__all__ = [
    "Vocabulary",
    "build_vocabulary",
    "PolicyConfig",
    "Completion",
    "ToyVLM",
    "coord_token",
    "REASONING_FILLERS",
]

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
TAG_TOKENS = ("<reasoning>", "</reasoning>", "<answer>", "</answer>")
QUERY_WORDS = ("CLS", "VQA", "VG", "present", "count", "more", "ruralurban")
ANSWER_WORDS = SCENE_CLASSES + ("yes", "no", "rural", "urban") + COUNT_WORDS
BOX_PUNCT = ("[[", ",", "]]")
REASONING_FILLERS = ("look", "guess", "hmm", "maybe", "think", "see", "so", "then")
COORD_BINS = 101
COORD_STEP = 10
QUERY_LEN = 4


def coord_token(k: int) -> str:
    """Token for coordinate bin ``k`` (integer value ``10 * k``)."""
    if not 0 <= k < COORD_BINS:
        raise ValueError(f"coordinate bin out of range: {k}")
    return str(COORD_STEP * k)


class Vocabulary:
    """Ordered, unique token strings; text is tokens joined by single spaces."""

    CONTROL = (PAD, BOS, EOS)

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        if not tokens:
            raise ValueError("vocabulary must not be empty")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self.index[token]

    @property
    def pad(self) -> int:
        return self.index.get(PAD, 0)

    @property
    def bos(self) -> int:
        return self.index[BOS]

    @property
    def eos(self) -> int:
        return self.index[EOS]

    def coord_bin(self, token_id: int) -> int | None:
        tok = self.tokens[token_id]
        if tok.isdigit():
            return int(tok) // COORD_STEP
        return None

    def encode(self, text: str) -> list[int]:
        if not text:
            return []
        try:
            return [self.index[t] for t in text.split(" ")]
        except KeyError as exc:
            raise ValueError(f"token {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Sequence[int]) -> str:
        """Join token strings with single spaces, dropping pad/bos/eos."""
        skip = {self.index[t] for t in self.CONTROL if t in self.index}
        return " ".join(self.tokens[i] for i in ids if i not in skip)


def build_vocabulary() -> Vocabulary:
    coords = tuple(coord_token(k) for k in range(COORD_BINS))
    return Vocabulary(
        (PAD, BOS, EOS)
        + TAG_TOKENS
        + QUERY_WORDS
        + SHAPES
        + COLORS
        + ANSWER_WORDS
        + BOX_PUNCT
        + REASONING_FILLERS
        + coords
    )


@dataclass(frozen=True)
class PolicyConfig:
    embed_dim: int = 32
    num_layers: int = 2
    num_heads: int = 2
    max_seq_len: int = 96
    patch_count: int = 16
    image_size: int = 64
    mlp_ratio: int = 4
    seed: int = 0

    def __post_init__(self):
        for name in ("embed_dim", "num_layers", "num_heads", "max_seq_len", "patch_count", "image_size", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        side = math.isqrt(self.patch_count)
        if side * side != self.patch_count or self.image_size % side:
            raise ValueError(
                f"a {self.image_size}x{self.image_size} raster cannot be cut into "
                f"{self.patch_count} equal square patches"
            )

    @property
    def patch_side(self) -> int:
        return self.image_size // math.isqrt(self.patch_count)

    @property
    def patch_pixels(self) -> int:
        return self.patch_side**2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Completion:
    token_ids: list[int]
    text: str
    token_logprobs: np.ndarray
    temperature: float = 1.0

    @property
    def length(self) -> int:
        return len(self.token_ids)


def _patchify(images: np.ndarray, cfg: PolicyConfig) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    n, h, w = images.shape
    side = math.isqrt(cfg.patch_count)
    if h != cfg.image_size or w != cfg.image_size or h % side or w % side:
        raise ValueError(
            f"raster {h}x{w} cannot be cut into {cfg.patch_count} patches "
            f"for image_size {cfg.image_size}"
        )
    ps = h // side
    x = images.reshape(n, side, ps, side, ps).transpose(0, 1, 3, 2, 4)
    return x.reshape(n, cfg.patch_count, ps * ps)


class ToyVLM:
    """Patch encoder + causal transformer decoder with named float64 parameters."""

    def __init__(self, config: PolicyConfig = PolicyConfig(), vocab: Vocabulary | None = None):
        self.config = config
        self.vocab = vocab if vocab is not None else build_vocabulary()
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(config.seed))

    # -- parameters ---------------------------------------------------------

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def _init_params(self, rng: np.random.Generator) -> None:
        c = self.config
        d, v = c.embed_dim, len(self.vocab)
        h = c.mlp_ratio * d

        def dense(fan_in, fan_out, scale=1.0):
            return rng.normal(0.0, scale / math.sqrt(fan_in), size=(fan_in, fan_out))

        self._add("patch.w", dense(c.patch_pixels, d))
        self._add("patch.b", np.zeros(d))
        self._add("tok_emb", rng.normal(0.0, 0.1, size=(v, d)))
        self._add("pos_emb", rng.normal(0.0, 0.1, size=(c.max_seq_len, d)))
        resid_scale = 1.0 / math.sqrt(2 * c.num_layers)
        for i in range(c.num_layers):
            p = f"layer{i}."
            self._add(p + "ln1.g", np.ones(d))
            self._add(p + "ln1.b", np.zeros(d))
            for m in ("wq", "wk", "wv"):
                self._add(p + "attn." + m, dense(d, d))
            self._add(p + "attn.wo", dense(d, d, resid_scale))
            self._add(p + "attn.bo", np.zeros(d))
            self._add(p + "ln2.g", np.ones(d))
            self._add(p + "ln2.b", np.zeros(d))
            self._add(p + "mlp.w1", dense(d, h))
            self._add(p + "mlp.b1", np.zeros(h))
            self._add(p + "mlp.w2", dense(h, d, resid_scale))
            self._add(p + "mlp.b2", np.zeros(d))
        self._add("lnf.g", np.ones(d))
        self._add("lnf.b", np.zeros(d))
        self._add("head.w", dense(d, v))
        self._add("head.b", np.zeros(v))

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = set(self.params) ^ set(state)
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()
            p.grad = None

    def copy(self) -> "ToyVLM":
        """Independent deep copy (used for the frozen reference policy)."""
        return copy.deepcopy(self)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- forward ------------------------------------------------------------

    def _affine(self, x: Tensor, w: str, b: str | None = None) -> Tensor:
        y = ad.matmul(x, self.params[w])
        if b is not None:
            y = ad.add(y, ad.broadcast_to(self.params[b], y.shape))
        return y

    def encode_image(self, images: np.ndarray) -> Tensor:
        """Visual token embeddings ``[N, patch_count, embed_dim]``."""
        return self._affine(Tensor(_patchify(images, self.config)), "patch.w", "patch.b")

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return ad.layer_norm(x, self.params[prefix + ".g"], self.params[prefix + ".b"])

    def _block(self, i: int, x: Tensor, past: tuple[Tensor, Tensor] | None):
        """One transformer layer over new positions ``x`` ``[N, t, D]``.

        ``past`` holds keys/values ``[N, H, Tp, hd]`` of earlier positions,
        all of which are visible.  Returns the new activations and the
        keys/values extended by the new positions.
        """
        n, t, d = x.shape
        nh = self.config.num_heads
        hd = d // nh
        p = f"layer{i}."

        def heads(u):
            return ad.transpose(ad.reshape(u, (n, t, nh, hd)), (0, 2, 1, 3))

        h = self._ln(x, p + "ln1")
        q = heads(self._affine(h, p + "attn.wq"))
        k = heads(self._affine(h, p + "attn.wk"))
        v = heads(self._affine(h, p + "attn.wv"))
        if past is not None:
            k = ad.concat([past[0], k], axis=2)
            v = ad.concat([past[1], v], axis=2)
        tp = k.shape[2] - t
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
        hidden_future = np.triu(np.ones((t, t), dtype=bool), k=1)
        mask = np.concatenate([np.zeros((t, tp), dtype=bool), hidden_future], axis=1)
        scores = ad.masked_fill(scores, mask, -1e9)
        y = ad.matmul(ad.softmax(scores), v)
        y = ad.reshape(ad.transpose(y, (0, 2, 1, 3)), (n, t, d))
        x = ad.add(x, self._affine(y, p + "attn.wo", p + "attn.bo"))
        m = ad.gelu(self._affine(self._ln(x, p + "ln2"), p + "mlp.w1", p + "mlp.b1"))
        x = ad.add(x, self._affine(m, p + "mlp.w2", p + "mlp.b2"))
        return x, (k, v)

    def _check_tokens(self, tokens: np.ndarray) -> None:
        if tokens.size and (tokens.min() < 0 or tokens.max() >= len(self.vocab)):
            raise ValueError("token id outside vocabulary")

    def _embed(self, tokens: np.ndarray, start: int) -> Tensor:
        n, t = tokens.shape
        if start + t > self.config.max_seq_len:
            raise ValueError(f"sequence of {start + t} positions exceeds max_seq_len {self.config.max_seq_len}")
        x = ad.take_rows(self.params["tok_emb"], tokens)
        pos = ad.take_rows(self.params["pos_emb"], np.arange(start, start + t))
        return ad.add(x, ad.broadcast_to(pos, x.shape))

    def _head(self, x: Tensor) -> Tensor:
        return self._affine(self._ln(x, "lnf"), "head.w", "head.b")

    def prefix_forward(self, prompts: np.ndarray, images: np.ndarray):
        """Run image patches + prompt tokens; equal-length prompts only.

        Returns logits for the token after the prompt ``[n, V]`` and the
        per-layer keys/values of the prefix.
        """
        prompts = np.asarray(prompts, dtype=np.int64)
        self._check_tokens(prompts)
        vis = self.encode_image(images)
        if vis.shape[0] != prompts.shape[0]:
            raise ValueError(f"{vis.shape[0]} images for {prompts.shape[0]} prompts")
        pos = ad.take_rows(self.params["pos_emb"], np.arange(self.config.patch_count))
        vis = ad.add(vis, ad.broadcast_to(pos, vis.shape))
        x = ad.concat([vis, self._embed(prompts, self.config.patch_count)], axis=1)
        cache = []
        for i in range(self.config.num_layers):
            x, kv = self._block(i, x, None)
            cache.append(kv)
        n, L, d = x.shape
        last = ad.reshape(ad.take_rows(ad.reshape(x, (n * L, d)), np.arange(n) * L + L - 1), (n, d))
        return self._head(last), cache

    def suffix_forward(self, tokens: np.ndarray, start: int, past: list[tuple[Tensor, Tensor]]):
        """Feed ``tokens`` ``[N, t]`` at positions ``start..start+t-1`` after ``past``."""
        tokens = np.asarray(tokens, dtype=np.int64)
        self._check_tokens(tokens)
        x = self._embed(tokens, start)
        cache = []
        for i in range(self.config.num_layers):
            x, kv = self._block(i, x, past[i])
            cache.append(kv)
        return self._head(x), cache

    @staticmethod
    def _gather_cache(cache, rows: np.ndarray):
        return [(ad.take_rows(k, rows), ad.take_rows(v, rows)) for k, v in cache]

    @staticmethod
    def _distinct(prompts: Sequence[Sequence[int]], images: np.ndarray):
        """Indices of distinct (prompt, image) pairs and the row -> distinct map."""
        keys: dict = {}
        first, rows = [], []
        for i, p in enumerate(prompts):
            key = (tuple(int(t) for t in p), images[i].tobytes())
            j = keys.get(key)
            if j is None:
                j = keys[key] = len(first)
                first.append(i)
            rows.append(j)
        return np.array(first), np.array(rows)

    # -- scoring ------------------------------------------------------------

    def logits_for(self, prompts: Sequence[Sequence[int]], images: np.ndarray, completions: Sequence[Sequence[int]]) -> Tensor:
        """Logits predicting each completion token, ``[N, T_max, V]`` (equal-length prompts)."""
        n = len(prompts)
        plens = {len(p) for p in prompts}
        if len(plens) != 1:
            raise ValueError("prompts in one call must have equal length")
        (plen,) = plens
        if plen < 1:
            raise ValueError("prompt must contain at least one token")
        images = np.asarray(images, dtype=np.float64)
        first, rows = self._distinct(prompts, images)
        prompt_arr = np.array([list(prompts[i]) for i in first], dtype=np.int64).reshape(len(first), plen)
        head_logits, cache = self.prefix_forward(prompt_arr, images[first])
        v = head_logits.shape[-1]
        tmax = max((len(c) for c in completions), default=0)
        first_logits = ad.reshape(ad.take_rows(head_logits, rows), (n, 1, v))
        if tmax <= 1:
            return first_logits
        feed = np.full((n, tmax - 1), self.vocab.pad, dtype=np.int64)
        for i, comp in enumerate(completions):
            feed[i, : max(len(comp) - 1, 0)] = list(comp)[:-1]
        start = self.config.patch_count + plen
        rest, _ = self.suffix_forward(feed, start, self._gather_cache(cache, rows))
        return ad.concat([first_logits, rest], axis=1)

    def batch_log_probs(
        self,
        prompts: Sequence[Sequence[int]],
        images: np.ndarray,
        completions: Sequence[Sequence[int]],
        temperature: float = 1.0,
        full: bool = False,
    ):
        """Teacher-forced per-token log-probs, right-padded to ``[N, T_max]``.

        Returns the tensor (on the active tape, if any) and a boolean mask of
        real tokens.  ``temperature`` 0 is treated as 1.  With ``full`` a third
        item is appended: the plain ``[N, T_max, V]`` array of log-probs over
        the whole vocabulary at every position.
        """
        n = len(prompts)
        if len(completions) != n:
            raise ValueError("one completion per prompt required")
        v = len(self.vocab)
        for comp in completions:
            if any(not 0 <= int(t) < v for t in comp):
                raise ValueError("completion token outside vocabulary")
        tmax = max(max((len(c) for c in completions), default=0), 1)
        targets = np.zeros((n, tmax), dtype=np.int64)
        mask = np.zeros((n, tmax), dtype=bool)
        for i, comp in enumerate(completions):
            targets[i, : len(comp)] = comp
            mask[i, : len(comp)] = True
        logits = self.logits_for(prompts, images, completions)
        if logits.shape[1] < tmax:
            logits = ad.concat([logits] * tmax, axis=1)
        if temperature and temperature != 1.0:
            logits = ad.mul(logits, 1.0 / temperature)
        logp = ad.log_softmax(logits)
        picked = ad.reshape(ad.gather_last(logp, targets[..., None]), (n, tmax))
        if full:
            return picked, mask, logp.data
        return picked, mask

    def log_probs(
        self, prompt_tokens: Sequence[int], image: np.ndarray, completion_token_ids: Sequence[int], temperature: float = 1.0
    ) -> Tensor:
        """Per-token log-probs of one completion (differentiable under a tape)."""
        k = len(completion_token_ids)
        lp, _ = self.batch_log_probs([prompt_tokens], np.asarray(image)[None], [completion_token_ids], temperature)
        return ad.reshape(ad.take_rows(ad.reshape(lp, (-1, 1)), np.arange(k)), (k,))

    def next_token_distribution(self, prompt_tokens: Sequence[int], image: np.ndarray) -> np.ndarray:
        """Softmax over the vocabulary for the token following ``prompt_tokens``."""
        logits, _ = self.prefix_forward(np.asarray([prompt_tokens]), np.asarray(image)[None])
        return np.exp(ad.log_softmax(logits).data[0])

    # -- sampling -----------------------------------------------------------

    def sample_batch(
        self,
        prompts: Sequence[Sequence[int]],
        images: np.ndarray,
        temperature: float,
        max_new_tokens: int,
        uniforms: np.ndarray | None = None,
        rng: np.random.Generator | None = None,
    ) -> list[Completion]:
        """One completion per row, decoded autoregressively without a tape.

        Row ``i`` consumes ``uniforms[i, j]`` for its ``j``-th token (inverse
        CDF sampling).  Temperature 0 is greedy argmax, and the recorded
        log-probs are then those of the untempered distribution.
        """
        if max_new_tokens < 1:
            raise ValueError("max_new_tokens must be at least 1")
        if temperature < 0:
            raise ValueError("temperature must be non-negative")
        if Tape._stack:
            raise RuntimeError("sampling must run outside a Tape context")
        n = len(prompts)
        if uniforms is None:
            rng = rng if rng is not None else np.random.default_rng()
            uniforms = rng.random((n, max_new_tokens))
        if uniforms.shape[0] != n or uniforms.shape[1] < max_new_tokens:
            raise ValueError("uniforms must have shape [n_prompts, >= max_new_tokens]")
        plens = {len(p) for p in prompts}
        if len(plens) != 1:
            raise ValueError("prompts in one call must have equal length")
        (plen,) = plens
        images = np.asarray(images, dtype=np.float64)
        first, rows = self._distinct(prompts, images)
        prompt_arr = np.array([list(prompts[i]) for i in first], dtype=np.int64).reshape(len(first), plen)
        head_logits, cache = self.prefix_forward(prompt_arr, images[first])
        logits = head_logits.data[rows]
        cache = self._gather_cache(cache, rows)

        eos = self.vocab.index.get(EOS, -1)
        ids = np.zeros((n, max_new_tokens), dtype=np.int64)
        lps = np.zeros((n, max_new_tokens))
        length = np.zeros(n, dtype=np.int64)
        active = np.ones(n, dtype=bool)
        start = self.config.patch_count + plen
        for step in range(max_new_tokens):
            if temperature > 0:
                logp = ad.log_softmax(logits / temperature).data
                cdf = np.cumsum(np.exp(logp), axis=-1)
                u = uniforms[:, step] * cdf[:, -1]
                choice = np.minimum((cdf < u[:, None]).sum(axis=-1), logits.shape[-1] - 1)
            else:
                logp = ad.log_softmax(logits).data
                choice = logits.argmax(axis=-1)
            ids[active, step] = choice[active]
            lps[active, step] = logp[np.flatnonzero(active), choice[active]]
            length[active] += 1
            active &= choice != eos
            if not active.any() or step == max_new_tokens - 1:
                break
            out, cache = self.suffix_forward(choice[:, None], start + step, cache)
            logits = out.data[:, 0, :]
        return [
            Completion(
                ids[i, : length[i]].tolist(),
                self.vocab.decode(ids[i, : length[i]]),
                lps[i, : length[i]].copy(),
                temperature,
            )
            for i in range(n)
        ]

    def sample(
        self,
        prompt_tokens: Sequence[int],
        image: np.ndarray,
        G: int,
        temperature: float,
        max_new_tokens: int,
        rng: np.random.Generator | None = None,
    ) -> list[Completion]:
        """``G`` completions for one prompt."""
        if G < 1:
            raise ValueError("group size G must be at least 1")
        image = np.asarray(image)
        return self.sample_batch(
            [list(prompt_tokens)] * G,
            np.repeat(image[None], G, axis=0),
            temperature,
            max_new_tokens,
            rng=rng if rng is not None else np.random.default_rng(self.config.seed),
        )

    def encode_prompt(self, query: Sequence[str], length: int | None = QUERY_LEN) -> list[int]:
        """``<bos>`` + query tokens, right-padded with ``<pad>`` to ``length`` query slots."""
        ids = [self.vocab.id(t) for t in query]
        if length is not None:
            if len(ids) > length:
                raise ValueError(f"query longer than {length} tokens")
            ids += [self.vocab.pad] * (length - len(ids))
        return [self.vocab.bos] + ids
