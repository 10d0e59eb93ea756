"""Rule-based rewards: tag-format compliance, exact-match answers, quantized IoU."""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, fields

__all__ = [
    "BBox",
    "RewardConfig",
    "RewardBreakdown",
    "ParsedOutput",
    "verify_format",
    "parse_answer",
    "exact_match_reward",
    "iou",
    "quantized_iou_reward",
    "score",
]

COORD_MAX = 1000

TAGS = ("<reasoning>", "</reasoning>", "<answer>", "</answer>")

_FORMAT_RE = re.compile(
    r"\s*<reasoning>(.*?)</reasoning>\s*<answer>(.*?)</answer>\s*", re.DOTALL
)
_ANSWER_RE = re.compile(r"<answer>(.*?)</answer>", re.DOTALL)
_BBOX_RE = re.compile(
    r"\[\[\s*([+-]?\d+)\s*,\s*([+-]?\d+)\s*,\s*([+-]?\d+)\s*,\s*([+-]?\d+)\s*\]\]"
)


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box on the 0-1000 normalised image scale."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        for v in (self.x_min, self.y_min, self.x_max, self.y_max):
            if not isinstance(v, int) or isinstance(v, bool):
                raise TypeError(f"BBox coordinates must be int, got {v!r}")
        if not (0 <= self.x_min <= self.x_max <= COORD_MAX and 0 <= self.y_min <= self.y_max <= COORD_MAX):
            raise ValueError(f"invalid box {self.as_tuple()}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def area(self) -> int:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def to_text(self) -> str:
        return "[[{}, {}, {}, {}]]".format(*self.as_tuple())


@dataclass(frozen=True)
class RewardConfig:
    iou_hi: float = 0.7
    iou_lo: float = 0.4
    format_weight: float = 1.0
    accuracy_weight: float = 1.0
    case_fold: bool = True
    trim: bool = True

    def __post_init__(self):
        if not 0.0 <= self.iou_lo < self.iou_hi <= 1.0:
            raise ValueError(f"need 0 <= iou_lo < iou_hi <= 1, got {self.iou_lo}, {self.iou_hi}")
        if self.format_weight < 0 or self.accuracy_weight < 0:
            raise ValueError("reward weights must be non-negative")

    @property
    def max_total(self) -> float:
        return self.format_weight + self.accuracy_weight

    def to_text(self) -> str:
        """``key = value`` lines, one per field."""
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "RewardConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = (s.strip() for s in line.partition("="))
            if not sep or key not in types:
                raise ValueError(f"line {lineno}: bad reward config entry {raw!r}")
            if types[key] in ("bool", bool):
                if value not in ("True", "False"):
                    raise ValueError(f"line {lineno}: {key} must be True or False")
                kwargs[key] = value == "True"
            else:
                kwargs[key] = float(value)
        return cls(**kwargs)


@dataclass(frozen=True)
class RewardBreakdown:
    format: int
    accuracy: float
    total: float


@dataclass(frozen=True)
class ParsedOutput:
    reasoning_text: str | None = None
    answer_text: str | None = None
    bbox: BBox | None = None


def verify_format(text: str) -> int:
    """1 iff ``text`` is one reasoning block followed by one answer block.

    Whitespace is allowed around and between the blocks; block contents are
    not inspected except that they may not contain further tags.
    """
    if not isinstance(text, str):
        return 0
    m = _FORMAT_RE.fullmatch(text)
    if m is None:
        return 0
    for inner in m.groups():
        if any(tag in inner for tag in TAGS):
            return 0
    return 1


def _parse_bbox(answer: str) -> BBox | None:
    m = _BBOX_RE.fullmatch(answer)
    if m is None:
        return None
    x0, y0, x1, y1 = (min(max(int(v), 0), COORD_MAX) for v in m.groups())
    return BBox(min(x0, x1), min(y0, y1), max(x0, x1), max(y0, y1))


def parse_answer(text: str) -> ParsedOutput:
    """Pull the first reasoning/answer block contents out of ``text``.

    Never raises; missing pieces come back as ``None``.  Box coordinates are
    clamped into [0, 1000] and put in min/max order.
    """
    if not isinstance(text, str):
        return ParsedOutput()
    r = re.search(r"<reasoning>(.*?)</reasoning>", text, re.DOTALL)
    reasoning = r.group(1).strip() if r else None
    a = _ANSWER_RE.search(text)
    if a is None:
        return ParsedOutput(reasoning_text=reasoning)
    answer = a.group(1).strip()
    return ParsedOutput(reasoning_text=reasoning, answer_text=answer, bbox=_parse_bbox(answer))


def _normalise(s: str, cfg: RewardConfig) -> str:
    if cfg.trim:
        s = " ".join(s.split())
    if cfg.case_fold:
        s = s.casefold()
    return s


def exact_match_reward(pred: str | None, truth: str, cfg: RewardConfig = RewardConfig()) -> int:
    if not truth:
        raise ValueError("truth must be non-empty")
    if pred is None:
        return 0
    return int(_normalise(pred, cfg) == _normalise(truth, cfg))


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two closed boxes; 0 when the union is empty."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = max(iw, 0) * max(ih, 0)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def quantized_iou_reward(v: float, cfg: RewardConfig = RewardConfig()) -> float:
    """1 at or above ``iou_hi``, ``v`` itself on [iou_lo, iou_hi), else 0."""
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"IoU value must lie in [0, 1], got {v}")
    if v >= cfg.iou_hi:
        return 1.0
    if v >= cfg.iou_lo:
        return float(v)
    return 0.0


def accuracy_reward(sample, parsed: ParsedOutput, cfg: RewardConfig = RewardConfig()) -> float:
    """Task accuracy of an already-parsed output (quantizer applied to every kind)."""
    if sample.kind == "VG":
        if parsed.bbox is None:
            return 0.0
        raw = iou(parsed.bbox, sample.truth)
    else:
        raw = float(exact_match_reward(parsed.answer_text, sample.truth, cfg))
    return quantized_iou_reward(raw, cfg)


def score(sample, completion_text: str, cfg: RewardConfig = RewardConfig()) -> RewardBreakdown:
    """Format and accuracy rewards for one completion of ``sample``.

    ``sample`` needs ``kind`` ("CLS", "VQA" or "VG") and ``truth`` (a label
    string, or a :class:`BBox` for grounding).
    """
    fmt = verify_format(completion_text)
    acc = accuracy_reward(sample, parse_answer(completion_text), cfg)
    return RewardBreakdown(fmt, acc, cfg.format_weight * fmt + cfg.accuracy_weight * acc)
