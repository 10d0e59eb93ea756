"""Synthetic overhead-imagery tasks with answers that can be checked by rule.

A scene is a small integer grid of rectangular objects.  Each object has a
shape and a colour.  Three task kinds are built on top of it:

* ``CLS``: name the scene category (decided by the shape with the most cells)
* ``VQA``: presence, count, comparison or rural/urban questions
* ``VG``: give the bounding box of a uniquely described object

All generation is a pure function of integer seeds.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .rewards import BBox, COORD_MAX

__all__ = [
    "Kind",
    "SHAPES",
    "COLORS",
    "SCENE_CLASSES",
    "COUNT_WORDS",
    "SYSTEM_PROMPT",
    "Scene",
    "Sample",
    "FewShotSpec",
    "Dataset",
    "PRESETS",
    "generate_scene",
    "render_raster",
    "scene_class",
    "tight_box",
    "render_pool",
    "make_prompt",
    "make_sample",
    "sample_fewshot",
    "duplicate_to_batch",
    "save_samples",
    "load_samples",
    "save_dataset",
    "load_dataset",
    "pool_hash",
    "DatasetFormatError",
]


class Kind(str, enum.Enum):
    VQA = "VQA"
    CLS = "CLS"
    VG = "VG"

    def __str__(self) -> str:
        return self.value


KINDS = (Kind.VQA, Kind.CLS, Kind.VG)

SHAPES = ("tank", "plane", "ship", "building", "tree", "field", "road", "pond")
COLORS = ("red", "green", "blue", "white")
SCENE_CLASSES = ("storage", "airport", "harbor", "residential", "forest", "farmland", "highway", "lake")
COUNT_WORDS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine")

SYSTEM_PROMPT = (
    "A conversation between User and Assistant. The user asks a question, and the "
    "Assistant solves it. The assistant first thinks about the reasoning process in the "
    "mind and then provides the user with the answer. The reasoning process and answer "
    "are enclosed within <reasoning> </reasoning> and <answer> </answer> tags, "
    "respectively, i.e., <reasoning> reasoning process here </reasoning><answer> answer "
    "here </answer>"
)
CLOSED_SUFFIX = (
    "Make your chain of thought reasoning and then answer the question using a single "
    "word or phrase."
)
GROUNDING_SUFFIX = (
    "Make your chain of thought reasoning and then output the bounding box of the "
    "following object in the image."
)

GRID = 32
CELL_PX = 2
RASTER = GRID * CELL_PX

# cell rendering: binary 2x2 texture per shape, scaled by colour level
_PATTERNS = np.array(
    [
        [[1, 0], [0, 0]],
        [[0, 1], [0, 0]],
        [[1, 1], [0, 0]],
        [[1, 0], [1, 0]],
        [[1, 0], [0, 1]],
        [[0, 1], [1, 0]],
        [[1, 1], [1, 0]],
        [[1, 1], [1, 1]],
    ],
    dtype=np.float64,
)
_LEVELS = np.array([0.4, 0.6, 0.8, 1.0])

# (min, max) side lengths in cells; roads are long and thin
_SIZES = {
    "tank": ((2, 3), (2, 3)),
    "plane": ((3, 3), (3, 3)),
    "ship": ((2, 2), (3, 5)),
    "building": ((2, 4), (2, 4)),
    "tree": ((2, 3), (2, 3)),
    "field": ((4, 7), (4, 7)),
    "road": ((2, 2), (6, 12)),
    "pond": ((3, 5), (3, 5)),
}
_MAX_COUNT = len(COUNT_WORDS) - 1


def cell_code(shape: int, color: int) -> int:
    return 1 + shape * len(COLORS) + color


def decode_cell(code: int) -> tuple[int, int]:
    return divmod(int(code) - 1, len(COLORS))


@dataclass(frozen=True)
class SceneObject:
    shape: int
    color: int
    row: int
    col: int
    height: int
    width: int


@dataclass
class Scene:
    grid: np.ndarray
    seed: int
    objects: list[SceneObject] = field(default_factory=list)

    @property
    def scene_class(self) -> str:
        return scene_class(self.grid)


# ---------------------------------------------------------------------------
# scene geometry
# ---------------------------------------------------------------------------


def shape_areas(grid: np.ndarray) -> np.ndarray:
    codes = grid[grid > 0].astype(np.int64)
    return np.bincount((codes - 1) // len(COLORS), minlength=len(SHAPES))


def scene_class(grid: np.ndarray) -> str:
    """Category of the shape covering the most cells (first shape wins ties)."""
    areas = shape_areas(grid)
    if areas.sum() == 0:
        raise ValueError("empty scene has no class")
    return SCENE_CLASSES[int(np.argmax(areas))]


def scene_class_index(grid: np.ndarray) -> int:
    return SCENE_CLASSES.index(scene_class(grid))


def is_urban(grid: np.ndarray) -> bool:
    a = shape_areas(grid)
    s = SHAPES.index
    return a[s("building")] + a[s("road")] > a[s("field")] + a[s("tree")]


def _components(mask: np.ndarray) -> int:
    """Number of 4-connected components in a boolean mask."""
    seen = np.zeros_like(mask, dtype=bool)
    count = 0
    h, w = mask.shape
    for r0, c0 in zip(*np.nonzero(mask)):
        if seen[r0, c0]:
            continue
        count += 1
        stack = [(r0, c0)]
        seen[r0, c0] = True
        while stack:
            r, c = stack.pop()
            for rr, cc in ((r + 1, c), (r - 1, c), (r, c + 1), (r, c - 1)):
                if 0 <= rr < h and 0 <= cc < w and mask[rr, cc] and not seen[rr, cc]:
                    seen[rr, cc] = True
                    stack.append((rr, cc))
    return count


def count_shape(grid: np.ndarray, shape: int) -> int:
    codes = [cell_code(shape, c) for c in range(len(COLORS))]
    return _components(np.isin(grid, codes))


def tight_box(grid: np.ndarray, code: int) -> BBox:
    """Pixel-tight bounds of all cells holding ``code``, on the 0-1000 scale."""
    rows, cols = np.nonzero(grid == code)
    if rows.size == 0:
        raise ValueError(f"no cell with code {code}")
    h, w = grid.shape
    sx = COORD_MAX / (w * CELL_PX)
    sy = COORD_MAX / (h * CELL_PX)
    return BBox(
        math.floor(cols.min() * CELL_PX * sx),
        math.floor(rows.min() * CELL_PX * sy),
        math.ceil((cols.max() + 1) * CELL_PX * sx),
        math.ceil((rows.max() + 1) * CELL_PX * sy),
    )


def render_raster(grid: np.ndarray) -> np.ndarray:
    """Scalar raster, ``CELL_PX`` pixels per cell side."""
    h, w = grid.shape
    out = np.zeros((h * CELL_PX, w * CELL_PX))
    filled = grid > 0
    shape_idx, color_idx = np.divmod(np.where(filled, grid - 1, 0), len(COLORS))
    for dy in range(CELL_PX):
        for dx in range(CELL_PX):
            vals = _PATTERNS[shape_idx, dy, dx] * _LEVELS[color_idx]
            out[dy::CELL_PX, dx::CELL_PX] = np.where(filled, vals, 0.0)
    return out


def _place(rng, grid, occupied, shape, color, big=False) -> SceneObject | None:
    (hlo, hhi), (wlo, whi) = _SIZES[SHAPES[shape]]
    h = int(rng.integers(hlo, hhi + 1))
    w = int(rng.integers(wlo, whi + 1))
    if big:
        h, w = hhi, whi
    if SHAPES[shape] in ("road", "ship") and rng.random() < 0.5:
        h, w = w, h
    n = grid.shape[0]
    for _ in range(40):
        r = int(rng.integers(0, n - h + 1))
        c = int(rng.integers(0, n - w + 1))
        # keep one empty cell between objects so counts are re-derivable
        if occupied[max(r - 1, 0): r + h + 1, max(c - 1, 0): c + w + 1].any():
            continue
        grid[r: r + h, c: c + w] = cell_code(shape, color)
        occupied[r: r + h, c: c + w] = True
        return SceneObject(shape, color, r, c, h, w)
    return None


def generate_scene(seed: int, target_class: int | None = None) -> Scene:
    """Random scene whose derived class equals ``target_class`` when given."""
    rng = np.random.default_rng(seed)
    if target_class is None:
        target_class = int(rng.integers(len(SCENE_CLASSES)))
    while True:
        grid = np.zeros((GRID, GRID), dtype=np.int8)
        occupied = np.zeros_like(grid, dtype=bool)
        objects = []
        for _ in range(int(rng.integers(2, 5))):
            obj = _place(rng, grid, occupied, target_class, int(rng.integers(len(COLORS))), big=True)
            if obj:
                objects.append(obj)
        for _ in range(int(rng.integers(2, 7))):
            shape = int(rng.integers(len(SHAPES)))
            obj = _place(rng, grid, occupied, shape, int(rng.integers(len(COLORS))))
            if obj:
                objects.append(obj)
        counts = [count_shape(grid, s) for s in range(len(SHAPES))]
        if scene_class(grid) == SCENE_CLASSES[target_class] and max(counts) <= _MAX_COUNT:
            return Scene(grid=grid, seed=seed, objects=objects)


# ---------------------------------------------------------------------------
# samples
# ---------------------------------------------------------------------------


def make_prompt(kind: Kind | str, core: str) -> str:
    """User prompt: question core followed by the kind's reasoning suffix."""
    kind = Kind(kind)
    core = core.strip()
    if not core:
        raise ValueError("question core must be non-empty")
    suffix = GROUNDING_SUFFIX if kind is Kind.VG else CLOSED_SUFFIX
    return f"{core} {suffix}"


def _plural(shape: str) -> str:
    return shape + "s"


@dataclass(eq=False)
class Sample:
    """One prompt with its image grid and verifiable truth.

    ``query`` is the compact token form of the question that the toy policy
    reads; ``prompt_text`` is the full natural-language prompt.
    """

    id: str
    kind: Kind
    grid: np.ndarray
    prompt_text: str
    query: tuple[str, ...]
    truth: str | BBox
    _raster: np.ndarray | None = field(default=None, repr=False)

    @property
    def image(self) -> np.ndarray:
        if self._raster is None:
            self._raster = render_raster(self.grid)
        return self._raster

    @property
    def truth_text(self) -> str:
        return self.truth.to_text() if isinstance(self.truth, BBox) else self.truth

    def __eq__(self, other) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.id == other.id
            and self.kind == other.kind
            and np.array_equal(self.grid, other.grid)
            and self.prompt_text == other.prompt_text
            and self.query == other.query
            and self.truth == other.truth
        )

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "grid_shape": list(self.grid.shape),
            "grid": rle_encode(self.grid),
            "prompt_text": self.prompt_text,
            "query": list(self.query),
            "truth": list(self.truth.as_tuple()) if isinstance(self.truth, BBox) else self.truth,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Sample":
        kind = Kind(rec["kind"])
        grid = rle_decode(rec["grid"], tuple(rec["grid_shape"]))
        truth = BBox(*rec["truth"]) if kind is Kind.VG else rec["truth"]
        if kind is not Kind.VG and not isinstance(truth, str):
            raise ValueError("truth must be a string for closed-ended kinds")
        return cls(rec["id"], kind, grid, rec["prompt_text"], tuple(rec["query"]), truth)


def _vqa_question(rng, grid) -> tuple[str, tuple[str, ...], str]:
    kind = int(rng.integers(4))
    present = [s for s in range(len(SHAPES)) if count_shape(grid, s) > 0]
    absent = [s for s in range(len(SHAPES)) if s not in present]
    if kind == 0:
        want_yes = rng.random() < 0.5 or not absent
        s = int(rng.choice(present if want_yes else absent))
        name = SHAPES[s]
        ans = "yes" if count_shape(grid, s) > 0 else "no"
        return f"Is there a {name} in the image?", ("present", name), ans
    if kind == 1:
        s = int(rng.integers(len(SHAPES)))
        name = SHAPES[s]
        return f"How many {_plural(name)} are there?", ("count", name), COUNT_WORDS[count_shape(grid, s)]
    if kind == 2:
        a, b = (int(x) for x in rng.choice(len(SHAPES), size=2, replace=False))
        ca, cb = count_shape(grid, a), count_shape(grid, b)
        ans = "yes" if ca > cb else "no"
        return (
            f"Are there more {_plural(SHAPES[a])} than {_plural(SHAPES[b])}?",
            ("more", SHAPES[a], SHAPES[b]),
            ans,
        )
    ans = "urban" if is_urban(grid) else "rural"
    return "Is this a rural or an urban area?", ("ruralurban",), ans


def _unique_codes(scene: Scene) -> list[int]:
    codes, counts = np.unique([cell_code(o.shape, o.color) for o in scene.objects], return_counts=True)
    return [int(c) for c, n in zip(codes, counts) if n == 1]


def make_sample(sample_id: str, kind: Kind | str, seed: int) -> Sample:
    """Build one sample of ``kind`` from its own scene seed."""
    kind = Kind(kind)
    rng = np.random.default_rng([seed, 1])
    scene = generate_scene(seed, int(rng.integers(len(SCENE_CLASSES))))
    while kind is Kind.VG and not _unique_codes(scene):
        scene = generate_scene(int(rng.integers(2**62)), scene_class_index(scene.grid))
    grid = scene.grid
    if kind is Kind.CLS:
        core = "Classify the scene into one of: " + ", ".join(SCENE_CLASSES) + "."
        return Sample(sample_id, kind, grid, make_prompt(kind, core), ("CLS",), scene.scene_class)
    if kind is Kind.VQA:
        core, q, ans = _vqa_question(rng, grid)
        return Sample(sample_id, kind, grid, make_prompt(kind, core), ("VQA",) + q, ans)
    # grounding: pick an object whose (colour, shape) is unique in the scene
    unique = _unique_codes(scene)
    code = unique[int(rng.integers(len(unique)))]
    shape, color = decode_cell(code)
    core = f"The {COLORS[color]} {SHAPES[shape]}."
    return Sample(
        sample_id,
        kind,
        grid,
        make_prompt(kind, core),
        ("VG", COLORS[color], SHAPES[shape]),
        tight_box(grid, code),
    )


def render_pool(pool_size: int, seed: int, prefix: str = "s") -> list[Sample]:
    """Pool cycling VQA, CLS, VG so per-kind counts differ by at most one."""
    if pool_size < 3:
        raise ValueError("pool_size must be at least 3")
    ss = np.random.SeedSequence(seed)
    child_seeds = ss.generate_state(pool_size, dtype=np.uint64)
    return [
        make_sample(f"{prefix}{seed}-{i:05d}", KINDS[i % 3], int(child_seeds[i]))
        for i in range(pool_size)
    ]


# ---------------------------------------------------------------------------
# few-shot datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FewShotSpec:
    n_vqa: int
    n_cls: int
    n_vg: int
    seed: int = 0

    def __post_init__(self):
        if min(self.n_vqa, self.n_cls, self.n_vg) < 0:
            raise ValueError("few-shot counts must be non-negative")
        if self.total < 1:
            raise ValueError("few-shot spec needs at least one example")

    @property
    def total(self) -> int:
        return self.n_vqa + self.n_cls + self.n_vg

    def counts(self) -> dict[Kind, int]:
        return {Kind.VQA: self.n_vqa, Kind.CLS: self.n_cls, Kind.VG: self.n_vg}


# name -> (n_vqa, n_cls, n_vg)
PRESETS: dict[str, tuple[int, int, int]] = {
    "pi1V": (1, 0, 0),
    "pi1C": (0, 1, 0),
    "pi1G": (0, 0, 1),
    "pi2VC": (1, 1, 0),
    "pi2G": (0, 0, 2),
    "pi4VC": (2, 2, 0),
    "pi4VCG": (2, 1, 1),
    "pi8VC": (4, 4, 0),
    "pi8VCG": (3, 3, 2),
    "pi16VC": (8, 8, 0),
    "pi32VCG": (10, 12, 10),
    "pi64VCG": (20, 22, 22),
    "pi128VCG": (42, 42, 44),
}


@dataclass
class Dataset:
    samples: list[Sample]
    spec: FewShotSpec | None = None
    pool_id: str = ""
    batch_size: int | None = None

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def content_hash(self) -> str:
        return pool_hash(self.samples)

    def manifest(self) -> dict:
        return {
            "spec": None if self.spec is None else vars(self.spec),
            "pool_id": self.pool_id,
            "batch_size": self.batch_size,
            "n_samples": len(self.samples),
            "distinct_ids": sorted({s.id for s in self.samples}),
            "dataset_hash": self.content_hash(),
            "duplication": "round-robin",
        }


def sample_fewshot(pool: Sequence[Sample], spec: FewShotSpec, pool_id: str = "") -> Dataset:
    """Draw ``spec`` counts per kind uniformly without replacement."""
    rng = np.random.default_rng(spec.seed)
    chosen: list[Sample] = []
    for kind, n in spec.counts().items():
        candidates = [s for s in pool if s.kind is kind]
        if n > len(candidates):
            raise ValueError(f"pool has {len(candidates)} {kind.value} samples, spec needs {n}")
        if n:
            picks = rng.choice(len(candidates), size=n, replace=False)
            chosen.extend(candidates[int(i)] for i in picks)
    return Dataset(chosen, spec=spec, pool_id=pool_id)


def duplicate_to_batch(dataset: Dataset, batch_size: int = 128) -> Dataset:
    """Round-robin repeat the distinct samples until exactly ``batch_size``."""
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot duplicate an empty dataset")
    if batch_size < n:
        raise ValueError(f"batch_size {batch_size} is smaller than dataset size {n}")
    samples = [dataset.samples[i % n] for i in range(batch_size)]
    return Dataset(samples, spec=dataset.spec, pool_id=dataset.pool_id, batch_size=batch_size)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


class DatasetFormatError(ValueError):
    def __init__(self, path, lineno: int, reason: str):
        super().__init__(f"{path}:{lineno}: {reason}")
        self.lineno = lineno


def rle_encode(grid: np.ndarray) -> str:
    flat = grid.reshape(-1)
    if flat.size == 0:
        return ""
    change = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate([[0], change])
    lengths = np.diff(np.concatenate([starts, [flat.size]]))
    return ",".join(f"{int(flat[s])}x{int(n)}" for s, n in zip(starts, lengths))


def rle_decode(text: str, shape: tuple[int, ...]) -> np.ndarray:
    values = []
    for run in text.split(",") if text else []:
        code, _, n = run.partition("x")
        values.extend([int(code)] * int(n))
    grid = np.array(values, dtype=np.int8)
    if grid.size != int(np.prod(shape)):
        raise ValueError(f"run-length data has {grid.size} cells, expected {shape}")
    return grid.reshape(shape)


def save_samples(samples: Iterable[Sample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_record(), sort_keys=True) + "\n")


def load_samples(path) -> list[Sample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.endswith("\n"):
                raise DatasetFormatError(path, lineno, "truncated record (no newline)")
            try:
                out.append(Sample.from_record(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetFormatError(path, lineno, str(exc)) from None
    return out


def pool_hash(samples: Iterable[Sample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(json.dumps(s.to_record(), sort_keys=True).encode())
        h.update(b"\n")
    return h.hexdigest()


def save_dataset(dataset: Dataset, path) -> Path:
    """Write samples plus a ``<name>.manifest.json`` sidecar."""
    path = Path(path)
    save_samples(dataset.samples, path)
    manifest = path.with_name(path.name + ".manifest.json")
    manifest.write_text(json.dumps(dataset.manifest(), indent=2, sort_keys=True) + "\n")
    return manifest


def load_dataset(path) -> Dataset:
    path = Path(path)
    samples = load_samples(path)
    manifest = path.with_name(path.name + ".manifest.json")
    spec, pool_id, batch = None, "", None
    if manifest.exists():
        meta = json.loads(manifest.read_text())
        if meta.get("spec"):
            spec = FewShotSpec(**meta["spec"])
        pool_id = meta.get("pool_id", "")
        batch = meta.get("batch_size")
    return Dataset(samples, spec=spec, pool_id=pool_id, batch_size=batch)
