"""Procedural scenes, region features, visual concepts, captions and referring tasks.

Every function here is a pure function of its seed and ``WorldConfig``; the
random streams for scene layout, feature noise, concept noise, caption choice
and referring choice are derived independently from the scene seed so that
changing one dial never reshuffles the others.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .embeddings import geometry_feature
from .errors import ConfigError
from .vocab import Vocabulary

CLASS_WORDS = (
    "circle", "square", "triangle", "star", "heart", "diamond", "cross", "ring",
    "oval", "hexagon", "arrow", "moon", "cube", "cone", "cylinder", "sphere",
    "pentagon", "leaf", "bolt", "drop",
)
COLOR_WORDS = (
    "red", "blue", "green", "yellow", "purple", "orange", "white", "black",
    "pink", "brown", "gray", "cyan",
)
SIZE_WORDS = ("small", "medium", "big")
RELATION_WORDS = ("left", "right", "above", "below")
FUNCTION_WORDS = ("a", "and", "of", "the", "is", "there", "with", "near", "next", "to")

FORMAT_NAME = "dimbert-corpus"
FORMAT_VERSION = 1

# independent random streams per scene seed
_LAYOUT, _ROI, _CONCEPT, _CAPTION, _REFER = range(5)


def default_vocabulary() -> Vocabulary:
    return Vocabulary(FUNCTION_WORDS + RELATION_WORDS + SIZE_WORDS + COLOR_WORDS + CLASS_WORDS)


@dataclass(frozen=True)
class WorldConfig:
    width: int = 100
    height: int = 100
    n_classes: int = 16
    n_colors: int = 8
    n_sizes: int = 3
    min_objects: int = 1
    max_objects: int = 6
    unique_classes: bool = False
    noise_sigma: float = 0.05
    d_c: int = 16
    class_confidence: float = 0.8
    n_concepts: int = 5
    concept_noise: float = 0.5  # expected spurious concepts per scene
    concept_miss: float = 0.1  # probability a true concept word is missed
    caption_mode: str = "pair"  # "pair" | "exhaustive"
    caption_variants: int = 1
    max_caption_len: int = 32
    referring_per_scene: int = 1

    def validate(self) -> "WorldConfig":
        if self.width <= 0 or self.height <= 0:
            raise ConfigError("canvas extents must be positive")
        if self.max_objects < 1 or self.min_objects < 1 or self.min_objects > self.max_objects:
            raise ConfigError(f"object-count bounds [{self.min_objects}, {self.max_objects}] are invalid")
        if not 1 <= self.n_classes <= len(CLASS_WORDS):
            raise ConfigError(f"n_classes must lie in [1, {len(CLASS_WORDS)}]")
        if not 1 <= self.n_colors <= len(COLOR_WORDS):
            raise ConfigError(f"n_colors must lie in [1, {len(COLOR_WORDS)}]")
        if not 1 <= self.n_sizes <= len(SIZE_WORDS):
            raise ConfigError(f"n_sizes must lie in [1, {len(SIZE_WORDS)}]")
        if self.unique_classes and self.max_objects > self.n_classes:
            raise ConfigError("more unique objects requested than classes in the universe")
        if self.d_c < self.n_classes:
            raise ConfigError("d_c must cover every object class")
        if self.width < 10 or self.height < 10:
            raise ConfigError("canvas too small for the size model")
        if self.caption_mode not in ("pair", "exhaustive"):
            raise ConfigError(f"unknown caption_mode {self.caption_mode!r}")
        if self.caption_variants not in (1, 2):
            raise ConfigError("caption_variants must be 1 or 2")
        if not 0.0 <= self.class_confidence <= 1.0 or not 0.0 <= self.concept_miss <= 1.0:
            raise ConfigError("probabilities must lie in [0, 1]")
        if self.noise_sigma < 0 or self.concept_noise < 0:
            raise ConfigError("noise levels must be non-negative")
        return self

    @property
    def d_r(self) -> int:
        return self.n_classes + self.n_colors + self.n_sizes


@dataclass(frozen=True)
class SceneObject:
    class_id: int
    color_id: int
    size_id: int
    box: tuple[int, int, int, int]  # x_tl, y_tl, x_br, y_br

    @property
    def area(self) -> int:
        x0, y0, x1, y1 = self.box
        return (x1 - x0) * (y1 - y0)

    @property
    def center(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.box
        return (x0 + x1) / 2.0, (y0 + y1) / 2.0

    @property
    def signature(self) -> tuple[int, int, int]:
        return self.class_id, self.color_id, self.size_id

    def words(self) -> tuple[str, str, str]:
        """(size, color, class) words."""
        return SIZE_WORDS[self.size_id], COLOR_WORDS[self.color_id], CLASS_WORDS[self.class_id]


@dataclass(frozen=True)
class Scene:
    width: int
    height: int
    objects: tuple[SceneObject, ...]
    seed: int


@dataclass(frozen=True)
class RoIFeature:
    r: np.ndarray
    g: np.ndarray
    c: np.ndarray


@dataclass(frozen=True)
class ConceptSet:
    concepts: tuple[tuple[str, float], ...] = ()

    @property
    def words(self) -> list[str]:
        return [w for w, _ in self.concepts]

    def __len__(self) -> int:
        return len(self.concepts)

    def top(self, m: int) -> "ConceptSet":
        return ConceptSet(self.concepts[:max(m, 0)])


@dataclass(frozen=True)
class ReferringTask:
    query: tuple[str, ...]
    candidates: tuple[int, ...]
    target: int


@dataclass
class Example:
    scene: Scene
    rois: list[RoIFeature]
    concepts: ConceptSet
    caption: list[str]
    referring: list[ReferringTask] = field(default_factory=list)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(stream,)))


def derive_seed(base: int, index: int) -> int:
    return int(np.random.SeedSequence([int(base), int(index)]).generate_state(1)[0])


# --------------------------------------------------------------------------
# Scenes and features
# --------------------------------------------------------------------------


def generate_scene(seed: int, config: WorldConfig = WorldConfig()) -> Scene:
    config.validate()
    rng = _rng(seed, _LAYOUT)
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    if config.unique_classes:
        classes = rng.choice(config.n_classes, size=n, replace=False)
    else:
        classes = rng.integers(0, config.n_classes, size=n)
    colors = rng.integers(0, config.n_colors, size=n)
    sizes = rng.integers(0, config.n_sizes, size=n)
    objects = []
    for cls, col, size in zip(classes, colors, sizes):
        # size bands partition [10%, 50%] of the canvas side
        lo = 0.10 + 0.40 * size / config.n_sizes
        hi = 0.10 + 0.40 * (size + 1) / config.n_sizes
        w = max(1, int(round(rng.uniform(lo, hi) * config.width)))
        h = max(1, int(round(rng.uniform(lo, hi) * config.height)))
        x0 = int(rng.integers(0, config.width - w + 1))
        y0 = int(rng.integers(0, config.height - h + 1))
        objects.append(SceneObject(int(cls), int(col), int(size), (x0, y0, x0 + w, y0 + h)))
    return Scene(config.width, config.height, tuple(objects), int(seed))


def roi_features(scene: Scene, config: WorldConfig = WorldConfig(), noiseless: bool = False) -> list[RoIFeature]:
    rng = _rng(scene.seed, _ROI)
    feats = []
    for obj in scene.objects:
        r = np.zeros(config.d_r)
        r[obj.class_id] = 1.0
        r[config.n_classes + obj.color_id] = 1.0
        r[config.n_classes + config.n_colors + obj.size_id] = 1.0
        c = np.zeros(config.d_c)
        if noiseless:
            conf = config.class_confidence
            rest = np.full(config.d_c - 1, 1.0 / max(config.d_c - 1, 1))
        else:
            r = r + rng.normal(0.0, config.noise_sigma, size=config.d_r)
            conf = float(np.clip(config.class_confidence + 0.1 * rng.normal(), 0.3, 0.99))
            rest = rng.dirichlet(np.ones(config.d_c - 1)) if config.d_c > 1 else np.zeros(0)
        if config.d_c == 1:
            c[0] = 1.0
        else:
            c[np.arange(config.d_c) != obj.class_id] = (1.0 - conf) * rest
            c[obj.class_id] = conf
            c /= c.sum()
        g = geometry_feature(obj.box, scene.width, scene.height)
        feats.append(RoIFeature(r=r, g=g, c=c))
    return feats


# --------------------------------------------------------------------------
# Visual concepts
# --------------------------------------------------------------------------


def concept_pool(config: WorldConfig) -> list[str]:
    """Words the concept extractor can ever emit, in vocabulary order."""
    vocab = default_vocabulary()
    pool = list(SIZE_WORDS[: config.n_sizes]) + list(COLOR_WORDS[: config.n_colors]) + list(CLASS_WORDS[: config.n_classes])
    return sorted(pool, key=vocab.id)


def concept_salience(scene: Scene) -> dict[str, float]:
    """Summed normalised object area per attribute/class word."""
    total = float(scene.width * scene.height)
    scores: dict[str, float] = {}
    for obj in scene.objects:
        for word in obj.words():
            scores[word] = scores.get(word, 0.0) + obj.area / total
    return scores


def extract_concepts(scene: Scene, m: int, config: WorldConfig = WorldConfig(), noisy: bool = True) -> ConceptSet:
    """Top-``m`` words by salience, with optional seeded misses and spurious insertions."""
    if m <= 0:
        raise ConfigError("number of concepts M must be positive")
    vocab = default_vocabulary()
    scores = concept_salience(scene)
    if noisy and (config.concept_miss > 0 or config.concept_noise > 0):
        rng = _rng(scene.seed, _CONCEPT)
        true_words = sorted(scores, key=vocab.id)
        keep = rng.random(len(true_words)) >= config.concept_miss
        top = max(scores.values())
        noisy_scores = {w: scores[w] for w, k in zip(true_words, keep) if k}
        absent = [w for w in concept_pool(config) if w not in scores]
        n_spur = min(int(rng.poisson(config.concept_noise)), len(absent))
        if n_spur:
            picks = rng.choice(len(absent), size=n_spur, replace=False)
            for i in sorted(picks):
                noisy_scores[absent[i]] = float(rng.uniform(0.0, top))
        scores = noisy_scores
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], vocab.id(kv[0])))
    return ConceptSet(tuple((w, float(s)) for w, s in ranked[:m]))


def concept_ground_truth(scene: Scene, config: WorldConfig = WorldConfig()) -> set[str]:
    """Attribute and class words of the objects the reference caption mentions."""
    return {w for obj in caption_objects(scene, config) for w in obj.words()}


# --------------------------------------------------------------------------
# Captions
# --------------------------------------------------------------------------


def _by_area(scene: Scene) -> list[SceneObject]:
    order = sorted(range(len(scene.objects)), key=lambda i: (-scene.objects[i].area, i))
    return [scene.objects[i] for i in order]


def caption_objects(scene: Scene, config: WorldConfig = WorldConfig()) -> list[SceneObject]:
    if config.caption_mode == "pair":
        return _by_area(scene)[:2]
    return sorted(scene.objects, key=lambda o: (o.center[0], o.center[1], o.signature))


def relation(a: SceneObject, b: SceneObject) -> list[str]:
    """Spatial relation of ``a`` with respect to ``b`` along the dominant axis."""
    (ax, ay), (bx, by) = a.center, b.center
    dx, dy = ax - bx, ay - by
    if abs(dx) >= abs(dy):
        return ["left", "of"] if dx < 0 else ["right", "of"]
    return ["above"] if dy < 0 else ["below"]


def _phrase(obj: SceneObject) -> list[str]:
    return ["a", *obj.words()]


def render_caption(scene: Scene, seed: int | None = None, config: WorldConfig = WorldConfig()) -> list[str]:
    """Template caption over scene facts, e.g. ``a big red circle left of a small blue square``.

    ``seed`` only matters when ``caption_variants == 2``: it then chooses
    whether the pair is described from the first or the second object.
    """
    seed = scene.seed if seed is None else seed
    objs = caption_objects(scene, config)
    if config.caption_mode == "exhaustive":
        tokens: list[str] = []
        for i, obj in enumerate(objs):
            if i:
                tokens.append("and")
            tokens.extend(_phrase(obj))
    elif len(objs) == 1:
        tokens = _phrase(objs[0])
    else:
        first, second = objs
        if config.caption_variants == 2 and _rng(seed, _CAPTION).random() < 0.5:
            first, second = second, first
        tokens = _phrase(first) + relation(first, second) + _phrase(second)
    return tokens[: config.max_caption_len]


# --------------------------------------------------------------------------
# Referring expressions
# --------------------------------------------------------------------------


def query_matches(obj: SceneObject, query: Sequence[str]) -> bool:
    size, color, cls = obj.words()
    *attrs, noun = query
    if noun != cls:
        return False
    return all(a in (size, color) for a in attrs)


def describe_uniquely(scene: Scene, index: int) -> tuple[str, ...] | None:
    """Shortest appearance-only phrase matching object ``index`` and nothing else."""
    size, color, cls = scene.objects[index].words()
    for query in ((cls,), (color, cls), (size, cls), (size, color, cls)):
        hits = [i for i, o in enumerate(scene.objects) if query_matches(o, query)]
        if hits == [index]:
            return query
    return None


def make_referring(scene: Scene, seed: int | None = None, count: int = 1) -> list[ReferringTask]:
    """Up to ``count`` referring tasks with distinct targets.

    Returns an empty list (the skip signal) when no object can be described
    uniquely by its appearance.
    """
    seed = scene.seed if seed is None else seed
    describable = [(i, q) for i in range(len(scene.objects)) if (q := describe_uniquely(scene, i)) is not None]
    if not describable:
        return []
    rng = _rng(seed, _REFER)
    picks = rng.permutation(len(describable))[:count]
    candidates = tuple(range(len(scene.objects)))
    return [ReferringTask(describable[k][1], candidates, describable[k][0]) for k in picks]


# --------------------------------------------------------------------------
# Corpora
# --------------------------------------------------------------------------


def build_example(seed: int, config: WorldConfig = WorldConfig()) -> Example:
    scene = generate_scene(seed, config)
    return Example(
        scene=scene,
        rois=roi_features(scene, config),
        concepts=extract_concepts(scene, config.n_concepts, config) if config.n_concepts > 0 else ConceptSet(),
        caption=render_caption(scene, seed, config),
        referring=make_referring(scene, seed, config.referring_per_scene),
    )


def generate_corpus(n: int, seed: int, config: WorldConfig = WorldConfig()) -> list[Example]:
    config.validate()
    return [build_example(derive_seed(seed, i), config) for i in range(n)]


def referring_items(examples: Iterable[Example]) -> list[tuple[Example, ReferringTask]]:
    return [(ex, task) for ex in examples for task in ex.referring]


def balance_referring(pairs: Sequence[tuple[Example, ReferringTask]], n: int,
                      attribute_share: float = 0.5) -> list[tuple[Example, ReferringTask]]:
    """First ``n`` tasks with up to ``attribute_share`` of them needing an attribute word.

    Class-only queries dominate natural scenes, so a plain prefix leaves few
    size and colour queries to learn from. Corpus order is kept within each group.
    """
    if not 0.0 <= attribute_share <= 1.0:
        raise ValueError(f"attribute_share must lie in [0, 1], got {attribute_share}")
    multi = [p for p in pairs if len(p[1].query) > 1]
    single = [p for p in pairs if len(p[1].query) == 1]
    k = min(int(round(attribute_share * n)), len(multi))
    rest = single[:n - k]
    # top up from the attribute group when class-only tasks run out
    extra = multi[k:k + n - k - len(rest)]
    return multi[:k] + extra + rest


def example_to_dict(ex: Example) -> dict:
    s = ex.scene
    return {
        "scene": {
            "width": s.width,
            "height": s.height,
            "seed": s.seed,
            "objects": [
                {"class_id": o.class_id, "color_id": o.color_id, "size_id": o.size_id, "box": list(o.box)}
                for o in s.objects
            ],
        },
        "roi_features": [{"r": f.r.tolist(), "g": f.g.tolist(), "c": f.c.tolist()} for f in ex.rois],
        "concepts": [{"word": w, "score": sc} for w, sc in ex.concepts.concepts],
        "caption": list(ex.caption),
        "referring_tasks": [
            {"query": list(t.query), "candidates": list(t.candidates), "target": t.target} for t in ex.referring
        ],
    }


def example_from_dict(d: dict) -> Example:
    s = d["scene"]
    scene = Scene(
        s["width"],
        s["height"],
        tuple(SceneObject(o["class_id"], o["color_id"], o["size_id"], tuple(o["box"])) for o in s["objects"]),
        s["seed"],
    )
    rois = [RoIFeature(np.array(f["r"]), np.array(f["g"]), np.array(f["c"])) for f in d["roi_features"]]
    concepts = ConceptSet(tuple((c["word"], c["score"]) for c in d["concepts"]))
    tasks = [ReferringTask(tuple(t["query"]), tuple(t["candidates"]), t["target"]) for t in d["referring_tasks"]]
    return Example(scene, rois, concepts, list(d["caption"]), tasks)


def dumps_corpus(examples: Sequence[Example], config: WorldConfig, seed: int | None = None) -> str:
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "seed": seed, "config": asdict(config)}
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(example_to_dict(ex), sort_keys=True) for ex in examples]
    return "\n".join(lines) + "\n"


def write_corpus(path: str | Path, examples: Sequence[Example], config: WorldConfig, seed: int | None = None) -> None:
    Path(path).write_text(dumps_corpus(examples, config, seed), encoding="utf-8")


def read_corpus(path: str | Path) -> tuple[WorldConfig, list[Example]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ConfigError(f"{path}: empty corpus file")
    header = json.loads(lines[0])
    if header.get("format") != FORMAT_NAME or header.get("version") != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported corpus header {header.get('format')!r} v{header.get('version')}")
    config = WorldConfig(**header["config"])
    return config, [example_from_dict(json.loads(line)) for line in lines[1:] if line.strip()]
