"""
Procedural product corpus.

Categories are small colored glyphs with a short synthetic name. Single-product
samples paste one glyph on a background, multi-product samples paste several
(copy-and-paste composition), and every caption is assembled from brand, name
and filler tokens before the noise knobs corrupt it.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from matplotlib.colors import hsv_to_rgb

from instance_retrieval.config import MAX_INSTANCES, NAME_BASE_LENGTH, CorpusConfig, parse_config
from instance_retrieval.error import ConfigurationError, InputError, PlacementError
from instance_retrieval.store import image_offset, read_image_store, read_jsonl, write_image_store, write_jsonl
from instance_retrieval.utils import derive_rng, iou
from instance_retrieval.vocab import Vocabulary, VocabularyBuilder

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test", "gallery")

CONFUSABLE_COLOR_SHIFT = 0.12
MIN_GLYPH_LUMINANCE = 0.6

_CATALOG_STREAM = 0xCA7A
_PLAN_STREAM = 0x91A2
_SAMPLE_STREAM = 0x5A3E


@dataclass(frozen=True)
class Box:
    """
    Axis-aligned box in normalized image coordinates. Only the ordering
    x1 < x2, y1 < y2 is enforced; `clip()` maps a box into [0, 1]².
    """

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise InputError(f"invalid box {self.as_tuple()}: need x1 < x2 and y1 < y2")

    @classmethod
    def whole_image(cls) -> "Box":
        return cls(0.0, 0.0, 1.0, 1.0)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def is_normalized(self) -> bool:
        return 0.0 <= self.x1 and 0.0 <= self.y1 and self.x2 <= 1.0 and self.y2 <= 1.0

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return self.x1, self.y1, self.x2, self.y2

    def clip(self) -> Optional["Box"]:
        """The part of the box inside [0, 1]², or None if that has zero area."""
        x1, y1 = min(max(self.x1, 0.0), 1.0), min(max(self.y1, 0.0), 1.0)
        x2, y2 = min(max(self.x2, 0.0), 1.0), min(max(self.y2, 0.0), 1.0)
        if x1 < x2 and y1 < y2:
            return Box(x1, y1, x2, y2)
        return None

    def iou(self, other: "Box") -> float:
        return iou(self.as_tuple(), other.as_tuple())


class Instance(NamedTuple):
    category_id: int
    box: Box


@dataclass(frozen=True)
class CategoryPrototype:
    category_id: int
    brand_id: int
    brand_token: int
    glyph: np.ndarray
    shape: np.ndarray
    name_tokens: Tuple[int, ...]
    confusable_group: int


@dataclass(frozen=True)
class Sample:
    sample_id: int
    image: np.ndarray
    caption: Tuple[int, ...]
    split: str
    category_id: Optional[int] = None
    instances: Optional[Tuple[Instance, ...]] = None

    @property
    def is_multi_product(self) -> bool:
        return self.instances is not None and len(self.instances) > 1

    @property
    def instance_categories(self) -> Tuple[int, ...]:
        return tuple(instance.category_id for instance in self.instances or ())

    def labelled_for(self, split: str) -> "Sample":
        """
        Copy of the sample with the annotations its split may expose: none for
        train, the single category for gallery, instances for val/test.
        """
        if split not in SPLITS:
            raise InputError(f"unknown split '{split}'")
        if split == "train":
            return replace(self, split=split, category_id=None, instances=None)
        if split == "gallery":
            if self.instances is None or len(self.instances) != 1:
                raise InputError(f"gallery sample {self.sample_id} must have exactly one instance")
            return replace(self, split=split, category_id=self.instances[0].category_id)
        return replace(self, split=split, category_id=None)


# --------------------------------------------------------------------------
# CATALOG
# --------------------------------------------------------------------------
def confusable_groups(config: CorpusConfig) -> List[List[int]]:
    """
    Partition of category ids into confusable groups: consecutive pairs, an
    odd remainder joining the last pair. Singletons when disabled.
    """
    ids = list(range(config.num_categories))
    if not config.confusable_groups:
        return [[c] for c in ids]
    groups = [ids[i: i + 2] for i in range(0, len(ids) - 1, 2)]
    if len(ids) % 2:
        groups[-1].append(ids[-1])
    return groups


@lru_cache(maxsize=32)
def build_vocabulary(config: CorpusConfig) -> Vocabulary:
    builder = VocabularyBuilder()
    count_ids = {k: builder.add(f"<{k}-piece set>") for k in range(2, MAX_INSTANCES + 1)}
    filler_ids = builder.add_many(f"filler:{j}" for j in range(config.filler_vocab_size))
    brand_ids = builder.add_many(f"brand:{b}" for b in range(config.num_brands))
    for g, _ in enumerate(confusable_groups(config)):
        builder.add_many(f"name:{g}.{j}" for j in range(NAME_BASE_LENGTH))
    builder.add_many(f"item:{c}" for c in range(config.num_categories))
    return builder.build(count_ids, filler_ids, brand_ids)


def _group_shapes(rng: np.random.Generator, count: int, size: int) -> List[np.ndarray]:
    # Ring border keeps every glyph a single connected component.
    shapes: List[np.ndarray] = []
    seen = set()
    interior = max(size - 2, 0)
    for _ in range(count):
        for _attempt in range(64):
            shape = np.ones((size, size), dtype=bool)
            if interior:
                shape[1:-1, 1:-1] = rng.random((interior, interior)) < 0.5
            key = shape.tobytes()
            if key not in seen:
                break
        seen.add(key)
        shapes.append(shape)
    return shapes


def _lift(color) -> np.ndarray:
    # Glyphs must stand out from the dark background in luminance.
    color = np.asarray(color, dtype=np.float64)
    while color @ (0.299, 0.587, 0.114) < MIN_GLYPH_LUMINANCE:
        color = 0.85 * color + 0.15
    return color


def _paint(shape: np.ndarray, color: np.ndarray) -> np.ndarray:
    glyph = np.where(shape[..., None], color, 0.7 * color)
    return glyph.astype(np.float32)


def generate_catalog(config: CorpusConfig) -> List[CategoryPrototype]:
    """
    Build the category prototypes for `config`. Deterministic in `config.seed`.
    """
    if config.num_categories < 2 or config.num_brands < 1:
        raise ConfigurationError("a catalog needs at least 2 categories and 1 brand")
    vocabulary = build_vocabulary(config)
    token_ids = {token: i for i, token in enumerate(vocabulary.tokens)}
    rng = derive_rng(config.seed, _CATALOG_STREAM)
    groups = confusable_groups(config)
    shapes = _group_shapes(rng, len(groups), config.glyph_size)

    catalog: List[Optional[CategoryPrototype]] = [None] * config.num_categories
    for g, members in enumerate(groups):
        brand_id = g % config.num_brands
        hue = (g + rng.uniform(0.0, 0.5)) / len(groups)
        base_color = _lift(hsv_to_rgb([hue, rng.uniform(0.6, 1.0), rng.uniform(0.85, 1.0)]))
        name_length = int(rng.integers(2, NAME_BASE_LENGTH + 2))
        base_tokens = tuple(token_ids[f"name:{g}.{j}"] for j in range(name_length - 1))
        for j, category_id in enumerate(members):
            color = np.array(base_color, dtype=np.float64)
            if j:
                channel = (j - 1) % 3
                shift = -CONFUSABLE_COLOR_SHIFT if color[channel] > 0.5 else CONFUSABLE_COLOR_SHIFT
                color[channel] = np.clip(color[channel] + shift, 0.0, 1.0)
                color = _lift(color)
            catalog[category_id] = CategoryPrototype(
                category_id=category_id,
                brand_id=brand_id,
                brand_token=vocabulary.brand_ids[brand_id],
                glyph=_paint(shapes[g], color),
                shape=shapes[g],
                name_tokens=base_tokens + (token_ids[f"item:{category_id}"],),
                confusable_group=g,
            )
    return [prototype for prototype in catalog if prototype is not None]


def held_out_brands(catalog: Sequence[CategoryPrototype], config: CorpusConfig, count: int) -> Tuple[int, ...]:
    """Query-reachable categories of the first `count` brands."""
    reachable = set(query_categories(config))
    brands = sorted({p.brand_id for p in catalog})[:count]
    return tuple(sorted(p.category_id for p in catalog if p.brand_id in brands and p.category_id in reachable))


# --------------------------------------------------------------------------
# COMPOSITION
# --------------------------------------------------------------------------
def _background(rng: np.random.Generator, config: CorpusConfig) -> np.ndarray:
    size = config.image_size
    base = rng.uniform(0.0, 0.12, size=3)
    image = np.broadcast_to(base, (size, size, 3)).astype(np.float64)
    if config.background == "textured":
        yy, xx = np.mgrid[0:size, 0:size]
        angle = rng.uniform(0.0, np.pi)
        period = rng.uniform(4.0, 12.0)
        phase = rng.uniform(0.0, 2 * np.pi)
        stripes = 0.02 * np.sin(2 * np.pi * (xx * np.cos(angle) + yy * np.sin(angle)) / period + phase)
        image = image + stripes[..., None] + rng.normal(0.0, 0.005, size=(size, size, 1))
    return np.clip(image, 0.0, 1.0)


def _resize_nearest(glyph: np.ndarray, size: int) -> np.ndarray:
    index = (np.arange(size) * glyph.shape[0]) // size
    return glyph[index][:, index]


def _place(rng: np.random.Generator, sizes: Sequence[int], config: CorpusConfig) -> List[Tuple[int, int, int]]:
    placed: List[Tuple[int, int, int]] = []
    margin = config.paste_margin
    for size in sizes:
        for _attempt in range(config.max_placement_retries):
            x = int(rng.integers(0, config.image_size - size + 1))
            y = int(rng.integers(0, config.image_size - size + 1))
            candidate = (x - margin, y - margin, x + size + margin, y + size + margin)
            if all(
                iou(candidate, (px - margin, py - margin, px + ps + margin, py + ps + margin)) <= config.overlap_cap
                for px, py, ps in placed
            ):
                placed.append((x, y, size))
                break
        else:
            raise PlacementError(
                f"could not place {len(sizes)} instances under overlap cap {config.overlap_cap} "
                f"after {config.max_placement_retries} retries"
            )
    return placed


def _caption(
    rng: np.random.Generator,
    prototypes: Sequence[CategoryPrototype],
    catalog: Sequence[CategoryPrototype],
    vocabulary: Vocabulary,
    config: CorpusConfig,
) -> Tuple[int, ...]:
    noise = config.caption_noise
    count = len(prototypes)
    brands = tuple(dict.fromkeys(p.brand_token for p in prototypes))
    products = [list(p.name_tokens) for p in prototypes]
    filler_count = int(rng.integers(0, config.max_filler_tokens + 1))
    fillers = [int(f) for f in rng.choice(vocabulary.filler_ids, size=filler_count)]

    # Every draw happens unconditionally so the stream stays aligned across knob settings.
    abbreviate = rng.random() < noise.abbreviation_prob and count >= 2
    dropped = rng.random(count) < noise.drop_product_mention_prob
    irrelevant = rng.random() < noise.irrelevant_token_prob
    absent = [p for p in catalog if p.category_id not in {q.category_id for q in prototypes}]
    stranger = absent[int(rng.integers(0, len(absent)))] if absent else None

    if abbreviate:
        products = [[vocabulary.count_token(count)]]
    else:
        products = [tokens for tokens, drop in zip(products, dropped) if not drop]
    if irrelevant and stranger is not None:
        products.append(list(stranger.name_tokens))

    segments = [list(brands), *products, fillers]
    if noise.enabled:
        order = rng.permutation(len(segments))
        segments = [segments[i] for i in order]
    caption = [token for segment in segments for token in segment]
    return tuple(caption)


def compose_sample(
    catalog: Sequence[CategoryPrototype],
    category_ids: Sequence[int],
    background_seed: int,
    config: CorpusConfig,
    sample_id: int = 0,
    split: str = "test",
) -> Sample:
    """
    Paste the glyph of every category in `category_ids` onto a fresh background
    and caption the result. All randomness comes from (config.seed,
    background_seed).

    Raises:
        InputError: If the id list is empty, too long, or names an unknown
            category.
        PlacementError: If the instances cannot be placed under the overlap cap.
    """
    if not 1 <= len(category_ids) <= max(config.instances_per_multi[1], 1):
        raise InputError(f"a sample holds 1..{config.instances_per_multi[1]} products, got {len(category_ids)}")
    by_id = {p.category_id: p for p in catalog}
    try:
        prototypes = [by_id[c] for c in category_ids]
    except KeyError as err:
        raise InputError(f"category {err.args[0]} is not in the catalog") from None

    rng = derive_rng(config.seed, _SAMPLE_STREAM, background_seed)
    image = _background(rng, config)
    sizes = [
        int(round(config.glyph_size * rng.uniform(*config.glyph_scale)))
        for _ in prototypes
    ]
    placements = _place(rng, sizes, config)
    side = float(config.image_size)
    instances = []
    for prototype, (x, y, size) in zip(prototypes, placements):
        image[y: y + size, x: x + size] = _resize_nearest(prototype.glyph, size)
        instances.append(Instance(prototype.category_id, Box(x / side, y / side, (x + size) / side, (y + size) / side)))

    caption = _caption(rng, prototypes, catalog, build_vocabulary(config), config)
    return Sample(
        sample_id=sample_id,
        image=image.astype(np.float32),
        caption=caption,
        split=split,
        instances=tuple(instances),
    ).labelled_for(split)


# --------------------------------------------------------------------------
# DATASET
# --------------------------------------------------------------------------
@dataclass(frozen=True)
class DatasetBundle:
    config: CorpusConfig
    catalog: Tuple[CategoryPrototype, ...]
    vocabulary: Vocabulary
    samples: Dict[str, Tuple[Sample, ...]]
    images: np.ndarray

    def split(self, name: str) -> Tuple[Sample, ...]:
        try:
            return self.samples[name]
        except KeyError:
            raise InputError(f"unknown split '{name}'") from None

    def all_samples(self) -> Iterable[Sample]:
        for name in SPLITS:
            yield from self.samples[name]

    @property
    def query_categories(self) -> Tuple[int, ...]:
        return query_categories(self.config)

    @property
    def distractor_categories(self) -> Tuple[int, ...]:
        return distractor_categories(self.config)


def _category_order(config: CorpusConfig) -> np.ndarray:
    return derive_rng(config.seed, _PLAN_STREAM, 0).permutation(config.num_categories)


def distractor_categories(config: CorpusConfig) -> Tuple[int, ...]:
    """Gallery-only categories: never queried in val/test."""
    order = _category_order(config)
    count = config.distractor_count
    return tuple(sorted(int(c) for c in order[len(order) - count:])) if count else ()


def query_categories(config: CorpusConfig) -> Tuple[int, ...]:
    distractors = set(distractor_categories(config))
    return tuple(c for c in range(config.num_categories) if c not in distractors)


def category_weights(config: CorpusConfig) -> np.ndarray:
    """Sampling frequency per category: Zipf over a seeded ranking, or uniform."""
    if not config.long_tail:
        return np.full(config.num_categories, 1.0 / config.num_categories)
    ranks = np.empty(config.num_categories)
    ranks[derive_rng(config.seed, _PLAN_STREAM, 1).permutation(config.num_categories)] = np.arange(config.num_categories)
    weights = 1.0 / (ranks + 1.0) ** config.zipf_exponent
    return weights / weights.sum()


def _draw(rng: np.random.Generator, pool: Sequence[int], weights: np.ndarray, count: int) -> List[int]:
    p = weights[list(pool)]
    return [int(c) for c in rng.choice(pool, size=count, replace=False, p=p / p.sum())]


def _plan(config: CorpusConfig) -> Dict[str, List[List[int]]]:
    """Category ids of every sample, per split, before any pixel is drawn."""
    sizes = config.split_sizes
    low, high = config.instances_per_multi
    reachable = list(query_categories(config))
    held_out = set(config.held_out_categories)
    trainable = [c for c in range(config.num_categories) if c not in held_out]

    if sizes.gallery < config.num_categories:
        raise ConfigurationError(f"gallery of {sizes.gallery} cannot cover {config.num_categories} categories")
    if high > len(reachable):
        raise ConfigurationError(f"{high} instances per query need at least {high} query categories, have {len(reachable)}")
    if not trainable or (config.train_single_fraction < 1.0 and low > len(trainable)):
        raise ConfigurationError("too many held-out categories to compose train samples")

    weights = category_weights(config)
    rng = derive_rng(config.seed, _PLAN_STREAM, 2)

    gallery = list(range(config.num_categories))
    gallery += [int(c) for c in rng.choice(config.num_categories, size=sizes.gallery - len(gallery), p=weights)]
    gallery = [gallery[i] for i in rng.permutation(len(gallery))]

    def multi(pool: Sequence[int], count: int) -> List[List[int]]:
        return [_draw(rng, pool, weights, int(rng.integers(low, high + 1))) for _ in range(count)]

    # Evaluation splits must not depend on held_out_categories: draw them first.
    val = multi(reachable, sizes.val)
    test = multi(reachable, sizes.test)
    train = []
    for _ in range(sizes.train):
        if rng.random() < config.train_single_fraction:
            train.append(_draw(rng, trainable, weights, 1))
        else:
            train.append(_draw(rng, trainable, weights, int(rng.integers(low, min(high, len(trainable)) + 1))))
    return {"train": train, "val": val, "test": test, "gallery": [[c] for c in gallery]}


def build_dataset(config: CorpusConfig, workers: int = 1) -> DatasetBundle:
    """
    Generate the four splits. Sample ids run train, val, test, gallery. Every
    sample derives its randomness from (config.seed, sample_id), so any
    `workers` count produces the same bundle.
    """
    catalog = generate_catalog(config)
    plan = _plan(config)
    jobs = []
    for split in SPLITS:
        for category_ids in plan[split]:
            jobs.append((len(jobs), split, category_ids))

    def make(job) -> Sample:
        sample_id, split, category_ids = job
        return compose_sample(catalog, category_ids, sample_id, config, sample_id=sample_id, split=split)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            composed = list(executor.map(make, jobs))
    else:
        composed = [make(job) for job in jobs]

    images = np.stack([sample.image for sample in composed]).astype(np.float32)
    samples: Dict[str, List[Sample]] = {split: [] for split in SPLITS}
    for sample in composed:
        samples[sample.split].append(replace(sample, image=images[sample.sample_id]))
    logger.info(
        "generated %d samples (%s)",
        len(composed),
        ", ".join(f"{split}={len(samples[split])}" for split in SPLITS),
    )
    return DatasetBundle(
        config=config,
        catalog=tuple(catalog),
        vocabulary=build_vocabulary(config),
        samples={split: tuple(items) for split, items in samples.items()},
        images=images,
    )


# --------------------------------------------------------------------------
# PERSISTENCE
# --------------------------------------------------------------------------
MANIFEST_FILE = "manifest.jsonl"
IMAGE_STORE_FILE = "images.bin"
VOCABULARY_FILE = "vocab.json"
CORPUS_CONFIG_FILE = "corpus_config.json"


def manifest_record(sample: Sample, image_size: int) -> Dict:
    return {
        "id": sample.sample_id,
        "split": sample.split,
        "caption": list(sample.caption),
        "category": sample.category_id,
        "instances": None if sample.instances is None else [
            {"category": instance.category_id, "box": list(instance.box.as_tuple())}
            for instance in sample.instances
        ],
        "image_offset": image_offset(sample.sample_id, image_size, image_size),
    }


def save_dataset(bundle: DatasetBundle, directory: Union[str, Path]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    size = bundle.config.image_size
    write_jsonl(directory / MANIFEST_FILE, (manifest_record(s, size) for s in bundle.all_samples()))
    write_image_store(directory / IMAGE_STORE_FILE, bundle.images)
    bundle.vocabulary.save(directory / VOCABULARY_FILE)
    (directory / CORPUS_CONFIG_FILE).write_text(bundle.config.model_dump_json(indent=1), encoding="utf-8")
    return directory


def load_dataset(directory: Union[str, Path]) -> DatasetBundle:
    directory = Path(directory)
    config = parse_config(CorpusConfig, json.loads((directory / CORPUS_CONFIG_FILE).read_text(encoding="utf-8")))
    images = read_image_store(directory / IMAGE_STORE_FILE)
    per_image = config.image_size * config.image_size * 3 * images.dtype.itemsize
    samples: Dict[str, List[Sample]] = {split: [] for split in SPLITS}
    for record in read_jsonl(directory / MANIFEST_FILE):
        index = (record["image_offset"] - image_offset(0, config.image_size, config.image_size)) // per_image
        instances = None
        if record["instances"] is not None:
            instances = tuple(Instance(i["category"], Box(*i["box"])) for i in record["instances"])
        samples[record["split"]].append(Sample(
            sample_id=record["id"],
            image=images[index],
            caption=tuple(record["caption"]),
            split=record["split"],
            category_id=record["category"],
            instances=instances,
        ))
    return DatasetBundle(
        config=config,
        catalog=tuple(generate_catalog(config)),
        vocabulary=Vocabulary.load(directory / VOCABULARY_FILE),
        samples={split: tuple(items) for split, items in samples.items()},
        images=images,
    )
