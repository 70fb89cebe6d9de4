"""
Gallery index, instance-level retrieval and ranking metrics.

Each query proposal is scored against every gallery row by cosine similarity,
the per-proposal scores are merged per gallery item (max by default), and the
gallery is ranked by merged score with ties broken by ascending id.

Metric definitions, with R the number of relevant gallery items for a query:

    Prec@N = hits(N) / N
    AP@N   = sum_{k <= N, rel(k)} Prec@k / min(R, N)
    AR@N   = hits(N) / R

Queries with R = 0 are excluded from the means and listed in the report.
"""

import csv
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, Field

from instance_retrieval.config import MergeRule
from instance_retrieval.corpus import Sample
from instance_retrieval.error import EncodingError, InputError
from instance_retrieval.model import HybridStreamTransformer, collate, instance_embedding
from instance_retrieval.proposer import RegionProposer, RegionSet
from instance_retrieval.store import read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

METRIC_DEFINITIONS = {
    "Prec@N": "hits in top N / N",
    "AP@N": "sum over relevant ranks k <= N of Prec@k, divided by min(R, N)",
    "AR@N": "hits in top N / R, R = relevant gallery items for the query",
    "relevance": "gallery item category is one of the query's instance categories",
    "ranking": "cosine similarity, max-merged over proposals unless stated, ties by ascending gallery id",
}

PathLike = Union[str, Path]


# --------------------------------------------------------------------------
# ENCODING
# --------------------------------------------------------------------------
def embed_pairs(
    model: HybridStreamTransformer,
    captions: Sequence[Sequence[int]],
    regions: Sequence[RegionSet],
    concat: bool = True,
    batch_size: int = 64,
) -> np.ndarray:
    """Normalized instance embeddings, one row per (caption, region set) pair."""
    model.eval()
    rows = []
    with torch.no_grad():
        for start in range(0, len(captions), batch_size):
            inputs = collate(captions[start: start + batch_size], regions[start: start + batch_size], model.config)
            rows.append(instance_embedding(model(inputs), concat=concat).numpy().astype(np.float64))
    return np.concatenate(rows, axis=0)


def _ground_truth_boxes(sample: Sample):
    return [instance.box for instance in sample.instances] if sample.instances is not None else None


@dataclass(frozen=True)
class GalleryIndex:
    """
    One unit-norm row per gallery sample. Categories are kept for evaluation
    only; ranking never reads them.
    """

    ids: Tuple[int, ...]
    embeddings: np.ndarray
    _categories: Mapping[int, int] = field(repr=False, default_factory=dict)

    def __post_init__(self):
        if len(self.ids) != self.embeddings.shape[0]:
            raise InputError("gallery index needs one embedding row per id")
        embeddings = np.array(self.embeddings, dtype=np.float64)
        embeddings.setflags(write=False)
        object.__setattr__(self, "embeddings", embeddings)

    def __len__(self) -> int:
        return len(self.ids)

    def category_of(self, gallery_id: int) -> int:
        return self._categories[gallery_id]

    def categories(self) -> Dict[int, int]:
        return dict(self._categories)


def build_gallery_index(
    gallery: Sequence[Sample],
    model: HybridStreamTransformer,
    proposer: RegionProposer,
    concat: bool = True,
    batch_size: int = 64,
) -> GalleryIndex:
    """
    Encode every gallery sample with its largest proposal and its caption.

    Raises:
        EncodingError: Naming the first sample that could not be encoded.
    """
    if not gallery:
        raise InputError("the gallery is empty")
    captions, regions = [], []
    for sample in gallery:
        if sample.category_id is None or sample.is_multi_product:
            raise InputError(f"gallery sample {sample.sample_id} must be a labelled single-product sample")
        try:
            regions.append(proposer.region_set(sample.image, _ground_truth_boxes(sample), key=sample.sample_id).largest())
        except Exception as err:
            raise EncodingError(f"cannot encode gallery sample {sample.sample_id}: {err}", sample_id=sample.sample_id) from err
        captions.append(sample.caption)
    try:
        embeddings = embed_pairs(model, captions, regions, concat=concat, batch_size=batch_size)
    except Exception as err:
        offender = _first_failure(model, captions, regions, concat, [s.sample_id for s in gallery])
        raise EncodingError(f"cannot encode gallery sample {offender}: {err}", sample_id=offender) from err
    logger.info("indexed %d gallery samples", len(gallery))
    return GalleryIndex(
        ids=tuple(s.sample_id for s in gallery),
        embeddings=embeddings,
        _categories={s.sample_id: s.category_id for s in gallery},
    )


def _first_failure(model, captions, regions, concat, ids) -> Optional[int]:
    for caption, region_set, sample_id in zip(captions, regions, ids):
        try:
            embed_pairs(model, [caption], [region_set], concat=concat)
        except Exception:
            return sample_id
    return None


# --------------------------------------------------------------------------
# RETRIEVAL
# --------------------------------------------------------------------------
@dataclass(frozen=True)
class RetrievalResult:
    query_id: int
    ranked_ids: Tuple[int, ...]
    scores: Tuple[float, ...]

    def to_record(self) -> Dict:
        return {"query": self.query_id, "ranked": list(self.ranked_ids), "scores": list(self.scores)}

    @classmethod
    def from_record(cls, record: Mapping) -> "RetrievalResult":
        return cls(record["query"], tuple(record["ranked"]), tuple(record["scores"]))


def rank(ids: Sequence[int], scores: np.ndarray) -> Tuple[Tuple[int, ...], Tuple[float, ...]]:
    """Sort by score descending, ties by ascending id."""
    ids_array = np.asarray(ids)
    order = np.lexsort((ids_array, -scores))
    return tuple(int(i) for i in ids_array[order]), tuple(float(s) for s in scores[order])


def retrieve_embeddings(query_id: int, proposal_embeddings: np.ndarray, index: GalleryIndex, merge: MergeRule = "max") -> RetrievalResult:
    if proposal_embeddings.ndim != 2 or proposal_embeddings.shape[0] < 1:
        raise InputError("a query needs at least one proposal embedding")
    similarities = proposal_embeddings @ index.embeddings.T
    if merge == "max":
        merged = similarities.max(axis=0)
    elif merge == "mean":
        merged = similarities.mean(axis=0)
    else:
        raise InputError(f"unknown merge rule '{merge}'")
    ranked, scores = rank(index.ids, merged)
    return RetrievalResult(query_id, ranked, scores)


def embed_query(
    sample: Sample,
    model: HybridStreamTransformer,
    proposer: RegionProposer,
    concat: bool = True,
    regions: Optional[RegionSet] = None,
) -> np.ndarray:
    """One embedding per proposal, each paired with the full caption. `regions` skips the proposer."""
    if regions is None:
        regions = proposer.region_set(sample.image, _ground_truth_boxes(sample), key=sample.sample_id)
    try:
        return embed_pairs(model, [sample.caption] * len(regions), [regions.single(i) for i in range(len(regions))], concat=concat)
    except Exception as err:
        raise EncodingError(f"cannot encode query {sample.sample_id}: {err}", sample_id=sample.sample_id) from err


def retrieve(
    query: Sample,
    model: HybridStreamTransformer,
    proposer: RegionProposer,
    index: GalleryIndex,
    merge: MergeRule = "max",
    concat: bool = True,
    regions: Optional[RegionSet] = None,
) -> RetrievalResult:
    return retrieve_embeddings(query.sample_id, embed_query(query, model, proposer, concat, regions), index, merge)


def retrieve_all(
    queries: Iterable[Sample],
    model: HybridStreamTransformer,
    proposer: RegionProposer,
    index: GalleryIndex,
    merge: MergeRule = "max",
    concat: bool = True,
    regions: Optional[Mapping[int, RegionSet]] = None,
) -> List[RetrievalResult]:
    regions = regions or {}
    return [retrieve(q, model, proposer, index, merge, concat, regions.get(q.sample_id)) for q in queries]


def save_results(path: PathLike, results: Iterable[RetrievalResult]) -> None:
    write_jsonl(path, (r.to_record() for r in results))


def load_results(path: PathLike) -> List[RetrievalResult]:
    return [RetrievalResult.from_record(record) for record in read_jsonl(path)]


# --------------------------------------------------------------------------
# GROUND TRUTH
# --------------------------------------------------------------------------
@dataclass(frozen=True)
class GroundTruth:
    queries: Mapping[int, FrozenSet[int]]
    gallery: Mapping[int, int]

    @classmethod
    def from_samples(cls, queries: Iterable[Sample], gallery: Iterable[Sample]) -> "GroundTruth":
        query_map = {}
        for sample in queries:
            if sample.instances is None:
                raise InputError(f"query {sample.sample_id} carries no instance annotations")
            query_map[sample.sample_id] = frozenset(sample.instance_categories)
        return cls(query_map, {s.sample_id: s.category_id for s in gallery})

    @classmethod
    def from_index(cls, queries: Mapping[int, Iterable[int]], index: GalleryIndex) -> "GroundTruth":
        return cls({q: frozenset(c) for q, c in queries.items()}, index.categories())

    def relevant_count(self, query_id: int) -> int:
        # A query never counts as relevant to itself (leave-one-out over the gallery).
        categories = self.queries[query_id]
        return sum(1 for g, category in self.gallery.items() if category in categories and g != query_id)

    def relevance(self, query_id: int, ranked_ids: Sequence[int]) -> List[bool]:
        categories = self.queries[query_id]
        return [self.gallery[g] in categories for g in ranked_ids]


def restrict_ground_truth(ground_truth: GroundTruth, categories: Iterable[int]) -> GroundTruth:
    """
    Keep only `categories` as relevant. Queries without any of them are
    dropped.
    """
    keep = frozenset(categories)
    queries = {q: c & keep for q, c in ground_truth.queries.items() if c & keep}
    return GroundTruth(queries, ground_truth.gallery)


# --------------------------------------------------------------------------
# METRICS
# --------------------------------------------------------------------------
@dataclass(frozen=True)
class QueryMetrics:
    ap: Dict[int, Fraction]
    ar: Dict[int, Fraction]
    prec: Dict[int, Fraction]


def query_metrics(relevance: Sequence[bool], relevant_total: int, cutoffs: Sequence[int]) -> QueryMetrics:
    """
    Exact AP@N, AR@N and Prec@N of one ranked relevance list.

    :param relevant_total: R, the number of relevant gallery items; must be
        positive.
    """
    if relevant_total <= 0:
        raise InputError("metrics are undefined for a query with no relevant items")
    ap, ar, prec = {}, {}, {}
    for cutoff in cutoffs:
        hits = 0
        precision_sum = Fraction(0)
        for k, relevant in enumerate(relevance[:cutoff], start=1):
            if relevant:
                hits += 1
                precision_sum += Fraction(hits, k)
        ap[cutoff] = precision_sum / min(relevant_total, cutoff)
        ar[cutoff] = Fraction(hits, relevant_total)
        prec[cutoff] = Fraction(hits, cutoff)
    return QueryMetrics(ap, ar, prec)


class QueryReport(BaseModel):
    query_id: int
    relevant: int
    ap: Dict[int, float]
    ar: Dict[int, float]
    prec: Dict[int, float]


class MetricReport(BaseModel):
    """Per-query and mean metrics at each cutoff, with the definitions used."""

    definitions: Dict[str, str] = Field(default_factory=lambda: dict(METRIC_DEFINITIONS))
    cutoffs: List[int]
    query_count: int
    excluded_queries: List[int] = Field(default_factory=list)
    chance_precision: Optional[float] = None
    means: Dict[str, float] = Field(default_factory=dict)
    per_query: List[QueryReport] = Field(default_factory=list)

    def metric(self, name: str, cutoff: int) -> float:
        key = f"{name}@{cutoff}"
        try:
            return self.means[key]
        except KeyError:
            raise InputError(f"report has no metric '{key}'") from None

    def save(self, path: PathLike) -> None:
        Path(path).write_text(self.model_dump_json(indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: PathLike) -> "MetricReport":
        return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))

    def write_per_query_csv(self, path: PathLike) -> None:
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(
                ["query", "relevant"]
                + [f"{name}@{n}" for n in self.cutoffs for name in ("AP", "AR", "Prec")]
            )
            for query in self.per_query:
                writer.writerow(
                    [query.query_id, query.relevant]
                    + [repr(value) for n in self.cutoffs for value in (query.ap[n], query.ar[n], query.prec[n])]
                )


def evaluate(results: Iterable[RetrievalResult], ground_truth: GroundTruth, cutoffs: Sequence[int] = (10, 50, 100)) -> MetricReport:
    """
    Score ranked results against ground truth. Means are computed exactly and
    rounded to float once.
    """
    cutoffs = sorted(set(cutoffs))
    per_query: List[QueryReport] = []
    sums = {(name, n): Fraction(0) for name in ("mAP", "mAR", "Prec") for n in cutoffs}
    excluded: List[int] = []
    for result in results:
        if result.query_id not in ground_truth.queries:
            continue
        relevant_total = ground_truth.relevant_count(result.query_id)
        if relevant_total == 0:
            excluded.append(result.query_id)
            continue
        metrics = query_metrics(ground_truth.relevance(result.query_id, result.ranked_ids), relevant_total, cutoffs)
        for n in cutoffs:
            sums[("mAP", n)] += metrics.ap[n]
            sums[("mAR", n)] += metrics.ar[n]
            sums[("Prec", n)] += metrics.prec[n]
        per_query.append(QueryReport(
            query_id=result.query_id,
            relevant=relevant_total,
            ap={n: float(v) for n, v in metrics.ap.items()},
            ar={n: float(v) for n, v in metrics.ar.items()},
            prec={n: float(v) for n, v in metrics.prec.items()},
        ))
    if excluded:
        logger.warning("%d queries have no relevant gallery item and are excluded", len(excluded))
    count = len(per_query)
    means = {f"{name}@{n}": float(total / count) if count else 0.0 for (name, n), total in sums.items()}
    return MetricReport(cutoffs=cutoffs, query_count=count, excluded_queries=excluded, means=means, per_query=per_query)


def evaluate_single_product(index: GalleryIndex, cutoffs: Sequence[int] = (10, 50, 100)) -> MetricReport:
    """
    Leave-one-out retrieval over the gallery: each item queries all others and
    items of the same category are relevant.
    """
    results = []
    for row, gallery_id in enumerate(index.ids):
        others = [i for i in range(len(index.ids)) if i != row]
        scores = index.embeddings[others] @ index.embeddings[row]
        ranked, ranked_scores = rank([index.ids[i] for i in others], scores)
        results.append(RetrievalResult(gallery_id, ranked, ranked_scores))
    ground_truth = GroundTruth({g: frozenset({index.category_of(g)}) for g in index.ids}, index.categories())
    return evaluate(results, ground_truth, cutoffs)


def chance_precision(ground_truth: GroundTruth) -> float:
    """Expected Prec@N of a uniformly random ranking: the mean relevant fraction of the gallery."""
    size = len(ground_truth.gallery)
    fractions = [ground_truth.relevant_count(q) / size for q in ground_truth.queries]
    return float(np.mean(fractions)) if fractions else 0.0


def random_ranking(query_id: int, gallery_ids: Sequence[int], rng: np.random.Generator) -> RetrievalResult:
    order = rng.permutation(len(gallery_ids))
    return RetrievalResult(query_id, tuple(int(gallery_ids[i]) for i in order), tuple(0.0 for _ in order))


def export_embeddings(path: PathLike, index: GalleryIndex) -> None:
    ids = np.asarray(index.ids, dtype=np.int64)
    np.savez(path, ids=ids, embeddings=index.embeddings, categories=np.asarray([index.category_of(i) for i in index.ids], dtype=np.int64))


def load_embeddings(path: PathLike) -> GalleryIndex:
    """Inverse of `export_embeddings`."""
    try:
        with np.load(path) as data:
            ids = tuple(int(i) for i in data["ids"])
            return GalleryIndex(ids, data["embeddings"], dict(zip(ids, (int(c) for c in data["categories"]))))
    except (OSError, KeyError, ValueError) as err:
        raise InputError(f"cannot read gallery embeddings {path}: {err}") from err
