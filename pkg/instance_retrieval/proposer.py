"""
Region proposals and region features.

A `RegionProposer` turns an image into a handful of boxes (from ground truth,
perturbed ground truth, a color heuristic or the whole frame) and every
box into a fixed-length feature: the box is cropped, resampled onto a G×G grid
and pushed through a frozen random projection. The projection depends only on
(seed, G, d_v), so it is shared by every image of a corpus.

The heuristic separates foreground from the median luminance and gives one
box per color class (pixels sharing an RGB direction), so touching glyphs of
different categories stay apart. Images with too many colors fall back to
connected components.
"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from instance_retrieval.config import ProposerConfig, derive_config
from instance_retrieval.corpus import Box
from instance_retrieval.error import InputError, UsageError
from instance_retrieval.store import read_region_cache, write_region_cache
from instance_retrieval.utils import derive_rng

logger = logging.getLogger(__name__)

SPATIAL_DIM = 5
LUMINANCE_WEIGHTS = np.array([0.299, 0.587, 0.114])

_PROJECTION_STREAM = 0x7E0
_PROPOSAL_STREAM = 0xB0C5


class RegionFeature(NamedTuple):
    feature: np.ndarray
    spatial: np.ndarray
    degenerate: bool


@dataclass(frozen=True)
class RegionSet:
    boxes: Tuple[Box, ...]
    features: np.ndarray
    spatial: np.ndarray
    degenerate: Tuple[bool, ...]

    def __post_init__(self):
        count = len(self.boxes)
        if count < 1:
            raise InputError("a region set holds at least one region")
        if self.features.shape[0] != count or self.spatial.shape != (count, SPATIAL_DIM):
            raise InputError(
                f"region set of {count} boxes has features {self.features.shape} and spatial {self.spatial.shape}"
            )

    def __len__(self) -> int:
        return len(self.boxes)

    def select(self, rows: Sequence[int]) -> "RegionSet":
        rows = list(rows)
        return RegionSet(
            boxes=tuple(self.boxes[i] for i in rows),
            features=self.features[rows],
            spatial=self.spatial[rows],
            degenerate=tuple(self.degenerate[i] for i in rows),
        )

    def largest(self) -> "RegionSet":
        """The single region with the largest box (ties: first)."""
        areas = [box.area for box in self.boxes]
        return self.select([int(np.argmax(areas))])

    def single(self, row: int) -> "RegionSet":
        return self.select([row])


# --------------------------------------------------------------------------
# FEATURES
# --------------------------------------------------------------------------
@lru_cache(maxsize=16)
def projection_matrix(seed: int, in_dim: int, out_dim: int) -> np.ndarray:
    """
    Frozen semi-orthogonal projection (in_dim, out_dim): orthonormal columns
    when in_dim >= out_dim, orthonormal rows otherwise.
    """
    rng = derive_rng(seed, _PROJECTION_STREAM, in_dim, out_dim)
    tall = max(in_dim, out_dim), min(in_dim, out_dim)
    q, r = np.linalg.qr(rng.standard_normal(tall))
    # Sign fix makes the factorisation unique.
    q = q * np.sign(np.diag(r))
    matrix = q if in_dim >= out_dim else q.T
    matrix.setflags(write=False)
    return matrix


def pixel_span(box: Box, height: int, width: int) -> Tuple[int, int, int, int]:
    """Integer pixel rectangle (x0, y0, x1, y1), exclusive end, covering `box`."""
    x0 = min(int(math.floor(box.x1 * width)), width - 1)
    y0 = min(int(math.floor(box.y1 * height)), height - 1)
    x1 = max(min(int(math.ceil(box.x2 * width)), width), x0 + 1)
    y1 = max(min(int(math.ceil(box.y2 * height)), height), y0 + 1)
    return x0, y0, x1, y1


def crop_region(image: np.ndarray, box: Box, grid: int) -> np.ndarray:
    """
    Crop the pixels covering `box` and resample them bilinearly (corner
    aligned) onto a (grid, grid, 3) array.
    """
    height, width = image.shape[:2]
    x0, y0, x1, y1 = pixel_span(box, height, width)
    crop = torch.from_numpy(np.ascontiguousarray(image[y0:y1, x0:x1], dtype=np.float64))
    crop = crop.permute(2, 0, 1).unsqueeze(0)
    if crop.shape[-2:] == (grid, grid):
        resized = crop
    elif crop.shape[-2] == 1 or crop.shape[-1] == 1 or grid == 1:
        # align_corners is undefined for one-pixel axes; nearest sampling is exact there.
        resized = F.interpolate(crop, size=(grid, grid), mode="nearest")
    else:
        resized = F.interpolate(crop, size=(grid, grid), mode="bilinear", align_corners=True)
    return resized.squeeze(0).permute(1, 2, 0).numpy()


def spatial_encoding(box: Box) -> np.ndarray:
    return np.array([box.x1, box.y1, box.x2, box.y2, box.area], dtype=np.float32)


# --------------------------------------------------------------------------
# PROPOSALS
# --------------------------------------------------------------------------
def _luminance(image: np.ndarray) -> np.ndarray:
    return image[..., :3] @ LUMINANCE_WEIGHTS


def _color_classes(pixels: np.ndarray, tolerance: float, limit: int) -> Optional[np.ndarray]:
    """
    Group (n, 3) pixels by RGB direction, so a glyph and its shaded interior
    share a class. Returns one class index per pixel, or None when more than
    `limit` classes appear.
    """
    colors, inverse = np.unique(pixels.round(4), axis=0, return_inverse=True)
    directions = colors / np.maximum(np.linalg.norm(colors, axis=1, keepdims=True), 1e-12)
    centers: List[np.ndarray] = []
    assignment = np.empty(len(colors), dtype=np.int64)
    for i, direction in enumerate(directions):
        for c, center in enumerate(centers):
            if np.max(np.abs(direction - center)) <= tolerance:
                assignment[i] = c
                break
        else:
            if len(centers) == limit:
                return None
            centers.append(direction)
            assignment[i] = len(centers) - 1
    return assignment[inverse.reshape(-1)]


def _heuristic_boxes(image: np.ndarray, config: ProposerConfig) -> List[Box]:
    height, width = image.shape[:2]
    luminance = _luminance(image)
    foreground = np.abs(luminance - np.median(luminance)) > config.luminance_threshold
    classes = _color_classes(image[..., :3][foreground], config.color_tolerance, config.max_color_classes)
    if classes is None:
        logger.debug("too many colors for class labelling, using connected components")
        labels, _ = ndimage.label(foreground)
    else:
        labels = np.zeros(foreground.shape, dtype=np.int64)
        labels[foreground] = classes + 1
    boxes = []
    for found in ndimage.find_objects(labels):
        if found is None:
            continue
        rows, cols = found
        box = Box(cols.start / width, rows.start / height, cols.stop / width, rows.stop / height)
        if box.area >= config.min_area_fraction:
            boxes.append(box)
    boxes.sort(key=lambda b: b.area, reverse=True)
    return boxes


def _jitter_boxes(boxes: Sequence[Box], rng: np.random.Generator, config: ProposerConfig) -> List[Box]:
    jittered = []
    for box in boxes:
        x1, y1, x2, y2 = np.asarray(box.as_tuple()) + rng.normal(0.0, config.jitter_sigma, size=4)
        keep = rng.random() >= config.miss_prob
        (x1, x2), (y1, y2) = sorted((x1, x2)), sorted((y1, y2))
        if keep and x1 < x2 and y1 < y2:
            jittered.append(Box(float(x1), float(y1), float(x2), float(y2)))
    for _ in range(int(rng.poisson(config.spurious_rate))):
        w, h = rng.uniform(0.05, 0.4, size=2)
        x, y = rng.uniform(0.0, 1.0 - w), rng.uniform(0.0, 1.0 - h)
        jittered.append(Box(float(x), float(y), float(x + w), float(y + h)))
    return jittered


def propose_regions(
    image: np.ndarray,
    ground_truth_boxes: Optional[Sequence[Box]],
    config: ProposerConfig,
    rng: Optional[np.random.Generator] = None,
) -> List[Box]:
    """
    Boxes for `image` under `config.mode`. The result is clipped to the unit
    square, truncated to `r_max` and never empty.

    :param ground_truth_boxes: Required by the `oracle` and `jitter` modes.
    :param rng: Random stream for the `jitter` mode. Defaults to one derived
        from `config.seed`.
    """
    mode = config.mode
    if mode in ("oracle", "jitter") and ground_truth_boxes is None:
        raise UsageError(f"proposer mode '{mode}' needs ground-truth boxes")

    if mode == "oracle":
        boxes = list(ground_truth_boxes)
    elif mode == "jitter":
        boxes = _jitter_boxes(ground_truth_boxes, rng if rng is not None else derive_rng(config.seed, _PROPOSAL_STREAM), config)
    elif mode == "heuristic":
        boxes = _heuristic_boxes(image, config)
    else:
        boxes = [Box.whole_image()]

    clipped = [c for c in (box.clip() for box in boxes) if c is not None][: config.r_max]
    return clipped or [Box.whole_image()]


class RegionProposer:
    """
    Holds a proposer configuration and its projection.

    :param config: Proposal mode and feature shape.
    """

    def __init__(self, config: ProposerConfig):
        self.config = config
        self.projection = projection_matrix(config.seed, 3 * config.grid * config.grid, config.d_v)

    def with_mode(self, mode: str, **update) -> "RegionProposer":
        return RegionProposer(derive_config(self.config, mode=mode, **update))

    def feature(self, image: np.ndarray, box: Box) -> RegionFeature:
        clipped = box.clip()
        degenerate = clipped is None
        if degenerate:
            logger.warning("degenerate box %s replaced by the whole image", box.as_tuple())
            clipped = Box.whole_image()
        crop = crop_region(image, clipped, self.config.grid)
        feature = (crop.reshape(-1) @ self.projection).astype(np.float32)
        if not np.all(np.isfinite(feature)):
            raise InputError(f"non-finite region feature for box {box.as_tuple()}")
        return RegionFeature(feature, spatial_encoding(clipped), degenerate)

    def propose(self, image: np.ndarray, ground_truth_boxes: Optional[Sequence[Box]] = None, key: int = 0) -> List[Box]:
        rng = derive_rng(self.config.seed, _PROPOSAL_STREAM, key)
        return propose_regions(image, ground_truth_boxes, self.config, rng=rng)

    def features_for(self, image: np.ndarray, boxes: Sequence[Box]) -> RegionSet:
        extracted = [self.feature(image, box) for box in boxes]
        return RegionSet(
            boxes=tuple(boxes),
            features=np.stack([e.feature for e in extracted]),
            spatial=np.stack([e.spatial for e in extracted]),
            degenerate=tuple(e.degenerate for e in extracted),
        )

    def region_set(self, image: np.ndarray, ground_truth_boxes: Optional[Sequence[Box]] = None, key: int = 0) -> RegionSet:
        """
        Propose and extract in one step. `key` (usually the sample id) selects
        the random stream, so the same sample always gets the same proposals.
        """
        return self.features_for(image, self.propose(image, ground_truth_boxes, key))


def extract_region_feature(image: np.ndarray, box: Box, config: ProposerConfig) -> RegionFeature:
    return RegionProposer(config).feature(image, box)


# --------------------------------------------------------------------------
# CACHE
# --------------------------------------------------------------------------
REGION_INDEX_FILE = "regions.jsonl"
REGION_DATA_FILE = "regions.bin"


def save_region_cache(directory: Union[str, Path], region_sets: Mapping[int, RegionSet]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, rows = [], []
    for sample_id, regions in sorted(region_sets.items()):
        entries.append({
            "id": sample_id,
            "boxes": [list(box.as_tuple()) for box in regions.boxes],
            "degenerate": list(regions.degenerate),
        })
        rows.append(np.concatenate([regions.features, regions.spatial], axis=1))
    write_region_cache(directory / REGION_INDEX_FILE, directory / REGION_DATA_FILE, entries, rows)


def load_region_cache(directory: Union[str, Path]) -> Dict[int, RegionSet]:
    directory = Path(directory)
    region_sets = {}
    for entry, block in read_region_cache(directory / REGION_INDEX_FILE, directory / REGION_DATA_FILE):
        region_sets[entry["id"]] = RegionSet(
            boxes=tuple(Box(*coords) for coords in entry["boxes"]),
            features=np.array(block[:, :-SPATIAL_DIM]),
            spatial=np.array(block[:, -SPATIAL_DIM:]),
            degenerate=tuple(entry["degenerate"]),
        )
    return region_sets
