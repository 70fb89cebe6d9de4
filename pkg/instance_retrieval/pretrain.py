"""
Self-supervised pretraining: masked language modeling, masked region
prediction, the cross-modal contrastive loss and (as an ablation) image-text
matching, plus the training loop that optimizes their sum.
"""

import csv
import logging
import math
import queue
import threading
from contextlib import closing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm.auto import tqdm

from instance_retrieval.config import LossSwitches, ModelConfig, PretrainConfig
from instance_retrieval.corpus import DatasetBundle
from instance_retrieval.error import ConfigurationError, DivergenceError, InputError, NumericGuardError, UsageError
from instance_retrieval.model import HybridStreamTransformer, ModelInputs, collate, save_checkpoint
from instance_retrieval.proposer import RegionProposer, RegionSet
from instance_retrieval.utils import torch_generator
from instance_retrieval.vocab import CLS_ID, FIRST_CONTENT_ID, MASK_ID, PAD_ID

logger = logging.getLogger(__name__)

IGNORE_INDEX = -100
LOSS_NAMES = ("mlm", "mrp", "ctr", "itm")
LOSS_CURVE_COLUMNS = ("step", *LOSS_NAMES, "total", "lr")

_MAX_REDRAWS = 1000
_PREFETCH_POLL_SECONDS = 0.05
PREFETCH_THREAD_NAME = "pretrain-prefetch"


@dataclass
class MaskedBatch:
    """
    Corrupted inputs and their reconstruction targets.

    `mlm_labels` holds the original id at masked text positions and -100
    elsewhere; `region_targets` holds the original region features.
    """

    inputs: ModelInputs
    original: ModelInputs
    mlm_labels: torch.Tensor
    text_masked: torch.Tensor
    region_masked: torch.Tensor
    region_targets: torch.Tensor


def _select(eligible: torch.Tensor, prob: float, generator: torch.Generator) -> torch.Tensor:
    """Bernoulli(prob) selection over eligible positions, redrawn until every row with an eligible position has one selected."""
    selected = (torch.rand(eligible.shape, generator=generator) < prob) & eligible
    if prob <= 0.0:
        return selected
    for _ in range(_MAX_REDRAWS):
        missing = eligible.any(dim=1) & ~selected.any(dim=1)
        if not bool(missing.any()):
            return selected
        redraw = (torch.rand(eligible.shape, generator=generator) < prob) & eligible
        selected = torch.where(missing[:, None], redraw, selected)
    # Practically unreachable: force one eligible position per remaining row.
    for row in torch.nonzero(eligible.any(dim=1) & ~selected.any(dim=1)).flatten().tolist():
        candidates = torch.nonzero(eligible[row]).flatten()
        selected[row, candidates[torch.randint(len(candidates), (1,), generator=generator)]] = True
    return selected


def mask_batch(
    inputs: ModelInputs,
    config: PretrainConfig,
    vocab_size: int,
    generator: torch.Generator,
    mask_prob: Optional[float] = None,
) -> MaskedBatch:
    """
    Corrupt a batch for MLM and MRP.

    Text positions other than [CLS] and [PAD] are selected with `mask_prob`
    and replaced by [MASK], a random content token or themselves according to
    `config.mlm_corruption`. Regions are selected with the same probability and
    their features zeroed.

    :param vocab_size: Size of the corpus vocabulary; random replacements are
        content tokens below it.
    :param mask_prob: Overrides `config.mask_prob`; 0 disables masking.
    """
    if inputs.batch_size < 1:
        raise InputError("cannot mask an empty batch")
    if vocab_size <= FIRST_CONTENT_ID:
        raise InputError(f"a vocabulary of {vocab_size} tokens has no content tokens")
    prob = config.mask_prob if mask_prob is None else mask_prob
    corruption = config.mlm_corruption

    ids = inputs.token_ids
    eligible_text = inputs.text_mask & (ids != CLS_ID) & (ids != PAD_ID)
    text_masked = _select(eligible_text, prob, generator)
    region_masked = _select(inputs.region_mask, prob, generator)

    draw = torch.rand(ids.shape, generator=generator)
    random_ids = torch.randint(FIRST_CONTENT_ID, vocab_size, ids.shape, generator=generator)
    to_mask = text_masked & (draw < corruption.replace_with_mask)
    to_random = text_masked & (draw >= corruption.replace_with_mask) & (draw < corruption.replace_with_mask + corruption.random_token)
    corrupted_ids = torch.where(to_mask, torch.full_like(ids, MASK_ID), ids)
    corrupted_ids = torch.where(to_random, random_ids, corrupted_ids)

    features = inputs.region_features.masked_fill(region_masked[..., None], 0.0)
    corrupted = ModelInputs(corrupted_ids, inputs.text_mask, features, inputs.region_spatial, inputs.region_mask)
    return MaskedBatch(
        inputs=corrupted,
        original=inputs,
        mlm_labels=torch.where(text_masked, ids, torch.full_like(ids, IGNORE_INDEX)),
        text_masked=text_masked,
        region_masked=region_masked,
        region_targets=inputs.region_features.clone(),
    )


# --------------------------------------------------------------------------
# LOSSES
# --------------------------------------------------------------------------
def mlm_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over positions whose label is not -100."""
    if not bool((labels != IGNORE_INDEX).any()):
        logger.warning("no masked text positions in batch; MLM loss is 0")
        return logits.sum() * 0.0
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1), ignore_index=IGNORE_INDEX)


def mrp_loss(predictions: torch.Tensor, targets: torch.Tensor, region_masked: torch.Tensor) -> torch.Tensor:
    """Mean squared error over the masked regions."""
    if not bool(region_masked.any()):
        logger.warning("no masked regions in batch; MRP loss is 0")
        return predictions.sum() * 0.0
    return F.mse_loss(predictions[region_masked], targets[region_masked])


def contrastive_loss(image: torch.Tensor, text: torch.Tensor, temperature: float) -> torch.Tensor:
    """
    Normalized temperature-scaled cross entropy over the 2N points of a
    batch of N image-text pairs.

    Every point is an anchor whose positive is its partner of the other
    modality; the remaining 2N - 2 points are negatives. Similarity is cosine
    similarity divided by `temperature`, and the mean is taken over all 2N
    anchors.

    Raises:
        NumericGuardError: If any embedding is the zero vector.
    """
    if image.shape != text.shape or image.ndim != 2:
        raise InputError(f"contrastive loss needs two (N, d) batches, got {tuple(image.shape)} and {tuple(text.shape)}")
    points = torch.cat([image, text], dim=0)
    norms = points.norm(dim=1, keepdim=True)
    if bool((norms == 0).any()):
        raise NumericGuardError("contrastive loss got a zero embedding")
    points = points / norms
    count = image.shape[0]
    similarity = points @ points.T / temperature
    self_mask = torch.eye(2 * count, dtype=torch.bool, device=points.device)
    similarity = similarity.masked_fill(self_mask, float("-inf"))
    partners = torch.cat([torch.arange(count, 2 * count), torch.arange(0, count)]).to(points.device)
    return F.cross_entropy(similarity, partners)


def itm_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, labels)


class PretrainingHeads(nn.Module):
    """
    Output heads used only while pretraining. A head is built only if the
    model's modality can feed it.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        if config.modality != "image":
            self.mlm_decoder = nn.Linear(config.d_model, config.vocab_size)
        if config.modality != "text":
            self.mrp_regressor = nn.Linear(config.d_model, config.d_v)
        if config.modality == "multimodal":
            self.itm_classifier = nn.Linear(config.d_head_out, 2)
        generator = torch_generator(config.seed + 1)
        with torch.no_grad():
            for name, parameter in self.named_parameters():
                if name.endswith(".bias"):
                    parameter.zero_()
                else:
                    parameter.copy_(torch.randn(parameter.shape, generator=generator) * 0.02)


def check_loss_compatibility(config: ModelConfig, switches: LossSwitches) -> None:
    allowed = {"multimodal": set(LOSS_NAMES), "text": {"mlm"}, "image": {"mrp"}}[config.modality]
    unusable = [name for name in switches.enabled() if name not in allowed]
    if unusable:
        raise ConfigurationError(
            f"a {config.modality} model cannot train with {', '.join(unusable)}",
            extensions={"modality": config.modality, "losses": unusable},
        )


def build_itm_batch(
    inputs: ModelInputs, generator: torch.Generator, negative_prob: float = 0.5
) -> Tuple[ModelInputs, torch.Tensor]:
    """
    Image-text matching batch: each row stays matched (label 1) or, with
    `negative_prob`, has its image or its caption (fair coin) taken from
    another row (label 0). A batch of one has no negatives.
    """
    count = inputs.batch_size
    negative = torch.rand(count, generator=generator) < negative_prob
    swap_image = torch.rand(count, generator=generator) < 0.5
    offsets = torch.randint(1, max(count, 2), (count,), generator=generator)
    others = (torch.arange(count) + offsets) % count
    if count < 2:
        negative = torch.zeros(count, dtype=torch.bool)

    text_rows = torch.where(negative & ~swap_image, others, torch.arange(count))
    image_rows = torch.where(negative & swap_image, others, torch.arange(count))
    text = inputs.select(text_rows)
    image = inputs.select(image_rows)
    batch = ModelInputs(text.token_ids, text.text_mask, image.region_features, image.region_spatial, image.region_mask)
    return batch, (~negative).long()


def pretraining_losses(
    model: HybridStreamTransformer,
    heads: PretrainingHeads,
    masked: MaskedBatch,
    config: PretrainConfig,
    itm_batch: Optional[Tuple[ModelInputs, torch.Tensor]] = None,
) -> Dict[str, torch.Tensor]:
    """Enabled losses by name, each a scalar tensor."""
    switches = config.loss_switches
    losses: Dict[str, torch.Tensor] = {}
    outputs = model(masked.inputs)
    if switches.mlm:
        losses["mlm"] = mlm_loss(heads.mlm_decoder(outputs.text_states), masked.mlm_labels)
    if switches.mrp:
        losses["mrp"] = mrp_loss(heads.mrp_regressor(outputs.visual_states), masked.region_targets, masked.region_masked)
    if switches.ctr:
        losses["ctr"] = contrastive_loss(outputs.contrast_img, outputs.contrast_txt, config.temperature)
    if switches.itm:
        if itm_batch is None:
            raise UsageError("ITM is enabled but no matching batch was built")
        itm_inputs, labels = itm_batch
        losses["itm"] = itm_loss(heads.itm_classifier(model(itm_inputs).joint), labels)
    return losses


# --------------------------------------------------------------------------
# TRAINING LOOP
# --------------------------------------------------------------------------
@dataclass
class StepRecord:
    step: int
    losses: Dict[str, float]
    total: float
    lr: float

    def row(self) -> List[str]:
        values = [self.losses.get(name) for name in LOSS_NAMES]
        return [str(self.step), *("" if v is None else repr(v) for v in values), repr(self.total), repr(self.lr)]


@dataclass
class TrainingResult:
    records: List[StepRecord] = field(default_factory=list)
    checkpoint: Optional[Path] = None
    loss_curve: Optional[Path] = None

    @property
    def steps(self) -> int:
        return len(self.records)


def training_regions(dataset: DatasetBundle, proposer: RegionProposer) -> List[Tuple[Tuple[int, ...], RegionSet]]:
    """(caption, regions) for every train sample, from a proposer that needs no ground truth."""
    if proposer.config.mode not in ("heuristic", "whole_image"):
        raise UsageError(f"train samples carry no boxes; proposer mode '{proposer.config.mode}' cannot be used for training")
    samples = dataset.split("train")
    if not samples:
        raise InputError("the train split is empty")
    return [(s.caption, proposer.region_set(s.image, None, key=s.sample_id)) for s in samples]


def write_loss_curve(path: Union[str, Path], records: Sequence[StepRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(LOSS_CURVE_COLUMNS)
        for record in records:
            writer.writerow(record.row())
    return path


class _Batches:
    """
    Yields (masked batch, itm batch) in training order. All randomness comes
    from one generator consumed sequentially, so a prefetch thread does not
    change the stream.
    """

    def __init__(self, items, model_config: ModelConfig, config: PretrainConfig, total_steps: int, vocab_size: int):
        self.items = items
        self.vocab_size = vocab_size
        self.model_config = model_config
        self.config = config
        self.total_steps = total_steps
        self.generator = torch_generator(config.seed)

    def __iter__(self) -> Iterator[Tuple[int, MaskedBatch, Optional[Tuple[ModelInputs, torch.Tensor]]]]:
        step = 0
        epoch = 0
        while step < self.total_steps:
            order = torch.randperm(len(self.items), generator=self.generator).tolist()
            for start in range(0, len(order), self.config.batch_size):
                if step >= self.total_steps:
                    return
                rows = [self.items[i] for i in order[start: start + self.config.batch_size]]
                inputs = collate([c for c, _ in rows], [r for _, r in rows], self.model_config)
                masked = mask_batch(inputs, self.config, self.vocab_size, self.generator)
                itm = None
                if self.config.loss_switches.itm:
                    itm = build_itm_batch(inputs, self.generator, self.config.itm_negative_prob)
                yield epoch, masked, itm
                step += 1
            epoch += 1


def _prefetched(batches: _Batches, depth: int) -> Iterator:
    if depth <= 0:
        yield from batches
        return
    buffer: "queue.Queue" = queue.Queue(maxsize=depth)
    stop = threading.Event()
    done = object()

    def offer(item) -> bool:
        while not stop.is_set():
            try:
                buffer.put(item, timeout=_PREFETCH_POLL_SECONDS)
                return True
            except queue.Full:
                continue
        return False

    def worker():
        try:
            for item in batches:
                if not offer(item):
                    return
        except BaseException as err:  # surfaced in the training thread
            offer(err)
            return
        offer(done)

    thread = threading.Thread(target=worker, name=PREFETCH_THREAD_NAME, daemon=True)
    thread.start()
    try:
        while True:
            item = buffer.get()
            if item is done:
                break
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        # The consumer may stop early; unblock a producer waiting on a full buffer.
        stop.set()
        thread.join()


def train(
    model: HybridStreamTransformer,
    dataset: DatasetBundle,
    config: PretrainConfig,
    proposer: RegionProposer,
    output_dir: Optional[Union[str, Path]] = None,
    heads: Optional[PretrainingHeads] = None,
    progress: bool = False,
) -> TrainingResult:
    """
    Pretrain `model` on the train split with the enabled losses (unit
    weights), Adam and a linear decay to zero.

    Writes `checkpoints/epoch_<n>.ckpt`, `model.ckpt` and `loss_curve.csv`
    under `output_dir` when one is given.

    Raises:
        ConfigurationError: If an enabled loss does not fit the model modality
            or the vocabulary outgrows the model.
        DivergenceError: If the total loss becomes non-finite.
    """
    check_loss_compatibility(model.config, config.loss_switches)
    if dataset.vocabulary.size > model.config.vocab_size:
        raise ConfigurationError(
            f"vocabulary of {dataset.vocabulary.size} tokens does not fit vocab_size={model.config.vocab_size}"
        )
    heads = heads if heads is not None else PretrainingHeads(model.config)
    items = training_regions(dataset, proposer)
    steps_per_epoch = math.ceil(len(items) / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    if config.max_steps is not None:
        total_steps = min(total_steps, config.max_steps)

    parameters = list(model.parameters()) + list(heads.parameters())
    optimizer = torch.optim.Adam(parameters, lr=config.learning_rate, betas=config.adam_betas, eps=config.adam_eps)
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, lambda step: max(0.0, 1.0 - step / total_steps))

    output = Path(output_dir) if output_dir is not None else None
    result = TrainingResult()
    logger.info(
        "pretraining %d samples for %d steps with %s", len(items), total_steps, "+".join(config.loss_switches.enabled())
    )

    def checkpoint(epoch: int, step: int) -> None:
        if output is not None:
            save_checkpoint(output / "checkpoints" / f"epoch_{epoch}.ckpt", model, heads, extra={"epoch": epoch, "step": step})

    # Dropout draws from the global generator; fork it so training leaves no trace.
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model.train()
        heads.train()
        current_epoch = 0
        bar = tqdm(total=total_steps, disable=not progress, desc="pretrain")
        batches = _Batches(items, model.config, config, total_steps, dataset.vocabulary.size)
        with closing(_prefetched(batches, config.prefetch)) as stream:
            for epoch, masked, itm in stream:
                if epoch != current_epoch:
                    checkpoint(current_epoch + 1, len(result.records))
                    current_epoch = epoch
                losses = pretraining_losses(model, heads, masked, config, itm)
                total = sum(losses.values())
                if not bool(torch.isfinite(total)):
                    raise DivergenceError(
                        f"total loss became non-finite at step {len(result.records) + 1}",
                        extensions={"step": len(result.records) + 1, "losses": {k: float(v) for k, v in losses.items()}},
                    )
                lr = scheduler.get_last_lr()[0]
                optimizer.zero_grad()
                total.backward()
                optimizer.step()
                scheduler.step()
                result.records.append(
                    StepRecord(len(result.records) + 1, {k: float(v.detach()) for k, v in losses.items()}, float(total.detach()), lr)
                )
                bar.update(1)
                bar.set_postfix(loss=f"{float(total):.4f}")
        bar.close()
        model.eval()
        heads.eval()
    checkpoint(current_epoch + 1, len(result.records))

    if result.records:
        logger.info("pretraining finished: total loss %.4f -> %.4f", result.records[0].total, result.records[-1].total)
    if output is not None:
        result.checkpoint = save_checkpoint(output / "model.ckpt", model, heads, extra={"steps": len(result.records)})
        result.loss_curve = write_loss_curve(output / "loss_curve.csv", result.records)
        plot_loss_curve(output / "loss_curve.png", result.records)
    return result


def loss_curve_array(records: Sequence[StepRecord]) -> np.ndarray:
    """(steps, 2) array of (step, total) for plotting."""
    return np.array([[r.step, r.total] for r in records], dtype=np.float64).reshape(-1, 2)


def plot_loss_curve(path: Union[str, Path], records: Sequence[StepRecord]) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    curve = loss_curve_array(records)
    figure, axis = plt.subplots(figsize=(5, 3))
    axis.plot(curve[:, 0], curve[:, 1], color="tab:blue", linewidth=1)
    axis.set_xlabel("step")
    axis.set_ylabel("total loss")
    figure.tight_layout()
    figure.savefig(path, dpi=100)
    plt.close(figure)
    return Path(path)
