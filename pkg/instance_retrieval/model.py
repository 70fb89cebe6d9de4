"""
Hybrid-stream transformer.

Text and visual sequences first pass through L intra-modal layers each, then K
cross layers (each stream queries the other), then H joint layers over the
concatenated sequence. The contrastive features are read out after the L
intra-modal layers; the joint feature is read out at the very end.
"""

import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from instance_retrieval.config import ModelConfig, parse_config
from instance_retrieval.error import InputError, NumericGuardError
from instance_retrieval.store import read_tensor_file, write_tensor_file
from instance_retrieval.utils import torch_generator
from instance_retrieval.vocab import CLS_ID, PAD_ID

logger = logging.getLogger(__name__)

SPATIAL_DIM = 5
INIT_STD = 0.02
CHECKPOINT_FORMAT_VERSION = 1
HEADS_PREFIX = "heads."


# --------------------------------------------------------------------------
# INPUTS
# --------------------------------------------------------------------------
@dataclass
class ModelInputs:
    """
    A padded batch. Masks are True at real positions.

    token_ids: (B, T) long, starting with [CLS]
    text_mask: (B, T) bool
    region_features: (B, R, d_v)
    region_spatial: (B, R, 5)
    region_mask: (B, R) bool
    """

    token_ids: torch.Tensor
    text_mask: torch.Tensor
    region_features: torch.Tensor
    region_spatial: torch.Tensor
    region_mask: torch.Tensor

    @property
    def batch_size(self) -> int:
        return self.token_ids.shape[0]

    def select(self, rows: Union[Sequence[int], torch.Tensor]) -> "ModelInputs":
        index = torch.as_tensor(rows, dtype=torch.long)
        return ModelInputs(**{f.name: getattr(self, f.name)[index] for f in fields(self)})

    def to(self, dtype: torch.dtype) -> "ModelInputs":
        return ModelInputs(
            token_ids=self.token_ids,
            text_mask=self.text_mask,
            region_features=self.region_features.to(dtype),
            region_spatial=self.region_spatial.to(dtype),
            region_mask=self.region_mask,
        )


def encode_caption(caption: Sequence[int], max_text_len: int) -> List[int]:
    """[CLS] followed by the caption, truncated to `max_text_len` tokens."""
    return [CLS_ID, *caption][:max_text_len]


def collate(captions: Sequence[Sequence[int]], regions: Sequence[Any], config: ModelConfig) -> ModelInputs:
    """
    Pad a batch of captions and region sets.

    :param captions: Raw caption token ids (no [CLS]).
    :param regions: One `RegionSet` per caption.
    """
    if len(captions) != len(regions) or not captions:
        raise InputError("collate needs one region set per caption and a nonempty batch")
    token_rows = [encode_caption(caption, config.max_text_len) for caption in captions]
    text_len = max(len(row) for row in token_rows)
    region_len = max(len(r) for r in regions)
    batch = len(captions)

    token_ids = torch.full((batch, text_len), PAD_ID, dtype=torch.long)
    text_mask = torch.zeros((batch, text_len), dtype=torch.bool)
    features = torch.zeros((batch, region_len, config.d_v), dtype=torch.float32)
    spatial = torch.zeros((batch, region_len, SPATIAL_DIM), dtype=torch.float32)
    region_mask = torch.zeros((batch, region_len), dtype=torch.bool)
    for i, (row, region_set) in enumerate(zip(token_rows, regions)):
        if region_set.features.shape[1] != config.d_v:
            raise InputError(f"region features have width {region_set.features.shape[1]}, model expects d_v={config.d_v}")
        token_ids[i, : len(row)] = torch.tensor(row, dtype=torch.long)
        text_mask[i, : len(row)] = True
        count = len(region_set)
        features[i, :count] = torch.from_numpy(np.asarray(region_set.features, dtype=np.float32))
        spatial[i, :count] = torch.from_numpy(np.asarray(region_set.spatial, dtype=np.float32))
        region_mask[i, :count] = True
    return ModelInputs(token_ids, text_mask, features, spatial, region_mask)


# --------------------------------------------------------------------------
# BLOCKS
# --------------------------------------------------------------------------
class MultiHeadAttention(nn.Module):
    """
    Scaled dot-product attention. Keys where `key_mask` is False get a -inf
    logit and therefore weight exactly 0.
    """

    def __init__(self, d_model: int, n_heads: int, dropout_prob: float = 0.0):
        super().__init__()
        if d_model % n_heads:
            raise InputError(f"d_model ({d_model}) must be divisible by n_heads ({n_heads})")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.query = nn.Linear(d_model, d_model)
        self.key = nn.Linear(d_model, d_model)
        self.value = nn.Linear(d_model, d_model)
        self.output = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout_prob)

    def _split(self, states: torch.Tensor) -> torch.Tensor:
        batch, length, _ = states.shape
        return states.view(batch, length, self.n_heads, self.d_head).transpose(1, 2)

    def forward(
        self, query_states: torch.Tensor, key_states: torch.Tensor, key_mask: Optional[torch.Tensor] = None
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        if query_states.shape[-1] != key_states.shape[-1]:
            raise InputError(f"query width {query_states.shape[-1]} does not match key width {key_states.shape[-1]}")
        q = self._split(self.query(query_states))
        k = self._split(self.key(key_states))
        v = self._split(self.value(key_states))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        context = self.dropout(weights) @ v
        batch, _, length, _ = context.shape
        context = context.transpose(1, 2).reshape(batch, length, self.n_heads * self.d_head)
        return self.output(context), weights


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, dropout_prob: float = 0.0):
        super().__init__()
        self.expand = nn.Linear(d_model, d_ff)
        self.contract = nn.Linear(d_ff, d_model)
        self.dropout = nn.Dropout(dropout_prob)

    def forward(self, states: torch.Tensor) -> torch.Tensor:
        return self.contract(self.dropout(F.gelu(self.expand(states))))


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block; shape preserving."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.attention_norm = nn.LayerNorm(config.d_model)
        self.attention = MultiHeadAttention(config.d_model, config.n_heads, config.dropout_prob)
        self.feed_forward_norm = nn.LayerNorm(config.d_model)
        self.feed_forward = FeedForward(config.d_model, config.d_ff, config.dropout_prob)
        self.dropout = nn.Dropout(config.dropout_prob)

    def forward(self, states: torch.Tensor, mask: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        normed = self.attention_norm(states)
        attended, weights = self.attention(normed, normed, mask)
        states = states + self.dropout(attended)
        states = states + self.dropout(self.feed_forward(self.feed_forward_norm(states)))
        return states, weights


class CrossBlock(nn.Module):
    """Pre-norm block whose queries come from one stream and keys/values from the other."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.query_norm = nn.LayerNorm(config.d_model)
        self.context_norm = nn.LayerNorm(config.d_model)
        self.attention = MultiHeadAttention(config.d_model, config.n_heads, config.dropout_prob)
        self.feed_forward_norm = nn.LayerNorm(config.d_model)
        self.feed_forward = FeedForward(config.d_model, config.d_ff, config.dropout_prob)
        self.dropout = nn.Dropout(config.dropout_prob)

    def forward(
        self, states: torch.Tensor, context: torch.Tensor, context_mask: Optional[torch.Tensor] = None
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        attended, weights = self.attention(self.query_norm(states), self.context_norm(context), context_mask)
        states = states + self.dropout(attended)
        states = states + self.dropout(self.feed_forward(self.feed_forward_norm(states)))
        return states, weights


class CrossLayer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.text = CrossBlock(config)
        self.visual = CrossBlock(config)

    def forward(self, text: torch.Tensor, visual: torch.Tensor, text_mask: torch.Tensor, visual_mask: torch.Tensor):
        # Both directions read the layer inputs.
        new_text, text_weights = self.text(text, visual, visual_mask)
        new_visual, visual_weights = self.visual(visual, text, text_mask)
        return new_text, new_visual, (text_weights, visual_weights)


class CoLayer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.block = TransformerBlock(config)

    def forward(self, text: torch.Tensor, visual: torch.Tensor, text_mask: torch.Tensor, visual_mask: torch.Tensor):
        joint, weights = self.block(torch.cat([text, visual], dim=1), torch.cat([text_mask, visual_mask], dim=1))
        split = text.shape[1]
        return joint[:, :split], joint[:, split:], weights


def forward_intra(block: TransformerBlock, states: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    return block(states, mask)[0]


def forward_cross(layer: CrossLayer, text, visual, text_mask, visual_mask) -> Tuple[torch.Tensor, torch.Tensor]:
    new_text, new_visual, _ = layer(text, visual, text_mask, visual_mask)
    return new_text, new_visual


def forward_co(layer: CoLayer, text, visual, text_mask, visual_mask) -> Tuple[torch.Tensor, torch.Tensor]:
    new_text, new_visual, _ = layer(text, visual, text_mask, visual_mask)
    return new_text, new_visual


def _contrast_head(d_model: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.LayerNorm(d_model), nn.Linear(d_model, d_out))


# --------------------------------------------------------------------------
# MODEL
# --------------------------------------------------------------------------
@dataclass
class ModelOutputs:
    """
    `visual_states` excludes the [IMG] row. Pooled and head vectors are per
    batch row; the unused modality's fields are None for single-stream models.
    """

    text_states: Optional[torch.Tensor]
    visual_states: Optional[torch.Tensor]
    h_txt: Optional[torch.Tensor]
    h_img: Optional[torch.Tensor]
    contrast_txt: Optional[torch.Tensor]
    contrast_img: Optional[torch.Tensor]
    joint: torch.Tensor
    attentions: Optional[List[Any]] = None


class HybridStreamTransformer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.uses_text = config.modality != "image"
        self.uses_visual = config.modality != "text"
        d = config.d_model

        if self.uses_text:
            self.token_embedding = nn.Embedding(config.vocab_size, d)
            self.position_embedding = nn.Embedding(config.max_text_len, d)
            self.text_embedding_norm = nn.LayerNorm(d)
            self.text_layers = nn.ModuleList(TransformerBlock(config) for _ in range(config.L))
            self.text_final_norm = nn.LayerNorm(d)
        if self.uses_visual:
            self.feature_projection = nn.Linear(config.d_v, d)
            self.spatial_projection = nn.Linear(SPATIAL_DIM, d)
            self.image_token = nn.Parameter(torch.zeros(d))
            self.visual_embedding_norm = nn.LayerNorm(d)
            self.visual_layers = nn.ModuleList(TransformerBlock(config) for _ in range(config.L))
            self.visual_final_norm = nn.LayerNorm(d)
        if self.uses_text and self.uses_visual:
            self.cross_layers = nn.ModuleList(CrossLayer(config) for _ in range(config.K))
            self.co_layers = nn.ModuleList(CoLayer(config) for _ in range(config.H))
            self.contrast_text = _contrast_head(d, config.d_head_out)
            self.contrast_image = _contrast_head(d, config.d_head_out)
        self.joint_head = nn.Linear(d, config.d_head_out)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        """Gaussian(0, 0.02) weights, zero biases, unit norms; drawn from `config.seed`."""
        generator = torch_generator(self.config.seed)
        norm_weights = {id(m.weight) for m in self.modules() if isinstance(m, nn.LayerNorm)}
        with torch.no_grad():
            for name, parameter in self.named_parameters():
                if name.endswith(".bias"):
                    parameter.zero_()
                elif id(parameter) in norm_weights:
                    parameter.fill_(1.0)
                else:
                    parameter.copy_(torch.randn(parameter.shape, generator=generator) * INIT_STD)

    # ---- embedding --------------------------------------------------------
    def embed_text(self, token_ids: torch.Tensor, text_mask: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if token_ids.shape[1] > self.config.max_text_len:
            token_ids = token_ids[:, : self.config.max_text_len]
            text_mask = text_mask[:, : self.config.max_text_len]
        if token_ids.numel() and (token_ids.min() < 0 or token_ids.max() >= self.config.vocab_size):
            raise InputError(f"token id out of range [0, {self.config.vocab_size})")
        positions = torch.arange(token_ids.shape[1], device=token_ids.device)
        embedded = self.token_embedding(token_ids) + self.position_embedding(positions)[None]
        return self.text_embedding_norm(embedded), text_mask

    def embed_visual(self, features: torch.Tensor, spatial: torch.Tensor, region_mask: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if features.shape[-1] != self.config.d_v:
            raise InputError(f"region features have width {features.shape[-1]}, model expects d_v={self.config.d_v}")
        regions = self.feature_projection(features) + self.spatial_projection(spatial)
        prefix = self.image_token.expand(regions.shape[0], 1, -1)
        embedded = torch.cat([prefix, regions], dim=1)
        mask = torch.cat([torch.ones_like(region_mask[:, :1]), region_mask], dim=1)
        return self.visual_embedding_norm(embedded), mask

    def embed_inputs(self, inputs: ModelInputs):
        """(text embeddings, text mask), (visual embeddings with [IMG] prefix, visual mask)."""
        text = self.embed_text(inputs.token_ids, inputs.text_mask) if self.uses_text else None
        visual = self.embed_visual(inputs.region_features, inputs.region_spatial, inputs.region_mask) if self.uses_visual else None
        return text, visual

    # ---- forward ----------------------------------------------------------
    def forward(self, inputs: ModelInputs, return_attention: bool = False) -> ModelOutputs:
        attentions: List[Any] = []
        text, visual = self.embed_inputs(inputs)
        text_states, text_mask = text if text is not None else (None, None)
        visual_states, visual_mask = visual if visual is not None else (None, None)

        for layer in range(self.config.L):
            if self.uses_text:
                text_states, weights = self.text_layers[layer](text_states, text_mask)
                attentions.append(("text", weights))
            if self.uses_visual:
                visual_states, weights = self.visual_layers[layer](visual_states, visual_mask)
                attentions.append(("visual", weights))

        contrast_txt = contrast_img = None
        if self.uses_text and self.uses_visual:
            contrast_txt = self.contrast_text(text_states[:, 0])
            contrast_img = self.contrast_image(visual_states[:, 0])
            for cross in self.cross_layers:
                text_states, visual_states, weights = cross(text_states, visual_states, text_mask, visual_mask)
                attentions.append(("cross", weights))
            for co in self.co_layers:
                text_states, visual_states, weights = co(text_states, visual_states, text_mask, visual_mask)
                attentions.append(("co", weights))

        h_txt = h_img = None
        if self.uses_text:
            text_states = self.text_final_norm(text_states)
            h_txt = text_states[:, 0]
        if self.uses_visual:
            visual_states = self.visual_final_norm(visual_states)
            h_img = visual_states[:, 0]

        if h_txt is not None and h_img is not None:
            joint = self.joint_head(h_img * h_txt)
        else:
            joint = self.joint_head(h_txt if h_txt is not None else h_img)

        return ModelOutputs(
            text_states=text_states,
            visual_states=visual_states[:, 1:] if visual_states is not None else None,
            h_txt=h_txt,
            h_img=h_img,
            contrast_txt=contrast_txt,
            contrast_img=contrast_img,
            joint=joint,
            attentions=attentions if return_attention else None,
        )


def expected_parameter_count(config: ModelConfig) -> int:
    d, f, o = config.d_model, config.d_ff, config.d_head_out
    attention = 4 * (d * d + d)
    feed_forward = d * f + f + f * d + d
    layer_norm = 2 * d
    self_block = attention + feed_forward + 2 * layer_norm
    cross_block = attention + feed_forward + 3 * layer_norm
    text_stream = config.vocab_size * d + config.max_text_len * d + layer_norm + config.L * self_block + layer_norm
    visual_stream = config.d_v * d + d + SPATIAL_DIM * d + d + d + layer_norm + config.L * self_block + layer_norm
    joint_head = d * o + o
    if config.modality == "text":
        return text_stream + joint_head
    if config.modality == "image":
        return visual_stream + joint_head
    contrast_heads = 2 * (layer_norm + d * o + o)
    return (
        text_stream + visual_stream + config.K * 2 * cross_block + config.H * self_block + contrast_heads + joint_head
    )


def _unit(vector: torch.Tensor) -> torch.Tensor:
    norms = vector.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise NumericGuardError("cannot normalize a zero instance embedding")
    return vector / norms


def instance_embedding(outputs: ModelOutputs, concat: bool = True) -> torch.Tensor:
    """
    Retrieval vector per batch row: concat(joint, contrast_img * contrast_txt),
    L2-normalized. With `concat=False`, or for single-stream models, only the
    joint vector is used.

    The contrast heads are normalized before their product and both halves
    before concatenation, so each half contributes exactly half of every
    cosine similarity whatever the scale of the heads.

    Raises:
        NumericGuardError: If some row is the zero vector before normalization.
    """
    joint = _unit(outputs.joint)
    if not concat or outputs.contrast_img is None or outputs.contrast_txt is None:
        return joint
    product = _unit(_unit(outputs.contrast_img) * _unit(outputs.contrast_txt))
    return torch.cat([joint, product], dim=-1) / math.sqrt(2.0)


def embedding_width(config: ModelConfig, concat: bool = True) -> int:
    return 2 * config.d_head_out if concat and config.modality == "multimodal" else config.d_head_out


# --------------------------------------------------------------------------
# CHECKPOINTS
# --------------------------------------------------------------------------
def save_checkpoint(
    path: Union[str, Path],
    model: HybridStreamTransformer,
    heads: Optional[nn.Module] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {name: value.detach().cpu().numpy() for name, value in model.state_dict().items()}
    if heads is not None:
        tensors.update({HEADS_PREFIX + name: value.detach().cpu().numpy() for name, value in heads.state_dict().items()})
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": model.config.model_dump(mode="json"),
        **(extra or {}),
    }
    write_tensor_file(path, header, tensors)
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[HybridStreamTransformer, Dict[str, torch.Tensor], Dict[str, Any]]:
    """
    Returns the model (in eval mode), the pretraining-head tensors with their
    prefix stripped, and the header.
    """
    header, tensors = read_tensor_file(path)
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise InputError(f"{path}: unsupported checkpoint format {header.get('format_version')}")
    model = HybridStreamTransformer(parse_config(ModelConfig, header["model_config"]))
    state = {name: torch.from_numpy(array) for name, array in tensors.items() if not name.startswith(HEADS_PREFIX)}
    model.load_state_dict(state)
    model.eval()
    heads = {
        name[len(HEADS_PREFIX):]: torch.from_numpy(array)
        for name, array in tensors.items()
        if name.startswith(HEADS_PREFIX)
    }
    return model, heads, header
