"""
Configuration records

Every tunable of the pipeline is a frozen pydantic model. Derived variants are
made with `derive_config`, never by mutation, so a record can be hashed into a
cache key and shared between threads.
"""

import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Type, TypeVar, Union

from pydantic import BaseModel, ConfigDict, Field, PositiveInt, ValidationError, model_validator

from instance_retrieval.error import ConfigurationError

MAX_INSTANCES = 16
# Product names: up to NAME_BASE_LENGTH tokens shared by a confusable group, then one item token.
NAME_BASE_LENGTH = 3
MAX_NAME_TOKENS = NAME_BASE_LENGTH + 1

ProposerMode = Literal["oracle", "jitter", "heuristic", "whole_image"]
Modality = Literal["multimodal", "text", "image"]
MergeRule = Literal["max", "mean"]

ConfigT = TypeVar("ConfigT", bound=BaseModel)


class FrozenConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class CaptionNoise(FrozenConfig):
    """
    Caption corruption knobs.

    :param abbreviation_prob: Probability that a multi-product caption names
        only the product count ("K-piece set") instead of the products.
    :param irrelevant_token_prob: Probability of mentioning a product that is
        not in the image.
    :param drop_product_mention_prob: Per-product probability of omitting its
        name tokens.
    """

    abbreviation_prob: float = Field(0.0, ge=0.0, le=1.0)
    irrelevant_token_prob: float = Field(0.0, ge=0.0, le=1.0)
    drop_product_mention_prob: float = Field(0.0, ge=0.0, le=1.0)

    @property
    def enabled(self) -> bool:
        return bool(self.abbreviation_prob or self.irrelevant_token_prob or self.drop_product_mention_prob)


class SplitSizes(FrozenConfig):
    train: PositiveInt = 2000
    val: PositiveInt = 40
    test: PositiveInt = 120
    gallery: PositiveInt = 400


class CorpusConfig(FrozenConfig):
    num_categories: int = Field(20, ge=2)
    num_brands: int = Field(4, ge=1)
    image_size: int = Field(48, ge=16)
    glyph_size: int = Field(6, ge=3)
    glyph_scale: Tuple[float, float] = (1.5, 2.5)
    instances_per_multi: Tuple[int, int] = (2, 4)
    caption_noise: CaptionNoise = CaptionNoise(abbreviation_prob=0.1, irrelevant_token_prob=0.1, drop_product_mention_prob=0.1)
    split_sizes: SplitSizes = SplitSizes()
    distractor_category_fraction: float = Field(0.15, ge=0.0, lt=1.0)
    confusable_groups: bool = True
    long_tail: bool = True
    zipf_exponent: float = Field(1.0, gt=0.0)
    background: Literal["textured", "plain"] = "textured"
    overlap_cap: float = Field(0.3, ge=0.0, le=1.0)
    paste_margin: int = Field(0, ge=0)
    max_placement_retries: int = Field(50, ge=1)
    train_single_fraction: float = Field(0.5, ge=0.0, le=1.0)
    filler_vocab_size: int = Field(24, ge=1)
    max_filler_tokens: int = Field(3, ge=0)
    max_caption_len: int = Field(35, ge=1)
    held_out_categories: Tuple[int, ...] = ()
    seed: int = 0

    @model_validator(mode="after")
    def _check_ranges(self) -> "CorpusConfig":
        low, high = self.instances_per_multi
        if not 1 <= low <= high <= MAX_INSTANCES:
            raise ValueError(f"instances_per_multi must satisfy 1 <= min <= max <= {MAX_INSTANCES}, got {self.instances_per_multi}")
        scale_low, scale_high = self.glyph_scale
        if not 0 < scale_low <= scale_high:
            raise ValueError(f"glyph_scale must satisfy 0 < min <= max, got {self.glyph_scale}")
        if round(self.glyph_size * scale_high) > self.image_size:
            raise ValueError("largest pasted glyph does not fit in the image")
        for category_id in self.held_out_categories:
            if not 0 <= category_id < self.num_categories:
                raise ValueError(f"held-out category {category_id} is not in the catalog")
        if self.longest_caption > self.max_caption_len:
            raise ValueError(
                f"captions can reach {self.longest_caption} tokens but max_caption_len is {self.max_caption_len}; "
                "raise it or lower instances_per_multi"
            )
        return self

    @property
    def longest_caption(self) -> int:
        """Token count of the longest caption the corpus can compose: brands, every product name, one stranger and fillers."""
        products = self.instances_per_multi[1]
        stranger = MAX_NAME_TOKENS if self.caption_noise.irrelevant_token_prob > 0 else 0
        return min(products, self.num_brands) + products * MAX_NAME_TOKENS + stranger + self.max_filler_tokens

    @property
    def distractor_count(self) -> int:
        return int(round(self.distractor_category_fraction * self.num_categories))


class ProposerConfig(FrozenConfig):
    mode: ProposerMode = "heuristic"
    jitter_sigma: float = Field(0.05, ge=0.0)
    miss_prob: float = Field(0.0, ge=0.0, le=1.0)
    spurious_rate: float = Field(0.0, ge=0.0)
    r_max: int = Field(12, ge=1)
    grid: int = Field(7, ge=1)
    d_v: int = Field(64, ge=1)
    luminance_threshold: float = Field(0.15, gt=0.0)
    min_area_fraction: float = Field(0.002, ge=0.0, lt=1.0)
    color_tolerance: float = Field(1e-3, ge=0.0)
    max_color_classes: int = Field(32, ge=1)
    seed: int = 0


class ModelConfig(FrozenConfig):
    """
    Hybrid-stream transformer shape.

    :param L: Intra-modal (Text/Visual) layers per stream.
    :param K: Cross-attention layers.
    :param H: Joint layers over the concatenated sequence.
    :param modality: `multimodal` for the hybrid model, `text` or `image` for
        the single-stream baselines (which only use L).
    """

    L: int = Field(4, ge=0)
    K: int = Field(4, ge=0)
    H: int = Field(4, ge=0)
    d_model: int = Field(64, ge=1)
    n_heads: int = Field(4, ge=1)
    d_ff: int = Field(256, ge=1)
    d_head_out: int = Field(64, ge=1)
    vocab_size: int = Field(256, ge=6)
    max_text_len: int = Field(36, ge=2)
    d_v: int = Field(64, ge=1)
    dropout_prob: float = Field(0.1, ge=0.0, lt=1.0)
    modality: Modality = "multimodal"
    seed: int = 0

    @model_validator(mode="after")
    def _check_shape(self) -> "ModelConfig":
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if self.L + self.K + self.H < 1:
            raise ValueError("at least one of L, K, H must be >= 1")
        if self.modality != "multimodal" and (self.K or self.H or not self.L):
            raise ValueError(f"a {self.modality}-only model uses intra-modal layers only (K = H = 0, L >= 1)")
        return self

    @property
    def layers(self) -> Tuple[int, int, int]:
        return self.L, self.K, self.H


class LossSwitches(FrozenConfig):
    mlm: bool = True
    mrp: bool = True
    ctr: bool = True
    itm: bool = False

    @model_validator(mode="after")
    def _check_any(self) -> "LossSwitches":
        if not (self.mlm or self.mrp or self.ctr or self.itm):
            raise ValueError("at least one pretraining loss must be enabled")
        return self

    def enabled(self) -> List[str]:
        return [name for name in ("mlm", "mrp", "ctr", "itm") if getattr(self, name)]


class MlmCorruption(FrozenConfig):
    replace_with_mask: float = Field(0.8, ge=0.0, le=1.0)
    random_token: float = Field(0.1, ge=0.0, le=1.0)
    keep: float = Field(0.1, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _check_sum(self) -> "MlmCorruption":
        total = self.replace_with_mask + self.random_token + self.keep
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"corruption probabilities must sum to 1, got {total}")
        return self


class PretrainConfig(FrozenConfig):
    mask_prob: float = Field(0.15, gt=0.0, lt=1.0)
    mlm_corruption: MlmCorruption = MlmCorruption()
    temperature: float = Field(0.07, gt=0.0)
    batch_size: int = Field(32, ge=1)
    epochs: int = Field(10, ge=1)
    learning_rate: float = Field(5e-4, gt=0.0)
    lr_schedule: Literal["linear"] = "linear"
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(1e-8, gt=0.0)
    loss_switches: LossSwitches = LossSwitches()
    itm_negative_prob: float = Field(0.5, ge=0.0, le=1.0)
    max_steps: Optional[int] = Field(None, ge=1)
    prefetch: int = Field(0, ge=0)
    seed: int = 0


class ArmSpec(FrozenConfig):
    """
    One column of an ablation: overrides applied on top of the experiment's
    base configuration. `None` means "inherit".
    """

    name: str
    loss_switches: Optional[LossSwitches] = None
    layers: Optional[Tuple[int, int, int]] = None
    modality: Optional[Modality] = None
    proposer_mode: Optional[ProposerMode] = None
    jitter_sigma: Optional[float] = Field(None, ge=0.0)
    held_out_category_fraction: Optional[float] = Field(None, ge=0.0, lt=1.0)
    held_out_brands: Optional[int] = Field(None, ge=1)
    concat: Optional[bool] = None
    pretrained: bool = True

    @model_validator(mode="after")
    def _check_holdout(self) -> "ArmSpec":
        if self.held_out_category_fraction is not None and self.held_out_brands is not None:
            raise ValueError("hold out either a category fraction or a number of brands, not both")
        return self

    @property
    def zero_shot(self) -> bool:
        return bool(self.held_out_category_fraction or self.held_out_brands)


class ExperimentSpec(FrozenConfig):
    name: str = "toy"
    corpus: CorpusConfig = CorpusConfig()
    proposer: ProposerConfig = ProposerConfig()
    train_proposer: ProposerConfig = ProposerConfig(mode="heuristic")
    model: ModelConfig = ModelConfig(L=2, K=2, H=2)
    pretrain: PretrainConfig = PretrainConfig()
    cutoffs: List[PositiveInt] = Field(default_factory=lambda: [10, 50, 100], min_length=1)
    merge: MergeRule = "max"
    concat: bool = True
    arms: List[ArmSpec] = Field(default_factory=list)
    output_dir: str = "runs/toy"
    seeds: List[int] = Field(default_factory=lambda: [0], min_length=1)

    @model_validator(mode="after")
    def _check_training_proposer(self) -> "ExperimentSpec":
        if self.train_proposer.mode not in ("heuristic", "whole_image"):
            raise ValueError("the train split carries no boxes: train_proposer must be 'heuristic' or 'whole_image'")
        if self.model.max_text_len < self.corpus.longest_caption + 1:
            raise ValueError(
                f"max_text_len={self.model.max_text_len} cannot hold [CLS] and a {self.corpus.longest_caption}-token caption"
            )
        names = [arm.name for arm in self.arms]
        if len(names) != len(set(names)):
            raise ValueError("arm names must be unique")
        return self


def parse_config(config_class: Type[ConfigT], data: Union[Dict[str, Any], ConfigT]) -> ConfigT:
    """
    Validate a plain dict into `config_class`.

    Raises:
        ConfigurationError: If validation fails; the pydantic error list is
            kept in the error's extensions.
    """
    if isinstance(data, config_class):
        return data
    try:
        return config_class.model_validate(data)
    except ValidationError as err:
        raise ConfigurationError(
            f"invalid {config_class.__name__}: {err.error_count()} validation error(s)",
            extensions={"errors": json.loads(err.json(include_url=False))},
        ) from err


def load_experiment_spec(path: Union[str, Path], overrides: Optional[Dict[str, Any]] = None) -> ExperimentSpec:
    """
    Read a JSON experiment spec. `overrides` are top-level keys applied before
    validation (the command line uses them for --seed and --out).
    """
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigurationError(f"cannot read experiment spec {path}: {err}") from err
    if not isinstance(data, dict):
        raise ConfigurationError(f"experiment spec {path} must be a JSON object")
    data.update(overrides or {})
    return parse_config(ExperimentSpec, data)


def derive_config(config: ConfigT, **update: Any) -> ConfigT:
    """
    Copy of `config` with `update` applied and validated again (unlike
    `model_copy(update=...)`, which skips validation).
    """
    return parse_config(type(config), {**config.model_dump(), **update})
