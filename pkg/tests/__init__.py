# flake8: noqa
from __future__ import annotations

import torch

from instance_retrieval.config import CaptionNoise, CorpusConfig, ExperimentSpec, ModelConfig, PretrainConfig, ProposerConfig, SplitSizes
from instance_retrieval.model import ModelInputs
from instance_retrieval.utils import torch_generator
from instance_retrieval.vocab import CLS_ID, FIRST_CONTENT_ID, PAD_ID


def tiny_corpus(**update) -> CorpusConfig:
    """Six categories on 24-px images, small enough to generate in milliseconds."""
    values = dict(
        num_categories=6,
        num_brands=2,
        image_size=24,
        glyph_size=4,
        glyph_scale=(1.5, 2.0),
        instances_per_multi=(2, 3),
        split_sizes=SplitSizes(train=24, val=4, test=6, gallery=12),
        distractor_category_fraction=0.2,
        filler_vocab_size=8,
        max_filler_tokens=2,
    )
    values.update(update)
    return CorpusConfig(**values)


def quiet_corpus(**update) -> CorpusConfig:
    """No caption noise and no fillers: captions are brand and name tokens only."""
    values = dict(caption_noise=CaptionNoise(), max_filler_tokens=0)
    values.update(update)
    return tiny_corpus(**values)


def tiny_model(**update) -> ModelConfig:
    values = dict(L=1, K=1, H=1, d_model=8, n_heads=2, d_ff=16, d_head_out=8, vocab_size=64, d_v=16, dropout_prob=0.0)
    values.update(update)
    return ModelConfig(**values)


def tiny_proposer(**update) -> ProposerConfig:
    values = dict(grid=4, d_v=16)
    values.update(update)
    return ProposerConfig(**values)


def tiny_pretrain(**update) -> PretrainConfig:
    values = dict(batch_size=8, epochs=1, max_steps=3)
    values.update(update)
    return PretrainConfig(**values)


def tiny_spec(output_dir, **update) -> ExperimentSpec:
    values = dict(
        name="tiny",
        corpus=tiny_corpus(),
        proposer=tiny_proposer(),
        train_proposer=tiny_proposer(mode="heuristic"),
        model=tiny_model(),
        pretrain=tiny_pretrain(),
        cutoffs=[3, 10],
        output_dir=str(output_dir),
        seeds=[0],
    )
    values.update(update)
    return ExperimentSpec(**values)


def random_inputs(config: ModelConfig, batch=3, text_len=5, regions=4, seed=0) -> ModelInputs:
    """A padded batch: row 0 ends in two [PAD] tokens, row 1 in one padded region."""
    generator = torch_generator(seed)
    token_ids = torch.randint(FIRST_CONTENT_ID, config.vocab_size, (batch, text_len), generator=generator)
    token_ids[:, 0] = CLS_ID
    text_mask = torch.ones(batch, text_len, dtype=torch.bool)
    token_ids[0, -2:] = PAD_ID
    text_mask[0, -2:] = False
    region_mask = torch.ones(batch, regions, dtype=torch.bool)
    if batch > 1:
        region_mask[1, -1] = False
    return ModelInputs(
        token_ids=token_ids,
        text_mask=text_mask,
        region_features=torch.randn(batch, regions, config.d_v, generator=generator),
        region_spatial=torch.rand(batch, regions, 5, generator=generator),
        region_mask=region_mask,
    )
