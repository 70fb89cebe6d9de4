# flake8: noqa
from __future__ import annotations

from instance_retrieval.config import (
    CorpusConfig,
    ExperimentSpec,
    ModelConfig,
    PretrainConfig,
    ProposerConfig,
    load_experiment_spec,
)
from instance_retrieval.corpus import DatasetBundle, build_dataset, compose_sample, generate_catalog
from instance_retrieval.error import RetrievalPipelineError
from instance_retrieval.experiment import ExperimentRunner, arm_set
from instance_retrieval.model import HybridStreamTransformer, instance_embedding
from instance_retrieval.pretrain import train
from instance_retrieval.proposer import RegionProposer
from instance_retrieval.retrieval import GalleryIndex, build_gallery_index, evaluate, retrieve
