"""
Command line front-end.

Single-stage commands share one layout under `--out`:

    data/                         generated corpus
    pretrain/model.ckpt           pretrained weights, loss curve, epoch checkpoints
    embeddings/gallery.npz        gallery index
    regions/                      cached query proposals
    results.jsonl                 ranked gallery ids per query
    report.json, per_query.csv    metrics

`ablate` and `report` work on `<out>/<arm>/seed_<s>/` and `<out>/metrics.json`.
"""

import json
import logging
import sys
from pathlib import Path
from typing import Literal, Optional

from instance_retrieval.app import CommandLineApp
from instance_retrieval.config import ArmSpec, ExperimentSpec, MergeRule, ProposerMode, load_experiment_spec, parse_config
from instance_retrieval.context import RunContext
from instance_retrieval.corpus import DatasetBundle, build_dataset, load_dataset, save_dataset
from instance_retrieval.error import ConfigurationError, InputError
from instance_retrieval.executor import StageExecutor
from instance_retrieval.experiment import (
    METRICS_FILE,
    ExperimentRunner,
    arm_set,
    check_acceptance,
    enforce_acceptance,
    plan_arm,
    read_metrics,
)
from instance_retrieval.model import HybridStreamTransformer, load_checkpoint
from instance_retrieval.pretrain import PretrainingHeads, train
from instance_retrieval.proposer import RegionProposer, load_region_cache, save_region_cache
from instance_retrieval.retrieval import (
    GroundTruth,
    build_gallery_index,
    evaluate,
    evaluate_single_product,
    export_embeddings,
    load_embeddings,
    load_results,
    retrieve_all,
    save_results,
)
from instance_retrieval.utils import set_deterministic

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

DATA_DIR = "data"
PRETRAIN_CHECKPOINT = Path("pretrain") / "model.ckpt"
GALLERY_EMBEDDINGS = Path("embeddings") / "gallery.npz"
REGIONS_DIR = "regions"
RESULTS_FILE = "results.jsonl"

app = CommandLineApp(
    prog="instance-retrieval",
    description="Weakly-supervised instance-level product retrieval on a synthetic corpus.",
)


@app.setup_function
def setup(
    config: Optional[Path] = None,
    seed: Optional[int] = None,
    out: Optional[Path] = None,
    deterministic: bool = False,
    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = "INFO",
) -> RunContext:
    """
    :param config: JSON experiment spec; built-in toy defaults when omitted.
    :param seed: Run only this seed (replaces the spec's seed list).
    :param out: Output directory (replaces the spec's output_dir).
    :param deterministic: Deterministic single-threaded torch kernels.
    :param log_level: Logging level for stderr.
    """
    logging.basicConfig(level=log_level, format=LOG_FORMAT, stream=sys.stderr, force=True)
    overrides = {}
    if seed is not None:
        overrides["seeds"] = [seed]
    if out is not None:
        overrides["output_dir"] = str(out)
    if config is not None:
        spec = load_experiment_spec(config, overrides)
    else:
        spec = parse_config(ExperimentSpec, overrides)
    if deterministic:
        set_deterministic(True)
    context = RunContext(spec.output_dir, spec=spec, seed=spec.seeds[0])
    context.meta["executor"] = StageExecutor()
    return context


def _run(context: RunContext, stage: str, function, **args):
    return context.meta["executor"].run(stage, function, context, **args)


def _plan(context: RunContext):
    return plan_arm(context.spec, ArmSpec(name=context.spec.name), context.seed)


def _dataset(context: RunContext, data: Optional[Path]) -> DatasetBundle:
    directory = data or context.output_dir / DATA_DIR
    if not directory.exists():
        raise InputError(f"no dataset at {directory}; run gen-data first")
    return load_dataset(directory)


def _model(context: RunContext, checkpoint: Optional[Path]) -> HybridStreamTransformer:
    path = checkpoint or context.output_dir / PRETRAIN_CHECKPOINT
    if not path.exists():
        raise InputError(f"no checkpoint at {path}; run pretrain first")
    return load_checkpoint(path)[0]


def _proposer(context: RunContext, mode: Optional[str]) -> RegionProposer:
    proposer = RegionProposer(_plan(context).eval_proposer)
    return proposer.with_mode(mode) if mode is not None else proposer


# --------------------------------------------------------------------------
# STAGES
# --------------------------------------------------------------------------
def _gen_data(context: RunContext, workers: int) -> Path:
    bundle = build_dataset(_plan(context).corpus, workers=workers)
    return save_dataset(bundle, context.output_dir / DATA_DIR)


def _pretrain(context: RunContext, data: Optional[Path], progress: bool) -> Path:
    plan = _plan(context)
    dataset = _dataset(context, data)
    if dataset.vocabulary.size > plan.model.vocab_size:
        raise ConfigurationError(f"vocabulary of {dataset.vocabulary.size} tokens does not fit vocab_size={plan.model.vocab_size}")
    model = HybridStreamTransformer(plan.model)
    output = (context.output_dir / PRETRAIN_CHECKPOINT).parent
    result = train(model, dataset, plan.pretrain, RegionProposer(plan.train_proposer), output, PretrainingHeads(plan.model), progress)
    return result.checkpoint


def _embed(context: RunContext, checkpoint: Optional[Path], data: Optional[Path], mode: Optional[str]) -> Path:
    dataset = _dataset(context, data)
    model = _model(context, checkpoint)
    proposer = _proposer(context, mode)
    index = build_gallery_index(dataset.split("gallery"), model, proposer, concat=_plan(context).concat)
    path = context.output_dir / GALLERY_EMBEDDINGS
    path.parent.mkdir(parents=True, exist_ok=True)
    export_embeddings(path, index)
    queries = {
        s.sample_id: proposer.region_set(s.image, [i.box for i in s.instances], key=s.sample_id)
        for s in dataset.split("test")
    }
    save_region_cache(context.output_dir / REGIONS_DIR, queries)
    return path


def _retrieve(
    context: RunContext,
    checkpoint: Optional[Path],
    data: Optional[Path],
    embeddings: Optional[Path],
    mode: Optional[str],
    merge: Optional[str],
) -> Path:
    dataset = _dataset(context, data)
    model = _model(context, checkpoint)
    index = load_embeddings(embeddings or context.output_dir / GALLERY_EMBEDDINGS)
    regions = None
    cache = context.output_dir / REGIONS_DIR
    if mode is None and cache.exists():
        regions = load_region_cache(cache)
    results = retrieve_all(
        dataset.split("test"),
        model,
        _proposer(context, mode),
        index,
        merge or context.spec.merge,
        _plan(context).concat,
        regions,
    )
    path = context.output_dir / RESULTS_FILE
    save_results(path, results)
    return path


def _evaluate(context: RunContext, results: Optional[Path], data: Optional[Path]) -> Path:
    dataset = _dataset(context, data)
    ground_truth = GroundTruth.from_samples(dataset.split("test"), dataset.split("gallery"))
    report = evaluate(load_results(results or context.output_dir / RESULTS_FILE), ground_truth, context.spec.cutoffs)
    report.save(context.output_dir / "report.json")
    report.write_per_query_csv(context.output_dir / "per_query.csv")
    for key, value in sorted(report.means.items()):
        logger.info("%s = %.4f", key, value)
    return context.output_dir / "report.json"


def _eval_single(context: RunContext, embeddings: Optional[Path]) -> Path:
    index = load_embeddings(embeddings or context.output_dir / GALLERY_EMBEDDINGS)
    report = evaluate_single_product(index, context.spec.cutoffs)
    path = context.output_dir / "single_product_report.json"
    report.save(path)
    return path


# --------------------------------------------------------------------------
# COMMANDS
# --------------------------------------------------------------------------
@app.command
def gen_data(context: RunContext, workers: int = 1) -> None:
    """
    Generate the synthetic corpus.

    :param workers: Threads composing samples; the output does not depend on it.
    """
    context.output_dir.mkdir(parents=True, exist_ok=True)
    print(_run(context, "gen-data", _gen_data, workers=workers))


@app.command
def pretrain(context: RunContext, data: Optional[Path] = None, progress: bool = False) -> None:
    """
    Pretrain the model on the train split.

    :param data: Dataset directory; `<out>/data` when omitted.
    :param progress: Show a progress bar.
    """
    print(_run(context, "pretrain", _pretrain, data=data, progress=progress))


@app.command
def embed(
    context: RunContext,
    checkpoint: Optional[Path] = None,
    data: Optional[Path] = None,
    mode: Optional[ProposerMode] = None,
) -> None:
    """
    Build the gallery index and cache the query proposals.

    :param checkpoint: Model checkpoint; `<out>/pretrain/model.ckpt` when omitted.
    :param data: Dataset directory; `<out>/data` when omitted.
    :param mode: Proposer mode overriding the spec's.
    """
    print(_run(context, "embed", _embed, checkpoint=checkpoint, data=data, mode=mode))


@app.command
def retrieve(
    context: RunContext,
    checkpoint: Optional[Path] = None,
    data: Optional[Path] = None,
    embeddings: Optional[Path] = None,
    mode: Optional[ProposerMode] = None,
    merge: Optional[MergeRule] = None,
) -> None:
    """
    Rank the gallery for every test query.

    :param checkpoint: Model checkpoint; `<out>/pretrain/model.ckpt` when omitted.
    :param data: Dataset directory; `<out>/data` when omitted.
    :param embeddings: Gallery index; `<out>/embeddings/gallery.npz` when omitted.
    :param mode: Proposer mode; when given the cached proposals are not used.
    :param merge: Rule merging per-proposal scores.
    """
    print(_run(context, "retrieve", _retrieve, checkpoint=checkpoint, data=data, embeddings=embeddings, mode=mode, merge=merge))


@app.command(name="evaluate")
def evaluate_results(context: RunContext, results: Optional[Path] = None, data: Optional[Path] = None) -> None:
    """
    Score retrieval results.

    :param results: Results file; `<out>/results.jsonl` when omitted.
    :param data: Dataset directory; `<out>/data` when omitted.
    """
    print(_run(context, "evaluate", _evaluate, results=results, data=data))


@app.command
def eval_single(context: RunContext, embeddings: Optional[Path] = None) -> None:
    """
    Single-product retrieval: leave-one-out over the gallery.

    :param embeddings: Gallery index; `<out>/embeddings/gallery.npz` when omitted.
    """
    print(_run(context, "eval-single", _eval_single, embeddings=embeddings))


@app.command
def ablate(
    context: RunContext,
    arms: Literal["pretext", "layers", "detector", "zeroshot", "baselines"],
    workers: int = 1,
    progress: bool = False,
) -> None:
    """
    Run an ablation arm set at every seed.

    :param arms: Built-in arm set.
    :param workers: Threads composing samples.
    :param progress: Show pretraining progress bars.
    """
    runner = ExperimentRunner(context.spec, context.output_dir, context.meta["executor"], workers=workers, progress=progress)
    result = runner.run(arm_set(arms, context.spec))
    print(context.output_dir / METRICS_FILE)
    if result.failures:
        raise result.failures[0]


@app.command
def report(context: RunContext, check: bool = False, metrics: Optional[Path] = None) -> None:
    """
    Summarize `metrics.json` and evaluate the acceptance orderings.

    :param check: Exit with status 3 if a gating acceptance check fails.
    :param metrics: Metrics file; `<out>/metrics.json` when omitted.
    """
    values = read_metrics(metrics or context.output_dir / METRICS_FILE)
    summary = {
        arm: {key: entry["mean"] for key, entry in sorted(by_arm.items()) if isinstance(entry, dict) and "mean" in entry}
        for arm, by_arm in values.items()
    }
    checks = check_acceptance(values)
    for result in checks:
        logger.info("%s %s: %s", "PASS" if result.passed else "FAIL", result.name, result.detail)
    print(json.dumps({
        "means": summary,
        "checks": [{"name": c.name, "passed": c.passed, "gating": c.gating, "detail": c.detail} for c in checks],
    }, indent=1, sort_keys=True))
    if check:
        enforce_acceptance(checks)


def main(argv=None) -> int:
    return app.run(argv)


if __name__ == "__main__":
    sys.exit(main())
