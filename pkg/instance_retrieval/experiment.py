"""
Experiment runner.

An experiment is a list of arms, each a set of overrides on the base
`ExperimentSpec`, run once per seed through the stages gen-data, pretrain,
embed, retrieve and evaluate. Arms whose training inputs coincide share one
checkpoint.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from instance_retrieval.config import (
    ArmSpec,
    CorpusConfig,
    ExperimentSpec,
    LossSwitches,
    ModelConfig,
    PretrainConfig,
    ProposerConfig,
    derive_config,
)
from instance_retrieval.context import RunContext
from instance_retrieval.corpus import DatasetBundle, build_dataset, generate_catalog, held_out_brands, query_categories
from instance_retrieval.error import AcceptanceCheckFailed, ConfigurationError, StageFailure
from instance_retrieval.executor import StageExecutor
from instance_retrieval.model import HybridStreamTransformer, load_checkpoint
from instance_retrieval.pretrain import PretrainingHeads, train
from instance_retrieval.proposer import RegionProposer
from instance_retrieval.retrieval import (
    GalleryIndex,
    GroundTruth,
    MetricReport,
    build_gallery_index,
    chance_precision,
    evaluate,
    restrict_ground_truth,
    retrieve_all,
    save_results,
)
from instance_retrieval.utils import config_digest, derive_rng

logger = logging.getLogger(__name__)

ACCEPTANCE_CUTOFF = 10
ZERO_SHOT_CATEGORY_FRACTION = 0.25
BASELINE_MARGIN = 0.10
DETECTOR_SPREAD = 0.05
CHANCE_MULTIPLE = 3.0

METRICS_FILE = "metrics.json"

_HOLDOUT_STREAM = 0x401D


# --------------------------------------------------------------------------
# ARM SETS
# --------------------------------------------------------------------------
def pretext_arms(spec: ExperimentSpec) -> List[ArmSpec]:
    masked = LossSwitches(mlm=True, mrp=True, ctr=False, itm=False)
    return [
        ArmSpec(name="masked", loss_switches=masked, concat=False),
        ArmSpec(name="masked_concat", loss_switches=masked, concat=True),
        ArmSpec(name="masked_itm", loss_switches=LossSwitches(mlm=True, mrp=True, ctr=False, itm=True), concat=False),
        ArmSpec(name="masked_ctr", loss_switches=LossSwitches(mlm=True, mrp=True, ctr=True, itm=False), concat=False),
        ArmSpec(name="masked_ctr_concat", loss_switches=LossSwitches(mlm=True, mrp=True, ctr=True, itm=False), concat=True),
    ]


LAYER_TRIPLETS = ((6, 0, 6), (6, 6, 0), (0, 6, 6), (2, 5, 5), (5, 2, 5), (5, 5, 2), (2, 2, 2), (8, 8, 8), (4, 4, 4))


def layer_arms(spec: ExperimentSpec) -> List[ArmSpec]:
    return [ArmSpec(name=f"layers_{L}-{K}-{H}", layers=(L, K, H)) for L, K, H in LAYER_TRIPLETS]


def detector_arms(spec: ExperimentSpec) -> List[ArmSpec]:
    return [
        ArmSpec(name="oracle", proposer_mode="oracle"),
        ArmSpec(name="jitter", proposer_mode="jitter", jitter_sigma=0.05),
        ArmSpec(name="heuristic", proposer_mode="heuristic"),
        ArmSpec(name="whole_image", proposer_mode="whole_image"),
    ]


def zeroshot_arms(spec: ExperimentSpec) -> List[ArmSpec]:
    return [
        ArmSpec(name="heldout_categories", held_out_category_fraction=ZERO_SHOT_CATEGORY_FRACTION),
        ArmSpec(name="heldout_brands_1", held_out_brands=1),
        ArmSpec(name="heldout_brands_2", held_out_brands=2),
    ]


def baseline_arms(spec: ExperimentSpec) -> List[ArmSpec]:
    depth = sum(spec.model.layers)
    return [
        ArmSpec(name="hybrid"),
        ArmSpec(name="random_init", pretrained=False),
        ArmSpec(name="text_only", modality="text", layers=(depth, 0, 0)),
        ArmSpec(name="image_only", modality="image", layers=(depth, 0, 0)),
    ]


ARM_SETS: Dict[str, Callable[[ExperimentSpec], List[ArmSpec]]] = {
    "pretext": pretext_arms,
    "layers": layer_arms,
    "detector": detector_arms,
    "zeroshot": zeroshot_arms,
    "baselines": baseline_arms,
}


def arm_set(name: str, spec: ExperimentSpec) -> List[ArmSpec]:
    try:
        return ARM_SETS[name](spec)
    except KeyError:
        raise ConfigurationError(f"unknown ablation '{name}', expected one of {', '.join(ARM_SETS)}") from None


# --------------------------------------------------------------------------
# PLANNING
# --------------------------------------------------------------------------
@dataclass(frozen=True)
class ArmPlan:
    """Fully resolved configuration of one arm at one seed."""

    arm: ArmSpec
    seed: int
    corpus: CorpusConfig
    model: ModelConfig
    pretrain: PretrainConfig
    train_proposer: ProposerConfig
    eval_proposer: ProposerConfig
    concat: bool
    held_out: Tuple[int, ...] = ()

    def training_key(self) -> str:
        """Digest of everything that determines the pretrained weights."""
        return config_digest({
            "corpus": self.corpus.model_dump(mode="json"),
            "model": self.model.model_dump(mode="json"),
            "pretrain": self.pretrain.model_dump(mode="json"),
            "train_proposer": self.train_proposer.model_dump(mode="json"),
            "pretrained": self.arm.pretrained,
        })


def held_out_categories(corpus: CorpusConfig, arm: ArmSpec) -> Tuple[int, ...]:
    if arm.held_out_category_fraction:
        reachable = np.array(query_categories(corpus))
        count = max(1, int(round(arm.held_out_category_fraction * corpus.num_categories)))
        chosen = derive_rng(corpus.seed, _HOLDOUT_STREAM).permutation(reachable)[:count]
        return tuple(sorted(int(c) for c in chosen))
    if arm.held_out_brands:
        return held_out_brands(generate_catalog(corpus), corpus, arm.held_out_brands)
    return ()


def plan_arm(spec: ExperimentSpec, arm: ArmSpec, seed: int) -> ArmPlan:
    """
    Apply `arm`'s overrides to `spec` at `seed`.

    Raises:
        ConfigurationError: If the overrides produce an invalid configuration.
    """
    corpus = derive_config(spec.corpus, seed=seed)
    held_out = held_out_categories(corpus, arm)
    if held_out:
        corpus = derive_config(corpus, held_out_categories=held_out)

    model_update: Dict[str, Any] = {"seed": seed}
    if arm.layers is not None:
        model_update.update(zip(("L", "K", "H"), arm.layers))
    if arm.modality is not None:
        model_update["modality"] = arm.modality
    model = derive_config(spec.model, **model_update)

    switches = arm.loss_switches or spec.pretrain.loss_switches
    if model.modality == "text":
        switches = LossSwitches(mlm=True, mrp=False, ctr=False, itm=False)
    elif model.modality == "image":
        switches = LossSwitches(mlm=False, mrp=True, ctr=False, itm=False)
    pretrain = derive_config(spec.pretrain, seed=seed, loss_switches=switches)

    proposer_update: Dict[str, Any] = {"seed": seed}
    if arm.proposer_mode is not None:
        proposer_update["mode"] = arm.proposer_mode
    if arm.jitter_sigma is not None:
        proposer_update["jitter_sigma"] = arm.jitter_sigma
    return ArmPlan(
        arm=arm,
        seed=seed,
        corpus=corpus,
        model=model,
        pretrain=pretrain,
        train_proposer=derive_config(spec.train_proposer, seed=seed),
        eval_proposer=derive_config(spec.proposer, **proposer_update),
        concat=spec.concat if arm.concat is None else arm.concat,
        held_out=held_out,
    )


# --------------------------------------------------------------------------
# RUNNER
# --------------------------------------------------------------------------
@dataclass
class ExperimentResult:
    reports: Dict[str, Dict[int, MetricReport]] = field(default_factory=dict)
    failures: List[StageFailure] = field(default_factory=list)
    metrics: Dict[str, Any] = field(default_factory=dict)


class ExperimentRunner:
    """
    Runs arms of one experiment spec, caching datasets in memory and
    checkpoints under `<out>/checkpoints/<training key>/`.
    """

    def __init__(
        self,
        spec: ExperimentSpec,
        output_dir: Optional[Path] = None,
        executor: Optional[StageExecutor] = None,
        workers: int = 1,
        progress: bool = False,
    ):
        self.spec = spec
        self.output_dir = Path(output_dir if output_dir is not None else spec.output_dir)
        self.executor = executor or StageExecutor()
        self.workers = workers
        self.progress = progress
        self.context = RunContext(self.output_dir, spec=spec)
        self._datasets: Dict[str, DatasetBundle] = {}

    # ---- stages -----------------------------------------------------------
    def dataset(self, context: RunContext, config: CorpusConfig) -> DatasetBundle:
        key = config_digest(config.model_dump(mode="json"))
        if key not in self._datasets:
            self._datasets[key] = build_dataset(config, workers=self.workers)
        return self._datasets[key]

    def pretrained_model(self, context: RunContext, plan: ArmPlan, dataset: DatasetBundle) -> HybridStreamTransformer:
        model_config = plan.model
        if dataset.vocabulary.size > model_config.vocab_size:
            raise ConfigurationError(f"vocabulary of {dataset.vocabulary.size} tokens does not fit vocab_size={model_config.vocab_size}")
        if not plan.arm.pretrained:
            model = HybridStreamTransformer(model_config)
            model.eval()
            return model
        directory = self.output_dir / "checkpoints" / plan.training_key()
        checkpoint = directory / "model.ckpt"
        if checkpoint.exists():
            logger.info("reusing checkpoint %s", checkpoint)
            return load_checkpoint(checkpoint)[0]
        model = HybridStreamTransformer(model_config)
        heads = PretrainingHeads(model_config)
        train(model, dataset, plan.pretrain, RegionProposer(plan.train_proposer), directory, heads=heads, progress=self.progress)
        return model

    def index(self, context: RunContext, plan: ArmPlan, dataset: DatasetBundle, model: HybridStreamTransformer) -> GalleryIndex:
        return build_gallery_index(dataset.split("gallery"), model, RegionProposer(plan.eval_proposer), concat=plan.concat)

    def results(self, context: RunContext, plan: ArmPlan, dataset: DatasetBundle, model, index: GalleryIndex):
        results = retrieve_all(dataset.split("test"), model, RegionProposer(plan.eval_proposer), index, self.spec.merge, plan.concat)
        context.run_dir.mkdir(parents=True, exist_ok=True)
        save_results(context.run_dir / "results.jsonl", results)
        return results

    def report(self, context: RunContext, plan: ArmPlan, dataset: DatasetBundle, results) -> MetricReport:
        ground_truth = GroundTruth.from_samples(dataset.split("test"), dataset.split("gallery"))
        if plan.held_out:
            ground_truth = restrict_ground_truth(ground_truth, plan.held_out)
        report = evaluate(results, ground_truth, self.spec.cutoffs)
        report = report.model_copy(update={"chance_precision": chance_precision(ground_truth)})
        report.save(context.run_dir / "report.json")
        report.write_per_query_csv(context.run_dir / "per_query.csv")
        return report

    def plan(self, context: RunContext, arm: ArmSpec, seed: int) -> ArmPlan:
        return plan_arm(self.spec, arm, seed)

    def run_arm(self, arm: ArmSpec, seed: int) -> MetricReport:
        context = self.context.for_arm(arm.name, seed)
        plan = self.executor.run("plan", self.plan, context, arm=arm, seed=seed)
        return self.run_plan(plan, context)

    def run_plan(self, plan: ArmPlan, context: Optional[RunContext] = None) -> MetricReport:
        context = context or self.context.for_arm(plan.arm.name, plan.seed)
        run = self.executor.run
        dataset = run("gen-data", self.dataset, context, config=plan.corpus)
        model = run("pretrain", self.pretrained_model, context, plan=plan, dataset=dataset)
        index = run("embed", self.index, context, plan=plan, dataset=dataset, model=model)
        results = run("retrieve", self.results, context, plan=plan, dataset=dataset, model=model, index=index)
        return run("evaluate", self.report, context, plan=plan, dataset=dataset, results=results)

    # ---- experiment -------------------------------------------------------
    def run(self, arms: Optional[Sequence[ArmSpec]] = None) -> ExperimentResult:
        """
        Run every arm at every seed. A failing arm/seed is recorded and the
        remaining ones still run; metrics of the completed runs are written
        either way.
        """
        arms = list(arms if arms is not None else self.spec.arms)
        if not arms:
            raise ConfigurationError("the experiment has no arms")
        result = ExperimentResult()
        for arm in arms:
            for seed in self.spec.seeds:
                try:
                    report = self.run_arm(arm, seed)
                except StageFailure as failure:
                    result.failures.append(failure)
                    continue
                result.reports.setdefault(arm.name, {})[seed] = report
        result.metrics = aggregate(result.reports)
        write_metrics(self.output_dir / METRICS_FILE, result.metrics)
        plot_metrics(result.metrics, self.output_dir / "plots")
        return result


# --------------------------------------------------------------------------
# AGGREGATION
# --------------------------------------------------------------------------
def aggregate(reports: Dict[str, Dict[int, MetricReport]]) -> Dict[str, Any]:
    """Per arm and metric: values by seed order, mean, population std and median."""
    metrics: Dict[str, Any] = {}
    for arm, by_seed in reports.items():
        seeds = sorted(by_seed)
        entry: Dict[str, Any] = {"seeds": seeds}
        for key in sorted(by_seed[seeds[0]].means):
            values = [by_seed[s].means[key] for s in seeds]
            entry[key] = {
                "values": values,
                "mean": float(np.mean(values)),
                "std": float(np.std(values)),
                "median": float(np.median(values)),
            }
        chances = [by_seed[s].chance_precision for s in seeds if by_seed[s].chance_precision is not None]
        if chances:
            entry["chance_precision"] = {"values": chances, "mean": float(np.mean(chances)), "median": float(np.median(chances))}
        metrics[arm] = entry
    return metrics


def write_metrics(path: Path, metrics: Dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(metrics, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def read_metrics(path: Path) -> Dict[str, Any]:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigurationError(f"cannot read metrics file {path}: {err}") from err


def plot_metrics(metrics: Dict[str, Any], directory: Path) -> List[Path]:
    """One bar chart per metric: arm means with std error bars."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not metrics:
        return []
    directory.mkdir(parents=True, exist_ok=True)
    arms = list(metrics)
    keys = sorted({k for entry in metrics.values() for k in entry if "@" in k})
    written = []
    for key in keys:
        means = [metrics[a].get(key, {}).get("mean", 0.0) for a in arms]
        stds = [metrics[a].get(key, {}).get("std", 0.0) for a in arms]
        figure, axis = plt.subplots(figsize=(max(4.0, 0.9 * len(arms) + 1.5), 3.5))
        axis.bar(range(len(arms)), means, yerr=stds, capsize=3, color="tab:blue")
        axis.set_xticks(range(len(arms)))
        axis.set_xticklabels(arms, rotation=30, ha="right")
        axis.set_ylim(0.0, 1.0)
        axis.set_ylabel(key)
        figure.tight_layout()
        path = directory / f"{key.replace('@', '_at_')}.png"
        figure.savefig(path, dpi=100)
        plt.close(figure)
        written.append(path)
    return written


# --------------------------------------------------------------------------
# ACCEPTANCE
# --------------------------------------------------------------------------
@dataclass(frozen=True)
class AcceptanceCheck:
    name: str
    passed: bool
    detail: str
    gating: bool = True


def _median(metrics: Dict[str, Any], arm: str, key: str) -> Optional[float]:
    entry = metrics.get(arm, {}).get(key)
    return None if entry is None else entry["median"]


def check_acceptance(metrics: Dict[str, Any], cutoff: int = ACCEPTANCE_CUTOFF) -> List[AcceptanceCheck]:
    """
    Evaluate the orderings that apply to the arms present in `metrics`:
    detector ordering, baseline margins, zero-shot precision against chance,
    and (non-gating) the pretext ordering.
    """
    checks: List[AcceptanceCheck] = []
    mAP = f"mAP@{cutoff}"

    detector = [_median(metrics, arm, mAP) for arm in ("oracle", "jitter", "whole_image")]
    if None not in detector:
        oracle, jitter, whole = detector
        checks.append(AcceptanceCheck(
            "detector_ordering",
            oracle > jitter > whole and oracle - whole >= DETECTOR_SPREAD,
            f"oracle {oracle:.4f} > jitter {jitter:.4f} > whole_image {whole:.4f}, spread >= {DETECTOR_SPREAD}",
        ))

    hybrid = _median(metrics, "hybrid", mAP)
    if hybrid is not None:
        for baseline in ("random_init", "text_only", "image_only"):
            other = _median(metrics, baseline, mAP)
            if other is not None:
                checks.append(AcceptanceCheck(
                    f"hybrid_vs_{baseline}",
                    hybrid - other >= BASELINE_MARGIN,
                    f"hybrid {hybrid:.4f} - {baseline} {other:.4f} >= {BASELINE_MARGIN}",
                ))

    for arm in sorted(a for a in metrics if a.startswith("heldout_")):
        precision = _median(metrics, arm, f"Prec@{cutoff}")
        chance = metrics[arm].get("chance_precision", {}).get("median")
        if precision is not None and chance is not None:
            checks.append(AcceptanceCheck(
                f"zeroshot_{arm}",
                precision >= CHANCE_MULTIPLE * chance,
                f"Prec@{cutoff} {precision:.4f} >= {CHANCE_MULTIPLE} x chance {chance:.4f}",
            ))

    pretext = [metrics.get(arm, {}).get(mAP, {}).get("mean") for arm in ("masked_ctr_concat", "masked_concat", "masked_itm")]
    if None not in pretext:
        ctr, masked, itm = pretext
        checks.append(AcceptanceCheck(
            "pretext_ordering",
            ctr >= masked >= itm,
            f"ctr {ctr:.4f} >= masked {masked:.4f} >= itm {itm:.4f}",
            gating=False,
        ))
    return checks


def enforce_acceptance(checks: Sequence[AcceptanceCheck]) -> None:
    failed = [c for c in checks if c.gating and not c.passed]
    if failed:
        raise AcceptanceCheckFailed(
            f"{len(failed)} acceptance check(s) failed: {', '.join(c.name for c in failed)}",
            extensions={"checks": [{"name": c.name, "detail": c.detail} for c in failed]},
        )
