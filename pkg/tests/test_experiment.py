import json
import logging

import pytest
import torch

from instance_retrieval.cli import main
from instance_retrieval.config import ArmSpec, ExperimentSpec, LossSwitches
from instance_retrieval.corpus import generate_catalog, query_categories
from instance_retrieval.error import AcceptanceCheckFailed, ConfigurationError
from instance_retrieval.experiment import (
    LAYER_TRIPLETS,
    METRICS_FILE,
    ExperimentRunner,
    aggregate,
    arm_set,
    check_acceptance,
    detector_arms,
    enforce_acceptance,
    plan_arm,
    plot_metrics,
    read_metrics,
    write_metrics,
)
from instance_retrieval.retrieval import MetricReport
from instance_retrieval.utils import set_deterministic
from tests import tiny_corpus, tiny_spec


def _report(value, chance=None) -> MetricReport:
    return MetricReport(
        cutoffs=[10],
        query_count=4,
        chance_precision=chance,
        means={"mAP@10": value, "mAR@10": value, "Prec@10": value},
    )


def _metrics(**medians):
    return {
        arm: {"seeds": [0], **{key: {"values": [v], "mean": v, "std": 0.0, "median": v} for key, v in values.items()}}
        for arm, values in medians.items()
    }


class TestArmSets:
    def test_built_in_sets(self) -> None:
        spec = ExperimentSpec()

        assert [a.name for a in arm_set("pretext", spec)] == ["masked", "masked_concat", "masked_itm", "masked_ctr", "masked_ctr_concat"]
        assert [a.layers for a in arm_set("layers", spec)] == list(LAYER_TRIPLETS)
        assert [a.proposer_mode for a in arm_set("detector", spec)] == ["oracle", "jitter", "heuristic", "whole_image"]
        assert [a.name for a in arm_set("zeroshot", spec)] == ["heldout_categories", "heldout_brands_1", "heldout_brands_2"]
        baselines = {a.name: a for a in arm_set("baselines", spec)}
        assert baselines["text_only"].layers == (6, 0, 0)
        assert not baselines["random_init"].pretrained

    def test_unknown_set(self) -> None:
        with pytest.raises(ConfigurationError):
            arm_set("everything", ExperimentSpec())


class TestPlanning:
    def test_seed_reaches_every_config(self, tmp_path) -> None:
        plan = plan_arm(tiny_spec(tmp_path), ArmSpec(name="plain"), 7)

        assert plan.seed == 7
        assert plan.corpus.seed == plan.model.seed == plan.pretrain.seed == 7
        assert plan.train_proposer.seed == plan.eval_proposer.seed == 7
        assert plan.held_out == ()
        assert plan.concat

    def test_overrides(self, tmp_path) -> None:
        spec = tiny_spec(tmp_path)

        jitter = plan_arm(spec, ArmSpec(name="j", proposer_mode="jitter", jitter_sigma=0.1, concat=False), 0)
        layers = plan_arm(spec, ArmSpec(name="l", layers=(0, 2, 1)), 0)
        masked = plan_arm(spec, ArmSpec(name="m", loss_switches=LossSwitches(ctr=False)), 0)

        assert jitter.eval_proposer.mode == "jitter" and jitter.eval_proposer.jitter_sigma == 0.1
        assert not jitter.concat
        assert layers.model.layers == (0, 2, 1)
        assert masked.pretrain.loss_switches.enabled() == ["mlm", "mrp"]

    def test_single_modality_losses(self, tmp_path) -> None:
        spec = tiny_spec(tmp_path)

        text = plan_arm(spec, ArmSpec(name="t", modality="text", layers=(3, 0, 0)), 0)
        image = plan_arm(spec, ArmSpec(name="i", modality="image", layers=(3, 0, 0)), 0)

        assert text.pretrain.loss_switches.enabled() == ["mlm"]
        assert image.pretrain.loss_switches.enabled() == ["mrp"]

    def test_invalid_overrides(self, tmp_path) -> None:
        with pytest.raises(ConfigurationError):
            plan_arm(tiny_spec(tmp_path), ArmSpec(name="x", layers=(0, 0, 0)), 0)

        with pytest.raises(ConfigurationError):
            plan_arm(tiny_spec(tmp_path), ArmSpec(name="x", modality="text", layers=(1, 1, 0)), 0)

    def test_training_key(self, tmp_path) -> None:
        spec = tiny_spec(tmp_path)
        keys = {arm.name: plan_arm(spec, arm, 0).training_key() for arm in detector_arms(spec)}

        assert len(set(keys.values())) == 1
        assert plan_arm(spec, ArmSpec(name="r", pretrained=False), 0).training_key() != keys["oracle"]
        assert plan_arm(spec, ArmSpec(name="s"), 1).training_key() != keys["oracle"]

    def test_held_out_categories(self, tmp_path) -> None:
        spec = tiny_spec(tmp_path)

        categories = plan_arm(spec, ArmSpec(name="c", held_out_category_fraction=0.25), 0)
        brands = plan_arm(spec, ArmSpec(name="b", held_out_brands=1), 0)

        assert len(categories.held_out) == 2
        assert set(categories.held_out) <= set(query_categories(categories.corpus))
        assert categories.corpus.held_out_categories == categories.held_out
        catalog = generate_catalog(brands.corpus)
        assert brands.held_out
        assert len({catalog[c].brand_id for c in brands.held_out}) == 1


class TestAggregation:
    def test_aggregate(self) -> None:
        metrics = aggregate({"hybrid": {1: _report(0.4, 0.1), 0: _report(0.2, 0.1), 2: _report(0.9, 0.1)}})

        entry = metrics["hybrid"]
        assert entry["seeds"] == [0, 1, 2]
        assert entry["mAP@10"]["values"] == [0.2, 0.4, 0.9]
        assert entry["mAP@10"]["mean"] == pytest.approx(0.5)
        assert entry["mAP@10"]["median"] == pytest.approx(0.4)
        assert entry["mAP@10"]["std"] == pytest.approx(0.2943920, abs=1e-6)
        assert entry["chance_precision"]["median"] == pytest.approx(0.1)

    def test_metrics_file(self, tmp_path) -> None:
        metrics = aggregate({"hybrid": {0: _report(0.5)}})

        write_metrics(tmp_path / METRICS_FILE, metrics)

        assert read_metrics(tmp_path / METRICS_FILE) == metrics
        assert (tmp_path / METRICS_FILE).read_text().endswith("\n")
        with pytest.raises(ConfigurationError):
            read_metrics(tmp_path / "missing.json")

    def test_plots(self, tmp_path) -> None:
        written = plot_metrics(aggregate({"a": {0: _report(0.5)}, "b": {0: _report(0.7)}}), tmp_path / "plots")

        assert sorted(p.name for p in written) == ["Prec_at_10.png", "mAP_at_10.png", "mAR_at_10.png"]
        assert all(p.is_file() for p in written)
        assert plot_metrics({}, tmp_path / "none") == []


class TestAcceptance:
    def test_all_orderings_hold(self) -> None:
        metrics = _metrics(
            oracle={"mAP@10": 0.8},
            jitter={"mAP@10": 0.6},
            whole_image={"mAP@10": 0.3},
            hybrid={"mAP@10": 0.6},
            random_init={"mAP@10": 0.2},
            text_only={"mAP@10": 0.45},
            heldout_brands_1={"Prec@10": 0.4},
            masked_ctr_concat={"mAP@10": 0.5},
            masked_concat={"mAP@10": 0.4},
            masked_itm={"mAP@10": 0.45},
        )
        metrics["heldout_brands_1"]["chance_precision"] = {"values": [0.1], "mean": 0.1, "median": 0.1}

        checks = {c.name: c for c in check_acceptance(metrics)}

        assert set(checks) == {
            "detector_ordering",
            "hybrid_vs_random_init",
            "hybrid_vs_text_only",
            "zeroshot_heldout_brands_1",
            "pretext_ordering",
        }
        assert all(checks[name].passed for name in checks if name != "pretext_ordering")
        assert not checks["pretext_ordering"].passed
        assert not checks["pretext_ordering"].gating
        enforce_acceptance(list(checks.values()))

    def test_failures_raise(self) -> None:
        metrics = _metrics(hybrid={"mAP@10": 0.5}, image_only={"mAP@10": 0.45})

        checks = check_acceptance(metrics)

        assert [c.passed for c in checks] == [False]
        with pytest.raises(AcceptanceCheckFailed) as info:
            enforce_acceptance(checks)
        assert info.value.exit_code == 3
        assert info.value.extensions["checks"][0]["name"] == "hybrid_vs_image_only"

    def test_detector_gap_must_exceed_noise(self) -> None:
        metrics = _metrics(oracle={"mAP@10": 0.4128}, jitter={"mAP@10": 0.4112}, whole_image={"mAP@10": 0.4110})

        checks = check_acceptance(metrics)

        assert [(c.name, c.passed) for c in checks] == [("detector_ordering", False)]
        assert check_acceptance(_metrics(oracle={"mAP@10": 0.46}, jitter={"mAP@10": 0.43}, whole_image={"mAP@10": 0.41}))[0].passed

    def test_missing_arms_skip_checks(self) -> None:
        assert check_acceptance(_metrics(oracle={"mAP@10": 0.9}, jitter={"mAP@10": 0.5})) == []


class TestExperimentRunner:
    def test_tiny_experiment(self, tmp_path, caplog) -> None:
        spec = tiny_spec(tmp_path / "out")
        arms = [
            ArmSpec(name="oracle", proposer_mode="oracle"),
            ArmSpec(name="whole_image", proposer_mode="whole_image"),
            ArmSpec(name="broken", layers=(0, 0, 0)),
        ]

        result = ExperimentRunner(spec).run(arms)

        out = tmp_path / "out"
        assert set(result.metrics) == {"oracle", "whole_image"}
        assert [f.stage for f in result.failures] == ["plan"]
        assert result.failures[0].exit_code == 1
        assert json.loads((out / "errors.json").read_text())[0]["arm"] == "broken"
        assert len(list((out / "checkpoints").iterdir())) == 1
        for arm in ("oracle", "whole_image"):
            run_dir = out / arm / "seed_0"
            assert (run_dir / "results.jsonl").is_file()
            assert MetricReport.load(run_dir / "report.json").chance_precision is not None
        assert read_metrics(out / METRICS_FILE) == result.metrics
        assert (out / "plots" / "mAP_at_10.png").is_file()

        with caplog.at_level(logging.INFO, logger="instance_retrieval.experiment"):
            again = ExperimentRunner(spec).run(arms[:2])

        assert "reusing checkpoint" in caplog.text
        assert again.metrics == result.metrics

    def test_random_init_skips_training(self, tmp_path) -> None:
        spec = tiny_spec(tmp_path / "out")

        result = ExperimentRunner(spec).run([ArmSpec(name="random_init", pretrained=False, proposer_mode="whole_image")])

        assert not result.failures
        assert not (tmp_path / "out" / "checkpoints").exists()

    def test_held_out_arm(self, tmp_path) -> None:
        spec = tiny_spec(tmp_path / "out", corpus=tiny_corpus(num_categories=8))

        result = ExperimentRunner(spec).run([ArmSpec(name="heldout_categories", held_out_category_fraction=0.25, proposer_mode="oracle")])

        assert not result.failures
        report = MetricReport.load(tmp_path / "out" / "heldout_categories" / "seed_0" / "report.json")
        assert report.chance_precision is not None
        assert result.metrics["heldout_categories"]["chance_precision"]["values"] == [report.chance_precision]

    def test_no_arms(self, tmp_path) -> None:
        with pytest.raises(ConfigurationError):
            ExperimentRunner(tiny_spec(tmp_path)).run([])


@pytest.mark.slow
class TestAcceptanceRuns:
    def test_detector_ordering(self, tmp_path) -> None:
        spec = ExperimentSpec(output_dir=str(tmp_path), seeds=[0, 1, 2])

        result = ExperimentRunner(spec).run(arm_set("detector", spec))

        checks = {c.name: c for c in check_acceptance(result.metrics)}
        assert checks["detector_ordering"].passed, checks["detector_ordering"].detail

    def test_zero_shot_beats_chance(self, tmp_path) -> None:
        spec = ExperimentSpec(output_dir=str(tmp_path), seeds=[0, 1, 2])

        result = ExperimentRunner(spec).run(arm_set("zeroshot", spec)[:2])

        checks = [c for c in check_acceptance(result.metrics) if c.name.startswith("zeroshot_")]
        assert checks and all(c.passed for c in checks), [c.detail for c in checks]

    def test_hybrid_beats_baselines(self, tmp_path) -> None:
        spec = ExperimentSpec(output_dir=str(tmp_path), seeds=[0, 1, 2])

        result = ExperimentRunner(spec).run(arm_set("baselines", spec))

        checks = [c for c in check_acceptance(result.metrics) if c.name.startswith("hybrid_vs_")]
        assert len(checks) == 3
        assert all(c.passed for c in checks), [c.detail for c in checks]

    def test_pretext_arms_complete(self, tmp_path) -> None:
        spec = ExperimentSpec(output_dir=str(tmp_path), seeds=[0])
        arms = arm_set("pretext", spec)

        result = ExperimentRunner(spec).run(arms)

        assert not result.failures
        assert set(result.metrics) == {arm.name for arm in arms}
        for arm in arms:
            assert MetricReport.load(tmp_path / arm.name / "seed_0" / "report.json").query_count > 0

    def test_pretext_ablation_is_reproducible(self, tmp_path, capsys) -> None:
        outputs = [tmp_path / "first", tmp_path / "second"]
        threads = torch.get_num_threads()
        try:
            for out in outputs:
                assert main(["--seed", "7", "--out", str(out), "--deterministic", "ablate", "pretext"]) == 0
        finally:
            set_deterministic(False)
            torch.set_num_threads(threads)

        assert (outputs[0] / METRICS_FILE).read_bytes() == (outputs[1] / METRICS_FILE).read_bytes()
