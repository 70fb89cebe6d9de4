import argparse
import json
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import pytest

from instance_retrieval.app import CommandLineApp
from instance_retrieval.cli import app, main
from instance_retrieval.error import UsageError
from instance_retrieval.mapper import ArgumentMapper, function_summary
from instance_retrieval.retrieval import MetricReport, load_results
from tests import tiny_spec


def documented(
    context,
    name: str,
    count: int = 2,
    ratio: Optional[float] = None,
    flag: bool = False,
    toggle: Optional[bool] = None,
    mode: Literal["fast", "exact"] = "fast",
    sizes: Tuple[int, ...] = (1,),
    where: Path = Path("."),
) -> None:
    """
    Do something documented.

    :param name: Who to greet.
    :param count: How many times.
    """


class TestArgumentMapper:
    def test_map_function(self) -> None:
        parser = argparse.ArgumentParser()

        dests = ArgumentMapper().map_function(documented, parser)
        args = parser.parse_args(["bob", "--count", "3", "--flag", "--no-toggle", "--mode", "exact", "--sizes", "4", "5"])

        assert set(dests) == {"name", "count", "ratio", "flag", "toggle", "mode", "sizes", "where"}
        assert vars(args) == {
            "name": "bob",
            "count": 3,
            "ratio": None,
            "flag": True,
            "toggle": False,
            "mode": "exact",
            "sizes": [4, 5],
            "where": Path("."),
        }
        help_text = {action.dest: action.help for action in parser._actions}
        assert help_text["count"] == "How many times."

    def test_defaults_and_choices(self) -> None:
        parser = argparse.ArgumentParser()
        ArgumentMapper().map_function(documented, parser)

        args = parser.parse_args(["alice", "--ratio", "0.5", "--where", "/tmp"])

        assert args.ratio == 0.5 and args.flag is False and args.toggle is None
        assert args.where == Path("/tmp")
        with pytest.raises(SystemExit):
            parser.parse_args(["alice", "--mode", "slow"])

    def test_prefixed_dests(self) -> None:
        def options(seed: Optional[int] = None, out: Optional[Path] = None) -> None:
            pass

        parser = argparse.ArgumentParser()

        dests = ArgumentMapper(skip=(), dest_prefix="global_").map_function(options, parser)

        assert dests == {"global_seed": "seed", "global_out": "out"}
        assert parser.parse_args(["--seed", "4"]).global_seed == 4

    def test_unsupported_types(self) -> None:
        def mapping(context, values: Dict[str, int] = None) -> None:
            pass

        def untyped(context, value=1) -> None:
            pass

        def required_flag(context, flag: bool) -> None:
            pass

        def mixed(context, values: List[str] = None, other: Optional[int] = None) -> None:
            pass

        for function in (mapping, untyped, required_flag):
            with pytest.raises(TypeError):
                ArgumentMapper().map_function(function, argparse.ArgumentParser())

        ArgumentMapper().map_function(mixed, argparse.ArgumentParser())

    def test_summary(self) -> None:
        assert function_summary(documented) == "Do something documented."


class TestCommandLineApp:
    def test_registration(self) -> None:
        local = CommandLineApp(prog="local")

        @local.command
        def first_step(context) -> None:
            """First."""

        @local.command(name="second")
        def second_step(context) -> None:
            pass

        other = CommandLineApp(prog="other")

        @other.command(meta={"help": "Tagged elsewhere."})
        def third_step(context) -> None:
            pass

        local.add_command(third_step)

        assert list(local.commands) == ["first-step", "second", "third-step"]
        assert local.command_meta(third_step)["meta"] == {"help": "Tagged elsewhere."}
        with pytest.raises(ValueError):
            local.add_command(other.command(name="second")(lambda context: None))

    def test_run(self, capsys) -> None:
        local = CommandLineApp(prog="local")
        seen = []

        @local.setup_function
        def setup(prefix: str = "ctx") -> str:
            return prefix

        @local.command
        def greet(context, name: str, times: int = 1) -> None:
            seen.append((context, name, times))

        @local.command
        def refuse(context) -> None:
            raise UsageError("not today", extensions={"reason": "test"})

        assert local.run(["--prefix", "run", "greet", "ann", "--times", "2"]) == 0
        assert seen == [("run", "ann", 2)]
        assert local.run(["refuse"]) == 2
        record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert record == {"error_type": "UsageError", "message": "not today", "exit_code": 2, "reason": "test"}

    def test_bad_arguments_are_configuration_errors(self, capsys) -> None:
        local = CommandLineApp(prog="local", commands=[documented])

        assert local.run([]) == 1
        record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert record["error_type"] == "ConfigurationError"
        assert record["usage"].startswith("usage: local")

        assert local.run(["documented", "bob", "--mode", "slow"]) == 1
        assert local.run(["no-such-command"]) == 1
        assert main(["--seed", "three", "report"]) == 1

    def test_pipeline_commands(self) -> None:
        assert set(app.commands) == {"gen-data", "pretrain", "embed", "retrieve", "evaluate", "eval-single", "ablate", "report"}
        assert app.parser().parse_args(["--seed", "3", "ablate", "detector"]).arms == "detector"


@pytest.fixture
def spec_file(tmp_path) -> Path:
    path = tmp_path / "spec.json"
    path.write_text(tiny_spec(tmp_path / "unused").model_dump_json())
    return path


class TestPipeline:
    def test_single_stage_commands(self, spec_file, tmp_path, capsys) -> None:
        out = tmp_path / "out"
        base = ["--config", str(spec_file), "--out", str(out), "--log-level", "WARNING"]

        assert main(base + ["gen-data"]) == 0
        assert main(base + ["pretrain"]) == 0
        assert main(base + ["embed"]) == 0
        assert main(base + ["retrieve"]) == 0
        assert main(base + ["evaluate"]) == 0
        assert main(base + ["eval-single"]) == 0

        for produced in ("data", "pretrain/model.ckpt", "pretrain/loss_curve.csv", "embeddings/gallery.npz", "regions", "per_query.csv"):
            assert (out / produced).exists()
        report = MetricReport.load(out / "report.json")
        assert report.cutoffs == [3, 10]
        assert report.query_count > 0
        assert 0.0 <= report.metric("mAP", 10) <= 1.0
        assert MetricReport.load(out / "single_product_report.json").query_count > 0
        printed = capsys.readouterr().out.split()
        assert str(out / "results.jsonl") in printed

        first = load_results(out / "results.jsonl")
        assert main(base + ["retrieve", "--mode", "whole_image", "--merge", "mean"]) == 0
        assert [r.query_id for r in load_results(out / "results.jsonl")] == [r.query_id for r in first]

    def test_bad_config_exit_code(self, tmp_path, capsys) -> None:
        path = tmp_path / "broken.json"
        path.write_text(json.dumps({"model": {"d_model": 10, "n_heads": 4}}))

        assert main(["--config", str(path), "--out", str(tmp_path), "report"]) == 1
        assert '"error_type": "ConfigurationError"' in capsys.readouterr().err

    def test_missing_input_is_recorded(self, spec_file, tmp_path) -> None:
        out = tmp_path / "out"

        assert main(["--config", str(spec_file), "--out", str(out), "embed"]) == 2
        records = json.loads((out / "errors.json").read_text())
        assert records[0]["stage"] == "embed"
        assert records[0]["original_error_type"] == "InputError"

    def test_report_check(self, tmp_path, capsys) -> None:
        metrics = {
            arm: {"seeds": [0], "mAP@10": {"values": [v], "mean": v, "std": 0.0, "median": v}}
            for arm, v in (("oracle", 0.1), ("jitter", 0.2), ("whole_image", 0.3))
        }
        (tmp_path / "metrics.json").write_text(json.dumps(metrics))
        base = ["--out", str(tmp_path)]

        assert main(base + ["report"]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["means"]["oracle"] == {"mAP@10": 0.1}
        assert summary["checks"][0]["name"] == "detector_ordering"
        assert not summary["checks"][0]["passed"]
        assert main(base + ["report", "--check"]) == 3
        assert main(["--out", str(tmp_path / "empty"), "report"]) == 1
