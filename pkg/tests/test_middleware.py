import json
import logging
from copy import copy

import pytest

from instance_retrieval.context import RunContext
from instance_retrieval.error import ConfigurationError, EncodingError, StageFailure
from instance_retrieval.executor import StageExecutor
from instance_retrieval.middleware import append_error_record, middleware_catch_exception, middleware_combined, middleware_timing


class TestRunContext:
    def test_copy_is_independent(self, tmp_path) -> None:
        context = RunContext(tmp_path, meta={"executor": "shared"})

        duplicate = copy(context)
        duplicate.stage = "embed"

        assert context.stage is None
        assert duplicate.meta is context.meta
        assert duplicate.output_dir == tmp_path

    def test_run_dir(self, tmp_path) -> None:
        context = RunContext(tmp_path)
        arm = context.for_arm("oracle", 3)

        assert context.run_dir == tmp_path
        assert arm.run_dir == tmp_path / "oracle" / "seed_3"
        assert arm.errors_path == tmp_path / "errors.json"
        assert arm.describe() == {"arm": "oracle", "seed": 3}


class TestMiddleware:
    def test_order(self, tmp_path) -> None:
        calls = []

        def outer(next_, context, **args):
            calls.append("outer")
            return next_(context, **args)

        def inner(next_, context, **args):
            calls.append("inner")
            return next_(context, **args) + 1

        def resolver(context, value):
            calls.append("resolver")
            return value

        assert middleware_combined([outer, inner], resolver)(RunContext(tmp_path), value=1) == 2
        assert calls == ["outer", "inner", "resolver"]

    def test_timing_logs(self, tmp_path, caplog) -> None:
        context = RunContext(tmp_path)
        context.stage = "gen-data"

        with caplog.at_level(logging.INFO, logger="instance_retrieval.middleware"):
            assert middleware_timing(lambda c: "done", context) == "done"

        assert "gen-data: started" in caplog.text
        assert "gen-data: finished" in caplog.text

    def test_failure_is_recorded(self, tmp_path) -> None:
        context = RunContext(tmp_path).for_arm("jitter", 1)
        context.stage = "embed"

        def broken(context):
            raise EncodingError("cannot encode gallery sample 7", sample_id=7)

        with pytest.raises(StageFailure) as info:
            middleware_catch_exception(broken, context)

        assert info.value.stage == "embed"
        assert info.value.exit_code == 2
        records = json.loads((tmp_path / "errors.json").read_text())
        assert records == [info.value.to_record()]
        assert records[0]["stage"] == "embed"
        assert records[0]["arm"] == "jitter"
        assert records[0]["seed"] == 1
        assert records[0]["sample_id"] == 7
        assert records[0]["original_error_type"] == "EncodingError"

    def test_error_records_accumulate(self, tmp_path) -> None:
        path = tmp_path / "errors.json"
        path.write_text("not json")

        append_error_record(path, {"stage": "a"})
        append_error_record(path, {"stage": "b"})

        assert [r["stage"] for r in json.loads(path.read_text())] == ["a", "b"]


class TestStageExecutor:
    def test_stage_name_on_copy(self, tmp_path) -> None:
        context = RunContext(tmp_path)
        seen = []

        result = StageExecutor().run("retrieve", lambda c, value: seen.append(c.stage) or value * 2, context, value=4)

        assert result == 8
        assert seen == ["retrieve"]
        assert context.stage is None

    def test_configuration_failure_keeps_exit_code(self, tmp_path) -> None:
        def invalid(context):
            raise ConfigurationError("bad layers")

        with pytest.raises(StageFailure) as info:
            StageExecutor().run("pretrain", invalid, RunContext(tmp_path))

        assert info.value.exit_code == 1
        assert isinstance(info.value.original_error, ConfigurationError)

    def test_failure_wrapped_once(self, tmp_path) -> None:
        executor = StageExecutor()
        context = RunContext(tmp_path)

        def inner(context):
            raise ValueError("boom")

        def outer(context):
            return executor.run("inner", inner, context)

        with pytest.raises(StageFailure) as info:
            executor.run("outer", outer, context)

        assert info.value.stage == "inner"
        assert len(json.loads((tmp_path / "errors.json").read_text())) == 1

    def test_custom_middleware(self, tmp_path) -> None:
        def doubled(next_, context, **args):
            return 2 * next_(context, **args)

        assert StageExecutor(middleware=[doubled]).run("x", lambda c: 21, RunContext(tmp_path)) == 42
