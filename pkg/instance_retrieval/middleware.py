import json
import logging
import time
from functools import partial
from pathlib import Path
from typing import Any, Callable, Dict, List

from instance_retrieval.context import RunContext
from instance_retrieval.error import StageFailure

logger = logging.getLogger(__name__)


def append_error_record(path: Path, record: Dict[str, Any]) -> None:
    """Append `record` to the JSON list in `path`, creating it if needed."""
    records: List[Dict[str, Any]] = []
    if path.exists():
        try:
            records = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            logger.warning("%s is not valid JSON; starting a new error list", path)
    records.append(record)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(records, indent=1, sort_keys=True, default=str), encoding="utf-8")


def middleware_catch_exception(next_, context: RunContext, **args):
    """
    Stage middleware, record a failing stage in `errors.json` and re-raise it
    as a StageFailure carrying the stage, arm and seed.
    """
    try:
        return next_(context, **args)
    except StageFailure:
        raise
    except Exception as err:
        logger.exception(
            "stage '%s'%s failed: %s",
            context.stage,
            f" (arm {context.arm}, seed {context.seed})" if context.arm is not None else "",
            err,
        )
        extensions = {k: v for k, v in context.describe().items() if k != "stage"}
        failure = StageFailure(context.stage or "unknown", err, **extensions)
        append_error_record(context.errors_path, failure.to_record())
        raise failure from err


def middleware_timing(next_, context: RunContext, **args):
    """
    Stage middleware, log start and finish with the elapsed time.
    """
    label = context.stage if context.arm is None else f"{context.stage} [{context.arm} seed {context.seed}]"
    logger.info("%s: started", label)
    start = time.perf_counter()
    value = next_(context, **args)
    logger.info("%s: finished in %.2fs", label, time.perf_counter() - start)
    return value


def middleware_combined(middleware: List[Callable], resolver: Callable) -> Callable:
    """
    Wrap `resolver` so the first middleware in the list runs outermost.
    """
    wrapped = resolver
    for layer in reversed(middleware):
        wrapped = partial(layer, wrapped)
    return wrapped
