from copy import copy
from typing import Any, Callable, List, Optional

from instance_retrieval.context import RunContext
from instance_retrieval.middleware import middleware_catch_exception, middleware_combined, middleware_timing


class StageExecutor:
    """
    Runs pipeline stages through a middleware chain.

    Stages run strictly one after the other; a stage is any callable taking
    the `RunContext` first.
    """

    default_middleware = (middleware_catch_exception, middleware_timing)

    def __init__(self, middleware: Optional[List[Callable]] = None):
        """
        :param middleware: Middleware functions `(next_, context, **args)`,
            outermost first. Defaults to error recording plus timing.
        """
        self.middleware = list(self.default_middleware if middleware is None else middleware)

    def run(self, stage: str, function: Callable[..., Any], context: RunContext, **args) -> Any:
        stage_context = copy(context)
        stage_context.stage = stage
        return middleware_combined(self.middleware, function)(stage_context, **args)
