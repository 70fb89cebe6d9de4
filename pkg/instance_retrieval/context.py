from pathlib import Path
from typing import Any, Dict, Optional, Union


class RunContext:
    """
    What a pipeline stage needs to know about the run it belongs to: where to
    write, and which arm and seed it serves.
    """

    def __init__(
        self,
        output_dir: Union[str, Path],
        spec=None,
        arm: Optional[str] = None,
        seed: Optional[int] = None,
        meta: Optional[Dict[str, Any]] = None,
    ):
        if not meta:
            meta = {}

        # Run specific
        self.output_dir = Path(output_dir)
        self.spec = spec
        self.meta = meta

        # Arm/seed specific
        self.arm = arm
        self.seed = seed

        # Stage specific
        self.stage: Optional[str] = None

    def __copy__(self):
        context_copy = type(self)(self.output_dir)
        context_copy.__dict__.update(self.__dict__)
        return context_copy

    def for_arm(self, arm: str, seed: int) -> "RunContext":
        context = self.__copy__()
        context.arm = arm
        context.seed = seed
        context.stage = None
        return context

    @property
    def run_dir(self) -> Path:
        """`<out>/<arm>/seed_<s>` for arm runs, the output directory otherwise."""
        if self.arm is None:
            return self.output_dir
        return self.output_dir / self.arm / f"seed_{self.seed}"

    @property
    def errors_path(self) -> Path:
        return self.output_dir / "errors.json"

    def describe(self) -> Dict[str, Any]:
        return {key: value for key, value in (("stage", self.stage), ("arm", self.arm), ("seed", self.seed)) if value is not None}
