import hashlib
import json
from functools import lru_cache
from typing import Any, Sequence, Union

import numpy as np
import torch


@lru_cache(maxsize=1024)
def to_kebab_case(snake_str: str) -> str:
    return snake_str.strip("_").replace("_", "-")


def canonical_json(value: Any) -> str:
    """
    Serialize `value` with sorted keys and no insignificant whitespace, so equal
    values always produce identical bytes.
    """
    return json.dumps(value, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_digest(value: Any, length: int = 16) -> str:
    return hashlib.sha256(canonical_json(value).encode("utf-8")).hexdigest()[:length]


def derive_rng(seed: int, *key: Union[int, Sequence[int]]) -> np.random.Generator:
    """
    Independent random stream for (seed, *key). Streams for different keys do
    not overlap, which is what lets samples be generated in any order.
    """
    entropy = [int(seed)]
    for part in key:
        if isinstance(part, (list, tuple)):
            entropy.extend(int(p) for p in part)
        else:
            entropy.append(int(part))
    return np.random.default_rng(np.random.SeedSequence(entropy))


def torch_generator(seed: int) -> torch.Generator:
    generator = torch.Generator()
    generator.manual_seed(int(seed))
    return generator


def set_deterministic(enabled: bool = True) -> None:
    """
    Single-threaded, deterministic torch kernels. Bit-identical metric output
    across runs is only guaranteed with this enabled.
    """
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        torch.set_num_threads(1)


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    inter = max(0.0, ix2 - ix1) * max(0.0, iy2 - iy1)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0
