import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple, Union

from instance_retrieval.error import InputError

PAD_ID = 0
CLS_ID = 1
SEP_ID = 2
MASK_ID = 3
IMG_ID = 4
FIRST_CONTENT_ID = 5

RESERVED_TOKENS = ("[PAD]", "[CLS]", "[SEP]", "[MASK]", "[IMG]")

_COUNT_TOKEN = re.compile(r"^<(\d+)-piece set>$")


@dataclass(frozen=True)
class Vocabulary:
    """
    Synthetic token inventory. The id of a token is its index in `tokens`;
    the kind of every non-reserved token is encoded in its string form
    (`<K-piece set>`, `filler:j`, `brand:b`, `name:g.j`, `item:c`).
    """

    tokens: Tuple[str, ...]
    count_ids: Dict[int, int] = field(default_factory=dict)
    filler_ids: Tuple[int, ...] = ()
    brand_ids: Tuple[int, ...] = ()

    @property
    def size(self) -> int:
        return len(self.tokens)

    def count_token(self, count: int) -> int:
        try:
            return self.count_ids[count]
        except KeyError:
            raise InputError(f"no count token for {count} products") from None

    def decode(self, ids) -> List[str]:
        return [self.tokens[i] for i in ids]

    def to_json(self) -> Dict[str, str]:
        return {str(i): token for i, token in enumerate(self.tokens)}

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1), encoding="utf-8")

    @classmethod
    def from_json(cls, mapping: Dict[str, str]) -> "Vocabulary":
        tokens = tuple(mapping[str(i)] for i in range(len(mapping)))
        if tokens[:FIRST_CONTENT_ID] != RESERVED_TOKENS:
            raise InputError("vocabulary does not start with the reserved tokens")
        count_ids = {}
        for i, token in enumerate(tokens):
            match = _COUNT_TOKEN.match(token)
            if match:
                count_ids[int(match.group(1))] = i
        return cls(
            tokens=tokens,
            count_ids=count_ids,
            filler_ids=tuple(i for i, t in enumerate(tokens) if t.startswith("filler:")),
            brand_ids=tuple(i for i, t in enumerate(tokens) if t.startswith("brand:")),
        )

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocabulary":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


class VocabularyBuilder:
    def __init__(self):
        self._tokens: List[str] = list(RESERVED_TOKENS)

    def add(self, token: str) -> int:
        self._tokens.append(token)
        return len(self._tokens) - 1

    def add_many(self, tokens) -> Tuple[int, ...]:
        return tuple(self.add(token) for token in tokens)

    def build(self, count_ids: Dict[int, int], filler_ids: Tuple[int, ...], brand_ids: Tuple[int, ...]) -> Vocabulary:
        return Vocabulary(
            tokens=tuple(self._tokens),
            count_ids=dict(count_ids),
            filler_ids=filler_ids,
            brand_ids=brand_ids,
        )
