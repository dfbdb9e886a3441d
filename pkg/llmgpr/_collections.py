"""Ordered tables keyed by identifiers read from text files."""

from collections import OrderedDict
from typing import Any, ClassVar, Generic, Optional, TypeVar, cast

from llmgpr.errors import DataError

K = TypeVar("K")
V = TypeVar("V")

_missing = object()


def normalize_id(key: Any) -> Any:
    """Strip surrounding whitespace of string ids; other keys pass through."""
    return key.strip() if isinstance(key, str) else key


class OrderedIdDict(OrderedDict, Generic[K, V]):
    """OrderedDict keyed by opaque identifiers.

    Identifiers are compared after stripping surrounding whitespace, so ``"p1"``
    and ``" p1 "`` refer to the same entry. Case is significant.
    """

    unique = False  # type: ClassVar[bool]

    def __init__(self, *args: Any, **kwds: Any) -> None:
        super().__init__()
        for k, v in OrderedDict(*args, **kwds).items():
            self[k] = v

    def __setitem__(self, key: K, value: V) -> None:
        key = normalize_id(key)
        if self.unique and super().__contains__(key):
            raise DataError("duplicate id", [key])
        super().__setitem__(key, value)

    def __getitem__(self, key: K) -> V:
        return cast(V, super().__getitem__(normalize_id(key)))

    def __delitem__(self, key: K) -> None:
        super().__delitem__(normalize_id(key))

    def __contains__(self, key: Any) -> bool:
        return super().__contains__(normalize_id(key))

    def get(self, key: Any, default: Optional[Any] = None) -> Any:
        return super().get(normalize_id(key), default)

    def pop(self, key: Any, default: Any = _missing) -> Any:
        if default is _missing:
            return super().pop(normalize_id(key))
        return super().pop(normalize_id(key), default)


class UniqueIdDict(OrderedIdDict[K, V]):
    """OrderedIdDict refusing to overwrite an existing identifier."""

    unique = True
