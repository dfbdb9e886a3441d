"""Configuration handlers."""

import collections.abc
import configparser
import enum
import os
import pathlib
from typing import (
    Any,
    Dict,
    Iterable,
    List,
    Mapping,
    MutableMapping,
    Optional,
    Sequence,
    Type,
    TypeVar,
    Union,
)

from llmgpr.errors import UsageError

DEFAULT_FILE = str(pathlib.Path(__file__).with_name("llmgpr.cfg.default"))
CONFIG_FILES = [
    os.path.expanduser("~/.llmgpr.cfg"),
    "llmgpr.cfg",
]  # read after DEFAULT_FILE; latter overrides former

LIST_SUFFIX = "@list"

EnumType = TypeVar("EnumType", bound=enum.Enum)
PathLike = Union[str, pathlib.Path]


class SectionWrapper:
    """A wrapper class of `configparser.SectionProxy` with typed getters.

    Values in `override` take precedence over the file values; they may be
    strings (as given on the command line) or already-typed objects.
    """

    def __init__(self, data: configparser.SectionProxy) -> None:
        self._data = data  # type: configparser.SectionProxy
        self.override = {}  # type: MutableMapping[str, Any]

    def __getitem__(self, key: str) -> Any:
        if key in self.override:
            return self.override[key]
        if key in self._data:
            return self._data[key]
        raise KeyError(key)

    def __contains__(self, key: str) -> bool:
        return key in self.override or key in self._data

    def _typed(self, key: str, conv: Any) -> Any:
        value = self[key]
        if not isinstance(value, str):
            return conv(value)
        try:
            return conv(value.strip())
        except ValueError:
            raise UsageError(
                "invalid value for {}.{}: {!r}".format(self._data.name, key, value)
            ) from None

    def get_int(self, key: str) -> int:
        """Get an item as an integer."""
        return int(self._typed(key, int))

    def get_float(self, key: str) -> float:
        """Get an item as a float."""
        return float(self._typed(key, float))

    def get_str(self, key: str) -> str:
        """Get an item as a string."""
        return str(self[key]).strip()

    def get_enum(self, key: str, enum_class: Type[EnumType]) -> EnumType:
        """Get an item as an Enum-class object."""
        value = self[key]
        if isinstance(value, enum_class):
            return value
        for i in enum_class:
            if i.name.lower() == str(value).strip().lower():
                return i
        raise UsageError(
            "{}.{} must be one of {}".format(
                self._data.name, key, ", ".join(i.name.lower() for i in enum_class)
            )
        )

    def get_list(self, key: str) -> List[str]:
        """Get a List[str] object from a `key@list` entry."""
        key_for_a_list = key + LIST_SUFFIX
        if key in self.override:
            value = self.override[key]
        elif key_for_a_list in self.override:
            value = self.override[key_for_a_list]
        elif key_for_a_list in self._data:
            value = self._data[key_for_a_list]
        else:
            raise KeyError(key)
        if isinstance(value, str):
            return [v for v in value.replace(",", " ").split(" ") if v]
        elif isinstance(value, collections.abc.Sequence):
            return [str(v) for v in value]
        else:
            raise TypeError(value)

    def get_floats(self, key: str) -> List[float]:
        """Get a list of floats from a `key@list` entry."""
        try:
            return [float(v) for v in self.get_list(key)]
        except ValueError:
            raise UsageError("invalid number in {}.{}".format(self._data.name, key))

    def get_ints(self, key: str) -> List[int]:
        """Get a list of integers from a `key@list` entry."""
        try:
            return [int(v) for v in self.get_list(key)]
        except ValueError:
            raise UsageError("invalid integer in {}.{}".format(self._data.name, key))

    def resolved(self) -> Dict[str, str]:
        """Return every key with overrides applied, as strings."""
        result = {k: v for k, v in self._data.items()}
        for k, v in self.override.items():
            if k + LIST_SUFFIX in result:
                k = k + LIST_SUFFIX
            if isinstance(v, (list, tuple)):
                v = " ".join(str(x) for x in v)
            result[k] = str(v)
        return result


class Config(configparser.ConfigParser):
    """Dictionary to store the configurations.

    The shipped default file defines every section and key; any other file or
    override naming something absent from it is rejected.
    """

    def __init__(self, files: Optional[Iterable[PathLike]] = None) -> None:
        super().__init__(inline_comment_prefixes="#")
        self._wrappers = {}  # type: Dict[str, SectionWrapper]
        if not super().read(DEFAULT_FILE):
            raise UsageError("default configuration not found: " + DEFAULT_FILE)
        self.known = {
            s: frozenset(self.options(s)) for s in self.sections()
        }  # type: Mapping[str, frozenset]
        for f in CONFIG_FILES if files is None else files:
            self.read_checked(f)

    def __getitem__(self, key: Any) -> Any:
        if key not in self._wrappers:
            self._wrappers[key] = SectionWrapper(super().__getitem__(key))
        return self._wrappers[key]

    def read_checked(self, path: PathLike) -> bool:
        """Read a file after checking its sections and keys; return if read."""
        path = pathlib.Path(path)
        if not path.is_file():
            return False
        parsed = configparser.ConfigParser(inline_comment_prefixes="#")
        parsed.read(str(path))
        for section in parsed.sections():
            for key in parsed[section]:
                if key not in parsed.defaults():
                    self.check_key(section, key)
        super().read(str(path))
        return True

    def check_key(self, section: str, key: str) -> None:
        """Raise `UsageError` unless the key is known in the section."""
        if section not in self.known:
            raise UsageError("unknown config section [{}]".format(section))
        known = self.known[section]
        if key not in known and key + LIST_SUFFIX not in known:
            raise UsageError("unknown config key {}.{}".format(section, key))

    def set_override(self, assignment: str) -> None:
        """Apply a `section.key=value` override."""
        name, sep, value = assignment.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot or not key:
            raise UsageError("override must look like section.key=value: " + assignment)
        key = key.strip()
        if key.endswith(LIST_SUFFIX):
            key = key[: -len(LIST_SUFFIX)]
        self.check_key(section, key)
        self[section].override[key] = value.strip()

    def resolved(self, sections: Optional[Sequence[str]] = None) -> Dict[str, Any]:
        """Return the effective configuration as nested plain dictionaries."""
        names = self.sections() if sections is None else sections
        return {s: self[s].resolved() for s in names}

    def keys_of(self, section: str) -> List[str]:
        """Return `section.key` names of a section, for help texts."""
        names = (k.replace(LIST_SUFFIX, "") for k in self.known[section])
        return ["{}.{}".format(section, k) for k in sorted(names)]
