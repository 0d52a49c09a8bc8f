"""Categorized source/sink API lists (``.ssl`` files).

Each non-comment line is ``SOURCE <category> <signature>`` or
``SINK <category> <signature>``. Lookups are exact signature matches.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from importlib import resources
from types import MappingProxyType
from typing import Iterable, Mapping, Union

from .errors import CatalogError, DuplicateConflictingEntry, MalformedLine, UnknownCategory
from .trace_model import is_valid_sig


class SourceCategory(enum.Enum):
    Account = "Account"
    Calendar = "Calendar"
    Location = "Location"
    NetworkInfo = "NetworkInfo"
    SystemConfig = "SystemConfig"


class SinkCategory(enum.Enum):
    AccountSetting = "AccountSetting"
    FileOperation = "FileOperation"
    Logging = "Logging"
    NetworkAccess = "NetworkAccess"
    Messaging = "Messaging"
    SystemSetting = "SystemSetting"


SOURCE_CATEGORIES: tuple[SourceCategory, ...] = tuple(SourceCategory)
SINK_CATEGORIES: tuple[SinkCategory, ...] = tuple(SinkCategory)


class Role(enum.Enum):
    SOURCE = "SOURCE"
    SINK = "SINK"
    NEITHER = "NEITHER"


@dataclass(frozen=True)
class Classification:
    role: Role
    category: Union[SourceCategory, SinkCategory, None] = None

    @property
    def is_source(self) -> bool:
        return self.role is Role.SOURCE

    @property
    def is_sink(self) -> bool:
        return self.role is Role.SINK


NEITHER = Classification(Role.NEITHER)


@dataclass(frozen=True)
class SourceSinkCatalog:
    sources: Mapping[str, SourceCategory] = field(default_factory=dict)
    sinks: Mapping[str, SinkCategory] = field(default_factory=dict)

    def __post_init__(self) -> None:
        overlap = set(self.sources) & set(self.sinks)
        if overlap:
            raise DuplicateConflictingEntry(
                f"signature listed as both source and sink: {sorted(overlap)[0]}"
            )
        object.__setattr__(self, "sources", MappingProxyType(dict(self.sources)))
        object.__setattr__(self, "sinks", MappingProxyType(dict(self.sinks)))

    def __reduce__(self):
        return (type(self), (dict(self.sources), dict(self.sinks)))

    def classify(self, callee: str) -> Classification:
        return classify(self, callee)

    def signatures_for(self, category: Union[SourceCategory, SinkCategory]) -> list[str]:
        table = self.sources if isinstance(category, SourceCategory) else self.sinks
        return sorted(sig for sig, cat in table.items() if cat is category)

    def __len__(self) -> int:
        return len(self.sources) + len(self.sinks)


def classify(catalog: SourceSinkCatalog, callee: str) -> Classification:
    cat = catalog.sources.get(callee)
    if cat is not None:
        return Classification(Role.SOURCE, cat)
    cat = catalog.sinks.get(callee)
    if cat is not None:
        return Classification(Role.SINK, cat)
    return NEITHER


_CATEGORY_ENUMS = {"SOURCE": SourceCategory, "SINK": SinkCategory}


def parse_catalog(data: Union[bytes, str, Iterable[str]]) -> SourceSinkCatalog:
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedLine(f"input is not valid UTF-8: {exc.reason}") from None
    lines = data.splitlines() if isinstance(data, str) else (line.rstrip("\r\n") for line in data)

    entries: dict[str, tuple[str, enum.Enum]] = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 3 or fields[0] not in _CATEGORY_ENUMS:
            raise MalformedLine(f"line {lineno}: expected 'SOURCE|SINK <category> <signature>'")
        role, cat_name, sig = fields
        try:
            category = _CATEGORY_ENUMS[role](cat_name)
        except ValueError:
            raise UnknownCategory(f"line {lineno}: unknown {role.lower()} category {cat_name!r}") from None
        if not is_valid_sig(sig):
            raise MalformedLine(f"line {lineno}: invalid signature {sig!r}")
        previous = entries.get(sig)
        if previous is not None and previous != (role, category):
            raise DuplicateConflictingEntry(
                f"line {lineno}: {sig} already listed as {previous[0]} {previous[1].value}"
            )
        entries[sig] = (role, category)

    return SourceSinkCatalog(
        sources={sig: cat for sig, (role, cat) in entries.items() if role == "SOURCE"},
        sinks={sig: cat for sig, (role, cat) in entries.items() if role == "SINK"},
    )


def serialize_catalog(catalog: SourceSinkCatalog) -> str:
    lines = [f"SOURCE {cat.value} {sig}" for sig, cat in sorted(catalog.sources.items())]
    lines += [f"SINK {cat.value} {sig}" for sig, cat in sorted(catalog.sinks.items())]
    return "\n".join(lines) + "\n"


def read_catalog(path) -> SourceSinkCatalog:
    with open(path, "rb") as fh:
        return parse_catalog(fh.read())


def demo_catalog_text() -> str:
    return resources.files("sadspan").joinpath("data/demo.ssl").read_text(encoding="utf-8")


def demo_catalog() -> SourceSinkCatalog:
    """The small illustrative catalog shipped with the package."""
    return parse_catalog(demo_catalog_text())


__all__ = [
    "CatalogError",
    "Classification",
    "NEITHER",
    "Role",
    "SINK_CATEGORIES",
    "SOURCE_CATEGORIES",
    "SinkCategory",
    "SourceCategory",
    "SourceSinkCatalog",
    "classify",
    "demo_catalog",
    "parse_catalog",
    "read_catalog",
    "serialize_catalog",
]
