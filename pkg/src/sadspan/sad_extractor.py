"""Sensitive-access distribution (SAD) profiles.

The pipeline is trace -> dynamic call graph -> vulnerability marking ->
integer access counts -> 52 ratio features. Features are kept as exact
:class:`fractions.Fraction` values; ``SadProfile.features`` gives the
correctly-rounded floats.

Feature layout (1-based, as used throughout the package):

====== =====================================================================
f1-f4   source/sink share of all callsites, then of all call instances
f5-f9   source callsites per category / all source callsites
f10-15  sink callsites per category / all sink callsites
f16-20  source instances per category / all source instances
f21-26  sink instances per category / all sink instances
f27-30  vulnerable source/sink callsites, then instances, over their role
f31-35  vulnerable source callsites per category / vulnerable source callsites
f36-41  vulnerable sink callsites per category / vulnerable sink callsites
f42-46  vulnerable source instances per category / all source instances
f47-52  vulnerable sink instances per category / all sink instances
====== =====================================================================

Any ratio with a zero denominator is 0.
"""

from __future__ import annotations

import csv
import enum
from collections import defaultdict, deque
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence, TextIO

from .catalog import (
    SINK_CATEGORIES,
    SOURCE_CATEGORIES,
    Role,
    SourceSinkCatalog,
    classify,
)
from .errors import EmptyTrace, SadspanError
from .trace_model import CallsiteId, Label, Trace

N_FEATURES = 52
N_SRC = len(SOURCE_CATEGORIES)
N_SINK = len(SINK_CATEGORIES)


class ReachabilityMode(enum.Enum):
    TEMPORAL = "temporal"
    GRAPH_ONLY = "graph-only"


class DenominatorMode(enum.Enum):
    LITERAL_TABLE = "literal-table"
    VULNERABLE_ONLY = "vulnerable-only"


def _feature_names() -> tuple[str, ...]:
    names = ["src_callsites", "sink_callsites", "src_instances", "sink_instances"]
    src = [c.value for c in SOURCE_CATEGORIES]
    snk = [c.value for c in SINK_CATEGORIES]
    names += [f"src_callsites_{c}" for c in src]
    names += [f"sink_callsites_{c}" for c in snk]
    names += [f"src_instances_{c}" for c in src]
    names += [f"sink_instances_{c}" for c in snk]
    names += ["vuln_src_callsites", "vuln_sink_callsites", "vuln_src_instances", "vuln_sink_instances"]
    names += [f"vuln_src_callsites_{c}" for c in src]
    names += [f"vuln_sink_callsites_{c}" for c in snk]
    names += [f"vuln_src_instances_{c}" for c in src]
    names += [f"vuln_sink_instances_{c}" for c in snk]
    assert len(names) == N_FEATURES
    return tuple(names)


FEATURE_NAMES = _feature_names()

# 0-based slices of the category-share groups, with the denominator each one
# must sum to (None: sums to 1 whenever any member is nonzero).
SHARE_GROUPS: dict[str, slice] = {
    "src_callsite_share": slice(4, 9),
    "sink_callsite_share": slice(9, 15),
    "src_instance_share": slice(15, 20),
    "sink_instance_share": slice(20, 26),
    "vuln_src_callsite_share": slice(30, 35),
    "vuln_sink_callsite_share": slice(35, 41),
}
VULN_SRC_INSTANCE_SHARE = slice(41, 46)
VULN_SINK_INSTANCE_SHARE = slice(46, 52)


@dataclass(frozen=True)
class CallsiteStats:
    instance_count: int
    first_seq: int
    last_seq: int


@dataclass(frozen=True)
class DynamicCallGraph:
    nodes: frozenset[str]
    edges: Mapping[tuple[str, str], int]
    callsites: Mapping[CallsiteId, CallsiteStats]

    def successors(self) -> dict[str, list[str]]:
        succ: dict[str, list[str]] = defaultdict(list)
        for caller, callee in self.edges:
            succ[caller].append(callee)
        return succ

    def predecessors(self) -> dict[str, list[str]]:
        pred: dict[str, list[str]] = defaultdict(list)
        for caller, callee in self.edges:
            pred[callee].append(caller)
        return pred

    @property
    def total_instances(self) -> int:
        return sum(s.instance_count for s in self.callsites.values())


def build_dcg(trace: Trace) -> DynamicCallGraph:
    counts: dict[CallsiteId, list[int]] = {}
    edges: dict[tuple[str, str], int] = defaultdict(int)
    nodes: set[str] = set()
    for rec in trace.records:
        cs = CallsiteId(rec.caller, rec.site_index, rec.callee)
        entry = counts.get(cs)
        if entry is None:
            counts[cs] = [1, rec.seq, rec.seq]
        else:
            entry[0] += 1
            entry[1] = min(entry[1], rec.seq)
            entry[2] = max(entry[2], rec.seq)
        edges[(rec.caller, rec.callee)] += 1
        nodes.add(rec.caller)
        nodes.add(rec.callee)
    return DynamicCallGraph(
        nodes=frozenset(nodes),
        edges=dict(edges),
        callsites={cs: CallsiteStats(*v) for cs, v in counts.items()},
    )


def _closure(start: str, adjacency: Mapping[str, Sequence[str]]) -> set[str]:
    """Reflexive-transitive closure of ``start`` under ``adjacency`` (BFS)."""
    seen = {start}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        for nxt in adjacency.get(node, ()):
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return seen


@dataclass(frozen=True)
class VulnerabilityMarking:
    vulnerable_source_callsites: frozenset[CallsiteId]
    vulnerable_sink_callsites: frozenset[CallsiteId]


def mark_vulnerable(
    graph: DynamicCallGraph,
    catalog: SourceSinkCatalog,
    reachability: ReachabilityMode = ReachabilityMode.TEMPORAL,
) -> VulnerabilityMarking:
    """Mark source and sink callsites joined by a method-level call path.

    A source callsite ``s`` is vulnerable when some sink callsite ``k`` has
    its enclosing method reachable from ``s.caller`` (a method reaches
    itself). In temporal mode the pair also needs ``s.first_seq <
    k.last_seq``: some instance of the sink runs after some instance of the
    source. Sinks are marked by the symmetric rule.
    """
    temporal = reachability is ReachabilityMode.TEMPORAL
    sources = [cs for cs in graph.callsites if catalog.sources.get(cs.callee) is not None]
    sinks = [cs for cs in graph.callsites if catalog.sinks.get(cs.callee) is not None]
    if not sources or not sinks:
        return VulnerabilityMarking(frozenset(), frozenset())

    # latest sink instance per enclosing method, earliest source instance likewise
    sink_last: dict[str, int] = {}
    for k in sinks:
        last = graph.callsites[k].last_seq
        sink_last[k.caller] = max(sink_last.get(k.caller, last), last)
    src_first: dict[str, int] = {}
    for s in sources:
        first = graph.callsites[s].first_seq
        src_first[s.caller] = min(src_first.get(s.caller, first), first)

    succ = graph.successors()
    latest_reachable_sink: dict[str, int | None] = {}
    for method in {s.caller for s in sources}:
        reach = _closure(method, succ)
        lasts = [sink_last[m] for m in reach if m in sink_last]
        latest_reachable_sink[method] = max(lasts) if lasts else None

    pred = graph.predecessors()
    earliest_reaching_source: dict[str, int | None] = {}
    for method in {k.caller for k in sinks}:
        reached_by = _closure(method, pred)
        firsts = [src_first[m] for m in reached_by if m in src_first]
        earliest_reaching_source[method] = min(firsts) if firsts else None

    vuln_src = set()
    for s in sources:
        latest = latest_reachable_sink[s.caller]
        if latest is not None and (not temporal or graph.callsites[s].first_seq < latest):
            vuln_src.add(s)
    vuln_sink = set()
    for k in sinks:
        earliest = earliest_reaching_source[k.caller]
        if earliest is not None and (not temporal or earliest < graph.callsites[k].last_seq):
            vuln_sink.add(k)
    return VulnerabilityMarking(frozenset(vuln_src), frozenset(vuln_sink))


def _ratio(num: int, den: int) -> Fraction:
    return Fraction(num, den) if den else Fraction(0)


@dataclass(frozen=True)
class AccessCounts:
    """Integer counts behind a SAD profile; per-category tuples follow catalog order."""

    total_callsites: int
    total_instances: int
    src_callsites: tuple[int, ...] = (0,) * N_SRC
    sink_callsites: tuple[int, ...] = (0,) * N_SINK
    src_instances: tuple[int, ...] = (0,) * N_SRC
    sink_instances: tuple[int, ...] = (0,) * N_SINK
    vuln_src_callsites: tuple[int, ...] = (0,) * N_SRC
    vuln_sink_callsites: tuple[int, ...] = (0,) * N_SINK
    vuln_src_instances: tuple[int, ...] = (0,) * N_SRC
    vuln_sink_instances: tuple[int, ...] = (0,) * N_SINK

    def features(
        self, denominator: DenominatorMode = DenominatorMode.LITERAL_TABLE
    ) -> tuple[Fraction, ...]:
        src_cs, snk_cs = sum(self.src_callsites), sum(self.sink_callsites)
        src_in, snk_in = sum(self.src_instances), sum(self.sink_instances)
        vsrc_cs, vsnk_cs = sum(self.vuln_src_callsites), sum(self.vuln_sink_callsites)
        vsrc_in, vsnk_in = sum(self.vuln_src_instances), sum(self.vuln_sink_instances)
        if denominator is DenominatorMode.LITERAL_TABLE:
            vsrc_in_den, vsnk_in_den = src_in, snk_in
        else:
            vsrc_in_den, vsnk_in_den = vsrc_in, vsnk_in

        f = [
            _ratio(src_cs, self.total_callsites),
            _ratio(snk_cs, self.total_callsites),
            _ratio(src_in, self.total_instances),
            _ratio(snk_in, self.total_instances),
        ]
        f += [_ratio(n, src_cs) for n in self.src_callsites]
        f += [_ratio(n, snk_cs) for n in self.sink_callsites]
        f += [_ratio(n, src_in) for n in self.src_instances]
        f += [_ratio(n, snk_in) for n in self.sink_instances]
        f += [
            _ratio(vsrc_cs, src_cs),
            _ratio(vsnk_cs, snk_cs),
            _ratio(vsrc_in, src_in),
            _ratio(vsnk_in, snk_in),
        ]
        f += [_ratio(n, vsrc_cs) for n in self.vuln_src_callsites]
        f += [_ratio(n, vsnk_cs) for n in self.vuln_sink_callsites]
        f += [_ratio(n, vsrc_in_den) for n in self.vuln_src_instances]
        f += [_ratio(n, vsnk_in_den) for n in self.vuln_sink_instances]
        return tuple(f)


def count_accesses(
    trace: Trace,
    catalog: SourceSinkCatalog,
    reachability: ReachabilityMode = ReachabilityMode.TEMPORAL,
) -> AccessCounts:
    if not trace.records:
        raise EmptyTrace(f"trace {trace.app_id!r} has no records")
    graph = build_dcg(trace)
    marking = mark_vulnerable(graph, catalog, reachability)

    src_idx = {c: i for i, c in enumerate(SOURCE_CATEGORIES)}
    snk_idx = {c: i for i, c in enumerate(SINK_CATEGORIES)}
    acc = {name: [0] * N_SRC for name in ("src_cs", "src_in", "vsrc_cs", "vsrc_in")}
    acc.update({name: [0] * N_SINK for name in ("snk_cs", "snk_in", "vsnk_cs", "vsnk_in")})
    for cs, stats in graph.callsites.items():
        hit = classify(catalog, cs.callee)
        if hit.role is Role.SOURCE:
            i, prefix, vulnerable = src_idx[hit.category], "src", cs in marking.vulnerable_source_callsites
        elif hit.role is Role.SINK:
            i, prefix, vulnerable = snk_idx[hit.category], "snk", cs in marking.vulnerable_sink_callsites
        else:
            continue
        acc[f"{prefix}_cs"][i] += 1
        acc[f"{prefix}_in"][i] += stats.instance_count
        if vulnerable:
            acc[f"v{prefix}_cs"][i] += 1
            acc[f"v{prefix}_in"][i] += stats.instance_count

    return AccessCounts(
        total_callsites=len(graph.callsites),
        total_instances=graph.total_instances,
        src_callsites=tuple(acc["src_cs"]),
        sink_callsites=tuple(acc["snk_cs"]),
        src_instances=tuple(acc["src_in"]),
        sink_instances=tuple(acc["snk_in"]),
        vuln_src_callsites=tuple(acc["vsrc_cs"]),
        vuln_sink_callsites=tuple(acc["vsnk_cs"]),
        vuln_src_instances=tuple(acc["vsrc_in"]),
        vuln_sink_instances=tuple(acc["vsnk_in"]),
    )


@dataclass(frozen=True)
class SadProfile:
    app_id: str
    label: Label
    year: int
    values: tuple[Fraction, ...]

    def __post_init__(self) -> None:
        if len(self.values) != N_FEATURES:
            raise ValueError(f"profile needs {N_FEATURES} values, got {len(self.values)}")

    @property
    def features(self) -> tuple[float, ...]:
        return tuple(float(v) for v in self.values)

    def f(self, index: int) -> Fraction:
        """Feature by its 1-based index."""
        if not 1 <= index <= N_FEATURES:
            raise IndexError(index)
        return self.values[index - 1]


def extract_profile(
    trace: Trace,
    catalog: SourceSinkCatalog,
    reachability: ReachabilityMode = ReachabilityMode.TEMPORAL,
    denominator: DenominatorMode = DenominatorMode.LITERAL_TABLE,
) -> SadProfile:
    counts = count_accesses(trace, catalog, reachability)
    return SadProfile(trace.app_id, trace.label, trace.year, counts.features(denominator))


def check_profile(
    profile: SadProfile, denominator: DenominatorMode = DenominatorMode.LITERAL_TABLE
) -> list[str]:
    """Return the violated profile invariants (empty when all hold).

    Exact only for profiles produced by :func:`extract_profile`; values read
    back from CSV are rounded.
    """
    v = profile.values
    problems = [f"f{i + 1}={x} outside [0,1]" for i, x in enumerate(v) if not 0 <= x <= 1]
    groups = dict(SHARE_GROUPS)
    if denominator is DenominatorMode.VULNERABLE_ONLY:
        groups["vuln_src_instance_share"] = VULN_SRC_INSTANCE_SHARE
        groups["vuln_sink_instance_share"] = VULN_SINK_INSTANCE_SHARE
    for name, sl in groups.items():
        total = sum(v[sl])
        if total not in (0, 1):
            problems.append(f"{name} sums to {total}")
    if denominator is DenominatorMode.LITERAL_TABLE:
        if sum(v[VULN_SRC_INSTANCE_SHARE]) != v[28]:
            problems.append("f42..f46 do not sum to f29")
        if sum(v[VULN_SINK_INSTANCE_SHARE]) != v[29]:
            problems.append("f47..f52 do not sum to f30")
    return problems


# -- profile CSV -------------------------------------------------------------

CSV_HEADER = ("app_id", "label", "year", *(f"f{i}" for i in range(1, N_FEATURES + 1)))


def format_feature(value: Fraction | float) -> str:
    return f"{float(value):.9g}"


def write_profiles_csv(profiles: Iterable[SadProfile], fh: TextIO) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for p in profiles:
        writer.writerow([p.app_id, p.label.value, p.year, *(format_feature(x) for x in p.values)])


class MalformedProfileCsv(SadspanError):
    pass


def read_profiles_csv(fh: TextIO) -> list[SadProfile]:
    reader = csv.reader(fh)
    header = next(reader, None)
    if header is None or tuple(header) != CSV_HEADER:
        raise MalformedProfileCsv("profile CSV header must be app_id,label,year,f1..f52")
    out = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(CSV_HEADER):
            raise MalformedProfileCsv(f"line {lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
        try:
            values = tuple(Fraction(x) for x in row[3:])
            out.append(SadProfile(row[0], Label.parse(row[1]), int(row[2]), values))
        except ValueError as exc:
            raise MalformedProfileCsv(f"line {lineno}: {exc}") from None
    return out


__all__ = [
    "AccessCounts",
    "CallsiteStats",
    "DenominatorMode",
    "DynamicCallGraph",
    "FEATURE_NAMES",
    "MalformedProfileCsv",
    "N_FEATURES",
    "ReachabilityMode",
    "SadProfile",
    "VulnerabilityMarking",
    "build_dcg",
    "check_profile",
    "count_accesses",
    "extract_profile",
    "mark_vulnerable",
    "read_profiles_csv",
    "write_profiles_csv",
]
