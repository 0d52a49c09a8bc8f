"""Synthetic labeled trace corpora with exactly controlled SAD profiles.

Generation happens in integer count space. A :class:`CountTemplate` fixes,
per source/sink category, how many vulnerable and non-vulnerable callsites
exist and how many extra instances each group gets; :func:`synth_trace`
emits a trace whose extracted counts equal the template's exactly.

Layout of a generated trace (methods are app-internal, never in the catalog):

* the root method holds the non-vulnerable sinks; nothing calls the root, so
  no source ever reaches them;
* vulnerable sources and sinks share one method (the root itself when there
  are no non-vulnerable sinks), with every source instance emitted before any
  sink instance;
* non-vulnerable sources sit in a method with no sink reachable from it (the
  root itself when the trace has no sinks at all);
* the remaining Neither callsites are helper calls spread over those methods.

The vulnerable set is therefore the same under temporal and graph-only
reachability.
"""

from __future__ import annotations

import configparser
import csv
import io
import os
from dataclasses import dataclass, field, replace
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .catalog import SINK_CATEGORIES, SOURCE_CATEGORIES, SourceSinkCatalog, demo_catalog, read_catalog
from .errors import InconsistentTemplate, MalformedCorpusSpec
from .sad_extractor import AccessCounts, DenominatorMode, N_SINK, N_SRC
from .trace_model import CallRecord, Label, Trace, serialize_trace

ROOT = "app.synth.Main.run()void"
FLOW = "app.synth.Relay.forward()void"
PROBE = "app.synth.Probe.collect()void"


def _helper(i: int) -> str:
    return f"app.synth.Util.helper{i}()void"


@dataclass(frozen=True)
class CategoryCounts:
    """Callsites of one category, split by vulnerability.

    ``*_extra`` counts instances beyond the first one per callsite.
    """

    vulnerable: int = 0
    safe: int = 0
    vulnerable_extra: int = 0
    safe_extra: int = 0

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.vulnerable, self.safe, self.vulnerable_extra, self.safe_extra)


ZERO = CategoryCounts()


@dataclass(frozen=True)
class CountTemplate:
    neither: int = 0
    neither_extra: int = 0
    sources: tuple[CategoryCounts, ...] = (ZERO,) * N_SRC
    sinks: tuple[CategoryCounts, ...] = (ZERO,) * N_SINK

    def _totals(self):
        vsrc = sum(c.vulnerable for c in self.sources)
        vsnk = sum(c.vulnerable for c in self.sinks)
        safe_src = sum(c.safe for c in self.sources)
        safe_snk = sum(c.safe for c in self.sinks)
        return vsrc, vsnk, safe_src, safe_snk

    def wiring_callsites(self) -> int:
        """Neither callsites the layout needs to connect its methods."""
        vsrc, vsnk, safe_src, safe_snk = self._totals()
        needs_flow = vsrc > 0 and safe_snk > 0
        needs_probe = safe_src > 0 and (vsnk + safe_snk) > 0
        return int(needs_flow) + int(needs_probe)

    def problems(self) -> list[str]:
        out = []
        if len(self.sources) != N_SRC or len(self.sinks) != N_SINK:
            out.append(f"need {N_SRC} source and {N_SINK} sink categories")
            return out
        cats = [(c.value, cc) for c, cc in zip(SOURCE_CATEGORIES, self.sources)]
        cats += [(c.value, cc) for c, cc in zip(SINK_CATEGORIES, self.sinks)]
        for name, cc in cats:
            if min(cc.as_tuple()) < 0:
                out.append(f"{name}: negative count")
            if cc.vulnerable == 0 and cc.vulnerable_extra:
                out.append(f"{name}: extra vulnerable instances without vulnerable callsites")
            if cc.safe == 0 and cc.safe_extra:
                out.append(f"{name}: extra instances without non-vulnerable callsites")
        if self.neither < 0 or self.neither_extra < 0:
            out.append("negative Neither count")
        if self.neither == 0 and self.neither_extra:
            out.append("extra Neither instances without Neither callsites")
        vsrc, vsnk, safe_src, safe_snk = self._totals()
        if (vsrc > 0) != (vsnk > 0):
            out.append("vulnerable sources and vulnerable sinks must both be present or both absent")
        if self.neither < self.wiring_callsites():
            out.append(f"needs at least {self.wiring_callsites()} Neither callsites for wiring")
        if self.neither + vsrc + vsnk + safe_src + safe_snk == 0:
            out.append("template has no callsites")
        return out

    def validate(self) -> "CountTemplate":
        problems = self.problems()
        if problems:
            raise InconsistentTemplate("; ".join(problems))
        return self

    def to_counts(self) -> AccessCounts:
        def inst(c: CategoryCounts) -> int:
            return c.vulnerable + c.safe + c.vulnerable_extra + c.safe_extra

        src_cs = tuple(c.vulnerable + c.safe for c in self.sources)
        snk_cs = tuple(c.vulnerable + c.safe for c in self.sinks)
        src_in = tuple(inst(c) for c in self.sources)
        snk_in = tuple(inst(c) for c in self.sinks)
        return AccessCounts(
            total_callsites=self.neither + sum(src_cs) + sum(snk_cs),
            total_instances=self.neither + self.neither_extra + sum(src_in) + sum(snk_in),
            src_callsites=src_cs,
            sink_callsites=snk_cs,
            src_instances=src_in,
            sink_instances=snk_in,
            vuln_src_callsites=tuple(c.vulnerable for c in self.sources),
            vuln_sink_callsites=tuple(c.vulnerable for c in self.sinks),
            vuln_src_instances=tuple(c.vulnerable + c.vulnerable_extra for c in self.sources),
            vuln_sink_instances=tuple(c.vulnerable + c.vulnerable_extra for c in self.sinks),
        )

    def implied_features(
        self, denominator: DenominatorMode = DenominatorMode.LITERAL_TABLE
    ) -> tuple[Fraction, ...]:
        return self.to_counts().features(denominator)

    @classmethod
    def from_counts(cls, counts: AccessCounts) -> "CountTemplate":
        def split(cs, vcs, ins, vins) -> CategoryCounts:
            return CategoryCounts(vcs, cs - vcs, vins - vcs, (ins - vins) - (cs - vcs))

        sources = tuple(
            split(*t) for t in zip(counts.src_callsites, counts.vuln_src_callsites,
                                   counts.src_instances, counts.vuln_src_instances)
        )
        sinks = tuple(
            split(*t) for t in zip(counts.sink_callsites, counts.vuln_sink_callsites,
                                   counts.sink_instances, counts.vuln_sink_instances)
        )
        neither = counts.total_callsites - sum(counts.src_callsites) - sum(counts.sink_callsites)
        neither_in = counts.total_instances - sum(counts.src_instances) - sum(counts.sink_instances)
        return cls(neither, neither_in - neither, sources, sinks).validate()


def _spread(total_extra: int, n: int, rng: np.random.Generator) -> list[int]:
    """Instance count per callsite: one each plus a random share of the extras."""
    if n == 0:
        return []
    extra = rng.multinomial(total_extra, [1.0 / n] * n) if total_extra else np.zeros(n, dtype=int)
    return [1 + int(e) for e in extra]


def synth_trace(
    template: CountTemplate,
    seed: int = 0,
    *,
    app_id: str = "synth",
    label: Label = Label.UNLABELED,
    year: int = 0,
    catalog: Optional[SourceSinkCatalog] = None,
) -> Trace:
    template.validate()
    catalog = catalog or demo_catalog()
    rng = np.random.default_rng(seed)

    vsrc, vsnk, safe_src, safe_snk = template._totals()
    flow = FLOW if (vsrc and safe_snk) else ROOT
    probe = PROBE if (safe_src and (vsnk + safe_snk)) else ROOT
    methods = [ROOT] + [m for m in (flow, probe) if m != ROOT]

    next_site: dict[str, int] = {}

    def new_site(caller: str) -> int:
        i = next_site.get(caller, 0)
        next_site[caller] = i + 1
        return i

    sig_cache: dict = {}

    def pick(category) -> str:
        sigs = sig_cache.get(category)
        if sigs is None:
            sigs = sig_cache[category] = catalog.signatures_for(category)
        if not sigs:
            raise InconsistentTemplate(f"catalog has no signature for category {category.value}")
        return sigs[int(rng.integers(len(sigs)))]

    # per-method streams of (caller, site, callee) call events; a method's
    # stream opens with the root's call into it
    streams: dict[str, list[tuple[str, int, str]]] = {m: [] for m in methods}
    wiring = {m: (ROOT, new_site(ROOT), m) for m in methods[1:]}

    def callsites(caller, category, n, extra):
        events = []
        for count in _spread(extra, n, rng):
            site = (caller, new_site(caller), pick(category))
            events += [site] * count
        return events

    def shuffled(events):
        return [events[i] for i in rng.permutation(len(events))]

    vuln_src_events, vuln_snk_events = [], []
    for cat, cc in zip(SOURCE_CATEGORIES, template.sources):
        vuln_src_events += callsites(flow, cat, cc.vulnerable, cc.vulnerable_extra)
        streams[probe] += callsites(probe, cat, cc.safe, cc.safe_extra)
    for cat, cc in zip(SINK_CATEGORIES, template.sinks):
        vuln_snk_events += callsites(flow, cat, cc.vulnerable, cc.vulnerable_extra)
        streams[ROOT] += callsites(ROOT, cat, cc.safe, cc.safe_extra)

    neither_sites = list(wiring.values())
    for i in range(template.neither - len(wiring)):
        caller = methods[int(rng.integers(len(methods)))]
        neither_sites.append((caller, new_site(caller), _helper(i)))
    loose = []
    for site, count in zip(neither_sites, _spread(template.neither_extra, len(neither_sites), rng)):
        # a wiring call's first instance is the lead of its method's stream
        loose += [site] * (count - 1 if site[2] in wiring else count)

    for m in methods:
        body = shuffled(streams[m])
        if m == flow:
            # sources of the vulnerable pair all precede its sinks
            at = int(rng.integers(len(body) + 1))
            body[at:at] = shuffled(vuln_src_events) + shuffled(vuln_snk_events)
        streams[m] = ([wiring[m]] if m in wiring else []) + body

    # uniform random interleaving that keeps each stream's internal order
    queues = [streams[m] for m in methods] + [shuffled(loose)]
    picks = np.repeat(np.arange(len(queues)), [len(q) for q in queues])
    rng.shuffle(picks)
    cursor = [0] * len(queues)
    events = []
    for j in picks:
        events.append(queues[j][cursor[j]])
        cursor[j] += 1
    records = tuple(CallRecord(i + 1, c, s, e) for i, (c, s, e) in enumerate(events))
    return Trace(app_id, label, year, records)


# -- corpus specs -------------------------------------------------------------


@dataclass(frozen=True)
class GroupSpec:
    tag: str
    label: Label
    year: int
    n_apps: int
    template: CountTemplate
    jitter: int = 0


@dataclass(frozen=True)
class CorpusSpec:
    groups: tuple[GroupSpec, ...]
    seed: int = 0
    catalog: Optional[SourceSinkCatalog] = field(default=None, compare=False)


def jitter_template(template: CountTemplate, jitter: int, rng: np.random.Generator) -> CountTemplate:
    """Perturb every count by a uniform integer in ``[-jitter, jitter]`` and repair.

    Counts clamp at zero; :func:`repair_template` then restores consistency.
    """
    if jitter == 0:
        return template

    def bump(x: int) -> int:
        return max(0, x + int(rng.integers(-jitter, jitter + 1)))

    def perturb(cc: CategoryCounts) -> CategoryCounts:
        return CategoryCounts(*(bump(x) for x in cc.as_tuple()))

    return repair_template(
        CountTemplate(
            bump(template.neither),
            bump(template.neither_extra),
            tuple(perturb(c) for c in template.sources),
            tuple(perturb(c) for c in template.sinks),
        )
    )


def repair_template(template: CountTemplate) -> CountTemplate:
    """Smallest edits that make a non-negative template consistent.

    Extras vanish with their callsites, a one-sided vulnerable pair becomes
    non-vulnerable, and Neither callsites grow to cover the wiring.
    """

    def trim(cc: CategoryCounts) -> CategoryCounts:
        return CategoryCounts(
            cc.vulnerable, cc.safe,
            cc.vulnerable_extra if cc.vulnerable else 0,
            cc.safe_extra if cc.safe else 0,
        )

    sources = tuple(trim(c) for c in template.sources)
    sinks = tuple(trim(c) for c in template.sinks)
    if (sum(c.vulnerable for c in sources) > 0) != (sum(c.vulnerable for c in sinks) > 0):
        def demote(cc: CategoryCounts) -> CategoryCounts:
            return CategoryCounts(0, cc.vulnerable + cc.safe, 0, cc.vulnerable_extra + cc.safe_extra)

        sources = tuple(demote(c) for c in sources)
        sinks = tuple(demote(c) for c in sinks)
    out = CountTemplate(template.neither, template.neither_extra, sources, sinks)
    neither = max(out.neither, out.wiring_callsites(), 1)
    return replace(out, neither=neither).validate()


def app_seed(spec_seed: int, group_index: int, app_index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([spec_seed & 0xFFFFFFFFFFFFFFFF, group_index, app_index])


def synth_corpus(spec: CorpusSpec) -> list[Trace]:
    catalog = spec.catalog or demo_catalog()
    traces = []
    for gi, group in enumerate(spec.groups):
        group.template.validate()
        for ai in range(group.n_apps):
            rng = np.random.default_rng(app_seed(spec.seed, gi, ai))
            template = jitter_template(group.template, group.jitter, rng)
            trace_seed = int(rng.integers(0, 2**63))
            traces.append(
                synth_trace(
                    template, trace_seed,
                    app_id=f"{group.tag}-{ai:05d}", label=group.label, year=group.year, catalog=catalog,
                )
            )
    return traces


def group_tags(spec: CorpusSpec) -> dict[str, str]:
    """app_id -> group tag for every app the spec generates."""
    return {f"{g.tag}-{i:05d}": g.tag for g in spec.groups for i in range(g.n_apps)}


# Spec file format (INI):
#
#   [corpus]
#   seed = 7
#   catalog = demo            ; or a path to a .ssl file
#
#   [group <tag>]
#   label = BENIGN | MALICIOUS | UNLABELED
#   year = 2012
#   n_apps = 100
#   jitter = 2
#   neither = <callsites> <extra instances>
#   source.<Category> = <vulnerable> <safe> <vulnerable extra> <safe extra>
#   sink.<Category>   = <vulnerable> <safe> <vulnerable extra> <safe extra>
#   blend = <tag A> <tag B> <weight>   ; counts = round((1-w)*A + w*B), replaces the lines above
#   like = <tag>                       ; reuse an earlier group's counts
#
# Categories that are not listed have zero counts.


def _ints(text: str, n: int, where: str) -> tuple[int, ...]:
    parts = text.split()
    try:
        values = tuple(int(p) for p in parts)
    except ValueError:
        raise MalformedCorpusSpec(f"{where}: expected {n} integers, got {text!r}") from None
    if len(values) != n:
        raise MalformedCorpusSpec(f"{where}: expected {n} integers, got {text!r}")
    return values


def blend_templates(a: CountTemplate, b: CountTemplate, weight: Fraction) -> CountTemplate:
    def mix(x: int, y: int) -> int:
        return round((1 - weight) * x + weight * y)

    def mix_cc(p: CategoryCounts, q: CategoryCounts) -> CategoryCounts:
        return CategoryCounts(*(mix(x, y) for x, y in zip(p.as_tuple(), q.as_tuple())))

    out = CountTemplate(
        mix(a.neither, b.neither),
        mix(a.neither_extra, b.neither_extra),
        tuple(mix_cc(p, q) for p, q in zip(a.sources, b.sources)),
        tuple(mix_cc(p, q) for p, q in zip(a.sinks, b.sinks)),
    )
    return repair_template(out)


def parse_corpus_spec(text: str, base_dir: Union[str, os.PathLike, None] = None) -> CorpusSpec:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";",), interpolation=None)
    parser.optionxform = str  # keep category names case-sensitive
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise MalformedCorpusSpec(str(exc)) from None

    corpus = parser["corpus"] if parser.has_section("corpus") else {}
    try:
        seed = int(corpus.get("seed", "0"))
    except ValueError:
        raise MalformedCorpusSpec("[corpus] seed must be an integer") from None
    catalog = None
    cat_ref = corpus.get("catalog", "demo")
    if cat_ref != "demo":
        path = Path(cat_ref)
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        catalog = read_catalog(path)

    templates: dict[str, CountTemplate] = {}
    groups = []
    src_names = {c.value: i for i, c in enumerate(SOURCE_CATEGORIES)}
    snk_names = {c.value: i for i, c in enumerate(SINK_CATEGORIES)}
    for section in parser.sections():
        if section == "corpus":
            continue
        if not section.startswith("group "):
            raise MalformedCorpusSpec(f"unknown section [{section}]")
        tag = section[len("group "):].strip()
        if not tag or any(ch.isspace() for ch in tag):
            raise MalformedCorpusSpec(f"[{section}]: group tag must be one word")
        sec = parser[section]
        where = f"[{section}]"
        try:
            label = Label.parse(sec.get("label", "UNLABELED"))
            year = int(sec.get("year", "0"))
            n_apps = int(sec["n_apps"])
            jitter = int(sec.get("jitter", "0"))
        except (KeyError, ValueError) as exc:
            raise MalformedCorpusSpec(f"{where}: {exc}") from None
        if n_apps < 1 or jitter < 0:
            raise MalformedCorpusSpec(f"{where}: n_apps must be positive and jitter non-negative")

        if "like" in sec:
            if sec["like"] not in templates:
                raise MalformedCorpusSpec(f"{where}: like needs an earlier group tag")
            template = templates[sec["like"]]
        elif "blend" in sec:
            parts = sec["blend"].split()
            if len(parts) != 3 or parts[0] not in templates or parts[1] not in templates:
                raise MalformedCorpusSpec(f"{where}: blend needs two earlier group tags and a weight")
            try:
                weight = Fraction(parts[2])
            except ValueError:
                raise MalformedCorpusSpec(f"{where}: bad blend weight {parts[2]!r}") from None
            template = blend_templates(templates[parts[0]], templates[parts[1]], weight)
        else:
            sources = [ZERO] * N_SRC
            sinks = [ZERO] * N_SINK
            neither = (0, 0)
            for key, value in sec.items():
                if key in ("label", "year", "n_apps", "jitter", "like", "blend"):
                    continue
                if key == "neither":
                    neither = _ints(value, 2, f"{where} neither")
                elif key.startswith("source.") and key[7:] in src_names:
                    sources[src_names[key[7:]]] = CategoryCounts(*_ints(value, 4, f"{where} {key}"))
                elif key.startswith("sink.") and key[5:] in snk_names:
                    sinks[snk_names[key[5:]]] = CategoryCounts(*_ints(value, 4, f"{where} {key}"))
                else:
                    raise MalformedCorpusSpec(f"{where}: unknown key {key!r}")
            template = CountTemplate(neither[0], neither[1], tuple(sources), tuple(sinks)).validate()
        templates[tag] = template
        groups.append(GroupSpec(tag, label, year, n_apps, template, jitter))
    if not groups:
        raise MalformedCorpusSpec("spec defines no [group ...] sections")
    return CorpusSpec(tuple(groups), seed, catalog)


def read_corpus_spec(path) -> CorpusSpec:
    path = Path(path)
    return parse_corpus_spec(path.read_text(encoding="utf-8"), base_dir=path.parent)


DEFAULT_SPECS = ("same_period", "drift")


def default_spec_text(name: str) -> str:
    if name not in DEFAULT_SPECS:
        raise ValueError(f"no default spec {name!r}; choose from {', '.join(DEFAULT_SPECS)}")
    return resources.files("sadspan").joinpath(f"data/{name}.ini").read_text(encoding="utf-8")


def default_spec(name: str) -> CorpusSpec:
    return parse_corpus_spec(default_spec_text(name))


def with_seed(spec: CorpusSpec, seed: int) -> CorpusSpec:
    return replace(spec, seed=seed)


def write_corpus(traces: Sequence[Trace], out_dir, tags: Mapping[str, str]) -> Path:
    """Write one ``.trc`` per trace plus ``manifest.csv``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for t in traces:
        (out / f"{t.app_id}.trc").write_text(serialize_trace(t), encoding="utf-8")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["app_id", "label", "year", "group_tag"])
    for t in traces:
        writer.writerow([t.app_id, t.label.value, t.year, tags.get(t.app_id, "")])
    manifest = out / "manifest.csv"
    manifest.write_text(buf.getvalue(), encoding="utf-8")
    return manifest


__all__ = [
    "CategoryCounts",
    "CorpusSpec",
    "CountTemplate",
    "GroupSpec",
    "blend_templates",
    "default_spec",
    "group_tags",
    "jitter_template",
    "parse_corpus_spec",
    "read_corpus_spec",
    "synth_corpus",
    "synth_trace",
    "write_corpus",
]
