import io
import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sadspan.catalog import SourceSinkCatalog
from sadspan.errors import EmptyTrace
from sadspan.sad_extractor import (
    FEATURE_NAMES,
    DenominatorMode,
    ReachabilityMode,
    build_dcg,
    check_profile,
    count_accesses,
    extract_profile,
    mark_vulnerable,
    read_profiles_csv,
    write_profiles_csv,
)
from sadspan.trace_model import CallRecord, CallsiteId, Label, Trace

from conftest import A, B, C, GET_LOC, GET_NET, MAIN, SEND_SMS, WRITE_LOG, make_trace
from oracles import brute_force_features, brute_force_marking, random_trace

F = Fraction


# -- call graph -----------------------------------------------------------------

def test_dcg_micro(micro_trace):
    g = build_dcg(micro_trace)
    assert len(g.nodes) == 8
    assert g.edges[(A, GET_LOC)] == 2
    stats = g.callsites[CallsiteId(A, 0, GET_LOC)]
    assert (stats.instance_count, stats.first_seq, stats.last_seq) == (2, 2, 5)
    assert len(g.callsites) == 7
    assert g.total_instances == 8


def test_dcg_single_record():
    g = build_dcg(make_trace((MAIN, 0, A)))
    assert g.nodes == {MAIN, A}
    assert dict(g.edges) == {(MAIN, A): 1}


def test_dcg_two_sites_one_edge():
    g = build_dcg(make_trace((MAIN, 0, A), (MAIN, 1, A)))
    assert dict(g.edges) == {(MAIN, A): 2}
    assert len(g.callsites) == 2


@settings(max_examples=50)
@given(st.integers(0, 10**6))
def test_dcg_edge_frequency_is_sum_of_callsites(seed):
    from sadspan.catalog import demo_catalog
    t = random_trace(random.Random(seed), demo_catalog(), max_records=60)
    g = build_dcg(t)
    for (caller, callee), freq in g.edges.items():
        assert freq == sum(
            s.instance_count for cs, s in g.callsites.items() if (cs.caller, cs.callee) == (caller, callee)
        )
    for cs, s in g.callsites.items():
        assert cs.caller in g.nodes and cs.callee in g.nodes
        assert s.first_seq <= s.last_seq


# -- vulnerability marking ------------------------------------------------------

def test_marking_micro(micro_trace, micro_catalog):
    m = mark_vulnerable(build_dcg(micro_trace), micro_catalog)
    assert m.vulnerable_source_callsites == {CallsiteId(A, 0, GET_LOC)}
    assert m.vulnerable_sink_callsites == {CallsiteId(B, 0, SEND_SMS)}


def test_marking_graph_only_marks_getnet(micro_trace, micro_catalog):
    # writeLog (seq 7) runs before getNet (seq 8): only the temporal rule excludes it
    m = mark_vulnerable(build_dcg(micro_trace), micro_catalog, ReachabilityMode.GRAPH_ONLY)
    assert CallsiteId(C, 1, GET_NET) in m.vulnerable_source_callsites
    assert CallsiteId(C, 0, WRITE_LOG) in m.vulnerable_sink_callsites


def test_marking_no_sinks(micro_catalog):
    t = make_trace((MAIN, 0, A), (A, 0, GET_LOC), (A, 1, GET_NET))
    m = mark_vulnerable(build_dcg(t), micro_catalog)
    assert not m.vulnerable_source_callsites and not m.vulnerable_sink_callsites


def test_marking_same_method_source_first(micro_catalog):
    t = make_trace((A, 0, GET_LOC), (A, 1, SEND_SMS))
    m = mark_vulnerable(build_dcg(t), micro_catalog)
    assert m.vulnerable_source_callsites == {CallsiteId(A, 0, GET_LOC)}
    assert m.vulnerable_sink_callsites == {CallsiteId(A, 1, SEND_SMS)}


def test_marking_same_method_sink_first(micro_catalog):
    t = make_trace((A, 0, SEND_SMS), (A, 1, GET_LOC))
    m = mark_vulnerable(build_dcg(t), micro_catalog)
    assert not m.vulnerable_source_callsites and not m.vulnerable_sink_callsites


def test_marking_needs_forward_path(micro_catalog):
    # B's sink cannot reach back to A's source
    t = make_trace((A, 0, B), (B, 0, SEND_SMS), (A, 1, GET_LOC))
    m = mark_vulnerable(build_dcg(t), micro_catalog)
    # A -> B and the sink instance (seq 2) precedes the source (seq 3)
    assert not m.vulnerable_source_callsites
    t = make_trace((B, 0, SEND_SMS), (A, 0, GET_LOC), (B, 1, A))
    m = mark_vulnerable(build_dcg(t), micro_catalog)
    # B reaches A, but the source lives in A and A reaches nothing with a sink
    assert not m.vulnerable_source_callsites


@pytest.mark.parametrize("mode", list(ReachabilityMode))
def test_marking_matches_oracle(catalog, mode):
    rng = random.Random(4242)
    for i in range(150):
        t = random_trace(rng, catalog, app_id=f"r{i}")
        m = mark_vulnerable(build_dcg(t), catalog, mode)
        vs, vk = brute_force_marking(t, catalog, temporal=mode is ReachabilityMode.TEMPORAL)
        assert set(m.vulnerable_source_callsites) == vs
        assert set(m.vulnerable_sink_callsites) == vk


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**9), st.integers(1, 40))
def test_marking_monotone_under_appends(seed, extra):
    from sadspan.catalog import demo_catalog
    cat = demo_catalog()
    rng = random.Random(seed)
    t = random_trace(rng, cat, max_methods=20, max_records=60)
    longer = random_trace(rng, cat, max_methods=20, max_records=extra)
    offset = t.records[-1].seq
    # reuse the original methods so appended calls can add paths
    methods = sorted({r.caller for r in t.records} | {r.callee for r in t.records})
    appended = tuple(
        CallRecord(offset + i + 1, rng.choice(methods), r.site_index, rng.choice(methods))
        for i, r in enumerate(longer.records)
    )
    t2 = Trace(t.app_id, t.label, t.year, t.records + appended)
    for mode in ReachabilityMode:
        before = mark_vulnerable(build_dcg(t), cat, mode)
        after = mark_vulnerable(build_dcg(t2), cat, mode)
        assert before.vulnerable_source_callsites <= after.vulnerable_source_callsites
        assert before.vulnerable_sink_callsites <= after.vulnerable_sink_callsites


# -- profile --------------------------------------------------------------------

MICRO_EXPECTED = {
    1: F(2, 7), 2: F(2, 7), 3: F(3, 8), 4: F(2, 8),
    7: F(1, 2), 8: F(1, 2), 12: F(1, 2), 14: F(1, 2), 18: F(2, 3), 19: F(1, 3), 23: F(1, 2), 25: F(1, 2),
    27: F(1, 2), 28: F(1, 2), 29: F(2, 3), 30: F(1, 2), 33: F(1), 40: F(1), 44: F(2, 3), 51: F(1, 2),
}


def test_micro_profile_exact(micro_trace, micro_catalog):
    p = extract_profile(micro_trace, micro_catalog)
    assert (p.app_id, p.label, p.year) == ("t1", Label.MALICIOUS, 2012)
    for i in range(1, 53):
        assert p.f(i) == MICRO_EXPECTED.get(i, 0), f"f{i}"


def test_micro_profile_with_demo_catalog(micro_trace, micro_catalog, catalog):
    assert extract_profile(micro_trace, catalog) == extract_profile(micro_trace, micro_catalog)


def test_vulnerable_only_denominator(micro_trace, micro_catalog):
    p = extract_profile(micro_trace, micro_catalog, denominator=DenominatorMode.VULNERABLE_ONLY)
    assert p.f(44) == 1 and p.f(51) == 1
    assert check_profile(p, DenominatorMode.VULNERABLE_ONLY) == []


def test_no_catalog_hits_gives_zero_vector(micro_trace):
    p = extract_profile(micro_trace, SourceSinkCatalog())
    assert all(v == 0 for v in p.values)


def test_empty_trace_rejected(catalog):
    with pytest.raises(EmptyTrace):
        extract_profile(Trace("e", Label.BENIGN, 2012, ()), catalog)


@pytest.mark.parametrize("literal", [True, False])
def test_profile_matches_recount_oracle(catalog, literal):
    mode = DenominatorMode.LITERAL_TABLE if literal else DenominatorMode.VULNERABLE_ONLY
    rng = random.Random(99)
    for i in range(120):
        t = random_trace(rng, catalog, app_id=f"r{i}")
        p = extract_profile(t, catalog, denominator=mode)
        assert list(p.values) == brute_force_features(t, catalog, literal=literal)
        assert check_profile(p, mode) == []


def test_callsite_share_times_count_is_integer(catalog):
    rng = random.Random(5)
    for _ in range(50):
        t = random_trace(rng, catalog)
        p = extract_profile(t, catalog)
        n = len(build_dcg(t).callsites)
        assert (p.f(1) * n).denominator == 1 and (p.f(2) * n).denominator == 1


def test_vulnerable_instance_identity(catalog):
    rng = random.Random(6)
    for _ in range(50):
        t = random_trace(rng, catalog)
        g = build_dcg(t)
        m = mark_vulnerable(g, catalog)
        src = [cs for cs in g.callsites if cs.callee in catalog.sources]
        total = sum(g.callsites[cs].instance_count for cs in src)
        vuln = sum(g.callsites[cs].instance_count for cs in m.vulnerable_source_callsites)
        assert extract_profile(t, catalog).f(29) * total == vuln


def test_extraction_is_order_independent(catalog):
    rng = random.Random(7)
    traces = [random_trace(rng, catalog, app_id=f"r{i}") for i in range(20)]
    forward = [extract_profile(t, catalog) for t in traces]
    backward = [extract_profile(t, catalog) for t in reversed(traces)][::-1]
    assert forward == backward


def test_counts_are_integers(micro_trace, micro_catalog):
    c = count_accesses(micro_trace, micro_catalog)
    assert (c.total_callsites, c.total_instances) == (7, 8)
    assert sum(c.vuln_src_instances) == 2


def test_feature_names_unique():
    assert len(set(FEATURE_NAMES)) == 52


def test_profile_csv_round_trip(micro_trace, micro_catalog):
    p = extract_profile(micro_trace, micro_catalog)
    buf = io.StringIO()
    write_profiles_csv([p], buf)
    text = buf.getvalue()
    assert text.splitlines()[0] == "app_id,label,year," + ",".join(f"f{i}" for i in range(1, 53))
    assert text.splitlines()[1].startswith("t1,MALICIOUS,2012,0.285714286,0.285714286,0.375,0.25,")
    (back,) = read_profiles_csv(io.StringIO(text))
    assert back.app_id == "t1"
    assert back.features == pytest.approx(p.features, abs=5e-10)
