from __future__ import annotations

from fractions import Fraction
from pathlib import Path

import pytest

import sadspan
import sadspan.cli
import sadspan.sad_extractor as sad
from sadspan.catalog import SourceSinkCatalog, demo_catalog
from sadspan.classifier import LabeledSample
from sadspan.sad_extractor import N_FEATURES, SadProfile
from sadspan.trace_model import CallRecord, Label, Trace, read_trace

FIXTURES = Path(__file__).parent / "fixtures"

# every profile extracted anywhere in the suite is checked against the
# feature-vector invariants; the acceptance suite reports the tally
PROFILE_LOG = {"checked": 0}
_original_extract = sad.extract_profile


def _checked_extract(trace, catalog, reachability=sad.ReachabilityMode.TEMPORAL,
                     denominator=sad.DenominatorMode.LITERAL_TABLE):
    profile = _original_extract(trace, catalog, reachability, denominator)
    problems = sad.check_profile(profile, denominator)
    assert not problems, f"profile invariants violated for {trace.app_id}: {problems}"
    PROFILE_LOG["checked"] += 1
    return profile


# installed before any test module is imported, so direct imports get the wrapper too
for _module in (sad, sadspan, sadspan.cli):
    _module.extract_profile = _checked_extract


# short names used by the canonical micro-trace
MAIN = "com.t1.MainActivity.onCreate(android.os.Bundle)void"
A = "com.t1.Tracker.collect()void"
B = "com.t1.Sender.send()void"
C = "com.t1.Logger.flush()void"
GET_LOC = "android.location.LocationManager.getLastKnownLocation(java.lang.String)android.location.Location"
GET_NET = "android.net.ConnectivityManager.getActiveNetworkInfo()android.net.NetworkInfo"
SEND_SMS = (
    "android.telephony.SmsManager.sendTextMessage(java.lang.String,java.lang.String,"
    "java.lang.String,android.app.PendingIntent,android.app.PendingIntent)void"
)
WRITE_LOG = "android.util.Log.i(java.lang.String,java.lang.String)int"


@pytest.fixture(scope="session")
def catalog() -> SourceSinkCatalog:
    return demo_catalog()


@pytest.fixture(scope="session")
def micro_catalog() -> SourceSinkCatalog:
    """Exactly the four APIs named by the micro-trace."""
    cat = demo_catalog()
    return SourceSinkCatalog(
        sources={GET_LOC: cat.sources[GET_LOC], GET_NET: cat.sources[GET_NET]},
        sinks={SEND_SMS: cat.sinks[SEND_SMS], WRITE_LOG: cat.sinks[WRITE_LOG]},
    )


@pytest.fixture(scope="session")
def micro_trace_path() -> Path:
    return FIXTURES / "t1.trc"


@pytest.fixture
def micro_trace(micro_trace_path) -> Trace:
    return read_trace(micro_trace_path)


def make_trace(*calls, app_id="t", label=Label.MALICIOUS, year=2012) -> Trace:
    """Build a trace from (caller, site, callee) triples numbered 1..n."""
    return Trace(app_id, label, year, tuple(CallRecord(i + 1, *c) for i, c in enumerate(calls)))


def profile_with(values: dict[int, float], app_id="p", label=Label.BENIGN, year=2012) -> SadProfile:
    vec = [Fraction(0)] * N_FEATURES
    for index, v in values.items():
        vec[index - 1] = Fraction(v)
    return SadProfile(app_id, label, year, tuple(vec))


def cluster_samples(n_per_class: int = 10) -> list[LabeledSample]:
    """MALICIOUS at f1=0.9 and BENIGN at f1=0.1; all other features 0."""
    out = []
    for i in range(n_per_class):
        out.append(LabeledSample((0.9,) + (0.0,) * (N_FEATURES - 1), Label.MALICIOUS, f"m{i}", 2012))
        out.append(LabeledSample((0.1,) + (0.0,) * (N_FEATURES - 1), Label.BENIGN, f"b{i}", 2012))
    return out


def vector(f1: float) -> tuple[float, ...]:
    return (f1,) + (0.0,) * (N_FEATURES - 1)



# acceptance results, printed once at the end of the run
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.rstrip("ab")), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
    terminalreporter.write_line(f"profiles checked against the feature invariants: {PROFILE_LOG['checked']}")
