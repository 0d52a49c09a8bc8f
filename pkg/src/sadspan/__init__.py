"""Sensitive-access distribution profiling of method-call traces.

Typical flow::

    from sadspan import read_trace, demo_catalog, extract_profile
    profile = extract_profile(read_trace("app.trc"), demo_catalog())
"""

__version__ = "0.1.0"

from .catalog import SourceSinkCatalog, demo_catalog, parse_catalog, read_catalog  # noqa: E402
from .classifier import ForestParams, LabeledSample, load_model, predict, predict_score, save_model, train  # noqa: E402
from .errors import SadspanError  # noqa: E402
from .eval_harness import compute_metrics, cross_validate, holdout_eval, span_eval, summarize  # noqa: E402
from .sad_extractor import build_dcg, extract_profile, mark_vulnerable  # noqa: E402
from .synth_gen import synth_corpus, synth_trace  # noqa: E402
from .trace_model import Label, Trace, parse_trace, read_trace, validate_trace  # noqa: E402
