"""Exception hierarchy shared by every sadspan module.

Each module raises subclasses of :class:`SadspanError`; the CLI reports the
concrete class name and exits with status 1.
"""

from __future__ import annotations


class SadspanError(Exception):
    """Base class for all data errors raised by the library."""


# trace_model
class TraceError(SadspanError):
    pass


class MalformedHeader(TraceError):
    pass


class MalformedRecord(TraceError):
    pass


class NonMonotonicSeq(TraceError):
    pass


class EmptyTrace(TraceError):
    pass


# catalog
class CatalogError(SadspanError):
    pass


class UnknownCategory(CatalogError):
    pass


class DuplicateConflictingEntry(CatalogError):
    pass


class MalformedLine(CatalogError):
    pass


# classifier
class ClassifierError(SadspanError):
    pass


class EmptySamples(ClassifierError):
    pass


class SingleClassTrainingSet(ClassifierError):
    pass


class UnsupportedVersion(ClassifierError):
    pass


class CorruptModel(ClassifierError):
    pass


# eval_harness
class EvaluationError(SadspanError):
    pass


class TooFewSamples(EvaluationError):
    pass


class GroupTooSmall(EvaluationError):
    pass


# synth_gen
class InconsistentTemplate(SadspanError):
    pass


class MalformedCorpusSpec(SadspanError):
    pass
