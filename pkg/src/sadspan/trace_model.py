"""Method-call trace data model and the line-oriented ``.trc`` format.

A trace file looks like::

    # comment
    APP t1 MALICIOUS 2012
    CALL 1 com.t1.Main.onCreate()void 0 com.t1.Tracker.collect()void
    CALL 2 com.t1.Tracker.collect()void 0 android.location...

Fields are separated by single spaces. Method signatures never contain
whitespace, so a record always has exactly five fields.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Union

from .errors import EmptyTrace, MalformedHeader, MalformedRecord, NonMonotonicSeq, TraceError


class Label(enum.Enum):
    BENIGN = "BENIGN"
    MALICIOUS = "MALICIOUS"
    UNLABELED = "UNLABELED"

    @classmethod
    def parse(cls, text: str) -> "Label":
        try:
            return cls(text)
        except ValueError:
            raise ValueError(f"unknown label {text!r}") from None


class CallsiteId(NamedTuple):
    caller: str
    site_index: int
    callee: str


@dataclass(frozen=True)
class CallRecord:
    seq: int
    caller: str
    site_index: int
    callee: str

    @property
    def callsite(self) -> CallsiteId:
        return CallsiteId(self.caller, self.site_index, self.callee)


@dataclass(frozen=True)
class Trace:
    app_id: str
    label: Label
    year: int
    records: tuple[CallRecord, ...]

    def __post_init__(self) -> None:
        # accept any sequence but store an immutable tuple
        if not isinstance(self.records, tuple):
            object.__setattr__(self, "records", tuple(self.records))


@dataclass(frozen=True)
class Finding:
    """One invariant violation reported by :func:`validate_trace`."""

    seq: int | None
    message: str

    def __str__(self) -> str:
        where = "header" if self.seq is None else f"seq {self.seq}"
        return f"{where}: {self.message}"


_WHITESPACE = re.compile(r"\s")
_CALL_LINE = re.compile(r"CALL ([0-9]+) (\S+) ([0-9]+) (\S+)")


def is_valid_sig(sig: object) -> bool:
    return isinstance(sig, str) and sig != "" and _WHITESPACE.search(sig) is None


def _parse_int(text: str) -> int:
    # int() accepts "+5", "1_000" and surrounding whitespace; the format does not
    if not text or not (text.isascii() and text.lstrip("-").isdigit()) or text.count("-") > 1:
        raise ValueError(text)
    return int(text)


def parse_trace(data: Union[bytes, str, Iterable[str]]) -> Trace:
    """Parse a ``.trc`` document into a :class:`Trace`.

    Raises a :class:`~sadspan.errors.TraceError` subclass on any malformed
    input, including undecodable bytes.
    """
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedHeader(f"input is not valid UTF-8: {exc.reason}") from None
    lines = data.splitlines() if isinstance(data, str) else (line.rstrip("\r\n") for line in data)

    header: tuple[str, Label, int] | None = None
    records: list[CallRecord] = []
    last_seq = 0
    for lineno, line in enumerate(lines, start=1):
        if not line.strip() or line.startswith("#"):
            continue
        if header is None:
            fields = line.split(" ")
            if len(fields) != 4 or fields[0] != "APP":
                raise MalformedHeader(f"line {lineno}: expected 'APP <app_id> <label> <year>'")
            try:
                label = Label.parse(fields[2])
                year = _parse_int(fields[3])
            except ValueError as exc:
                raise MalformedHeader(f"line {lineno}: {exc}") from None
            if not is_valid_sig(fields[1]):
                raise MalformedHeader(f"line {lineno}: empty or whitespace-bearing app_id")
            header = (fields[1], label, year)
            continue
        m = _CALL_LINE.fullmatch(line)
        if m is None:
            raise MalformedRecord(
                f"line {lineno}: expected 'CALL <seq> <caller> <site_index> <callee>'"
                " with non-negative integers and whitespace-free signatures"
            )
        seq, site = int(m[1]), int(m[3])
        if seq < 1:
            raise MalformedRecord(f"line {lineno}: seq must be positive")
        if seq <= last_seq:
            raise NonMonotonicSeq(f"line {lineno}: seq {seq} follows seq {last_seq}")
        last_seq = seq
        records.append(CallRecord(seq, m[2], site, m[4]))

    if header is None:
        raise MalformedHeader("missing APP header line")
    if not records:
        raise EmptyTrace(f"trace {header[0]!r} has no CALL records")
    return Trace(header[0], header[1], header[2], tuple(records))


def serialize_trace(trace: Trace) -> str:
    lines = [f"APP {trace.app_id} {trace.label.value} {trace.year}"]
    lines.extend(
        f"CALL {r.seq} {r.caller} {r.site_index} {r.callee}" for r in trace.records
    )
    return "\n".join(lines) + "\n"


def validate_trace(trace: Trace) -> list[Finding]:
    findings: list[Finding] = []
    if not is_valid_sig(trace.app_id):
        findings.append(Finding(None, f"invalid app_id {trace.app_id!r}"))
    if not isinstance(trace.label, Label):
        findings.append(Finding(None, f"invalid label {trace.label!r}"))
    if not isinstance(trace.year, int) or isinstance(trace.year, bool):
        findings.append(Finding(None, f"invalid year {trace.year!r}"))
    if not trace.records:
        findings.append(Finding(None, "trace has no records"))

    seen: set[int] = set()
    prev: int | None = None
    for rec in trace.records:
        if not isinstance(rec.seq, int) or rec.seq < 1:
            findings.append(Finding(rec.seq, "seq must be a positive integer"))
        elif rec.seq in seen:
            findings.append(Finding(rec.seq, "duplicate seq"))
        elif prev is not None and rec.seq < prev:
            findings.append(Finding(rec.seq, f"seq out of order after {prev}"))
        if isinstance(rec.seq, int):
            seen.add(rec.seq)
            prev = rec.seq if prev is None else max(prev, rec.seq)
        if not isinstance(rec.site_index, int) or rec.site_index < 0:
            findings.append(Finding(rec.seq, f"invalid site_index {rec.site_index!r}"))
        for role, sig in (("caller", rec.caller), ("callee", rec.callee)):
            if not is_valid_sig(sig):
                findings.append(Finding(rec.seq, f"invalid {role} signature {sig!r}"))
    return findings


def read_trace(path) -> Trace:
    with open(path, "rb") as fh:
        return parse_trace(fh.read())


__all__ = [
    "CallRecord",
    "CallsiteId",
    "Finding",
    "Label",
    "Trace",
    "TraceError",
    "parse_trace",
    "read_trace",
    "serialize_trace",
    "validate_trace",
]
