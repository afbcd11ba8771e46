"""Short-answer scoring, quadrant tables and gap reports."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .dualset import NATIVE_LANGUAGE, AnswerSet, LocalizedQuestion
from .text import normalize_text

# Scripts written without spaces between words; matching degrades to plain substring.
UNSEGMENTED_LANGUAGES = frozenset({"zh", "ja", "th", "lo", "km", "my", "bo"})

MATCHERS = ("exact", "substring", "boundary")


class EvalError(Exception):
    pass


class EmptyCellError(EvalError):
    pass


class AnswerConfigError(EvalError, ValueError):
    pass


@dataclass(frozen=True)
class QuestionRef:
    template_id: str
    culture: str
    language: str

    @property
    def cell(self) -> tuple[str, str]:
        return (self.culture, self.language)


@dataclass(frozen=True)
class ModelResponse:
    question: QuestionRef
    model_id: str
    text: str
    settings: Mapping = field(default_factory=dict)

    def to_dict(self) -> dict:
        q = self.question
        return {
            "question": {"template_id": q.template_id, "culture": q.culture, "language": q.language},
            "model_id": self.model_id,
            "text": self.text,
            "settings": dict(self.settings),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelResponse":
        return cls(QuestionRef(**doc["question"]), doc["model_id"], doc["text"], doc.get("settings", {}))


@dataclass(frozen=True)
class EvalRecord:
    question: QuestionRef
    matched: bool
    matched_answer: str | None
    model_id: str = ""

    @property
    def score(self) -> int:
        return 1 if self.matched else 0

    def to_dict(self) -> dict:
        q = self.question
        return {
            "template_id": q.template_id,
            "culture": q.culture,
            "language": q.language,
            "model_id": self.model_id,
            "matched": self.matched,
            "matched_answer": self.matched_answer,
            "score": self.score,
        }


def _occurs(needle: str, hay: str, matcher: str, boundary: bool) -> bool:
    if not needle:
        return False
    if matcher == "exact":
        return needle == hay
    if matcher == "substring" or not boundary:
        return needle in hay
    start = hay.find(needle)
    while start != -1:
        end = start + len(needle)
        if (start == 0 or hay[start - 1] == " ") and (end == len(hay) or hay[end] == " "):
            return True
        start = hay.find(needle, start + 1)
    return False


def score_question(response: ModelResponse, answers: AnswerSet, matcher: str = "boundary") -> EvalRecord:
    """Score 1 if any gold answer or alias appears in the response.

    The default ``boundary`` matcher requires the normalized answer to sit on
    word boundaries of the normalized response, except for languages in
    :data:`UNSEGMENTED_LANGUAGES`.
    """
    if matcher not in MATCHERS:
        raise AnswerConfigError(f"unknown matcher {matcher!r}")
    if not answers.answers:
        raise AnswerConfigError("answer set is empty")
    hay = normalize_text(response.text)
    boundary = response.question.language.split("-")[0] not in UNSEGMENTED_LANGUAGES
    for candidate in answers.candidates():
        if _occurs(normalize_text(candidate), hay, matcher, boundary):
            return EvalRecord(response.question, True, candidate, response.model_id)
    return EvalRecord(response.question, False, None, response.model_id)


def score_set(records: Sequence[EvalRecord]) -> float:
    """Unweighted mean of 0/1 scores, times 100, at full precision."""
    if not records:
        raise EmptyCellError("cannot score an empty cell")
    return 100.0 * sum(r.score for r in records) / len(records)


def fmt1(value: float) -> str:
    return f"{value:.1f}"


@dataclass(frozen=True)
class Cell:
    mean: float
    count: int


@dataclass
class QuadrantReport:
    model_id: str
    cells: dict[tuple[str, str], Cell]
    absent: list[tuple[str, str]] = field(default_factory=list)

    def mean(self, culture: str, language: str) -> float:
        try:
            return self.cells[(culture, language)].mean
        except KeyError:
            raise EvalError(f"cell ({culture}, {language}) absent from report for {self.model_id}") from None

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "cells": [
                {"culture": c, "language": l, "mean": v.mean, "display": fmt1(v.mean), "count": v.count}
                for (c, l), v in sorted(self.cells.items())
            ],
            "absent": [{"culture": c, "language": l} for c, l in sorted(self.absent)],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model_id", "culture", "language", "mean", "count"])
        for (c, l), v in sorted(self.cells.items()):
            w.writerow([self.model_id, c, l, repr(v.mean), v.count])
        return buf.getvalue()


def quadrant_report(
    records: Iterable[EvalRecord],
    model_id: str,
    expected_cells: Iterable[tuple[str, str]] | None = None,
) -> QuadrantReport:
    """Per-(culture, language) means.  Cells with no data are listed as absent.

    Without ``expected_cells`` the grid is every seen culture crossed with
    every seen language.
    """
    groups: dict[tuple[str, str], list[EvalRecord]] = {}
    for r in records:
        groups.setdefault(r.question.cell, []).append(r)
    cells = {k: Cell(score_set(v), len(v)) for k, v in groups.items()}
    if expected_cells is None:
        cultures = sorted({c for c, _ in cells})
        languages = sorted({l for _, l in cells})
        expected_cells = product(cultures, languages)
    absent = sorted(set(expected_cells) - set(cells))
    return QuadrantReport(model_id, cells, absent)


@dataclass(frozen=True)
class Comparison:
    label: str
    lhs: tuple[str, str]
    rhs: tuple[str, str]
    delta: float


@dataclass
class GapReport:
    model_id: str
    comparisons: list[Comparison]

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "comparisons": [
                {"label": c.label, "lhs": list(c.lhs), "rhs": list(c.rhs), "delta": c.delta, "display": fmt1(c.delta)}
                for c in self.comparisons
            ],
        }


def compare_cells(report: QuadrantReport, label: str, lhs: tuple[str, str], rhs: tuple[str, str]) -> Comparison:
    return Comparison(label, lhs, rhs, report.mean(*lhs) - report.mean(*rhs))


def culture_gap(report: QuadrantReport, language: str, baseline_culture: str = "US") -> GapReport:
    """For one language, each culture's cell minus the baseline culture's cell."""
    if (baseline_culture, language) not in report.cells:
        raise EvalError(f"baseline cell ({baseline_culture}, {language}) missing")
    others = sorted(c for c, l in report.cells if l == language and c != baseline_culture)
    if not others:
        raise EvalError(f"language {language} needs at least two cultures")
    comps = [
        compare_cells(report, f"culture:{c}-vs-{baseline_culture}@{language}", (c, language), (baseline_culture, language))
        for c in others
    ]
    return GapReport(report.model_id, comps)


def synergy_gap(
    report: QuadrantReport,
    culture: str,
    native_language: str | None = None,
    english: str = "en",
) -> GapReport:
    """Native-language cell minus English cell for one culture; positive means synergy."""
    native = native_language or NATIVE_LANGUAGE.get(culture)
    if native is None:
        raise EvalError(f"no native language known for culture {culture}")
    comp = compare_cells(report, f"synergy:{culture}:{native}-vs-{english}", (culture, native), (culture, english))
    return GapReport(report.model_id, [comp])


def average_gaps(reports: Sequence[GapReport]) -> dict[str, float]:
    """Mean delta per comparison label across models."""
    sums: dict[str, list[float]] = {}
    for rep in reports:
        for c in rep.comparisons:
            sums.setdefault(c.label, []).append(c.delta)
    return {label: sum(v) / len(v) for label, v in sorted(sums.items())}


# -- ingest / emit ---------------------------------------------------------------


def read_responses(path: str | Path) -> list[ModelResponse]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(ModelResponse.from_dict(json.loads(line)))
    return out


def write_responses(responses: Iterable[ModelResponse], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in responses:
            fh.write(json.dumps(r.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")


def score_responses(
    responses: Iterable[ModelResponse],
    dataset: Iterable[LocalizedQuestion],
    matcher: str = "boundary",
) -> list[EvalRecord]:
    """Score each response against the dataset question it refers to."""
    index = {(q.template_id, q.culture, q.language): q for q in dataset}
    records = []
    for resp in responses:
        key = (resp.question.template_id, resp.question.culture, resp.question.language)
        if key not in index:
            raise EvalError(f"response refers to unknown question {key}")
        q = index[key]
        if q.answers is None:
            raise AnswerConfigError(f"question {key} has no answer set")
        records.append(score_question(resp, q.answers, matcher))
    return records
