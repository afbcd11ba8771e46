"""Four-quadrant (culture x language) question sets built from templates.

Native cells ``(i, native(i))`` come from adapting a template; every other
cell ``(i, j)`` is a translation of the native cell of culture ``i``.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import unicodedata
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from .text import normalize_text

log = logging.getLogger(__name__)

REGION_MARKER = "«REGION»"

NATIVE_LANGUAGE = {"US": "en", "CN": "zh", "ES": "es", "ID": "id", "KR": "ko", "IR": "fa", "JB": "su"}

REVIEW_RUBRIC = (
    "1 point: the translation content is problematic or inaccurately expressed.\n"
    "2 points: the translation content is accurate, but the format deviates significantly "
    "from the native-language question.\n"
    "3 points: the translation content is accurate and the format aligns with the "
    "native-language question.\n"
)


class DatasetError(Exception):
    pass


class DatasetConfigError(DatasetError, ValueError):
    pass


class TranslationError(DatasetError):
    """Transport-level failure; callers may retry."""


class PreconditionError(DatasetError, ValueError):
    pass


@dataclass(frozen=True)
class TemplateQuestion:
    template_id: str
    text: str
    topic: str = ""

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise DatasetConfigError(f"template {self.template_id}: empty text")
        n = self.text.count(REGION_MARKER)
        if n != 1:
            raise DatasetConfigError(f"template {self.template_id}: expected one {REGION_MARKER} marker, found {n}")


@dataclass(frozen=True)
class AnswerSet:
    answers: tuple[str, ...]
    aliases: tuple[tuple[str, ...], ...] = ()

    def __post_init__(self) -> None:
        answers = tuple(self.answers)
        aliases = tuple(tuple(a) for a in self.aliases) or tuple(() for _ in answers)
        object.__setattr__(self, "answers", answers)
        object.__setattr__(self, "aliases", aliases)
        if not answers:
            raise DatasetConfigError("answer set must be non-empty")
        if len(aliases) != len(answers):
            raise DatasetConfigError("aliases must be given per answer")
        seen = set()
        for a in answers:
            if not a.strip():
                raise DatasetConfigError("empty answer string")
            key = normalize_text(a)
            if key in seen:
                raise DatasetConfigError(f"answers {a!r} collide after normalization")
            seen.add(key)
        for group in aliases:
            if any(not s.strip() for s in group):
                raise DatasetConfigError("empty alias string")

    def candidates(self) -> list[str]:
        out = []
        for a, al in zip(self.answers, self.aliases):
            out.append(a)
            out.extend(al)
        return out

    @classmethod
    def of(cls, *answers: str) -> "AnswerSet":
        return cls(tuple(answers))


@dataclass(frozen=True)
class LocalizedQuestion:
    template_id: str
    culture: str
    language: str
    text: str
    answers: AnswerSet | None = None

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.template_id, self.culture, self.language)

    @property
    def question_id(self) -> str:
        return f"{self.template_id}.{self.culture}.{self.language}"

    def to_dict(self) -> dict:
        answers = self.answers
        return {
            "template_id": self.template_id,
            "culture": self.culture,
            "language": self.language,
            "question": _nfc(self.text),
            "answers": [_nfc(a) for a in answers.answers] if answers else [],
            "aliases": [[_nfc(a) for a in g] for g in answers.aliases] if answers else [],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "LocalizedQuestion":
        answers = AnswerSet(tuple(doc["answers"]), tuple(tuple(g) for g in doc.get("aliases", []))) if doc.get("answers") else None
        return cls(doc["template_id"], doc["culture"], doc["language"], doc["question"], answers)


def _nfc(s: str) -> str:
    return unicodedata.normalize("NFC", s)


@dataclass(frozen=True)
class DualPair:
    left: LocalizedQuestion
    right: LocalizedQuestion

    def __post_init__(self) -> None:
        if self.left.template_id != self.right.template_id:
            raise DatasetError("dual pair must share a template")
        same_culture = self.left.culture == self.right.culture
        same_language = self.left.language == self.right.language
        if same_culture == same_language:
            raise DatasetError("dual pair must differ in exactly one of culture/language")

    @property
    def kind(self) -> str:
        return "cross_language" if self.left.culture == self.right.culture else "cross_culture"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "left": list(self.left.key), "right": list(self.right.key)}


@dataclass(frozen=True)
class Adaptation:
    display_name: str
    rules: tuple[tuple[str, str], ...] = ()


class AdaptationTable:
    """Region display names and ordered find/replace rules per (culture, language)."""

    def __init__(self, entries: Mapping[tuple[str, str], Adaptation]):
        self.entries = dict(entries)

    def __contains__(self, key: tuple[str, str]) -> bool:
        return key in self.entries

    def get(self, culture: str, language: str) -> Adaptation:
        try:
            return self.entries[(culture, language)]
        except KeyError:
            raise DatasetConfigError(f"adaptation table has no entry for ({culture}, {language})") from None

    @classmethod
    def from_dict(cls, doc: Mapping) -> "AdaptationTable":
        entries = {}
        for row in doc["entries"]:
            rules = tuple((r[0], r[1]) for r in row.get("rules", []))
            entries[(row["culture"], row["language"])] = Adaptation(row["display_name"], rules)
        return cls(entries)


@dataclass(frozen=True)
class Cell:
    language: str
    cultures: tuple[str, ...]
    samples: int


@dataclass(frozen=True)
class DatasetSpec:
    cells: tuple[Cell, ...]
    native_language: Mapping[str, str] = field(default_factory=lambda: dict(NATIVE_LANGUAGE))

    def __post_init__(self) -> None:
        for c in self.cells:
            if c.samples < 1:
                raise DatasetConfigError(f"samples per cell must be >= 1 (language {c.language})")
            for culture in c.cultures:
                if culture not in self.native_language:
                    raise DatasetConfigError(f"culture {culture} has no native language")

    def grid(self) -> list[tuple[str, str, int]]:
        """(culture, language, samples) per requested cell."""
        return [(cu, c.language, c.samples) for c in self.cells for cu in c.cultures]

    @property
    def total(self) -> int:
        return sum(n for _, _, n in self.grid())

    @classmethod
    def from_dict(cls, doc: Mapping) -> "DatasetSpec":
        cells = tuple(Cell(c["language"], tuple(c["cultures"]), int(c["samples"])) for c in doc["cells"])
        native = doc.get("native_language", NATIVE_LANGUAGE)
        return cls(cells, dict(native))


def benchmark_spec(samples: int = 500) -> DatasetSpec:
    """English over seven cultures, each other language over its own culture and the US."""
    cells = [Cell("en", ("US", "CN", "ES", "ID", "KR", "IR", "JB"), samples)]
    for culture, lang in NATIVE_LANGUAGE.items():
        if lang != "en":
            cells.append(Cell(lang, (culture, "US"), samples))
    return DatasetSpec(tuple(cells))


# -- translators -----------------------------------------------------------------


@dataclass(frozen=True)
class TranslationRequest:
    source_language: str
    target_language: str
    text: str
    exemplar: tuple[str, str] | None = None

    def to_wire(self) -> dict:
        doc = {"source_language": self.source_language, "target_language": self.target_language, "text": self.text}
        if self.exemplar is not None:
            doc["exemplar"] = {"source_text": self.exemplar[0], "target_text": self.exemplar[1]}
        return doc

    @classmethod
    def from_wire(cls, doc: Mapping) -> "TranslationRequest":
        ex = doc.get("exemplar")
        exemplar = (ex["source_text"], ex["target_text"]) if ex else None
        return cls(doc["source_language"], doc["target_language"], doc["text"], exemplar)


class TranslatorClient(Protocol):
    def translate(self, request: TranslationRequest) -> str: ...


class MockTranslator:
    """Deterministic stand-in: prefixes the text with ``⟦lang⟧``."""

    def translate(self, request: TranslationRequest) -> str:
        return f"⟦{request.target_language}⟧{request.text}"

    @staticmethod
    def invert(text: str) -> tuple[str, str]:
        if not text.startswith("⟦") or "⟧" not in text:
            raise ValueError("not a mock translation")
        lang, _, rest = text[1:].partition("⟧")
        return lang, rest


class FaultInjectingTranslator:
    """Wraps a translator and fails on selected requests.

    ``fail_texts`` fail every time (a persistent fault); ``fail_calls`` are
    0-based call indices that fail once (a transient fault).
    """

    def __init__(self, inner: TranslatorClient, fail_texts: Iterable[str] = (), fail_calls: Iterable[int] = ()):
        self.inner = inner
        self.fail_texts = set(fail_texts)
        self.fail_calls = set(fail_calls)
        self.calls = 0

    def translate(self, request: TranslationRequest) -> str:
        n = self.calls
        self.calls += 1
        if n in self.fail_calls or any(t in request.text for t in self.fail_texts):
            raise TranslationError(f"injected failure on call {n}")
        return self.inner.translate(request)


class HttpTranslator:
    """POSTs the JSON wire request to ``endpoint`` and reads ``{"text": ...}``.

    The bearer token, if any, is read from the environment variable named by
    ``token_env``.
    """

    def __init__(self, endpoint: str, token_env: str | None = None, timeout: float = 30.0):
        self.endpoint = endpoint
        self.token_env = token_env
        self.timeout = timeout

    def translate(self, request: TranslationRequest) -> str:
        body = json.dumps(request.to_wire(), ensure_ascii=False).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.token_env and os.environ.get(self.token_env):
            headers["Authorization"] = f"Bearer {os.environ[self.token_env]}"
        req = urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                doc = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
            raise TranslationError(f"translator request failed: {exc}") from exc
        if not isinstance(doc, dict) or not isinstance(doc.get("text"), str):
            raise TranslationError("translator response lacks a 'text' field")
        return doc["text"]


# -- operations ---------------------------------------------------------------------


def adapt_template(template: TemplateQuestion, table: AdaptationTable, culture: str, language: str) -> LocalizedQuestion:
    entry = table.get(culture, language)
    text = template.text.replace(REGION_MARKER, entry.display_name)
    for find, replace in entry.rules:
        text = text.replace(find, replace)
    return LocalizedQuestion(template.template_id, culture, language, text)


def _translate_with_retry(client: TranslatorClient, request: TranslationRequest, retries: int) -> str:
    for attempt in range(retries + 1):
        try:
            return client.translate(request)
        except TranslationError as exc:
            log.warning("translation attempt %d failed: %s", attempt + 1, exc)
            last = exc
    raise last


def build_cross_lingual(
    source: LocalizedQuestion,
    language: str,
    translator: TranslatorClient,
    exemplar: tuple[str, str] | None = None,
    retries: int = 2,
) -> LocalizedQuestion:
    """Render ``source`` (question and answers) in ``language``, keeping its culture.

    Raises :class:`TranslationError` once ``retries`` extra attempts are used up.
    """
    if language == source.language:
        raise PreconditionError(f"target language equals source language {language!r}")

    def tr(text: str, ex: tuple[str, str] | None = None) -> str:
        return _translate_with_retry(translator, TranslationRequest(source.language, language, text, ex), retries)

    text = tr(source.text, exemplar)
    answers = None
    if source.answers is not None:
        answers = AnswerSet(
            tuple(tr(a) for a in source.answers.answers),
            tuple(tuple(tr(a) for a in g) for g in source.answers.aliases),
        )
    return LocalizedQuestion(source.template_id, source.culture, language, text, answers)


@dataclass(frozen=True)
class Quarantined:
    template_id: str
    culture: str
    language: str
    reason: str

    def to_dict(self) -> dict:
        return {"template_id": self.template_id, "culture": self.culture, "language": self.language, "reason": self.reason}


@dataclass
class EvalSet:
    records: list[LocalizedQuestion]
    pairs: list[DualPair]
    quarantined: list[Quarantined]
    expected_total: int

    @property
    def complete(self) -> bool:
        return not self.quarantined

    def cell_counts(self) -> dict[tuple[str, str], int]:
        counts: dict[tuple[str, str], int] = {}
        for r in self.records:
            counts[(r.culture, r.language)] = counts.get((r.culture, r.language), 0) + 1
        return counts


def build_pair_index(records: Sequence[LocalizedQuestion]) -> list[DualPair]:
    """All same-template pairs differing in exactly one axis, in canonical order."""
    by_template: dict[str, list[LocalizedQuestion]] = {}
    for r in records:
        by_template.setdefault(r.template_id, []).append(r)
    pairs = []
    for tid in sorted(by_template):
        group = sorted(by_template[tid], key=lambda q: q.key)
        for a, b in combinations(group, 2):
            if (a.culture == b.culture) != (a.language == b.language):
                pairs.append(DualPair(a, b))
    return pairs


def assemble_eval_set(
    spec: DatasetSpec,
    templates: Sequence[TemplateQuestion],
    table: AdaptationTable,
    translator: TranslatorClient,
    answers: Mapping[tuple[str, str], AnswerSet],
    jobs: int = 1,
    retries: int = 2,
) -> EvalSet:
    """Build every requested cell plus the dual-pair index.

    ``answers`` maps ``(template_id, culture)`` to the native-language gold
    answers.  Each cell uses the first ``samples`` templates by id, so the
    same template backs every cell that needs it.  Failed translations are
    quarantined, never dropped: ``len(records) + len(quarantined)`` always
    equals ``spec.total``.
    """
    ordered = sorted(templates, key=lambda t: t.template_id)
    need = max((n for _, _, n in spec.grid()), default=0)
    if len(ordered) < need:
        raise DatasetConfigError(f"need {need} templates, got {len(ordered)} (short by {need - len(ordered)})")

    natives: dict[tuple[str, str], LocalizedQuestion] = {}
    tasks: list[tuple[str, str, str]] = []
    for culture, language, n in spec.grid():
        native = spec.native_language[culture]
        for t in ordered[:n]:
            if (t.template_id, culture) not in natives:
                try:
                    gold = answers[(t.template_id, culture)]
                except KeyError:
                    raise DatasetConfigError(f"no answer set for template {t.template_id}, culture {culture}") from None
                q = adapt_template(t, table, culture, native)
                natives[(t.template_id, culture)] = LocalizedQuestion(q.template_id, culture, native, q.text, gold)
            if language != native:
                tasks.append((t.template_id, culture, language))

    culture_of = {lang: cu for cu, lang in spec.native_language.items()}
    built: dict[tuple[str, str, str], LocalizedQuestion] = {}

    def exemplar_for(tid: str, culture: str, language: str) -> tuple[str, str] | None:
        # (q_{c,src}, q_{c,c}) for the culture c native to the target language.
        src = natives[(tid, culture)].language
        c = culture_of.get(language)
        if c is None or c == culture or (tid, c) not in natives:
            return None
        anchor = built.get((tid, c, src))
        return (anchor.text, natives[(tid, c)].text) if anchor else None

    def run(task: tuple[str, str, str]) -> LocalizedQuestion | Quarantined:
        tid, culture, language = task
        try:
            ex = exemplar_for(tid, culture, language)
            return build_cross_lingual(natives[(tid, culture)], language, translator, ex, retries)
        except TranslationError as exc:
            return Quarantined(tid, culture, language, str(exc))

    # Translations into English go first so they can anchor the rest.
    phases = [[t for t in tasks if t[2] == "en"], [t for t in tasks if t[2] != "en"]]
    results: list[LocalizedQuestion | Quarantined] = []
    for phase in phases:
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                out = list(pool.map(run, phase))
        else:
            out = [run(t) for t in phase]
        for r in out:
            if isinstance(r, LocalizedQuestion):
                built[r.key] = r
        results.extend(out)

    wanted = {(cu, lang): {t.template_id for t in ordered[:n]} for cu, lang, n in spec.grid()}
    records = [q for (tid, culture), q in natives.items() if tid in wanted.get((culture, q.language), ())]
    quarantined = []
    for r in results:
        (quarantined if isinstance(r, Quarantined) else records).append(r)
    records.sort(key=lambda q: q.key)
    quarantined.sort(key=lambda q: (q.template_id, q.culture, q.language))
    if quarantined:
        log.warning("%d records quarantined", len(quarantined))
    return EvalSet(records, build_pair_index(records), quarantined, spec.total)


# -- persistence -------------------------------------------------------------------


def _write_jsonl(rows: Iterable[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")


def _read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_dataset(records: Iterable[LocalizedQuestion], path: str | Path) -> None:
    _write_jsonl((r.to_dict() for r in records), path)


def read_dataset(path: str | Path) -> list[LocalizedQuestion]:
    return [LocalizedQuestion.from_dict(d) for d in _read_jsonl(path)]


def write_pairs(pairs: Iterable[DualPair], path: str | Path) -> None:
    _write_jsonl((p.to_dict() for p in pairs), path)


def read_pairs(path: str | Path, records: Sequence[LocalizedQuestion]) -> list[DualPair]:
    index = {r.key: r for r in records}
    return [DualPair(index[tuple(d["left"])], index[tuple(d["right"])]) for d in _read_jsonl(path)]


def read_templates(path: str | Path) -> list[TemplateQuestion]:
    return [TemplateQuestion(d["template_id"], d["text"], d.get("topic", "")) for d in _read_jsonl(path)]


def read_answers(path: str | Path) -> dict[tuple[str, str], AnswerSet]:
    """JSONL rows ``{template_id, culture, answers, aliases?}``."""
    out = {}
    for d in _read_jsonl(path):
        out[(d["template_id"], d["culture"])] = AnswerSet(tuple(d["answers"]), tuple(tuple(g) for g in d.get("aliases", [])))
    return out


# -- human review --------------------------------------------------------------------


@dataclass(frozen=True)
class ReviewCase:
    row_id: int
    translated: LocalizedQuestion
    duals: tuple[LocalizedQuestion, ...]

    def to_dict(self) -> dict:
        return {"row_id": self.row_id, "translated": self.translated.to_dict(), "duals": [d.to_dict() for d in self.duals]}


@dataclass
class ReviewBundle:
    cases: list[ReviewCase]
    rubric: str = REVIEW_RUBRIC


def sample_for_review(
    records: Sequence[LocalizedQuestion],
    pairs: Sequence[DualPair],
    sample_size: int,
    seed: int,
    base_culture: str = "US",
    base_language: str = "en",
    native_language: Mapping[str, str] = NATIVE_LANGUAGE,
) -> ReviewBundle:
    """Draw translated base-culture questions with their three duals.

    For a sampled ``(US, i)`` question the duals are ``(US, en)``, and the
    native culture ``c`` of ``i`` asked in English and in ``i``.
    """
    index = {r.key: r for r in records}
    culture_of = {lang: cu for cu, lang in native_language.items()}
    in_pairs = {p.left.key for p in pairs} | {p.right.key for p in pairs}
    candidates = []
    for r in records:
        if r.culture != base_culture or r.language == base_language or r.key not in in_pairs:
            continue
        native_culture = culture_of.get(r.language)
        dual_keys = [(r.template_id, base_culture, base_language)]
        if native_culture is not None:
            dual_keys += [(r.template_id, native_culture, base_language), (r.template_id, native_culture, r.language)]
        duals = tuple(index[k] for k in dual_keys if k in index)
        candidates.append((r, duals))
    if sample_size > len(candidates):
        raise DatasetConfigError(f"sample size {sample_size} exceeds {len(candidates)} available cross-lingual cases")
    rng = np.random.default_rng(seed)
    picks = sorted(rng.choice(len(candidates), size=sample_size, replace=False).tolist())
    cases = [ReviewCase(i, candidates[p][0], candidates[p][1]) for i, p in enumerate(picks)]
    return ReviewBundle(cases)


def write_review_bundle(bundle: ReviewBundle, directory: str | Path, reviewers: int = 4) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    _write_jsonl((c.to_dict() for c in bundle.cases), directory / "bundle.jsonl")
    (directory / "rubric.txt").write_text(bundle.rubric, encoding="utf-8")
    for n in range(reviewers):
        with open(directory / f"reviewer_{n + 1}.csv", "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row_id", "score"])
            for c in bundle.cases:
                w.writerow([c.row_id, ""])


@dataclass(frozen=True)
class ReviewSummary:
    rows: int
    reviewers: int
    full_mark_rate: float
    at_least_two_rate: float
    agreement_rate: float


def read_score_sheet(path: str | Path) -> dict[int, int]:
    out = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            score = int(row["score"])
            if score not in (1, 2, 3):
                raise DatasetError(f"{path}: score {score} outside 1-3")
            out[int(row["row_id"])] = score
    return out


def summarize_reviews(sheets: Sequence[Mapping[int, int]]) -> ReviewSummary:
    """Full-mark share, share >= 2 and all-reviewer agreement, as percentages."""
    if not sheets:
        raise DatasetError("no reviewer sheets")
    rows = sorted(sheets[0])
    for s in sheets[1:]:
        if sorted(s) != rows:
            raise DatasetError("reviewer sheets cover different rows")
    if not rows:
        raise DatasetError("reviewer sheets are empty")
    scores = [s[r] for s in sheets for r in rows]
    agree = sum(1 for r in rows if len({s[r] for s in sheets}) == 1)
    return ReviewSummary(
        rows=len(rows),
        reviewers=len(sheets),
        full_mark_rate=100.0 * sum(1 for x in scores if x == 3) / len(scores),
        at_least_two_rate=100.0 * sum(1 for x in scores if x >= 2) / len(scores),
        agreement_rate=100.0 * agree / len(rows),
    )
