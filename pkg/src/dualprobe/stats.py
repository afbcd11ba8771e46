"""Neuron-count/score correlation and masking ablations."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tinylm
from .dualset import AnswerSet
from .evalkit import ModelResponse, QuestionRef, score_question
from .probe import (
    KeyNeuronSet,
    ProbeError,
    ThresholdSpec,
    extract_key_neurons,
    random_neuron_sample,
    union_key_neurons,
)


class StatsError(Exception):
    pass


class UndefinedCorrelationError(StatsError, ValueError):
    pass


class AblationError(StatsError):
    pass


@dataclass(frozen=True)
class CorrelationResult:
    n: int
    r: float
    xs: tuple[float, ...]
    ys: tuple[float, ...]


def pearson(xs: Sequence[float], ys: Sequence[float]) -> CorrelationResult:
    """Product-moment correlation, computed in two passes (means, then centered sums)."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"series lengths differ: {x.shape} vs {y.shape}")
    if x.size < 2:
        raise ValueError("need at least 2 points")
    dx = x - math.fsum(x) / x.size
    dy = y - math.fsum(y) / y.size
    sxx = math.fsum(dx * dx)
    syy = math.fsum(dy * dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation is undefined for a constant series")
    r = math.fsum(dx * dy) / (math.sqrt(sxx) * math.sqrt(syy))
    r = max(-1.0, min(1.0, r))
    return CorrelationResult(int(x.size), r, tuple(x.tolist()), tuple(y.tolist()))


def neuron_count_vs_score(entries: Sequence[tuple[KeyNeuronSet, float]]) -> CorrelationResult:
    if len(entries) < 2:
        raise ValueError("need at least 2 (key set, score) entries")
    sizes = [len(s) for s, _ in entries]
    scores = [float(v) for _, v in entries]
    try:
        return pearson(sizes, scores)
    except UndefinedCorrelationError as exc:
        raise UndefinedCorrelationError(f"key-set sizes {sizes} or scores {scores} are constant: {exc}") from exc


# -- masking ablation -----------------------------------------------------------------


@dataclass(frozen=True)
class EvalItem:
    question_id: str
    prompt: str
    answers: AnswerSet
    language: str = "en"
    culture: str = "US"


@dataclass(frozen=True)
class AblationRow:
    setting: str
    masked_count: int
    in_dist: float
    ood: float
    random_in_dist: float
    random_ood: float
    seed: int


@dataclass
class AblationSummary:
    baseline_in_dist: float
    baseline_ood: float
    rows: list[AblationRow]

    @property
    def suggested_setting(self) -> str | None:
        """Setting with the largest in-dist drop net of the ood drop."""
        if not self.rows:
            return None
        def gain(r: AblationRow) -> float:
            return (self.baseline_in_dist - r.in_dist) - (self.baseline_ood - r.ood)
        return max(self.rows, key=gain).setting

    def to_dict(self) -> dict:
        return {
            "baseline_in_dist": self.baseline_in_dist,
            "baseline_ood": self.baseline_ood,
            "suggested_setting": self.suggested_setting,
            "rows": [asdict(r) for r in self.rows],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["setting", "mask", "masked_count", "in_dist", "ood", "seed"])
        for r in self.rows:
            w.writerow([r.setting, "key", r.masked_count, repr(r.in_dist), repr(r.ood), r.seed])
            w.writerow([r.setting, "random", r.masked_count, repr(r.random_in_dist), repr(r.random_ood), r.seed])
        return buf.getvalue()


def _child_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])


def _run(weights, items, mask, settings):
    out = []
    for it in items:
        tokens, trace = tinylm.generate_with_recording(
            weights, mask, tinylm.encode(it.prompt), settings,
            question_id=it.question_id, language=it.language, culture=it.culture,
        )
        out.append((tinylm.decode(tokens), trace))
    return out


def _score(items: Sequence[EvalItem], texts: Sequence[str], model_id: str) -> float:
    if not items:
        return 0.0
    hits = 0
    for it, text in zip(items, texts):
        ref = QuestionRef(it.question_id, it.culture, it.language)
        hits += score_question(ModelResponse(ref, model_id, text), it.answers).score
    return hits / len(items)


def evaluate(weights: tinylm.ModelWeights, items: Sequence[EvalItem], mask: tinylm.MaskSpec | None, settings: tinylm.GenerationSettings) -> float:
    """Fraction of ``items`` answered correctly under ``mask``."""
    return _score(items, [t for t, _ in _run(weights, items, mask, settings)], weights.model_id)


def run_masking_ablation(
    weights: tinylm.ModelWeights,
    in_dist: Sequence[EvalItem],
    ood: Sequence[EvalItem],
    thresholds: Sequence[ThresholdSpec],
    seed: int,
    settings: tinylm.GenerationSettings = tinylm.GenerationSettings(max_new_tokens=8),
    per_question: bool = False,
) -> AblationSummary:
    """Mask key neurons found on ``in_dist`` and measure both sets.

    For every threshold the key sets of the in-dist traces are unioned and
    masked, then a seeded random mask of the same size is scored as the
    baseline.  With ``per_question`` each in-dist item is masked with its own
    key set (and a random set of that size); ood items always use the union.
    Scores are fractions in [0, 1].
    """
    c = weights.config
    dims = (c.num_layers, c.ffn_width)
    base_in = _run(weights, in_dist, None, settings)
    base_ood = _run(weights, ood, None, settings)
    summary = AblationSummary(
        _score(in_dist, [t for t, _ in base_in], weights.model_id),
        _score(ood, [t for t, _ in base_ood], weights.model_id),
        [],
    )
    traces = [tr for _, tr in base_in]
    for idx, th in enumerate(thresholds):
        try:
            sets = [extract_key_neurons(tr, th) for tr in traces]
        except ProbeError as exc:
            raise AblationError(f"threshold {th.label}: {exc}") from exc
        union = union_key_neurons(sets, provenance=th.label) if sets else KeyNeuronSet(frozenset(), *dims)
        row_seed = _child_seed(seed, idx)
        rand_union = random_neuron_sample(dims, len(union), row_seed)
        key_mask = tinylm.MaskSpec.of(union.neurons)
        rand_mask = tinylm.MaskSpec.of(rand_union.neurons)
        if per_question:
            key_texts, rand_texts = [], []
            for qi, (item, s) in enumerate(zip(in_dist, sets)):
                r = random_neuron_sample(dims, len(s), _child_seed(row_seed, qi))
                key_texts.append(_run(weights, [item], tinylm.MaskSpec.of(s.neurons), settings)[0][0])
                rand_texts.append(_run(weights, [item], tinylm.MaskSpec.of(r.neurons), settings)[0][0])
            in_key = _score(in_dist, key_texts, weights.model_id)
            in_rand = _score(in_dist, rand_texts, weights.model_id)
        else:
            in_key = evaluate(weights, in_dist, key_mask, settings)
            in_rand = evaluate(weights, in_dist, rand_mask, settings)
        summary.rows.append(
            AblationRow(
                setting=th.label,
                masked_count=len(union),
                in_dist=in_key,
                ood=evaluate(weights, ood, key_mask, settings),
                random_in_dist=in_rand,
                random_ood=evaluate(weights, ood, rand_mask, settings),
                seed=row_seed,
            )
        )
    return summary
