"""
Scoring answers and reading the gaps
====================================

Score the shipped fixture responses, lay the means out per
(culture, language) cell, and compute the two kinds of gap: how a language
treats foreign cultures, and whether a culture is better served in its own
language than in English.
"""

import json
from importlib import resources

from dualprobe import dualset, evalkit
from dualprobe.dualset import AnswerSet
from dualprobe.evalkit import ModelResponse, QuestionRef, score_question


def score(text, gold, language="en"):
    return score_question(ModelResponse(QuestionRef("t01", "US", language), "m", text), gold).score


# the matcher: normalized, on word boundaries unless the script has none
gold = AnswerSet.of("3", "three")
for text in ["They usually start at age 3.", "Around 30 or so", "THREE!"]:
    print(f"{text!r:32} score={score(text, gold)}")
# Chinese has no spaces between words, so plain substring applies there
print("'孩子三岁上学' zh:", score("孩子三岁上学", AnswerSet.of("三岁"), "zh"))
print("'art' in 'he started early':", score("he started early", AnswerSet.of("art")))

fx = resources.files("dualprobe") / "fixtures"
table = dualset.AdaptationTable.from_dict(json.loads((fx / "adaptation.json").read_text(encoding="utf-8")))
spec = dualset.DatasetSpec.from_dict(json.loads((fx / "run.json").read_text(encoding="utf-8"))["dataset"]["spec"])
es = dualset.assemble_eval_set(spec, dualset.read_templates(fx / "templates.jsonl"), table,
                               dualset.MockTranslator(), dualset.read_answers(fx / "answers.jsonl"))

records = evalkit.score_responses(evalkit.read_responses(fx / "responses.jsonl"), es.records)
report = evalkit.quadrant_report(records, "fixture-model")
print("\nculture  language  mean   n")
for (c, l), cell in sorted(report.cells.items()):
    print(f"{c:8} {l:9} {evalkit.fmt1(cell.mean):>5} {cell.count:3}")

print("\nculture gaps (each culture minus the US, same language):")
for lang in ["zh", "es", "id"]:
    for comp in evalkit.culture_gap(report, lang).comparisons:
        print(f"  {comp.label:24} {evalkit.fmt1(comp.delta):>6}")

print("synergy (native language minus English, same culture):")
for culture in ["CN", "ES", "ID"]:
    comp = evalkit.synergy_gap(report, culture).comparisons[0]
    print(f"  {comp.label:24} {evalkit.fmt1(comp.delta):>6}")
