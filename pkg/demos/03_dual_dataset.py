"""
Building a dual evaluation set
==============================

Every question exists for several (culture, language) cells: asked about
China in Chinese, about China in English, about the US in Chinese, and so
on.  Native cells come from templates; the rest are translated.  Here the
translator is the deterministic mock, plus one that fails on purpose.
"""

from importlib import resources
import json

from dualprobe import dualset

fx = resources.files("dualprobe") / "fixtures"
templates = dualset.read_templates(fx / "templates.jsonl")
answers = dualset.read_answers(fx / "answers.jsonl")
table = dualset.AdaptationTable.from_dict(json.loads((fx / "adaptation.json").read_text(encoding="utf-8")))

print(dualset.adapt_template(templates[1], table, "US", "en").text)
print(dualset.adapt_template(templates[1], table, "CN", "zh").text)

spec = dualset.DatasetSpec((
    dualset.Cell("en", ("US", "CN"), 2),
    dualset.Cell("zh", ("CN", "US"), 2),
))
es = dualset.assemble_eval_set(spec, templates, table, dualset.MockTranslator(), answers)
print(f"\n{len(es.records)} records, {len(es.pairs)} dual pairs")
for q in es.records[:4]:
    print(f"  {q.question_id:10} {q.text}  -> {q.answers.answers}")
for p in es.pairs[:4]:
    print(f"  {p.kind:15} {p.left.question_id} / {p.right.question_id}")

# a translator that keeps failing on one question: the record is quarantined, not lost
flaky = dualset.FaultInjectingTranslator(dualset.MockTranslator(), fail_texts=["preschool"])
es = dualset.assemble_eval_set(spec, templates, table, flaky, answers)
print(f"\n{len(es.records)} built + {len(es.quarantined)} quarantined = {es.expected_total}")
for q in es.quarantined:
    print("  quarantined:", q.template_id, q.culture, q.language)

# the full benchmark layout: English over seven cultures, six more languages over two each
print("\nbenchmark layout total:", dualset.benchmark_spec().total)
