import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from dualprobe.dualset import (
    Adaptation,
    AdaptationTable,
    AnswerSet,
    Cell,
    DatasetConfigError,
    DatasetError,
    DatasetSpec,
    DualPair,
    FaultInjectingTranslator,
    HttpTranslator,
    LocalizedQuestion,
    MockTranslator,
    PreconditionError,
    TemplateQuestion,
    TranslationError,
    TranslationRequest,
    adapt_template,
    assemble_eval_set,
    benchmark_spec,
    build_cross_lingual,
    read_dataset,
    read_pairs,
    read_score_sheet,
    sample_for_review,
    summarize_reviews,
    write_dataset,
    write_pairs,
    write_review_bundle,
)

import synth

SPORTS = TemplateQuestion("t1", "What is the most popular sports team in «REGION»?", "sport")


def test_adapt_us_example():
    tbl = AdaptationTable({("US", "en"): Adaptation("the US")})
    q = adapt_template(SPORTS, tbl, "US", "en")
    assert q.text == "What is the most popular sports team in the US?"
    assert q.key == ("t1", "US", "en")


def test_adapt_rules_apply_in_order():
    tbl = AdaptationTable({("CN", "en"): Adaptation("China", (("sports team", "football club"), ("football", "soccer")))})
    assert adapt_template(SPORTS, tbl, "CN", "en").text == "What is the most popular soccer club in China?"


def test_adapt_locality():
    tbl = AdaptationTable({("US", "en"): Adaptation("the US")})
    other = TemplateQuestion("t2", "What is the most popular sports drink in «REGION»?")
    a = adapt_template(SPORTS, tbl, "US", "en").text
    b = adapt_template(other, tbl, "US", "en").text
    diff = [i for i, (x, y) in enumerate(zip(a, b)) if x != y]
    assert a.replace("team", "drink") == b and diff


def test_adapt_missing_entry():
    with pytest.raises(DatasetConfigError):
        adapt_template(SPORTS, AdaptationTable({}), "KR", "ko")


@pytest.mark.parametrize("text", ["no marker", "«REGION» and «REGION»", "   "])
def test_template_marker_invariant(text):
    with pytest.raises(DatasetConfigError):
        TemplateQuestion("t", text)


def test_answer_set_invariants():
    with pytest.raises(DatasetConfigError):
        AnswerSet(())
    with pytest.raises(DatasetConfigError):
        AnswerSet.of("The US", "the U.S.")
    with pytest.raises(DatasetConfigError):
        AnswerSet.of(" ")
    s = AnswerSet(("football",), (("soccer",),))
    assert s.candidates() == ["football", "soccer"]


def native_us():
    return LocalizedQuestion("t1", "US", "en", "What is it?", AnswerSet(("baseball",), (("ball",),)))


def test_mock_translation():
    out = build_cross_lingual(native_us(), "zh", MockTranslator())
    assert out.text == "⟦zh⟧What is it?"
    assert out.key == ("t1", "US", "zh")
    assert out.answers.answers == ("⟦zh⟧baseball",)
    assert out.answers.aliases == (("⟦zh⟧ball",),)
    assert MockTranslator.invert(out.text) == ("zh", "What is it?")


def test_same_language_is_precondition_error():
    with pytest.raises(PreconditionError):
        build_cross_lingual(native_us(), "en", MockTranslator())


def test_transient_failure_is_retried():
    tr = FaultInjectingTranslator(MockTranslator(), fail_calls=[0, 1])
    assert build_cross_lingual(native_us(), "es", tr, retries=2).text == "⟦es⟧What is it?"
    tr = FaultInjectingTranslator(MockTranslator(), fail_calls=[0, 1, 2])
    with pytest.raises(TranslationError):
        build_cross_lingual(native_us(), "es", tr, retries=2)


def test_batch_of_500_with_one_failure():
    n = 500
    spec = DatasetSpec((Cell("en", ("CN",), n),))
    tr = FaultInjectingTranslator(MockTranslator(), fail_texts=["Question 0042:"])
    es = assemble_eval_set(spec, synth.templates(n), synth.table(), tr, synth.answers(n, ["CN"]))
    assert len(es.records) == 499
    assert [(q.template_id, q.culture, q.language) for q in es.quarantined] == [("t0042", "CN", "en")]
    assert len(es.records) + len(es.quarantined) == es.expected_total == 500
    assert not es.complete


def test_two_by_two_case():
    spec = DatasetSpec((Cell("en", ("US", "CN"), 1), Cell("zh", ("CN", "US"), 1)))
    es = assemble_eval_set(spec, synth.templates(1), synth.table(), MockTranslator(), synth.answers(1))
    assert [q.key for q in es.records] == [
        ("t0000", "CN", "en"), ("t0000", "CN", "zh"), ("t0000", "US", "en"), ("t0000", "US", "zh"),
    ]
    got = {(p.left.key[1:], p.right.key[1:], p.kind) for p in es.pairs}
    assert got == {
        (("CN", "en"), ("CN", "zh"), "cross_language"),
        (("CN", "en"), ("US", "en"), "cross_culture"),
        (("CN", "zh"), ("US", "zh"), "cross_culture"),
        (("US", "en"), ("US", "zh"), "cross_language"),
    }


def test_one_by_one_case():
    spec = DatasetSpec((Cell("en", ("US",), 1),))
    es = assemble_eval_set(spec, synth.templates(1), synth.table(), MockTranslator(), synth.answers(1))
    assert len(es.records) == 1 and es.pairs == []


def test_insufficient_templates():
    spec = DatasetSpec((Cell("en", ("US",), 5),))
    with pytest.raises(DatasetConfigError, match="short by 2"):
        assemble_eval_set(spec, synth.templates(3), synth.table(), MockTranslator(), synth.answers(3))


def test_benchmark_layout_arithmetic():
    spec = benchmark_spec()
    assert spec.total == 9500
    assert sum(n for _, lang, n in spec.grid() if lang == "en") == 3500


class RecordingTranslator(MockTranslator):
    def __init__(self):
        self.requests = []

    def translate(self, request):
        self.requests.append(request)
        return super().translate(request)


def test_exemplar_anchor_is_passed():
    spec = DatasetSpec((Cell("en", ("US", "CN"), 1), Cell("zh", ("CN", "US"), 1)))
    tr = RecordingTranslator()
    es = assemble_eval_set(spec, synth.templates(1), synth.table(), tr, synth.answers(1))
    idx = {q.key: q for q in es.records}
    q_us_zh = [r for r in tr.requests if r.target_language == "zh" and r.text.startswith("Question")]
    assert len(q_us_zh) == 1
    assert q_us_zh[0].exemplar == (idx[("t0000", "CN", "en")].text, idx[("t0000", "CN", "zh")].text)


def test_parallel_assembly_matches_serial():
    spec = DatasetSpec((Cell("en", ("US", "CN", "ES"), 4), Cell("es", ("ES", "US"), 4)))
    args = (spec, synth.templates(4), synth.table(), MockTranslator(), synth.answers(4))
    a = assemble_eval_set(*args, jobs=1)
    b = assemble_eval_set(*args, jobs=4)
    assert a.records == b.records and a.pairs == b.pairs


def test_dual_pair_invariant():
    a = LocalizedQuestion("t1", "US", "en", "x")
    with pytest.raises(DatasetError):
        DualPair(a, LocalizedQuestion("t1", "CN", "zh", "y"))
    with pytest.raises(DatasetError):
        DualPair(a, LocalizedQuestion("t2", "US", "zh", "y"))


def test_persistence_roundtrip(tmp_path):
    spec = DatasetSpec((Cell("en", ("US", "CN"), 2), Cell("zh", ("CN", "US"), 2)))
    es = assemble_eval_set(spec, synth.templates(2), synth.table(), MockTranslator(), synth.answers(2))
    write_dataset(es.records, tmp_path / "d.jsonl")
    write_pairs(es.pairs, tmp_path / "p.jsonl")
    back = read_dataset(tmp_path / "d.jsonl")
    assert back == es.records
    assert read_pairs(tmp_path / "p.jsonl", back) == es.pairs


def test_dataset_file_is_nfc(tmp_path):
    decomposed = "Café?"
    write_dataset([LocalizedQuestion("t", "ES", "es", decomposed, AnswerSet.of("café"))], tmp_path / "d.jsonl")
    doc = json.loads((tmp_path / "d.jsonl").read_text(encoding="utf-8"))
    assert doc["question"] == "Café?" and doc["answers"] == ["café"]


def small_review_set():
    spec = DatasetSpec((Cell("en", ("US", "CN", "ES"), 5), Cell("zh", ("CN", "US"), 5), Cell("es", ("ES", "US"), 5)))
    return assemble_eval_set(spec, synth.templates(5), synth.table(), MockTranslator(), synth.answers(5))


def test_review_sampling():
    es = small_review_set()
    b = sample_for_review(es.records, es.pairs, 6, seed=1)
    assert len(b.cases) == 6
    for c in b.cases:
        r = c.translated
        assert r.culture == "US" and r.language != "en"
        native = {"zh": "CN", "es": "ES"}[r.language]
        assert [d.key for d in c.duals] == [
            (r.template_id, "US", "en"), (r.template_id, native, "en"), (r.template_id, native, r.language),
        ]
    assert sample_for_review(es.records, es.pairs, 6, seed=1).cases == b.cases
    with pytest.raises(DatasetConfigError):
        sample_for_review(es.records, es.pairs, 11, seed=1)


def test_review_bundle_files(tmp_path):
    es = small_review_set()
    b = sample_for_review(es.records, es.pairs, 3, seed=0)
    write_review_bundle(b, tmp_path, reviewers=4)
    assert sorted(p.name for p in tmp_path.iterdir()) == [
        "bundle.jsonl", "reviewer_1.csv", "reviewer_2.csv", "reviewer_3.csv", "reviewer_4.csv", "rubric.txt",
    ]
    assert (tmp_path / "reviewer_1.csv").read_text().splitlines() == ["row_id,score", "0,", "1,", "2,"]


def write_sheet(path, scores):
    path.write_text("row_id,score\n" + "".join(f"{i},{s}\n" for i, s in enumerate(scores)))
    return read_score_sheet(path)


def test_review_all_threes(tmp_path):
    sheet = write_sheet(tmp_path / "r.csv", [3] * 100)
    s = summarize_reviews([sheet])
    assert (s.full_mark_rate, s.at_least_two_rate) == (100.0, 100.0)


def test_review_mixed_rate(tmp_path):
    sheet = write_sheet(tmp_path / "r.csv", [3] * 489 + [2] * 11)
    s = summarize_reviews([sheet])
    assert f"{s.full_mark_rate:.1f}" == "97.8"
    assert s.at_least_two_rate == 100.0


def test_review_agreement(tmp_path):
    same = [write_sheet(tmp_path / f"r{i}.csv", [3, 2, 3, 1]) for i in range(4)]
    assert summarize_reviews(same).agreement_rate == 100.0
    diff = same[:3] + [write_sheet(tmp_path / "x.csv", [3, 3, 3, 1])]
    assert summarize_reviews(diff).agreement_rate == 75.0


def test_score_sheet_rejects_out_of_range(tmp_path):
    with pytest.raises(DatasetError):
        write_sheet(tmp_path / "r.csv", [4])


def test_wire_format_roundtrip():
    r = TranslationRequest("en", "zh", "hi", ("a", "b"))
    assert r.to_wire() == {
        "source_language": "en", "target_language": "zh", "text": "hi",
        "exemplar": {"source_text": "a", "target_text": "b"},
    }
    assert TranslationRequest.from_wire(r.to_wire()) == r
    assert "exemplar" not in TranslationRequest("en", "zh", "hi").to_wire()


@pytest.fixture
def echo_server():
    seen = []

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
            seen.append((body, self.headers.get("Authorization")))
            out = json.dumps({"text": f"<{body['target_language']}>{body['text']}"}).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(out)))
            self.end_headers()
            self.wfile.write(out)

        def log_message(self, *args):
            pass

    srv = HTTPServer(("127.0.0.1", 0), Handler)
    t = threading.Thread(target=srv.serve_forever, daemon=True)
    t.start()
    yield f"http://127.0.0.1:{srv.server_port}/translate", seen
    srv.shutdown()


def test_http_adapter(echo_server, monkeypatch):
    url, seen = echo_server
    monkeypatch.setenv("DUALPROBE_TEST_TOKEN", "s3cret")
    client = HttpTranslator(url, token_env="DUALPROBE_TEST_TOKEN", timeout=5)
    assert client.translate(TranslationRequest("en", "ko", "hello", ("x", "y"))) == "<ko>hello"
    body, auth = seen[0]
    assert body["exemplar"] == {"source_text": "x", "target_text": "y"}
    assert auth == "Bearer s3cret"


def test_http_adapter_unreachable():
    client = HttpTranslator("http://127.0.0.1:9/none", timeout=0.5)
    with pytest.raises(TranslationError):
        client.translate(TranslationRequest("en", "ko", "hello"))
