"""``dualprobe`` command line: build data, trace, probe, score, ablate, report.

Every flag has a twin key in the JSON run config; flags win.  Exit codes:
0 success, 1 configuration error, 2 partial result (quarantined records),
3 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import dualset, evalkit, probe, stats, tinylm, tracefile

log = logging.getLogger("dualprobe")

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL, EXIT_DATA = 0, 1, 2, 3


class ConfigFileError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class RunConfig:
    base_dir: Path
    out: Path
    seed: int = 0
    jobs: int = 1
    raw: dict = field(default_factory=dict)

    def section(self, name: str) -> dict:
        return dict(self.raw.get(name, {}))

    def path(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def input(self, value: str) -> Path:
        p = self.path(value)
        if not p.exists():
            raise ConfigFileError(f"input file not found: {p}")
        return p

    def child_seed(self, name: str) -> int:
        # All randomness fans out from the root seed by task name.
        tag = [int(b) for b in name.encode("utf-8")]
        return int(np.random.SeedSequence([self.seed, *tag]).generate_state(1, np.uint32)[0])


def load_config(args: argparse.Namespace) -> RunConfig:
    raw: dict[str, Any] = {}
    base = Path.cwd()
    if args.config:
        cfg_path = Path(args.config)
        try:
            raw = json.loads(cfg_path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigFileError(f"config file not found: {cfg_path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigFileError(f"config is not valid JSON: {exc}") from None
        base = cfg_path.resolve().parent
    seed = args.seed if args.seed is not None else int(raw.get("seed", 0))
    jobs = args.jobs if args.jobs is not None else int(raw.get("jobs", 1))
    out = args.out if args.out is not None else raw.get("out", "out")
    cfg = RunConfig(base_dir=base, out=Path(out), seed=seed, jobs=jobs, raw=raw)
    if not cfg.out.is_absolute():
        cfg.out = (base / cfg.out) if args.out is None else Path.cwd() / cfg.out
    cfg.out.mkdir(parents=True, exist_ok=True)
    return cfg


def _write_json(path: Path, doc: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def _read_json(path: Path) -> Any:
    if not path.exists():
        raise DataError(f"expected output of an earlier step is missing: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def _translator(spec: str | dict) -> dualset.TranslatorClient:
    if spec in (None, "mock"):
        return dualset.MockTranslator()
    if isinstance(spec, dict) and spec.get("kind") == "mock":
        inner = dualset.MockTranslator()
        if spec.get("fail_texts") or spec.get("fail_calls"):
            return dualset.FaultInjectingTranslator(inner, spec.get("fail_texts", ()), spec.get("fail_calls", ()))
        return inner
    if isinstance(spec, dict) and spec.get("kind") == "http":
        return dualset.HttpTranslator(spec["endpoint"], spec.get("token_env"), float(spec.get("timeout", 30)))
    raise ConfigFileError(f"unknown translator config {spec!r}")


def _settings(cfg: RunConfig) -> tinylm.GenerationSettings:
    g = cfg.section("generation")
    return tinylm.GenerationSettings(
        temperature=float(g.get("temperature", 0.0)),
        max_new_tokens=int(g.get("max_new_tokens", 1024)),
        stop_tokens=tuple(g.get("stop_tokens", ())),
    )


def _threshold(cfg: RunConfig) -> probe.ThresholdSpec:
    return probe.ThresholdSpec.parse(cfg.section("probe").get("threshold", "layer_top_k:5"))


# -- commands ----------------------------------------------------------------------


def cmd_build_dataset(cfg: RunConfig) -> int:
    d = cfg.section("dataset")
    templates = dualset.read_templates(cfg.input(d["templates"]))
    answers = dualset.read_answers(cfg.input(d["answers"]))
    table = dualset.AdaptationTable.from_dict(json.loads(cfg.input(d["adaptation"]).read_text(encoding="utf-8")))
    spec = dualset.benchmark_spec(int(d["benchmark_samples"])) if "benchmark_samples" in d else dualset.DatasetSpec.from_dict(d["spec"])
    built = dualset.assemble_eval_set(
        spec, templates, table, _translator(d.get("translator", "mock")), answers,
        jobs=cfg.jobs, retries=int(d.get("retries", 2)),
    )
    out = cfg.out / "dataset"
    out.mkdir(parents=True, exist_ok=True)
    dualset.write_dataset(built.records, out / "dataset.jsonl")
    dualset.write_pairs(built.pairs, out / "pairs.jsonl")
    dualset._write_jsonl((q.to_dict() for q in built.quarantined), out / "quarantine.jsonl")
    counts = built.cell_counts()
    _write_json(out / "summary.json", {
        "expected_total": built.expected_total,
        "records": len(built.records),
        "quarantined": len(built.quarantined),
        "pairs": len(built.pairs),
        "cells": [{"culture": c, "language": l, "count": n} for (c, l), n in sorted(counts.items())],
    })
    log.info("built %d records, %d pairs, %d quarantined", len(built.records), len(built.pairs), len(built.quarantined))
    return EXIT_OK if built.complete else EXIT_PARTIAL


def _model(cfg: RunConfig) -> tinylm.ModelWeights:
    m = cfg.section("model")
    planted = m.pop("planted", None)
    m.setdefault("seed", cfg.child_seed("model"))
    config = tinylm.ModelConfig(**m)
    if planted:
        return tinylm.plant_gate_model(
            config,
            trigger_token=tinylm.encode(planted["trigger"])[0],
            gated_output=tinylm.encode(planted["output"])[0],
            gate_neuron=(int(planted["neuron"]), int(planted["layer"])),
            allowed_outputs=tinylm.encode(planted["allowed"]) if "allowed" in planted else None,
        )
    return tinylm.init_model(config)


def cmd_gen_traces(cfg: RunConfig) -> int:
    records = dualset.read_dataset(cfg.out / "dataset" / "dataset.jsonl")
    weights = _model(cfg)
    settings = _settings(cfg)
    out = cfg.out / "traces"
    (out / "files").mkdir(parents=True, exist_ok=True)
    tinylm.save_weights(weights, out / "model.nwts")
    entries, responses = [], []
    for q in records:
        tokens, trace = tinylm.generate_with_recording(
            weights, None, tinylm.encode(q.text), settings,
            question_id=q.question_id, language=q.language, culture=q.culture,
        )
        rel = f"files/{q.question_id}.ntrc"
        n = tracefile.save_trace(trace, out / rel)
        entries.append(tracefile.ManifestEntry.for_trace(trace, rel, n))
        responses.append(evalkit.ModelResponse(
            evalkit.QuestionRef(q.template_id, q.culture, q.language), weights.model_id, tinylm.decode(tokens),
            {"temperature": settings.temperature, "max_new_tokens": settings.max_new_tokens},
        ))
    tracefile.write_manifest(entries, out / "manifest.tsv")
    evalkit.write_responses(responses, out / "responses.jsonl")
    problems = tracefile.validate_manifest(entries, out, jobs=cfg.jobs)
    if problems:
        raise DataError(f"freshly written traces fail validation: {problems[:3]}")
    return EXIT_OK


def _load_key_sets(cfg: RunConfig) -> dict[str, probe.KeyNeuronSet]:
    out = cfg.out / "neurons"
    index = _read_json(out / "index.json")
    return {row["question_id"]: probe.load_key_neurons(out / row["path"]) for row in index["questions"]}


def cmd_extract(cfg: RunConfig) -> int:
    tdir = cfg.out / "traces"
    manifest = tracefile.read_manifest(tdir / "manifest.tsv")
    problems = tracefile.validate_manifest(manifest, tdir, jobs=cfg.jobs)
    if problems:
        raise DataError(f"trace manifest invalid: {problems[:3]}")
    th = _threshold(cfg)
    out = cfg.out / "neurons"
    (out / "questions").mkdir(parents=True, exist_ok=True)
    per_cell: dict[tuple[str, str], list[probe.KeyNeuronSet]] = {}
    rows = []
    for e in manifest:
        s = probe.extract_key_neurons(tracefile.load_trace(tdir / e.path), th)
        rel = f"questions/{e.question_id}.tsv"
        probe.save_key_neurons(s, out / rel)
        rows.append({"question_id": e.question_id, "culture": e.culture, "language": e.language, "path": rel, "size": len(s)})
        per_cell.setdefault((e.culture, e.language), []).append(s)
    cells = []
    for (culture, language), sets in sorted(per_cell.items()):
        u = probe.union_key_neurons(sets, provenance=f"{culture}.{language}")
        rel = f"cells/{culture}.{language}.tsv"
        (out / "cells").mkdir(exist_ok=True)
        probe.save_key_neurons(u, out / rel)
        cells.append({"culture": culture, "language": language, "path": rel, "size": len(u)})
    _write_json(out / "index.json", {"threshold": th.label, "questions": rows, "cells": cells})
    return EXIT_OK


def cmd_proportions(cfg: RunConfig) -> int:
    """Per non-English language i: P over (US,en)->(US,i) pairs and over (c,en)->(c,i)."""
    sets = _load_key_sets(cfg)
    records = dualset.read_dataset(cfg.out / "dataset" / "dataset.jsonl")
    keys = {r.key for r in records}
    base_culture = cfg.section("probe").get("base_culture", "US")
    culture_of = {lang: cu for cu, lang in dualset.NATIVE_LANGUAGE.items()}
    reports, errors = [], []
    languages = sorted({r.language for r in records} - {"en"})
    templates = sorted({r.template_id for r in records})
    for lang in languages:
        for culture in (base_culture, culture_of.get(lang)):
            if culture is None:
                continue
            pairs = []
            for tid in templates:
                b, t = (tid, culture, "en"), (tid, culture, lang)
                if b in keys and t in keys:
                    qb, qt = ".".join(b), ".".join(t)
                    pairs.append((tid, sets[qb], sets[qt]))
            if not pairs:
                continue
            try:
                reports.append(probe.aggregate_proportions(pairs, culture, lang).to_dict())
            except probe.EmptyReportError as exc:
                errors.append(str(exc))
    _write_json(cfg.out / "proportions" / "proportions.json", {"reports": reports, "errors": errors})
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    records = dualset.read_dataset(cfg.out / "dataset" / "dataset.jsonl")
    resp_path = cfg.section("eval").get("responses")
    responses = evalkit.read_responses(cfg.input(resp_path) if resp_path else cfg.out / "traces" / "responses.jsonl")
    matcher = cfg.section("eval").get("matcher", "boundary")
    scored = evalkit.score_responses(responses, records, matcher)
    out = cfg.out / "eval"
    out.mkdir(parents=True, exist_ok=True)
    dualset._write_jsonl((r.to_dict() for r in scored), out / "records.jsonl")
    expected = sorted({(r.culture, r.language) for r in records})
    by_model: dict[str, list[evalkit.EvalRecord]] = {}
    for r in scored:
        by_model.setdefault(r.model_id, []).append(r)
    quadrants, gaps, csv_parts = [], [], []
    for model_id, recs in sorted(by_model.items()):
        rep = evalkit.quadrant_report(recs, model_id, expected)
        quadrants.append(rep.to_dict())
        csv_parts.append(rep.to_csv() if not csv_parts else rep.to_csv().split("\n", 1)[1])
        for lang in sorted({l for _, l in rep.cells}):
            try:
                gaps.append(evalkit.culture_gap(rep, lang).to_dict())
            except evalkit.EvalError:
                pass
        for culture in sorted({c for c, _ in rep.cells}):
            native = dualset.NATIVE_LANGUAGE.get(culture)
            if native and native != "en" and (culture, native) in rep.cells and (culture, "en") in rep.cells:
                gaps.append(evalkit.synergy_gap(rep, culture).to_dict())
    _write_json(out / "quadrant.json", {"reports": quadrants})
    (out / "quadrant.csv").write_text("".join(csv_parts), encoding="utf-8")
    _write_json(out / "gaps.json", {"reports": gaps})
    return EXIT_OK


def _items(rows: list[dict], prefix: str) -> list[stats.EvalItem]:
    return [
        stats.EvalItem(f"{prefix}{i}", r["prompt"], dualset.AnswerSet(tuple(r["answers"])), r.get("language", "en"), r.get("culture", "US"))
        for i, r in enumerate(rows)
    ]


def _reference_answer(weights: tinylm.ModelWeights, prompt: str, settings: tinylm.GenerationSettings) -> str:
    tokens, _ = tinylm.generate_with_recording(weights, None, tinylm.encode(prompt), settings)
    text = tinylm.decode(tokens)
    if not evalkit.normalize_text(text):
        raise DataError(f"unmasked model gives no scoreable answer for ood prompt {prompt!r}")
    return text


def cmd_ablate(cfg: RunConfig) -> int:
    a = cfg.section("ablation")
    weights = tinylm.load_weights(cfg.out / "traces" / "model.nwts")
    settings = tinylm.GenerationSettings(max_new_tokens=int(a.get("max_new_tokens", 1)))
    in_dist = _items(a.get("in_dist", []), "in")
    ood_rows = a.get("ood", [])
    if a.get("ood_reference") == "model":
        # Answers are whatever the unmasked model says, so ood measures drift.
        ood_rows = [dict(r, answers=[_reference_answer(weights, r["prompt"], settings)]) for r in ood_rows]
    ood = _items(ood_rows, "ood")
    thresholds = [probe.ThresholdSpec.parse(t) for t in a.get("thresholds", [])]
    summary = stats.run_masking_ablation(
        weights, in_dist, ood, thresholds, cfg.child_seed("ablation"), settings, per_question=bool(a.get("per_question", False)),
    )
    out = cfg.out / "ablation"
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(summary.to_csv(), encoding="utf-8")
    _write_json(out / "summary.json", summary.to_dict())
    return EXIT_OK


def cmd_report(cfg: RunConfig) -> int:
    quadrant = _read_json(cfg.out / "eval" / "quadrant.json")
    gaps = _read_json(cfg.out / "eval" / "gaps.json")
    props = _read_json(cfg.out / "proportions" / "proportions.json")
    ablation = _read_json(cfg.out / "ablation" / "summary.json")
    neurons = _read_json(cfg.out / "neurons" / "index.json")
    sizes = {(c["culture"], c["language"]): c["size"] for c in neurons["cells"]}
    correlations = []
    for rep in quadrant["reports"]:
        by_lang: dict[str, list[tuple[int, float]]] = {}
        for cell in rep["cells"]:
            key = (cell["culture"], cell["language"])
            if key in sizes:
                by_lang.setdefault(cell["language"], []).append((sizes[key], cell["mean"]))
        for lang, pts in sorted(by_lang.items()):
            entry = {"model_id": rep["model_id"], "language": lang, "n": len(pts)}
            try:
                r = stats.pearson([p[0] for p in pts], [p[1] for p in pts])
                entry["r"] = r.r
            except (ValueError, stats.UndefinedCorrelationError) as exc:
                entry["r"] = None
                entry["note"] = str(exc)
            correlations.append(entry)
    out = cfg.out / "report"
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", {
        "quadrants": quadrant["reports"],
        "gaps": gaps["reports"],
        "proportions": props["reports"],
        "correlations": correlations,
        "ablation": ablation,
        "threshold": neurons["threshold"],
    })
    lines = ["language,culture,key_neurons,score"]
    for rep in quadrant["reports"]:
        for cell in rep["cells"]:
            key = (cell["culture"], cell["language"])
            lines.append(f"{cell['language']},{cell['culture']},{sizes.get(key, '')},{cell['mean']!r}")
    (out / "neurons_vs_score.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    lines = ["culture,language,mean_proportion,pairs"]
    for r in props["reports"]:
        lines.append(f"{r['culture']},{r['language']},{r['mean_proportion']!r},{r['pair_count']}")
    (out / "proportions.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK


COMMANDS: dict[str, Callable[[RunConfig], int]] = {
    "build-dataset": cmd_build_dataset,
    "gen-traces": cmd_gen_traces,
    "extract-neurons": cmd_extract,
    "proportions": cmd_proportions,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualprobe", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--seed", type=int, default=None, help="root seed (overrides config)")
    parser.add_argument("--jobs", type=int, default=None, help="worker cap for parallel steps")
    parser.add_argument("--out", default=None, help="output directory (overrides config)")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("command", choices=[*COMMANDS, "all"])
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        names = list(COMMANDS) if args.command == "all" else [args.command]
        status = EXIT_OK
        for name in names:
            rc = COMMANDS[name](cfg)
            status = max(status, rc)
        return status
    except (ConfigFileError, dualset.DatasetConfigError, tinylm.ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (
        DataError, tracefile.TraceError, probe.ProbeError, evalkit.EvalError, stats.StatsError,
        dualset.DatasetError, tinylm.ModelError, json.JSONDecodeError, OSError,
    ) as exc:
        # OSError here means an artifact from an earlier step is missing or
        # unreadable; missing config inputs surface as ConfigFileError above.
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (KeyError, TypeError, ValueError) as exc:
        print(f"config error: {exc!r}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
