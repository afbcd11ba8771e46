"""
The whole pipeline from the command line
========================================

Copies the fixture config into a scratch directory and runs

    dualprobe --config run.json all

which is build-dataset, gen-traces, extract-neurons, proportions, eval,
ablate and report in order.  Prints the artifact tree and a slice of the
consolidated report.
"""

import json
import tempfile
from importlib import resources
from pathlib import Path

from dualprobe import cli

work = Path(tempfile.mkdtemp())
fx = resources.files("dualprobe") / "fixtures"
for name in ["run.json", "templates.jsonl", "answers.jsonl", "adaptation.json", "responses.jsonl"]:
    (work / name).write_bytes((fx / name).read_bytes())

rc = cli.main(["--config", str(work / "run.json"), "all"])
print("exit code", rc)

out = work / "out"
for d in sorted(p for p in out.iterdir() if p.is_dir()):
    files = [p for p in d.rglob("*") if p.is_file()]
    print(f"  {d.name + '/':13} {len(files):3} files")

report = json.loads((out / "report" / "report.json").read_text(encoding="utf-8"))
print("\nthreshold:", report["threshold"])
for c in report["correlations"]:
    print(f"correlation {c['language']}: r = {c['r']}" + (f"  ({c['note']})" if "note" in c else ""))
for p in report["proportions"]:
    print(f"specialized proportion {p['culture']}/{p['language']}: {p['mean_proportion']:.3f} over {p['pair_count']} pairs")
print("ablation:", (out / "ablation" / "ablation.csv").read_text(encoding="utf-8"))
