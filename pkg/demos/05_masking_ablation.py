"""
Masking ablation and neuron-count correlation
=============================================

Mask the key neurons found on trigger prompts, compare with a random mask
of the same size, and watch an unrelated prompt set stay put.  Then
correlate key-set size with score across a few made-up cells.
"""

from dualprobe import tinylm
from dualprobe.dualset import AnswerSet
from dualprobe.probe import KeyNeuronSet, ThresholdSpec
from dualprobe.stats import EvalItem, neuron_count_vs_score, run_masking_ablation

cfg = tinylm.ModelConfig(vocab_size=257, d_model=32, ffn_width=1024, num_layers=2, num_heads=4, max_seq_len=64, seed=1)
model = tinylm.plant_gate_model(cfg, ord("#"), ord("7"), (11, 1), allowed_outputs=tinylm.encode("abcdefghijklmnopqrstuvwxyz"))
one = tinylm.GenerationSettings(max_new_tokens=1)

in_dist = [EvalItem(f"in{i}", p, AnswerSet.of("7")) for i, p in enumerate(["# now", "a # b", "where is #", "#"])]
ood = []
for i, p in enumerate(["apple pie", "blue sky", "cold rain"]):
    # ood answers are what the unmasked model says, so the ood score measures drift
    toks, _ = tinylm.generate_with_recording(model, None, tinylm.encode(p), one)
    ood.append(EvalItem(f"ood{i}", p, AnswerSet.of(tinylm.decode(toks))))

thresholds = [ThresholdSpec.layer_top_k(k) for k in (1, 5, 20)] + [ThresholdSpec.global_top_fraction(0.05)]
summary = run_masking_ablation(model, in_dist, ood, thresholds, seed=7, settings=one)
print(f"unmasked: in-dist {summary.baseline_in_dist:.2f}  ood {summary.baseline_ood:.2f}")
print("setting                   masked  key:in  key:ood  rand:in  rand:ood")
for r in summary.rows:
    print(f"{r.setting:25} {r.masked_count:6}  {r.in_dist:6.2f}  {r.ood:7.2f}  {r.random_in_dist:7.2f}  {r.random_ood:8.2f}")
print("suggested setting:", summary.suggested_setting)

# key-set size against score
cells = [(120, 81.0), (95, 70.2), (140, 88.5), (60, 52.0)]
entries = [(KeyNeuronSet(frozenset((j % 64, j // 64) for j in range(n)), 4, 64), s) for n, s in cells]
res = neuron_count_vs_score(entries)
print(f"\nkey-neuron count vs score: r = {res.r:.3f} over n = {res.n}")
