"""
A transformer with one known neuron
===================================

Build a tiny decoder whose neuron (11, layer 1) fires only when the prompt
contains '#', and whose output is '7' exactly when that neuron is live.
Then check that key-neuron extraction finds it and that masking it
removes the behaviour.
"""

from dualprobe import tinylm
from dualprobe.probe import ThresholdSpec, extract_key_neurons

cfg = tinylm.ModelConfig(vocab_size=257, d_model=32, ffn_width=256, num_layers=2, num_heads=4, max_seq_len=64, seed=5)
letters = tinylm.encode("abcdefghijklmnopqrstuvwxyz")
model = tinylm.plant_gate_model(cfg, trigger_token=ord("#"), gated_output=ord("7"),
                                gate_neuron=(11, 1), allowed_outputs=letters)
greedy = tinylm.GenerationSettings(max_new_tokens=4)


def ask(prompt, mask=None):
    tokens, trace = tinylm.generate_with_recording(model, mask, tinylm.encode(prompt), greedy, question_id=prompt)
    return tinylm.decode(tokens), trace


for prompt in ["what is #", "what is it"]:
    text, trace = ask(prompt)
    layer1 = trace.values[0, 1]
    print(f"{prompt!r:14} -> {text!r:8} gate={layer1[11]:9.2f}  layer-1 median={float(sorted(layer1)[len(layer1) // 2]):.2f}")

# key neurons of the triggered response
_, trace = ask("what is #")
keys = extract_key_neurons(trace, ThresholdSpec.layer_top_k(1))
print("key neurons (neuron, layer):", keys.sorted())

# knock out the gate only
text, _ = ask("what is #", tinylm.MaskSpec.of([(11, 1)]))
print("with the gate masked:", repr(text))

# any other single neuron is inert
text, _ = ask("what is #", tinylm.MaskSpec.of([(12, 1)]))
print("with neuron 12 masked:", repr(text))
