"""Key-neuron extraction and specialized-neuron proportions.

A neuron is identified by ``(neuron, layer)``.  The default threshold pools
every value of a layer over all response tokens and neurons, takes the k-th
largest, and keeps each neuron that reaches it on some token.  Ties at the
threshold are kept, so a layer can contribute more than k neurons.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .tracefile import ActivationTrace


class ProbeError(Exception):
    pass


class DegenerateThresholdError(ProbeError, ValueError):
    pass


class DimensionMismatchError(ProbeError, ValueError):
    pass


class UndefinedProportionError(ProbeError):
    pass


class EmptyReportError(ProbeError):
    pass


class NeuronId(NamedTuple):
    neuron: int
    layer: int


@dataclass(frozen=True)
class ThresholdSpec:
    kind: str
    value: float

    KINDS = ("layer_top_k", "global_top_k", "global_top_fraction")

    def __post_init__(self) -> None:
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown threshold kind {self.kind!r}")
        if self.kind == "global_top_fraction":
            if not 0.0 < self.value <= 1.0:
                raise ValueError("fraction must lie in (0, 1]")
        elif int(self.value) != self.value or self.value < 1:
            raise ValueError(f"{self.kind} needs an integer >= 1")

    @classmethod
    def layer_top_k(cls, k: int = 5) -> "ThresholdSpec":
        return cls("layer_top_k", k)

    @classmethod
    def global_top_k(cls, k: int) -> "ThresholdSpec":
        return cls("global_top_k", k)

    @classmethod
    def global_top_fraction(cls, f: float) -> "ThresholdSpec":
        return cls("global_top_fraction", f)

    @classmethod
    def parse(cls, text: str) -> "ThresholdSpec":
        """Parse ``"layer_top_k:5"`` style strings."""
        kind, _, raw = text.partition(":")
        if not raw:
            raise ValueError(f"threshold {text!r} needs a parameter, e.g. layer_top_k:5")
        value = float(raw) if kind == "global_top_fraction" else int(raw)
        return cls(kind, value)

    @property
    def label(self) -> str:
        v = self.value if self.kind == "global_top_fraction" else int(self.value)
        return f"{self.kind}:{v}"


@dataclass(frozen=True)
class KeyNeuronSet:
    neurons: frozenset[NeuronId]
    num_layers: int
    ffn_width: int
    provenance: str = ""

    def __post_init__(self) -> None:
        ids = frozenset(NeuronId(int(j), int(l)) for j, l in self.neurons)
        for j, l in ids:
            if not (0 <= j < self.ffn_width and 0 <= l < self.num_layers):
                raise ProbeError(f"neuron {(j, l)} outside dims ({self.num_layers}, {self.ffn_width})")
        object.__setattr__(self, "neurons", ids)

    @property
    def dims(self) -> tuple[int, int]:
        return (self.num_layers, self.ffn_width)

    def __len__(self) -> int:
        return len(self.neurons)

    def __contains__(self, item: object) -> bool:
        return item in self.neurons

    def __iter__(self):
        return iter(self.sorted())

    def sorted(self) -> list[NeuronId]:
        return sorted(self.neurons, key=lambda n: (n.layer, n.neuron))

    def per_layer_counts(self) -> list[int]:
        counts = [0] * self.num_layers
        for n in self.neurons:
            counts[n.layer] += 1
        return counts


def _pooled_threshold(pool: np.ndarray, k: int) -> float:
    return float(np.partition(pool, pool.size - k)[pool.size - k])


def extract_key_neurons(trace: ActivationTrace, threshold: ThresholdSpec) -> KeyNeuronSet:
    """Key neurons of one response trace under ``threshold``."""
    L, dm, T = trace.num_layers, trace.ffn_width, trace.num_tokens
    prov = trace.header.question_id
    if T == 0:
        return KeyNeuronSet(frozenset(), L, dm, prov)
    v = trace.values
    keep = np.zeros((L, dm), dtype=bool)
    if threshold.kind == "layer_top_k":
        k = int(threshold.value)
        if k > dm * T:
            raise DegenerateThresholdError(f"k={k} exceeds the {dm * T} pooled values per layer")
        for layer in range(L):
            block = v[:, layer, :]
            keep[layer] = (block >= _pooled_threshold(block.ravel(), k)).any(axis=0)
    elif threshold.kind == "global_top_k":
        k = int(threshold.value)
        if k > L * dm * T:
            raise DegenerateThresholdError(f"K={k} exceeds the {L * dm * T} pooled values")
        keep = (v >= _pooled_threshold(v.ravel(), k)).any(axis=0)
    else:
        peaks = v.max(axis=0)
        n = max(1, math.ceil(threshold.value * peaks.size))
        keep = peaks >= _pooled_threshold(peaks.ravel(), n)
    layers, neurons = np.nonzero(keep)
    ids = frozenset(NeuronId(int(j), int(l)) for l, j in zip(layers, neurons))
    return KeyNeuronSet(ids, L, dm, prov)


def union_key_neurons(sets: Sequence[KeyNeuronSet], provenance: str = "") -> KeyNeuronSet:
    if not sets:
        raise ProbeError("cannot take the union of no sets (dims unknown)")
    dims = sets[0].dims
    for s in sets[1:]:
        if s.dims != dims:
            raise DimensionMismatchError(f"dims {s.dims} != {dims}")
    merged = frozenset().union(*(s.neurons for s in sets))
    return KeyNeuronSet(merged, dims[0], dims[1], provenance)


def specialized_proportion(base: KeyNeuronSet, target: KeyNeuronSet) -> float:
    """Share of ``target``'s neurons that are absent from ``base``.

    Directional: ``p(A, B) != p(B, A)`` in general.
    """
    if base.dims != target.dims:
        raise DimensionMismatchError(f"dims {base.dims} != {target.dims}")
    if not target.neurons:
        raise UndefinedProportionError(f"target set {target.provenance!r} is empty")
    return len(target.neurons - base.neurons) / len(target.neurons)


@dataclass
class SpecializationReport:
    culture: str
    language: str
    per_pair: list[tuple[str, float]]
    mean_proportion: float
    skipped: list[str] = field(default_factory=list)

    @property
    def pair_count(self) -> int:
        return len(self.per_pair)

    def to_dict(self) -> dict:
        return {
            "culture": self.culture,
            "language": self.language,
            "mean_proportion": self.mean_proportion,
            "pair_count": self.pair_count,
            "skipped": list(self.skipped),
            "skip_count": len(self.skipped),
            "per_pair": [{"pair_id": pid, "proportion": p} for pid, p in self.per_pair],
        }


def aggregate_proportions(
    pairs: Iterable[tuple],
    culture: str,
    language: str,
) -> SpecializationReport:
    """Average specialized proportion over question pairs.

    Items are ``(base, target)`` or ``(pair_id, base, target)``.  Pairs whose
    target set is empty are skipped and tallied, not averaged.
    """
    per_pair: list[tuple[str, float]] = []
    skipped: list[str] = []
    for i, item in enumerate(pairs):
        if len(item) == 3:
            pid, base, target = item
        else:
            base, target = item
            pid = target.provenance or str(i)
        try:
            per_pair.append((pid, specialized_proportion(base, target)))
        except UndefinedProportionError:
            skipped.append(pid)
    if not per_pair:
        raise EmptyReportError(f"no usable pairs for ({culture}, {language}); {len(skipped)} skipped")
    mean = math.fsum(p for _, p in per_pair) / len(per_pair)
    return SpecializationReport(culture, language, per_pair, mean, skipped)


def random_neuron_sample(dims: tuple[int, int], count: int, seed: int) -> KeyNeuronSet:
    """Uniform sample of ``count`` distinct neurons."""
    L, dm = dims
    if not 0 <= count <= L * dm:
        raise ProbeError(f"cannot sample {count} of {L * dm} neurons")
    rng = np.random.default_rng(seed)
    flat = rng.choice(L * dm, size=count, replace=False)
    ids = frozenset(NeuronId(int(f % dm), int(f // dm)) for f in flat)
    return KeyNeuronSet(ids, L, dm, f"random:{seed}")


# -- export ------------------------------------------------------------------------


def dumps_key_neurons(s: KeyNeuronSet) -> str:
    """``#dims<TAB>L<TAB>dm<TAB>provenance`` then one ``layer<TAB>neuron`` line per id."""
    lines = [f"#dims\t{s.num_layers}\t{s.ffn_width}\t{s.provenance}"]
    lines += [f"{n.layer}\t{n.neuron}" for n in s.sorted()]
    return "\n".join(lines) + "\n"


def loads_key_neurons(text: str) -> KeyNeuronSet:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#dims\t"):
        raise ProbeError("key-neuron file must start with a #dims header")
    parts = lines[0].split("\t")
    L, dm = int(parts[1]), int(parts[2])
    prov = parts[3] if len(parts) > 3 else ""
    ids = []
    for line in lines[1:]:
        if line.strip():
            layer, neuron = line.split("\t")
            ids.append(NeuronId(int(neuron), int(layer)))
    return KeyNeuronSet(frozenset(ids), L, dm, prov)


def save_key_neurons(s: KeyNeuronSet, path: str | Path) -> None:
    Path(path).write_text(dumps_key_neurons(s), encoding="utf-8")


def load_key_neurons(path: str | Path) -> KeyNeuronSet:
    return loads_key_neurons(Path(path).read_text(encoding="utf-8"))


def save_report(report: SpecializationReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
