"""A small, seeded decoder-only transformer with FFN recording and masking.

Each block is ``x += attn(x); a = act(W_up x); x += W_down (a * keep)``.
There is no layer norm and there are no biases, so every quantity is a plain
matrix expression that tests can recompute by hand.  The recorded neuron
value is ``a`` before masking; a masked neuron feeds 0 into ``W_down``.

The tokenizer is byte-level: ids 0..255 are bytes and 256 is the stop token.
"""

from __future__ import annotations

import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .tracefile import (
    WEIGHTS_MAGIC,
    ActivationTrace,
    TraceHeader,
    TraceParseError,
    TruncatedPayloadError,
    read_container_header,
    write_container,
)

DEFAULT_MEMORY_BUDGET = 1 << 24  # floats


class ModelError(Exception):
    pass


class ConfigError(ModelError, ValueError):
    pass


class CapacityError(ModelError):
    pass


class ContextLengthError(ModelError):
    pass


class ConstructionError(ModelError, ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 257
    d_model: int = 32
    ffn_width: int = 64
    num_layers: int = 2
    num_heads: int = 4
    max_seq_len: int = 256
    activation: str = "relu"
    seed: int = 0
    stop_token: int | None = None

    def __post_init__(self) -> None:
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2 (one id is reserved for the stop token)")
        for name in ("d_model", "ffn_width", "num_layers", "num_heads", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_model % self.num_heads:
            raise ConfigError("num_heads must divide d_model")
        if self.activation not in ("relu", "gelu"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 bits")
        if self.stop_token is not None and not 0 <= self.stop_token < self.vocab_size:
            raise ConfigError("stop_token out of vocabulary")

    @property
    def eos(self) -> int:
        return self.vocab_size - 1 if self.stop_token is None else self.stop_token

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads


@dataclass(frozen=True)
class LayerWeights:
    w_q: np.ndarray  # (d_model, d_model), applied as W @ x
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    w_up: np.ndarray  # (ffn_width, d_model)
    w_down: np.ndarray  # (d_model, ffn_width)


@dataclass(frozen=True)
class ModelWeights:
    config: ModelConfig
    embed: np.ndarray  # (vocab, d_model)
    pos: np.ndarray  # (max_seq_len, d_model)
    layers: tuple[LayerWeights, ...]
    unembed: np.ndarray  # (vocab, d_model)
    model_id: str = "tinylm"

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        out = [("embed", self.embed), ("pos", self.pos)]
        for i, lw in enumerate(self.layers):
            for name in ("w_q", "w_k", "w_v", "w_o", "w_up", "w_down"):
                out.append((f"layers.{i}.{name}", getattr(lw, name)))
        out.append(("unembed", self.unembed))
        return out

    def validate(self) -> None:
        c = self.config
        d, m = c.d_model, c.ffn_width
        shapes = {"embed": (c.vocab_size, d), "pos": (c.max_seq_len, d), "unembed": (c.vocab_size, d)}
        for i in range(c.num_layers):
            for name in ("w_q", "w_k", "w_v", "w_o"):
                shapes[f"layers.{i}.{name}"] = (d, d)
            shapes[f"layers.{i}.w_up"] = (m, d)
            shapes[f"layers.{i}.w_down"] = (d, m)
        got = dict(self.tensors())
        if set(got) != set(shapes):
            raise ConfigError("weight tensors do not match config layer count")
        for name, shape in shapes.items():
            if got[name].shape != shape:
                raise ConfigError(f"{name} has shape {got[name].shape}, expected {shape}")
            if not np.all(np.isfinite(got[name])):
                raise ConfigError(f"{name} contains non-finite values")


@dataclass(frozen=True)
class GenerationSettings:
    temperature: float = 0.0
    max_new_tokens: int = 1024
    stop_tokens: tuple[int, ...] = ()
    sample_seed: int = 0

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if self.max_new_tokens < 0:
            raise ConfigError("max_new_tokens must be >= 0")


@dataclass(frozen=True)
class MaskSpec:
    """Set of ``(neuron, layer)`` pairs whose FFN activation is zeroed."""

    masked: frozenset = field(default_factory=frozenset)

    @classmethod
    def of(cls, pairs: Iterable[tuple[int, int]]) -> "MaskSpec":
        return cls(frozenset((int(j), int(l)) for j, l in pairs))

    @classmethod
    def full(cls, config: ModelConfig) -> "MaskSpec":
        return cls.of((j, l) for l in range(config.num_layers) for j in range(config.ffn_width))

    def keep_matrix(self, config: ModelConfig) -> np.ndarray:
        keep = np.ones((config.num_layers, config.ffn_width))
        for j, l in self.masked:
            if not (0 <= j < config.ffn_width and 0 <= l < config.num_layers):
                raise ConfigError(f"masked neuron {(j, l)} out of range")
            keep[l, j] = 0.0
        return keep


# -- tokenizer ----------------------------------------------------------------


def encode(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def decode(tokens: Sequence[int]) -> str:
    return bytes(t for t in tokens if 0 <= t < 256).decode("utf-8", errors="replace")


# -- construction ---------------------------------------------------------------


def init_model(config: ModelConfig, memory_budget: int = DEFAULT_MEMORY_BUDGET, model_id: str = "tinylm") -> ModelWeights:
    """Draw weights from ``config.seed``; identical configs give identical weights."""
    total = (
        config.max_seq_len * config.d_model
        + 2 * config.vocab_size * config.d_model
        + config.num_layers * (4 * config.d_model**2 + 2 * config.d_model * config.ffn_width)
    )
    if config.max_seq_len * config.d_model > memory_budget or total > memory_budget:
        raise CapacityError(f"model needs {total} floats, budget is {memory_budget}")
    rng = np.random.default_rng(config.seed)
    d, m = config.d_model, config.ffn_width

    def mat(rows: int, cols: int, fan_in: int) -> np.ndarray:
        return (rng.standard_normal((rows, cols)) / math.sqrt(fan_in)).astype(np.float32)

    embed = rng.standard_normal((config.vocab_size, d)).astype(np.float32)
    pos = (0.1 * rng.standard_normal((config.max_seq_len, d))).astype(np.float32)
    layers = tuple(
        LayerWeights(
            w_q=mat(d, d, d), w_k=mat(d, d, d), w_v=mat(d, d, d), w_o=mat(d, d, d),
            w_up=mat(m, d, d), w_down=mat(d, m, m),
        )
        for _ in range(config.num_layers)
    )
    unembed = mat(config.vocab_size, d, d)
    return ModelWeights(config, embed, pos, layers, unembed, model_id=model_id)


def plant_gate_model(
    config: ModelConfig,
    trigger_token: int,
    gated_output: int,
    gate_neuron: tuple[int, int],
    allowed_outputs: Iterable[int] | None = None,
) -> ModelWeights:
    """Build a model in which one known neuron decides one known prediction.

    Reserved residual channels: 0 marks the trigger token, 1 carries the
    fraction of trigger tokens in the prefix (uniform attention in layer 0),
    2 receives the gate neuron's output, 3 is a constant 1.  The gate neuron
    reads channel 1 only; the other neurons read the free channels plus a
    positive offset, so their activations sit near 1 and the gate value is
    orders of magnitude larger when the trigger is present and negative when
    it is absent.  Only the gate neuron writes back into the residual, so
    masking any other neuron leaves every logit untouched.

    ``allowed_outputs`` restricts which tokens can ever win the argmax.
    """
    j_gate, l_gate = gate_neuron
    c = config
    if c.ffn_width < 2:
        raise ConstructionError("need ffn_width >= 2 to plant a gate")
    if c.d_model < 5:
        raise ConstructionError("need d_model >= 5 (4 reserved channels + 1 free)")
    if not (0 <= j_gate < c.ffn_width and 0 <= l_gate < c.num_layers):
        raise ConstructionError(f"gate neuron {gate_neuron} out of range")
    for tok in (trigger_token, gated_output):
        if not 0 <= tok < c.vocab_size:
            raise ConstructionError(f"token {tok} out of vocabulary")
    if trigger_token == gated_output:
        raise ConstructionError("trigger and gated output must differ")
    if gated_output == c.eos:
        raise ConstructionError("gated output cannot be the stop token")

    base = init_model(c, model_id="planted")
    d = c.d_model
    TRIG, CARRY, GATE, BIAS = 0, 1, 2, 3
    gain = 1000.0 * c.max_seq_len

    embed = base.embed.copy()
    embed[:, :4] = 0.0
    embed[:, BIAS] = 1.0
    embed[trigger_token, TRIG] = 1.0
    pos = base.pos.copy()
    pos[:, :4] = 0.0

    layers = []
    for li, lw in enumerate(base.layers):
        w_v = lw.w_v.copy()
        w_o = lw.w_o.copy()
        w_v[:, :4] = 0.0
        w_v[:4, :] = 0.0
        w_o[:, :4] = 0.0
        w_o[:4, :] = 0.0
        if li == 0:
            w_v[TRIG, TRIG] = 1.0
            w_o[CARRY, TRIG] = 1.0
        w_up = lw.w_up.copy()
        w_up[:, :4] = 0.0
        w_up[:, BIAS] = 1.0
        w_down = np.zeros_like(lw.w_down)
        if li == l_gate:
            w_up[j_gate, :] = 0.0
            w_up[j_gate, CARRY] = gain
            w_up[j_gate, BIAS] = -1.0
            w_down[GATE, j_gate] = 1.0
        zeros = np.zeros((d, d), dtype=np.float32)
        layers.append(LayerWeights(zeros, zeros.copy(), w_v, w_o, w_up, w_down))

    unembed = base.unembed.copy()
    unembed[:, :4] = 0.0
    unembed[gated_output, :] = 0.0
    unembed[gated_output, GATE] = 1.0
    unembed[gated_output, BIAS] = -100.0
    if allowed_outputs is not None:
        allowed = set(int(t) for t in allowed_outputs) | {gated_output}
        for tok in range(c.vocab_size):
            if tok not in allowed:
                unembed[tok, :] = 0.0
                unembed[tok, BIAS] = -1000.0
    return ModelWeights(c, embed, pos, tuple(layers), unembed, model_id="planted")


# -- forward passes ---------------------------------------------------------------


def _activation(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0.0)
    # tanh approximation of GELU
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def forward(weights: ModelWeights, tokens: Sequence[int], mask: MaskSpec | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Full-sequence forward pass.

    Returns ``(logits, activations)`` with shapes ``(T, vocab)`` and
    ``(T, layers, ffn_width)``; activations are pre-mask.
    """
    c = weights.config
    tokens = list(tokens)
    T = len(tokens)
    if T > c.max_seq_len:
        raise ContextLengthError(f"sequence of {T} tokens exceeds max_seq_len={c.max_seq_len}")
    keep = (mask or MaskSpec()).keep_matrix(c)
    H, dh = c.num_heads, c.head_dim
    x = weights.embed[tokens].astype(np.float64) + weights.pos[:T]
    acts = np.zeros((T, c.num_layers, c.ffn_width))
    causal = np.triu(np.full((T, T), -np.inf), k=1)
    for li, lw in enumerate(weights.layers):
        q = (x @ lw.w_q.T.astype(np.float64)).reshape(T, H, dh).transpose(1, 0, 2)
        k = (x @ lw.w_k.T.astype(np.float64)).reshape(T, H, dh).transpose(1, 0, 2)
        v = (x @ lw.w_v.T.astype(np.float64)).reshape(T, H, dh).transpose(1, 0, 2)
        att = _softmax(q @ k.transpose(0, 2, 1) / math.sqrt(dh) + causal)
        heads = (att @ v).transpose(1, 0, 2).reshape(T, c.d_model)
        x = x + heads @ lw.w_o.T.astype(np.float64)
        a = _activation(c.activation, x @ lw.w_up.T.astype(np.float64))
        acts[:, li, :] = a
        x = x + (a * keep[li]) @ lw.w_down.T.astype(np.float64)
    logits = x @ weights.unembed.T.astype(np.float64)
    return logits, acts


class _Decoder:
    """Incremental decoder owning its private KV cache."""

    def __init__(self, weights: ModelWeights, keep: np.ndarray):
        self.w = weights
        self.keep = keep
        c = weights.config
        self.layers64 = [
            tuple(getattr(lw, n).astype(np.float64) for n in ("w_q", "w_k", "w_v", "w_o", "w_up", "w_down"))
            for lw in weights.layers
        ]
        self.unembed = weights.unembed.astype(np.float64)
        self.k_cache = [np.zeros((c.num_heads, c.max_seq_len, c.head_dim)) for _ in weights.layers]
        self.v_cache = [np.zeros((c.num_heads, c.max_seq_len, c.head_dim)) for _ in weights.layers]
        self.t = 0

    def step(self, token: int) -> tuple[np.ndarray, np.ndarray]:
        c = self.w.config
        if self.t >= c.max_seq_len:
            raise ContextLengthError(f"context exceeds max_seq_len={c.max_seq_len}")
        H, dh = c.num_heads, c.head_dim
        x = self.w.embed[token].astype(np.float64) + self.w.pos[self.t]
        acts = np.zeros((c.num_layers, c.ffn_width))
        for li, (w_q, w_k, w_v, w_o, w_up, w_down) in enumerate(self.layers64):
            q = (w_q @ x).reshape(H, dh)
            self.k_cache[li][:, self.t] = (w_k @ x).reshape(H, dh)
            self.v_cache[li][:, self.t] = (w_v @ x).reshape(H, dh)
            ks = self.k_cache[li][:, : self.t + 1]
            vs = self.v_cache[li][:, : self.t + 1]
            att = _softmax(np.einsum("hd,htd->ht", q, ks) / math.sqrt(dh))
            heads = np.einsum("ht,htd->hd", att, vs).reshape(c.d_model)
            x = x + w_o @ heads
            a = _activation(c.activation, w_up @ x)
            acts[li] = a
            x = x + w_down @ (a * self.keep[li])
        self.t += 1
        return self.unembed @ x, acts


def _make_trace(weights: ModelWeights, rows: list[np.ndarray], question_id: str, language: str, culture: str) -> ActivationTrace:
    c = weights.config
    header = TraceHeader(
        model_id=weights.model_id,
        num_layers=c.num_layers,
        ffn_width=c.ffn_width,
        question_id=question_id,
        language=language,
        culture=culture,
        num_response_tokens=len(rows),
    )
    values = np.stack(rows).astype(np.float32) if rows else np.zeros((0, c.num_layers, c.ffn_width), np.float32)
    return ActivationTrace(header, values)


def generate_with_recording(
    weights: ModelWeights,
    mask: MaskSpec | None,
    prompt: Sequence[int],
    settings: GenerationSettings = GenerationSettings(),
    *,
    question_id: str = "q",
    language: str = "und",
    culture: str = "und",
) -> tuple[list[int], ActivationTrace]:
    """Decode a response and record FFN activations for each response token.

    The activations stored for response token ``r_i`` are those of the
    forward step whose logits produced ``r_i``.  A stop token ends decoding
    and is neither returned nor recorded.
    """
    c = weights.config
    prompt = list(prompt)
    if not prompt:
        raise ConfigError("prompt must contain at least one token")
    if len(prompt) + settings.max_new_tokens > c.max_seq_len:
        raise ContextLengthError(
            f"prompt ({len(prompt)}) + max_new_tokens ({settings.max_new_tokens}) exceeds max_seq_len={c.max_seq_len}"
        )
    stops = set(settings.stop_tokens) | {c.eos}
    dec = _Decoder(weights, (mask or MaskSpec()).keep_matrix(c))
    for tok in prompt[:-1]:
        dec.step(tok)
    rng = np.random.default_rng(settings.sample_seed) if settings.temperature > 0 else None
    response: list[int] = []
    rows: list[np.ndarray] = []
    last = prompt[-1]
    for _ in range(settings.max_new_tokens):
        logits, acts = dec.step(last)
        if rng is None:
            nxt = int(np.argmax(logits))
        else:
            nxt = int(rng.choice(len(logits), p=_softmax(logits / settings.temperature)))
        if nxt in stops:
            break
        response.append(nxt)
        rows.append(acts)
        last = nxt
    return response, _make_trace(weights, rows, question_id, language, culture)


def trace_forced_response(
    weights: ModelWeights,
    prompt: Sequence[int],
    response: Sequence[int],
    mask: MaskSpec | None = None,
    *,
    question_id: str = "q",
    language: str = "und",
    culture: str = "und",
) -> ActivationTrace:
    """Record activations along a given response instead of a free generation."""
    prompt, response = list(prompt), list(response)
    if not prompt:
        raise ConfigError("prompt must contain at least one token")
    seq = prompt + response[:-1] if response else prompt
    _, acts = forward(weights, seq, mask)
    start = len(prompt) - 1
    rows = [acts[start + i] for i in range(len(response))]
    return _make_trace(weights, rows, question_id, language, culture)


# -- checkpoints ------------------------------------------------------------------


def write_weights(weights: ModelWeights, sink: BinaryIO) -> int:
    weights.validate()
    tensors = weights.tensors()
    header = {
        "config": asdict(weights.config),
        "model_id": weights.model_id,
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
    }
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in tensors)
    return write_container(WEIGHTS_MAGIC, header, payload, sink)


def read_weights(source: BinaryIO) -> ModelWeights:
    doc = read_container_header(source, WEIGHTS_MAGIC)
    try:
        config = ModelConfig(**doc["config"])
        specs = doc["tensors"]
    except (KeyError, TypeError) as exc:
        raise TraceParseError(f"malformed checkpoint header: {exc}") from exc
    arrays = {}
    for spec in specs:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) * 4
        raw = source.read(n)
        if len(raw) != n:
            raise TruncatedPayloadError(f"truncated tensor {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
    layers = tuple(
        LayerWeights(*(arrays[f"layers.{i}.{n}"] for n in ("w_q", "w_k", "w_v", "w_o", "w_up", "w_down")))
        for i in range(config.num_layers)
    )
    w = ModelWeights(config, arrays["embed"], arrays["pos"], layers, arrays["unembed"], model_id=doc.get("model_id", "tinylm"))
    w.validate()
    return w


def save_weights(weights: ModelWeights, path: str | Path) -> None:
    buf = io.BytesIO()
    write_weights(weights, buf)
    Path(path).write_bytes(buf.getvalue())


def load_weights(path: str | Path) -> ModelWeights:
    with open(path, "rb") as fh:
        return read_weights(fh)
