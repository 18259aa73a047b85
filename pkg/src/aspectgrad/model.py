"""A small aspect-conditioned attention classifier.

The sentence is embedded token by token; the aspect vector is the mean of
the aspect-token embeddings; additive attention against the aspect vector
weights the token embeddings into a context vector, which a linear head maps
to three polarity logits.  Every token embedding is registered as its own
graph node so input gradients can be requested per token.

Parameters are immutable during evaluation; concurrent forward passes on
shared parameters with distinct tapes are safe.
"""

from __future__ import annotations

import base64
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import POLARITIES, POLARITY_TO_INDEX

LABELS = POLARITIES

PARAMETER_NAMES = (
    "embedding",
    "context_proj",
    "aspect_proj",
    "attention_vector",
    "output_weight",
    "output_bias",
)

CHECKPOINT_FORMAT = "aspectgrad-checkpoint"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    """Invalid configuration or forward-pass input."""


class CheckpointError(ValueError):
    """A checkpoint file is unreadable or inconsistent with its config."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 32
    hidden_dim: int = 32
    num_classes: int = 3
    max_len: int = 64
    init_seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.vocab_size < 1:
            raise ModelError("vocab_size must be at least 1")
        if self.embed_dim < 1 or self.hidden_dim < 1:
            raise ModelError("embed_dim and hidden_dim must be at least 1")
        if self.num_classes != 3:
            raise ModelError("the classifier is fixed to 3 polarity classes")
        if self.max_len < 1:
            raise ModelError("max_len must be at least 1")
        return self

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "embed_dim": self.embed_dim,
            "hidden_dim": self.hidden_dim,
            "num_classes": self.num_classes,
            "max_len": self.max_len,
            "init_seed": self.init_seed,
        }

    @classmethod
    def from_dict(cls, record: dict) -> "ModelConfig":
        return cls(**{k: int(record[k]) for k in (
            "vocab_size", "embed_dim", "hidden_dim", "num_classes",
            "max_len", "init_seed")}).validate()


@dataclass
class Parameters:
    """Learnable weights: embedding table, attention projections, output head."""

    config: ModelConfig
    arrays: dict[str, np.ndarray] = field(repr=False)

    def copy(self) -> "Parameters":
        return Parameters(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in PARAMETER_NAMES])

    def replace_from_vector(self, vec: np.ndarray) -> "Parameters":
        arrays = {}
        offset = 0
        for k in PARAMETER_NAMES:
            size = self.arrays[k].size
            arrays[k] = vec[offset:offset + size].reshape(self.arrays[k].shape).copy()
            offset += size
        return Parameters(self.config, arrays)


def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, h, c = config.embed_dim, config.hidden_dim, config.num_classes
    return {
        "embedding": (config.vocab_size, d),
        "context_proj": (d, h),
        "aspect_proj": (d, h),
        "attention_vector": (h,),
        "output_weight": (d, c),
        "output_bias": (c,),
    }


def init_params(config: ModelConfig) -> Parameters:
    """Deterministic initialization: embeddings uniform in [-0.1, 0.1],
    projections scaled by 1/sqrt(fan_in), bias zero."""
    config.validate()
    rng = np.random.default_rng(config.init_seed)
    d, h = config.embed_dim, config.hidden_dim
    arrays = {
        "embedding": rng.uniform(-0.1, 0.1, size=(config.vocab_size, d)),
        "context_proj": rng.standard_normal((d, h)) / np.sqrt(d),
        "aspect_proj": rng.standard_normal((d, h)) / np.sqrt(d),
        "attention_vector": rng.standard_normal(h) / np.sqrt(h),
        "output_weight": rng.standard_normal((d, config.num_classes)) / np.sqrt(d),
        "output_bias": np.zeros(config.num_classes),
    }
    return Parameters(config, arrays)


@dataclass
class ForwardTrace:
    """Differentiable view of one forward pass."""

    logits: ad.Node
    input_embedding_nodes: list[ad.Node]
    attention_weights: np.ndarray
    parameter_nodes: dict[str, ad.Node]
    tape: ad.Tape
    tokens: list[int]
    aspect_span: tuple[int, int]


def forward(tokens: list[int], aspect_span: tuple[int, int], params: Parameters,
            tape: ad.Tape, embedding_overrides: dict[int, np.ndarray] | None = None
            ) -> ForwardTrace:
    """Run the classifier on one example, recording the graph on ``tape``.

    ``embedding_overrides`` substitutes the embedding of specific positions
    with a given vector (used by perturbation checks); overridden positions
    become leaf nodes detached from the embedding table.
    """
    config = params.config
    start, end = aspect_span
    if not 1 <= len(tokens) <= config.max_len:
        raise ModelError(f"sentence length {len(tokens)} outside 1..{config.max_len}")
    if not (0 <= start < end <= len(tokens)):
        raise ModelError(f"aspect span [{start}, {end}) invalid for {len(tokens)} tokens")
    for tid in tokens:
        if not 0 <= tid < config.vocab_size:
            raise ModelError(f"token id {tid} outside vocabulary of size {config.vocab_size}")

    pnodes = {name: tape.variable(params.arrays[name]) for name in PARAMETER_NAMES}

    xs = []
    for pos, tid in enumerate(tokens):
        if embedding_overrides is not None and pos in embedding_overrides:
            xs.append(tape.variable(embedding_overrides[pos]))
        else:
            xs.append(ad.gather(pnodes["embedding"], tid))

    aspect_vec = xs[start]
    for pos in range(start + 1, end):
        aspect_vec = ad.add(aspect_vec, xs[pos])
    if end - start > 1:
        aspect_vec = ad.scale(aspect_vec, 1.0 / (end - start))

    n, d = len(tokens), config.embed_dim
    stacked = ad.reshape(ad.concat(xs), (n, d))
    hidden = ad.tanh(ad.add(ad.matmul(stacked, pnodes["context_proj"]),
                            ad.matmul(aspect_vec, pnodes["aspect_proj"])))
    scores = ad.matmul(hidden, pnodes["attention_vector"])
    attention = ad.softmax(scores)
    context = ad.matmul(attention, stacked)
    logits = ad.add(ad.matmul(context, pnodes["output_weight"]), pnodes["output_bias"])

    return ForwardTrace(
        logits=logits,
        input_embedding_nodes=xs,
        attention_weights=attention.value.copy(),
        parameter_nodes=pnodes,
        tape=tape,
        tokens=list(tokens),
        aspect_span=(start, end),
    )


def softmax_probabilities(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def predict(tokens: list[int], aspect_span: tuple[int, int],
            params: Parameters) -> tuple[str, np.ndarray]:
    """Predicted label plus the probability vector.

    Ties break toward the lower class index (POS < NEG < NEU).
    """
    trace = forward(tokens, aspect_span, params, ad.Tape())
    logits = trace.logits.value
    probs = softmax_probabilities(logits)
    return LABELS[int(np.argmax(logits))], probs


def nll_from_logits(logits: ad.Node, class_index: int) -> ad.Node:
    """Numerically stable -log softmax(logits)[class_index] as a graph node.

    The max-shift is a detached constant; the value and every derivative of
    the expression are unchanged by it.
    """
    if not 0 <= class_index < logits.value.shape[0]:
        raise ModelError(f"class index {class_index} out of range")
    tape = logits.tape
    shift = tape.constant(float(logits.value.max()))
    log_sum = ad.add(ad.log(ad.reduce_sum(ad.exp(ad.sub(logits, shift)))), shift)
    onehot = np.zeros(logits.value.shape[0])
    onehot[class_index] = 1.0
    picked = ad.dot(logits, tape.constant(onehot))
    return ad.sub(log_sum, picked)


def label_index(label: str) -> int:
    try:
        return POLARITY_TO_INDEX[label]
    except KeyError:
        raise ModelError(f"unknown label {label!r}") from None


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: Parameters, path, vocabulary: dict[str, int] | None = None) -> None:
    """Versioned JSON checkpoint; float64 payloads are byte-exact (base64)."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "arrays": {
            name: {
                "shape": list(arr.shape),
                "data": base64.b64encode(
                    np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii"),
            }
            for name, arr in params.arrays.items()
        },
    }
    if vocabulary is not None:
        payload["vocabulary"] = vocabulary
    _atomic_write_text(path, json.dumps(payload))


def load_checkpoint(path) -> tuple[Parameters, dict[str, int] | None]:
    """Inverse of :func:`save_checkpoint`; validates format, version, shapes."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {payload.get('version')}")
    try:
        config = ModelConfig.from_dict(payload["config"])
    except (KeyError, TypeError, ValueError, ModelError) as err:
        raise CheckpointError(f"{path}: bad config: {err}") from err
    shapes = expected_shapes(config)
    arrays = {}
    for name, want in shapes.items():
        record = payload.get("arrays", {}).get(name)
        if record is None:
            raise CheckpointError(f"{path}: missing array {name!r}")
        try:
            raw = base64.b64decode(record["data"])
            arr = np.frombuffer(raw, dtype="<f8").reshape(record["shape"]).astype(
                np.float64, copy=True)
        except (KeyError, ValueError, TypeError) as err:
            raise CheckpointError(f"{path}: bad array {name!r}: {err}") from err
        if arr.shape != want:
            raise CheckpointError(
                f"{path}: array {name!r} has shape {arr.shape}, config implies {want}")
        arrays[name] = arr
    vocabulary = payload.get("vocabulary")
    if vocabulary is not None:
        vocabulary = {str(k): int(v) for k, v in vocabulary.items()}
        if len(vocabulary) != config.vocab_size:
            raise CheckpointError(
                f"{path}: vocabulary size {len(vocabulary)} != config vocab_size "
                f"{config.vocab_size}")
    return Parameters(config, arrays), vocabulary


def _atomic_write_text(path, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".json")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
