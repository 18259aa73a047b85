"""Training: cross-entropy, the attribution-supervision loss, and the
optimization loop.

The combined objective is ``classification + weight * correction`` where the
correction term is the negated attribution mass on annotated opinion words.
In ``second_order`` mode parameter gradients flow through the input-gradient
computation itself (the backward pass is differentiable); ``detached`` mode
freezes the input gradients and is kept as an ablation.

One loop owns the parameters exclusively; per-example contributions are
reduced in batch order, so runs are bit-reproducible under a fixed seed.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attribution import attribution_graph
from .data import Corpus, Example, subsample_annotations
from .model import (
    ModelConfig,
    Parameters,
    PARAMETER_NAMES,
    ForwardTrace,
    forward,
    init_params,
    label_index,
    nll_from_logits,
)

CORRECTION_MODES = ("second_order", "detached")


@dataclass(frozen=True)
class TrainConfig:
    gradient_weight: float = 0.01       # weight on the correction loss
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    correction_mode: str = "second_order"
    annotated_fraction: float = 1.0

    def validate(self) -> "TrainConfig":
        if self.gradient_weight < 0:
            raise ValueError("gradient_weight must be nonnegative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be at least 1")
        if self.correction_mode not in CORRECTION_MODES:
            raise ValueError(f"correction_mode must be one of {CORRECTION_MODES}")
        if not 0.0 <= self.annotated_fraction <= 1.0:
            raise ValueError("annotated_fraction must be in [0, 1]")
        return self

    def to_dict(self) -> dict:
        return {
            "gradient_weight": self.gradient_weight,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "correction_mode": self.correction_mode,
            "annotated_fraction": self.annotated_fraction,
        }


@dataclass
class LossBreakdown:
    """Batch-level loss components: total = classification + weight * correction."""

    classification: float
    correction: float
    total: float
    annotated: list[bool]


@dataclass
class EpochStats:
    epoch: int
    mean_classification_loss: float
    mean_correction_loss: float
    train_accuracy: float
    valid_accuracy: float
    valid_hit_rate: float


@dataclass
class TrainHistory:
    entries: list[EpochStats] = field(default_factory=list)

    CSV_COLUMNS = ("epoch", "mean_classification_loss", "mean_correction_loss",
                   "train_accuracy", "valid_accuracy", "valid_hit_rate")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.CSV_COLUMNS)
        for e in self.entries:
            writer.writerow([e.epoch, repr(e.mean_classification_loss),
                             repr(e.mean_correction_loss), repr(e.train_accuracy),
                             repr(e.valid_accuracy), repr(e.valid_hit_rate)])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# Loss builders
# ---------------------------------------------------------------------------


def classification_loss(trace: ForwardTrace, gold: str) -> ad.Node:
    """Negative log-probability of the gold label (stable log-softmax)."""
    return nll_from_logits(trace.logits, label_index(gold))


def correction_loss(saliency_map, opinion_mask: list[int]) -> ad.Node:
    """Negated attribution mass on opinion words: always in [-1, 0].

    The saliency map must have been built with a differentiable attribution
    vector (``create_graph`` / training modes).
    """
    alpha = getattr(saliency_map, "alpha_node", None)
    if alpha is None:
        alpha = saliency_map if isinstance(saliency_map, ad.Node) else None
    if alpha is None:
        raise ValueError("correction_loss needs a saliency map built with create_graph")
    n = alpha.value.shape[0]
    if len(opinion_mask) != n:
        raise ValueError(f"opinion mask has length {len(opinion_mask)}, expected {n}")
    mask = alpha.tape.constant(np.asarray(opinion_mask, dtype=np.float64))
    return ad.scale(ad.dot(alpha, mask), -1.0)


def total_loss(l_c: ad.Node, l_g: ad.Node | None, weight: float) -> ad.Node:
    """Combined objective ``l_c + weight * l_g``."""
    if weight < 0:
        raise ValueError("weight must be nonnegative")
    if l_g is None:
        return l_c
    return ad.add(l_c, ad.scale(l_g, weight))


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class AdamOptimizer:
    """Adaptive-moment optimizer over named parameter arrays.

    Updates are functional (new arrays), so values already recorded on a
    tape are never mutated.  No weight decay; a zero gradient leaves
    parameters exactly unchanged.
    """

    def __init__(self, learning_rate: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, arrays: dict[str, np.ndarray],
             grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.step_count += 1
        t = self.step_count
        out = {}
        for name, value in arrays.items():
            g = grads[name]
            m = self._m.get(name)
            v = self._v.get(name)
            if m is None:
                m = np.zeros_like(value)
                v = np.zeros_like(value)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            self._m[name] = m
            self._v[name] = v
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            out[name] = value - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)
        return out


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class _Encoded:
    ids: list[int]
    span: tuple[int, int]
    gold_index: int
    mask: list[int] | None
    annotated: bool


def _encode_examples(examples: list[Example], vocabulary: dict[str, int]) -> list[_Encoded]:
    from .data import encode_tokens

    out = []
    for ex in examples:
        out.append(_Encoded(
            ids=encode_tokens(ex.tokens, vocabulary),
            span=ex.aspect_span,
            gold_index=label_index(ex.polarity),
            mask=list(ex.opinion_mask) if ex.opinion_mask is not None else None,
            annotated=ex.annotated,
        ))
    return out


def example_losses(enc: _Encoded, params: Parameters, config: TrainConfig
                   ) -> tuple[ForwardTrace, ad.Node, ad.Node | None]:
    """Forward one example and build its loss nodes on a fresh tape."""
    trace = forward(enc.ids, enc.span, params, ad.Tape())
    l_c = nll_from_logits(trace.logits, enc.gold_index)
    l_g = None
    if enc.annotated and config.gradient_weight > 0:
        _, _, _, alpha_vec = attribution_graph(trace, enc.gold_index,
                                               mode=config.correction_mode)
        mask = trace.tape.constant(np.asarray(enc.mask, dtype=np.float64))
        l_g = ad.scale(ad.dot(alpha_vec, mask), -1.0)
    return trace, l_c, l_g


def _batch_step(batch: list[_Encoded], params: Parameters, optimizer: AdamOptimizer,
                config: TrainConfig) -> tuple[Parameters, LossBreakdown, int]:
    """One optimizer step.  The batch loss is the mean classification loss
    plus ``weight *`` the mean correction loss over annotated examples."""
    batch_size = len(batch)
    n_annotated = sum(1 for e in batch
                      if e.annotated and config.gradient_weight > 0)
    accum = {name: np.zeros_like(arr) for name, arr in params.arrays.items()}
    lc_total = 0.0
    lg_total = 0.0
    correct = 0
    annotated_flags = []

    for enc in batch:
        trace, l_c, l_g = example_losses(enc, params, config)
        objective = ad.scale(l_c, 1.0 / batch_size)
        if l_g is not None:
            objective = ad.add(objective,
                               ad.scale(l_g, config.gradient_weight / n_annotated))
            lg_total += float(l_g.value)
        annotated_flags.append(l_g is not None)
        lc_total += float(l_c.value)
        if int(np.argmax(trace.logits.value)) == enc.gold_index:
            correct += 1
        wrt = [trace.parameter_nodes[name] for name in PARAMETER_NAMES]
        for name, g in zip(PARAMETER_NAMES, ad.grad(objective, wrt)):
            accum[name] += g

    new_arrays = optimizer.step(params.arrays, accum)
    mean_lc = lc_total / batch_size
    mean_lg = lg_total / n_annotated if n_annotated else 0.0
    breakdown = LossBreakdown(
        classification=mean_lc,
        correction=mean_lg,
        total=mean_lc + config.gradient_weight * mean_lg,
        annotated=annotated_flags,
    )
    return Parameters(params.config, new_arrays), breakdown, correct


def _split_metrics(encoded: list[_Encoded], params: Parameters, top_k: int = 5
                   ) -> tuple[float, float]:
    """Accuracy and opinion-word hit rate at ``top_k`` for a split."""
    from .metrics import RankingPolicy, rank_tokens_from_arrays

    correct = 0
    hits = 0
    scored = 0
    policy = RankingPolicy(k=top_k)
    for enc in encoded:
        trace = forward(enc.ids, enc.span, params, ad.Tape())
        pred = int(np.argmax(trace.logits.value))
        if pred == enc.gold_index:
            correct += 1
        if enc.mask is None or sum(enc.mask) == 0:
            continue
        _, _, _, alpha = attribution_graph(trace, pred, mode="values")
        ranking = rank_tokens_from_arrays(alpha, enc.span, policy)
        gold = {i for i, v in enumerate(enc.mask) if v}
        gold &= set(ranking)
        if not gold:
            continue
        scored += 1
        if gold & set(ranking[:top_k]):
            hits += 1
    accuracy = correct / len(encoded) if encoded else 0.0
    hit_rate = hits / scored if scored else 0.0
    return accuracy, hit_rate


def train(corpus: Corpus, config: TrainConfig, model_config: ModelConfig
          ) -> tuple[Parameters, TrainHistory]:
    """Mini-batch training of the combined objective.

    Annotation masks are first subsampled to ``config.annotated_fraction``.
    Returns the parameters of the best validation-accuracy epoch along with
    the per-epoch history.  When the corpus has no ``valid`` split the train
    split doubles as validation (documented fallback).
    """
    config.validate()
    model_config.validate()
    train_split = corpus.splits.get("train")
    if not train_split:
        raise ValueError("corpus has no train split")
    if model_config.vocab_size != len(corpus.vocabulary):
        raise ValueError(
            f"model vocab_size {model_config.vocab_size} != corpus vocabulary "
            f"size {len(corpus.vocabulary)}")
    valid_split = corpus.splits.get("valid") or train_split

    if config.annotated_fraction < 1.0:
        train_split = subsample_annotations(train_split, config.annotated_fraction,
                                            config.seed)
    if config.gradient_weight > 0 and not any(ex.annotated for ex in train_split):
        warnings.warn("gradient_weight > 0 but no annotated examples; "
                      "training degenerates to the plain classifier",
                      stacklevel=2)

    encoded = _encode_examples(train_split, corpus.vocabulary)
    valid_encoded = _encode_examples(valid_split, corpus.vocabulary)

    params = init_params(model_config)
    optimizer = AdamOptimizer(config.learning_rate)
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    best_params = params.copy()
    best_accuracy = -1.0

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(encoded))
        lc_sum = 0.0
        lg_sum = 0.0
        lg_batches = 0
        correct = 0
        for start in range(0, len(order), config.batch_size):
            batch = [encoded[i] for i in order[start:start + config.batch_size]]
            params, breakdown, batch_correct = _batch_step(batch, params, optimizer, config)
            lc_sum += breakdown.classification * len(batch)
            if any(breakdown.annotated):
                lg_sum += breakdown.correction
                lg_batches += 1
            correct += batch_correct
        valid_accuracy, valid_hr = _split_metrics(valid_encoded, params)
        history.entries.append(EpochStats(
            epoch=epoch,
            mean_classification_loss=lc_sum / len(encoded),
            mean_correction_loss=lg_sum / lg_batches if lg_batches else 0.0,
            train_accuracy=correct / len(encoded),
            valid_accuracy=valid_accuracy,
            valid_hit_rate=valid_hr,
        ))
        if valid_accuracy > best_accuracy:
            best_accuracy = valid_accuracy
            best_params = params.copy()

    return best_params, history
