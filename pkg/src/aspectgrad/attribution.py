"""Word-level saliency from input gradients.

For one (sentence, aspect) pair the loss gradient at each token embedding is
turned into a score ``|g_i . x_i|`` and normalized into an attribution
distribution over tokens.  With ``create_graph`` the attribution values stay
on the tape, so a loss built from them can push gradients back into the
model parameters (through the gradient computation itself).

Everything here is read-only over parameters and safe to run in parallel
across examples.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import Example, encode_tokens
from .model import (
    ForwardTrace,
    Parameters,
    LABELS,
    forward,
    label_index,
    nll_from_logits,
)


@dataclass
class SaliencyMap:
    """Per-token gradients, scores and normalized attributions."""

    tokens: list[str]
    aspect_span: tuple[int, int]
    gradients: np.ndarray            # (n_tokens, embed_dim)
    gradient_norms: np.ndarray       # (n_tokens,)
    scores: np.ndarray               # (n_tokens,) = |g_i . x_i|
    alpha: np.ndarray                # (n_tokens,), nonnegative, sums to 1
    target_class: str                # label whose loss was differentiated
    predicted_label: str
    gold_label: str | None = None
    alpha_node: ad.Node | None = None    # set when built with create_graph
    loss_node: ad.Node | None = None
    trace: ForwardTrace | None = None

    def __len__(self):
        return len(self.tokens)


@dataclass(frozen=True)
class TaylorCheckConfig:
    """Perturbation study settings: radius, number of trials, seed."""

    epsilon: float = 1e-3
    trials: int = 100
    seed: int = 0

    def validate(self) -> "TaylorCheckConfig":
        # Radius 0 is allowed as the degenerate no-perturbation case.
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        return self


@dataclass
class TaylorReport:
    """Observed first-order residuals against the gradient-norm bound."""

    epsilon: float
    trials: int
    max_residual: float          # max |loss change - g . delta|
    gradient_bound: float        # epsilon * max ||g_i|| over probed tokens
    curvature_constant: float    # C with |d2 loss| <= C per unit ||delta||^2
    violations: int              # trials with |loss change| > eps*||g|| + C*eps^2


def _resolve_label(example: Example, params: Parameters, label: str | None,
                   trace: ForwardTrace) -> tuple[int, str]:
    predicted = LABELS[int(np.argmax(trace.logits.value))]
    if label is None:
        label = predicted
    return label_index(label), predicted


def input_gradients(example: Example, params: Parameters,
                    vocabulary: dict[str, int], label: str | None = None
                    ) -> list[np.ndarray]:
    """Loss gradient at each token embedding, aligned with token order.

    ``label`` defaults to the model's predicted label; pass the gold label
    to differentiate the training loss instead.
    """
    ids = encode_tokens(example.tokens, vocabulary)
    trace = forward(ids, example.aspect_span, params, ad.Tape())
    idx, _ = _resolve_label(example, params, label, trace)
    loss = nll_from_logits(trace.logits, idx)
    return ad.grad(loss, trace.input_embedding_nodes)


def attribution_graph(trace: ForwardTrace, class_index: int, mode: str = "second_order"):
    """Build loss, per-token scores and the attribution vector on the trace's tape.

    ``mode`` controls how the input gradients enter the graph:

    * ``second_order`` records them with ``create_graph``, so downstream
      losses differentiate through the gradient computation;
    * ``detached`` freezes them as constants (scores still depend on the
      embeddings);
    * ``values`` skips graph reuse entirely and is cheapest for reporting.

    Returns ``(loss_node, gradient_values, score_node_vector, alpha_vector)``
    where the last two are nodes except in ``values`` mode, which returns
    arrays.
    """
    if mode not in ("second_order", "detached", "values"):
        raise ValueError(f"unknown attribution mode {mode!r}")
    tape = trace.tape
    loss = nll_from_logits(trace.logits, class_index)
    create_graph = mode == "second_order"
    grads = ad.grad(loss, trace.input_embedding_nodes, create_graph=create_graph)

    if mode == "values":
        grad_values = grads
        xs_values = [x.value for x in trace.input_embedding_nodes]
        scores = np.array([abs(float(np.dot(g, x))) for g, x in zip(grad_values, xs_values)])
        total = scores.sum()
        if total == 0.0:
            alpha = np.full(len(scores), 1.0 / len(scores))
        else:
            alpha = scores / total
        return loss, grad_values, scores, alpha

    if mode == "detached":
        grad_values = grads
        grad_nodes = [tape.constant(g) for g in grads]
    else:
        grad_nodes = grads
        grad_values = [g.value for g in grads]

    score_nodes = [ad.absolute(ad.dot(g, x))
                   for g, x in zip(grad_nodes, trace.input_embedding_nodes)]
    score_vec = ad.concat(score_nodes)
    total = ad.reduce_sum(score_vec)
    if float(total.value) == 0.0:
        # All-zero scores: fall back to the uniform distribution (a constant,
        # so no gradient flows through the attribution in this case).
        alpha_vec = tape.constant(np.full(len(score_nodes), 1.0 / len(score_nodes)))
    else:
        alpha_vec = ad.div(score_vec, total)
    return loss, grad_values, score_vec, alpha_vec


def saliency(example: Example, params: Parameters, vocabulary: dict[str, int],
             label: str | None = None, create_graph: bool = False) -> SaliencyMap:
    """Full saliency map for one example.

    With ``create_graph`` the attribution vector is kept differentiable
    (``alpha_node``) for use inside a training objective.
    """
    ids = encode_tokens(example.tokens, vocabulary)
    trace = forward(ids, example.aspect_span, params, ad.Tape())
    idx, predicted = _resolve_label(example, params, label, trace)
    mode = "second_order" if create_graph else "values"
    loss, grad_values, score_obj, alpha_obj = attribution_graph(trace, idx, mode)

    if create_graph:
        scores = score_obj.value.copy()
        alpha = alpha_obj.value.copy()
    else:
        scores, alpha = score_obj, alpha_obj

    grads = np.stack(grad_values)
    return SaliencyMap(
        tokens=list(example.tokens),
        aspect_span=example.aspect_span,
        gradients=grads,
        gradient_norms=np.linalg.norm(grads, axis=1),
        scores=np.asarray(scores, dtype=np.float64),
        alpha=np.asarray(alpha, dtype=np.float64),
        target_class=LABELS[idx],
        predicted_label=predicted,
        gold_label=example.polarity,
        alpha_node=alpha_obj if create_graph else None,
        loss_node=loss if create_graph else None,
        trace=trace if create_graph else None,
    )


def taylor_check(example: Example, params: Parameters, vocabulary: dict[str, int],
                 config: TaylorCheckConfig = TaylorCheckConfig()) -> TaylorReport:
    """Probe how well the gradient predicts small loss changes.

    Each trial perturbs a single random token embedding by a vector of norm
    ``epsilon`` and compares the observed loss change against the first-order
    prediction ``g . delta`` and the bound ``epsilon * ||g||``.  The curvature
    constant is estimated from symmetric second differences; a violation is a
    loss change exceeding ``epsilon * ||g|| + C * epsilon**2``.
    """
    config.validate()
    ids = encode_tokens(example.tokens, vocabulary)
    gold_idx = label_index(example.polarity)

    base_trace = forward(ids, example.aspect_span, params, ad.Tape())
    base_loss_node = nll_from_logits(base_trace.logits, gold_idx)
    base_loss = float(base_loss_node.value)
    grads = ad.grad(base_loss_node, base_trace.input_embedding_nodes)

    def loss_with_override(pos: int, vec: np.ndarray) -> float:
        trace = forward(ids, example.aspect_span, params, ad.Tape(),
                        embedding_overrides={pos: vec})
        return float(nll_from_logits(trace.logits, gold_idx).value)

    rng = np.random.default_rng(config.seed)
    embed_dim = params.config.embed_dim
    max_residual = 0.0
    max_bound = 0.0
    curvature = 0.0
    eps = config.epsilon

    observations = []
    for _ in range(config.trials):
        pos = int(rng.integers(len(ids)))
        direction = rng.standard_normal(embed_dim)
        direction /= np.linalg.norm(direction)
        delta = eps * direction
        if eps == 0.0:
            observations.append((0.0, 0.0, float(np.linalg.norm(grads[pos]))))
            continue
        x0 = base_trace.input_embedding_nodes[pos].value
        up = loss_with_override(pos, x0 + delta) - base_loss
        down = loss_with_override(pos, x0 - delta) - base_loss
        predicted = float(np.dot(grads[pos], delta))
        g_norm = float(np.linalg.norm(grads[pos]))
        observations.append((up, predicted, g_norm))
        observations.append((down, -predicted, g_norm))
        max_residual = max(max_residual, abs(up - predicted), abs(down + predicted))
        max_bound = max(max_bound, eps * g_norm)
        curvature = max(curvature, abs(up + down) / (eps * eps))

    curvature_constant = 2.0 * curvature
    violations = 0
    for change, _, g_norm in observations:
        if abs(change) > eps * g_norm + curvature_constant * eps * eps + 1e-15:
            violations += 1
    return TaylorReport(
        epsilon=eps,
        trials=config.trials,
        max_residual=max_residual,
        gradient_bound=max_bound,
        curvature_constant=curvature_constant,
        violations=violations,
    )


def export_saliency_jsonl(maps: list[SaliencyMap], path) -> None:
    """One JSON record per example: tokens, alpha, score, gradient_norm,
    predicted label, gold label."""
    with open(path, "w", encoding="utf-8") as fh:
        for m in maps:
            fh.write(json.dumps({
                "tokens": m.tokens,
                "alpha": [float(a) for a in m.alpha],
                "score": [float(s) for s in m.scores],
                "gradient_norm": [float(g) for g in m.gradient_norms],
                "predicted_label": m.predicted_label,
                "gold_label": m.gold_label,
            }) + "\n")
