"""Classification metrics and the faithfulness suite.

Faithfulness metrics rank tokens by attribution:

* MRR / hit rate score whether gold opinion words rank high;
* the deletion metric re-predicts after removing the top-ranked non-aspect
  tokens and averages the accuracy drop over 1..k deletions;
* post-hoc accuracy re-predicts keeping only the top-k non-aspect tokens
  plus the aspect.

All functions are pure over an immutable model and dataset; reports are
deterministic given (checkpoint, dataset, policy).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attribution import SaliencyMap, attribution_graph
from .data import Example, encode_tokens
from .model import LABELS, Parameters, forward

# Which deletion variant this module implements; recorded in every report so
# numbers are never silently compared across variants.
AOPC_VARIANT = "mean-accuracy-drop@1..k, token removal, aspect tokens kept"


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class RankingPolicy:
    """How tokens are ranked: aspect handling, cutoff, positional tie-break."""

    exclude_aspect_tokens: bool = True
    k: int = 5

    def validate(self) -> "RankingPolicy":
        if self.k < 1:
            raise MetricError("k must be at least 1")
        return self

    def to_dict(self) -> dict:
        return {"exclude_aspect_tokens": self.exclude_aspect_tokens, "k": self.k}


@dataclass
class EvalReport:
    accuracy: float
    macro_f1: float
    mrr: float
    hit_rate: float
    aopc: float
    post_hoc_accuracy: float
    n_examples: int
    n_ranking_scored: int
    n_ranking_skipped: int
    n_aopc_scored: int
    n_aopc_skipped: int
    policy: RankingPolicy
    aopc_variant: str = AOPC_VARIANT

    def validate(self) -> "EvalReport":
        if self.n_examples <= 0:
            raise MetricError("report needs at least one example")
        for name in ("accuracy", "macro_f1", "mrr", "hit_rate", "post_hoc_accuracy"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise MetricError(f"{name}={v} outside [0, 1]")
        if not -1.0 <= self.aopc <= 1.0:
            raise MetricError(f"aopc={self.aopc} outside [-1, 1]")
        return self

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "mrr": self.mrr,
            "hit_rate": self.hit_rate,
            "aopc": self.aopc,
            "post_hoc_accuracy": self.post_hoc_accuracy,
            "n_examples": self.n_examples,
            "n_ranking_scored": self.n_ranking_scored,
            "n_ranking_skipped": self.n_ranking_skipped,
            "n_aopc_scored": self.n_aopc_scored,
            "n_aopc_skipped": self.n_aopc_skipped,
            "policy": self.policy.to_dict(),
            "aopc_variant": self.aopc_variant,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self) -> str:
        rows = [
            ("accuracy", self.accuracy),
            ("macro_f1", self.macro_f1),
            ("mrr", self.mrr),
            (f"hit_rate@{self.policy.k}", self.hit_rate),
            (f"aopc@{self.policy.k}", self.aopc),
            (f"post_hoc_accuracy@{self.policy.k}", self.post_hoc_accuracy),
        ]
        width = max(len(name) for name, _ in rows)
        lines = [f"{name:<{width}}  {value:.4f}" for name, value in rows]
        lines.append(f"{'n_examples':<{width}}  {self.n_examples}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Classification metrics
# ---------------------------------------------------------------------------


def accuracy_and_macro_f1(predictions: list[str], golds: list[str]) -> tuple[float, float]:
    """Accuracy plus the unweighted mean of per-class F1 over the 3 classes.

    A class absent from both predictions and golds contributes F1 = 0.
    """
    if not predictions or len(predictions) != len(golds):
        raise MetricError("predictions and golds must be equal-length and non-empty")
    for label in list(predictions) + list(golds):
        if label not in LABELS:
            raise MetricError(f"unknown label {label!r}")
    correct = sum(1 for p, g in zip(predictions, golds) if p == g)
    f1s = []
    for label in LABELS:
        tp = sum(1 for p, g in zip(predictions, golds) if p == label and g == label)
        fp = sum(1 for p, g in zip(predictions, golds) if p == label and g != label)
        fn = sum(1 for p, g in zip(predictions, golds) if p != label and g == label)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * precision * recall / (precision + recall) if precision + recall else 0.0)
    return correct / len(golds), sum(f1s) / len(f1s)


# ---------------------------------------------------------------------------
# Rankings
# ---------------------------------------------------------------------------


def rank_tokens_from_arrays(alpha: np.ndarray, aspect_span: tuple[int, int],
                            policy: RankingPolicy) -> list[int]:
    """Token indices by descending attribution; ties go to earlier positions."""
    indices = list(range(len(alpha)))
    if policy.exclude_aspect_tokens:
        start, end = aspect_span
        indices = [i for i in indices if not start <= i < end]
    # Stable sort on the negated value keeps earlier positions first on ties.
    order = np.argsort([-alpha[i] for i in indices], kind="stable")
    return [indices[j] for j in order]


def rank_tokens(saliency_map: SaliencyMap, policy: RankingPolicy) -> list[int]:
    policy.validate()
    return rank_tokens_from_arrays(saliency_map.alpha, saliency_map.aspect_span, policy)


def mrr(rankings: list[list[int]], gold_opinion_indices: list[list[int]]) -> float:
    """Mean over scorable examples of 1 / best gold rank (1-based).

    Examples whose gold indices all fell to the policy filter are skipped.
    """
    total, scored = _reciprocal_ranks(rankings, gold_opinion_indices)
    if scored == 0:
        raise MetricError("no scorable examples for MRR")
    return total / scored


def hit_rate(rankings: list[list[int]], gold_opinion_indices: list[list[int]],
             k: int) -> float:
    """Fraction of scorable examples with a gold opinion token in the top k."""
    if k < 1:
        raise MetricError("k must be at least 1")
    hits = 0
    scored = 0
    for ranking, gold in zip(rankings, gold_opinion_indices):
        surviving = set(gold) & set(ranking)
        if not surviving:
            continue
        scored += 1
        if surviving & set(ranking[:k]):
            hits += 1
    if scored == 0:
        raise MetricError("no scorable examples for hit rate")
    return hits / scored


def _reciprocal_ranks(rankings, gold_opinion_indices) -> tuple[float, int]:
    total = 0.0
    scored = 0
    for ranking, gold in zip(rankings, gold_opinion_indices):
        positions = [ranking.index(g) + 1 for g in gold if g in ranking]
        if not positions:
            continue
        scored += 1
        total += 1.0 / min(positions)
    return total, scored


# ---------------------------------------------------------------------------
# Deletion-based metrics
# ---------------------------------------------------------------------------


def _predict_index(ids: list[int], span: tuple[int, int], params: Parameters) -> int:
    trace = forward(ids, span, params, ad.Tape())
    return int(np.argmax(trace.logits.value))


def _saliency_arrays(ids, span, params) -> tuple[int, np.ndarray]:
    """Predicted class index and attribution over tokens (one forward pass)."""
    trace = forward(ids, span, params, ad.Tape())
    pred = int(np.argmax(trace.logits.value))
    _, _, _, alpha = attribution_graph(trace, pred, mode="values")
    return pred, alpha


def delete_tokens(ids: list[int], span: tuple[int, int],
                  positions: set[int]) -> tuple[list[int], tuple[int, int]]:
    """Remove positions from the sequence, remapping the aspect span."""
    start, end = span
    if any(start <= p < end for p in positions):
        raise MetricError("aspect tokens are never deleted")
    kept = [i for i in range(len(ids)) if i not in positions]
    new_ids = [ids[i] for i in kept]
    new_start = sum(1 for i in kept if i < start)
    return new_ids, (new_start, new_start + (end - start))


def aopc(params: Parameters, examples: list[Example], vocabulary: dict[str, int],
         k: int = 5, policy: RankingPolicy | None = None) -> float:
    """Mean accuracy drop over deleting the 1..k top-attributed context tokens.

    Attribution is computed once per example on the full input.  Examples
    whose non-aspect context would be emptied within k deletions are skipped
    (and counted in :func:`evaluate`'s report).
    """
    value, _, _ = _aopc_detail(params, examples, vocabulary, k,
                               policy or RankingPolicy(k=k))
    return value


def _aopc_detail(params, examples, vocabulary, k, policy):
    if k < 1:
        raise MetricError("k must be at least 1")
    deletion_policy = RankingPolicy(exclude_aspect_tokens=True, k=k)
    scored = []
    skipped = 0
    for ex in examples:
        ids = encode_tokens(ex.tokens, vocabulary)
        start, end = ex.aspect_span
        if len(ids) - (end - start) <= k:
            skipped += 1
            continue
        pred, alpha = _saliency_arrays(ids, ex.aspect_span, params)
        order = rank_tokens_from_arrays(alpha, ex.aspect_span, deletion_policy)
        scored.append((ids, ex.aspect_span, ex.polarity, pred, order))
    if not scored:
        return 0.0, 0, skipped

    gold_indices = [LABELS.index(pol) for _, _, pol, _, _ in scored]
    full_correct = [int(pred == gi) for (_, _, _, pred, _), gi in zip(scored, gold_indices)]
    acc_full = sum(full_correct) / len(scored)

    drops = []
    for m in range(1, k + 1):
        correct_m = 0
        for (ids, span, _, _, order), gi in zip(scored, gold_indices):
            new_ids, new_span = delete_tokens(ids, span, set(order[:m]))
            if _predict_index(new_ids, new_span, params) == gi:
                correct_m += 1
        drops.append(acc_full - correct_m / len(scored))
    return sum(drops) / k, len(scored), skipped


def post_hoc_accuracy(params: Parameters, examples: list[Example],
                      vocabulary: dict[str, int], k: int = 5,
                      policy: RankingPolicy | None = None) -> float:
    """Accuracy when only the k most-attributed context tokens (plus the
    aspect) are kept, in original order."""
    value, _ = _post_hoc_detail(params, examples, vocabulary, k)
    return value


def _post_hoc_detail(params, examples, vocabulary, k):
    if k < 1:
        raise MetricError("k must be at least 1")
    deletion_policy = RankingPolicy(exclude_aspect_tokens=True, k=k)
    correct = 0
    for ex in examples:
        ids = encode_tokens(ex.tokens, vocabulary)
        _, alpha = _saliency_arrays(ids, ex.aspect_span, params)
        order = rank_tokens_from_arrays(alpha, ex.aspect_span, deletion_policy)
        drop = set(order[k:])
        new_ids, new_span = delete_tokens(ids, ex.aspect_span, drop)
        if _predict_index(new_ids, new_span, params) == LABELS.index(ex.polarity):
            correct += 1
    return (correct / len(examples) if examples else 0.0), len(examples)


# ---------------------------------------------------------------------------
# Full evaluation
# ---------------------------------------------------------------------------


def evaluate(params: Parameters, examples: list[Example], vocabulary: dict[str, int],
             policy: RankingPolicy = RankingPolicy()) -> EvalReport:
    """All six metrics over a split.

    Attribution targets the predicted label (explanation of the model's own
    decision); gold labels only enter accuracy-style comparisons.
    """
    policy.validate()
    if not examples:
        raise MetricError("cannot evaluate an empty split")

    predictions = []
    golds = []
    rankings = []
    gold_indices = []
    for ex in examples:
        ids = encode_tokens(ex.tokens, vocabulary)
        pred, alpha = _saliency_arrays(ids, ex.aspect_span, params)
        predictions.append(LABELS[pred])
        golds.append(ex.polarity)
        if ex.opinion_mask is not None and ex.opinion_indices:
            rankings.append(rank_tokens_from_arrays(alpha, ex.aspect_span, policy))
            gold_indices.append(ex.opinion_indices)

    accuracy, macro_f1 = accuracy_and_macro_f1(predictions, golds)

    if rankings:
        total, scored = _reciprocal_ranks(rankings, gold_indices)
        mrr_value = total / scored if scored else 0.0
        skipped = len(rankings) - scored
        hr_value = hit_rate(rankings, gold_indices, policy.k) if scored else 0.0
    else:
        mrr_value, hr_value, scored, skipped = 0.0, 0.0, 0, 0

    aopc_value, aopc_scored, aopc_skipped = _aopc_detail(
        params, examples, vocabulary, policy.k, policy)
    ph_value, _ = _post_hoc_detail(params, examples, vocabulary, policy.k)

    return EvalReport(
        accuracy=accuracy,
        macro_f1=macro_f1,
        mrr=mrr_value,
        hit_rate=hr_value,
        aopc=aopc_value,
        post_hoc_accuracy=ph_value,
        n_examples=len(examples),
        n_ranking_scored=scored,
        n_ranking_skipped=skipped,
        n_aopc_scored=aopc_scored,
        n_aopc_skipped=aopc_skipped,
        policy=policy,
    ).validate()


def write_details_jsonl(params: Parameters, examples: list[Example],
                        vocabulary: dict[str, int], policy: RankingPolicy,
                        path) -> None:
    """Per-example dump: ranking, gold hits, deletion outcome."""
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            ids = encode_tokens(ex.tokens, vocabulary)
            pred, alpha = _saliency_arrays(ids, ex.aspect_span, params)
            ranking = rank_tokens_from_arrays(alpha, ex.aspect_span, policy)
            gold = ex.opinion_indices
            order = rank_tokens_from_arrays(
                alpha, ex.aspect_span, RankingPolicy(exclude_aspect_tokens=True, k=policy.k))
            drop = set(order[:policy.k]) if len(order) > policy.k else set()
            record = {
                "id": ex.id,
                "predicted": LABELS[pred],
                "gold": ex.polarity,
                "ranking": ranking,
                "gold_opinion_indices": gold,
                "hit_at_k": bool(set(gold) & set(ranking[:policy.k])) if gold else None,
            }
            if drop:
                new_ids, new_span = delete_tokens(ids, ex.aspect_span, drop)
                record["prediction_after_deletion"] = LABELS[
                    _predict_index(new_ids, new_span, params)]
            fh.write(json.dumps(record) + "\n")
