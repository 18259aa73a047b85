"""Scikit-learn estimator facade.

``AspectSentimentClassifier`` wraps the training loop and the attribution
machinery behind the familiar fit/predict/predict_proba surface, so the
model drops into pipelines, cross-validation and grid search.  ``X`` is a
sequence of :class:`~aspectgrad.data.Example` records (or dicts in the
example schema); ``y`` is optional and overrides the examples' polarities.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .attribution import SaliencyMap, saliency
from .data import (
    Corpus,
    Example,
    POLARITIES,
    build_vocabulary,
    encode_tokens,
    parse_polarity,
)
from .metrics import EvalReport, RankingPolicy, evaluate
from .model import ModelConfig, forward, softmax_probabilities
from .training import TrainConfig, TrainHistory, train


def check_examples(X, y=None) -> list[Example]:
    """Validate and coerce input rows into Example records.

    Rows may be Example instances or dicts in the JSONL schema.  When ``y``
    is given it must align with ``X`` and replaces each example's polarity.
    """
    if y is not None and len(y) != len(X):
        raise ValueError(f"X has {len(X)} rows but y has {len(y)}")
    out = []
    for i, row in enumerate(X):
        if isinstance(row, Example):
            ex = row
        elif isinstance(row, dict):
            ex = Example.from_dict(row)
        else:
            raise TypeError(f"X[{i}] is {type(row).__name__}, expected Example or dict")
        if y is not None:
            ex = Example(id=ex.id, tokens=ex.tokens, aspect_span=ex.aspect_span,
                         polarity=parse_polarity(y[i]), opinion_mask=ex.opinion_mask,
                         annotated=ex.annotated)
        out.append(ex.validate())
    return out


class AspectSentimentClassifier(BaseEstimator, ClassifierMixin):
    """Aspect-level sentiment classifier trained with attribution supervision.

    Parameters mirror the model and training configs.  ``gradient_weight=0``
    disables the attribution loss and trains the plain classifier.
    """

    def __init__(self, embed_dim=32, hidden_dim=32, max_len=64,
                 gradient_weight=0.01, learning_rate=1e-3, batch_size=32,
                 epochs=20, annotated_fraction=1.0,
                 correction_mode="second_order", ranking_k=5, seed=0):
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.max_len = max_len
        self.gradient_weight = gradient_weight
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.annotated_fraction = annotated_fraction
        self.correction_mode = correction_mode
        self.ranking_k = ranking_k
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            gradient_weight=self.gradient_weight,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            correction_mode=self.correction_mode,
            annotated_fraction=self.annotated_fraction,
        ).validate()

    def fit(self, X, y=None, X_valid=None):
        """Train on example records; ``X_valid`` optionally supplies the
        validation split used for per-epoch metrics and checkpoint choice."""
        examples = check_examples(X, y)
        if not examples:
            raise ValueError("cannot fit on an empty dataset")
        splits = {"train": examples}
        if X_valid is not None:
            splits["valid"] = check_examples(X_valid)
        corpus = Corpus(splits=splits, vocabulary=build_vocabulary(examples))
        model_config = ModelConfig(
            vocab_size=len(corpus.vocabulary),
            embed_dim=self.embed_dim,
            hidden_dim=self.hidden_dim,
            max_len=self.max_len,
            init_seed=self.seed,
        ).validate()
        self.params_, self.history_ = train(corpus, self._train_config(), model_config)
        self.vocabulary_ = corpus.vocabulary
        self.classes_ = np.array(POLARITIES)
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        return np.array([POLARITIES[int(np.argmax(p))] for p in self._logit_rows(X)])

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        return np.stack([softmax_probabilities(row) for row in self._logit_rows(X)])

    def _logit_rows(self, X):
        for ex in check_examples(X):
            ids = encode_tokens(ex.tokens, self.vocabulary_)
            trace = forward(ids, ex.aspect_span, self.params_, ad.Tape())
            yield trace.logits.value

    def explain(self, X) -> list[SaliencyMap]:
        """Saliency map per example (attribution of the predicted label)."""
        check_is_fitted(self, "params_")
        return [saliency(ex, self.params_, self.vocabulary_)
                for ex in check_examples(X)]

    def evaluate(self, X) -> EvalReport:
        """Classification plus faithfulness metrics over example records."""
        check_is_fitted(self, "params_")
        return evaluate(self.params_, check_examples(X), self.vocabulary_,
                        RankingPolicy(k=self.ranking_k))

    def history(self) -> TrainHistory:
        check_is_fitted(self, "history_")
        return self.history_
