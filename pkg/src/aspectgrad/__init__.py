"""Aspect-level sentiment classification with gradient-supervised saliency.

The package trains a small aspect-attention classifier whose input-gradient
attributions are pushed toward annotated opinion words, and evaluates both
the classifier and the faithfulness of its explanations.
"""

from .autodiff import Tape, Tensor, check_gradient, grad, tensor
from .data import (
    Corpus,
    Example,
    Lexicons,
    POLARITIES,
    SyntheticSpec,
    add_diff,
    build_vocabulary,
    generate_synthetic,
    group_by_sentence,
    import_towe,
    load_jsonl,
    rev_non,
    save_jsonl,
    subsample_annotations,
)
from .model import (
    ModelConfig,
    Parameters,
    forward,
    init_params,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from .attribution import (
    SaliencyMap,
    TaylorCheckConfig,
    TaylorReport,
    input_gradients,
    saliency,
    taylor_check,
)
from .training import (
    AdamOptimizer,
    TrainConfig,
    TrainHistory,
    classification_loss,
    correction_loss,
    total_loss,
    train,
)
from .metrics import (
    EvalReport,
    RankingPolicy,
    accuracy_and_macro_f1,
    aopc,
    evaluate,
    hit_rate,
    mrr,
    post_hoc_accuracy,
    rank_tokens,
)
from .estimator import AspectSentimentClassifier

__version__ = "0.1.0"

__all__ = [
    "Tape", "Tensor", "tensor", "grad", "check_gradient",
    "Corpus", "Example", "Lexicons", "POLARITIES", "SyntheticSpec",
    "add_diff", "build_vocabulary", "generate_synthetic", "group_by_sentence",
    "import_towe", "load_jsonl", "rev_non", "save_jsonl", "subsample_annotations",
    "ModelConfig", "Parameters", "forward", "init_params", "predict",
    "save_checkpoint", "load_checkpoint",
    "SaliencyMap", "TaylorCheckConfig", "TaylorReport",
    "input_gradients", "saliency", "taylor_check",
    "AdamOptimizer", "TrainConfig", "TrainHistory",
    "classification_loss", "correction_loss", "total_loss", "train",
    "EvalReport", "RankingPolicy", "accuracy_and_macro_f1", "aopc",
    "evaluate", "hit_rate", "mrr", "post_hoc_accuracy", "rank_tokens",
    "AspectSentimentClassifier",
    "__version__",
]
