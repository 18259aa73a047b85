"""Corpus model: example records, file formats, synthetic generation and
robustness transforms.

An example is one (sentence, aspect) pair.  Sentences with several aspects
produce several examples that share a token list.  Opinion-word masks may be
present but hidden (``annotated=False``): hidden masks are used for metric
evaluation only and never reach the training loss.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

logger = logging.getLogger(__name__)

POLARITIES = ("POS", "NEG", "NEU")
POLARITY_TO_INDEX = {p: i for i, p in enumerate(POLARITIES)}

# Accepted spellings when reading external files.
_POLARITY_ALIASES = {
    "POS": "POS", "POSITIVE": "POS", "P": "POS", "1": "POS", "+1": "POS",
    "NEG": "NEG", "NEGATIVE": "NEG", "N": "NEG", "-1": "NEG",
    "NEU": "NEU", "NEUTRAL": "NEU", "O": "NEU", "0": "NEU",
}

UNKNOWN_TOKEN = "<unk>"


class DataError(ValueError):
    """Corpus-level failure (missing split, empty corpus, vocabulary mismatch)."""


class SchemaError(DataError):
    """A record violates the example schema; carries file position when known."""


def parse_polarity(text: str) -> str:
    label = _POLARITY_ALIASES.get(str(text).strip().upper())
    if label is None:
        raise SchemaError(f"unknown polarity value: {text!r}")
    return label


@dataclass
class Example:
    """One tokenized sentence with an aspect span and a polarity label.

    ``opinion_mask`` is a 0/1 list aligned with tokens marking the opinion
    words for this aspect; ``annotated`` says whether the mask may be used
    as supervision (a present-but-hidden mask is evaluation-only).
    """

    id: str
    tokens: list[str]
    aspect_span: tuple[int, int]
    polarity: str
    opinion_mask: list[int] | None = None
    annotated: bool = False

    def validate(self) -> "Example":
        start, end = self.aspect_span
        if not self.tokens:
            raise SchemaError(f"example {self.id}: empty token list")
        if not (0 <= start < end <= len(self.tokens)):
            raise SchemaError(
                f"example {self.id}: aspect span [{start}, {end}) invalid for "
                f"{len(self.tokens)} tokens")
        if self.polarity not in POLARITIES:
            raise SchemaError(f"example {self.id}: bad polarity {self.polarity!r}")
        if self.opinion_mask is not None:
            if len(self.opinion_mask) != len(self.tokens):
                raise SchemaError(f"example {self.id}: mask length != token count")
            if any(v not in (0, 1) for v in self.opinion_mask):
                raise SchemaError(f"example {self.id}: mask entries must be 0/1")
        if self.annotated:
            if self.opinion_mask is None:
                raise SchemaError(f"example {self.id}: annotated without a mask")
            if sum(self.opinion_mask) == 0:
                raise SchemaError(f"example {self.id}: annotated mask has no opinion words")
        return self

    @property
    def opinion_indices(self) -> list[int]:
        if self.opinion_mask is None:
            return []
        return [i for i, v in enumerate(self.opinion_mask) if v]

    @property
    def aspect_indices(self) -> set[int]:
        return set(range(self.aspect_span[0], self.aspect_span[1]))

    def to_dict(self) -> dict:
        record = {
            "id": self.id,
            "tokens": list(self.tokens),
            "aspect_span": list(self.aspect_span),
            "polarity": self.polarity,
            "annotated": self.annotated,
        }
        if self.opinion_mask is not None:
            record["opinion_indices"] = self.opinion_indices
        return record

    @classmethod
    def from_dict(cls, record: dict) -> "Example":
        try:
            tokens = [str(t) for t in record["tokens"]]
            span = tuple(int(v) for v in record["aspect_span"])
            polarity = parse_polarity(record["polarity"])
        except (KeyError, TypeError, ValueError) as err:
            raise SchemaError(f"bad example record: {err}") from err
        if len(span) != 2:
            raise SchemaError(f"bad aspect_span: {record.get('aspect_span')!r}")
        mask = None
        if record.get("opinion_indices") is not None:
            mask = [0] * len(tokens)
            for idx in record["opinion_indices"]:
                idx = int(idx)
                if not 0 <= idx < len(tokens):
                    raise SchemaError(f"opinion index {idx} out of range")
                mask[idx] = 1
        return cls(
            id=str(record.get("id", "")),
            tokens=tokens,
            aspect_span=(span[0], span[1]),
            polarity=polarity,
            opinion_mask=mask,
            annotated=bool(record.get("annotated", False)),
        ).validate()


@dataclass
class Corpus:
    """Named example splits plus the token vocabulary (unknown id reserved)."""

    splits: dict[str, list[Example]]
    vocabulary: dict[str, int]

    def encode(self, tokens: list[str]) -> list[int]:
        return encode_tokens(tokens, self.vocabulary)


def build_vocabulary(examples: list[Example]) -> dict[str, int]:
    """Token-to-id map over the given examples; id 0 is the unknown token."""
    vocab = {UNKNOWN_TOKEN: 0}
    for ex in examples:
        for tok in ex.tokens:
            if tok not in vocab:
                vocab[tok] = len(vocab)
    return vocab


def encode_tokens(tokens: list[str], vocabulary: dict[str, int]) -> list[int]:
    unk = vocabulary[UNKNOWN_TOKEN]
    return [vocabulary.get(tok, unk) for tok in tokens]


# ---------------------------------------------------------------------------
# JSONL split files
# ---------------------------------------------------------------------------


def save_jsonl(examples: list[Example], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_dict()) + "\n")


def load_jsonl(path) -> list[Example]:
    """Read one example per line; errors report the offending line number."""
    examples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as err:
                raise SchemaError(f"{path}:{lineno}: malformed JSON: {err}") from err
            try:
                examples.append(Example.from_dict(record))
            except SchemaError as err:
                raise SchemaError(f"{path}:{lineno}: {err}") from err
    return examples


def load_corpus_dir(data_dir, splits=("train", "valid", "test")) -> Corpus:
    """Load ``<split>.jsonl`` files and build the vocabulary from train."""
    from pathlib import Path

    loaded = {}
    for name in splits:
        path = Path(data_dir) / f"{name}.jsonl"
        if path.exists():
            loaded[name] = load_jsonl(path)
    if "train" not in loaded:
        raise DataError(f"no train.jsonl found under {data_dir}")
    return Corpus(splits=loaded, vocabulary=build_vocabulary(loaded["train"]))


# ---------------------------------------------------------------------------
# Target/opinion tagged TSV import
# ---------------------------------------------------------------------------


def import_towe(path) -> list[Example]:
    """Import tab-separated lines: sentence, target tags, opinion tags, polarity.

    Tag columns repeat the tokens with a ``\\B``/``\\I``/``\\O`` suffix.
    Rows with inconsistent token counts or invalid spans are skipped and
    reported via logging.
    """
    examples = []
    skipped = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                logger.warning("%s:%d: expected 4 tab-separated columns, got %d",
                               path, lineno, len(parts))
                skipped += 1
                continue
            sentence, target_col, opinion_col, polarity_col = parts
            tokens = [t.lower() for t in sentence.split()]
            try:
                target_tags = _parse_tags(target_col, len(tokens))
                opinion_tags = _parse_tags(opinion_col, len(tokens))
                polarity = parse_polarity(polarity_col)
                span = _tags_to_span(target_tags)
            except SchemaError as err:
                logger.warning("%s:%d: %s", path, lineno, err)
                skipped += 1
                continue
            opinion_indices = [i for i, t in enumerate(opinion_tags) if t in ("B", "I")]
            mask = None
            annotated = False
            if opinion_indices:
                mask = [1 if i in set(opinion_indices) else 0 for i in range(len(tokens))]
                annotated = True
            example = Example(
                id=f"towe-{lineno:05d}",
                tokens=tokens,
                aspect_span=span,
                polarity=polarity,
                opinion_mask=mask,
                annotated=annotated,
            )
            try:
                examples.append(example.validate())
            except SchemaError as err:
                logger.warning("%s:%d: %s", path, lineno, err)
                skipped += 1
    if skipped:
        logger.warning("%s: skipped %d malformed line(s)", path, skipped)
    return examples


def _parse_tags(column: str, expected: int) -> list[str]:
    tags = []
    items = column.split()
    if len(items) != expected:
        raise SchemaError(f"token count mismatch: {len(items)} tagged vs {expected} words")
    for item in items:
        word, sep, tag = item.rpartition("\\")
        if not sep or tag not in ("B", "I", "O"):
            raise SchemaError(f"bad tagged token {item!r}")
        tags.append(tag)
    return tags


def _tags_to_span(tags: list[str]) -> tuple[int, int]:
    marked = [i for i, t in enumerate(tags) if t in ("B", "I")]
    if not marked:
        raise SchemaError("no target tokens tagged")
    start, stop = marked[0], marked[-1] + 1
    if marked != list(range(start, stop)):
        raise SchemaError("target tags are not contiguous")
    return (start, stop)


# ---------------------------------------------------------------------------
# Annotation subsampling
# ---------------------------------------------------------------------------


def subsample_annotations(examples: list[Example], fraction: float, seed: int) -> list[Example]:
    """Keep a random ``ceil(fraction * n)`` of the mask-bearing examples annotated.

    The rest keep their masks hidden (``annotated=False``): available to
    metrics, never to the training loss.  One permutation drawn from the
    seed makes the kept sets nested across fractions.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    eligible = [i for i, ex in enumerate(examples)
                if ex.opinion_mask is not None and sum(ex.opinion_mask) > 0]
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(eligible))
    keep_count = math.ceil(fraction * len(eligible))
    kept = {eligible[order[j]] for j in range(keep_count)}
    eligible_set = set(eligible)
    out = []
    for i, ex in enumerate(examples):
        if i in kept:
            out.append(replace(ex, annotated=True))
        elif i in eligible_set:
            out.append(replace(ex, annotated=False))
        else:
            out.append(replace(ex))
    return out


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Lexicons:
    """Disjoint word lists the generator and the transforms draw from."""

    positive: tuple[str, ...]
    negative: tuple[str, ...]
    neutral: tuple[str, ...]
    aspects: tuple[str, ...]
    fillers: tuple[str, ...]

    def validate(self) -> "Lexicons":
        groups = {
            "positive": set(self.positive),
            "negative": set(self.negative),
            "neutral": set(self.neutral),
            "aspects": {tok for asp in self.aspects for tok in asp.split()},
            "fillers": set(self.fillers),
        }
        for name, words in groups.items():
            if not words:
                raise ValueError(f"lexicon {name!r} is empty")
        names = list(groups)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                overlap = groups[a] & groups[b]
                if overlap:
                    raise ValueError(f"lexicons {a!r} and {b!r} overlap: {sorted(overlap)}")
        for word in self.positive + self.negative + self.neutral:
            if " " in word:
                raise ValueError(f"opinion words must be single tokens: {word!r}")
        return self

    def opinions(self, polarity: str) -> tuple[str, ...]:
        return {"POS": self.positive, "NEG": self.negative, "NEU": self.neutral}[polarity]


DEFAULT_LEXICONS = Lexicons(
    positive=("good", "great", "excellent", "amazing", "wonderful", "fantastic",
              "tasty", "delicious", "friendly", "fast", "reliable", "comfortable",
              "sturdy", "superb", "lovely"),
    negative=("bad", "terrible", "awful", "horrible", "slow", "disappointing",
              "rude", "bland", "unreliable", "flimsy", "noisy", "overpriced",
              "buggy", "dreadful", "mediocre"),
    neutral=("okay", "average", "ordinary", "acceptable", "standard", "typical",
             "passable", "unremarkable"),
    aspects=("food", "service", "staff", "menu", "pizza", "pasta", "wine list",
             "price", "decor", "ambiance", "battery life", "screen", "keyboard",
             "laptop", "charger", "speakers", "trackpad", "warranty", "delivery",
             "portions", "operating system", "location"),
    fillers=("i", "we", "really", "quite", "honestly", "overall", "yesterday",
             "definitely", "somewhat", "visited", "thought", "found", "evening",
             "lunch", "dinner", "there", "again", "last", "week", "night"),
).validate()


@dataclass(frozen=True)
class SyntheticSpec:
    """Shape of a generated corpus: split sizes, aspect multiplicity, lexicons."""

    n_train: int = 2000
    n_valid: int = 500
    n_test: int = 500
    aspects_per_sentence: int = 2
    lexicons: Lexicons = field(default=DEFAULT_LEXICONS)
    distractor_prob: float = 0.5
    seed: int = 0

    def validate(self) -> "SyntheticSpec":
        if min(self.n_train, self.n_valid, self.n_test) < 1:
            raise ValueError("split sizes must be positive")
        if not 1 <= self.aspects_per_sentence <= 3:
            raise ValueError("aspects_per_sentence must be in 1..3")
        if not 0.0 <= self.distractor_prob <= 1.0:
            raise ValueError("distractor_prob must be in [0, 1]")
        self.lexicons.validate()
        if len(self.lexicons.aspects) < self.aspects_per_sentence:
            raise ValueError("aspect lexicon too small for requested multiplicity")
        return self


def _opposite_polarity(polarity: str, rng: np.random.Generator) -> str:
    if polarity == "POS":
        return "NEG"
    if polarity == "NEG":
        return "POS"
    return "POS" if rng.random() < 0.5 else "NEG"


def _make_clause(aspect: str, opinion: str, rng: np.random.Generator,
                 lex: Lexicons) -> tuple[list[str], int, tuple[int, int]]:
    """Tokens of one clause plus the opinion index and aspect span within it."""
    asp_tokens = aspect.split()
    form = rng.integers(3)
    if form == 0:
        tokens = ["the", *asp_tokens, "is", opinion]
    elif form == 1:
        tokens = ["the", *asp_tokens, "was", str(rng.choice(lex.fillers)), opinion]
    else:
        tokens = ["the", *asp_tokens, "seemed", opinion]
    span = (1, 1 + len(asp_tokens))
    return tokens, len(tokens) - 1, span


def _make_sentence(spec: SyntheticSpec, rng: np.random.Generator):
    """One sentence and, per aspect, its (span, polarity, opinion index)."""
    lex = spec.lexicons
    n_aspects = int(rng.integers(1, spec.aspects_per_sentence + 1))
    aspect_ids = rng.choice(len(lex.aspects), size=n_aspects, replace=False)
    base_polarity = POLARITIES[rng.integers(3)]
    records = []
    tokens = [str(rng.choice(lex.fillers)) for _ in range(int(rng.integers(2, 4)))]
    for j, aid in enumerate(aspect_ids):
        polarity = base_polarity
        if j > 0:
            if rng.random() < spec.distractor_prob:
                polarity = _opposite_polarity(base_polarity, rng)
            connector = "but" if polarity != base_polarity else "and"
            tokens.append(connector)
        opinion = str(rng.choice(lex.opinions(polarity)))
        clause, op_idx, span = _make_clause(lex.aspects[int(aid)], opinion, rng, lex)
        offset = len(tokens)
        tokens.extend(clause)
        records.append(((offset + span[0], offset + span[1]), polarity, offset + op_idx))
    tokens.extend(str(rng.choice(lex.fillers)) for _ in range(int(rng.integers(1, 4))))
    return tokens, records


def _generate_split(name: str, count: int, spec: SyntheticSpec,
                    rng: np.random.Generator) -> list[Example]:
    examples: list[Example] = []
    sentence_idx = 0
    while len(examples) < count:
        tokens, records = _make_sentence(spec, rng)
        for j, (span, polarity, op_idx) in enumerate(records):
            mask = [0] * len(tokens)
            mask[op_idx] = 1
            examples.append(Example(
                id=f"{name}-{sentence_idx:05d}-a{j}",
                tokens=tokens,
                aspect_span=span,
                polarity=polarity,
                opinion_mask=mask,
                annotated=True,
            ).validate())
        sentence_idx += 1
    return examples[:count]


def generate_synthetic(spec: SyntheticSpec, seed: int | None = None) -> Corpus:
    """Deterministic template corpus with ground-truth opinion-word masks."""
    spec.validate()
    base_seed = spec.seed if seed is None else seed
    splits = {}
    for idx, (name, count) in enumerate(
            [("train", spec.n_train), ("valid", spec.n_valid), ("test", spec.n_test)]):
        rng = np.random.default_rng([base_seed, idx])
        splits[name] = _generate_split(name, count, spec, rng)
    return Corpus(splits=splits, vocabulary=build_vocabulary(splits["train"]))


# ---------------------------------------------------------------------------
# Robustness transforms
# ---------------------------------------------------------------------------


def add_diff(example: Example, rng: np.random.Generator,
             lexicons: Lexicons = DEFAULT_LEXICONS) -> Example:
    """Append a clause about a fresh aspect with opposite sentiment.

    The target span, polarity and mask are unchanged (mask extended with
    zeros).  For a neutral target the appended opinion is drawn from the
    positive or negative lexicon at random.
    """
    opposite = _opposite_polarity(example.polarity, rng)
    pool = lexicons.opinions(opposite)
    if not pool:
        raise DataError("opposite-polarity lexicon is empty")
    present = set(example.tokens)
    candidates = [a for a in lexicons.aspects
                  if not set(a.split()) & present]
    if not candidates:
        raise DataError("no fresh aspect noun available for this sentence")
    aspect = candidates[int(rng.integers(len(candidates)))]
    opinion = str(pool[int(rng.integers(len(pool)))])
    appended = ["but", "the", *aspect.split(), "is", opinion]
    mask = None
    if example.opinion_mask is not None:
        mask = list(example.opinion_mask) + [0] * len(appended)
    return replace(
        example,
        id=f"{example.id}+adddiff",
        tokens=list(example.tokens) + appended,
        opinion_mask=mask,
    ).validate()


def rev_non(target: Example, group: list[Example], rng: np.random.Generator,
            lexicons: Lexicons = DEFAULT_LEXICONS) -> tuple[Example, bool]:
    """Flip opinion words of same-polarity non-target aspects in the sentence.

    ``group`` holds every example sharing the target's sentence (the target
    may be included).  Returns the transformed target example and a flag
    that is False when nothing changed (single-aspect sentence, or no
    non-target aspect shares the target's polarity).
    """
    tokens = list(target.tokens)
    changed = False
    for other in group:
        if other.id == target.id:
            continue
        if other.tokens != target.tokens:
            raise DataError("group member does not share the target's sentence")
        if other.polarity != target.polarity or not other.opinion_indices:
            continue
        opposite = _opposite_polarity(other.polarity, rng)
        pool = lexicons.opinions(opposite)
        for pos in other.opinion_indices:
            tokens[pos] = str(pool[int(rng.integers(len(pool)))])
            changed = True
    out = replace(target, id=f"{target.id}+revnon", tokens=tokens)
    return out.validate(), changed


def group_by_sentence(examples: list[Example]) -> dict[tuple[str, ...], list[Example]]:
    """Group examples that share one token sequence (one source sentence)."""
    groups: dict[tuple[str, ...], list[Example]] = {}
    for ex in examples:
        groups.setdefault(tuple(ex.tokens), []).append(ex)
    return groups
