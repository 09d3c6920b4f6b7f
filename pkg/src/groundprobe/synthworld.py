"""Deterministic synthetic grounded dataset: feature vectors + templated captions.

A scene holds two attributed entities and one spatial relation. Its feature
vector is the sum of fixed random class vectors, one per (slot, class) pair,
plus Gaussian noise; its caption is rendered from one of two templates:

* long  (8 words): "a ADJ1 NOUN1 is PREP a ADJ2 NOUN2"  -> 9 tokens with END
* short (4 words): "a ADJ1 NOUN1 VERB"                  -> 5 tokens with END

The long template dominates, so the most common caption has 9 tokens
including END. The verb of the short template is indexed by the scene's
relation, so every content word is grounded in the feature vector. Word
classes are known by construction, so class-by-position tables need no
tagger.

Each adjective is independently dropped with a fixed probability ("a red
square ..." vs "a square ..."). Inclusion is a purely linguistic choice,
deliberately absent from the feature vector, so the syntactic continuation
at any point is carried by the previous word's class (after an adjective the
noun must follow; after a noun comes the verb phrase), not by the image.
Content-word identity stays image-determined.

Slot-aware class vectors (entity 1 and entity 2 draw from separate vector
tables) keep "which noun is first" linearly recoverable from the features.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .captioner import END_ID, START_ID, UNK_ID

__all__ = [
    "UNK_TOKEN",
    "START_TOKEN",
    "END_TOKEN",
    "WORD_CLASS_TAGS",
    "ConfigError",
    "DatasetError",
    "Grammar",
    "DEFAULT_GRAMMAR",
    "Scene",
    "GroundedExample",
    "Vocabulary",
    "build_vocabulary",
    "SynthConfig",
    "SynthDataset",
    "generate_dataset",
    "classes_for_tokens",
    "write_dataset",
    "read_dataset",
]

UNK_TOKEN = "<unk>"
START_TOKEN = "<s>"
END_TOKEN = "</s>"
_RESERVED = (UNK_TOKEN, START_TOKEN, END_TOKEN)

# Tag inventory for per-token word classes ("END" marks the end-of-caption
# token; "UNK" only appears when a token falls outside the grammar).
WORD_CLASS_TAGS = ("DET", "ADJ", "NOUN", "ADP", "VERB", "NUM", "CONJ",
                   "PRON", "PRT", "ADV", "END")


class ConfigError(ValueError):
    """Invalid dataset-generation configuration."""


class DatasetError(ValueError):
    """Unreadable or inconsistent dataset file."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message)


@dataclass(frozen=True)
class Grammar:
    """Closed word inventories plus the two caption templates."""

    nouns: tuple[str, ...] = ("square", "circle", "triangle", "star", "ring",
                              "cube", "arrow", "slab", "disc", "wedge")
    adjectives: tuple[str, ...] = ("red", "blue", "green", "yellow",
                                   "purple", "orange", "black", "white")
    prepositions: tuple[str, ...] = ("above", "below", "beside", "behind",
                                     "near", "inside")
    verbs: tuple[str, ...] = ("spins", "glows", "floats", "shines",
                              "drifts", "wobbles")  # indexed by relation id
    determiner: str = "a"
    copula: str = "is"

    def __post_init__(self):
        if len(self.verbs) < len(self.prepositions):
            raise ConfigError("grammar needs at least one verb per relation")
        words = [self.determiner, self.copula, *self.nouns, *self.adjectives,
                 *self.prepositions, *self.verbs]
        if len(set(words)) != len(words):
            raise ConfigError("grammar words must be distinct across inventories")

    def word_class(self, word: str) -> str | None:
        if word == self.determiner:
            return "DET"
        if word == self.copula or word in self.verbs:
            return "VERB"
        if word in self.nouns:
            return "NOUN"
        if word in self.adjectives:
            return "ADJ"
        if word in self.prepositions:
            return "ADP"
        return None

    def _entity(self, noun_id: int, adj_id: int, with_adj: bool):
        if with_adj:
            words = [self.determiner, self.adjectives[adj_id], self.nouns[noun_id]]
            return words, ["DET", "ADJ", "NOUN"]
        return [self.determiner, self.nouns[noun_id]], ["DET", "NOUN"]

    def long_caption(self, scene: "Scene", adj1: bool = True,
                     adj2: bool = True) -> tuple[list[str], list[str]]:
        w1, c1 = self._entity(scene.noun1, scene.adj1, adj1)
        w2, c2 = self._entity(scene.noun2, scene.adj2, adj2)
        words = [*w1, self.copula, self.prepositions[scene.prep], *w2]
        classes = [*c1, "VERB", "ADP", *c2]
        return words, classes

    def short_caption(self, scene: "Scene",
                      adj1: bool = True) -> tuple[list[str], list[str]]:
        w1, c1 = self._entity(scene.noun1, scene.adj1, adj1)
        return [*w1, self.verbs[scene.prep]], [*c1, "VERB"]


DEFAULT_GRAMMAR = Grammar()


@dataclass(frozen=True)
class Scene:
    """Two attributed entities plus one relation; ids index the grammar."""

    noun1: int
    adj1: int
    noun2: int
    adj2: int
    prep: int
    noise_seed: int

    def validate(self, grammar: Grammar):
        ok = (0 <= self.noun1 < len(grammar.nouns)
              and 0 <= self.noun2 < len(grammar.nouns)
              and 0 <= self.adj1 < len(grammar.adjectives)
              and 0 <= self.adj2 < len(grammar.adjectives)
              and 0 <= self.prep < len(grammar.prepositions))
        if not ok:
            raise ConfigError(f"scene {self} outside grammar inventories")


@dataclass
class GroundedExample:
    """One image-caption pair: features, token ids, per-token word classes.

    Tokens cover the caption body and the final END id; START is implicit and
    prepended by callers when replaying through a model. `word_classes`
    aligns 1:1 with `tokens` (last tag is "END").
    """

    id: int
    features: np.ndarray
    tokens: list[int]
    word_classes: list[str]

    def validate(self):
        if len(self.tokens) != len(self.word_classes):
            raise DatasetError(
                f"example {self.id}: {len(self.tokens)} tokens vs "
                f"{len(self.word_classes)} classes")
        if not self.tokens or self.tokens[-1] != END_ID:
            raise DatasetError(f"example {self.id}: tokens must end with END id {END_ID}")


class Vocabulary:
    """Token <-> id bijection with reserved ids 0=UNK, 1=START, 2=END."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:3]) != _RESERVED:
            raise ConfigError(f"vocabulary must start with reserved tokens {_RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise ConfigError("vocabulary tokens must be unique")
        self.id_to_token = tokens
        self.token_to_id = {tok: i for i, tok in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def encode_word(self, word: str) -> int:
        return self.token_to_id.get(word, UNK_ID)

    def encode(self, words: Iterable[str]) -> list[int]:
        return [self.encode_word(w) for w in words]

    def decode(self, token_id: int) -> str:
        return self.id_to_token[token_id]

    def to_file(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"tokens": self.id_to_token}, fh, indent=2)
            fh.write("\n")

    @classmethod
    def from_file(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        return cls(data["tokens"])


def build_vocabulary(captions: Iterable[Sequence[str]], min_count: int) -> Vocabulary:
    """Vocabulary of words occurring >= min_count times across `captions`.

    Ids are assigned by (count descending, word ascending) after the reserved
    entries, so the assignment is deterministic for a given corpus.
    """
    if min_count < 1:
        raise ConfigError(f"min_count must be >= 1, got {min_count}")
    counts = Counter()
    for words in captions:
        counts.update(words)
    kept = sorted((w for w, c in counts.items() if c >= min_count),
                  key=lambda w: (-counts[w], w))
    return Vocabulary([*_RESERVED, *kept])


@dataclass
class SynthConfig:
    """Dataset-generation knobs; everything downstream is derived from `seed`."""

    n_train: int
    n_val: int
    n_test: int
    D: int = 64
    noise_std: float = 1.0
    seed: int = 0
    min_count: int = 5
    short_fraction: float = 0.2

    def validate(self, grammar: Grammar = DEFAULT_GRAMMAR):
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigError("split sizes must all be >= 1")
        width = max(len(grammar.nouns), len(grammar.adjectives), len(grammar.prepositions))
        if self.D < width:
            raise ConfigError(f"D={self.D} below inventory-encoding width {width}")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if not 0.0 <= self.short_fraction <= 1.0:
            raise ConfigError("short_fraction must lie in [0, 1]")
        if self.min_count < 1:
            raise ConfigError("min_count must be >= 1")

    def to_dict(self) -> dict:
        return {
            "n_train": self.n_train, "n_val": self.n_val, "n_test": self.n_test,
            "D": self.D, "noise_std": self.noise_std, "seed": self.seed,
            "min_count": self.min_count, "short_fraction": self.short_fraction,
        }


@dataclass
class SynthDataset:
    train: list[GroundedExample]
    val: list[GroundedExample]
    test: list[GroundedExample]
    vocab: Vocabulary
    grammar: Grammar
    config: SynthConfig

    def split(self, name: str) -> list[GroundedExample]:
        try:
            return {"train": self.train, "val": self.val, "test": self.test}[name]
        except KeyError:
            raise ConfigError(f"unknown split {name!r}") from None


# Norm of each class vector. Sized so feature coordinates have CNN-like
# magnitudes (a few units) rather than the ~0.1 of unit vectors: with the
# models' fixed small weight init, unit-norm features would be compensated by
# large learned weights, inflating image gradients by the same factor and
# inverting the image-vs-previous-word sensitivity comparison.
CLASS_VECTOR_NORM = 16.0

# Probability that an entity mention carries its adjective.
ADJECTIVE_INCLUDE_PROB = 0.8


def _class_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    v = rng.standard_normal((n, d))
    return CLASS_VECTOR_NORM * v / np.linalg.norm(v, axis=1, keepdims=True)


class _ClassVectors:
    """Fixed random vector per (slot, class entry), derived from the seed."""

    def __init__(self, seed: int, grammar: Grammar, dim: int):
        rng = np.random.default_rng((seed, 101))
        self.noun1 = _class_rows(rng, len(grammar.nouns), dim)
        self.adj1 = _class_rows(rng, len(grammar.adjectives), dim)
        self.noun2 = _class_rows(rng, len(grammar.nouns), dim)
        self.adj2 = _class_rows(rng, len(grammar.adjectives), dim)
        self.prep = _class_rows(rng, len(grammar.prepositions), dim)

    def clean_features(self, scene: Scene) -> np.ndarray:
        return (self.noun1[scene.noun1] + self.adj1[scene.adj1]
                + self.noun2[scene.noun2] + self.adj2[scene.adj2]
                + self.prep[scene.prep])


def _sample_scene(rng: np.random.Generator, grammar: Grammar, scene_id: int) -> Scene:
    return Scene(
        noun1=int(rng.integers(len(grammar.nouns))),
        adj1=int(rng.integers(len(grammar.adjectives))),
        noun2=int(rng.integers(len(grammar.nouns))),
        adj2=int(rng.integers(len(grammar.adjectives))),
        prep=int(rng.integers(len(grammar.prepositions))),
        noise_seed=scene_id,
    )


def generate_dataset(config: SynthConfig, grammar: Grammar = DEFAULT_GRAMMAR) -> SynthDataset:
    """Generate disjoint train/val/test splits plus the training vocabulary.

    Per-example randomness streams are derived from (seed, example id), so
    regeneration with the same config is bit-identical and examples could be
    produced independently in any order.
    """
    config.validate(grammar)
    vectors = _ClassVectors(config.seed, grammar, config.D)
    total = config.n_train + config.n_val + config.n_test

    raw = []  # (id, features, words, classes)
    for ex_id in range(total):
        rng = np.random.default_rng((config.seed, 202, ex_id))
        scene = _sample_scene(rng, grammar, ex_id)
        short = rng.random() < config.short_fraction
        # adjective inclusion is a linguistic style flip, never encoded in
        # the features: the continuation after any prefix is signalled by the
        # previous word's class, not by the image
        adj1 = rng.random() < ADJECTIVE_INCLUDE_PROB
        adj2 = rng.random() < ADJECTIVE_INCLUDE_PROB
        words, classes = (grammar.short_caption(scene, adj1) if short
                          else grammar.long_caption(scene, adj1, adj2))
        noise = rng.normal(0.0, config.noise_std, config.D) if config.noise_std > 0 \
            else np.zeros(config.D)
        raw.append((ex_id, vectors.clean_features(scene) + noise, words, classes))

    vocab = build_vocabulary((words for _, _, words, _ in raw[:config.n_train]),
                             config.min_count)

    def finish(rows) -> list[GroundedExample]:
        out = []
        for ex_id, feats, words, classes in rows:
            ex = GroundedExample(
                id=ex_id,
                features=feats,
                tokens=[*vocab.encode(words), END_ID],
                word_classes=[*classes, "END"],
            )
            ex.validate()
            out.append(ex)
        return out

    n_tr, n_va = config.n_train, config.n_val
    return SynthDataset(
        train=finish(raw[:n_tr]),
        val=finish(raw[n_tr:n_tr + n_va]),
        test=finish(raw[n_tr + n_va:]),
        vocab=vocab,
        grammar=grammar,
        config=config,
    )


def classes_for_tokens(
    tokens: Sequence[int],
    vocab: Vocabulary,
    grammar: Grammar = DEFAULT_GRAMMAR,
) -> tuple[list[str], int]:
    """Map token ids to word classes via the grammar.

    Returns (classes, n_unknown); ids outside the grammar (including UNK and
    START) are tagged "UNK" and counted.
    """
    classes = []
    unknown = 0
    for tid in tokens:
        if tid == END_ID:
            classes.append("END")
            continue
        cls = None
        if 0 <= tid < len(vocab) and tid not in (UNK_ID, START_ID):
            cls = grammar.word_class(vocab.decode(tid))
        if cls is None:
            cls = "UNK"
            unknown += 1
        classes.append(cls)
    return classes, unknown


# --- JSON-lines serialization --------------------------------------------------
#
# One example per line: {"id": ..., "features": [...], "tokens": [...],
# "classes": [...]}. json renders floats with repr, so features round-trip
# exactly.


def write_dataset(path, examples: Iterable[GroundedExample]):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            row = {
                "id": int(ex.id),
                "features": [float(v) for v in ex.features],
                "tokens": [int(t) for t in ex.tokens],
                "classes": list(ex.word_classes),
            }
            fh.write(json.dumps(row, separators=(",", ":")))
            fh.write("\n")


def read_dataset(path) -> list[GroundedExample]:
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                ex = GroundedExample(
                    id=int(row["id"]),
                    features=np.asarray(row["features"], dtype=np.float64),
                    tokens=[int(t) for t in row["tokens"]],
                    word_classes=[str(c) for c in row["classes"]],
                )
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed example ({exc})",
                                   line=lineno) from exc
            if len(ex.tokens) != len(ex.word_classes):
                raise DatasetError(
                    f"{path}:{lineno}: {len(ex.tokens)} tokens vs "
                    f"{len(ex.word_classes)} classes", line=lineno)
            if ex.features.ndim != 1:
                raise DatasetError(f"{path}:{lineno}: features must be a flat vector",
                                   line=lineno)
            examples.append(ex)
    return examples
