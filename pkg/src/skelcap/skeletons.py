"""Distant-supervision skeleton labeling.

Captions are annotated with POS/lemma information (gold tags when the record
carries them, otherwise a bundled lexicon, otherwise a NOUN/identity
fallback), and skeletons are extracted in four variants: all nouns & verbs,
nouns only, tf-idf-salient nouns & verbs, and iterative refinement (the
baseline's own caption, produced by the pipeline rather than here).
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

NOUN = "NOUN"
VERB = "VERB"
ADJ = "ADJ"
OTHER = "OTHER"
POS_TAGS = frozenset({NOUN, VERB, ADJ, OTHER})

# skeleton variants
NOUNS_VERBS = "nouns_verbs"
NOUNS = "nouns"
SALIENT_NOUNS_VERBS = "salient_nouns_verbs"
ITERATIVE_REFINEMENT = "iterative_refinement"
VARIANTS = (NOUNS_VERBS, NOUNS, SALIENT_NOUNS_VERBS, ITERATIVE_REFINEMENT)

# skeleton sources
GOLD_EXTRACTED = "gold_extracted"
PREDICTED = "predicted"
USER_OVERRIDE = "user_override"
ITERATIVE = "iterative"
SOURCES = (GOLD_EXTRACTED, PREDICTED, USER_OVERRIDE, ITERATIVE)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AnnotatedToken:
    surface: str
    lemma: str
    pos: str

    def __post_init__(self):
        if not self.lemma or self.lemma != self.lemma.lower():
            raise ValueError(f"lemma must be non-empty lowercase, got {self.lemma!r}")
        if self.pos not in POS_TAGS:
            raise ValueError(f"unknown POS tag {self.pos!r}")


@dataclass
class CaptionRecord:
    """A caption with optional gold [surface, lemma, pos] tags and a language tag."""

    text: str
    tags: list | None = None
    lang: str = "en"


@dataclass
class SkeletonSpec:
    variant: str
    tokens: list
    source: str = GOLD_EXTRACTED

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown skeleton variant {self.variant!r}")
        if self.source not in SOURCES:
            raise ValueError(f"unknown skeleton source {self.source!r}")


def tokenize(text):
    """Lowercase whitespace tokenization (toy corpora are closed-vocabulary)."""
    return text.lower().split()


def load_lexicon(path):
    """Read a `surface<TAB>lemma<TAB>POS` file into {surface: (lemma, pos)}."""
    lexicon = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[2] not in POS_TAGS:
                raise ConfigError(f"{path}:{lineno}: bad lexicon line {line!r}")
            lexicon[parts[0]] = (parts[1], parts[2])
    return lexicon


def save_lexicon(lexicon, path):
    with open(path, "w", encoding="utf-8") as fh:
        for surface in sorted(lexicon):
            lemma, pos = lexicon[surface]
            fh.write(f"{surface}\t{lemma}\t{pos}\n")


def tag_and_lemmatize(caption, lexicon=None):
    """Annotate one caption; gold tags win, then lexicon, then NOUN fallback."""
    if caption.tags:
        return [AnnotatedToken(s, l, p) for s, l, p in caption.tags]
    lexicon = lexicon or {}
    out = []
    for tok in tokenize(caption.text):
        lemma, pos = lexicon.get(tok, (tok, NOUN))
        out.append(AnnotatedToken(tok, lemma, pos))
    return out


def tfidf_scores(corpus):
    """Per-caption lemma scores: tf(lemma, caption) * ln(N / df(lemma)).

    ``corpus`` is a list of lemma lists, one per caption (each caption is a
    document). Returns one {lemma: score} dict per caption.
    """
    if not corpus:
        raise ConfigError("tfidf over an empty corpus")
    n = len(corpus)
    df = Counter()
    for doc in corpus:
        df.update(set(doc))
    scored = []
    for doc in corpus:
        tf = Counter(doc)
        scored.append({lemma: count * math.log(n / df[lemma]) for lemma, count in tf.items()})
    return scored


def _salient_pick(tokens, pos, tfidf, limit=2):
    # distinct lemmas of the given POS, ordered by score then first position
    first_pos = {}
    for i, t in enumerate(tokens):
        if t.pos == pos and t.lemma not in first_pos:
            first_pos[t.lemma] = i
    ranked = sorted(first_pos, key=lambda lem: (-tfidf.get(lem, 0.0), first_pos[lem]))
    chosen = set(ranked[:limit])
    return {lem: first_pos[lem] for lem in chosen}


def extract_skeleton(tokens, variant, tfidf=None):
    """Extract a skeleton from annotated tokens.

    The iterative-refinement variant is not derivable from POS tags (it is
    the baseline model's decoded caption) and is produced by the pipeline.
    """
    if variant == ITERATIVE_REFINEMENT:
        raise ValueError("iterative refinement skeletons come from a trained baseline")
    if variant == NOUNS_VERBS:
        lemmas = [t.lemma for t in tokens if t.pos in (NOUN, VERB)]
    elif variant == NOUNS:
        lemmas = [t.lemma for t in tokens if t.pos == NOUN]
    elif variant == SALIENT_NOUNS_VERBS:
        tfidf = tfidf or {}
        picks = _salient_pick(tokens, NOUN, tfidf)
        picks.update(_salient_pick(tokens, VERB, tfidf))
        lemmas = [lem for lem, _ in sorted(picks.items(), key=lambda kv: kv[1])]
    else:
        raise ValueError(f"unknown skeleton variant {variant!r}")
    return SkeletonSpec(variant=variant, tokens=lemmas, source=GOLD_EXTRACTED)


@dataclass
class SkeletonVocab:
    """Frequency-thresholded lemma vocabulary with dense, stable ids."""

    lemma_to_id: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    min_count: int = 1

    def __len__(self):
        return len(self.lemma_to_id)

    def __contains__(self, lemma):
        return lemma in self.lemma_to_id

    def id(self, lemma):
        return self.lemma_to_id[lemma]

    def lemma(self, idx):
        return self.id_to_lemma[idx]

    @property
    def id_to_lemma(self):
        return {i: lem for lem, i in self.lemma_to_id.items()}

    @property
    def lemmas(self):
        return sorted(self.lemma_to_id, key=self.lemma_to_id.get)

    def filter_tokens(self, tokens):
        """Drop out-of-vocab tokens, never reordering the survivors."""
        return [t for t in tokens if t in self.lemma_to_id]

    def to_json(self):
        return {"lemmas": self.lemmas, "counts": dict(self.counts), "min_count": self.min_count}

    @classmethod
    def from_json(cls, obj):
        return cls(
            lemma_to_id={lem: i for i, lem in enumerate(obj["lemmas"])},
            counts=dict(obj["counts"]),
            min_count=int(obj["min_count"]),
        )


def build_vocab(skeletons, min_count=50):
    """Count skeleton lemmas and keep those with frequency >= min_count.

    Ids are dense from 0, assigned by descending frequency with lexicographic
    tie-breaks so re-runs produce identical ids.
    """
    if min_count < 1:
        raise ConfigError(f"min_count must be >= 1, got {min_count}")
    counts = Counter()
    for ske in skeletons:
        tokens = ske.tokens if isinstance(ske, SkeletonSpec) else list(ske)
        counts.update(tokens)
    kept = {lem: c for lem, c in counts.items() if c >= min_count}
    if not kept:
        raise ConfigError(f"no skeleton lemma reaches min_count={min_count}")
    ordered = sorted(kept, key=lambda lem: (-kept[lem], lem))
    return SkeletonVocab(
        lemma_to_id={lem: i for i, lem in enumerate(ordered)},
        counts=kept,
        min_count=min_count,
    )
