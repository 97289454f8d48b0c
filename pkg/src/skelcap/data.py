"""Synthetic paired corpus with controllable web-style caption noise.

Each image is a bag of one to three (object, action[, attribute]) scenes.
Region feature vectors are noisy mixtures of fixed per-concept unit vectors,
so concepts are recoverable from features but never trivially. The clean
caption verbalizes the scenes; the noisy caption (the training target) is the
clean one after per-content-word deletion with probability q and insertion of
a boilerplate phrase with probability p. Gold annotation (tags, concepts) is
always derived from the clean side.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .model import ImageFeatures, Region
from .skeletons import (
    ADJ,
    NOUN,
    OTHER,
    VERB,
    AnnotatedToken,
    CaptionRecord,
    ConfigError,
    save_lexicon,
    tokenize,
)

SCHEMA_VERSION = 1
CORPUS_HEADER = f"# corpus schema={SCHEMA_VERSION}"
SPLITS = ("train", "val", "test")

IMAGE_SIZE = 224


class CorpusError(ValueError):
    pass


# ---------------------------------------------------------------------------
# concept inventory
# ---------------------------------------------------------------------------

OBJECTS = [
    "man", "woman", "person", "boy", "girl", "child",
    "dog", "cat", "bird", "horse", "elephant", "car",
    "bus", "boat", "tree", "house", "table", "ball",
]

# lemma -> third person singular surface
ACTIONS = {
    "run": "runs", "jump": "jumps", "sit": "sits", "stand": "stands",
    "walk": "walks", "sleep": "sleeps", "play": "plays", "eat": "eats",
    "swim": "swims", "fly": "flies", "ride": "rides", "wait": "waits",
}

ATTRIBUTES = ["big", "small", "red", "blue", "old", "young", "happy", "tall", "white", "black"]

# boilerplate noise; every word is disjoint from the concept lemmas
NOISE_PHRASES = [
    "stock photo", "royalty free", "click here", "best price", "for sale",
    "premium wallpaper", "image gallery", "download now", "vintage archive", "official website",
]

NOISE_TAGS = {
    "stock": NOUN, "photo": NOUN, "royalty": NOUN, "free": ADJ, "click": VERB,
    "here": OTHER, "best": ADJ, "price": NOUN, "for": OTHER, "sale": NOUN,
    "premium": ADJ, "wallpaper": NOUN, "image": NOUN, "gallery": NOUN,
    "download": VERB, "now": OTHER, "vintage": ADJ, "archive": NOUN,
    "official": ADJ, "website": NOUN,
}

FUNCTION_TAGS = {"a": OTHER, "an": OTHER, "and": OTHER}

# swaps applied by the debiasing knob
DEGENDER_MAP = {"man": "person", "woman": "person", "boy": "child", "girl": "child"}


@dataclass
class ConceptInventory:
    """Concept lexicon plus fixed random unit vectors for feature synthesis."""

    objects: list = field(default_factory=lambda: list(OBJECTS))
    actions: dict = field(default_factory=lambda: dict(ACTIONS))
    attributes: list = field(default_factory=lambda: list(ATTRIBUTES))
    noise_phrases: list = field(default_factory=lambda: list(NOISE_PHRASES))
    d_img: int = 32
    vector_seed: int = 7

    def __post_init__(self):
        concept_lemmas = set(self.objects) | set(self.actions) | set(self.attributes)
        noise_words = {w for p in self.noise_phrases for w in p.split()}
        overlap = concept_lemmas & noise_words
        if overlap:
            raise ConfigError(f"noise words shadow concepts: {sorted(overlap)}")
        rng = np.random.default_rng(self.vector_seed)
        self.vectors = {}
        for lemma in list(self.objects) + sorted(self.actions) + list(self.attributes):
            v = rng.normal(size=self.d_img)
            self.vectors[lemma] = v / np.linalg.norm(v)

    def lexicon(self):
        """Surface -> (lemma, pos) covering every word the grammar can emit."""
        lex = {}
        for obj in self.objects:
            lex[obj] = (obj, NOUN)
        for lemma, third in self.actions.items():
            lex[third] = (lemma, VERB)
            lex[lemma] = (lemma, VERB)
        for attr in self.attributes:
            lex[attr] = (attr, ADJ)
        for word, pos in NOISE_TAGS.items():
            lex.setdefault(word, (word, pos))
        for word, pos in FUNCTION_TAGS.items():
            lex[word] = (word, pos)
        return lex

    def scene_vector(self, obj, action, attr, rng, noise_sigma):
        parts = self.vectors[obj] + 0.6 * self.vectors[action]
        if attr is not None:
            parts = parts + 0.6 * self.vectors[attr]
        v = parts / np.linalg.norm(parts)
        return v + rng.normal(0.0, noise_sigma, size=self.d_img)


# ---------------------------------------------------------------------------
# examples
# ---------------------------------------------------------------------------


@dataclass
class CorpusExample:
    image_id: str
    features: ImageFeatures
    clean: CaptionRecord
    noisy: CaptionRecord
    concepts: list
    pivot: CaptionRecord | None = None

    def to_json(self):
        obj = {
            "image_id": self.image_id,
            "features": self.features.to_json(),
            "clean": {
                "text": self.clean.text,
                "tags": [[t.surface, t.lemma, t.pos] for t in self.clean.tags],
            },
            "noisy": {"text": self.noisy.text},
            "concepts": list(self.concepts),
        }
        if self.pivot is not None:
            obj["pivot"] = {"text": self.pivot.text}
        return obj

    @classmethod
    def from_json(cls, obj):
        tags = [AnnotatedToken(s, l, p) for s, l, p in obj["clean"]["tags"]]
        pivot = obj.get("pivot")
        return cls(
            image_id=obj["image_id"],
            features=ImageFeatures.from_json(obj["features"]),
            clean=CaptionRecord(text=obj["clean"]["text"], tags=tags),
            noisy=CaptionRecord(text=obj["noisy"]["text"]),
            concepts=list(obj["concepts"]),
            pivot=CaptionRecord(text=pivot["text"]) if pivot else None,
        )


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


@dataclass
class GenConfig:
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200
    noise_rate: float = 0.5  # p, chance of one boilerplate insertion
    drop_rate: float = 0.2  # q, per content word deletion chance
    attr_rate: float = 0.5
    max_scenes: int = 3
    feature_noise: float = 0.1
    d_img: int = 32
    seed: int = 0

    def validate(self, inventory: ConceptInventory):
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not (0.0 <= self.noise_rate <= 1.0 and 0.0 <= self.drop_rate <= 1.0):
            raise ConfigError("noise_rate and drop_rate must lie in [0, 1]")
        if self.max_scenes < 1 or self.max_scenes > len(inventory.objects):
            raise ConfigError(
                f"max_scenes={self.max_scenes} unsupported by inventory of {len(inventory.objects)} objects"
            )
        if self.d_img != inventory.d_img:
            raise ConfigError(f"d_img={self.d_img} but inventory vectors are {inventory.d_img}-dimensional")

    def to_json(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, obj):
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown generation options: {sorted(unknown)}")
        return cls(**obj)


def _article(word):
    return "an" if word[0] in "aeiou" else "a"


REGION_CELLS = [
    (8, 8, 104, 104),
    (116, 8, 212, 104),
    (8, 116, 104, 212),
    (116, 116, 212, 212),
]


def _make_example(image_id, inventory, cfg, rng, lexicon):
    n_scenes = int(rng.integers(1, cfg.max_scenes + 1))
    obj_pool = rng.permutation(inventory.objects)[:n_scenes]
    scenes = []
    for obj in obj_pool:
        action = str(rng.choice(sorted(inventory.actions)))
        attr = str(rng.choice(inventory.attributes)) if rng.random() < cfg.attr_rate else None
        scenes.append((str(obj), action, attr))

    clause_texts = []
    concepts = []
    for obj, action, attr in scenes:
        words = [attr, obj] if attr else [obj]
        clause_texts.append(" ".join([_article(words[0])] + words + [inventory.actions[action]]))
        concepts.append(obj)
        concepts.append(action)
        if attr:
            concepts.append(attr)
    concepts = list(dict.fromkeys(concepts))
    clean_text = " and ".join(clause_texts)
    tags = [AnnotatedToken(w, *lexicon[w]) for w in tokenize(clean_text)]
    clean = CaptionRecord(text=clean_text, tags=tags)

    noisy_tokens = _corrupt(tokenize(clean_text), lexicon, cfg, rng, inventory)
    noisy = CaptionRecord(text=" ".join(noisy_tokens))

    region_vecs = []
    regions = []
    for idx, (obj, action, attr) in enumerate(scenes):
        vec = inventory.scene_vector(obj, action, attr, rng, cfg.feature_noise)
        region_vecs.append(vec)
        x1, y1, x2, y2 = REGION_CELLS[idx % len(REGION_CELLS)]
        jitter = rng.integers(-6, 7, size=2)
        box = (x1 + int(jitter[0]), y1 + int(jitter[1]), x2 + int(jitter[0]), y2 + int(jitter[1]))
        regions.append(Region(vec=vec, box=box, image_size=(IMAGE_SIZE, IMAGE_SIZE)))
    mean = np.mean(region_vecs, axis=0)
    global_vec = mean / np.linalg.norm(mean) + rng.normal(0.0, cfg.feature_noise, size=cfg.d_img)

    return CorpusExample(
        image_id=image_id,
        features=ImageFeatures(global_vec=global_vec, regions=regions),
        clean=clean,
        noisy=noisy,
        concepts=concepts,
    )


def _corrupt(tokens, lexicon, cfg, rng, inventory):
    """Deletion first (per content word), then at most one phrase insertion."""
    kept = []
    for tok in tokens:
        pos = lexicon[tok][1]
        if pos in (NOUN, VERB, ADJ) and rng.random() < cfg.drop_rate:
            continue
        kept.append(tok)
    if rng.random() < cfg.noise_rate:
        phrase = str(rng.choice(inventory.noise_phrases)).split()
        at = int(rng.integers(0, len(kept) + 1))
        kept = kept[:at] + phrase + kept[at:]
    return kept


def generate_corpus(cfg: GenConfig, inventory: ConceptInventory | None = None):
    """Deterministic splits: dict of split name -> list of CorpusExample."""
    inventory = inventory or ConceptInventory(d_img=cfg.d_img)
    cfg.validate(inventory)
    lexicon = inventory.lexicon()
    corpus = {}
    sizes = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    for split_idx, split in enumerate(SPLITS):
        rng = np.random.default_rng([cfg.seed, split_idx])
        corpus[split] = [
            _make_example(f"{split}-{i:06d}", inventory, cfg, rng, lexicon)
            for i in range(sizes[split])
        ]
    return corpus


# ---------------------------------------------------------------------------
# pivot language
# ---------------------------------------------------------------------------


@dataclass
class PivotSpec:
    """Invertible toy translation: a token bijection plus a reorder rule.

    The bijection is either an explicit ``token_map`` or, by default, the rule
    "append ``suffix``". An empty suffix with identity order is a no-op.
    """

    suffix: str = "§"
    reorder: str = "reverse"  # or "identity"
    token_map: dict | None = None

    def __post_init__(self):
        if self.reorder not in ("reverse", "identity"):
            raise ConfigError(f"unknown reorder rule {self.reorder!r}")
        if self.token_map is not None:
            values = list(self.token_map.values())
            if len(set(values)) != len(values):
                raise ConfigError("pivot token map must be a bijection")

    def _map_token(self, tok):
        if self.token_map is not None:
            if tok not in self.token_map:
                raise CorpusError(f"token {tok!r} outside pivot map")
            return self.token_map[tok]
        if self.suffix and tok.endswith(self.suffix):
            raise CorpusError(f"token {tok!r} already carries the pivot suffix")
        return tok + self.suffix

    def _unmap_token(self, tok):
        if self.token_map is not None:
            inverse = {v: k for k, v in self.token_map.items()}
            if tok not in inverse:
                raise CorpusError(f"token {tok!r} outside pivot map")
            return inverse[tok]
        if self.suffix and not tok.endswith(self.suffix):
            raise CorpusError(f"token {tok!r} lacks the pivot suffix")
        return tok[: len(tok) - len(self.suffix)] if self.suffix else tok

    def transform(self, text):
        toks = [self._map_token(t) for t in tokenize(text)]
        if self.reorder == "reverse":
            toks = toks[::-1]
        return " ".join(toks)

    def invert(self, text):
        toks = tokenize(text)
        if self.reorder == "reverse":
            toks = toks[::-1]
        return " ".join(self._unmap_token(t) for t in toks)


def add_pivot(corpus, spec: PivotSpec):
    """Attach pivot renderings of the noisy captions, in place."""
    for examples in corpus.values():
        for ex in examples:
            ex.pivot = CaptionRecord(text=spec.transform(ex.noisy.text))
    return corpus


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_corpus(corpus, out_dir, gen_config: GenConfig | None = None, inventory: ConceptInventory | None = None):
    os.makedirs(out_dir, exist_ok=True)
    for split, examples in corpus.items():
        path = os.path.join(out_dir, f"{split}.jsonl")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(CORPUS_HEADER + "\n")
            for ex in examples:
                fh.write(json.dumps(ex.to_json(), sort_keys=True) + "\n")
    meta = {"schema": SCHEMA_VERSION, "splits": {s: len(v) for s, v in corpus.items()}}
    if gen_config is not None:
        meta["gen_config"] = gen_config.to_json()
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    inventory = inventory or ConceptInventory()
    save_lexicon(inventory.lexicon(), os.path.join(out_dir, "lexicon.tsv"))


def load_split(path):
    examples = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if not header.startswith("# corpus schema="):
            raise CorpusError(f"{path}:1: missing corpus header line")
        version = header.split("=", 1)[1]
        if version != str(SCHEMA_VERSION):
            raise CorpusError(f"{path}:1: unsupported corpus schema {version}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            try:
                examples.append(CorpusExample.from_json(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise CorpusError(f"{path}:{lineno}: bad example record: {exc}") from exc
    return examples


def load_corpus(corpus_dir):
    corpus = {}
    for split in SPLITS:
        path = os.path.join(corpus_dir, f"{split}.jsonl")
        if os.path.exists(path):
            corpus[split] = load_split(path)
    if not corpus:
        raise CorpusError(f"no split files found under {corpus_dir}")
    return corpus
