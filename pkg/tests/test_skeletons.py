import math

import pytest

from skelcap import skeletons as sk
from skelcap.skeletons import (
    ADJ,
    NOUN,
    NOUNS,
    NOUNS_VERBS,
    OTHER,
    SALIENT_NOUNS_VERBS,
    VERB,
    AnnotatedToken,
    CaptionRecord,
    ConfigError,
    build_vocab,
    extract_skeleton,
    tag_and_lemmatize,
    tfidf_scores,
)

LEX = {
    "dogs": ("dog", NOUN),
    "dog": ("dog", NOUN),
    "running": ("run", VERB),
    "runs": ("run", VERB),
    "a": ("a", OTHER),
    "big": ("big", ADJ),
    "chases": ("chase", VERB),
    "cat": ("cat", NOUN),
}


def tok(surface, lemma, pos):
    return AnnotatedToken(surface, lemma, pos)


def test_tag_with_lexicon():
    out = tag_and_lemmatize(CaptionRecord("Dogs running"), LEX)
    assert out == [tok("dogs", "dog", NOUN), tok("running", "run", VERB)]


def test_tag_empty_caption():
    assert tag_and_lemmatize(CaptionRecord(""), LEX) == []


def test_tag_unknown_word_noun_fallback():
    out = tag_and_lemmatize(CaptionRecord("zzqx"), LEX)
    assert out == [tok("zzqx", "zzqx", NOUN)]


def test_tag_gold_tags_win():
    rec = CaptionRecord("dogs", tags=[["dogs", "dog", "NOUN"]])
    assert tag_and_lemmatize(rec, {}) == [tok("dogs", "dog", NOUN)]


def test_tag_deterministic():
    rec = CaptionRecord("a big dog chases a cat")
    assert tag_and_lemmatize(rec, LEX) == tag_and_lemmatize(rec, LEX)


def test_annotated_token_rejects_uppercase_lemma():
    with pytest.raises(ValueError):
        AnnotatedToken("Dog", "Dog", NOUN)


# ---------------------------------------------------------------------------
# tf-idf
# ---------------------------------------------------------------------------


def test_tfidf_everywhere_lemma_scores_zero():
    corpus = [["dog", "run"], ["dog", "sit"], ["dog"]]
    scores = tfidf_scores(corpus)
    assert all(s["dog"] == 0.0 for s in scores)


def test_tfidf_hand_value():
    # "dog chases dog": tf(dog)=2, df(dog)=1, N=3 -> 2*ln(3)
    corpus = [["dog", "chase", "dog"], ["cat"], ["bird"]]
    scores = tfidf_scores(corpus)
    assert math.isclose(scores[0]["dog"], 2 * math.log(3), rel_tol=1e-12)


def test_tfidf_single_caption_corpus_all_zero():
    scores = tfidf_scores([["dog", "run"]])
    assert all(v == 0.0 for v in scores[0].values())


# ---------------------------------------------------------------------------
# extraction variants
# ---------------------------------------------------------------------------

TOKENS = [tok("a", "a", OTHER), tok("dog", "dog", NOUN), tok("runs", "run", VERB)]


def test_extract_nouns_verbs():
    assert extract_skeleton(TOKENS, NOUNS_VERBS).tokens == ["dog", "run"]


def test_extract_nouns_only():
    assert extract_skeleton(TOKENS, NOUNS).tokens == ["dog"]


def test_extract_all_other_is_empty():
    toks = [tok("the", "the", OTHER), tok("of", "of", OTHER)]
    assert extract_skeleton(toks, NOUNS_VERBS).tokens == []


def test_extract_keeps_duplicates_in_caption_order():
    toks = [tok("dog", "dog", NOUN), tok("chases", "chase", VERB), tok("dog", "dog", NOUN)]
    assert extract_skeleton(toks, NOUNS_VERBS).tokens == ["dog", "chase", "dog"]


def test_salient_top2_by_tfidf_in_caption_order():
    toks = [
        tok("cat", "cat", NOUN),
        tok("dog", "dog", NOUN),
        tok("bird", "bird", NOUN),
        tok("runs", "run", VERB),
        tok("jumps", "jump", VERB),
        tok("sits", "sit", VERB),
    ]
    tfidf = {"cat": 0.1, "dog": 2.0, "bird": 1.5, "run": 0.2, "jump": 3.0, "sit": 0.9}
    out = extract_skeleton(toks, SALIENT_NOUNS_VERBS, tfidf)
    # top-2 nouns {dog, bird}, top-2 verbs {run->no, jump, sit}; caption order
    assert out.tokens == ["dog", "bird", "jump", "sit"]


def test_salient_tie_broken_by_earlier_position():
    toks = [tok("cat", "cat", NOUN), tok("dog", "dog", NOUN), tok("bird", "bird", NOUN)]
    tfidf = {"cat": 1.0, "dog": 1.0, "bird": 1.0}
    out = extract_skeleton(toks, SALIENT_NOUNS_VERBS, tfidf)
    assert out.tokens == ["cat", "dog"]


def test_salient_subset_of_nouns_verbs_with_caps():
    import random

    rng = random.Random(0)
    lemmas = ["dog", "cat", "run", "jump", "sit", "bird", "tree"]
    pos = {"dog": NOUN, "cat": NOUN, "bird": NOUN, "tree": NOUN, "run": VERB, "jump": VERB, "sit": VERB}
    for _ in range(50):
        toks = [tok(l, l, pos[l]) for l in rng.choices(lemmas, k=rng.randint(1, 10))]
        tfidf = {l: rng.random() for l in lemmas}
        sal = extract_skeleton(toks, SALIENT_NOUNS_VERBS, tfidf)
        nv = extract_skeleton(toks, NOUNS_VERBS)
        assert set(sal.tokens) <= set(nv.tokens)
        assert sum(1 for t in sal.tokens if pos[t] == NOUN) <= 2
        assert sum(1 for t in sal.tokens if pos[t] == VERB) <= 2
        # idempotent / deterministic
        assert extract_skeleton(toks, SALIENT_NOUNS_VERBS, tfidf).tokens == sal.tokens


def test_iterative_variant_rejected_here():
    with pytest.raises(ValueError):
        extract_skeleton(TOKENS, sk.ITERATIVE_REFINEMENT)


# ---------------------------------------------------------------------------
# vocab
# ---------------------------------------------------------------------------


def test_vocab_threshold():
    skeletons = [["dog"]] * 60 + [["zz"]] * 3
    vocab = build_vocab(skeletons, min_count=50)
    assert "dog" in vocab and "zz" not in vocab


def test_vocab_min_count_one_keeps_all():
    vocab = build_vocab([["dog", "zz"]], min_count=1)
    assert set(vocab.lemma_to_id) == {"dog", "zz"}


def test_vocab_tie_break_lexicographic_and_stable():
    skeletons = [["beta", "alpha"], ["alpha", "beta"], ["gamma"]]
    v1 = build_vocab(skeletons, min_count=1)
    v2 = build_vocab(list(reversed(skeletons)), min_count=1)
    # alpha and beta tie at 2, gamma has 1
    assert v1.lemmas == ["alpha", "beta", "gamma"]
    assert v1.lemma_to_id == v2.lemma_to_id


def test_vocab_empty_after_threshold_errors():
    with pytest.raises(ConfigError):
        build_vocab([["dog"]], min_count=50)


def test_vocab_filter_preserves_order():
    vocab = build_vocab([["dog", "run", "dog"]], min_count=2)
    assert vocab.filter_tokens(["run", "dog", "cat", "dog"]) == ["dog", "dog"]


def test_vocab_json_round_trip():
    vocab = build_vocab([["dog", "run", "dog"]], min_count=1)
    back = sk.SkeletonVocab.from_json(vocab.to_json())
    assert back.lemma_to_id == vocab.lemma_to_id
    assert back.counts == vocab.counts


def test_lexicon_file_round_trip(tmp_path):
    path = tmp_path / "lexicon.tsv"
    sk.save_lexicon(LEX, path)
    assert sk.load_lexicon(path) == LEX
