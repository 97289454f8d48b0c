"""Caption and skeleton evaluation.

All functions are pure. CIDEr follows the standard consensus formulation:
per-n tf-idf vectors over 1..4-grams with the reference corpus as the
document collection (one document per image), cosine similarity averaged
over references and over n, scaled by 10. An n level where either vector is
empty (caption shorter than n) contributes 0, matching the reference
implementation's zero-norm guard.
"""

from __future__ import annotations

import math
import warnings
from collections import Counter, defaultdict

from scipy.stats import spearmanr

NGRAM_MAX = 4
CIDER_D_SIGMA = 6.0


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# CIDEr
# ---------------------------------------------------------------------------


def _ngram_counts(tokens, n):
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def _doc_frequencies(references, n):
    df = Counter()
    for refs in references.values():
        seen = set()
        for ref in refs:
            seen.update(_ngram_counts(ref.split(), n))
        df.update(seen)
    return df


def _tfidf(counts, df, n_images):
    return {g: c * (math.log(n_images) - math.log(max(1.0, df[g]))) for g, c in counts.items()}


def _norm(vec):
    return math.sqrt(sum(w * w for w in vec.values()))


def cider(candidates, references, n_max=NGRAM_MAX, variant="cider"):
    """Corpus and per-image CIDEr.

    candidates: image_id -> caption string. references: image_id -> list of
    caption strings; ids must coincide and every image needs at least one
    reference. variant="cider-d" adds the clipped-count numerator and the
    Gaussian length penalty.
    """
    if variant not in ("cider", "cider-d"):
        raise MetricError(f"unknown CIDEr variant {variant!r}")
    if set(candidates) != set(references):
        raise MetricError("candidate and reference ids differ")
    if any(not refs for refs in references.values()):
        raise MetricError("every image needs at least one reference")
    n_images = len(references)
    if n_images < 2:
        raise MetricError("single-image corpus: idf degenerates (needs >= 2 images)")

    per_image = defaultdict(float)
    for n in range(1, n_max + 1):
        df = _doc_frequencies(references, n)
        for cid, cand in candidates.items():
            cand_tokens = cand.split()
            cvec = _tfidf(_ngram_counts(cand_tokens, n), df, n_images)
            cn = _norm(cvec)
            sims = []
            for ref in references[cid]:
                ref_tokens = ref.split()
                rvec = _tfidf(_ngram_counts(ref_tokens, n), df, n_images)
                rn = _norm(rvec)
                if cn == 0.0 or rn == 0.0:
                    sims.append(0.0)
                    continue
                if variant == "cider":
                    num = sum(w * rvec.get(g, 0.0) for g, w in cvec.items())
                else:
                    num = sum(min(w, rvec.get(g, 0.0)) * rvec.get(g, 0.0) for g, w in cvec.items())
                sim = num / (cn * rn)
                if variant == "cider-d":
                    delta = len(cand_tokens) - len(ref_tokens)
                    sim *= math.exp(-(delta ** 2) / (2.0 * CIDER_D_SIGMA ** 2))
                sims.append(sim)
            per_image[cid] += sum(sims) / len(sims)
    scores = {cid: 10.0 * total / n_max for cid, total in per_image.items()}
    corpus = sum(scores.values()) / len(scores)
    return corpus, scores


# ---------------------------------------------------------------------------
# skeleton precision / recall / F
# ---------------------------------------------------------------------------


def skeleton_prf(pred_tokens, gold_tokens):
    """Set-level precision, recall and F1 over deduplicated lemmas."""
    pred, gold = set(pred_tokens), set(gold_tokens)
    if not pred and not gold:
        return (1.0, 1.0, 1.0)
    hit = len(pred & gold)
    p = hit / len(pred) if pred else 0.0
    r = hit / len(gold) if gold else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return (p, r, f)


# ---------------------------------------------------------------------------
# length profile
# ---------------------------------------------------------------------------


def length_profile(pairs):
    """Caption-length distribution per skeleton size.

    pairs: iterable of (skeleton_size, caption_length). Returns histogram and
    per-size means plus the Spearman correlation between size and mean length
    (None when undefined: fewer than two sizes or zero variance).
    """
    pairs = list(pairs)
    if not pairs:
        raise MetricError("length profile over no results")
    hist = defaultdict(Counter)
    for size, length in pairs:
        hist[size][length] += 1
    sizes = sorted(hist)
    means = {s: sum(l * c for l, c in hist[s].items()) / sum(hist[s].values()) for s in sizes}
    corr = None
    if len(sizes) >= 2:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # constant input -> nan -> None
            rho = spearmanr(sizes, [means[s] for s in sizes]).statistic
        if not math.isnan(rho):
            corr = float(rho)
    return {
        "histogram": {s: dict(hist[s]) for s in sizes},
        "mean_length": means,
        "spearman": corr,
    }


# ---------------------------------------------------------------------------
# gender mentions
# ---------------------------------------------------------------------------


def gender_report(captions_before, captions_after, lexicon):
    """Token counts of gendered terms in two caption sets with reductions.

    lexicon maps gendered surface -> neutral replacement (the replacement is
    echoed for reporting only). Reduction is (before-after)/before as a
    percentage; None when a term never occurs in the before set.
    """
    if not lexicon:
        raise MetricError("gendered-term lexicon is empty")

    def counts(captions):
        c = Counter()
        for cap in captions:
            for tok in cap.split():
                if tok in lexicon:
                    c[tok] += 1
        return c

    before, after = counts(captions_before), counts(captions_after)
    terms = {}
    for term in sorted(lexicon):
        b, a = before[term], after[term]
        pct = (b - a) / b * 100.0 if b else None
        terms[term] = {"before": b, "after": a, "neutral": lexicon[term], "reduction_pct": pct}
    tb, ta = sum(before.values()), sum(after.values())
    total_pct = (tb - ta) / tb * 100.0 if tb else None
    return {"terms": terms, "total": {"before": tb, "after": ta, "reduction_pct": total_pct}}


# ---------------------------------------------------------------------------
# hallucination rate
# ---------------------------------------------------------------------------


def hallucination_rate(captions, concepts, lexicon):
    """Fraction of generated content words absent from the latent concepts.

    captions: list of token lists; concepts: parallel list of lemma sets;
    lexicon: surface -> (lemma, pos). Content words are NOUN/VERB lemmas;
    tokens outside the lexicon count as off-concept nouns. A corpus with no
    content words at all scores 0.
    """
    if len(captions) != len(concepts):
        raise MetricError("captions and concept sets must be parallel")
    total = 0
    off = 0
    for tokens, latent in zip(captions, concepts):
        if latent is None:
            raise MetricError("missing latent concept set")
        latent = set(latent)
        for tok in tokens:
            lemma, pos = lexicon.get(tok, (tok, "NOUN"))
            if pos not in ("NOUN", "VERB"):
                continue
            total += 1
            if lemma not in latent:
                off += 1
    return off / total if total else 0.0
