"""Greedy and beam decoding, joint skeleton/caption splitting, overrides.

Searches operate on a scorer: any callable mapping a decoded-id prefix
(including the leading BOS) to a log-probability row over the output vocab.
This keeps the search logic independently testable against hand-built
probability tables; models plug in through ModelScorer.

Skeleton overrides bypass stage 1 entirely. For encoder-conditioned modes the
override becomes the encoder text; for joint-decoder modes it is forced as
the decoder prefix (teacher-forced scoring), with free decoding after SEP.
With greedy decoding, forcing the model's own predicted skeleton reproduces
the unforced caption token-for-token; a wider beam may re-search the caption
segment and find a better continuation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .model import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    RESERVED,
    SEP_ID,
    UNK_ID,
    Batch,
    CaptionerModel,
    InputError,
    is_reserved_token,
    pack_features,
    pad_id_rows,
)

LOGP_TOL = 1e-9


@dataclass
class DecodeResult:
    skeleton: list
    caption: list
    token_logps: list
    total_logp: float
    sep_missing: bool = False
    mode: str = ""

    def __post_init__(self):
        if abs(self.total_logp - sum(self.token_logps)) > LOGP_TOL:
            raise ValueError("total log-prob inconsistent with per-token log-probs")
        bad = [t for t in self.caption if t in RESERVED]
        if bad:
            raise ValueError(f"reserved tokens in caption: {bad}")

    def to_json(self):
        return {
            "skeleton": list(self.skeleton),
            "caption": list(self.caption),
            "caption_text": " ".join(self.caption),
            "token_logps": [float(x) for x in self.token_logps],
            "total_logp": float(self.total_logp),
            "sep_missing": self.sep_missing,
            "mode": self.mode,
        }


def split_joint(tokens):
    """Split a decoded joint stream at the first SEP.

    Returns (skeleton, caption, sep_missing). EOS, if present, is dropped.
    A stream that never emitted SEP is all skeleton and gets flagged.
    """
    toks = list(tokens)
    if toks and toks[-1] == "<eos>":
        toks = toks[:-1]
    if "<sep>" in toks:
        at = toks.index("<sep>")
        return toks[:at], toks[at + 1:], False
    return toks, [], True


# ---------------------------------------------------------------------------
# search over a scorer
# ---------------------------------------------------------------------------

ALWAYS_BLOCKED = (PAD_ID, BOS_ID, UNK_ID)


def _blocked_ids(prefix_ids, joint):
    blocked = set(ALWAYS_BLOCKED)
    if not joint or SEP_ID in prefix_ids[1:]:
        blocked.add(SEP_ID)
    return blocked


def greedy_decode(scorer, max_len, joint=False, forced=()):
    """Argmax decoding; ties go to the lowest token id.

    ``forced`` ids are consumed verbatim (teacher-forced scoring) before free
    decoding begins. Returns (ids, per-token logps).
    """
    if max_len < len(forced):
        raise InputError(f"forced prefix of {len(forced)} exceeds max_len {max_len}")
    prefix = [BOS_ID]
    logps = []
    for t in range(max_len):
        row = scorer(prefix)
        if t < len(forced):
            nxt = forced[t]
        else:
            masked = row.copy()
            masked[list(_blocked_ids(prefix, joint))] = -np.inf
            nxt = int(np.argmax(masked))
        logps.append(float(row[nxt]))
        prefix.append(nxt)
        if nxt == EOS_ID and t >= len(forced):
            break
    return prefix[1:], logps


@dataclass(order=True)
class _Hyp:
    neg_logp: float
    ids: tuple = field(compare=True)
    logps: tuple = field(compare=False, default=())


def beam_search(scorer, max_len, beam, joint=False, forced=()):
    """Length-unnormalized beam search; finished hypotheses retire.

    Deterministic: candidates are ranked by (-total logp, token-id sequence).
    Returns (ids, per-token logps) of the best finished hypothesis, or the
    best live one if nothing finished within budget.
    """
    if beam < 1:
        raise InputError(f"beam must be >= 1, got {beam}")
    if max_len < len(forced):
        raise InputError(f"forced prefix of {len(forced)} exceeds max_len {max_len}")
    live = [_Hyp(0.0, (), ())]
    finished = []
    for t in range(max_len):
        candidates = []
        for hyp in live:
            row = scorer([BOS_ID] + list(hyp.ids))
            if t < len(forced):
                allowed = [forced[t]]
            else:
                blocked = _blocked_ids([BOS_ID] + list(hyp.ids), joint)
                allowed = [i for i in range(len(row)) if i not in blocked]
            for tok in allowed:
                candidates.append(
                    _Hyp(hyp.neg_logp - float(row[tok]), hyp.ids + (tok,), hyp.logps + (float(row[tok]),))
                )
        candidates.sort()
        live = []
        for cand in candidates:
            if len(live) == beam:
                break
            if cand.ids[-1] == EOS_ID and t >= len(forced):
                finished.append(cand)
            else:
                live.append(cand)
        if not live:
            break
        if finished and min(finished).neg_logp < live[0].neg_logp:
            break  # no live extension can catch up (log-probs only decrease)
    finished.extend(live)
    best = min(finished)
    return list(best.ids), list(best.logps)


# ---------------------------------------------------------------------------
# model-backed scoring
# ---------------------------------------------------------------------------


def _log_softmax_row(row):
    return row - logsumexp(row)


class ModelScorer:
    """Single-example scorer: encodes once, re-scores the prefix per step."""

    def __init__(self, model: CaptionerModel, feat=None, skeleton_tokens=None):
        self.model = model
        cfg = model.config
        batch = Batch()
        if cfg.use_image:
            if feat is None:
                raise InputError("model expects image features")
            batch.img_vecs, batch.img_geom, batch.img_valid = pack_features(
                [feat], cfg.n_regions, cfg.d_img
            )
        if cfg.needs_enc_text:
            ids = cfg.enc_text_vocab.encode(skeleton_tokens or [], strict=True)
            batch.enc_txt_ids = np.array([ids], dtype=np.int64).reshape(1, len(ids))
            batch.enc_txt_valid = np.array([len(ids)])
        else:
            batch.enc_txt_ids = np.zeros((1, 0), dtype=np.int64)
            batch.enc_txt_valid = np.zeros(1, dtype=np.int64)
        self.memory, self.mem_valid = model.encode(batch)

    def __call__(self, prefix_ids):
        dec_in = np.array([prefix_ids], dtype=np.int64)
        logits = self.model.decode_logits(self.memory, self.mem_valid, dec_in)
        return _log_softmax_row(logits.data[0, -1])


def _validate_skeleton_tokens(tokens):
    bad = [t for t in tokens if is_reserved_token(t)]
    if bad:
        raise InputError(f"reserved tokens not allowed in a skeleton: {bad}")


def generate(model: CaptionerModel, feat=None, skeleton=None, beam=None, max_len=None):
    """Decode one image under the model's mode; skeleton overrides stage 1.

    skeleton: lemma list consumed per mode (encoder text for ske_enc/ske_ae,
    forced decoder prefix for ske_dec/ske_ae); must be None for img2cap and
    img2ske_gen. beam=None uses the configured beam; beam=1 is greedy.
    """
    cfg = model.config
    beam = cfg.beam if beam is None else beam
    if skeleton is not None:
        _validate_skeleton_tokens(skeleton)
    if cfg.mode in ("img2cap", "img2ske_gen") and skeleton:
        raise InputError(f"mode {cfg.mode} takes no skeleton")
    if cfg.mode == "ske_ae" and skeleton is None:
        raise InputError("ske_ae generation needs a conditioning skeleton")
    if cfg.mode == "img2ske_clf":
        raise InputError("classification checkpoints predict skeletons, not captions")

    enc_skeleton = skeleton if cfg.needs_enc_text else None
    scorer = ModelScorer(model, feat=feat, skeleton_tokens=enc_skeleton)
    budget = cfg.dec_budget - 1
    max_len = budget if max_len is None else min(max_len, budget)

    forced = ()
    if cfg.joint and skeleton is not None:
        forced = tuple(cfg.text_vocab.encode(skeleton, strict=True)) + (SEP_ID,)
        if len(forced) > max_len:
            raise InputError(f"skeleton of {len(skeleton)} does not fit decode budget {max_len}")

    if beam == 1:
        ids, logps = greedy_decode(scorer, max_len, joint=cfg.joint, forced=forced)
    else:
        ids, logps = beam_search(scorer, max_len, beam, joint=cfg.joint, forced=forced)
    tokens = cfg.text_vocab.decode(ids, keep_reserved=True)

    sep_missing = False
    if cfg.mode == "img2ske_gen":
        out_skeleton = [t for t in tokens if t not in RESERVED]
        caption = []
    elif cfg.joint:
        dec_skeleton, caption, sep_missing = split_joint(tokens)
        out_skeleton = list(skeleton) if skeleton is not None else dec_skeleton
        caption = [t for t in caption if t not in RESERVED]
        out_skeleton = [t for t in out_skeleton if t not in RESERVED]
    else:
        caption = [t for t in tokens if t not in RESERVED]
        out_skeleton = list(skeleton) if skeleton is not None else []

    return DecodeResult(
        skeleton=out_skeleton,
        caption=caption,
        token_logps=logps,
        total_logp=float(sum(logps)),
        sep_missing=sep_missing,
        mode=cfg.mode,
    )


# ---------------------------------------------------------------------------
# batched corpus decoding (greedy only)
# ---------------------------------------------------------------------------


def greedy_decode_corpus(model, feats_list, skeletons_list=None, max_len=None, batch_size=64):
    """Greedy-decode many examples with shared forward passes.

    skeletons_list (when given) is consumed per mode exactly like generate().
    Returns a list of DecodeResult in input order.
    """
    n = len(feats_list) if feats_list is not None else len(skeletons_list)
    if skeletons_list is None:
        skeletons_list = [None] * n
    out = []
    for start in range(0, n, batch_size):
        feats = feats_list[start: start + batch_size] if feats_list is not None else None
        skels = skeletons_list[start: start + batch_size]
        out.extend(_greedy_batch(model, feats, skels, max_len))
    return out


def _greedy_batch(model, feats, skels, max_len):
    cfg = model.config
    b = len(skels) if feats is None else len(feats)
    batch = Batch()
    if cfg.use_image:
        batch.img_vecs, batch.img_geom, batch.img_valid = pack_features(feats, cfg.n_regions, cfg.d_img)
    if cfg.needs_enc_text:
        rows = [cfg.enc_text_vocab.encode(s or [], strict=True) for s in skels]
        batch.enc_txt_ids = pad_id_rows(rows, min_len=0) if any(rows) else np.zeros((b, 0), dtype=np.int64)
        batch.enc_txt_valid = np.array([len(r) for r in rows], dtype=np.int64)
    else:
        batch.enc_txt_ids = np.zeros((b, 0), dtype=np.int64)
        batch.enc_txt_valid = np.zeros(b, dtype=np.int64)
    memory, mem_valid = model.encode(batch)

    budget = cfg.dec_budget - 1
    max_len = budget if max_len is None else min(max_len, budget)
    forced = []
    for s in skels:
        if s is not None:
            _validate_skeleton_tokens(s)
        if cfg.joint and s is not None:
            ids = tuple(cfg.text_vocab.encode(s, strict=True)) + (SEP_ID,)
            if len(ids) > max_len:
                raise InputError(f"skeleton of {len(s)} does not fit decode budget {max_len}")
            forced.append(ids)
        else:
            forced.append(())

    dec = np.full((b, 1), BOS_ID, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    sep_seen = np.zeros(b, dtype=bool)
    logps = [[] for _ in range(b)]
    for t in range(max_len):
        if done.all():
            break
        logits = model.decode_logits(memory, mem_valid, dec).data[:, -1]
        rows = logits - logsumexp(logits, axis=-1, keepdims=True)
        nxt = np.full(b, PAD_ID, dtype=np.int64)
        for i in range(b):
            if done[i]:
                continue
            if t < len(forced[i]):
                tok = forced[i][t]
            else:
                masked = rows[i].copy()
                masked[list(ALWAYS_BLOCKED)] = -np.inf
                if not cfg.joint or sep_seen[i]:
                    masked[SEP_ID] = -np.inf
                tok = int(np.argmax(masked))
            logps[i].append(float(rows[i][tok]))
            nxt[i] = tok
            if tok == SEP_ID:
                sep_seen[i] = True
            if tok == EOS_ID and t >= len(forced[i]):
                done[i] = True
        dec = np.concatenate([dec, nxt[:, None]], axis=1)

    results = []
    for i in range(b):
        ids = [tok for tok in dec[i, 1:].tolist() if tok != PAD_ID]
        if EOS_ID in ids:
            ids = ids[: ids.index(EOS_ID) + 1]
        tokens = cfg.text_vocab.decode(ids, keep_reserved=True)
        sep_missing = False
        if cfg.mode == "img2ske_gen":
            skeleton, caption = [t for t in tokens if t not in RESERVED], []
        elif cfg.joint:
            skeleton, caption, sep_missing = split_joint(tokens)
            if skels[i] is not None:
                skeleton = list(skels[i])
            skeleton = [t for t in skeleton if t not in RESERVED]
            caption = [t for t in caption if t not in RESERVED]
        else:
            caption = [t for t in tokens if t not in RESERVED]
            skeleton = list(skels[i]) if skels[i] is not None else []
        results.append(
            DecodeResult(
                skeleton=skeleton,
                caption=caption,
                token_logps=logps[i],
                total_logp=float(sum(logps[i])),
                sep_missing=sep_missing,
                mode=cfg.mode,
            )
        )
    return results
