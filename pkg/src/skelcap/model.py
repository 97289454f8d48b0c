"""Transformer encoder-decoder family for dual-stage captioning.

Six architecture modes share one parameter layout machine:

  img2cap      image -> caption (end-to-end baseline)
  img2ske_clf  image -> multilabel skeleton scores (sigmoid head)
  img2ske_gen  image -> skeleton sequence (autoregressive)
  ske_enc      image + skeleton (text-as-side encoder) -> caption
  ske_dec      image -> skeleton <sep> caption (joint decoder)
  ske_ae       image + skeleton -> skeleton <sep> caption

Image features enter as one global plus up to K regional vectors; each is
embedded Linear-ReLU-LayerNorm-Linear and summed with a linear projection of
its normalized box geometry. In text-as-side fusion the image tokens attend
to everything while skeleton tokens attend only to skeleton tokens.
"""

from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .skeletons import SkeletonVocab
from .tensor import NEG_INF, Tensor

PAD, BOS, EOS, SEP, UNK = "<pad>", "<bos>", "<eos>", "<sep>", "<unk>"
RESERVED = (PAD, BOS, EOS, SEP, UNK)
PAD_ID, BOS_ID, EOS_ID, SEP_ID, UNK_ID = range(5)

MODES = ("img2cap", "img2ske_clf", "img2ske_gen", "ske_enc", "ske_dec", "ske_ae")
MODE_NAMES = {
    "img2cap": "Img2Cap",
    "img2ske_clf": "Img2SkeClf",
    "img2ske_gen": "Img2SkeGen",
    "ske_enc": "SkeEnc",
    "ske_dec": "SkeDec",
    "ske_ae": "SkeAE",
}
JOINT_MODES = ("ske_dec", "ske_ae")
ENC_TEXT_MODES = ("ske_enc", "ske_ae")

CHECKPOINT_VERSION = 1


class InputError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def is_reserved_token(tok):
    return tok.lower() in {r.lower() for r in RESERVED} or tok.upper() in {"PAD", "BOS", "EOS", "SEP", "UNK"}


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------


class TextVocab:
    """Word-level vocabulary with fixed reserved ids 0..4."""

    def __init__(self, tokens):
        self.id_to_token = list(RESERVED) + list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, tok):
        return tok in self.token_to_id

    @classmethod
    def build(cls, token_lists, min_count=1):
        counts = Counter()
        for toks in token_lists:
            counts.update(toks)
        kept = sorted(
            (t for t, c in counts.items() if c >= min_count and not is_reserved_token(t)),
            key=lambda t: (-counts[t], t),
        )
        return cls(kept)

    @classmethod
    def from_skeleton_vocab(cls, ske_vocab: SkeletonVocab):
        return cls(ske_vocab.lemmas)

    def encode(self, tokens, strict=False):
        ids = []
        for t in tokens:
            if t in self.token_to_id:
                ids.append(self.token_to_id[t])
            elif strict:
                raise InputError(f"token {t!r} not in vocabulary")
            else:
                ids.append(UNK_ID)
        return ids

    def decode(self, ids, keep_reserved=False):
        toks = [self.id_to_token[i] for i in ids]
        if not keep_reserved:
            toks = [t for t in toks if t not in RESERVED]
        return toks

    def to_json(self):
        return {"tokens": self.id_to_token[len(RESERVED):]}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["tokens"])


# ---------------------------------------------------------------------------
# image features
# ---------------------------------------------------------------------------


@dataclass
class Region:
    vec: np.ndarray
    box: tuple  # x1, y1, x2, y2 in pixels
    image_size: tuple  # W, H

    def __post_init__(self):
        self.vec = np.asarray(self.vec, dtype=np.float64)
        x1, y1, x2, y2 = self.box
        w, h = self.image_size
        if not (0 <= x1 < x2 <= w and 0 <= y1 < y2 <= h):
            raise InputError(f"invalid box {self.box} for image size {self.image_size}")

    def geometry(self):
        x1, y1, x2, y2 = self.box
        w, h = self.image_size
        return np.array([x1 / w, y1 / h, x2 / w, y2 / h, (x2 - x1) * (y2 - y1) / (w * h)])


@dataclass
class ImageFeatures:
    global_vec: np.ndarray
    regions: list = field(default_factory=list)

    def __post_init__(self):
        self.global_vec = np.asarray(self.global_vec, dtype=np.float64)

    @property
    def d_img(self):
        return self.global_vec.shape[0]

    def to_json(self):
        return {
            "global": self.global_vec.tolist(),
            "regions": [
                {"vec": r.vec.tolist(), "box": list(r.box) + list(r.image_size)} for r in self.regions
            ],
        }

    @classmethod
    def from_json(cls, obj):
        regions = [
            Region(vec=r["vec"], box=tuple(r["box"][:4]), image_size=tuple(r["box"][4:6]))
            for r in obj["regions"]
        ]
        return cls(global_vec=obj["global"], regions=regions)


GLOBAL_GEOMETRY = np.array([0.0, 0.0, 1.0, 1.0, 1.0])


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class ModelConfig:
    mode: str = "img2cap"
    d_model: int = 64
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    d_ff: int = 0  # 0 -> d_model (embedding and filter sizes match)
    d_img: int = 32
    n_regions: int = 16
    max_caption_len: int = 36
    max_joint_len: int = 72
    max_skeleton_len: int = 10
    use_image: bool = True
    beam: int = 5
    top_k_skeleton: int = 8
    dropout: float = 0.0
    seed: int = 0
    text_vocab: TextVocab | None = None
    enc_text_vocab: TextVocab | None = None  # defaults to text_vocab
    skeleton_vocab: SkeletonVocab | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.d_model % self.heads != 0:
            raise ValueError(f"heads={self.heads} must divide d_model={self.d_model}")
        if self.max_joint_len < self.max_caption_len:
            raise ValueError("max_joint_len must be >= max_caption_len")
        if self.d_ff == 0:
            self.d_ff = self.d_model
        if self.enc_text_vocab is None:
            self.enc_text_vocab = self.text_vocab

    @property
    def needs_enc_text(self):
        return self.mode in ENC_TEXT_MODES

    @property
    def joint(self):
        return self.mode in JOINT_MODES

    @property
    def has_decoder(self):
        return self.mode != "img2ske_clf"

    @property
    def dec_budget(self):
        # decoded sequence budget including BOS position
        if self.joint:
            return self.max_joint_len
        if self.mode == "img2ske_gen":
            return self.max_skeleton_len + 2
        return self.max_caption_len

    @property
    def enc_text_budget(self):
        # iterative-refinement skeletons are whole captions
        return max(self.max_skeleton_len, self.max_caption_len)

    def to_json(self):
        obj = {
            k: getattr(self, k)
            for k in (
                "mode", "d_model", "enc_layers", "dec_layers", "heads", "d_ff", "d_img",
                "n_regions", "max_caption_len", "max_joint_len", "max_skeleton_len",
                "use_image", "beam", "top_k_skeleton", "dropout", "seed",
            )
        }
        obj["text_vocab"] = self.text_vocab.to_json() if self.text_vocab else None
        obj["enc_text_vocab"] = (
            self.enc_text_vocab.to_json()
            if self.enc_text_vocab is not None and self.enc_text_vocab is not self.text_vocab
            else None
        )
        obj["skeleton_vocab"] = self.skeleton_vocab.to_json() if self.skeleton_vocab else None
        return obj

    @classmethod
    def from_json(cls, obj):
        obj = dict(obj)
        tv = obj.pop("text_vocab", None)
        ev = obj.pop("enc_text_vocab", None)
        sv = obj.pop("skeleton_vocab", None)
        return cls(
            text_vocab=TextVocab.from_json(tv) if tv else None,
            enc_text_vocab=TextVocab.from_json(ev) if ev else None,
            skeleton_vocab=SkeletonVocab.from_json(sv) if sv else None,
            **obj,
        )


# ---------------------------------------------------------------------------
# attention masks
# ---------------------------------------------------------------------------


@dataclass
class AttentionMaskSet:
    encoder: np.ndarray  # [Tenc, Tenc] additive
    decoder: np.ndarray | None  # [Tdec, Tdec]
    cross: np.ndarray | None  # [Tdec, Tenc]


def _self_visibility(n_img, n_txt, img_valid, txt_valid):
    n = n_img + n_txt
    vis = np.zeros((n, n), dtype=bool)
    valid = np.zeros(n, dtype=bool)
    valid[:img_valid] = True
    valid[n_img:n_img + txt_valid] = True
    # image queries see every valid key; text queries see valid text keys only
    vis[:n_img, :] = valid
    vis[n_img:, n_img:] = valid[n_img:]
    # padded query rows keep self-visibility so no row is fully blocked
    for i in range(n):
        if not valid[i]:
            vis[i, :] = False
            vis[i, i] = True
    return vis


def causal_visibility(n):
    return np.tril(np.ones((n, n), dtype=bool))


def _to_additive(vis):
    return np.where(vis, 0.0, NEG_INF)


def build_masks(mode, n_img, n_txt_enc, n_dec, padding=None):
    """Build the per-mode additive mask set for one example.

    ``padding`` optionally maps {"img": v, "txt": v, "dec": v} to valid
    prefix lengths; everything past them is blocked as keys.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    padding = padding or {}
    img_valid = padding.get("img", n_img)
    txt_valid = padding.get("txt", n_txt_enc)
    dec_valid = padding.get("dec", n_dec)
    if mode not in ENC_TEXT_MODES and n_txt_enc:
        raise InputError(f"mode {mode} takes no encoder text")

    enc_vis = _self_visibility(n_img, n_txt_enc, img_valid, txt_valid)
    decoder = cross = None
    if mode != "img2ske_clf" and n_dec:
        decoder = _to_additive(causal_visibility(n_dec))
        mem_valid = np.zeros(n_img + n_txt_enc, dtype=bool)
        mem_valid[:img_valid] = True
        mem_valid[n_img:n_img + txt_valid] = True
        cross_vis = np.tile(mem_valid, (n_dec, 1))
        del dec_valid  # padded decoder rows still see valid memory; loss masks them
        cross = _to_additive(cross_vis)
    return AttentionMaskSet(encoder=_to_additive(enc_vis), decoder=decoder, cross=cross)


def _batch_encoder_mask(n_img, n_txt, img_valid, txt_valid):
    """[B, 1, T, T] additive masks from per-example valid lengths."""
    b = len(img_valid)
    n = n_img + n_txt
    out = np.empty((b, 1, n, n))
    for i in range(b):
        vis = _self_visibility(n_img, n_txt, int(img_valid[i]), int(txt_valid[i]) if n_txt else 0)
        out[i, 0] = _to_additive(vis)
    return out


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    """Padded arrays for one forward pass; integer arrays are numpy int64."""

    img_vecs: np.ndarray | None = None  # [B, 1+R, d_img], row 0 = global
    img_geom: np.ndarray | None = None  # [B, 1+R, 5]
    img_valid: np.ndarray | None = None  # [B] valid image-token counts
    enc_txt_ids: np.ndarray | None = None  # [B, S]
    enc_txt_valid: np.ndarray | None = None  # [B]
    dec_in: np.ndarray | None = None  # [B, T]
    dec_tgt: np.ndarray | None = None  # [B, T]
    dec_tgt_mask: np.ndarray | None = None  # [B, T] 1.0 where a real target
    clf_targets: np.ndarray | None = None  # [B, V_ske]

    @property
    def size(self):
        for arr in (self.img_vecs, self.enc_txt_ids, self.dec_in, self.clf_targets):
            if arr is not None:
                return arr.shape[0]
        return 0


def pack_features(feats, n_regions_cap, d_img):
    """Stack ImageFeatures into padded arrays (vecs, geometry, valid counts)."""
    b = len(feats)
    r_max = max((len(f.regions) for f in feats), default=0)
    vecs = np.zeros((b, 1 + r_max, d_img))
    geom = np.zeros((b, 1 + r_max, 5))
    valid = np.zeros(b, dtype=np.int64)
    for i, f in enumerate(feats):
        if len(f.regions) > n_regions_cap:
            raise InputError(f"{len(f.regions)} regions exceeds configured cap {n_regions_cap}")
        if f.global_vec.shape != (d_img,):
            raise InputError(f"global feature dim {f.global_vec.shape} != ({d_img},)")
        vecs[i, 0] = f.global_vec
        geom[i, 0] = GLOBAL_GEOMETRY
        for j, r in enumerate(f.regions, start=1):
            if r.vec.shape != (d_img,):
                raise InputError(f"region feature dim {r.vec.shape} != ({d_img},)")
            vecs[i, j] = r.vec
            geom[i, j] = r.geometry()
        valid[i] = 1 + len(f.regions)
    return vecs, geom, valid


def pad_id_rows(rows, pad=PAD_ID, min_len=1):
    b = len(rows)
    t = max(max((len(r) for r in rows), default=0), min_len)
    out = np.full((b, t), pad, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------


def topk_indices(scores, k):
    """Indices of the k best scores, descending, ties broken by lower index.

    k is clamped to [0, len(scores)].
    """
    k = max(0, min(int(k), len(scores)))
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:k]


def _glorot(rng, fan_in, fan_out):
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=(fan_in, fan_out))


class CaptionerModel:
    def __init__(self, config: ModelConfig):
        if config.has_decoder and config.text_vocab is None:
            raise ValueError("generative modes need a text_vocab")
        if config.mode == "img2ske_clf" and config.skeleton_vocab is None:
            raise ValueError("classification mode needs a skeleton_vocab")
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._dropout_rng = np.random.default_rng(config.seed + 101)
        self._init_params()

    # -- parameters ----------------------------------------------------------

    def _add(self, name, data):
        self.params[name] = Tensor(data, requires_grad=True)
        return self.params[name]

    def _init_params(self):
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        d, dff = cfg.d_model, cfg.d_ff

        if cfg.use_image:
            self._add("feat.w1", _glorot(rng, cfg.d_img, d))
            self._add("feat.b1", np.zeros(d))
            self._add("feat.ln.g", np.ones(d))
            self._add("feat.ln.b", np.zeros(d))
            self._add("feat.w2", _glorot(rng, d, d))
            self._add("feat.b2", np.zeros(d))
            self._add("geom.w", _glorot(rng, 5, d))
            self._add("geom.b", np.zeros(d))
        else:
            self._add("placeholder", rng.normal(0.0, 0.1, size=(1, d)))

        if cfg.needs_enc_text:
            v_enc = len(cfg.enc_text_vocab)
            self._add("enc_txt.emb", rng.normal(0.0, 0.1, size=(v_enc, d)))
            self._add("enc_txt.pos", rng.normal(0.0, 0.05, size=(cfg.enc_text_budget, d)))

        for i in range(cfg.enc_layers):
            self._init_attn(rng, f"enc.{i}.attn", d)
            self._init_ln(f"enc.{i}.ln1", d)
            self._init_ffn(rng, f"enc.{i}.ffn", d, dff)
            self._init_ln(f"enc.{i}.ln2", d)
        self._init_ln("enc.final_ln", d)

        if cfg.mode == "img2ske_clf":
            v_ske = len(cfg.skeleton_vocab)
            self._add("clf.w", _glorot(rng, d, v_ske))
            self._add("clf.b", np.zeros(v_ske))
            return

        v_out = len(cfg.text_vocab)
        self._add("dec.emb", rng.normal(0.0, 0.1, size=(v_out, d)))
        self._add("dec.pos", rng.normal(0.0, 0.05, size=(cfg.dec_budget, d)))
        for i in range(cfg.dec_layers):
            self._init_attn(rng, f"dec.{i}.self", d)
            self._init_ln(f"dec.{i}.ln1", d)
            self._init_attn(rng, f"dec.{i}.cross", d)
            self._init_ln(f"dec.{i}.ln2", d)
            self._init_ffn(rng, f"dec.{i}.ffn", d, dff)
            self._init_ln(f"dec.{i}.ln3", d)
        self._init_ln("dec.final_ln", d)
        self._add("out.w", _glorot(rng, d, v_out))
        self._add("out.b", np.zeros(v_out))

    def _init_attn(self, rng, prefix, d):
        for part in ("wq", "wk", "wv", "wo"):
            self._add(f"{prefix}.{part}", _glorot(rng, d, d))
        self._add(f"{prefix}.bo", np.zeros(d))

    def _init_ffn(self, rng, prefix, d, dff):
        self._add(f"{prefix}.w1", _glorot(rng, d, dff))
        self._add(f"{prefix}.b1", np.zeros(dff))
        self._add(f"{prefix}.w2", _glorot(rng, dff, d))
        self._add(f"{prefix}.b2", np.zeros(d))

    def _init_ln(self, prefix, d):
        self._add(f"{prefix}.g", np.ones(d))
        self._add(f"{prefix}.b", np.zeros(d))

    def param_count(self):
        return sum(p.size for p in self.params.values())

    # -- building blocks -------------------------------------------------------

    def _ln(self, x, prefix):
        return T.layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def _attn(self, prefix, q_in, kv_in, mask, collect=None, tag=None):
        p = self.params
        q = T.matmul(q_in, p[f"{prefix}.wq"])
        k = T.matmul(kv_in, p[f"{prefix}.wk"])
        v = T.matmul(kv_in, p[f"{prefix}.wv"])
        if collect is not None:
            ctx, weights = T.masked_attention(q, k, v, mask, self.config.heads, return_weights=True)
            collect.setdefault(tag, []).append(weights.data.copy())
        else:
            ctx = T.masked_attention(q, k, v, mask, self.config.heads)
        return T.matmul(ctx, p[f"{prefix}.wo"]) + p[f"{prefix}.bo"]

    def _ffn(self, prefix, x):
        p = self.params
        h = T.relu(T.matmul(x, p[f"{prefix}.w1"]) + p[f"{prefix}.b1"])
        return T.matmul(h, p[f"{prefix}.w2"]) + p[f"{prefix}.b2"]

    def _dropout(self, x, train):
        rate = self.config.dropout
        if not train or rate <= 0.0:
            return x
        keep = (self._dropout_rng.random(x.shape) >= rate) / (1.0 - rate)
        return x * Tensor(keep)

    # -- encoder ---------------------------------------------------------------

    def embed_regions(self, feat: ImageFeatures):
        """Embed one image's global+regional features; returns [1+R, d_model]."""
        vecs, geom, _ = pack_features([feat], self.config.n_regions, self.config.d_img)
        return self._embed_image(vecs, geom)[0]

    def _embed_image(self, vecs, geom):
        p = self.params
        h = T.relu(T.matmul(Tensor(vecs), p["feat.w1"]) + p["feat.b1"])
        h = T.layer_norm(h, p["feat.ln.g"], p["feat.ln.b"])
        h = T.matmul(h, p["feat.w2"]) + p["feat.b2"]
        g = T.matmul(Tensor(geom), p["geom.w"]) + p["geom.b"]
        return h + g

    def encode(self, batch: Batch, collect=None, train=False):
        """Run the encoder; returns (memory [B,M,d], mem_valid [B]->(img_v, txt_v))."""
        cfg = self.config
        blocks = []
        if cfg.use_image:
            if batch.img_vecs is None:
                raise InputError("use_image=true model needs image features")
            b = batch.img_vecs.shape[0]
            n_img = batch.img_vecs.shape[1]
            img_valid = batch.img_valid
            blocks.append(self._embed_image(batch.img_vecs, batch.img_geom))
        else:
            b = batch.size
            n_img = 1
            img_valid = np.ones(b, dtype=np.int64)
            ph = T.reshape(self.params["placeholder"], (1, 1, cfg.d_model))
            blocks.append(ph + Tensor(np.zeros((b, 1, cfg.d_model))))

        n_txt = 0
        txt_valid = np.zeros(b, dtype=np.int64)
        if cfg.needs_enc_text:
            if batch.enc_txt_ids is None:
                raise InputError(f"mode {cfg.mode} needs encoder skeleton tokens")
            n_txt = batch.enc_txt_ids.shape[1]
            if n_txt > cfg.enc_text_budget:
                raise InputError(f"encoder text length {n_txt} exceeds budget {cfg.enc_text_budget}")
            txt_valid = batch.enc_txt_valid
            if n_txt:
                emb = T.embedding(self.params["enc_txt.emb"], batch.enc_txt_ids)
                pos = self.params["enc_txt.pos"][:n_txt]
                blocks.append(emb + pos)
        elif batch.enc_txt_ids is not None and batch.enc_txt_ids.shape[1] > 0:
            raise InputError(f"mode {cfg.mode} takes no encoder text")

        x = blocks[0] if len(blocks) == 1 else T.concat(blocks, axis=1)
        mask = _batch_encoder_mask(n_img, n_txt, img_valid, txt_valid)
        for i in range(cfg.enc_layers):
            normed = self._ln(x, f"enc.{i}.ln1")
            h = self._attn(f"enc.{i}.attn", normed, normed, mask, collect=collect, tag="encoder")
            x = x + self._dropout(h, train)
            x = x + self._dropout(self._ffn(f"enc.{i}.ffn", self._ln(x, f"enc.{i}.ln2")), train)
        memory = self._ln(x, "enc.final_ln")

        mem_valid = np.zeros((b, n_img + n_txt))
        for i in range(b):
            mem_valid[i, : img_valid[i]] = 1.0
            mem_valid[i, n_img: n_img + txt_valid[i]] = 1.0
        return memory, mem_valid

    # -- decoder ---------------------------------------------------------------

    def decode_logits(self, memory, mem_valid, dec_in, collect=None, train=False):
        """Next-token logits for every prefix position; dec_in starts with BOS."""
        cfg = self.config
        if not cfg.has_decoder:
            raise InputError("classification mode has no decoder")
        t = dec_in.shape[1]
        if t > self.params["dec.pos"].shape[0]:
            raise InputError(f"decoder length {t} exceeds budget {self.params['dec.pos'].shape[0]}")
        x = T.embedding(self.params["dec.emb"], dec_in) + self.params["dec.pos"][:t]
        causal = _to_additive(causal_visibility(t))[None, None]
        cross = np.where(mem_valid[:, None, None, :] > 0, 0.0, NEG_INF)
        for i in range(cfg.dec_layers):
            normed = self._ln(x, f"dec.{i}.ln1")
            h = self._attn(f"dec.{i}.self", normed, normed, causal, collect=collect, tag="dec_self")
            x = x + self._dropout(h, train)
            h = self._attn(f"dec.{i}.cross", self._ln(x, f"dec.{i}.ln2"), memory, cross,
                           collect=collect, tag="dec_cross")
            x = x + self._dropout(h, train)
            x = x + self._dropout(self._ffn(f"dec.{i}.ffn", self._ln(x, f"dec.{i}.ln3")), train)
        x = self._ln(x, "dec.final_ln")
        return T.matmul(x, self.params["out.w"]) + self.params["out.b"]

    # -- heads -------------------------------------------------------------------

    def classify_scores(self, batch: Batch, collect=None):
        """Per-label sigmoid scores over the skeleton vocabulary."""
        memory, mem_valid = self.encode(batch, collect=collect)
        pooled = self._pool(memory, mem_valid)
        logits = T.matmul(pooled, self.params["clf.w"]) + self.params["clf.b"]
        return T.sigmoid(logits), logits

    @staticmethod
    def _pool(memory, mem_valid):
        m = Tensor(mem_valid[:, :, None])
        total = (memory * m).sum(axis=1)
        inv = Tensor((1.0 / mem_valid.sum(axis=1))[:, None])
        return total * inv

    def classify_skeleton(self, feats, k=None):
        """Top-k skeleton lemmas per image, descending score, ties by vocab id."""
        cfg = self.config
        if cfg.mode != "img2ske_clf":
            raise InputError("classify_skeleton requires an img2ske_clf model")
        k = cfg.top_k_skeleton if k is None else k
        vecs, geom, valid = pack_features(feats, cfg.n_regions, cfg.d_img)
        batch = Batch(img_vecs=vecs, img_geom=geom, img_valid=valid)
        scores, _ = self.classify_scores(batch)
        lemmas = cfg.skeleton_vocab.lemmas
        out = []
        for row in scores.data:
            order = topk_indices(row, k)
            out.append(([lemmas[i] for i in order], [float(row[i]) for i in order]))
        return out

    # -- losses ------------------------------------------------------------------

    def training_loss(self, batch: Batch, train=True):
        if batch.size == 0:
            raise InputError("empty batch")
        cfg = self.config
        if cfg.mode == "img2ske_clf":
            if batch.clf_targets is None:
                raise InputError("classification batch needs multilabel targets")
            _, logits = self.classify_scores(batch)
            y = Tensor(batch.clf_targets)
            # sigmoid cross entropy: softplus(z) - z*y, averaged over labels
            return (T.softplus(logits) - logits * y).mean()
        if batch.dec_in is None or batch.dec_tgt is None:
            raise InputError("generative batch needs decoder targets")
        memory, mem_valid = self.encode(batch, train=train)
        logits = self.decode_logits(memory, mem_valid, batch.dec_in, train=train)
        logp = T.log_softmax(logits, axis=-1)
        tok_lp = T.take_along_last(logp, batch.dec_tgt)
        mask = Tensor(batch.dec_tgt_mask)
        count = batch.dec_tgt_mask.sum()
        if count == 0:
            raise InputError("batch has no unpadded target tokens")
        return -(tok_lp * mask).sum() * (1.0 / count)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: CaptionerModel, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    offset = 0
    blobs = []
    for name in sorted(model.params):
        data = model.params[name].data
        raw = data.astype("<f8").tobytes()
        entries.append({"name": name, "shape": list(data.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_json(),
        "params": entries,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    with open(os.path.join(out_dir, "params.bin"), "wb") as fh:
        fh.write(b"".join(blobs))


def load_checkpoint(ckpt_dir) -> CaptionerModel:
    manifest_path = os.path.join(ckpt_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise CheckpointError(f"no checkpoint manifest at {manifest_path}")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    version = manifest.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version!r}")
    config = ModelConfig.from_json(manifest["config"])
    model = CaptionerModel(config)
    with open(os.path.join(ckpt_dir, "params.bin"), "rb") as fh:
        blob = fh.read()
    for entry in manifest["params"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in model.params:
            raise CheckpointError(f"unexpected parameter {name!r} in checkpoint")
        if model.params[name].shape != shape:
            raise CheckpointError(f"shape mismatch for {name}: {shape} vs {model.params[name].shape}")
        raw = blob[entry["offset"]: entry["offset"] + entry["nbytes"]]
        model.params[name].data = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    return model


def clone_model(model: CaptionerModel) -> CaptionerModel:
    twin = CaptionerModel(replace(model.config))
    for name, p in model.params.items():
        twin.params[name].data = p.data.copy()
    return twin
