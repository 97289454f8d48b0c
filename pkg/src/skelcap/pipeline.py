"""End-to-end orchestration of the two-stage captioner.

An experiment owns one output directory. Stage 1 (skeleton prediction) and
stage 2 (conditioned captioning) communicate only through skeleton files on
disk, so each stage can be rerun or swapped independently. Reports compare a
treatment condition against the end-to-end baseline on the eval split, plus a
gold-skeleton row that bounds what stage 2 could do with perfect stage 1.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields

import numpy as np

from .data import PivotSpec, load_corpus
from .decode import generate, greedy_decode_corpus
from .metrics import cider, hallucination_rate, length_profile, skeleton_prf
from .model import (
    BOS_ID,
    EOS_ID,
    SEP_ID,
    Batch,
    CaptionerModel,
    ModelConfig,
    TextVocab,
    pack_features,
    pad_id_rows,
    save_checkpoint,
)
from .optim import Adam, LrSchedule
from .skeletons import (
    ITERATIVE,
    ITERATIVE_REFINEMENT,
    NOUNS_VERBS,
    PREDICTED,
    SALIENT_NOUNS_VERBS,
    VARIANTS,
    ConfigError,
    SkeletonSpec,
    build_vocab,
    extract_skeleton,
    load_lexicon,
    tfidf_scores,
    tokenize,
)
from .tensor import FiniteError, backward

REPORT_SCHEMA = 1

STAGE1_KINDS = ("classification", "generation", "none", "iterative")
STAGE2_MODES = ("ske_enc", "ske_dec", "ske_ae")  # the img2cap baseline is always trained
STAGE1_MODE = {"classification": "img2ske_clf", "generation": "img2ske_gen"}

# per-stage offsets keep init and batching streams independent
SEED_LANES = {"baseline": 0, "stage1": 1, "stage2": 2, "stage2_unpaired": 3}


class DivergenceError(RuntimeError):
    pass


class ArtifactError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _from_json_strict(cls, obj, what):
    known = {f.name for f in fields(cls)}
    unknown = set(obj) - known
    if unknown:
        raise ConfigError(f"unknown {what} options: {sorted(unknown)}")
    return cls(**obj)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    peak_lr: float = 3e-4
    warmup_steps: int = 100
    decay_interval: int = 500
    decay_rate: float = 0.95
    eval_interval: int = 100
    patience: int = 5

    def schedule(self):
        return LrSchedule(self.peak_lr, self.warmup_steps, self.decay_interval, self.decay_rate)

    def to_json(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_json(cls, obj):
        return _from_json_strict(cls, obj, "training")


@dataclass
class ModelShape:
    """Architecture knobs shared by every model an experiment trains."""

    d_model: int = 64
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    d_ff: int = 0
    d_img: int = 32
    n_regions: int = 4
    max_caption_len: int = 20
    max_joint_len: int = 28
    max_skeleton_len: int = 8
    beam: int = 1
    top_k_skeleton: int = 8
    dropout: float = 0.0

    def to_json(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_json(cls, obj):
        return _from_json_strict(cls, obj, "model")


@dataclass
class ExperimentPlan:
    corpus_dir: str
    out_dir: str = ""
    skeleton_variant: str = NOUNS_VERBS
    stage1: str = "classification"
    stage2_mode: str = "ske_enc"
    use_image: bool = True
    train_skeleton_source: str = "gold"  # or "predicted"
    eval_split: str = "val"
    seed: int = 0
    ske_min_count: int = 50
    stage1_beam: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelShape = field(default_factory=ModelShape)

    def __post_init__(self):
        if self.skeleton_variant not in VARIANTS:
            raise ConfigError(f"unknown skeleton variant {self.skeleton_variant!r}")
        if self.stage1 not in STAGE1_KINDS:
            raise ConfigError(f"unknown stage-1 kind {self.stage1!r}")
        if self.stage2_mode not in STAGE2_MODES:
            raise ConfigError(f"unknown stage-2 mode {self.stage2_mode!r}")
        if self.train_skeleton_source not in ("gold", "predicted"):
            raise ConfigError(f"unknown skeleton source {self.train_skeleton_source!r}")
        if self.stage2_mode == "ske_dec" and self.stage1 != "none":
            raise ConfigError("ske_dec predicts its own skeleton; stage1 must be 'none'")
        if self.stage2_mode in ("ske_enc", "ske_ae") and self.stage1 == "none":
            raise ConfigError(f"{self.stage2_mode} needs a stage-1 skeleton predictor")
        if self.skeleton_variant == ITERATIVE_REFINEMENT and self.stage1 != "iterative":
            raise ConfigError("iterative skeletons require stage1='iterative'")
        if self.stage1 == "iterative" and self.skeleton_variant != ITERATIVE_REFINEMENT:
            raise ConfigError("stage1='iterative' implies the iterative skeleton variant")
        if self.stage1 == "iterative" and self.train_skeleton_source != "predicted":
            raise ConfigError("iterative refinement conditions on decoded captions; "
                              "set train_skeleton_source='predicted'")
        if self.stage2_mode == "ske_dec" and self.train_skeleton_source != "gold":
            raise ConfigError("ske_dec trains its joint prefix on gold skeletons")
        if not self.use_image and self.stage2_mode not in ("ske_enc", "ske_ae"):
            raise ConfigError("unpaired experiments need a text-conditioned stage-2 mode")

    def to_json(self):
        obj = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("train", "model")}
        obj["train"] = self.train.to_json()
        obj["model"] = self.model.to_json()
        return obj

    @classmethod
    def from_json(cls, obj):
        obj = dict(obj)
        train = TrainConfig.from_json(obj.pop("train", {}))
        shape = ModelShape.from_json(obj.pop("model", {}))
        known = {f.name for f in fields(cls)} - {"train", "model"}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown plan options: {sorted(unknown)}")
        return cls(train=train, model=shape, **obj)


# ---------------------------------------------------------------------------
# experiment context: corpus, vocabularies, gold skeletons
# ---------------------------------------------------------------------------


def gold_skeletons(examples, variant):
    """Gold SkeletonSpec per image id, extracted from clean captions."""
    tfidf = [None] * len(examples)
    if variant == SALIENT_NOUNS_VERBS:
        docs = [[t.lemma for t in ex.clean.tags] for ex in examples]
        tfidf = tfidf_scores(docs)
    return {
        ex.image_id: extract_skeleton(ex.clean.tags, variant, tfidf=scores)
        for ex, scores in zip(examples, tfidf)
    }


class ExperimentContext:
    """Everything derived from the corpus that every stage shares."""

    def __init__(self, plan: ExperimentPlan, corpus=None, lexicon=None):
        self.plan = plan
        from_disk = corpus is None
        self.corpus = load_corpus(plan.corpus_dir) if from_disk else corpus
        if "train" not in self.corpus or plan.eval_split not in self.corpus:
            raise ArtifactError(f"corpus needs 'train' and {plan.eval_split!r} splits")
        lex_path = os.path.join(plan.corpus_dir, "lexicon.tsv")
        if lexicon is not None:
            self.lexicon = lexicon
        elif os.path.exists(lex_path):
            self.lexicon = load_lexicon(lex_path)
        elif from_disk:
            # hallucination scoring degrades silently without POS tags
            raise ArtifactError(f"corpus at {plan.corpus_dir} has no lexicon.tsv")
        else:
            self.lexicon = {}

        variant = NOUNS_VERBS if plan.stage1 == "iterative" else plan.skeleton_variant
        self.gold = {split: gold_skeletons(exs, variant) for split, exs in self.corpus.items()}
        self.gold_by_id = {i: s for split in self.gold.values() for i, s in split.items()}

        train = self.corpus["train"]
        token_lists = [tokenize(ex.noisy.text) for ex in train]
        token_lists += [tokenize(ex.clean.text) for ex in train]
        token_lists += [self.gold["train"][ex.image_id].tokens for ex in train]
        self.text_vocab = TextVocab.build(token_lists)
        self.skeleton_vocab = build_vocab(
            [self.gold["train"][ex.image_id].tokens for ex in train],
            min_count=plan.ske_min_count,
        )

    def model_config(self, mode, use_image=True, seed_lane=0):
        shape = self.plan.model
        text_vocab = self.text_vocab
        if mode == "img2ske_gen":
            text_vocab = TextVocab.from_skeleton_vocab(self.skeleton_vocab)
        return ModelConfig(
            mode=mode,
            use_image=use_image,
            seed=self.plan.seed * 10 + seed_lane,
            text_vocab=text_vocab,
            skeleton_vocab=self.skeleton_vocab,
            **shape.to_json(),
        )

    def features(self, examples):
        return [ex.features for ex in examples]


# ---------------------------------------------------------------------------
# batch assembly
# ---------------------------------------------------------------------------


def _fit(tokens, limit):
    return list(tokens)[: max(0, limit)]


def assemble_batch(config: ModelConfig, examples, skeleton_for=None, caption_for=None):
    """Build one padded Batch for the config's mode.

    skeleton_for / caption_for map an example to token lists; captions default
    to the noisy text (the training target).
    """
    if caption_for is None:
        caption_for = lambda ex: tokenize(ex.noisy.text)
    batch = Batch()
    if config.use_image:
        batch.img_vecs, batch.img_geom, batch.img_valid = pack_features(
            [ex.features for ex in examples], config.n_regions, config.d_img
        )
    else:
        batch.enc_txt_ids = np.zeros((len(examples), 0), dtype=np.int64)
        batch.enc_txt_valid = np.zeros(len(examples), dtype=np.int64)

    if config.needs_enc_text:
        rows = []
        for ex in examples:
            toks = _fit(skeleton_for(ex), config.enc_text_budget)
            rows.append(config.enc_text_vocab.encode(toks))
        batch.enc_txt_ids = pad_id_rows(rows, min_len=0) if any(rows) else np.zeros(
            (len(examples), 0), dtype=np.int64
        )
        batch.enc_txt_valid = np.array([len(r) for r in rows], dtype=np.int64)

    if config.mode == "img2ske_clf":
        targets = np.zeros((len(examples), len(config.skeleton_vocab)))
        for i, ex in enumerate(examples):
            for lemma in config.skeleton_vocab.filter_tokens(skeleton_for(ex)):
                targets[i, config.skeleton_vocab.lemma_to_id[lemma]] = 1.0
        batch.clf_targets = targets
        return batch

    dec_in, dec_tgt = [], []
    for ex in examples:
        if config.mode == "img2ske_gen":
            y = config.text_vocab.encode(
                _fit(config.skeleton_vocab.filter_tokens(skeleton_for(ex)), config.max_skeleton_len)
            ) + [EOS_ID]
        elif config.joint:
            ske = config.text_vocab.encode(_fit(skeleton_for(ex), config.max_skeleton_len))
            cap = config.text_vocab.encode(
                _fit(caption_for(ex), config.max_joint_len - len(ske) - 2)
            )
            y = ske + [SEP_ID] + cap + [EOS_ID]
        else:
            y = config.text_vocab.encode(_fit(caption_for(ex), config.max_caption_len - 1)) + [EOS_ID]
        dec_in.append([BOS_ID] + y[:-1])
        dec_tgt.append(y)
    t = max(len(r) for r in dec_tgt)
    batch.dec_in = pad_id_rows(dec_in, min_len=t)
    batch.dec_tgt = pad_id_rows(dec_tgt, min_len=t)
    batch.dec_tgt_mask = np.zeros((len(examples), t))
    for i, y in enumerate(dec_tgt):
        batch.dec_tgt_mask[i, : len(y)] = 1.0
    return batch


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def train_model(model, train_examples, val_examples, tcfg: TrainConfig, rng,
                skeleton_for=None, caption_for=None):
    """Optimize in place; returns (best_model, log_rows).

    Early-stops after ``patience`` evaluations without a validation-loss
    improvement; the returned model carries the best-validation parameters.
    """
    config = model.config
    schedule = tcfg.schedule()
    opt = Adam(model.params)
    log = []
    if tcfg.steps == 0:
        return model, log

    def val_loss():
        total, count = 0.0, 0
        for start in range(0, len(val_examples), tcfg.batch_size):
            chunk = val_examples[start: start + tcfg.batch_size]
            batch = assemble_batch(config, chunk, skeleton_for, caption_for)
            total += model.training_loss(batch, train=False).item() * len(chunk)
            count += len(chunk)
        return total / count

    order = []
    best = (np.inf, None)
    since_best = 0
    running = []
    for step in range(1, tcfg.steps + 1):
        while len(order) < tcfg.batch_size:
            order += list(rng.permutation(len(train_examples)))
        take, order = order[: tcfg.batch_size], order[tcfg.batch_size:]
        chunk = [train_examples[i] for i in take]
        batch = assemble_batch(config, chunk, skeleton_for, caption_for)
        try:
            loss = model.training_loss(batch, train=True)
            value = loss.item()
            if not np.isfinite(value):
                raise FiniteError(f"loss is {value}")
            opt.zero_grad()
            backward(loss)
        except FiniteError as exc:
            raise DivergenceError(f"training diverged at step {step}: {exc}") from exc
        opt.step(lr=schedule.at(step))
        running.append(value)

        if step % tcfg.eval_interval == 0 or step == tcfg.steps:
            vl = val_loss()
            log.append({
                "step": step,
                "train_loss": float(np.mean(running)),
                "val_loss": vl,
                "lr": schedule.at(step),
            })
            running = []
            if vl < best[0]:
                best = (vl, {k: p.data.copy() for k, p in model.params.items()})
                since_best = 0
            else:
                since_best += 1
                if since_best >= tcfg.patience:
                    break
    if best[1] is not None:
        for k, p in model.params.items():
            p.data = best[1][k]
    return model, log


def train(plan: ExperimentPlan, stage, ctx: ExperimentContext | None = None,
          skeleton_files=None, use_image=None):
    """Train one stage of a plan; returns (model, log_rows).

    stage: "baseline", "stage1" or "stage2". Stage 2 with a predicted
    skeleton source needs skeleton_files (split -> id -> SkeletonSpec).
    """
    ctx = ctx or ExperimentContext(plan)
    tcfg = plan.train
    use_image_eff = plan.use_image if use_image is None else use_image

    def gold_for(ex):
        return ctx.gold_by_id[ex.image_id].tokens

    if stage == "baseline":
        config = ctx.model_config("img2cap", seed_lane=SEED_LANES["baseline"])
        skeleton_for = None
    elif stage == "stage1":
        if plan.stage1 not in STAGE1_MODE:
            raise ArtifactError(f"plan stage1={plan.stage1!r} trains no stage-1 model")
        config = ctx.model_config(STAGE1_MODE[plan.stage1], seed_lane=SEED_LANES["stage1"])
        skeleton_for = gold_for
    elif stage == "stage2":
        lane = "stage2" if use_image_eff else "stage2_unpaired"
        config = ctx.model_config(plan.stage2_mode, use_image=use_image_eff, seed_lane=SEED_LANES[lane])
        if plan.train_skeleton_source == "gold":
            skeleton_for = gold_for
        else:
            by_id = {i: s for split in (skeleton_files or {}).values() for i, s in split.items()}

            def skeleton_for(ex):
                spec = by_id.get(ex.image_id)
                if spec is None:
                    raise ArtifactError(f"no stage-1 skeleton for {ex.image_id}")
                return spec.tokens
    else:
        raise ValueError(f"unknown stage {stage!r}")

    lane = "stage2_unpaired" if stage == "stage2" and not use_image_eff else stage
    model = CaptionerModel(config)
    rng = np.random.default_rng([plan.seed, SEED_LANES[lane]])
    val = ctx.corpus.get("val", ctx.corpus[plan.eval_split])
    return train_model(model, ctx.corpus["train"], val, tcfg, rng, skeleton_for=skeleton_for)


# ---------------------------------------------------------------------------
# stage-1 inference and skeleton files
# ---------------------------------------------------------------------------


def predict_skeletons(model: CaptionerModel, examples, beam=1):
    """Predicted SkeletonSpec for every example (totality by construction)."""
    cfg = model.config
    variant = NOUNS_VERBS
    if cfg.mode == "img2ske_clf":
        feats = [ex.features for ex in examples]
        out = {}
        for ex, (lemmas, _) in zip(examples, model.classify_skeleton(feats)):
            out[ex.image_id] = SkeletonSpec(variant=variant, tokens=lemmas, source=PREDICTED)
        return out
    if cfg.mode == "img2ske_gen":
        if beam > 1:
            results = [generate(model, ex.features, beam=beam) for ex in examples]
        else:
            results = greedy_decode_corpus(model, [ex.features for ex in examples])
        return {
            ex.image_id: SkeletonSpec(variant=variant, tokens=res.skeleton, source=PREDICTED)
            for ex, res in zip(examples, results)
        }
    raise ArtifactError(f"checkpoint mode {cfg.mode} is not a skeleton predictor")


def iterative_refine_skeletons(model: CaptionerModel, examples):
    """The baseline's decoded caption, unfiltered, as the stage-2 skeleton."""
    if model.config.mode != "img2cap":
        raise ArtifactError("iterative refinement needs an img2cap checkpoint")
    results = greedy_decode_corpus(model, [ex.features for ex in examples])
    return {
        ex.image_id: SkeletonSpec(
            variant=ITERATIVE_REFINEMENT, tokens=res.caption, source=ITERATIVE
        )
        for ex, res in zip(examples, results)
    }


def save_skeletons(entries, path):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for image_id in sorted(entries):
            spec = entries[image_id]
            fh.write(json.dumps(
                {"image_id": image_id, "tokens": list(spec.tokens), "source": spec.source},
                sort_keys=True,
            ) + "\n")


def load_skeletons(path, variant=NOUNS_VERBS):
    entries = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                entries[obj["image_id"]] = SkeletonSpec(
                    variant=variant, tokens=list(obj["tokens"]), source=obj["source"]
                )
            except (KeyError, ValueError) as exc:
                raise ArtifactError(f"{path}:{lineno}: bad skeleton record: {exc}") from exc
    return entries


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate_condition(model, examples, lexicon, label, skeletons=None, references=None):
    """Decode one condition and compute its metric row.

    skeletons: id -> SkeletonSpec conditioning (None for baseline/ske_dec free
    decode). references: id -> list of reference captions (defaults to the
    clean caption).
    """
    cfg = model.config
    if references is None:
        references = {ex.image_id: [ex.clean.text] for ex in examples}
    skel_list = None
    if skeletons is not None:
        skel_list = [list(skeletons[ex.image_id].tokens) for ex in examples]
    feats = [ex.features for ex in examples] if cfg.use_image else None
    results = greedy_decode_corpus(model, feats, skeletons_list=skel_list)

    candidates = {ex.image_id: " ".join(res.caption) for ex, res in zip(examples, results)}
    corpus_cider, per_image = cider(candidates, references)
    halluc = hallucination_rate(
        [res.caption for res in results], [ex.concepts for ex in examples], lexicon
    )
    pairs = [(len(res.skeleton), len(res.caption)) for res in results]
    profile = length_profile(pairs)

    prf = None
    if skeletons is not None or cfg.joint:
        gold = {ex.image_id: extract_skeleton(ex.clean.tags, NOUNS_VERBS).tokens for ex in examples}
        triples = [
            skeleton_prf(res.skeleton, gold[ex.image_id]) for ex, res in zip(examples, results)
        ]
        prf = {
            "precision": float(np.mean([t[0] for t in triples])),
            "recall": float(np.mean([t[1] for t in triples])),
            "f1": float(np.mean([t[2] for t in triples])),
        }

    row = {
        "label": label,
        "mode": cfg.mode,
        "use_image": cfg.use_image,
        "cider": corpus_cider,
        "hallucination_rate": halluc,
        "skeleton_prf": prf,
        "mean_caption_length": float(np.mean([len(r.caption) for r in results])),
        "length_spearman": profile["spearman"],
        "n_examples": len(examples),
    }
    per_example = [
        {
            "image_id": ex.image_id,
            "label": label,
            "caption": " ".join(res.caption),
            "skeleton": " ".join(res.skeleton),
            "reference": references[ex.image_id][0],
            "cider": per_image[ex.image_id],
        }
        for ex, res in zip(examples, results)
    ]
    return row, per_example, results


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


def run_experiment(plan: ExperimentPlan, ctx: ExperimentContext | None = None, write=True):
    """Train all stages of a plan and produce the report bundle.

    Returns the report dict; with write=True also renders JSON/CSV/figures
    into plan.out_dir via the report module.
    """
    ctx = ctx or ExperimentContext(plan)
    eval_examples = ctx.corpus[plan.eval_split]
    logs = {}
    rows = []
    per_example = []

    baseline_model = None
    if plan.use_image:
        baseline_model, logs["baseline"] = train(plan, "baseline", ctx)
        row, per_ex, _ = evaluate_condition(
            baseline_model, eval_examples, ctx.lexicon, label="Img2Cap"
        )
        rows.append(row)
        per_example.extend(per_ex)

    skeleton_files = {}
    if plan.stage1 in STAGE1_MODE:
        stage1_model, logs["stage1"] = train(plan, "stage1", ctx)
        for split, examples in ctx.corpus.items():
            skeleton_files[split] = predict_skeletons(stage1_model, examples, beam=plan.stage1_beam)
    elif plan.stage1 == "iterative":
        if baseline_model is None:
            baseline_model, logs["baseline"] = train(plan, "baseline", ctx)
        for split, examples in ctx.corpus.items():
            skeleton_files[split] = iterative_refine_skeletons(baseline_model, examples)

    stage1_label = {"classification": "Clf", "generation": "Gen", "iterative": "Iter"}.get(plan.stage1, "")
    mode_label = {"ske_enc": "SkeEnc", "ske_dec": "SkeDec", "ske_ae": "SkeAE"}[plan.stage2_mode]

    def stage2_rows(use_image):
        # paired-only plans need no qualifier; image ablations get the pair
        suffix = "" if plan.use_image else (" + Img" if use_image else " Unpaired")
        model, log = train(plan, "stage2", ctx, skeleton_files=skeleton_files, use_image=use_image)
        logs[f"stage2{'' if use_image else '_unpaired'}"] = log
        pred_eval = skeleton_files.get(plan.eval_split)
        gold_eval = ctx.gold[plan.eval_split]
        got = []
        if plan.stage2_mode == "ske_dec":
            row, per_ex, _ = evaluate_condition(
                model, eval_examples, ctx.lexicon, label=f"PredSke{suffix} ({mode_label})"
            )
            got.append((row, per_ex))
        else:
            row, per_ex, _ = evaluate_condition(
                model, eval_examples, ctx.lexicon,
                label=f"PredSke{suffix} ({mode_label}/{stage1_label})", skeletons=pred_eval,
            )
            got.append((row, per_ex))
        if plan.stage1 != "iterative":
            row, per_ex, _ = evaluate_condition(
                model, eval_examples, ctx.lexicon, label=f"GtSke{suffix} ({mode_label})",
                skeletons=gold_eval,
            )
            got.append((row, per_ex))
        return model, got

    stage2_model, got = stage2_rows(use_image=True)
    for row, per_ex in got:
        rows.append(row)
        per_example.extend(per_ex)
    unpaired_model = None
    if not plan.use_image:
        unpaired_model, got = stage2_rows(use_image=False)
        for row, per_ex in got:
            rows.append(row)
            per_example.extend(per_ex)

    report = {
        "schema_version": REPORT_SCHEMA,
        "plan": plan.to_json(),
        "seed": plan.seed,
        "eval_split": plan.eval_split,
        "rows": rows,
        "per_example": per_example,
    }

    if write and plan.out_dir:
        from . import report as report_mod

        os.makedirs(plan.out_dir, exist_ok=True)
        with open(os.path.join(plan.out_dir, "plan.json"), "w", encoding="utf-8") as fh:
            json.dump(plan.to_json(), fh, indent=1, sort_keys=True)
        if baseline_model is not None:
            save_checkpoint(baseline_model, os.path.join(plan.out_dir, "checkpoints", "baseline"))
        save_checkpoint(stage2_model, os.path.join(plan.out_dir, "checkpoints", "stage2"))
        if unpaired_model is not None:
            save_checkpoint(unpaired_model, os.path.join(plan.out_dir, "checkpoints", "stage2_unpaired"))
        if plan.stage1 in STAGE1_MODE:
            save_checkpoint(stage1_model, os.path.join(plan.out_dir, "checkpoints", "stage1"))
        for split, entries in skeleton_files.items():
            save_skeletons(entries, os.path.join(plan.out_dir, "skeletons", f"{split}.jsonl"))
        report_mod.write_report(report, logs, plan.out_dir)
    return report


def pivot_experiment(plan: ExperimentPlan, spec: PivotSpec, ctx: ExperimentContext | None = None,
                     write=True):
    """Cross-lingual variant: source-language skeletons, pivot-language captions."""
    ctx = ctx or ExperimentContext(plan)
    train_ex = ctx.corpus["train"]
    eval_examples = ctx.corpus[plan.eval_split]
    for ex in train_ex + eval_examples:
        if ex.pivot is None:
            raise ArtifactError(f"{ex.image_id} has no pivot caption; regenerate the corpus with one")
    if plan.stage2_mode != "ske_enc":
        raise ConfigError("pivot experiments support the ske_enc stage-2 mode")

    # decoder emits pivot tokens; the encoder keeps source-language lemmas
    pivot_lists = [tokenize(ex.pivot.text) for ex in train_ex]
    pivot_vocab = TextVocab.build(pivot_lists)
    caption_for = lambda ex: tokenize(ex.pivot.text)

    def pivot_config(mode, lane):
        cfg = ctx.model_config(mode, seed_lane=lane)
        cfg.text_vocab = pivot_vocab
        cfg.enc_text_vocab = ctx.text_vocab
        return cfg

    rng = np.random.default_rng([plan.seed, 7])
    baseline = CaptionerModel(pivot_config("img2cap", SEED_LANES["baseline"]))
    baseline, base_log = train_model(
        baseline, train_ex, eval_examples, plan.train, rng, caption_for=caption_for
    )

    stage1_model, s1_log = train(plan, "stage1", ctx)
    pred = {split: predict_skeletons(stage1_model, exs) for split, exs in ctx.corpus.items()}
    pred_by_id = {i: s for split in pred.values() for i, s in split.items()}

    skeleton_for = (
        (lambda ex: ctx.gold_by_id[ex.image_id].tokens)
        if plan.train_skeleton_source == "gold"
        else (lambda ex: pred_by_id[ex.image_id].tokens)
    )
    rng2 = np.random.default_rng([plan.seed, 8])
    treated = CaptionerModel(pivot_config("ske_enc", SEED_LANES["stage2"]))
    treated, s2_log = train_model(
        treated, train_ex, eval_examples, plan.train, rng2,
        skeleton_for=skeleton_for, caption_for=caption_for,
    )

    references = {ex.image_id: [spec.transform(ex.clean.text)] for ex in eval_examples}
    rows, per_example = [], []
    for label, model, skeletons in (
        ("Img2Cap (pivot)", baseline, None),
        ("PredSke (pivot SkeEnc)", treated, pred[plan.eval_split]),
        ("GtSke (pivot SkeEnc)", treated, ctx.gold[plan.eval_split]),
    ):
        row, per_ex, _ = evaluate_condition(
            model, eval_examples, ctx.lexicon, label=label, skeletons=skeletons,
            references=references,
        )
        rows.append(row)
        per_example.extend(per_ex)

    report = {
        "schema_version": REPORT_SCHEMA,
        "plan": plan.to_json(),
        "pivot": {"suffix": spec.suffix, "reorder": spec.reorder},
        "seed": plan.seed,
        "eval_split": plan.eval_split,
        "rows": rows,
        "per_example": per_example,
    }
    if write and plan.out_dir:
        from . import report as report_mod

        os.makedirs(plan.out_dir, exist_ok=True)
        report_mod.write_report(
            report, {"baseline": base_log, "stage1": s1_log, "stage2": s2_log}, plan.out_dir
        )
    return report
