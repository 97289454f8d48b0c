"""Shared builders for tiny test models."""

import numpy as np
import pytest

from skelcap.data import GenConfig, generate_corpus, save_corpus
from skelcap.model import ImageFeatures, ModelConfig, Region, TextVocab
from skelcap.pipeline import ExperimentPlan, ModelShape, TrainConfig, run_experiment
from skelcap.skeletons import build_vocab

D_IMG = 8


@pytest.fixture(scope="session")
def tiny_experiment(tmp_path_factory):
    """One finished small experiment (corpus + trained checkpoints + report)."""
    root = tmp_path_factory.mktemp("experiment")
    corpus_dir = root / "corpus"
    gen = GenConfig(n_train=140, n_val=28, n_test=20, d_img=8, seed=11)
    save_corpus(generate_corpus(gen), corpus_dir, gen)
    plan = ExperimentPlan(
        corpus_dir=str(corpus_dir),
        out_dir=str(root / "out"),
        stage1="classification",
        stage2_mode="ske_enc",
        seed=3,
        ske_min_count=1,
        train=TrainConfig(steps=60, batch_size=16, eval_interval=20,
                          peak_lr=3e-3, warmup_steps=10),
        model=ModelShape(d_model=16, enc_layers=1, dec_layers=1, heads=2, d_img=8,
                         n_regions=4, max_caption_len=12, max_joint_len=18,
                         max_skeleton_len=6),
    )
    run_experiment(plan)
    return {"corpus": str(corpus_dir), "out": plan.out_dir, "plan": plan}


def words_vocab():
    return TextVocab(["a", "dog", "runs", "cat", "sits", "and", "big"])


def ske_vocab():
    return build_vocab([["dog", "run"], ["cat", "sit"], ["dog", "sit"]], min_count=1)


def make_config(mode, **kw):
    base = dict(
        mode=mode,
        d_model=16,
        enc_layers=1,
        dec_layers=1,
        heads=2,
        d_img=D_IMG,
        n_regions=4,
        max_caption_len=8,
        max_joint_len=14,
        max_skeleton_len=4,
        seed=1,
        text_vocab=words_vocab(),
        skeleton_vocab=ske_vocab(),
    )
    base.update(kw)
    return ModelConfig(**base)


def make_feats(rng, n_regions=2):
    cells = [(0, 0, 112, 112), (112, 0, 224, 112), (0, 112, 112, 224), (112, 112, 224, 224)]
    regions = [
        Region(vec=rng.normal(size=D_IMG), box=cells[i % len(cells)], image_size=(224, 224))
        for i in range(n_regions)
    ]
    return ImageFeatures(global_vec=rng.normal(size=D_IMG), regions=regions)
