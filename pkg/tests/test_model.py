import math

import numpy as np
import pytest

from skelcap.model import (
    BOS_ID,
    EOS_ID,
    SEP_ID,
    Batch,
    CaptionerModel,
    CheckpointError,
    ImageFeatures,
    InputError,
    Region,
    build_masks,
    load_checkpoint,
    pack_features,
    pad_id_rows,
    save_checkpoint,
    topk_indices,
)
from conftest import D_IMG, make_config, make_feats


def img_batch(rng, config, n_regions_list):
    feats = [make_feats(rng, n) for n in n_regions_list]
    vecs, geom, valid = pack_features(feats, config.n_regions, config.d_img)
    return Batch(img_vecs=vecs, img_geom=geom, img_valid=valid)


def add_dec(batch, rows):
    dec_in, dec_tgt, mask = [], [], []
    for ids in rows:
        dec_in.append([BOS_ID] + ids)
        dec_tgt.append(ids + [EOS_ID])
    t = max(len(r) for r in dec_in)
    batch.dec_in = pad_id_rows(dec_in, min_len=t)
    batch.dec_tgt = pad_id_rows(dec_tgt, min_len=t)
    batch.dec_tgt_mask = np.zeros_like(batch.dec_tgt, dtype=np.float64)
    for i, ids in enumerate(rows):
        batch.dec_tgt_mask[i, : len(ids) + 1] = 1.0
    return batch


# -- geometry and region embedding --------------------------------------------


def test_full_image_box_geometry():
    r = Region(vec=np.zeros(D_IMG), box=(0, 0, 224, 224), image_size=(224, 224))
    assert np.allclose(r.geometry(), [0, 0, 1, 1, 1])


def test_quarter_box_geometry():
    r = Region(vec=np.zeros(D_IMG), box=(0, 0, 112, 112), image_size=(224, 224))
    assert np.allclose(r.geometry(), [0, 0, 0.5, 0.5, 0.25])


def test_zero_area_box_rejected():
    with pytest.raises(InputError):
        Region(vec=np.zeros(D_IMG), box=(10, 10, 10, 50), image_size=(224, 224))


def test_zero_regions_embed_to_global_only():
    model = CaptionerModel(make_config("img2cap"))
    feat = ImageFeatures(global_vec=np.ones(D_IMG), regions=[])
    seq = model.embed_regions(feat)
    assert seq.shape == (1, 16)


def test_region_cap_enforced():
    model = CaptionerModel(make_config("img2cap", n_regions=1))
    rng = np.random.default_rng(0)
    with pytest.raises(InputError, match="cap"):
        model.embed_regions(make_feats(rng, 2))


def test_feature_dim_checked():
    model = CaptionerModel(make_config("img2cap"))
    with pytest.raises(InputError, match="dim"):
        model.embed_regions(ImageFeatures(global_vec=np.zeros(D_IMG + 1), regions=[]))


# -- masks ---------------------------------------------------------------------


def vis(mask):
    return (mask == 0.0).astype(int)


def test_text_as_side_visibility_example():
    out = build_masks("ske_enc", n_img=2, n_txt_enc=2, n_dec=0)
    expect = [[1, 1, 1, 1], [1, 1, 1, 1], [0, 0, 1, 1], [0, 0, 1, 1]]
    assert vis(out.encoder).tolist() == expect


def test_causal_mask_length_3():
    out = build_masks("img2cap", n_img=1, n_txt_enc=0, n_dec=3)
    assert vis(out.decoder).tolist() == [[1, 0, 0], [1, 1, 0], [1, 1, 1]]


def test_joint_caption_position_sees_full_skeleton():
    # decoded layout: skeleton(2) sep caption(2); caption position 1 is row 3
    out = build_masks("ske_dec", n_img=1, n_txt_enc=0, n_dec=5)
    assert vis(out.decoder)[3].tolist() == [1, 1, 1, 1, 0]


def test_padded_keys_blocked_in_encoder():
    out = build_masks("ske_enc", n_img=3, n_txt_enc=2, n_dec=0, padding={"img": 2, "txt": 1})
    v = vis(out.encoder)
    assert v[0].tolist() == [1, 1, 0, 1, 0]
    assert v[3].tolist() == [0, 0, 0, 1, 0]  # text query: text keys only
    # padded rows retain self-visibility so softmax stays defined
    assert v[2][2] == 1 and v[4][4] == 1


def test_image_only_modes_reject_text():
    with pytest.raises(InputError):
        build_masks("img2cap", n_img=2, n_txt_enc=2, n_dec=0)


def test_cross_mask_blocks_padded_memory():
    out = build_masks("ske_enc", n_img=2, n_txt_enc=2, n_dec=3, padding={"img": 1, "txt": 1})
    assert vis(out.cross).tolist() == [[1, 0, 1, 0]] * 3


# -- config --------------------------------------------------------------------


def test_heads_must_divide_d_model():
    with pytest.raises(ValueError, match="divide"):
        make_config("img2cap", heads=3)


def test_joint_budget_must_cover_caption():
    with pytest.raises(ValueError, match="joint"):
        make_config("ske_dec", max_joint_len=4, max_caption_len=8)


def test_param_count_is_pure_function_of_config():
    a = CaptionerModel(make_config("ske_ae"))
    b = CaptionerModel(make_config("ske_ae"))
    assert a.param_count() == b.param_count()
    assert {n: p.shape for n, p in a.params.items()} == {n: p.shape for n, p in b.params.items()}


# -- encoder shapes ------------------------------------------------------------


def test_unpaired_memory_length():
    config = make_config("ske_enc", use_image=False)
    model = CaptionerModel(config)
    batch = Batch(
        enc_txt_ids=pad_id_rows([config.enc_text_vocab.encode(["dog", "runs"])]),
        enc_txt_valid=np.array([2]),
    )
    memory, mem_valid = model.encode(batch)
    assert memory.shape == (1, 3, config.d_model)
    assert mem_valid.tolist() == [[1.0, 1.0, 1.0]]


def test_ske_enc_memory_length_16_regions_plus_3_tokens():
    config = make_config("ske_enc", n_regions=16)
    model = CaptionerModel(config)
    rng = np.random.default_rng(3)
    batch = img_batch(rng, config, [16])
    batch.enc_txt_ids = pad_id_rows([config.enc_text_vocab.encode(["a", "dog", "runs"])])
    batch.enc_txt_valid = np.array([3])
    memory, _ = model.encode(batch)
    assert memory.shape[1] == 20


def test_region_permutation_leaves_text_rows_masked():
    config = make_config("ske_enc")
    model = CaptionerModel(config)
    rng = np.random.default_rng(5)
    batch = img_batch(rng, config, [2])
    batch.enc_txt_ids = pad_id_rows([config.enc_text_vocab.encode(["dog", "runs"])])
    batch.enc_txt_valid = np.array([2])

    def text_block(b):
        collect = {}
        model.encode(b, collect=collect)
        w = collect["encoder"][0]  # [B, heads, T, T]
        return w[:, :, 3:, :3]

    blocked = text_block(batch)
    batch.img_vecs = batch.img_vecs[:, [0, 2, 1], :]
    batch.img_geom = batch.img_geom[:, [0, 2, 1], :]
    assert np.all(blocked == 0.0)
    assert np.all(text_block(batch) == 0.0)


def test_text_to_image_attention_exactly_zero_with_padding():
    config = make_config("ske_enc")
    model = CaptionerModel(config)
    rng = np.random.default_rng(7)
    batch = img_batch(rng, config, [2, 1])
    batch.enc_txt_ids = pad_id_rows(
        [config.enc_text_vocab.encode(["dog", "runs"]), config.enc_text_vocab.encode(["cat"])]
    )
    batch.enc_txt_valid = np.array([2, 1])
    collect = {}
    model.encode(batch, collect=collect)
    w = collect["encoder"][0]
    n_img = batch.img_vecs.shape[1]
    assert np.all(w[:, :, n_img:, :n_img] == 0.0)
    # padded image key (example 1 has only 2 valid image tokens)
    assert np.all(w[1, :, :2, 2] == 0.0)


def test_mode_without_enc_text_rejects_tokens():
    config = make_config("img2cap")
    model = CaptionerModel(config)
    rng = np.random.default_rng(0)
    batch = img_batch(rng, config, [1])
    batch.enc_txt_ids = pad_id_rows([[5]])
    batch.enc_txt_valid = np.array([1])
    with pytest.raises(InputError, match="no encoder text"):
        model.encode(batch)


def test_enc_text_budget_enforced():
    config = make_config("ske_enc")
    model = CaptionerModel(config)
    rng = np.random.default_rng(0)
    batch = img_batch(rng, config, [1])
    batch.enc_txt_ids = pad_id_rows([[5] * (config.enc_text_budget + 1)])
    batch.enc_txt_valid = np.array([config.enc_text_budget + 1])
    with pytest.raises(InputError, match="budget"):
        model.encode(batch)


# -- decoder -------------------------------------------------------------------


def run_logits(model, batch, dec_in):
    memory, mem_valid = model.encode(batch)
    return model.decode_logits(memory, mem_valid, dec_in)


def test_causality_changing_future_token_is_bit_identical():
    config = make_config("img2cap")
    model = CaptionerModel(config)
    rng = np.random.default_rng(11)
    batch = img_batch(rng, config, [2])
    a = run_logits(model, batch, np.array([[BOS_ID, 6, 7, 8]]))
    b = run_logits(model, batch, np.array([[BOS_ID, 6, 9, 8]]))
    assert a.data[0, :2].tobytes() == b.data[0, :2].tobytes()
    assert a.data[0, 2].tobytes() != b.data[0, 2].tobytes()


def test_bos_only_prefix_gives_one_row():
    config = make_config("img2cap")
    model = CaptionerModel(config)
    rng = np.random.default_rng(2)
    batch = img_batch(rng, config, [1])
    logits = run_logits(model, batch, np.array([[BOS_ID]]))
    assert logits.shape == (1, 1, len(config.text_vocab))


def test_double_invocation_identical():
    config = make_config("ske_dec")
    model = CaptionerModel(config)
    rng = np.random.default_rng(4)
    batch = img_batch(rng, config, [2])
    dec = np.array([[BOS_ID, 5, SEP_ID, 6]])
    a = run_logits(model, batch, dec)
    b = run_logits(model, batch, dec)
    assert a.data.tobytes() == b.data.tobytes()


def test_decoder_budget_enforced():
    config = make_config("img2cap")
    model = CaptionerModel(config)
    rng = np.random.default_rng(2)
    batch = img_batch(rng, config, [1])
    with pytest.raises(InputError, match="budget"):
        run_logits(model, batch, np.full((1, config.dec_budget + 1), BOS_ID))


def test_use_image_false_ignores_features():
    config = make_config("ske_enc", use_image=False)
    model = CaptionerModel(config)
    rng = np.random.default_rng(9)
    ids = pad_id_rows([config.enc_text_vocab.encode(["dog", "runs"])])
    out = []
    for _ in range(2):
        batch = img_batch(rng, config, [2])  # fresh random features each time
        batch.enc_txt_ids = ids
        batch.enc_txt_valid = np.array([2])
        out.append(run_logits(model, batch, np.array([[BOS_ID, 5]])).data)
    assert out[0].tobytes() == out[1].tobytes()


# -- classification ------------------------------------------------------------


def test_topk_ordering_example():
    assert topk_indices([0.9, 0.2, 0.8], 2) == [0, 2]


def test_topk_zero_and_clamp():
    assert topk_indices([0.5, 0.1], 0) == []
    assert topk_indices([0.5, 0.1], 10) == [0, 1]


def test_topk_ties_by_index():
    assert topk_indices([0.3, 0.7, 0.7], 2) == [1, 2]


def test_classify_skeleton_end_to_end():
    config = make_config("img2ske_clf", top_k_skeleton=2)
    model = CaptionerModel(config)
    rng = np.random.default_rng(13)
    (lemmas, scores), = model.classify_skeleton([make_feats(rng, 2)])
    assert len(lemmas) == 2 and scores[0] >= scores[1]
    assert all(lem in config.skeleton_vocab.lemma_to_id for lem in lemmas)


def test_classify_requires_clf_mode():
    model = CaptionerModel(make_config("img2cap"))
    rng = np.random.default_rng(1)
    with pytest.raises(InputError):
        model.classify_skeleton([make_feats(rng, 1)])


# -- losses ---------------------------------------------------------------------


def test_uniform_logits_loss_is_ln_vocab():
    config = make_config("img2cap")
    model = CaptionerModel(config)
    model.params["out.w"].data[:] = 0.0
    model.params["out.b"].data[:] = 0.0
    rng = np.random.default_rng(3)
    batch = add_dec(img_batch(rng, config, [1, 2]), [[5, 6], [7]])
    loss = model.training_loss(batch, train=False)
    assert abs(loss.item() - math.log(len(config.text_vocab))) < 1e-12


def test_perfect_margin_loss_near_zero():
    config = make_config("img2cap")
    model = CaptionerModel(config)
    rng = np.random.default_rng(3)
    batch = add_dec(img_batch(rng, config, [1]), [[5, 5]])
    model.params["out.w"].data[:] = 0.0
    model.params["out.b"].data[:] = -40.0
    model.params["out.b"].data[5] = 40.0
    # both real targets are token 5; EOS row still contributes, so force it too
    batch.dec_tgt_mask[0, -1] = 0.0
    loss = model.training_loss(batch, train=False)
    assert loss.item() < 1e-12


def test_multilabel_zero_logits_loss_is_ln2():
    config = make_config("img2ske_clf")
    model = CaptionerModel(config)
    model.params["clf.w"].data[:] = 0.0
    model.params["clf.b"].data[:] = 0.0
    rng = np.random.default_rng(5)
    batch = img_batch(rng, config, [2])
    batch.clf_targets = np.zeros((1, len(config.skeleton_vocab)))
    loss = model.training_loss(batch, train=False)
    assert abs(loss.item() - math.log(2.0)) < 1e-12


def test_multilabel_perfect_margin_near_zero():
    config = make_config("img2ske_clf")
    model = CaptionerModel(config)
    rng = np.random.default_rng(5)
    batch = img_batch(rng, config, [2])
    y = np.zeros((1, len(config.skeleton_vocab)))
    y[0, 1] = 1.0
    batch.clf_targets = y
    model.params["clf.w"].data[:] = 0.0
    model.params["clf.b"].data[:] = -40.0
    model.params["clf.b"].data[1] = 40.0
    loss = model.training_loss(batch, train=False)
    assert loss.item() < 1e-12


def test_joint_mode_loss_runs():
    config = make_config("ske_ae")
    model = CaptionerModel(config)
    rng = np.random.default_rng(8)
    batch = img_batch(rng, config, [1, 2])
    batch.enc_txt_ids = pad_id_rows(
        [config.enc_text_vocab.encode(["dog"]), config.enc_text_vocab.encode(["cat", "sits"])]
    )
    batch.enc_txt_valid = np.array([1, 2])
    add_dec(batch, [[6, SEP_ID, 5, 6], [7, SEP_ID, 8]])
    loss = model.training_loss(batch, train=False)
    assert np.isfinite(loss.item()) and loss.item() > 0


def test_empty_batch_rejected():
    model = CaptionerModel(make_config("img2cap"))
    with pytest.raises(InputError, match="empty"):
        model.training_loss(Batch())


def test_gradients_flow_through_loss():
    config = make_config("ske_enc")
    model = CaptionerModel(config)
    rng = np.random.default_rng(21)
    batch = img_batch(rng, config, [2])
    batch.enc_txt_ids = pad_id_rows([config.enc_text_vocab.encode(["dog"])])
    batch.enc_txt_valid = np.array([1])
    add_dec(batch, [[5, 6]])
    from skelcap.tensor import backward

    loss = model.training_loss(batch)
    backward(loss)
    touched = [n for n, p in model.params.items() if p.grad is not None and np.any(p.grad != 0)]
    assert "dec.emb" in touched and "out.w" in touched and "feat.w1" in touched
    assert "enc_txt.emb" in touched


# -- checkpoints -----------------------------------------------------------------


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    config = make_config("ske_dec")
    model = CaptionerModel(config)
    rng = np.random.default_rng(17)
    batch = img_batch(rng, config, [2])
    dec = np.array([[BOS_ID, 5, SEP_ID, 6]])
    before = run_logits(model, batch, dec).data.tobytes()
    save_checkpoint(model, tmp_path / "ck")
    twin = load_checkpoint(tmp_path / "ck")
    assert twin.config.mode == "ske_dec"
    after = run_logits(twin, batch, dec).data.tobytes()
    assert before == after


def test_checkpoint_version_mandatory(tmp_path):
    model = CaptionerModel(make_config("img2cap"))
    save_checkpoint(model, tmp_path / "ck")
    import json

    mpath = tmp_path / "ck" / "manifest.json"
    manifest = json.loads(mpath.read_text())
    del manifest["format_version"]
    mpath.write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "ck")


def test_checkpoint_missing_dir(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope")


def test_checkpoint_preserves_vocabs(tmp_path):
    config = make_config("img2ske_clf")
    model = CaptionerModel(config)
    save_checkpoint(model, tmp_path / "ck")
    twin = load_checkpoint(tmp_path / "ck")
    assert twin.config.skeleton_vocab.lemma_to_id == config.skeleton_vocab.lemma_to_id
    assert twin.config.text_vocab.id_to_token == config.text_vocab.id_to_token
