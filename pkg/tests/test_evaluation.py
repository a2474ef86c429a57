"""Retrieval, grounding, masked-token scoring, and heatmap contracts."""

import logging

import numpy as np
import pytest

from xgrain.data import words
from xgrain.errors import ContractError
from xgrain.evaluation import (
    DEFAULT_TOPK,
    IOU_HIT_THRESHOLD,
    RECALL_KS,
    RERANK_TOPK,
    SimilarityMatrix,
    _recalls,
    _stage1_order,
    as_float_image,
    box_from_prediction,
    build_gallery,
    default_heatmap_layer,
    export_heatmaps,
    ground,
    ground_corpus,
    match_probs,
    mlm_accuracy,
    retrieve,
    similarity_matrix,
)
from xgrain.geometry import NormBox


def test_protocol_constants():
    assert RERANK_TOPK == {"mscoco": 256, "flickr30k": 128}
    assert DEFAULT_TOPK == 32
    assert IOU_HIT_THRESHOLD == 0.5
    assert RECALL_KS == (1, 5, 10)


def test_as_float_image_handles_both_pixel_types():
    raw = np.array([[[0, 128, 255]]], dtype=np.uint8)
    out = as_float_image(raw)
    np.testing.assert_allclose(out, [[[0.0, 128 / 255, 1.0]]])
    already = np.full((2, 2, 3), 0.25)
    np.testing.assert_array_equal(as_float_image(already), already)


def test_similarity_matrix_rejects_nonfinite():
    with pytest.raises(ContractError):
        SimilarityMatrix(scores=np.array([[1.0, np.nan]]))


# ---------------------------------------------------------------------------
# ranking order and recall bookkeeping

def test_stage1_order_descends_with_id_tiebreak():
    order = _stage1_order(np.array([0.5, 0.7, 0.5, 0.9]))
    assert order.tolist() == [3, 1, 0, 2]


def test_recalls_perfect_and_miss():
    rankings = np.array([[0, 1, 2], [1, 0, 2]])
    perfect = _recalls(rankings, [{0}, {1}])
    assert perfect == {1: 1.0, 5: 1.0, 10: 1.0}
    missed = _recalls(rankings, [{2}, {2}])
    assert missed[1] == 0.0 and missed[5] == 1.0


def test_recalls_are_monotone_in_k():
    rng = np.random.default_rng(0)
    rankings = np.stack([rng.permutation(12) for _ in range(30)])
    hit_sets = [{int(rng.integers(12))} for _ in range(30)]
    rec = _recalls(rankings, hit_sets)
    assert rec[1] <= rec[5] <= rec[10]


def test_recalls_count_any_positive_partner():
    rankings = np.array([[3, 0, 1, 2]])
    rec = _recalls(rankings, [{1, 3}])
    assert rec[1] == 1.0


# ---------------------------------------------------------------------------
# gallery and retrieval

@pytest.fixture(scope="module")
def tiny_gallery(tiny_train):
    idx = [i for i in range(len(tiny_train)) if tiny_train.records[i].caption][:8]
    images = np.stack([tiny_train.image(i) for i in idx])
    texts = [tiny_train.records[i].caption for i in idx]
    return images, texts


def test_build_gallery_shapes_and_unit_projections(small_model, tiny_train, tiny_gallery):
    images, texts = tiny_gallery
    cfg = small_model.cfg
    g = build_gallery(small_model, images, texts, tiny_train.vocab)
    assert g.image_tokens.shape == (8, cfg.patch_count + 1, cfg.hidden_dim)
    assert g.image_proj.shape == (8, cfg.projection_dim)
    assert g.text_tokens.shape == (8, cfg.max_text_len, cfg.hidden_dim)
    assert g.text_proj.shape == (8, cfg.projection_dim)
    np.testing.assert_allclose(np.linalg.norm(g.image_proj, axis=1), 1.0, rtol=1e-5)
    np.testing.assert_allclose(np.linalg.norm(g.text_proj, axis=1), 1.0, rtol=1e-5)
    scores = similarity_matrix(g).scores
    assert scores.shape == (8, 8)
    assert np.all(scores <= 1.0 + 1e-6) and np.all(scores >= -1.0 - 1e-6)


def test_match_probs_are_probabilities(small_model, tiny_train, tiny_gallery):
    images, texts = tiny_gallery
    g = build_gallery(small_model, images, texts, tiny_train.vocab)
    p = match_probs(small_model, g.image_tokens, g.text_tokens, g.text_mask)
    assert p.shape == (8,)
    assert np.all(p > 0) and np.all(p < 1)


def test_retrieve_rankings_are_permutations(small_model, tiny_train, tiny_gallery):
    images, texts = tiny_gallery
    result = retrieve(small_model, images, texts, tiny_train.vocab, k=4)
    for row in result.text_ranking:
        assert sorted(row.tolist()) == list(range(8))
    for row in result.image_ranking:
        assert sorted(row.tolist()) == list(range(8))
    for rec in (result.tr_recall, result.ir_recall):
        assert set(rec) == set(RECALL_KS)
        assert rec[1] <= rec[5] <= rec[10]
        assert all(0.0 <= v <= 1.0 for v in rec.values())
    d = result.as_dict()
    assert set(d) == {"text_retrieval", "image_retrieval"}
    assert set(d["text_retrieval"]) == {"recall@1", "recall@5", "recall@10"}


def test_rerank_permutes_only_within_top_k(small_model, tiny_train, tiny_gallery):
    images, texts = tiny_gallery
    k = 3
    g = build_gallery(small_model, images, texts, tiny_train.vocab)
    scores = similarity_matrix(g).scores
    result = retrieve(small_model, images, texts, tiny_train.vocab, k=k)
    for i in range(len(images)):
        stage1 = _stage1_order(scores[i])
        assert set(result.text_ranking[i][:k].tolist()) == set(stage1[:k].tolist())
        # beyond k the first-stage order passes through untouched
        assert result.text_ranking[i][k:].tolist() == stage1[k:].tolist()
    for j in range(len(texts)):
        stage1 = _stage1_order(scores[:, j])
        assert set(result.image_ranking[j][:k].tolist()) == set(stage1[:k].tolist())
        assert result.image_ranking[j][k:].tolist() == stage1[k:].tolist()


def test_retrieve_recall_invariant_to_gallery_order(small_model, tiny_train, tiny_gallery):
    images, texts = tiny_gallery
    base = retrieve(small_model, images, texts, tiny_train.vocab, k=4)
    perm = np.random.default_rng(5).permutation(len(images))
    # shuffle images only; tell the scorer where each text's partner went
    image_of_text = np.empty(len(images), dtype=np.int64)
    for new_pos, old in enumerate(perm):
        image_of_text[int(old)] = new_pos
    shuffled = retrieve(small_model, images[perm], texts, tiny_train.vocab, k=4,
                        image_of_text=image_of_text)
    assert shuffled.ir_recall == base.ir_recall
    assert shuffled.tr_recall == base.tr_recall


def test_retrieve_argument_validation(small_model, tiny_train, tiny_gallery):
    images, texts = tiny_gallery
    with pytest.raises(ContractError):
        retrieve(small_model, images[:0], texts, tiny_train.vocab)
    with pytest.raises(ContractError):
        retrieve(small_model, images, texts, tiny_train.vocab, k=0)
    with pytest.raises(ContractError):
        retrieve(small_model, images[:4], texts, tiny_train.vocab)  # counts differ, no map


def test_retrieve_small_k_warns_and_clamps(small_model, tiny_train, tiny_gallery, caplog):
    images, texts = tiny_gallery
    with caplog.at_level(logging.WARNING, logger="xgrain.evaluation"):
        retrieve(small_model, images[:4], texts[:4], tiny_train.vocab, k=2)
    assert any("recall@10" in rec.message for rec in caplog.records)
    caplog.clear()
    with caplog.at_level(logging.WARNING, logger="xgrain.evaluation"):
        retrieve(small_model, images[:4], texts[:4], tiny_train.vocab, k=50)
    assert any("clamping" in rec.message for rec in caplog.records)


# ---------------------------------------------------------------------------
# grounding

def test_box_from_prediction_centered():
    box = box_from_prediction(np.array([0.5, 0.5, 0.4, 0.2]))
    x0, y0, x1, y1 = box.corners()
    assert x0 == pytest.approx(0.3) and x1 == pytest.approx(0.7)
    assert y0 == pytest.approx(0.4) and y1 == pytest.approx(0.6)


def test_box_from_prediction_clamps_overflow():
    box = box_from_prediction(np.array([0.9, 0.1, 0.6, 0.6]))
    x0, y0, x1, y1 = box.corners()
    assert x1 == pytest.approx(1.0) and y0 == pytest.approx(0.0)
    assert 0.0 <= x0 < x1 and y0 < y1 <= 1.0


def test_ground_reports_iou_against_gold(small_model, tiny_train):
    idx = tiny_train.annotated[0]
    record = tiny_train.records[idx]
    concept = record.concepts[0]
    result = ground(small_model, tiny_train.image(idx), concept.text,
                    tiny_train.vocab, concept.box)
    assert 0.0 <= result.iou <= 1.0
    assert result.hit == (result.iou >= IOU_HIT_THRESHOLD)
    assert isinstance(result.box, NormBox)


def test_ground_corpus_counts_every_annotation(small_model, tiny_train):
    stats = ground_corpus(small_model, tiny_train)
    want = sum(len(r.concepts) for r in tiny_train.records)
    assert stats["n"] == want
    assert 0.0 <= stats["hit_rate"] <= 1.0
    assert 0.0 <= stats["mean_iou"] <= 1.0
    assert stats["threshold"] == IOU_HIT_THRESHOLD
    assert stats["hits"] <= stats["n"]


def test_ground_corpus_max_records_truncates(small_model, tiny_train):
    first = tiny_train.records[tiny_train.annotated[0]]
    stats = ground_corpus(small_model, tiny_train, max_records=1)
    assert stats["n"] == len(first.concepts)


def test_ground_corpus_needs_annotations(small_model, tiny_train, tmp_path):
    from xgrain.data import Dataset
    bare = Dataset.__new__(Dataset)
    bare.records = [tiny_train.records[i] for i in tiny_train.caption_only]
    with pytest.raises(ContractError):
        ground_corpus(small_model, bare)


# ---------------------------------------------------------------------------
# masked-token accuracy

def test_mlm_accuracy_structure_and_determinism(small_model, tiny_train):
    a = mlm_accuracy(small_model, tiny_train, np.random.default_rng(7))
    b = mlm_accuracy(small_model, tiny_train, np.random.default_rng(7))
    assert a == b
    assert a["n_masked"] > 0
    assert 0.0 <= a["accuracy"] <= 1.0
    assert 0.0 < a["unigram_baseline"] <= 1.0


def test_mlm_accuracy_max_records(small_model, tiny_train):
    small = mlm_accuracy(small_model, tiny_train, np.random.default_rng(7), max_records=2)
    assert 0 < small["n_masked"] <= 2 * small_model.cfg.max_text_len


# ---------------------------------------------------------------------------
# heatmaps

def test_default_heatmap_layer_prefers_fourth():
    assert default_heatmap_layer(6) == 3
    assert default_heatmap_layer(4) == 3
    assert default_heatmap_layer(2) == 1
    assert default_heatmap_layer(1) == 0


def test_export_heatmaps_one_grid_per_word(small_model, tiny_train):
    idx = tiny_train.annotated[0]
    record = tiny_train.records[idx]
    text = record.caption
    maps = export_heatmaps(small_model, tiny_train.image(idx), text, tiny_train.vocab)
    cfg = small_model.cfg
    n_words = min(len(words(text)), cfg.max_text_len - 2)
    assert len(maps) == n_words
    for wi, hm in enumerate(maps):
        assert hm.word == words(text)[wi]
        assert hm.word_index == wi
        assert hm.layer == default_heatmap_layer(cfg.fusion_layers)
        assert hm.grid.shape == (cfg.grid.grid_h, cfg.grid.grid_w)
        assert np.all(hm.grid >= 0.0)
        peak = hm.grid.max()
        assert peak == pytest.approx(1.0) or peak == 0.0


def test_export_heatmaps_layer_validation(small_model, tiny_train):
    idx = tiny_train.annotated[0]
    image = tiny_train.image(idx)
    text = tiny_train.records[idx].caption
    with pytest.raises(ContractError):
        export_heatmaps(small_model, image, text, tiny_train.vocab, layer=-1)
    with pytest.raises(ContractError):
        export_heatmaps(small_model, image, text, tiny_train.vocab,
                        layer=small_model.cfg.fusion_layers)


def test_export_heatmaps_writes_overlays(small_model, tiny_train, tmp_path):
    from xgrain.data import read_ppm
    idx = tiny_train.annotated[0]
    text = tiny_train.records[idx].caption
    maps = export_heatmaps(small_model, tiny_train.image(idx), text,
                           tiny_train.vocab, out_dir=tmp_path, image_id="probe")
    for hm in maps:
        path = tmp_path / f"probe_{hm.word_index}.ppm"
        assert path.exists()
        overlay = read_ppm(path)
        assert overlay.shape == tiny_train.image(idx).shape


def test_export_heatmaps_leaves_no_stale_gradients(small_model, tiny_train):
    idx = tiny_train.annotated[0]
    text = tiny_train.records[idx].caption
    export_heatmaps(small_model, tiny_train.image(idx), text, tiny_train.vocab)
    assert all(t.grad is None for t in small_model.params().values())
