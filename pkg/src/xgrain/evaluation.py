"""Retrieval, grounding, masked-token accuracy, and attention heatmaps.

Retrieval is two-stage: rank the gallery by projected cosine similarity,
then re-rank the top-k candidates by the matching head's probability.
Grounding converts the box head's output to a normalized box and scores
IoU against gold at the 0.5 hit threshold. Heatmaps follow the Grad-CAM
recipe on one fusion layer's cross-attention: gradient of the matching
score times the map, rectified, averaged over heads, one grid per word.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import Dataset, pad_ids, words, write_ppm
from .errors import ContractError
from .geometry import NormBox, WHOLE_IMAGE_BOX, iou
from .objectives import MATCH_CLASS, AlignmentModel, apply_mlm_mask

log = logging.getLogger(__name__)

# paper-scale protocol constants for the second retrieval stage
RERANK_TOPK = {"mscoco": 256, "flickr30k": 128}
DEFAULT_TOPK = 32
IOU_HIT_THRESHOLD = 0.5
RECALL_KS = (1, 5, 10)


# ---------------------------------------------------------------------------
# containers

@dataclass
class SimilarityMatrix:
    scores: np.ndarray  # [n_images, n_texts]

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.scores)):
            raise ContractError("SimilarityMatrix: non-finite entries")


@dataclass
class RetrievalResult:
    text_ranking: np.ndarray   # [n_images, n_texts] text ids, best first
    image_ranking: np.ndarray  # [n_texts, n_images] image ids, best first
    tr_recall: dict[int, float]
    ir_recall: dict[int, float]

    def as_dict(self) -> dict:
        return {"text_retrieval": {f"recall@{k}": v for k, v in self.tr_recall.items()},
                "image_retrieval": {f"recall@{k}": v for k, v in self.ir_recall.items()}}


@dataclass
class HeatMap:
    word: str
    word_index: int
    grid: np.ndarray  # [rows, cols], nonnegative, max 1 unless all zero
    layer: int


@dataclass
class GroundingResult:
    box: NormBox
    iou: float
    hit: bool


# ---------------------------------------------------------------------------
# gallery encoding

def as_float_image(pixels: np.ndarray) -> np.ndarray:
    """Accept uint8 or [0, 1] float pixels; return floats in [0, 1]."""
    arr = np.asarray(pixels)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64, copy=False)


@dataclass
class Gallery:
    image_tokens: np.ndarray  # [NI, N+1, D] whole-image concept tokens
    image_proj: np.ndarray    # [NI, P] unit projections
    text_tokens: np.ndarray   # [NT, L, D]
    text_mask: np.ndarray     # [NT, L]
    text_proj: np.ndarray     # [NT, P]


def build_gallery(model: AlignmentModel, images: np.ndarray, texts: list[str],
                  vocab, chunk: int = 64) -> Gallery:
    cfg = model.cfg
    image_tokens, image_proj = [], []
    pixels = as_float_image(images)
    for lo in range(0, len(pixels), chunk):
        feats = model.trunk.vision.encode_batch(pixels[lo: lo + chunk]).data
        cls = feats.mean(axis=1, keepdims=True)
        image_tokens.append(np.concatenate([cls, feats], axis=1))
        image_proj.append(model.heads.sim.project_concepts(Tensor(cls[:, 0, :])).data)

    length = cfg.max_text_len
    ids = np.zeros((len(texts), length), dtype=np.int64)
    mask = np.zeros((len(texts), length), dtype=np.float64)
    for i, text in enumerate(texts):
        ids[i], mask[i] = pad_ids(vocab.encode(text, length), length)
    text_tokens, text_proj = [], []
    for lo in range(0, len(texts), chunk):
        feats, _ = model.trunk.text.encode_batch(ids[lo: lo + chunk], mask[lo: lo + chunk])
        text_tokens.append(feats.data)
        text_proj.append(model.heads.sim.project_texts(Tensor(feats.data[:, 0, :])).data)

    return Gallery(image_tokens=np.concatenate(image_tokens),
                   image_proj=np.concatenate(image_proj),
                   text_tokens=np.concatenate(text_tokens),
                   text_mask=mask,
                   text_proj=np.concatenate(text_proj))


def similarity_matrix(gallery: Gallery) -> SimilarityMatrix:
    return SimilarityMatrix(scores=gallery.image_proj @ gallery.text_proj.T)


def match_probs(model: AlignmentModel, image_tokens: np.ndarray,
                text_tokens: np.ndarray, text_mask: np.ndarray) -> np.ndarray:
    """Matching probability for index-aligned (image, text) rows."""
    fused, _ = model.trunk.fusion.fuse_batch(
        Tensor(text_tokens.astype(model.cfg.np_dtype)), text_mask,
        Tensor(image_tokens.astype(model.cfg.np_dtype)), None)
    logits = model.heads.match(Tensor(fused.data[:, 0, :])).data
    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    return (shifted / shifted.sum(axis=1, keepdims=True))[:, MATCH_CLASS]


# ---------------------------------------------------------------------------
# two-stage retrieval

def _stage1_order(scores_row: np.ndarray) -> np.ndarray:
    # stable sort on descending score; ties fall back to candidate id
    return np.argsort(-scores_row, kind="stable")


def _recalls(rankings: np.ndarray, hit_sets: list[set[int]]) -> dict[int, float]:
    out = {}
    for k in RECALL_KS:
        hits = sum(1 for row, positives in zip(rankings, hit_sets)
                   if positives.intersection(row[:k]))
        out[k] = hits / len(hit_sets)
    return out


def retrieve(model: AlignmentModel, images: np.ndarray, texts: list[str], vocab,
             k: int = DEFAULT_TOPK, image_of_text: np.ndarray | None = None) -> RetrievalResult:
    """Rank both directions, re-ranking the top-k by matching probability.

    `image_of_text[j]` names the ground-truth image of text j (identity
    pairing by default). A hit is any retrieved ground-truth partner.
    """
    n_images, n_texts = len(images), len(texts)
    if n_images < 1 or n_texts < 1:
        raise ContractError("retrieve: empty gallery")
    if image_of_text is None:
        if n_images != n_texts:
            raise ContractError("retrieve: image_of_text required when counts differ")
        image_of_text = np.arange(n_texts)
    image_of_text = np.asarray(image_of_text)
    if k < 1:
        raise ContractError(f"retrieve: k must be >= 1, got {k}")
    if k > max(n_images, n_texts):
        log.warning("retrieve: k=%d exceeds the gallery; clamping", k)
    if k < 10:
        log.warning("retrieve: k=%d < 10; recall@10 uses first-stage order beyond k", k)

    gallery = build_gallery(model, images, texts, vocab)
    scores = similarity_matrix(gallery).scores

    k_text = min(k, n_texts)
    text_ranking = np.empty((n_images, n_texts), dtype=np.int64)
    for i in range(n_images):
        order = _stage1_order(scores[i])
        top = order[:k_text]
        tiled = np.broadcast_to(gallery.image_tokens[i], (len(top),) + gallery.image_tokens.shape[1:])
        p = match_probs(model, tiled, gallery.text_tokens[top], gallery.text_mask[top])
        text_ranking[i] = np.concatenate([top[np.argsort(-p, kind="stable")], order[k_text:]])

    k_image = min(k, n_images)
    image_ranking = np.empty((n_texts, n_images), dtype=np.int64)
    for j in range(n_texts):
        order = _stage1_order(scores[:, j])
        top = order[:k_image]
        tiled_tokens = np.broadcast_to(gallery.text_tokens[j], (len(top),) + gallery.text_tokens.shape[1:])
        tiled_mask = np.broadcast_to(gallery.text_mask[j], (len(top), gallery.text_mask.shape[1]))
        p = match_probs(model, gallery.image_tokens[top], tiled_tokens, tiled_mask)
        image_ranking[j] = np.concatenate([top[np.argsort(-p, kind="stable")], order[k_image:]])

    texts_of_image: list[set[int]] = [set() for _ in range(n_images)]
    for j, i in enumerate(image_of_text):
        texts_of_image[int(i)].add(j)
    tr = _recalls(text_ranking, texts_of_image)
    ir = _recalls(image_ranking, [{int(i)} for i in image_of_text])
    return RetrievalResult(text_ranking=text_ranking, image_ranking=image_ranking,
                           tr_recall=tr, ir_recall=ir)


# ---------------------------------------------------------------------------
# grounding

def box_from_prediction(vec: np.ndarray) -> NormBox:
    """Clamp a sigmoid (cx, cy, w, h) row to a valid normalized box."""
    cx, cy, w, h = (float(v) for v in vec)
    x0, x1 = max(cx - w / 2, 0.0), min(cx + w / 2, 1.0)
    y0, y1 = max(cy - h / 2, 0.0), min(cy + h / 2, 1.0)
    return NormBox.from_corners(x0, y0, x1, y1)


def predict_boxes_batch(model: AlignmentModel, images: np.ndarray,
                        pair_image: np.ndarray, texts: list[str], vocab) -> np.ndarray:
    """Raw (cx, cy, w, h) predictions for (image slot, text) pairs."""
    cfg = model.cfg
    feats = model.trunk.vision.encode_batch(as_float_image(images)).data
    whole = np.concatenate([feats.mean(axis=1, keepdims=True), feats], axis=1)
    length = cfg.max_text_len
    ids = np.zeros((len(texts), length), dtype=np.int64)
    mask = np.zeros((len(texts), length), dtype=np.float64)
    for i, text in enumerate(texts):
        ids[i], mask[i] = pad_ids(vocab.encode(text, length), length)
    text_feats, _ = model.trunk.text.encode_batch(ids, mask)
    fused, _ = model.trunk.fusion.fuse_batch(
        text_feats, mask, Tensor(whole[pair_image].astype(cfg.np_dtype)), None)
    return model.heads.box_from_cls(Tensor(fused.data[:, 0, :])).data


def ground(model: AlignmentModel, image: np.ndarray, text: str, vocab,
           gold: NormBox) -> GroundingResult:
    vec = predict_boxes_batch(model, image[None], np.zeros(1, dtype=np.int64), [text], vocab)[0]
    box = box_from_prediction(vec)
    overlap = iou(box, gold)
    return GroundingResult(box=box, iou=overlap, hit=overlap >= IOU_HIT_THRESHOLD)


def ground_corpus(model: AlignmentModel, dataset: Dataset, chunk: int = 16,
                  max_records: int | None = None) -> dict:
    """Hit rate at IoU 0.5 over every concept annotation in the dataset."""
    indices = [i for i in range(len(dataset)) if dataset.records[i].concepts]
    if max_records is not None:
        indices = indices[:max_records]
    if not indices:
        raise ContractError("ground_corpus: dataset has no annotated records")
    total, hits, iou_sum = 0, 0, 0.0
    for lo in range(0, len(indices), chunk):
        batch = indices[lo: lo + chunk]
        images = np.stack([dataset.image(i) for i in batch])
        pair_image, texts, golds = [], [], []
        for slot, i in enumerate(batch):
            for concept in dataset.records[i].concepts:
                pair_image.append(slot)
                texts.append(concept.text)
                golds.append(concept.box)
        preds = predict_boxes_batch(model, images, np.asarray(pair_image), texts, vocab=dataset.vocab)
        for vec, gold in zip(preds, golds):
            overlap = iou(box_from_prediction(vec), gold)
            iou_sum += overlap
            hits += overlap >= IOU_HIT_THRESHOLD
            total += 1
    return {"n": total, "hits": int(hits), "hit_rate": hits / total,
            "mean_iou": iou_sum / total, "threshold": IOU_HIT_THRESHOLD}


# ---------------------------------------------------------------------------
# masked-token accuracy

def mlm_accuracy(model: AlignmentModel, dataset: Dataset, rng: np.random.Generator,
                 max_records: int | None = None, chunk: int = 32) -> dict:
    """Argmax accuracy at masked caption positions, with a unigram baseline.

    The baseline is the accuracy of always predicting the most frequent
    masked target, so "k times better than unigram" is judged on the same
    positions the model is scored on.
    """
    cfg = model.cfg
    indices = [i for i in range(len(dataset)) if dataset.records[i].caption]
    if max_records is not None:
        indices = indices[:max_records]
    if not indices:
        raise ContractError("mlm_accuracy: dataset has no captions")
    length = cfg.max_text_len
    correct, counts = 0, {}
    total = 0
    for lo in range(0, len(indices), chunk):
        batch = indices[lo: lo + chunk]
        images = np.stack([dataset.image(i) for i in batch])
        feats = model.trunk.vision.encode_batch(as_float_image(images)).data
        whole = np.concatenate([feats.mean(axis=1, keepdims=True), feats], axis=1)
        ids = np.zeros((len(batch), length), dtype=np.int64)
        mask = np.zeros((len(batch), length), dtype=np.float64)
        positions, targets = [], []
        for row, i in enumerate(batch):
            encoded = dataset.vocab.encode(dataset.records[i].caption, length)
            masked = apply_mlm_mask(encoded, rng, len(dataset.vocab))
            ids[row], mask[row] = pad_ids(masked.input_ids, length)
            for pos in masked.masked_positions:
                positions.append((row, pos))
                targets.append(masked.original_ids[pos])
        text_feats, _ = model.trunk.text.encode_batch(ids, mask)
        fused, _ = model.trunk.fusion.fuse_batch(
            text_feats, mask, Tensor(whole.astype(cfg.np_dtype)), None)
        logits = model.heads.mlm(Tensor(fused.data)).data  # [B, L, V]
        for (row, pos), target in zip(positions, targets):
            pred = int(np.argmax(logits[row, pos]))
            correct += pred == target
            counts[target] = counts.get(target, 0) + 1
            total += 1
    baseline = max(counts.values()) / total
    return {"n_masked": total, "accuracy": correct / total, "unigram_baseline": baseline}


# ---------------------------------------------------------------------------
# attention heatmaps

def default_heatmap_layer(fusion_layers: int) -> int:
    return 3 if fusion_layers >= 4 else fusion_layers - 1


def export_heatmaps(model: AlignmentModel, image: np.ndarray, text: str, vocab,
                    layer: int | None = None, out_dir=None,
                    image_id: str = "image") -> list[HeatMap]:
    """Per-word Grad-CAM grids for one (image, text) pair; optional overlays.

    The score is the matching probability of the pair; its gradient on the
    selected fusion layer's cross-attention map weights the map before
    rectification, head-averaging, and per-word max normalization.
    """
    cfg = model.cfg
    if layer is None:
        layer = default_heatmap_layer(cfg.fusion_layers)
    if not 0 <= layer < cfg.fusion_layers:
        raise ContractError(f"export_heatmaps: layer {layer} outside [0, {cfg.fusion_layers})")

    ids = vocab.encode(text, cfg.max_text_len)
    word_list = words(text)[: len(ids) - 2]
    pixels = as_float_image(image)
    feature_map = model.trunk.encode_image(pixels)
    concept = model.trunk.extract_concept(feature_map, WHOLE_IMAGE_BOX)
    encoded = model.trunk.encode_text(ids)
    fused = model.trunk.fuse(encoded, concept, keep_attention=True)
    amap = fused.cross_attention_maps[layer]  # [heads, L, M+1]

    logits = model.heads.match(ag.reshape(fused.x_cls, (1, cfg.hidden_dim)))
    prob = ag.take(ag.reshape(ag.softmax(logits, axis=-1), (2,)), np.array([MATCH_CLASS]))
    model.zero_grads()
    ag.backward(ag.tensor_sum(prob))
    grad = amap.grad if amap.grad is not None else np.zeros_like(amap.data)
    model.zero_grads()

    cam = np.maximum(grad * amap.data, 0.0).mean(axis=0)  # [L, M+1]
    grid = cfg.grid
    patch_idx = np.asarray(concept.patch_set.indices)
    maps: list[HeatMap] = []
    for wi, word in enumerate(word_list):
        cells = np.zeros(grid.count)
        cells[patch_idx] = cam[1 + wi, 1:]
        g = cells.reshape(grid.grid_h, grid.grid_w)
        peak = g.max()
        if peak > 0:
            g = g / peak
        maps.append(HeatMap(word=word, word_index=wi, grid=g, layer=layer))

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        base = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
        for hm in maps:
            write_ppm(out / f"{image_id}_{hm.word_index}.ppm", _overlay(base, hm.grid, cfg.patch_size))
    return maps


def _overlay(image: np.ndarray, grid: np.ndarray, patch: int) -> np.ndarray:
    heat = np.kron(grid, np.ones((patch, patch)))[:, :, None]
    red = np.zeros_like(image, dtype=np.float64)
    red[:, :, 0] = 255.0
    blended = (1.0 - 0.5 * heat) * image.astype(np.float64) + 0.5 * heat * red
    return np.clip(np.rint(blended), 0, 255).astype(np.uint8)
