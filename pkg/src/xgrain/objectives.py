"""Pre-training heads and losses.

Four components, combined as an unweighted sum: box regression from the
fused text/whole-image [CLS] state (GIoU penalty plus L1), symmetric
in-batch contrastive alignment over concept/text projections with a
learnable temperature, two-way matching with multinomially sampled in-batch
hard negatives, and masked language modeling conditioned on the concept.

Concepts of every granularity (objects, regions, whole images) share one
contrastive pool. Matching, MLM, and the contrastive term see each pair's
own patch subset; box prediction always conditions on the full image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import MASK_ID, SPECIAL_TOKENS, Vocabulary, pad_ids
from .encoders import (ConceptRepresentation, EncodedText, Linear, ModelConfig,
                       Trunk, load_checkpoint, save_checkpoint)
from .errors import ContractError, DimensionError
from .geometry import NormBox, WHOLE_IMAGE_BOX, patches_for_box

TAU_MIN, TAU_MAX = 5e-3, 1.0
MATCH_CLASS = 1  # index of the "match" logit on the matching head
MASK_PROB = 0.25
_BOX_WH_EPS = 1e-6


# ---------------------------------------------------------------------------
# heads

def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    sq = ag.tensor_sum(ag.mul(x, x), axis=axis, keepdims=True)
    return ag.div(x, ag.sqrt(ag.add(sq, 1e-12)))


class SimilarityHead:
    """Projections g_v, g_w to the shared space, plus the temperature."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator) -> None:
        dtype = cfg.np_dtype
        self.g_v = Linear(rng, cfg.hidden_dim, cfg.projection_dim, dtype, bias=False)
        self.g_w = Linear(rng, cfg.hidden_dim, cfg.projection_dim, dtype, bias=False)
        self.tau = Tensor(np.asarray(cfg.temperature_init, dtype=dtype), requires_grad=True)

    def project_concepts(self, v_cls: Tensor) -> Tensor:
        return l2_normalize(self.g_v(v_cls))

    def project_texts(self, w_cls: Tensor) -> Tensor:
        return l2_normalize(self.g_w(w_cls))

    def clamp(self) -> None:
        self.tau.data = np.clip(self.tau.data, TAU_MIN, TAU_MAX)

    def params(self) -> dict[str, Tensor]:
        return {"g_v.w": self.g_v.w, "g_w.w": self.g_w.w, "tau": self.tau}


class Heads:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator) -> None:
        dtype = cfg.np_dtype
        self.sim = SimilarityHead(cfg, rng)
        self.bbox_fc1 = Linear(rng, cfg.hidden_dim, cfg.hidden_dim, dtype)
        self.bbox_fc2 = Linear(rng, cfg.hidden_dim, 4, dtype)
        self.match = Linear(rng, cfg.hidden_dim, 2, dtype)
        self.mlm = Linear(rng, cfg.hidden_dim, cfg.vocab_size, dtype)

    def box_from_cls(self, x_cls: Tensor) -> Tensor:
        """b_hat = sigmoid(MLP(x_cls)); works on [..., hidden_dim]."""
        return ag.sigmoid(self.bbox_fc2(ag.gelu(self.bbox_fc1(x_cls))))

    def params(self) -> dict[str, Tensor]:
        out = {f"sim.{k}": t for k, t in self.sim.params().items()}
        for name, lin in (("bbox_fc1", self.bbox_fc1), ("bbox_fc2", self.bbox_fc2),
                          ("match", self.match), ("mlm", self.mlm)):
            for k, t in lin.params().items():
                out[f"{name}.{k}"] = t
        return out


class AlignmentModel:
    """Trunk plus heads: everything the checkpoint stores."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None) -> None:
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.trunk = Trunk(cfg, rng)
        self.heads = Heads(cfg, rng)

    def params(self) -> dict[str, Tensor]:
        out = {f"trunk.{k}": t for k, t in self.trunk.params().items()}
        out.update({f"heads.{k}": t for k, t in self.heads.params().items()})
        return out

    def zero_grads(self) -> None:
        for t in self.params().values():
            t.grad = None

    def clamp_constraints(self) -> None:
        self.heads.sim.clamp()

    def save(self, directory, step: int = 0,
             optimizer_arrays: dict[str, np.ndarray] | None = None) -> None:
        save_checkpoint(directory, self.cfg, self.params(), step=step,
                        optimizer_arrays=optimizer_arrays)

    @classmethod
    def load(cls, directory) -> tuple["AlignmentModel", int, dict[str, np.ndarray] | None]:
        cfg, arrays, step, optimizer = load_checkpoint(directory)
        model = cls(cfg)
        params = model.params()
        if set(params) != set(arrays):
            missing = set(params) ^ set(arrays)
            raise ContractError(f"checkpoint parameter names do not match the model: {sorted(missing)[:5]}")
        for name, tensor in params.items():
            if tensor.data.shape != arrays[name].shape:
                raise DimensionError("load", tensor.data.shape, arrays[name].shape)
            tensor.data = arrays[name].astype(cfg.np_dtype, copy=False)
        return model, step, optimizer


# ---------------------------------------------------------------------------
# spec'd batch containers

@dataclass
class ContrastiveBatch:
    concept_embeddings: Tensor  # [N, projection_dim], unit rows
    text_embeddings: Tensor     # [N, projection_dim], unit rows
    y_v2t: np.ndarray           # [N, N] row-stochastic targets
    y_t2v: np.ndarray

    def __post_init__(self) -> None:
        n = self.concept_embeddings.shape[0]
        if self.text_embeddings.shape[0] != n:
            raise DimensionError("ContrastiveBatch", self.concept_embeddings.shape,
                                 self.text_embeddings.shape)
        if n < 2:
            raise ContractError("ContrastiveBatch: need at least 2 pairs for in-batch negatives")


@dataclass
class MatchBatch:
    concept_index: np.ndarray  # [3N] rows into the batch's concept list
    text_index: np.ndarray     # [3N]
    labels: np.ndarray         # [3N], 1 = match


@dataclass
class MaskedText:
    input_ids: list[int]
    original_ids: list[int]
    masked_positions: list[int]


@dataclass
class LossReport:
    l_bbox: float
    l_cl: float
    l_match: float
    l_mlm: float
    total: float


@dataclass
class LossOutput:
    report: LossReport
    total: Tensor  # scalar, differentiable
    negatives: tuple[np.ndarray, np.ndarray]  # (neg text per concept, neg concept per text)


# ---------------------------------------------------------------------------
# box loss

def _columns(t: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    n = t.shape[0]
    cols = [ag.reshape(ag.take(t, np.array([i]), axis=1), (n,)) for i in range(4)]
    return cols[0], cols[1], cols[2], cols[3]


def giou_tensor(pred: Tensor, target: np.ndarray) -> Tensor:
    """Differentiable GIoU of predicted (cx, cy, w, h) rows vs fixed targets.

    Predicted widths and heights are floored at 1e-6 so a collapsed box
    cannot produce a degenerate union or hull.
    """
    cx, cy, w, h = _columns(pred)
    w = ag.maximum(w, _BOX_WH_EPS)
    h = ag.maximum(h, _BOX_WH_EPS)
    px0, px1 = ag.sub(cx, ag.mul(w, 0.5)), ag.add(cx, ag.mul(w, 0.5))
    py0, py1 = ag.sub(cy, ag.mul(h, 0.5)), ag.add(cy, ag.mul(h, 0.5))
    t = np.asarray(target, dtype=pred.dtype)
    tx0, tx1 = t[:, 0] - t[:, 2] / 2, t[:, 0] + t[:, 2] / 2
    ty0, ty1 = t[:, 1] - t[:, 3] / 2, t[:, 1] + t[:, 3] / 2
    iw = ag.maximum(ag.sub(ag.minimum(px1, tx1), ag.maximum(px0, tx0)), 0.0)
    ih = ag.maximum(ag.sub(ag.minimum(py1, ty1), ag.maximum(py0, ty0)), 0.0)
    inter = ag.mul(iw, ih)
    union = ag.sub(ag.add(ag.mul(w, h), t[:, 2] * t[:, 3]), inter)
    hull = ag.mul(ag.sub(ag.maximum(px1, tx1), ag.minimum(px0, tx0)),
                  ag.sub(ag.maximum(py1, ty1), ag.minimum(py0, ty0)))
    return ag.sub(ag.div(inter, union), ag.div(ag.sub(hull, union), hull))


def loss_bbox_batch(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean of (1 - giou) + l1 over box rows."""
    if pred.ndim != 2 or pred.shape[1] != 4:
        raise DimensionError("loss_bbox", pred.shape, ("P", 4))
    penalty = ag.sub(1.0, giou_tensor(pred, target))
    l1 = ag.tensor_sum(ag.absolute(ag.sub(pred, np.asarray(target, dtype=pred.dtype))), axis=1)
    return ag.tensor_mean(ag.add(penalty, l1))


def loss_bbox(b: NormBox, b_hat: Tensor) -> Tensor:
    """Single-pair form: scalar (1 - giou(b, b_hat)) + ||b - b_hat||_1."""
    target = np.asarray([b.as_tuple()], dtype=b_hat.dtype)
    return loss_bbox_batch(ag.reshape(b_hat, (1, 4)), target)


def predict_box(model: AlignmentModel, image_rep: ConceptRepresentation,
                text: EncodedText) -> Tensor:
    """b_hat for one (whole image, text) pair; returns a length-4 tensor."""
    fused = model.trunk.fuse(text, image_rep, keep_attention=False)
    return ag.reshape(model.heads.box_from_cls(ag.reshape(fused.x_cls, (1, -1))), (4,))


# ---------------------------------------------------------------------------
# contrastive loss

def contrastive_targets_multipositive(groups) -> np.ndarray:
    """Row-stochastic targets where items sharing a group id are positives."""
    g = np.asarray(groups)
    match = (g[:, None] == g[None, :]).astype(np.float64)
    return match / match.sum(axis=1, keepdims=True)


def contrastive_loss(batch: ContrastiveBatch, tau: Tensor) -> Tensor:
    """Symmetric InfoNCE at temperature tau over index-aligned pairs."""
    logits = ag.div(ag.matmul(batch.concept_embeddings,
                              ag.transpose(batch.text_embeddings)), tau)
    v2t = ag.tensor_mean(ag.cross_entropy_with_targets(logits, batch.y_v2t))
    t2v = ag.tensor_mean(ag.cross_entropy_with_targets(ag.transpose(logits), batch.y_t2v))
    return ag.mul(ag.add(v2t, t2v), 0.5)


# ---------------------------------------------------------------------------
# matching loss and hard negatives

def _masked_row_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=1, keepdims=True)


def sample_hard_negatives(sim_logits: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw one hard-negative text per concept and concept per text.

    `sim_logits` are the detached contrastive logits (s / tau). Rows give
    p_v2t, columns p_t2v; the positive (diagonal) is zeroed and the rest
    renormalized before one multinomial draw per row.
    """
    n = sim_logits.shape[0]
    if n < 2 or sim_logits.shape[1] != n:
        raise ContractError(f"sample_hard_negatives: need a square matrix of N >= 2, got {sim_logits.shape}")

    def draw(p: np.ndarray) -> np.ndarray:
        p = p.copy()
        np.fill_diagonal(p, 0.0)
        out = np.empty(n, dtype=np.int64)
        for i in range(n):
            row = p[i]
            total = row.sum()
            if total <= 0.0:  # all other entries masked away: fall back to uniform
                row = np.ones(n)
                row[i] = 0.0
                total = row.sum()
            out[i] = rng.choice(n, p=row / total)
        return out

    neg_text_for_concept = draw(_masked_row_softmax(sim_logits))
    neg_concept_for_text = draw(_masked_row_softmax(sim_logits.T))
    return neg_text_for_concept, neg_concept_for_text


def build_match_batch(n: int, neg_text: np.ndarray, neg_concept: np.ndarray) -> MatchBatch:
    """N positives, then N (concept, neg text), then N (neg concept, text)."""
    ar = np.arange(n, dtype=np.int64)
    concept_index = np.concatenate([ar, ar, neg_concept])
    text_index = np.concatenate([ar, neg_text, ar])
    labels = np.concatenate([np.ones(n, dtype=np.int64), np.zeros(2 * n, dtype=np.int64)])
    return MatchBatch(concept_index=concept_index, text_index=text_index, labels=labels)


def matching_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean 2-way cross-entropy over the match/non-match examples."""
    if logits.ndim != 2 or logits.shape[1] != 2:
        raise DimensionError("matching_loss", logits.shape, ("3N", 2))
    targets = np.zeros(logits.shape, dtype=logits.dtype)
    targets[np.arange(len(labels)), np.asarray(labels)] = 1.0
    return ag.tensor_mean(ag.cross_entropy_with_targets(logits, targets))


# ---------------------------------------------------------------------------
# masked language modeling

def apply_mlm_mask(token_ids, rng: np.random.Generator, vocab_size: int,
                   mask_prob: float = MASK_PROB) -> MaskedText:
    """BERT-style masking: select non-specials at mask_prob, then 80/10/10.

    The 10% "random token" replacement draws from non-special ids other
    than the original token, so outcome counts match branch counts exactly.
    If the Bernoulli pass selects nothing, one candidate is force-masked.
    """
    original = [int(t) for t in token_ids]
    n_special = len(SPECIAL_TOKENS)
    candidates = [i for i, t in enumerate(original) if t >= n_special]
    if not candidates:
        raise ContractError("apply_mlm_mask: no non-special tokens to mask")
    selected = [i for i in candidates if rng.random() < mask_prob]
    if not selected:
        selected = [candidates[int(rng.integers(0, len(candidates)))]]
    input_ids = list(original)
    for pos in selected:
        roll = rng.random()
        if roll < 0.8:
            input_ids[pos] = MASK_ID
        elif roll < 0.9:
            choices = [t for t in range(n_special, vocab_size) if t != original[pos]]
            input_ids[pos] = choices[int(rng.integers(0, len(choices)))] if choices else MASK_ID
        # else: leave unchanged; the position still joins the loss
    return MaskedText(input_ids=input_ids, original_ids=original, masked_positions=selected)


def mlm_loss(logits_at_masked: Tensor, original_ids: np.ndarray) -> Tensor:
    """Mean cross-entropy of vocabulary logits at masked positions."""
    targets = np.zeros(logits_at_masked.shape, dtype=logits_at_masked.dtype)
    targets[np.arange(len(original_ids)), np.asarray(original_ids)] = 1.0
    return ag.tensor_mean(ag.cross_entropy_with_targets(logits_at_masked, targets))


# ---------------------------------------------------------------------------
# batched preparation and the combined loss

@dataclass
class PreparedBatch:
    """Everything total_loss needs, with all sampling already frozen."""

    images: np.ndarray          # [B, H, W, 3] floats in [0, 1]
    pair_image: np.ndarray      # [P] image index per pair
    text_ids: np.ndarray        # [P, L]
    text_mask: np.ndarray       # [P, L]
    masked_ids: np.ndarray      # [P, L] MLM inputs
    mlm_flat_positions: np.ndarray  # [K] indices into the flattened [P*L] grid
    mlm_targets: np.ndarray     # [K] original token ids
    mlm_weights: np.ndarray     # [K] 1 / (pair mask count * P)
    patch_indices: np.ndarray   # [P, M_max] local patch ids, padded with 0
    patch_valid: np.ndarray     # [P, M_max] 1 for real entries
    bbox_targets: np.ndarray    # [P, 4]
    kinds: list[str]
    record_ids: list[str]
    include_bbox: bool

    @property
    def n_pairs(self) -> int:
        return len(self.pair_image)


def prepare_batch(batch, vocab: Vocabulary, cfg: ModelConfig,
                  rng: np.random.Generator, include_bbox: bool = True) -> PreparedBatch:
    """Tokenize, pad, choose patch subsets, and freeze the MLM masking.

    `batch` provides .images, .pairs as (image_index, text, box or None,
    kind), and .record_ids; captions pair with the whole image and a
    (0.5, 0.5, 1, 1) box target.
    """
    pairs = batch.pairs
    if not pairs:
        raise ContractError("prepare_batch: batch has no (concept, text) pairs")
    grid = cfg.grid
    n_patches = cfg.patch_count
    length = cfg.max_text_len

    encoded = [vocab.encode(text, length) for _, text, _, _ in pairs]
    patch_sets = []
    for _, _, box, _ in pairs:
        if box is None:
            patch_sets.append(np.arange(n_patches, dtype=np.int64))
        else:
            patch_sets.append(np.asarray(patches_for_box(box, grid).indices, dtype=np.int64))
    m_max = max(len(p) for p in patch_sets)

    p_count = len(pairs)
    text_ids = np.zeros((p_count, length), dtype=np.int64)
    text_mask = np.zeros((p_count, length), dtype=np.float64)
    masked_ids = np.zeros((p_count, length), dtype=np.int64)
    patch_indices = np.zeros((p_count, m_max), dtype=np.int64)
    patch_valid = np.zeros((p_count, m_max), dtype=np.float64)
    bbox_targets = np.empty((p_count, 4), dtype=np.float64)
    flat_positions, mlm_targets, mlm_weights = [], [], []

    for i, ((img_idx, text, box, kind), ids, patches) in enumerate(zip(pairs, encoded, patch_sets)):
        text_ids[i], text_mask[i] = pad_ids(ids, length)
        masked = apply_mlm_mask(ids, rng, len(vocab))
        masked_ids[i], _ = pad_ids(masked.input_ids, length)
        for pos in masked.masked_positions:
            flat_positions.append(i * length + pos)
            mlm_targets.append(masked.original_ids[pos])
            mlm_weights.append(1.0 / (len(masked.masked_positions) * p_count))
        patch_indices[i, : len(patches)] = patches
        patch_valid[i, : len(patches)] = 1.0
        target_box = box if box is not None else WHOLE_IMAGE_BOX
        bbox_targets[i] = target_box.as_tuple()

    return PreparedBatch(
        images=batch.images,
        pair_image=np.asarray([p[0] for p in pairs], dtype=np.int64),
        text_ids=text_ids,
        text_mask=text_mask,
        masked_ids=masked_ids,
        mlm_flat_positions=np.asarray(flat_positions, dtype=np.int64),
        mlm_targets=np.asarray(mlm_targets, dtype=np.int64),
        mlm_weights=np.asarray(mlm_weights, dtype=np.float64),
        patch_indices=patch_indices,
        patch_valid=patch_valid,
        bbox_targets=bbox_targets,
        kinds=[p[3] for p in pairs],
        record_ids=list(batch.record_ids),
        include_bbox=include_bbox,
    )


def _concept_tokens(model: AlignmentModel, prepared: PreparedBatch,
                    vision_feats: Tensor) -> tuple[Tensor, Tensor, np.ndarray]:
    """Padded per-pair concept token stacks from the batched vision features.

    Returns (tokens [P, M_max+1, D], v_cls [P, D], key mask [P, M_max+1]).
    """
    cfg = model.cfg
    p_count, m_max = prepared.patch_indices.shape
    flat = ag.reshape(vision_feats, (vision_feats.shape[0] * cfg.patch_count, cfg.hidden_dim))
    global_idx = (prepared.pair_image[:, None] * cfg.patch_count + prepared.patch_indices).ravel()
    gathered = ag.reshape(ag.take(flat, global_idx, axis=0), (p_count, m_max, cfg.hidden_dim))
    valid = prepared.patch_valid.astype(cfg.np_dtype)
    gathered = ag.mul(gathered, valid[:, :, None])  # zero pad rows and their grads
    counts = valid.sum(axis=1, keepdims=True)
    v_cls = ag.mul(ag.tensor_sum(gathered, axis=1), (1.0 / counts).astype(cfg.np_dtype))
    tokens = ag.concat([ag.reshape(v_cls, (p_count, 1, cfg.hidden_dim)), gathered], axis=1)
    key_mask = np.concatenate([np.ones((p_count, 1)), prepared.patch_valid], axis=1)
    return tokens, v_cls, key_mask


def _whole_image_tokens(vision_feats: Tensor) -> Tensor:
    """[B, N, D] -> [B, N+1, D] with the mean feature prepended."""
    cls = ag.tensor_mean(vision_feats, axis=1, keepdims=True)
    return ag.concat([cls, vision_feats], axis=1)


def _rows(t: Tensor, idx: np.ndarray) -> Tensor:
    return ag.take(t, idx, axis=0)


def total_loss(model: AlignmentModel, prepared: PreparedBatch,
               rng: np.random.Generator | None = None,
               negatives: tuple[np.ndarray, np.ndarray] | None = None) -> LossOutput:
    """The combined objective on one prepared batch.

    Hard negatives are sampled from the detached contrastive logits unless
    `negatives` pins them (finite-difference tests freeze the sampling).
    """
    if negatives is None and rng is None:
        raise ContractError("total_loss: need an rng unless negatives are pinned")
    cfg = model.cfg
    p_count = prepared.n_pairs
    if p_count < 2:
        raise ContractError("total_loss: need at least 2 pairs for in-batch objectives")

    vision_feats = model.trunk.vision.encode_batch(prepared.images)  # [B, N, D]
    concepts, v_cls, concept_mask = _concept_tokens(model, prepared, vision_feats)
    text_feats, _ = model.trunk.text.encode_batch(prepared.text_ids, prepared.text_mask)
    w_cls = ag.reshape(ag.take(text_feats, np.array([0]), axis=1), (p_count, cfg.hidden_dim))

    # contrastive over the joint pool
    v_proj = model.heads.sim.project_concepts(v_cls)
    t_proj = model.heads.sim.project_texts(w_cls)
    cl_batch = ContrastiveBatch(
        concept_embeddings=v_proj, text_embeddings=t_proj,
        y_v2t=np.eye(p_count, dtype=cfg.np_dtype), y_t2v=np.eye(p_count, dtype=cfg.np_dtype))
    l_cl = contrastive_loss(cl_batch, model.heads.sim.tau)

    # matching with in-batch hard negatives
    sim_logits = (v_proj.data @ t_proj.data.T) / model.heads.sim.tau.data
    if negatives is None:
        neg_text, neg_concept = sample_hard_negatives(sim_logits, rng)
    else:
        neg_text, neg_concept = negatives
    match = build_match_batch(p_count, neg_text, neg_concept)
    fused_m, _ = model.trunk.fusion.fuse_batch(
        _rows(text_feats, match.text_index), prepared.text_mask[match.text_index],
        _rows(concepts, match.concept_index), concept_mask[match.concept_index])
    x_cls_m = ag.reshape(ag.take(fused_m, np.array([0]), axis=1), (3 * p_count, cfg.hidden_dim))
    l_match = matching_loss(model.heads.match(x_cls_m), match.labels)

    # MLM conditioned on each pair's own concept
    masked_feats, _ = model.trunk.text.encode_batch(prepared.masked_ids, prepared.text_mask)
    fused_mlm, _ = model.trunk.fusion.fuse_batch(
        masked_feats, prepared.text_mask, concepts, concept_mask)
    vocab_logits = model.heads.mlm(fused_mlm)  # [P, L, V]
    flat_logits = ag.reshape(vocab_logits, (p_count * cfg.max_text_len, cfg.vocab_size))
    picked = ag.take(flat_logits, prepared.mlm_flat_positions, axis=0)
    targets = np.zeros((len(prepared.mlm_targets), cfg.vocab_size), dtype=cfg.np_dtype)
    targets[np.arange(len(prepared.mlm_targets)), prepared.mlm_targets] = 1.0
    ce = ag.cross_entropy_with_targets(picked, targets)
    l_mlm = ag.tensor_sum(ag.mul(ce, prepared.mlm_weights.astype(cfg.np_dtype)))

    # box regression from the full image, for every pair
    if prepared.include_bbox:
        whole = _whole_image_tokens(vision_feats)
        fused_box, _ = model.trunk.fusion.fuse_batch(
            text_feats, prepared.text_mask, _rows(whole, prepared.pair_image), None)
        x_cls_b = ag.reshape(ag.take(fused_box, np.array([0]), axis=1), (p_count, cfg.hidden_dim))
        b_hat = model.heads.box_from_cls(x_cls_b)
        l_bbox = loss_bbox_batch(b_hat, prepared.bbox_targets.astype(cfg.np_dtype))
        total = ag.add(ag.add(l_bbox, l_cl), ag.add(l_match, l_mlm))
        l_bbox_val = l_bbox.item()
    else:
        total = ag.add(l_cl, ag.add(l_match, l_mlm))
        l_bbox_val = 0.0

    report = LossReport(l_bbox=l_bbox_val, l_cl=l_cl.item(), l_match=l_match.item(),
                        l_mlm=l_mlm.item(), total=total.item())
    return LossOutput(report=report, total=total, negatives=(neg_text, neg_concept))
