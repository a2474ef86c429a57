"""Vision, text, and fusion transformers plus checkpoint I/O.

The vision encoder is a plain ViT over non-overlapping patches; a concept
representation is the row-major subset of its output features for the
patches a box touches, with the mean feature prepended. The text encoder is
a standard pre-LN transformer over token + position embeddings. The fusion
encoder runs text self-attention, cross-attention with concept tokens as
keys and values, and a feed-forward block per layer, and can retain the
cross-attention maps for visualization.

Single-sample entry points (encode_image, encode_text, fuse,
extract_concept) wrap batched internals that training and evaluation call
directly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError, DimensionError
from .geometry import NormBox, PatchGrid, PatchSet, patches_for_box

_NEG_INF = -1e9  # additive attention mask for padded keys


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    hidden_dim: int = 64
    vision_layers: int = 2
    text_layers: int = 2
    fusion_layers: int = 2
    attention_heads: int = 4
    patch_size: int = 8
    image_size: int = 64
    max_text_len: int = 18
    projection_dim: int = 32
    temperature_init: float = 0.07
    pixel_mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    pixel_std: tuple[float, float, float] = (0.5, 0.5, 0.5)
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.hidden_dim % self.attention_heads:
            raise ContractError(
                f"ModelConfig: hidden_dim {self.hidden_dim} not divisible by "
                f"attention_heads {self.attention_heads}")
        if self.image_size % self.patch_size:
            raise ContractError(
                f"ModelConfig: image_size {self.image_size} not divisible by "
                f"patch_size {self.patch_size}")
        if self.max_text_len < 2:
            raise ContractError(f"ModelConfig: max_text_len must be >= 2, got {self.max_text_len}")
        if self.vocab_size < 6:
            raise ContractError(f"ModelConfig: vocab_size must cover the specials, got {self.vocab_size}")
        if self.dtype not in ("float32", "float64"):
            raise ContractError(f"ModelConfig: dtype must be float32 or float64, got {self.dtype}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def patch_count(self) -> int:
        return self.grid_side * self.grid_side

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid(grid_h=self.grid_side, grid_w=self.grid_side,
                         patch_size=self.patch_size, image_size=self.image_size)


# ---------------------------------------------------------------------------
# output containers

@dataclass
class PatchFeatureMap:
    features: Tensor  # [N, hidden_dim], row-major patch order
    grid: PatchGrid

    def __post_init__(self) -> None:
        if self.features.shape[0] != self.grid.count:
            raise DimensionError("PatchFeatureMap", self.features.shape, (self.grid.count,))


@dataclass
class ConceptRepresentation:
    tokens: Tensor  # [M+1, hidden_dim]; row 0 is the mean of rows 1..M
    patch_set: PatchSet
    box: NormBox


@dataclass
class EncodedText:
    tokens: Tensor  # [L, hidden_dim]
    attention_mask: np.ndarray  # [L], 1 for real tokens

    @property
    def w_cls(self) -> Tensor:
        return ag.reshape(ag.take(self.tokens, np.array([0]), axis=0), (self.tokens.shape[-1],))


@dataclass
class FusedOutput:
    tokens: Tensor  # [L, hidden_dim]
    cross_attention_maps: list[Tensor] = field(default_factory=list)  # per layer [heads, L, M+1]

    @property
    def x_cls(self) -> Tensor:
        return ag.reshape(ag.take(self.tokens, np.array([0]), axis=0), (self.tokens.shape[-1],))


# ---------------------------------------------------------------------------
# parameter primitives

def trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> Tensor:
    """Normal(0, std) resampled until everything is within two deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return Tensor(out.astype(dtype), requires_grad=True)


class Linear:
    def __init__(self, rng, d_in: int, d_out: int, dtype, bias: bool = True,
                 std: float = 0.02) -> None:
        self.w = trunc_normal(rng, (d_in, d_out), std, dtype)
        self.b = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = ag.matmul(x, self.w)
        return ag.add(out, self.b) if self.b is not None else out

    def params(self) -> dict[str, Tensor]:
        return {"w": self.w, "b": self.b} if self.b is not None else {"w": self.w}


class LayerNorm:
    def __init__(self, dim: int, dtype) -> None:
        self.gain = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ag.add(ag.mul(ag.layer_norm(x), self.gain), self.bias)

    def params(self) -> dict[str, Tensor]:
        return {"gain": self.gain, "bias": self.bias}


class Attention:
    """Multi-head attention; query and key/value streams may differ."""

    def __init__(self, rng, dim: int, heads: int, dtype,
                 qk_std: float = 0.02, vo_std: float = 0.02) -> None:
        self.heads = heads
        self.wq = Linear(rng, dim, dim, dtype, std=qk_std)
        self.wk = Linear(rng, dim, dim, dtype, std=qk_std)
        self.wv = Linear(rng, dim, dim, dtype, std=vo_std)
        self.wo = Linear(rng, dim, dim, dtype, std=vo_std)

    def __call__(self, xq: Tensor, xkv: Tensor, add_mask: np.ndarray | None) -> tuple[Tensor, Tensor]:
        b, lq, dim = xq.shape
        lk = xkv.shape[1]
        h = self.heads
        dh = dim // h
        q = ag.transpose(ag.reshape(self.wq(xq), (b, lq, h, dh)), (0, 2, 1, 3))
        k = ag.transpose(ag.reshape(self.wk(xkv), (b, lk, h, dh)), (0, 2, 1, 3))
        v = ag.transpose(ag.reshape(self.wv(xkv), (b, lk, h, dh)), (0, 2, 1, 3))
        scores = ag.mul(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        if add_mask is not None:
            scores = ag.add(scores, add_mask)
        attn = ag.softmax(scores, axis=-1)  # [b, h, lq, lk]
        ctx = ag.reshape(ag.transpose(ag.matmul(attn, v), (0, 2, 1, 3)), (b, lq, dim))
        return self.wo(ctx), attn

    def params(self) -> dict[str, Tensor]:
        out = {}
        for name, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            for k, t in lin.params().items():
                out[f"{name}.{k}"] = t
        return out


class Mlp:
    def __init__(self, rng, dim: int, dtype) -> None:
        self.fc1 = Linear(rng, dim, 4 * dim, dtype)
        self.fc2 = Linear(rng, 4 * dim, dim, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ag.gelu(self.fc1(x)))

    def params(self) -> dict[str, Tensor]:
        out = {f"fc1.{k}": t for k, t in self.fc1.params().items()}
        out.update({f"fc2.{k}": t for k, t in self.fc2.params().items()})
        return out


def _collect(prefix: str, parts: dict[str, "object"]) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for name, part in parts.items():
        if isinstance(part, Tensor):
            out[f"{prefix}{name}"] = part
        else:
            for k, t in part.params().items():
                out[f"{prefix}{name}.{k}"] = t
    return out


class EncoderBlock:
    """Pre-LN transformer block: self-attention then feed-forward."""

    def __init__(self, rng, dim: int, heads: int, dtype) -> None:
        self.ln1 = LayerNorm(dim, dtype)
        self.attn = Attention(rng, dim, heads, dtype)
        self.ln2 = LayerNorm(dim, dtype)
        self.mlp = Mlp(rng, dim, dtype)

    def __call__(self, x: Tensor, add_mask: np.ndarray | None) -> tuple[Tensor, Tensor]:
        normed = self.ln1(x)
        attended, attn = self.attn(normed, normed, add_mask)
        h = ag.add(x, attended)
        h = ag.add(h, self.mlp(self.ln2(h)))
        return h, attn

    def params(self) -> dict[str, Tensor]:
        return _collect("", {"ln1": self.ln1, "attn": self.attn, "ln2": self.ln2, "mlp": self.mlp})


# at std 0.02 cross-attention starts numerically uniform, so the fused cls only
# ever sees the mean vision token and box regression cannot find "where"; the
# boosted query/key and value/output scales keep that path live from step one
_CROSS_QK_STD = 0.32
_CROSS_VO_STD = 0.08


class FusionBlock:
    """Text self-attention, cross-attention to concept tokens, feed-forward."""

    def __init__(self, rng, dim: int, heads: int, dtype) -> None:
        self.ln1 = LayerNorm(dim, dtype)
        self.self_attn = Attention(rng, dim, heads, dtype)
        self.ln2 = LayerNorm(dim, dtype)
        self.cross_attn = Attention(rng, dim, heads, dtype,
                                    qk_std=_CROSS_QK_STD, vo_std=_CROSS_VO_STD)
        self.ln3 = LayerNorm(dim, dtype)
        self.mlp = Mlp(rng, dim, dtype)

    def __call__(self, x: Tensor, concepts: Tensor, text_mask: np.ndarray | None,
                 concept_mask: np.ndarray | None) -> tuple[Tensor, Tensor]:
        normed = self.ln1(x)
        attended, _ = self.self_attn(normed, normed, text_mask)
        h = ag.add(x, attended)
        crossed, cross_map = self.cross_attn(self.ln2(h), concepts, concept_mask)
        h = ag.add(h, crossed)
        h = ag.add(h, self.mlp(self.ln3(h)))
        return h, cross_map

    def params(self) -> dict[str, Tensor]:
        return _collect("", {"ln1": self.ln1, "self_attn": self.self_attn,
                             "ln2": self.ln2, "cross_attn": self.cross_attn,
                             "ln3": self.ln3, "mlp": self.mlp})


# ---------------------------------------------------------------------------
# the three encoders

class VisionEncoder:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator) -> None:
        dtype = cfg.np_dtype
        self.cfg = cfg
        patch_dim = cfg.patch_size * cfg.patch_size * 3
        self.patch_embed = Linear(rng, patch_dim, cfg.hidden_dim, dtype)
        # position must stay visible under the patch content: at std 0.02 a
        # linear probe cannot recover (cx, cy) from the encoded tokens at all
        self.pos = trunc_normal(rng, (cfg.patch_count, cfg.hidden_dim), 0.5, dtype)
        self.blocks = [EncoderBlock(rng, cfg.hidden_dim, cfg.attention_heads, dtype)
                       for _ in range(cfg.vision_layers)]
        self.ln = LayerNorm(cfg.hidden_dim, dtype)

    def _patchify(self, pixels: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        b = pixels.shape[0]
        if pixels.shape[1:] != (cfg.image_size, cfg.image_size, 3):
            raise DimensionError("encode_image", pixels.shape[1:],
                                 (cfg.image_size, cfg.image_size, 3))
        mean = np.asarray(cfg.pixel_mean, dtype=cfg.np_dtype)
        std = np.asarray(cfg.pixel_std, dtype=cfg.np_dtype)
        x = (pixels.astype(cfg.np_dtype) - mean) / std
        g, p = cfg.grid_side, cfg.patch_size
        x = x.reshape(b, g, p, g, p, 3).transpose(0, 1, 3, 2, 4, 5)
        return np.ascontiguousarray(x.reshape(b, g * g, p * p * 3))

    def encode_batch(self, pixels: np.ndarray) -> Tensor:
        """pixels: [B, H, W, 3] in [0,1] -> features [B, N, hidden]."""
        x = ag.add(self.patch_embed(Tensor(self._patchify(pixels))), self.pos)
        for block in self.blocks:
            x, _ = block(x, None)
        return self.ln(x)

    def params(self) -> dict[str, Tensor]:
        parts = {"patch_embed": self.patch_embed, "pos": self.pos, "ln": self.ln}
        out = _collect("", parts)
        for i, block in enumerate(self.blocks):
            out.update(_collect(f"blocks.{i}.", block.params()))
        return out


class TextEncoder:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator) -> None:
        dtype = cfg.np_dtype
        self.cfg = cfg
        self.tok_emb = trunc_normal(rng, (cfg.vocab_size, cfg.hidden_dim), 0.02, dtype)
        self.pos = trunc_normal(rng, (cfg.max_text_len, cfg.hidden_dim), 0.02, dtype)
        self.blocks = [EncoderBlock(rng, cfg.hidden_dim, cfg.attention_heads, dtype)
                       for _ in range(cfg.text_layers)]
        self.ln = LayerNorm(cfg.hidden_dim, dtype)

    def encode_batch(self, ids: np.ndarray, mask: np.ndarray,
                     keep_attention: bool = False) -> tuple[Tensor, list[Tensor]]:
        """ids/mask: [B, L] -> (features [B, L, hidden], per-layer attention)."""
        if ids.shape[1] > self.cfg.max_text_len:
            raise ContractError(f"encode_text: length {ids.shape[1]} exceeds "
                                f"max_text_len {self.cfg.max_text_len}")
        if ids.max(initial=0) >= self.cfg.vocab_size or ids.min(initial=0) < 0:
            raise ContractError("encode_text: token id outside the vocabulary")
        length = ids.shape[1]
        x = ag.add(ag.embedding_lookup(self.tok_emb, ids),
                   ag.take(self.pos, np.arange(length), axis=0))
        add_mask = attention_bias(mask, self.cfg.np_dtype)
        maps = []
        for block in self.blocks:
            x, attn = block(x, add_mask)
            if keep_attention:
                maps.append(attn)
        return self.ln(x), maps

    def params(self) -> dict[str, Tensor]:
        out = _collect("", {"tok_emb": self.tok_emb, "pos": self.pos, "ln": self.ln})
        for i, block in enumerate(self.blocks):
            out.update(_collect(f"blocks.{i}.", block.params()))
        return out


class FusionEncoder:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator) -> None:
        dtype = cfg.np_dtype
        self.cfg = cfg
        self.blocks = [FusionBlock(rng, cfg.hidden_dim, cfg.attention_heads, dtype)
                       for _ in range(cfg.fusion_layers)]
        self.ln = LayerNorm(cfg.hidden_dim, dtype)
        # learned positional vector for the concept-cls slot; patch tokens
        # keep the positions they received inside the vision encoder
        self.concept_cls_pos = trunc_normal(rng, (cfg.hidden_dim,), 0.02, dtype)

    def fuse_batch(self, text_tokens: Tensor, text_mask: np.ndarray | None,
                   concepts: Tensor, concept_mask: np.ndarray | None,
                   keep_attention: bool = False) -> tuple[Tensor, list[Tensor]]:
        """text_tokens [B, L, D] x concepts [B, M+1, D] -> (fused, cross maps)."""
        b, m1, dim = concepts.shape
        pad = Tensor(np.zeros((1, m1 - 1, dim), dtype=concepts.dtype)) if m1 > 1 else None
        cls_row = ag.reshape(self.concept_cls_pos, (1, 1, dim))
        pos = ag.concat([cls_row, pad], axis=1) if pad is not None else cls_row
        kv = ag.add(concepts, pos)
        text_bias = attention_bias(text_mask, self.cfg.np_dtype) if text_mask is not None else None
        concept_bias = attention_bias(concept_mask, self.cfg.np_dtype) if concept_mask is not None else None
        x = text_tokens
        maps = []
        for block in self.blocks:
            x, cross_map = block(x, kv, text_bias, concept_bias)
            if keep_attention:
                maps.append(cross_map)
        return self.ln(x), maps

    def params(self) -> dict[str, Tensor]:
        out = _collect("", {"ln": self.ln, "concept_cls_pos": self.concept_cls_pos})
        for i, block in enumerate(self.blocks):
            out.update(_collect(f"blocks.{i}.", block.params()))
        return out


def attention_bias(mask: np.ndarray | None, dtype) -> np.ndarray | None:
    """[B, L] presence mask -> additive [B, 1, 1, L] bias with -1e9 at pads."""
    if mask is None:
        return None
    return ((1.0 - mask) * _NEG_INF).astype(dtype)[:, None, None, :]


class Trunk:
    """The three encoders plus the single-sample convenience API."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator) -> None:
        self.cfg = cfg
        self.vision = VisionEncoder(cfg, rng)
        self.text = TextEncoder(cfg, rng)
        self.fusion = FusionEncoder(cfg, rng)

    def params(self) -> dict[str, Tensor]:
        out = _collect("vision.", self.vision.params())
        out.update(_collect("text.", self.text.params()))
        out.update(_collect("fusion.", self.fusion.params()))
        return out

    # single-sample API

    def encode_image(self, pixels) -> PatchFeatureMap:
        arr = pixels.data if isinstance(pixels, Tensor) else np.asarray(pixels)
        features = self.vision.encode_batch(arr[None])
        flat = ag.reshape(features, (self.cfg.patch_count, self.cfg.hidden_dim))
        return PatchFeatureMap(features=flat, grid=self.cfg.grid)

    def extract_concept(self, feature_map: PatchFeatureMap, box: NormBox) -> ConceptRepresentation:
        patch_set = patches_for_box(box, feature_map.grid)
        idx = np.asarray(patch_set.indices, dtype=np.int64)
        selected = ag.take(feature_map.features, idx, axis=0)
        cls = ag.tensor_mean(selected, axis=0, keepdims=True)
        tokens = ag.concat([cls, selected], axis=0)
        return ConceptRepresentation(tokens=tokens, patch_set=patch_set, box=box)

    def encode_text(self, token_ids) -> EncodedText:
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim != 1:
            raise DimensionError("encode_text", ids.shape, ("L",))
        mask = np.ones(len(ids), dtype=np.float64)
        tokens, _ = self.text.encode_batch(ids[None], mask[None])
        return EncodedText(tokens=ag.reshape(tokens, (len(ids), self.cfg.hidden_dim)),
                           attention_mask=mask)

    def fuse(self, text: EncodedText, concept: ConceptRepresentation,
             keep_attention: bool = True) -> FusedOutput:
        length, dim = text.tokens.shape
        m1 = concept.tokens.shape[0]
        fused, maps = self.fusion.fuse_batch(
            ag.reshape(text.tokens, (1, length, dim)),
            text.attention_mask[None],
            ag.reshape(concept.tokens, (1, m1, dim)),
            None,
            keep_attention=keep_attention,
        )
        heads = self.cfg.attention_heads
        flat_maps = [ag.reshape(m, (heads, length, m1)) for m in maps]
        return FusedOutput(tokens=ag.reshape(fused, (length, dim)),
                           cross_attention_maps=flat_maps)


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + concatenated flat binary tensors

_CHECKPOINT_FORMAT = "xgrain-checkpoint-1"


def save_checkpoint(directory, config: ModelConfig, named_params: dict[str, Tensor],
                    step: int = 0, optimizer_arrays: dict[str, np.ndarray] | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": _CHECKPOINT_FORMAT,
        "config": asdict(config),
        "step": step,
        "params": [
            {"name": name, "shape": list(t.data.shape), "dtype": str(t.data.dtype)}
            for name, t in named_params.items()
        ],
        "optimizer": None,
    }
    with open(directory / "params.bin", "wb") as fh:
        for t in named_params.values():
            ag.write_tensor(fh, t.data)
    if optimizer_arrays is not None:
        manifest["optimizer"] = [
            {"name": name, "shape": list(a.shape), "dtype": str(a.dtype)}
            for name, a in optimizer_arrays.items()
        ]
        with open(directory / "optimizer.bin", "wb") as fh:
            for a in optimizer_arrays.values():
                ag.write_tensor(fh, a)
    with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(directory) -> tuple[ModelConfig, dict[str, np.ndarray], int, dict[str, np.ndarray] | None]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise ContractError(f"load_checkpoint: no manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != _CHECKPOINT_FORMAT:
        raise ContractError(f"load_checkpoint: unknown format {manifest.get('format')!r}")
    raw_cfg = dict(manifest["config"])
    for key in ("pixel_mean", "pixel_std"):
        raw_cfg[key] = tuple(raw_cfg[key])
    config = ModelConfig(**raw_cfg)
    params: dict[str, np.ndarray] = {}
    with open(directory / "params.bin", "rb") as fh:
        for entry in manifest["params"]:
            arr = ag.read_tensor(fh, np.dtype(entry["dtype"]))
            if list(arr.shape) != entry["shape"]:
                raise ContractError(f"load_checkpoint: shape mismatch for {entry['name']}")
            params[entry["name"]] = arr
    optimizer = None
    if manifest.get("optimizer"):
        optimizer = {}
        with open(directory / "optimizer.bin", "rb") as fh:
            for entry in manifest["optimizer"]:
                optimizer[entry["name"]] = ag.read_tensor(fh, np.dtype(entry["dtype"]))
    return config, params, int(manifest.get("step", 0)), optimizer
