"""Record schema, tokenizer, annotation filtering, and the synthetic corpus.

Records travel as JSON Lines, one per image, with boxes in normalized
(cx, cy, w, h). Images are 8-bit PPM (P6). The procedural generator draws
colored shapes on a placement grid and emits captions, per-object labels,
and spatial-relation region phrases whose boxes are pair hulls, so training
and evaluation have exact ground truth.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError
from .geometry import NormBox

log = logging.getLogger(__name__)

PAD_ID, CLS_ID, SEP_ID, MASK_ID, UNK_ID = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]")

_WORD_RE = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class Concept:
    """One grounded annotation: a phrase, its box, and its granularity."""

    text: str
    box: NormBox
    kind: str  # "object" | "region"

    def __post_init__(self) -> None:
        if self.kind not in ("object", "region"):
            raise ContractError(f"Concept: unknown kind {self.kind!r}")


@dataclass
class MultiGrainedRecord:
    image_id: str
    image_path: str
    caption: str | None
    concepts: list[Concept] = field(default_factory=list)

    def to_json(self) -> str:
        payload = {
            "image_id": self.image_id,
            "image_path": self.image_path,
            "caption": self.caption,
            "concepts": [
                {"text": c.text, "box": list(c.box.as_tuple()), "kind": c.kind}
                for c in self.concepts
            ],
        }
        return json.dumps(payload, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "MultiGrainedRecord":
        raw = json.loads(line)
        concepts = [
            Concept(text=c["text"], box=NormBox(*c["box"]), kind=c["kind"])
            for c in raw.get("concepts", [])
        ]
        return cls(image_id=raw["image_id"], image_path=raw["image_path"],
                   caption=raw.get("caption"), concepts=concepts)


def write_records(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_records(path) -> list[MultiGrainedRecord]:
    """Parse a JSONL file; malformed lines are skipped with a warning."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(MultiGrainedRecord.from_json(line))
            except (json.JSONDecodeError, KeyError, TypeError, ContractError) as err:
                log.warning("skipping unreadable record at %s:%d: %s", path, lineno, err)
    return records


# ---------------------------------------------------------------------------
# vocabulary and tokenizer

def words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


class Vocabulary:
    """Dense token ids with the five fixed specials up front."""

    def __init__(self, tokens: list[str]) -> None:
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ContractError("Vocabulary: specials must be the first five entries")
        if len(set(tokens)) != len(tokens):
            raise ContractError("Vocabulary: duplicate tokens")
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_texts(cls, texts) -> "Vocabulary":
        seen: set[str] = set()
        for text in texts:
            seen.update(words(text))
        return cls(list(SPECIAL_TOKENS) + sorted(seen))

    def encode(self, text: str | None, max_len: int) -> list[int]:
        """[CLS] tokens [SEP], truncated to max_len with [SEP] kept last."""
        ids = [CLS_ID]
        for w in words(text or ""):
            ids.append(self.index.get(w, UNK_ID))
        ids.append(SEP_ID)
        if len(ids) > max_len:
            ids = ids[: max_len - 1] + [SEP_ID]
        return ids

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])

    def non_special_ids(self) -> list[int]:
        return list(range(len(SPECIAL_TOKENS), len(self.tokens)))


def pad_ids(ids: list[int], max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to max_len; returns (ids, attention mask) arrays."""
    out = np.full(max_len, PAD_ID, dtype=np.int64)
    out[: len(ids)] = ids
    mask = np.zeros(max_len, dtype=np.float64)
    mask[: len(ids)] = 1.0
    return out, mask


# ---------------------------------------------------------------------------
# PPM (P6) image I/O

def write_ppm(path, image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ContractError(f"write_ppm: expected uint8 HxWx3, got {image.dtype} {image.shape}")
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P6"):
        raise ContractError(f"read_ppm: {path} is not a P6 file")
    # header: magic, width, height, maxval, single whitespace, then raw pixels
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    pos += 1  # the single whitespace byte after maxval
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise ContractError(f"read_ppm: unsupported maxval {maxval}")
    pixels = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos)
    return pixels.reshape(h, w, 3).copy()


# ---------------------------------------------------------------------------
# annotation filtering

_CLAMP_TOL = 0.02   # permissible overflow outside the unit square
_MIN_AREA = 0.01    # minimum box area as a fraction of the image
_MAX_TEXT_JACCARD = 0.75


@dataclass
class RejectionReport:
    kept: int = 0
    clamped: int = 0
    dropped_invalid: int = 0
    dropped_small: int = 0
    dropped_text_overlap: int = 0

    def as_dict(self) -> dict:
        return dict(kept=self.kept, clamped=self.clamped,
                    dropped_invalid=self.dropped_invalid,
                    dropped_small=self.dropped_small,
                    dropped_text_overlap=self.dropped_text_overlap)


def _clamp_box(box: NormBox) -> tuple[NormBox | None, bool]:
    """Clamp up to 2% overflow back into the unit square; None if hopeless."""
    x0, y0, x1, y1 = box.corners()
    if box.w <= 0 or box.h <= 0:
        return None, False
    if x0 < -_CLAMP_TOL or y0 < -_CLAMP_TOL or x1 > 1 + _CLAMP_TOL or y1 > 1 + _CLAMP_TOL:
        return None, False
    if x0 >= 0 and y0 >= 0 and x1 <= 1 and y1 <= 1:
        return box, False
    nx0, ny0 = max(x0, 0.0), max(y0, 0.0)
    nx1, ny1 = min(x1, 1.0), min(y1, 1.0)
    if nx1 - nx0 <= 0 or ny1 - ny0 <= 0:
        return None, False
    return NormBox.from_corners(nx0, ny0, nx1, ny1), True


def token_jaccard(a: str, b: str) -> float:
    sa, sb = set(words(a)), set(words(b))
    if not sa and not sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)


def filter_annotations(records) -> tuple[list[MultiGrainedRecord], RejectionReport]:
    """Drop invalid, too-small, and textually duplicated annotations.

    Rules, in order per concept: clamp boxes overflowing the unit square by
    at most 2 percent and drop worse offenders; drop boxes with area below
    1 percent of the image; drop region texts whose token Jaccard with an
    already-kept region text of the same image exceeds 0.75. Records are
    never dropped, only their concepts. Filtering is idempotent.
    """
    report = RejectionReport()
    out: list[MultiGrainedRecord] = []
    for rec in records:
        kept: list[Concept] = []
        kept_region_texts: list[str] = []
        for concept in rec.concepts:
            clamped_box, was_clamped = _clamp_box(concept.box)
            if clamped_box is None:
                report.dropped_invalid += 1
                continue
            if clamped_box.area < _MIN_AREA:
                report.dropped_small += 1
                continue
            if concept.kind == "region":
                if any(token_jaccard(concept.text, prev) > _MAX_TEXT_JACCARD
                       for prev in kept_region_texts):
                    report.dropped_text_overlap += 1
                    continue
                kept_region_texts.append(concept.text)
            if was_clamped:
                report.clamped += 1
                concept = Concept(text=concept.text, box=clamped_box, kind=concept.kind)
            kept.append(concept)
            report.kept += 1
        out.append(MultiGrainedRecord(image_id=rec.image_id, image_path=rec.image_path,
                                      caption=rec.caption, concepts=kept))
    return out, report


# ---------------------------------------------------------------------------
# synthetic corpus

COLORS = {
    "red": (214, 45, 38),
    "green": (46, 166, 66),
    "blue": (48, 83, 214),
    "yellow": (230, 198, 41),
}
SHAPES = ("circle", "square", "triangle")
BACKGROUND = (238, 238, 238)

# fraction of (pair, relation) combos reserved for the held-out split only
_HOLDOUT_COMBO_MOD = 7


@dataclass(frozen=True)
class PlacedShape:
    color: str
    shape: str
    cell: int          # 0..3 on the 2x2 placement grid, reading order
    center: tuple[int, int]   # pixel center
    half: int          # half extent in pixels


@dataclass
class SyntheticSceneSpec:
    """Everything needed to render one scene and emit its annotations."""

    image_id: str
    size: int
    shapes: list[PlacedShape]


def _shape_mask(size: int, placed: PlacedShape) -> np.ndarray:
    ys, xs = np.ogrid[:size, :size]
    cx, cy = placed.center
    r = placed.half
    dx, dy = xs - cx, ys - cy
    if placed.shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if placed.shape == "circle":
        return dx * dx + dy * dy <= r * r
    # upward triangle: apex at the top, base at the bottom
    return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)


def _mask_box(mask: np.ndarray, size: int) -> NormBox:
    ys, xs = np.nonzero(mask)
    x0, x1 = int(xs.min()), int(xs.max())
    y0, y1 = int(ys.min()), int(ys.max())
    # +1: pixel x1 spans [x1, x1+1) in continuous image coordinates
    return NormBox.from_corners(x0 / size, y0 / size, (x1 + 1) / size, (y1 + 1) / size)


def render_scene(scene: SyntheticSceneSpec) -> tuple[np.ndarray, list[NormBox]]:
    """Rasterize a scene; returns the image and each shape's tight pixel box."""
    size = scene.size
    image = np.empty((size, size, 3), dtype=np.uint8)
    image[:] = BACKGROUND
    boxes = []
    for placed in scene.shapes:
        mask = _shape_mask(size, placed)
        image[mask] = COLORS[placed.color]
        boxes.append(_mask_box(mask, size))
    return image, boxes


def _relation(a: NormBox, b: NormBox) -> str:
    """Spatial relation of a w.r.t. b from box centers; horizontal wins ties."""
    dx, dy = a.cx - b.cx, a.cy - b.cy
    if abs(dx) >= abs(dy):
        return "left of" if dx < 0 else "right of"
    return "above" if dy < 0 else "below"


def _combo_key(c1: str, s1: str, rel: str, c2: str, s2: str) -> int:
    # stable across runs and processes, unlike hash()
    text = f"{c1} {s1}|{rel}|{c2} {s2}"
    acc = 2166136261
    for byte in text.encode("ascii"):
        acc = ((acc ^ byte) * 16777619) & 0xFFFFFFFF
    return acc


def _build_scene(image_id: str, size: int, rng: np.random.Generator) -> SyntheticSceneSpec:
    n_shapes = int(rng.integers(2, 5))
    cells = sorted(rng.choice(4, size=n_shapes, replace=False).tolist())
    colors = rng.permutation(list(COLORS))[:n_shapes].tolist()
    half_cell = size // 4
    placed = []
    for cell, color in zip(cells, colors):
        shape = SHAPES[int(rng.integers(0, len(SHAPES)))]
        row, col = divmod(cell, 2)
        base_cx = col * (size // 2) + half_cell
        base_cy = row * (size // 2) + half_cell
        half = int(rng.integers(size // 7, size // 5 + 1))
        jitter = max(1, half_cell - half - 1)
        cx = base_cx + int(rng.integers(-min(3, jitter), min(3, jitter) + 1))
        cy = base_cy + int(rng.integers(-min(3, jitter), min(3, jitter) + 1))
        placed.append(PlacedShape(color=color, shape=shape, cell=cell,
                                  center=(cx, cy), half=half))
    return SyntheticSceneSpec(image_id=image_id, size=size, shapes=placed)


def _scene_record(scene: SyntheticSceneSpec, image_dir_name: str,
                  holdout_combos: bool) -> tuple[MultiGrainedRecord, np.ndarray]:
    image, boxes = render_scene(scene)
    parts = [f"a {p.color} {p.shape}" for p in scene.shapes]
    caption = " and ".join(parts)
    concepts = [
        Concept(text=f"{p.color} {p.shape}", box=box, kind="object")
        for p, box in zip(scene.shapes, boxes)
    ]
    for i in range(len(scene.shapes) - 1):
        a, b = scene.shapes[i], scene.shapes[i + 1]
        box_a, box_b = boxes[i], boxes[i + 1]
        rel = _relation(box_a, box_b)
        key = _combo_key(a.color, a.shape, rel, b.color, b.shape)
        if not holdout_combos and key % _HOLDOUT_COMBO_MOD == 0:
            continue  # reserved for the held-out split
        hull = NormBox.from_corners(
            min(box_a.corners()[0], box_b.corners()[0]),
            min(box_a.corners()[1], box_b.corners()[1]),
            max(box_a.corners()[2], box_b.corners()[2]),
            max(box_a.corners()[3], box_b.corners()[3]),
        )
        concepts.append(Concept(text=f"{a.color} {a.shape} {rel} {b.color} {b.shape}",
                                box=hull, kind="region"))
    record = MultiGrainedRecord(
        image_id=scene.image_id,
        image_path=f"{image_dir_name}/{scene.image_id}.ppm",
        caption=caption,
        concepts=concepts,
    )
    return record, image


def _emit_split(prefix: str, n: int, rng: np.random.Generator, out: Path,
                image_size: int, holdout_combos: bool, workers: int) -> list[MultiGrainedRecord]:
    """Build scenes serially (rng order), render/write possibly in parallel."""
    scenes = [_build_scene(f"{prefix}_{i:06d}", image_size, rng) for i in range(n)]

    def job(scene: SyntheticSceneSpec) -> MultiGrainedRecord:
        record, image = _scene_record(scene, "images", holdout_combos=holdout_combos)
        write_ppm(out / record.image_path, image)
        return record

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(job, scenes))
    return [job(scene) for scene in scenes]


def generate_synthetic_corpus(seed: int, n_images: int, out_dir,
                              image_size: int = 64,
                              annotated_fraction: float = 0.5,
                              n_heldout: int | None = None,
                              workers: int = 1) -> dict:
    """Write records.jsonl, heldout.jsonl, vocab.txt, and images/ to out_dir.

    Deterministic for a fixed seed regardless of worker count. A
    (1 - annotated_fraction) share of training records keeps only its
    caption, so batches can mix annotated and caption-only images. Region
    phrases whose (subject, relation, object) combination falls in a
    reserved bucket are excluded from training and appear only in the
    held-out split.
    """
    if n_images < 1:
        raise ContractError(f"generate_synthetic_corpus: n_images must be >= 1, got {n_images}")
    if image_size < 16 or image_size % 4:
        raise ContractError(f"generate_synthetic_corpus: unusable image_size {image_size}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    if n_heldout is None:
        n_heldout = max(1, n_images // 5)

    root = np.random.SeedSequence(seed)
    seeds = root.spawn(3)
    train_rng, heldout_rng, strip_rng = (np.random.default_rng(s) for s in seeds)

    train_records = _emit_split("train", n_images, train_rng, out, image_size,
                                holdout_combos=False, workers=workers)
    for record in train_records:
        if strip_rng.random() >= annotated_fraction:
            record.concepts = []

    heldout_records = _emit_split("heldout", n_heldout, heldout_rng, out, image_size,
                                  holdout_combos=True, workers=workers)

    train_records, report = filter_annotations(train_records)
    heldout_records, heldout_report = filter_annotations(heldout_records)

    texts = [r.caption for r in train_records if r.caption]
    texts += [c.text for r in train_records for c in r.concepts]
    vocab = Vocabulary.from_texts(texts)

    write_records(out / "records.jsonl", train_records)
    write_records(out / "heldout.jsonl", heldout_records)
    vocab.save(out / "vocab.txt")
    return {
        "n_train": len(train_records),
        "n_heldout": len(heldout_records),
        "vocab_size": len(vocab),
        "filter_report": report.as_dict(),
        "heldout_filter_report": heldout_report.as_dict(),
    }


# ---------------------------------------------------------------------------
# dataset access for training and evaluation

class Dataset:
    """Records plus lazily cached image pixels for one corpus split."""

    def __init__(self, root, records: list[MultiGrainedRecord], vocab: Vocabulary) -> None:
        if not records:
            raise ContractError("Dataset: no records")
        self.root = Path(root)
        self.records = records
        self.vocab = vocab
        self._cache: dict[str, np.ndarray] = {}
        self.annotated = [i for i, r in enumerate(records) if r.concepts]
        self.caption_only = [i for i, r in enumerate(records) if not r.concepts]

    @classmethod
    def open(cls, root, split: str = "records") -> "Dataset":
        root = Path(root)
        records = read_records(root / f"{split}.jsonl")
        vocab = Vocabulary.load(root / "vocab.txt")
        return cls(root, records, vocab)

    def __len__(self) -> int:
        return len(self.records)

    def image(self, index: int) -> np.ndarray:
        rec = self.records[index]
        cached = self._cache.get(rec.image_id)
        if cached is None:
            cached = read_ppm(self.root / rec.image_path)
            self._cache[rec.image_id] = cached
        return cached
