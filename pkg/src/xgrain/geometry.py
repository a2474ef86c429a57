"""Normalized box geometry and patch-grid membership.

Boxes are (cx, cy, w, h) in unit-square coordinates, x rightward and y
downward. Patch cells are half-open: cell (r, c) of a gh x gw grid covers
[c/gw, (c+1)/gw) x [r/gh, (r+1)/gh), so a box edge sitting exactly on a
grid line does not pull in the far cell.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ContractError

# external annotations may overrun the frame slightly; construction admits up
# to 2 percent so the annotation filter can clamp and report them downstream
_EDGE_TOL = 0.02
# minimum overlap width that counts as "positive area"; guards float noise
# when a box edge lands within rounding distance of a grid line
_OVERLAP_EPS = 1e-9


@dataclass(frozen=True)
class NormBox:
    """Center-size box, validated to sit inside the unit square."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ContractError(f"NormBox: size out of (0, 1]: w={self.w}, h={self.h}")
        x0, y0, x1, y1 = self.corners()
        if x0 < -_EDGE_TOL or y0 < -_EDGE_TOL or x1 > 1.0 + _EDGE_TOL or y1 > 1.0 + _EDGE_TOL:
            raise ContractError(f"NormBox: box {self.as_tuple()} exceeds the unit square")

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0,
                self.cx + self.w / 2.0, self.cy + self.h / 2.0)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)

    @property
    def area(self) -> float:
        return self.w * self.h

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> "NormBox":
        return cls((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)


WHOLE_IMAGE_BOX = NormBox(0.5, 0.5, 1.0, 1.0)


@dataclass(frozen=True)
class PatchGrid:
    """A grid_h x grid_w grid of square pixel patches tiling a square image.

    Cell (r, c) covers the unit-square rectangle
    [c/grid_w, (c+1)/grid_w) x [r/grid_h, (r+1)/grid_h).
    """

    grid_h: int
    grid_w: int
    patch_size: int
    image_size: int

    def __post_init__(self) -> None:
        if self.grid_h < 1 or self.grid_w < 1 or self.patch_size < 1:
            raise ContractError(
                f"PatchGrid: degenerate grid {self.grid_h}x{self.grid_w} "
                f"of {self.patch_size}px patches")
        # square images only: both sides must tile to the same pixel size
        if self.image_size != self.grid_h * self.patch_size:
            raise ContractError(
                f"PatchGrid: image_size {self.image_size} != "
                f"grid_h {self.grid_h} * patch_size {self.patch_size}")
        if self.image_size != self.grid_w * self.patch_size:
            raise ContractError(
                f"PatchGrid: non-square image: grid_w {self.grid_w} * "
                f"patch_size {self.patch_size} != image_size {self.image_size}")

    @property
    def count(self) -> int:
        return self.grid_h * self.grid_w

    def cell_center(self, index: int) -> tuple[float, float]:
        r, c = divmod(index, self.grid_w)
        return ((c + 0.5) / self.grid_w, (r + 0.5) / self.grid_h)


@dataclass(frozen=True)
class PatchSet:
    """Sorted, unique patch indices into a PatchGrid, row-major."""

    grid: PatchGrid
    indices: tuple[int, ...]

    def __post_init__(self) -> None:
        idx = self.indices
        if not idx:
            raise ContractError("PatchSet: empty index set")
        if any(i < 0 or i >= self.grid.count for i in idx):
            raise ContractError(f"PatchSet: index out of range for grid {self.grid}")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ContractError("PatchSet: indices must be strictly increasing")

    def __len__(self) -> int:
        return len(self.indices)


def intersection_area(a: NormBox, b: NormBox) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    return iw * ih


def _corner_union(a: NormBox, b: NormBox) -> float:
    # areas from corner differences, matching intersection_area's arithmetic,
    # and grouped as big + (small - inter): under containment the bracket is
    # exactly zero, so hull - union is exactly zero too (not one ulp off)
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    big, small = (area_a, area_b) if area_a >= area_b else (area_b, area_a)
    return big + (small - intersection_area(a, b))


def iou(a: NormBox, b: NormBox) -> float:
    return intersection_area(a, b) / _corner_union(a, b)


def giou(a: NormBox, b: NormBox) -> float:
    """Generalized IoU: iou minus the hull's share of empty space, in [-1, 1]."""
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    inter = intersection_area(a, b)
    union = _corner_union(a, b)
    hull = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    if hull <= 0.0 or union <= 0.0:
        raise ContractError("giou: degenerate hull or union")
    return inter / union - (hull - union) / hull


def l1_box(a: NormBox, b: NormBox) -> float:
    """Sum of absolute coordinate differences in (cx, cy, w, h)."""
    return (abs(a.cx - b.cx) + abs(a.cy - b.cy) + abs(a.w - b.w) + abs(a.h - b.h))


def patches_for_box(box: NormBox, grid: PatchGrid) -> PatchSet:
    """All cells whose open interior overlaps the box with positive area.

    A cell counts if the overlap width and height both exceed a 1e-9 guard;
    a box small enough to clear no cell falls back to the cell holding its
    center, so the result is never empty.
    """
    x0, y0, x1, y1 = box.corners()
    cols, rows = grid.grid_w, grid.grid_h
    c0 = max(0, int(x0 * cols))
    c1 = min(cols - 1, int(x1 * cols))
    r0 = max(0, int(y0 * rows))
    r1 = min(rows - 1, int(y1 * rows))
    indices = []
    for r in range(r0, r1 + 1):
        cy0, cy1 = r / rows, (r + 1) / rows
        if min(y1, cy1) - max(y0, cy0) <= _OVERLAP_EPS:
            continue
        for c in range(c0, c1 + 1):
            cx0, cx1 = c / cols, (c + 1) / cols
            if min(x1, cx1) - max(x0, cx0) > _OVERLAP_EPS:
                indices.append(r * cols + c)
    if not indices:
        c = min(cols - 1, max(0, int(box.cx * cols)))
        r = min(rows - 1, max(0, int(box.cy * rows)))
        indices = [r * cols + c]
    return PatchSet(grid=grid, indices=tuple(indices))
