"""Boxes, bitmasks, IoU, RoI feature pooling and the two-channel
spatial pair encoding.

Coordinate conventions: boxes live in continuous image coordinates with
x to the right and y down. A feature-grid pixel (r, c) covers the square
[c, c+1) x [r, r+1) in grid-index space; its center sits at (c+0.5, r+0.5).
Image coordinates map to grid-index space by a pure scale
(grid_dim / image_dim), no offset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise DataError(f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")

    @property
    def width(self):
        return self.x2 - self.x1

    @property
    def height(self):
        return self.y2 - self.y1

    @property
    def area(self):
        return self.width * self.height

    @property
    def center(self):
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def contains_point(self, x, y):
        return self.x1 <= x < self.x2 and self.y1 <= y < self.y2

    def as_tuple(self):
        return (self.x1, self.y1, self.x2, self.y2)


def box_iou(a: Box, b: Box) -> float:
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def union_box(a: Box, b: Box) -> Box:
    return Box(min(a.x1, b.x1), min(a.y1, b.y1), max(a.x2, b.x2), max(a.y2, b.y2))


class BitMask:
    """Row-major binary occupancy grid at image resolution."""

    def __init__(self, bits):
        bits = np.asarray(bits, dtype=bool)
        if bits.ndim != 2:
            raise ShapeError(f"mask must be 2-d, got shape {bits.shape}")
        self.bits = bits

    @property
    def height(self):
        return self.bits.shape[0]

    @property
    def width(self):
        return self.bits.shape[1]

    def any(self):
        return bool(self.bits.any())

    def popcount(self):
        return int(self.bits.sum())

    def bbox(self) -> Box:
        """Tight box around the set bits (pixel edges)."""
        if not self.any():
            raise DataError("empty mask has no bounding box")
        rows = np.flatnonzero(self.bits.any(axis=1))
        cols = np.flatnonzero(self.bits.any(axis=0))
        return Box(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))

    def __eq__(self, other):
        return isinstance(other, BitMask) and np.array_equal(self.bits, other.bits)


def mask_iou(a: BitMask, b: BitMask) -> float:
    if a.bits.shape != b.bits.shape:
        raise ShapeError(f"mask grids differ: {a.bits.shape} vs {b.bits.shape}")
    inter = int(np.logical_and(a.bits, b.bits).sum())
    union = int(np.logical_or(a.bits, b.bits).sum())
    return inter / union if union else 0.0


@dataclass
class FeatureGrid:
    """Dense C x H x W activation array tied to an image extent."""

    data: np.ndarray
    image_height: int
    image_width: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ShapeError(f"feature grid must be (C, H, W), got {self.data.shape}")

    @classmethod
    def from_array(cls, data):
        """Grid whose image extent equals its own resolution."""
        data = np.asarray(data, dtype=np.float64)
        return cls(data, data.shape[1], data.shape[2])

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def grid_height(self):
        return self.data.shape[1]

    @property
    def grid_width(self):
        return self.data.shape[2]

    @property
    def scale_x(self):
        return self.data.shape[2] / self.image_width

    @property
    def scale_y(self):
        return self.data.shape[1] / self.image_height


def _sample_positions(grid: FeatureGrid, box: Box, out_hw):
    """Bilinear sample rows/columns and weights for one RoI.

    Returns 1-d arrays (r0, r1, wr) over output rows and (c0, c1, wc) over
    output columns; the sampling factorizes by axis. Positions clamp to the
    grid edge, which also covers boxes smaller than one feature cell.
    """
    oh, ow = out_hw
    if oh < 1 or ow < 1:
        raise ShapeError(f"pooling target must be >= 1x1, got {out_hw}")
    gx1, gx2 = box.x1 * grid.scale_x, box.x2 * grid.scale_x
    gy1, gy2 = box.y1 * grid.scale_y, box.y2 * grid.scale_y
    cx = gx1 + (np.arange(ow) + 0.5) * (gx2 - gx1) / ow
    cy = gy1 + (np.arange(oh) + 0.5) * (gy2 - gy1) / oh
    # shift to pixel-center space, clamp to edges
    u = np.clip(cx - 0.5, 0.0, grid.grid_width - 1.0)
    v = np.clip(cy - 0.5, 0.0, grid.grid_height - 1.0)
    c0 = np.floor(u).astype(int)
    r0 = np.floor(v).astype(int)
    c1 = np.minimum(c0 + 1, grid.grid_width - 1)
    r1 = np.minimum(r0 + 1, grid.grid_height - 1)
    return r0, r1, v - r0, c0, c1, u - c0


def roi_align(grid: FeatureGrid, box: Box, out=(7, 7)) -> np.ndarray:
    """Pool a box into (C, out_h, out_w), one bilinear sample per cell center."""
    r0, r1, wr, c0, c1, wc = _sample_positions(grid, box, out)
    d = grid.data
    rows0, rows1 = d[:, r0, :], d[:, r1, :]
    top = rows0[:, :, c0] * (1 - wc) + rows0[:, :, c1] * wc
    bot = rows1[:, :, c0] * (1 - wc) + rows1[:, :, c1] * wc
    return top * (1 - wr[:, None]) + bot * wr[:, None]


def roi_align_backward(d_out, grid: FeatureGrid, box: Box, out=(7, 7)) -> np.ndarray:
    """Gradient of roi_align w.r.t. the grid data (same sampling geometry)."""
    r0, r1, wr, c0, c1, wc = _sample_positions(grid, box, out)
    d_out = np.asarray(d_out, dtype=np.float64)
    oh, ow = d_out.shape[1:]
    rr0 = np.broadcast_to(r0[:, None], (oh, ow))
    rr1 = np.broadcast_to(r1[:, None], (oh, ow))
    cc0 = np.broadcast_to(c0[None, :], (oh, ow))
    cc1 = np.broadcast_to(c1[None, :], (oh, ow))
    wr = wr[:, None]
    wc = wc[None, :]
    dgrid = np.zeros_like(grid.data)
    w00 = (1 - wr) * (1 - wc)
    w01 = (1 - wr) * wc
    w10 = wr * (1 - wc)
    w11 = wr * wc
    for c in range(grid.channels):
        np.add.at(dgrid[c], (rr0, cc0), d_out[c] * w00)
        np.add.at(dgrid[c], (rr0, cc1), d_out[c] * w01)
        np.add.at(dgrid[c], (rr1, cc0), d_out[c] * w10)
        np.add.at(dgrid[c], (rr1, cc1), d_out[c] * w11)
    return dgrid


def downsample_mask(mask: BitMask, grid: FeatureGrid) -> np.ndarray:
    """Mask at feature resolution: a cell is inside iff the mask covers
    at least 50% of the image pixels whose centers fall in its footprint."""
    gh, gw = grid.grid_height, grid.grid_width
    if mask.height < gh or mask.width < gw:
        raise ShapeError("mask resolution below grid resolution")
    if (mask.height, mask.width) != (grid.image_height, grid.image_width):
        raise ShapeError("mask extent must match the grid's image extent")
    sy = mask.height / gh
    sx = mask.width / gw
    integral = np.zeros((mask.height + 1, mask.width + 1), dtype=np.int64)
    integral[1:, 1:] = np.cumsum(np.cumsum(mask.bits, axis=0), axis=1)
    edges_r = np.ceil(np.arange(gh + 1) * sy - 0.5).astype(int).clip(0, mask.height)
    edges_c = np.ceil(np.arange(gw + 1) * sx - 0.5).astype(int).clip(0, mask.width)
    out = np.zeros((gh, gw), dtype=bool)
    for r in range(gh):
        r0, r1 = edges_r[r], edges_r[r + 1]
        for c in range(gw):
            c0, c1 = edges_c[c], edges_c[c + 1]
            total = (r1 - r0) * (c1 - c0)
            if total <= 0:
                continue
            inside = (integral[r1, c1] - integral[r0, c1]
                      - integral[r1, c0] + integral[r0, c0])
            out[r, c] = 2 * inside >= total
    return out


def mask_roi_align(grid: FeatureGrid, mask: BitMask, out=(7, 7)) -> np.ndarray:
    """Zero grid values outside the downsampled mask, then pool the
    mask's bounding box."""
    if not mask.any():
        raise DataError("instance mask is empty")
    cell_mask = downsample_mask(mask, grid)
    if not cell_mask.any():
        raise DataError("mask vanished at feature resolution")
    masked = FeatureGrid(grid.data * cell_mask[None, :, :],
                         grid.image_height, grid.image_width)
    return roi_align(masked, mask.bbox(), out)


PAIR_MAP_SIZE = 64


def spatial_pair_encoding(h_box: Box, o_box: Box, mode="box",
                          h_mask: BitMask | None = None,
                          o_mask: BitMask | None = None) -> np.ndarray:
    """(2, 64, 64) occupancy tensor in the union-box frame of the pair.

    Channel 0 holds the human, channel 1 the object. In box mode a cell is
    set iff its center lies in the entity's box; in mask mode the entity's
    bitmask is sampled at the cell center.
    """
    if mode not in ("box", "mask"):
        raise ValueError(f"unknown pair-encoding mode {mode!r}")
    if mode == "mask" and (h_mask is None or o_mask is None):
        raise DataError("mask-mode pair encoding requires both masks")
    frame = union_box(h_box, o_box)
    n = PAIR_MAP_SIZE
    cx = frame.x1 + (np.arange(n) + 0.5) * frame.width / n
    cy = frame.y1 + (np.arange(n) + 0.5) * frame.height / n
    out = np.zeros((2, n, n), dtype=np.float64)
    for ch, (box, mask) in enumerate(((h_box, h_mask), (o_box, o_mask))):
        if mode == "box":
            occ = (((cx >= box.x1) & (cx < box.x2))[None, :]
                   & ((cy >= box.y1) & (cy < box.y2))[:, None])
        else:
            px = np.clip(np.floor(cx).astype(int), 0, mask.width - 1)
            py = np.clip(np.floor(cy).astype(int), 0, mask.height - 1)
            occ = mask.bits[np.ix_(py, px)]
        out[ch] = occ.astype(np.float64)
    return out
