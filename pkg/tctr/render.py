#!/usr/bin/env python3
"""
render.py
--------------------------------
Bird's-eye-view raster of a target frame, drawn with Pillow and saved as a
BMP: points in grey, ground-truth outlines in green, detections in red.
"""
from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from PIL import Image, ImageDraw

from .pillars import GridConfig, GtBox

POINT_COLOR = (160, 160, 160)
GT_COLOR = (0, 200, 0)
DET_COLOR = (230, 0, 0)


class Canvas:
    """RGB image over the grid's x/y extent; row 0 is the top (largest y)."""

    def __init__(self, grid: GridConfig, width: int, height: int):
        self.grid = grid
        self.width = width
        self.height = height
        self.image = Image.new("RGB", (width, height))
        self.draw = ImageDraw.Draw(self.image)

    @property
    def pixels(self) -> np.ndarray:
        """[H×W×3] uint8 copy of the image."""
        return np.asarray(self.image).copy()

    def to_pixel(self, x: np.ndarray, y: np.ndarray):
        (x0, x1), (y0, y1) = self.grid.x_range, self.grid.y_range
        col = np.floor((np.asarray(x) - x0) / (x1 - x0) * self.width).astype(np.int64)
        row = np.floor((y1 - np.asarray(y)) / (y1 - y0) * self.height).astype(np.int64)
        return row, col

    def plot(self, x: np.ndarray, y: np.ndarray, color) -> None:
        row, col = self.to_pixel(x, y)
        ok = (row >= 0) & (row < self.height) & (col >= 0) & (col < self.width)
        if np.any(ok):
            self.draw.point(list(zip(col[ok].tolist(), row[ok].tolist())), fill=tuple(color))

    def draw_box(self, box: GtBox, color) -> None:
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        local = np.array([[1, 1], [1, -1], [-1, -1], [-1, 1]]) * [box.l / 2, box.w / 2]
        corners = local @ np.array([[c, s], [-s, c]]) + [box.x, box.y]
        row, col = self.to_pixel(corners[:, 0], corners[:, 1])
        self.draw.polygon(list(zip(col.tolist(), row.tolist())), outline=tuple(color))

    def count(self, color) -> int:
        return int(np.sum(np.all(self.pixels == np.asarray(color, dtype=np.uint8), axis=2)))

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.image.save(path, "BMP")
        return path


def render_frame(points: np.ndarray, gts: Sequence[GtBox], dets: Sequence[GtBox], grid: GridConfig,
                 width: int, height: int) -> Canvas:
    canvas = Canvas(grid, width, height)
    pts = np.asarray(points).reshape(-1, 4)
    canvas.plot(pts[:, 0], pts[:, 1], POINT_COLOR)
    for box in gts:
        canvas.draw_box(box, GT_COLOR)
    for box in dets:
        canvas.draw_box(box, DET_COLOR)
    return canvas


def render_detections(detector, seq, out_path: Union[str, Path], width: int, height: int) -> Path:
    """Run `detector` on the sequence and write the target frame's raster to out_path."""
    dets = detector.detect(seq)
    canvas = render_frame(seq.target.points, seq.target.gt_boxes, dets.as_gt_boxes(),
                          detector.cfg.grid, width, height)
    return canvas.save(out_path)
