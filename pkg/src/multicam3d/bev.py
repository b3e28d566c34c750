"""Top-down SVG rendering of a scene: ground-truth boxes in green,
predictions in blue, the ego vehicle at the origin, 1 px = 0.2 m, and a
heading tick from each box center to its front edge.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET

import numpy as np

from .evaluate import DetectionRecord
from .scene_sim import Scene

METERS_PER_PIXEL = 0.2
GT_COLOR = "#2e8b57"
PRED_COLOR = "#1e6bd6"


def _to_canvas(x: float, y: float, half: float) -> tuple[float, float]:
    """Ego (x forward, y left) to SVG pixels (x up, y left)."""
    return (half - y / METERS_PER_PIXEL, half - x / METERS_PER_PIXEL)


def _box_polygon(cx, cy, w, length, yaw, half):
    c, s = np.cos(yaw), np.sin(yaw)
    pts = []
    for sx, sy in ((0.5, 0.5), (0.5, -0.5), (-0.5, -0.5), (-0.5, 0.5)):
        bx, by = sx * length, sy * w
        pts.append(_to_canvas(cx + c * bx - s * by, cy + s * bx + c * by, half))
    return pts


def _add_box(root, cx, cy, w, length, yaw, half, color):
    pts = _box_polygon(cx, cy, w, length, yaw, half)
    ET.SubElement(root, "polygon", {
        "points": " ".join(f"{px:.2f},{py:.2f}" for px, py in pts),
        "fill": "none", "stroke": color, "stroke-width": "1.5",
    })
    front_x = cx + np.cos(yaw) * 0.5 * length
    front_y = cy + np.sin(yaw) * 0.5 * length
    x0, y0 = _to_canvas(cx, cy, half)
    x1, y1 = _to_canvas(front_x, front_y, half)
    ET.SubElement(root, "line", {
        "x1": f"{x0:.2f}", "y1": f"{y0:.2f}", "x2": f"{x1:.2f}", "y2": f"{y1:.2f}",
        "stroke": color, "stroke-width": "1.0",
    })


def render_bev(scene: Scene, predictions: list[DetectionRecord], out_path,
               extent_m: float = 36.0) -> None:
    """Write a top-down SVG of ground truth and predictions."""
    half = extent_m / METERS_PER_PIXEL
    size = int(2 * half)
    root = ET.Element("svg", {
        "xmlns": "http://www.w3.org/2000/svg",
        "width": str(size), "height": str(size),
        "viewBox": f"0 0 {size} {size}",
    })
    ET.SubElement(root, "rect", {
        "x": "0", "y": "0", "width": str(size), "height": str(size),
        "fill": "white", "stroke": "#999",
    })
    # axes through the ego origin
    ET.SubElement(root, "line", {"x1": "0", "y1": str(half), "x2": str(size),
                                 "y2": str(half), "stroke": "#ddd"})
    ET.SubElement(root, "line", {"x1": str(half), "y1": "0", "x2": str(half),
                                 "y2": str(size), "stroke": "#ddd"})
    ET.SubElement(root, "circle", {"cx": str(half), "cy": str(half), "r": "3",
                                   "fill": "#333"})
    for box in scene.boxes:
        _add_box(root, box.x, box.y, box.w, box.l, box.yaw, half, GT_COLOR)
    for det in predictions:
        _add_box(root, det.center[0], det.center[1], det.size[0], det.size[1],
                 det.yaw, half, PRED_COLOR)
    ET.ElementTree(root).write(out_path, xml_declaration=True, encoding="unicode")
