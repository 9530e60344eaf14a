"""Rasterize scene graphs into images plus per-object labels.

Two scenarios: grayscale digit scenes (glyph stamps max-composited onto a
black canvas) and color aerial scenes (roads as horizontal bands, cars as
oriented rectangles, painted back to front in structure order).
"""

import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .scene import ROAD_BAND_HEIGHT, iter_object_nodes


class RenderError(ValueError):
    pass


@dataclass
class RenderConfig:
    scenario: str = "mnist"
    canvas_size: int = 64
    # Digit stamp width as a fraction of the canvas.  The default keeps the
    # native 28 px glyph on a 64 px canvas; larger canvases override it.
    glyph_frac: float = 0.44

    @property
    def channels(self):
        return 1 if self.scenario == "mnist" else 3

    @property
    def stamp_size(self):
        return max(6, int(round(self.canvas_size * self.glyph_frac)))


@dataclass
class Label:
    cls: str
    box: tuple  # (x0, y0, x1, y1) pixel bounds, half-open
    node: object = None


@dataclass
class RenderOutput:
    image: np.ndarray  # (H, W) or (H, W, 3), float in [0, 1]
    labels: list


# ---------------------------------------------------------------------------
# digit glyphs

# Stroke endpoints in unit glyph coordinates (x right, y down).
_GLYPH_STROKES = {
    0: [[(0.28, 0.15), (0.72, 0.15), (0.72, 0.85), (0.28, 0.85), (0.28, 0.15)]],
    1: [[(0.5, 0.12), (0.5, 0.88)]],
    2: [[(0.22, 0.18), (0.78, 0.18), (0.78, 0.48), (0.22, 0.85), (0.8, 0.85)]],
    3: [[(0.22, 0.15), (0.78, 0.15), (0.78, 0.5), (0.35, 0.5)],
        [(0.78, 0.5), (0.78, 0.85), (0.22, 0.85)]],
    4: [[(0.3, 0.12), (0.3, 0.52), (0.82, 0.52)], [(0.68, 0.12), (0.68, 0.88)]],
    5: [[(0.78, 0.15), (0.25, 0.15), (0.25, 0.5), (0.78, 0.5), (0.78, 0.85),
         (0.22, 0.85)]],
    6: [[(0.75, 0.15), (0.28, 0.15), (0.28, 0.85), (0.75, 0.85), (0.75, 0.5),
         (0.28, 0.5)]],
    7: [[(0.22, 0.15), (0.8, 0.15), (0.45, 0.88)]],
    8: [[(0.28, 0.15), (0.72, 0.15), (0.72, 0.85), (0.28, 0.85), (0.28, 0.15)],
        [(0.28, 0.5), (0.72, 0.5)]],
    9: [[(0.75, 0.5), (0.28, 0.5), (0.28, 0.15), (0.75, 0.15), (0.75, 0.85),
         (0.3, 0.85)]],
}


def _draw_stroke(img, p0, p1, thickness):
    size = img.shape[0]
    x0, y0 = p0[0] * size, p0[1] * size
    x1, y1 = p1[0] * size, p1[1] * size
    n = max(2, int(2 * max(abs(x1 - x0), abs(y1 - y0))) + 1)
    t = np.linspace(0.0, 1.0, n)
    xs, ys = x0 + (x1 - x0) * t, y0 + (y1 - y0) * t
    r = int(np.ceil(thickness))
    for cx, cy in zip(xs, ys):
        ix, iy = int(round(cx)), int(round(cy))
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                px, py = ix + dx, iy + dy
                if 0 <= px < size and 0 <= py < size:
                    if dx * dx + dy * dy <= thickness * thickness:
                        img[py, px] = 1.0


@lru_cache(maxsize=None)
def glyph_bitmap(cls, size=28):
    """Procedural stroke glyph for one digit class, values in {0, 1}."""
    img = np.zeros((size, size))
    thickness = max(1.0, size * 0.055)
    for stroke in _GLYPH_STROKES[cls]:
        for p0, p1 in zip(stroke, stroke[1:]):
            _draw_stroke(img, p0, p1, thickness)
    img.setflags(write=False)
    return img


def _rotate_nn(img, degrees):
    """Nearest-neighbor rotation about the center, same output shape."""
    if degrees == 0:
        return img
    size = img.shape[0]
    c = (size - 1) / 2.0
    th = np.deg2rad(degrees)
    cos, sin = np.cos(th), np.sin(th)
    ys, xs = np.mgrid[0:size, 0:size]
    # inverse map: source coords for each destination pixel
    sx = cos * (xs - c) + sin * (ys - c) + c
    sy = -sin * (xs - c) + cos * (ys - c) + c
    sxi, syi = np.round(sx).astype(int), np.round(sy).astype(int)
    ok = (sxi >= 0) & (sxi < size) & (syi >= 0) & (syi < size)
    out = np.zeros_like(img)
    out[ok] = img[syi[ok], sxi[ok]]
    return out


@lru_cache(maxsize=None)
def _digit_stamp(cls, size, degrees):
    base = glyph_bitmap(cls)
    if size != base.shape[0]:
        idx = np.minimum((np.arange(size) * base.shape[0] // size), base.shape[0] - 1)
        base = base[np.ix_(idx, idx)]
    out = _rotate_nn(np.asarray(base), degrees)
    out.setflags(write=False)
    return out


# ---------------------------------------------------------------------------
# scenario renderers

# Cars are drawn bright on the dark road so they stay visible after the
# grayscale reduction inside the feature extractor.
ROAD_COLOR = (0.35, 0.35, 0.35)
CAR_COLOR = (0.95, 0.85, 0.3)
CAR_LENGTH = 0.09  # fraction of canvas width
CAR_WIDTH = 0.05


def _render_mnist(graph, size, stamp_size):
    canvas = np.zeros((size, size))
    labels = []
    for node in graph.children:
        if not node.cls.startswith("d"):
            raise RenderError(f"unknown renderable class {node.cls!r} for mnist")
        p = node.params
        stamp = _digit_stamp(int(node.cls[1:]), stamp_size, int(round(p.rotation)))
        cx, cy = int(round(p.x * size)), int(round(p.y * size))
        x0, y0 = cx - stamp_size // 2, cy - stamp_size // 2
        sx0, sy0 = max(0, -x0), max(0, -y0)
        sx1 = stamp_size - max(0, x0 + stamp_size - size)
        sy1 = stamp_size - max(0, y0 + stamp_size - size)
        if sx0 < sx1 and sy0 < sy1:
            region = canvas[y0 + sy0 : y0 + sy1, x0 + sx0 : x0 + sx1]
            np.maximum(region, stamp[sy0:sy1, sx0:sx1], out=region)
        box = (max(0, x0), max(0, y0), min(size, x0 + stamp_size),
               min(size, y0 + stamp_size))
        labels.append(Label(node.cls, box, node))
    return canvas, labels


def _fill_rect(canvas, cx, cy, length, width, degrees, color):
    """Paint an oriented rectangle centered at (cx, cy) in pixel coords."""
    size = canvas.shape[0]
    th = np.deg2rad(degrees)
    cos, sin = np.cos(th), np.sin(th)
    half = np.hypot(length, width) / 2.0 + 1
    x0, x1 = int(np.floor(cx - half)), int(np.ceil(cx + half)) + 1
    y0, y1 = int(np.floor(cy - half)), int(np.ceil(cy + half)) + 1
    x0, y0 = max(0, x0), max(0, y0)
    x1, y1 = min(size, x1), min(size, y1)
    if x0 >= x1 or y0 >= y1:
        return (0, 0, 0, 0)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    dx, dy = xs - cx, ys - cy
    u = cos * dx + sin * dy
    v = -sin * dx + cos * dy
    inside = (np.abs(u) <= length / 2.0) & (np.abs(v) <= width / 2.0)
    canvas[y0:y1][:, x0:x1][inside] = color
    # axis-aligned bounds of the rotated corners, clipped
    ex = abs(cos) * length / 2.0 + abs(sin) * width / 2.0
    ey = abs(sin) * length / 2.0 + abs(cos) * width / 2.0
    return (max(0, int(np.floor(cx - ex))), max(0, int(np.floor(cy - ey))),
            min(size, int(np.ceil(cx + ex)) + 1), min(size, int(np.ceil(cy + ey)) + 1))


def _render_aerial(graph, size):
    canvas = np.zeros((size, size, 3))
    labels = []
    half_band = ROAD_BAND_HEIGHT / 2.0
    for road in graph.children:
        if road.cls != "Road":
            raise RenderError(f"unknown renderable class {road.cls!r} for aerial")
        ry = road.params.y
        y0 = int(round((ry - half_band) * size))
        y1 = int(round((ry + half_band) * size))
        y0c, y1c = max(0, y0), min(size, y1)
        canvas[y0c:y1c, :] = ROAD_COLOR
        labels.append(Label("Road", (0, y0c, size, y1c), road))
        for car in road.children:
            if car.cls != "car":
                raise RenderError(f"unknown renderable class {car.cls!r} for aerial")
            p = car.params
            cx = p.x * size
            cy = (ry + (p.y - 0.5) * ROAD_BAND_HEIGHT) * size
            box = _fill_rect(canvas, cx, cy, CAR_LENGTH * size, CAR_WIDTH * size,
                             p.rotation, CAR_COLOR)
            labels.append(Label("car", box, car))
    return canvas, labels


def render(graph, config):
    """Deterministic rasterization of a parameterized scene graph."""
    if config.scenario == "mnist":
        image, labels = _render_mnist(graph, config.canvas_size, config.stamp_size)
    elif config.scenario == "aerial":
        image, labels = _render_aerial(graph, config.canvas_size)
    else:
        raise RenderError(f"unknown scenario {config.scenario!r}")
    np.clip(image, 0.0, 1.0, out=image)
    return RenderOutput(image=image, labels=labels)


# ---------------------------------------------------------------------------
# export


def write_pnm(path, image):
    """PGM for grayscale, PPM for color; 8-bit binary."""
    data = np.clip(np.round(image * 255), 0, 255).astype(np.uint8)
    if data.ndim == 2:
        header = f"P5 {data.shape[1]} {data.shape[0]} 255\n"
    else:
        header = f"P6 {data.shape[1]} {data.shape[0]} 255\n"
    with open(path, "wb") as f:
        f.write(header.encode())
        f.write(data.tobytes())


def write_labels(path, labels):
    with open(path, "w") as f:
        json.dump([{"class": l.cls, "box": list(l.box)} for l in labels], f, indent=1)
