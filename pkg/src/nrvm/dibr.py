"""Depth-image-based rendering on a rectified camera grid.

A view at grid position (u, v) sees a surface of disparity d at
``x_texture - d * u``; warping a view by (du, dv) therefore moves each pixel to
``(x - d * du, y - d * dv)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kernels
from .imaging import Image, as_array, load_image, read_fmap

BLEND_TOLERANCE = 0.5


@dataclass(frozen=True)
class ViewPosition:
    u: float
    v: float

    def __post_init__(self):
        if not (np.isfinite(self.u) and np.isfinite(self.v)):
            raise ValueError("view position must be finite")

    def __sub__(self, other: "ViewPosition") -> "ViewPosition":
        return ViewPosition(self.u - other.u, self.v - other.v)


@dataclass(frozen=True, eq=False)
class WarpResult:
    image: Image
    hole_mask: np.ndarray  # bool, True where nothing landed
    depth_buffer: np.ndarray  # disparity of the winning splat, -inf when empty


@dataclass(frozen=True, eq=False)
class View:
    """One captured (or rendered) light-field view."""

    image: Image
    disparity: np.ndarray
    position: ViewPosition


def _check_disp(img: np.ndarray, disp) -> np.ndarray:
    d = np.asarray(disp, dtype=np.float64)
    if d.ndim == 3 and d.shape[2] == 1:
        d = d[..., 0]
    if d.shape != img.shape[:2]:
        raise ValueError(f"disparity {d.shape} does not match image {img.shape[:2]}")
    if not np.all(np.isfinite(d)):
        raise ValueError("disparity must be finite")
    return d


def forward_warp(src, disp, delta: ViewPosition) -> WarpResult:
    """Nearest-integer splatting with a z-test that keeps the larger disparity."""
    img = as_array(src)
    d = _check_disp(img, disp)
    out, depth = kernels.splat(np.ascontiguousarray(img), np.ascontiguousarray(d), float(delta.u), float(delta.v))
    holes = np.isneginf(depth)
    return WarpResult(Image(out), holes, depth)


def blend_views(results: list[WarpResult], tolerance: float = BLEND_TOLERANCE):
    """Average the candidates lying within ``tolerance`` of the nearest one.

    Returns ``(image, holes)``.
    """
    if not results:
        raise ValueError("blend_views needs at least one warp result")
    if len(results) == 1:
        r = results[0]
        return r.image, r.hole_mask.copy()
    shape = results[0].image.shape
    if any(r.image.shape != shape for r in results):
        raise ValueError("warp results differ in size")
    depth = np.stack([r.depth_buffer for r in results])
    colors = np.stack([r.image.data for r in results])
    front = depth.max(axis=0)
    holes = np.isneginf(front)
    use = (depth >= front - tolerance) & ~np.isneginf(depth)
    count = use.sum(axis=0)
    acc = (colors * use[..., None]).sum(axis=0)
    out = np.where(holes[..., None], 0.0, acc / np.maximum(count, 1)[..., None])
    return Image(out), holes


def inpaint_holes(img, holes) -> Image:
    """Fill each hole with its nearest non-hole pixel (ties: first in scan order)."""
    a = as_array(img)
    holes = np.asarray(holes, dtype=bool)
    if holes.shape != a.shape[:2]:
        raise ValueError("hole mask does not match image")
    if not holes.any():
        return img if isinstance(img, Image) else Image(a)
    if holes.all():
        raise ValueError("cannot in-paint an image that is all holes")
    src = kernels.nearest_valid(np.ascontiguousarray(holes))
    flat = a.reshape(-1, a.shape[2])
    return Image(flat[src.ravel()].reshape(a.shape))


def _in_hull(positions: list[ViewPosition], target: ViewPosition, tol: float = 1e-9) -> bool:
    us = [p.u for p in positions]
    vs = [p.v for p in positions]
    return min(us) - tol <= target.u <= max(us) + tol and min(vs) - tol <= target.v <= max(vs) + tol


def synthesize_view(corners, target: ViewPosition) -> Image:
    """Render ``target`` from captured views (four corners, or two for a 1-D rig)."""
    corners = [c if isinstance(c, View) else View(*c) for c in corners]
    if not corners:
        raise ValueError("no source views")
    if not _in_hull([c.position for c in corners], target):
        raise ValueError(f"target {target} lies outside the source views")
    for c in corners:
        if c.position == target:
            return c.image
    warps = [forward_warp(c.image, c.disparity, target - c.position) for c in corners]
    img, holes = blend_views(warps)
    return inpaint_holes(img, holes)


# ---------------------------------------------------------------------------
# synthetic layered scenes
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Layer:
    """A fronto-parallel textured plane.

    ``texture`` and ``mask`` live in texture coordinates; the view at (0, 0)
    shows texel (x + offset_x, y + offset_y). Sampling outside the texture
    clamps to its edge.
    """

    texture: np.ndarray
    disparity: float
    mask: np.ndarray | None = None
    offset_x: int = 0
    offset_y: int = 0


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    layers: tuple[Layer, ...]
    width: int
    height: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("scene has no layers")
        ds = [layer.disparity for layer in self.layers]
        if not all(np.isfinite(ds)):
            raise ValueError("layer disparities must be finite")
        order = sorted(self.layers, key=lambda l: -l.disparity)
        object.__setattr__(self, "layers", tuple(order))


def _sample(a: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    yi = np.clip(ys, 0, a.shape[0] - 1)
    xi = np.clip(xs, 0, a.shape[1] - 1)
    return a[yi[:, None], xi[None, :]]


def render_view(scene: SyntheticScene, pos: ViewPosition) -> View:
    """Composite back-to-front; returns the view with its exact disparity map."""
    h, w = scene.height, scene.width
    channels = scene.layers[0].texture.shape[2] if scene.layers[0].texture.ndim == 3 else 1
    img = np.zeros((h, w, channels))
    disp = np.zeros((h, w))
    for layer in reversed(scene.layers):
        tex = layer.texture if layer.texture.ndim == 3 else layer.texture[..., None]
        ys = np.floor(np.arange(h) + layer.offset_y + layer.disparity * pos.v + 0.5).astype(int)
        xs = np.floor(np.arange(w) + layer.offset_x + layer.disparity * pos.u + 0.5).astype(int)
        col = _sample(tex, ys, xs)
        if layer.mask is None:
            alpha = np.ones((h, w))
        else:
            inside_y = (ys >= 0) & (ys < layer.mask.shape[0])
            inside_x = (xs >= 0) & (xs < layer.mask.shape[1])
            alpha = _sample(layer.mask, ys, xs) * (inside_y[:, None] & inside_x[None, :])
        img = alpha[..., None] * col + (1 - alpha[..., None]) * img
        disp = np.where(alpha > 0.5, layer.disparity, disp)
    return View(Image(img), disp, pos)


def render_synthetic_lightfield(scene: SyntheticScene, rows: int, cols: int) -> list[View]:
    """Render a rows x cols grid (u = column, v = row) in row-major order."""
    if rows < 1 or cols < 1 or (rows == 1 and cols < 2) or (cols == 1 and rows < 2):
        raise ValueError("grid must be at least 2x2 or 1xN")
    return [render_view(scene, ViewPosition(c, r)) for r in range(rows) for c in range(cols)]


# ---------------------------------------------------------------------------
# procedural content
# ---------------------------------------------------------------------------


def procedural_texture(rng: np.random.Generator, height: int, width: int, kind: str | None = None) -> np.ndarray:
    """Colourful natural-ish texture in [0, 1]: smooth noise plus edges and stripes."""
    kinds = ["blobs", "stripes", "checker", "noise"]
    if kind is None:
        kind = kinds[rng.integers(len(kinds))]
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    base = rng.uniform(0.15, 0.85, size=3)
    tex = np.broadcast_to(base, (height, width, 3)).copy()
    # band-limited noise from a handful of random sinusoids
    for _ in range(6):
        f = rng.uniform(0.02, 0.25)
        th = rng.uniform(0, np.pi)
        ph = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.03, 0.12) * rng.uniform(-1, 1, size=3)
        tex += amp * np.sin(2 * np.pi * f * (xx * np.cos(th) + yy * np.sin(th)) + ph)[..., None]
    if kind == "stripes":
        period = rng.integers(4, 14)
        th = rng.uniform(0, np.pi)
        band = (np.floor((xx * np.cos(th) + yy * np.sin(th)) / period) % 2)[..., None]
        tex += band * rng.uniform(-0.35, 0.35, size=3)
    elif kind == "checker":
        p = rng.integers(5, 16)
        band = ((np.floor(xx / p) + np.floor(yy / p)) % 2)[..., None]
        tex += band * rng.uniform(-0.3, 0.3, size=3)
    elif kind == "blobs":
        for _ in range(rng.integers(4, 10)):
            cy, cx = rng.uniform(0, height), rng.uniform(0, width)
            r = rng.uniform(3, 14)
            m = ((yy - cy) ** 2 + (xx - cx) ** 2) < r * r
            tex[m] = rng.uniform(0.05, 0.95, size=3)
    tex += rng.normal(0, 0.015, size=tex.shape)
    return np.clip(tex, 0.0, 1.0)


def _shape_mask(rng: np.random.Generator, th: int, tw: int, count: int, scale: float) -> np.ndarray:
    yy, xx = np.mgrid[0:th, 0:tw]
    mask = np.zeros((th, tw))
    for _ in range(count):
        cy, cx = rng.uniform(0, th), rng.uniform(0, tw)
        kind = rng.integers(3)
        if kind == 0:  # box
            hh, ww = rng.uniform(4, scale), rng.uniform(4, scale)
            mask[(np.abs(yy - cy) < hh) & (np.abs(xx - cx) < ww)] = 1.0
        elif kind == 1:  # disc
            r = rng.uniform(5, scale)
            mask[(yy - cy) ** 2 + (xx - cx) ** 2 < r * r] = 1.0
        else:  # thin bar
            long_, thin = rng.uniform(scale, 3 * scale), rng.uniform(1.5, 4)
            if rng.random() < 0.5:
                mask[(np.abs(yy - cy) < long_) & (np.abs(xx - cx) < thin)] = 1.0
            else:
                mask[(np.abs(yy - cy) < thin) & (np.abs(xx - cx) < long_)] = 1.0
    return mask


def random_layered_scene(
    rng: np.random.Generator,
    width: int = 96,
    height: int = 96,
    n_layers: int = 3,
    shapes_per_layer: int = 2,
    max_disparity: int = 3,
    texture_size: tuple[int, int] | None = None,
) -> SyntheticScene:
    """Textured background plus ``n_layers`` occluder planes at integer disparities.

    Textures default to the canvas plus a 24 px margin; pass a larger
    ``texture_size`` (h, w) to pan over a bigger world with :func:`pan_scene`.
    """
    th, tw = texture_size or (height + 48, width + 48)
    oy, ox = (th - height) // 2, (tw - width) // 2
    base = float(rng.integers(0, 2))
    layers = [Layer(procedural_texture(rng, th, tw), base, None, ox, oy)]
    scale = min(height, width) / 5
    levels = rng.choice(np.arange(1, max_disparity + 1), size=n_layers, replace=n_layers > max_disparity)
    for d in levels:
        mask = _shape_mask(rng, th, tw, shapes_per_layer, scale)
        layers.append(Layer(procedural_texture(rng, th, tw), base + float(d), mask, ox, oy))
    return SyntheticScene(tuple(layers), width, height)


def pan_scene(scene: SyntheticScene, dx: int, dy: int) -> SyntheticScene:
    """Same world, viewed through a canvas moved by (dx, dy) texels."""
    layers = tuple(replace(l, offset_x=l.offset_x + dx, offset_y=l.offset_y + dy) for l in scene.layers)
    return SyntheticScene(layers, scene.width, scene.height, dict(scene.meta))


def corrupt_disparity(disp: np.ndarray, rng: np.random.Generator, radius: int = 2, strength: float = 1.0) -> np.ndarray:
    """Imitate depth-estimation failure at depth edges.

    Disparity within ``radius`` px of a discontinuity is replaced by a
    random blend of the two sides (so edges bleed), and a mild random bias is
    added there.
    """
    from scipy.ndimage import binary_dilation, grey_dilation, grey_erosion

    d = np.asarray(disp, dtype=np.float64)
    edge = np.zeros(d.shape, dtype=bool)
    edge[:, 1:] |= np.abs(np.diff(d, axis=1)) > 0.5
    edge[1:, :] |= np.abs(np.diff(d, axis=0)) > 0.5
    band = binary_dilation(edge, iterations=radius)
    size = 2 * radius + 1
    hi = grey_dilation(d, size=(size, size))
    lo = grey_erosion(d, size=(size, size))
    t = rng.uniform(0, 1, size=d.shape) ** 0.5
    wrong = lo + t * (hi - lo) + strength * rng.normal(0, 0.5, size=d.shape)
    return np.where(band, wrong, d)


# ---------------------------------------------------------------------------
# scene documents
# ---------------------------------------------------------------------------


def load_scene(path) -> SyntheticScene:
    """Read a scene JSON document.

    ``{"width": W, "height": H, "layers": [{"texture": "a.png", "disparity": 2,
    "mask": "m.png" | null, "offset_x": 0, "offset_y": 0}, ...]}``; relative
    paths resolve against the document's directory. A layer may instead carry
    ``"procedural": {"seed": s, "kind": k}`` in place of a texture path.
    """
    path = Path(path)
    doc = json.loads(path.read_text())
    layers = []
    for spec in doc["layers"]:
        if "texture" in spec:
            tex = load_image(path.parent / spec["texture"]).data
        else:
            p = spec["procedural"]
            th = int(p.get("height", doc["height"]))
            tw = int(p.get("width", doc["width"]))
            tex = procedural_texture(np.random.default_rng(p["seed"]), th, tw, p.get("kind"))
        mask = None
        if spec.get("mask"):
            m = path.parent / spec["mask"]
            mask = read_fmap(m)[..., 0].astype(np.float64) if m.suffix == ".fmap" else load_image(m).data[..., 0]
        elif spec.get("rect"):
            x0, y0, x1, y1 = spec["rect"]
            mask = np.zeros(tex.shape[:2])
            mask[y0:y1, x0:x1] = 1.0
        layers.append(
            Layer(tex, float(spec["disparity"]), mask, int(spec.get("offset_x", 0)), int(spec.get("offset_y", 0)))
        )
    return SyntheticScene(tuple(layers), int(doc["width"]), int(doc["height"]), meta=doc.get("meta", {}))
