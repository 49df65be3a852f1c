"""Synthetic rectified stereo pairs with dense ground truth.

Each scene is a stack of fronto-parallel textured layers with integer
disparities: a background plane plus a few rectangles/ellipses that sit
closer to the camera.  Layers are defined in left-image coordinates; the
right view shows layer ``l`` shifted left by ``d_l`` pixels, composited
back to front, so occlusions come out exactly and every non-occluded left
pixel reappears unchanged in the right image.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import write_image, write_index, write_pfm
from .errors import ConfigError


@dataclass
class Layer:
    disparity: int
    texture: np.ndarray  # (3, H, W + margin) uint8, left-image coordinates
    support: np.ndarray  # (H, W + margin) bool


def make_texture(rng, h, w, sigmas=(1.0, 3.0, 8.0)):
    """Multi-band smooth colour noise quantised to uint8."""
    tex = np.zeros((3, h, w))
    for s in sigmas:
        noise = rng.standard_normal((3, h, w))
        band = gaussian_filter(noise, sigma=(0, s, s), mode="wrap")
        band /= band.std() + 1e-12
        tex += band
    base = rng.uniform(0.25, 0.75, size=(3, 1, 1))
    tex = base + 0.12 * tex
    return np.clip(np.round(tex * 255), 0, 255).astype(np.uint8)


def render_layers(layers, h, w):
    """Composite ``layers`` (back to front) into a stereo pair.

    Returns ``left, right`` as (3, H, W) uint8, the left-view disparity
    (H, W) float32, and the occlusion mask (H, W) bool marking left pixels
    with no visible counterpart in the right view (including those shifted
    past the left border).
    """
    left = np.zeros((3, h, w), dtype=np.uint8)
    right = np.zeros((3, h, w), dtype=np.uint8)
    owner_l = np.full((h, w), -1)
    owner_r = np.full((h, w), -1)
    for i, layer in enumerate(layers):
        d = layer.disparity
        if layer.texture.shape[2] < w + d or layer.support.shape[1] < w + d:
            raise ConfigError(f"layer {i} texture is too narrow for disparity {d}")
        cov = layer.support[:, :w]
        left[:, cov] = layer.texture[:, :, :w][:, cov]
        owner_l[cov] = i
        cov = layer.support[:, d:d + w]
        right[:, cov] = layer.texture[:, :, d:d + w][:, cov]
        owner_r[cov] = i
    if (owner_l < 0).any() or (owner_r < 0).any():
        raise ConfigError("layers do not cover the whole image; the first layer must be a full background")
    disps = np.array([l.disparity for l in layers])
    disp = disps[owner_l].astype(np.float32)
    xs = np.arange(w)[None, :] - disps[owner_l]
    rows = np.arange(h)[:, None]
    out_of_view = xs < 0
    seen = owner_r[rows, np.clip(xs, 0, w - 1)]
    occ = out_of_view | (seen != owner_l)
    return left, right, disp, occ


def random_scene(rng, h, w, max_disp):
    margin = max_disp
    d_bg = int(rng.integers(1, max(1, max_disp // 2) + 1))
    layers = [Layer(d_bg, make_texture(rng, h, w + margin), np.ones((h, w + margin), dtype=bool))]
    yy, xx = np.mgrid[0:h, 0:w + margin]
    n_obj = int(rng.integers(1, 5))
    objs = []
    for _ in range(n_obj):
        d = int(rng.integers(min(d_bg + 1, max_disp), max_disp + 1))
        oh = rng.uniform(h / 6, h / 2)
        ow = rng.uniform(w / 8, w / 3)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w + d)
        if rng.random() < 0.5:
            sup = (np.abs(yy - cy) <= oh / 2) & (np.abs(xx - cx) <= ow / 2)
        else:
            sup = ((yy - cy) / (oh / 2)) ** 2 + ((xx - cx) / (ow / 2)) ** 2 <= 1.0
        objs.append(Layer(d, make_texture(rng, h, w + margin), sup))
    objs.sort(key=lambda l: l.disparity)
    return layers + objs


def make_pair(rng, h, w, max_disp):
    return render_layers(random_scene(rng, h, w, max_disp), h, w)


def check_synth_args(h, w, max_disp):
    if h <= 0 or w <= 0 or h % 64 or w % 64:
        raise ConfigError(f"synthetic size {h}x{w} must be positive multiples of 64")
    if not 0 < max_disp < w / 4:
        raise ConfigError(f"max_disp must satisfy 0 < max_disp < width/4 = {w / 4:g}, got {max_disp}")


def synth_generate(count, h, w, max_disp, seed, out_dir):
    """Write ``count`` pairs plus ``index.txt`` into ``out_dir``; returns the index path.

    Per sample: ``NNNNNN_left.png``, ``_right.png``, ``_disp.pfm`` and
    ``_occ.png`` (255 = occluded).
    """
    check_synth_args(h, w, max_disp)
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        left, right, disp, occ = make_pair(rng, h, w, max_disp)
        stem = os.path.join(out_dir, f"{i:06d}")
        paths = (f"{stem}_left.png", f"{stem}_right.png", f"{stem}_disp.pfm", f"{stem}_occ.png")
        write_image(paths[0], left)
        write_image(paths[1], right)
        write_pfm(paths[2], disp)
        write_image(paths[3], np.repeat(occ[None].astype(np.uint8) * 255, 3, axis=0))
        rows.append(paths)
    index_path = os.path.join(out_dir, "index.txt")
    write_index(index_path, rows)
    return index_path
