"""Dataset readers and writers.

* PFM grayscale disparity maps (Scene Flow convention).
* 16-bit PNG disparity maps (KITTI convention: value / 256, 0 = invalid).
* 8-bit PNG/PPM stereo images.
* Plain-text dataset index: one tab-separated ``left right gt`` triple per
  line, paths relative to the index file.  An optional fourth column names a
  per-pixel occlusion mask (nonzero = occluded).
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

from .errors import FormatError

PAD_MULTIPLE = 64


# ---------------------------------------------------------------------------
# PFM

_TOKEN = re.compile(rb"\S+")


def _header_tokens(buf, count):
    tokens, pos = [], 0
    while len(tokens) < count:
        m = _TOKEN.search(buf, pos)
        if m is None:
            raise FormatError(f"PFM header truncated at byte {len(buf)}")
        tokens.append((m.group(), m.start()))
        pos = m.end()
    return tokens, pos


def read_pfm(path):
    """Read a grayscale PFM.  Returns ``(array[H, W] float32, scale)`` top row first."""
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    (magic, _), (w_tok, w_off), (h_tok, h_off), (s_tok, s_off) = _header_tokens(buf, 4)[0]
    if magic == b"PF":
        raise FormatError(f"{path}: colour PFM ('PF' at byte 0) is not a disparity map")
    if magic != b"Pf":
        raise FormatError(f"{path}: bad PFM magic {magic!r} at byte 0")
    try:
        width, height = int(w_tok), int(h_tok)
    except ValueError as exc:
        raise FormatError(f"{path}: bad PFM dimensions at byte {w_off}") from exc
    if width <= 0 or height <= 0:
        raise FormatError(f"{path}: bad PFM dimensions {width}x{height} at byte {w_off}")
    try:
        scale = float(s_tok)
    except ValueError as exc:
        raise FormatError(f"{path}: bad PFM scale at byte {s_off}") from exc
    if scale == 0:
        raise FormatError(f"{path}: PFM scale must be nonzero (byte {s_off})")
    data_off = s_off + len(s_tok) + 1  # exactly one whitespace byte ends the header
    dtype = "<f4" if scale < 0 else ">f4"
    need = width * height * 4
    if len(buf) - data_off < need:
        raise FormatError(f"{path}: PFM data truncated; expected {need} bytes from byte {data_off}")
    arr = np.frombuffer(buf, dtype=dtype, count=width * height, offset=data_off)
    arr = arr.reshape(height, width)[::-1].astype(np.float32)
    return arr, abs(scale)


def write_pfm(path, array, scale=1.0):
    """Write a 2-D array as little-endian grayscale PFM (rows bottom-up)."""
    arr = np.asarray(array, dtype=np.float32)
    if arr.ndim != 2:
        raise FormatError(f"write_pfm expects a 2-D array, got shape {arr.shape}")
    h, w = arr.shape
    header = f"Pf\n{w} {h}\n{-abs(scale):g}\n".encode("ascii")
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(np.ascontiguousarray(arr[::-1], dtype="<f4").tobytes())
    except OSError as exc:
        raise FormatError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# KITTI disparity PNG


def read_kitti_png(path):
    """Return ``(disparity[H, W] float32, mask[H, W] float32)``."""
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if img.mode not in ("I;16", "I;16B", "I;16L"):
        raise FormatError(f"{path}: expected a 16-bit single-channel PNG, got mode {img.mode}")
    raw = np.array(img, dtype=np.uint16)
    disp = raw.astype(np.float32) / 256.0
    mask = (raw > 0).astype(np.float32)
    return disp, mask


def write_kitti_png(path, disp, mask=None):
    """Store ``round(disp * 256)``; negatives, NaNs and masked pixels become 0 (invalid)."""
    d = np.asarray(disp, dtype=np.float64)
    valid = np.isfinite(d) & (d >= 0)
    if mask is not None:
        valid &= np.asarray(mask) > 0
    raw = np.zeros(d.shape, dtype=np.uint16)
    raw[valid] = np.clip(np.round(d[valid] * 256.0), 0, 65535).astype(np.uint16)
    try:
        Image.fromarray(raw).save(path)
    except OSError as exc:
        raise FormatError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# images


def read_image(path):
    """8-bit RGB (or gray) image as float32 (3, H, W) in [0, 1]."""
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if img.mode not in ("RGB", "L", "RGBA", "P"):
        raise FormatError(f"{path}: unsupported image mode {img.mode}")
    arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_image(path, chw_uint8):
    arr = np.asarray(chw_uint8, dtype=np.uint8).transpose(1, 2, 0)
    try:
        Image.fromarray(np.ascontiguousarray(arr)).save(path)
    except OSError as exc:
        raise FormatError(f"cannot write {path}: {exc}") from exc


def read_mask_png(path):
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    return (np.asarray(img.convert("L")) > 0).astype(np.float32)


def read_disparity(path):
    """Dispatch on extension; returns ``(disp, mask)`` 2-D float32 arrays."""
    if path.lower().endswith(".pfm"):
        disp, _ = read_pfm(path)
        mask = np.isfinite(disp).astype(np.float32)
        disp = np.where(mask > 0, disp, 0).astype(np.float32)
        return disp, mask
    return read_kitti_png(path)


# ---------------------------------------------------------------------------
# samples and index


@dataclass(frozen=True)
class StereoSample:
    left: np.ndarray          # (1, 3, H, W) in [0, 1]
    right: np.ndarray
    gt: np.ndarray            # (1, 1, H, W) pixels
    mask: np.ndarray          # (1, 1, H, W) in {0, 1}
    id: str = ""
    occ: np.ndarray | None = None   # (1, 1, H, W), 1 = occluded
    orig_size: tuple | None = None  # (H, W) before padding

    @property
    def size(self):
        return self.left.shape[2:]


@dataclass
class DatasetIndex:
    entries: list = field(default_factory=list)  # (left, right, gt, occ-or-None)
    seed: int = 0
    root: str = "."

    def __len__(self):
        return len(self.entries)


def read_index(path, seed=0, check=True):
    try:
        with open(path) as f:
            lines = f.read().splitlines()
    except OSError as exc:
        raise FormatError(f"cannot read dataset index {path}: {exc}") from exc
    root = os.path.dirname(os.path.abspath(path))
    entries = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) not in (3, 4):
            raise FormatError(f"{path}:{lineno}: expected 3 or 4 tab-separated paths, got {len(cols)}")
        paths = [c if os.path.isabs(c) else os.path.join(root, c) for c in cols]
        if check:
            for p in paths:
                if not os.path.isfile(p):
                    raise FormatError(f"{path}:{lineno}: missing file {p}")
        entries.append(tuple(paths) + ((None,) if len(paths) == 3 else ()))
    return DatasetIndex(entries, seed, root)


def write_index(path, rows):
    """``rows`` are tuples of paths; written relative to the index directory."""
    root = os.path.dirname(os.path.abspath(path))
    with open(path, "w") as f:
        for row in rows:
            f.write("\t".join(os.path.relpath(os.path.abspath(p), root) for p in row if p is not None) + "\n")


def filter_large_disparity(index, threshold=300.0, fraction=0.25):
    """Drop samples with more than ``fraction`` of valid disparities above ``threshold``."""
    keep = []
    for entry in index.entries:
        disp, mask = read_disparity(entry[2])
        valid = mask > 0
        if valid.any() and (disp[valid] > threshold).mean() > fraction:
            continue
        keep.append(entry)
    return replace(index, entries=keep)


def padded_size(h, w, multiple=PAD_MULTIPLE):
    return -(-h // multiple) * multiple, -(-w // multiple) * multiple


def pad_sample(sample, multiple=PAD_MULTIPLE):
    """Edge-replicate images up to a multiple of ``multiple`` at the bottom/right.

    Ground truth and masks are zero padded, so no valid pixels are created.
    """
    h, w = sample.size
    ph, pw = padded_size(h, w, multiple)
    if (ph, pw) == (h, w):
        return replace(sample, orig_size=sample.orig_size or (h, w))
    pads = ((0, 0), (0, 0), (0, ph - h), (0, pw - w))
    occ = None if sample.occ is None else np.pad(sample.occ, pads)
    return replace(
        sample,
        left=np.pad(sample.left, pads, mode="edge"),
        right=np.pad(sample.right, pads, mode="edge"),
        gt=np.pad(sample.gt, pads),
        mask=np.pad(sample.mask, pads),
        occ=occ,
        orig_size=(h, w),
    )


def unpad(arr, orig_size):
    h, w = orig_size
    return arr[..., :h, :w]


def load_sample(entry, sample_id=""):
    left_p, right_p, gt_p, occ_p = entry
    left, right = read_image(left_p), read_image(right_p)
    if left.shape != right.shape:
        raise FormatError(f"left/right size mismatch: {left_p} {left.shape} vs {right_p} {right.shape}")
    disp, mask = read_disparity(gt_p)
    if disp.shape != left.shape[1:]:
        raise FormatError(f"{gt_p}: disparity size {disp.shape} does not match image {left.shape[1:]}")
    occ = read_mask_png(occ_p)[None, None] if occ_p else None
    return StereoSample(left[None], right[None], disp[None, None], mask[None, None],
                        sample_id or os.path.basename(left_p), occ)


def load_batch(index, positions):
    """Decode, normalise and pad the samples at ``positions``."""
    out = []
    for i in positions:
        if not 0 <= i < len(index.entries):
            raise FormatError(f"index position {i} out of range (dataset has {len(index.entries)} samples)")
        out.append(pad_sample(load_sample(index.entries[i])))
    return out


def load_all(index):
    return load_batch(index, range(len(index.entries)))


def stack(samples):
    """Concatenate samples along the batch axis; all must share one size."""
    sizes = {s.size for s in samples}
    if len(sizes) != 1:
        raise FormatError(f"cannot batch samples of different sizes {sorted(sizes)}")
    return (np.concatenate([s.left for s in samples]),
            np.concatenate([s.right for s in samples]),
            np.concatenate([s.gt for s in samples]),
            np.concatenate([s.mask for s in samples]))
