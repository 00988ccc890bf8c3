"""Image I/O, bicubic 4x degradation, augmentation and dataset assembly.

Images travel as binary PGM (P5) / PPM (P6) files with maxval 255; patches
become float64 tensors in [0,1].  The degradation pipeline is plain
separable cubic-kernel resampling (Keys a=-0.5, edge-clamped) applied twice:
4x down to the low-resolution patch, then 4x back up to form the initial
state, with the untouched patch as the goal state.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .rl import StatePair

SCALE = 4

AUGMENT_CHOICES = ("rot90", "hflip", "vflip")


class ImageFormatError(ValueError):
    """Malformed, truncated or unsupported PNM data."""


@dataclass
class ImageBuffer:
    """8-bit image as stored on disk; (H, W, C) uint8 with C in {1, 3}."""

    width: int
    height: int
    channels: int
    pixels: np.ndarray


# ---------------------------------------------------------------------------
# PGM / PPM codec
# ---------------------------------------------------------------------------

def _read_header_tokens(blob, count):
    """PNM header tokens after the magic, honoring '#' comments."""
    tokens = []
    pos = 2
    while len(tokens) < count:
        if pos >= len(blob):
            raise ImageFormatError("truncated header")
        ch = blob[pos:pos + 1]
        if ch == b"#":
            eol = blob.find(b"\n", pos)
            if eol < 0:
                raise ImageFormatError("unterminated header comment")
            pos = eol + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(blob) and not blob[end:end + 1].isspace():
                end += 1
            tokens.append(blob[pos:end])
            pos = end
    return tokens, pos + 1  # single whitespace byte terminates the header


def load_image(path) -> ImageBuffer:
    """Decode a binary PGM/PPM file losslessly."""
    with open(path, "rb") as fh:
        blob = fh.read()
    magic = blob[:2]
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise ImageFormatError(f"{path}: unsupported magic {magic!r} (want P5 or P6)")
    try:
        tokens, start = _read_header_tokens(blob, 3)
        width, height, maxval = (int(t) for t in tokens)
    except (ValueError, ImageFormatError) as exc:
        raise ImageFormatError(f"{path}: malformed header ({exc})") from exc
    if width < 1 or height < 1:
        raise ImageFormatError(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise ImageFormatError(f"{path}: unsupported maxval {maxval} (want 255)")
    need = width * height * channels
    payload = blob[start:start + need]
    if len(payload) < need:
        raise ImageFormatError(
            f"{path}: truncated payload, expected {need} bytes, got {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels).copy()
    return ImageBuffer(width=width, height=height, channels=channels, pixels=pixels)


def save_image(buf: ImageBuffer, path) -> None:
    if buf.channels not in (1, 3):
        raise ImageFormatError(f"cannot encode {buf.channels}-channel image")
    magic = b"P5" if buf.channels == 1 else b"P6"
    header = magic + f"\n{buf.width} {buf.height}\n255\n".encode("ascii")
    pixels = np.asarray(buf.pixels, dtype=np.uint8)
    if pixels.shape != (buf.height, buf.width, buf.channels):
        raise ImageFormatError(
            f"pixel array {pixels.shape} does not match header "
            f"{(buf.height, buf.width, buf.channels)}")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(pixels.tobytes())


def to_tensor(buf: ImageBuffer) -> np.ndarray:
    """uint8 (H,W,C) -> float64 in [0,1]."""
    return buf.pixels.astype(np.float64) / 255.0


def from_tensor(t) -> ImageBuffer:
    """Clamp to [0,1], scale to 255 and round half away from zero."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 3 or t.shape[2] not in (1, 3):
        raise ImageFormatError(f"tensor shape {t.shape} is not (H,W,1) or (H,W,3)")
    scaled = np.clip(t, 0.0, 1.0) * 255.0
    pixels = np.floor(scaled + 0.5).astype(np.uint8)  # values are nonnegative here
    h, w, c = t.shape
    return ImageBuffer(width=w, height=h, channels=c, pixels=pixels)


# ---------------------------------------------------------------------------
# bicubic resampling (Keys kernel, a = -0.5)
# ---------------------------------------------------------------------------

def _keys_kernel(x):
    """Piecewise cubic interpolation kernel with a = -0.5."""
    ax = np.abs(x)
    a = -0.5
    out = np.zeros_like(ax)
    near = ax <= 1.0
    far = (ax > 1.0) & (ax < 2.0)
    out[near] = (a + 2.0) * ax[near] ** 3 - (a + 3.0) * ax[near] ** 2 + 1.0
    out[far] = a * ax[far] ** 3 - 5.0 * a * ax[far] ** 2 + 8.0 * a * ax[far] - 4.0 * a
    return out


def _axis_taps(n_in, n_out):
    """Tap indices (n_out,4) and weights (n_out,4) for one resampled axis."""
    u = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(u)
    t = u - i0
    offsets = np.arange(-1, 3, dtype=np.float64)
    weights = _keys_kernel(t[:, None] - offsets[None, :])
    taps = np.clip(i0[:, None].astype(np.int64) + offsets[None, :].astype(np.int64),
                   0, n_in - 1)
    return taps, weights


def _resample_axis(x, n_out, axis):
    taps, weights = _axis_taps(x.shape[axis], n_out)
    moved = np.moveaxis(x, axis, 0)
    center = moved[taps[:, 1]]
    # Difference form: constants and integer-aligned grids reproduce exactly,
    # because every (sample - center) term vanishes bit-for-bit.
    wexp = weights.reshape(weights.shape + (1,) * (moved.ndim - 1))
    out = center.copy()
    for m in range(4):
        out += wexp[:, m] * (moved[taps[:, m]] - center)
    return np.moveaxis(out, 0, axis)


def bicubic_resample(t, out_h, out_w) -> np.ndarray:
    """Separable cubic-convolution resize with edge-clamped sampling."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 3:
        raise ValueError(f"expected (H,W,C) tensor, got shape {t.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output dims must be >= 1, got {out_h}x{out_w}")
    out = _resample_axis(t, out_h, 0)
    out = _resample_axis(out, out_w, 1)
    return out


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def augment(t, choice=None, rng=None) -> np.ndarray:
    """Apply one of rot90 / hflip / vflip, drawn uniformly when unspecified."""
    t = np.asarray(t)
    if choice is None:
        if rng is None:
            raise ValueError("augment needs either an explicit choice or an rng")
        choice = AUGMENT_CHOICES[rng.integers(0, len(AUGMENT_CHOICES))]
    if choice == "rot90":
        if t.shape[0] != t.shape[1]:
            raise ValueError(f"rot90 needs a square patch, got {t.shape[:2]}")
        return np.rot90(t, axes=(0, 1)).copy()
    if choice == "hflip":
        return t[:, ::-1].copy()
    if choice == "vflip":
        return t[::-1, :].copy()
    raise ValueError(f"unknown augmentation {choice!r}")


# ---------------------------------------------------------------------------
# state pairs and synthetic patches
# ---------------------------------------------------------------------------

def make_state_pair(hr_patch, pair_id=0) -> StatePair:
    """Degrade an HR patch into (initial, goal): 4x down then 4x back up.

    The upsampled initial state is clipped to [0,1] (the cubic kernel can
    overshoot); the goal state is the patch untouched.
    """
    hr = np.asarray(hr_patch, dtype=np.float64)
    if hr.ndim != 3:
        raise ValueError(f"expected (H,W,C) patch, got shape {hr.shape}")
    h, w, _ = hr.shape
    if h % SCALE or w % SCALE:
        raise ValueError(f"patch dims {h}x{w} not divisible by {SCALE}")
    lr = bicubic_resample(hr, h // SCALE, w // SCALE)
    s0 = np.clip(bicubic_resample(lr, h, w), 0.0, 1.0)
    return StatePair(s0=s0, s_star=hr, id=pair_id)


def _grid(patch_size):
    y, x = np.mgrid[0:patch_size, 0:patch_size].astype(np.float64)
    return x, y


def _patch_grating(rng, ps):
    x, y = _grid(ps)
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(8.0, 32.0)
    phase = rng.uniform(0, 2 * np.pi)
    amp = rng.uniform(0.15, 0.4)
    wave = np.sin(2 * np.pi * (x * np.cos(theta) + y * np.sin(theta)) / period + phase)
    return 0.5 + amp * wave


def _patch_blobs(rng, ps):
    x, y = _grid(ps)
    img = np.full((ps, ps), rng.uniform(0.3, 0.7))
    for _ in range(rng.integers(1, 5)):
        cx, cy = rng.uniform(0, ps, size=2)
        sigma = rng.uniform(2.0, ps / 4.0)
        amp = rng.uniform(0.25, 0.6) * rng.choice([-1.0, 1.0])
        img += amp * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * sigma ** 2))
    return img


def _patch_edge(rng, ps):
    x, y = _grid(ps)
    theta = rng.uniform(0, np.pi)
    offset = rng.uniform(0.25 * ps, 0.75 * ps)
    lo = rng.uniform(0.05, 0.35)
    hi = rng.uniform(0.6, 0.95)
    if rng.uniform() < 0.5:
        lo, hi = hi, lo
    signed = (x - ps / 2) * np.cos(theta) + (y - ps / 2) * np.sin(theta) + (offset - ps / 2)
    width = rng.uniform(0.0, 1.5)
    if width < 0.25:
        mask = (signed >= 0).astype(np.float64)
    else:
        mask = np.clip(signed / width + 0.5, 0.0, 1.0)
    return lo + (hi - lo) * mask


def _patch_checker(rng, ps):
    x, y = _grid(ps)
    cell = float(rng.integers(4, 13))
    ox, oy = rng.uniform(0, cell, size=2)
    parity = (np.floor((x + ox) / cell) + np.floor((y + oy) / cell)) % 2
    lo = rng.uniform(0.05, 0.35)
    hi = rng.uniform(0.65, 0.95)
    return lo + (hi - lo) * parity


_PATTERNS = (_patch_grating, _patch_blobs, _patch_edge, _patch_checker)


def synth_patch(index, patch_size, seed) -> np.ndarray:
    """One procedural HR patch; deterministic in (seed, index)."""
    rng = np.random.default_rng([seed, index])
    maker = _PATTERNS[index % len(_PATTERNS)]
    img = np.clip(maker(rng, patch_size), 0.0, 1.0)
    return img[:, :, None]


def synth_dataset(count, patch_size, seed, split_train=0.8):
    """Procedural dataset split into train/test state-pair lists."""
    if count < 1:
        raise ValueError("empty dataset requested")
    if patch_size % SCALE:
        raise ValueError(f"patch_size {patch_size} not divisible by {SCALE}")
    pairs = [make_state_pair(synth_patch(i, patch_size, seed), pair_id=i)
             for i in range(count)]
    n_train = int(round(count * split_train))
    return pairs[:n_train], pairs[n_train:]


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

MANIFEST_HEADER = "path,origin_x,origin_y,split"


@dataclass
class ManifestEntry:
    path: str
    origin_x: int
    origin_y: int
    split: str


def write_manifest(entries, path):
    lines = [MANIFEST_HEADER]
    lines += [f"{e.path},{e.origin_x},{e.origin_y},{e.split}" for e in entries]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path):
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != MANIFEST_HEADER:
        raise ValueError(f"{path}: bad manifest header")
    entries = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 4 or parts[3] not in ("train", "test"):
            raise ValueError(f"{path}: bad manifest row {ln!r}")
        entries.append(ManifestEntry(parts[0], int(parts[1]), int(parts[2]), parts[3]))
    return entries


def write_synth_dataset(out_dir, count, patch_size, seed, split_train=0.8):
    """Materialize synthetic patches as PGM files plus a manifest CSV."""
    if count < 1:
        raise ValueError("empty dataset requested")
    if patch_size % SCALE:
        raise ValueError(f"patch_size {patch_size} not divisible by {SCALE}")
    os.makedirs(out_dir, exist_ok=True)
    n_train = int(round(count * split_train))
    entries = []
    for i in range(count):
        name = f"patch_{i:05d}.pgm"
        save_image(from_tensor(synth_patch(i, patch_size, seed)),
                   os.path.join(out_dir, name))
        entries.append(ManifestEntry(name, 0, 0, "train" if i < n_train else "test"))
    manifest_path = os.path.join(out_dir, "manifest.csv")
    write_manifest(entries, manifest_path)
    return manifest_path


def load_dataset(manifest_path, patch_size, augment_train=False, seed=0):
    """Manifest rows -> (train, test) state-pair lists.

    Each row names an image and a patch origin; augmentation (when enabled)
    is applied to the HR patch before degradation so the pair stays aligned,
    with a per-row deterministic draw.
    """
    base = os.path.dirname(os.path.abspath(manifest_path))
    train, test = [], []
    for i, entry in enumerate(read_manifest(manifest_path)):
        buf = load_image(os.path.join(base, entry.path))
        tensor = to_tensor(buf)
        patch = tensor[entry.origin_y:entry.origin_y + patch_size,
                       entry.origin_x:entry.origin_x + patch_size]
        if patch.shape[:2] != (patch_size, patch_size):
            raise ValueError(
                f"{entry.path}: patch at ({entry.origin_x},{entry.origin_y}) "
                f"exceeds image bounds")
        if augment_train and entry.split == "train":
            patch = augment(patch, rng=np.random.default_rng([seed, i]))
        pair = make_state_pair(patch, pair_id=i)
        (train if entry.split == "train" else test).append(pair)
    return train, test
