"""Model-free poisoned-image generators.

All functions take and return uint8 images shaped (C, H, W). Blending is done
in float64 and quantized once at the end with round-half-to-even.
"""
import hashlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .. import kernels


class TriggerError(ValueError):
    pass


def quantize(x):
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Patch / blended


CORNERS = ("top_left", "top_right", "bottom_left", "bottom_right")


@dataclass(frozen=True)
class PatchSpec:
    patch: np.ndarray  # (C or 1, P, P) float in [0, 255]
    locations: tuple = ("bottom_right",)
    alpha: float = 1.0

    @property
    def size(self):
        return self.patch.shape[-1]


def checker_patch(size, channels=3, invert=False):
    """Black-white checker square, the classic BadNets stamp."""
    yy, xx = np.mgrid[0:size, 0:size]
    board = ((yy + xx) % 2 == (1 if invert else 0)).astype(np.float64) * 255.0
    return np.repeat(board[None], channels, axis=0)


def solid_patch(size, value=255.0, channels=3):
    return np.full((channels, size, size), float(value))


def noise_patch(size, seed, channels=3):
    return np.random.default_rng(seed).integers(0, 256, size=(channels, size, size)).astype(np.float64)


def patch_box(location, size, H, W):
    """(y0, x0) of a size x size box at a named corner."""
    if location not in CORNERS:
        raise TriggerError(f"unknown patch location {location!r}")
    y0 = 0 if location.startswith("top") else H - size
    x0 = 0 if location.endswith("left") else W - size
    return y0, x0


def patch_mask(spec: PatchSpec, H, W):
    m = np.zeros((H, W), dtype=bool)
    for loc in spec.locations:
        y0, x0 = patch_box(loc, spec.size, H, W)
        m[y0:y0 + spec.size, x0:x0 + spec.size] = True
    return m


def apply_patch(image, spec: PatchSpec):
    C, H, W = image.shape
    P = spec.size
    if P > min(H, W):
        raise TriggerError(f"patch {P}x{P} does not fit a {H}x{W} image")
    if not 0.0 <= spec.alpha <= 1.0:
        raise TriggerError("alpha must lie in [0, 1]")
    out = image.astype(np.float64)
    patch = np.broadcast_to(spec.patch, (C, P, P))
    for loc in spec.locations:
        y0, x0 = patch_box(loc, P, H, W)
        region = out[:, y0:y0 + P, x0:x0 + P]
        out[:, y0:y0 + P, x0:x0 + P] = (1.0 - spec.alpha) * region + spec.alpha * patch
    return quantize(out)


def apply_blend(image, pattern, alpha):
    """Blended attack: (1 - alpha) * image + alpha * pattern over the whole image."""
    if pattern.shape != image.shape:
        raise TriggerError(f"pattern shape {pattern.shape} != image shape {image.shape}")
    return quantize((1.0 - alpha) * image.astype(np.float64) + alpha * pattern)


# ---------------------------------------------------------------------------
# Additive


def apply_additive(image, pattern, amplification=1.0):
    if pattern.shape != image.shape:
        raise TriggerError(f"pattern shape {pattern.shape} != image shape {image.shape}")
    if amplification == 0:
        return image.copy()
    return quantize(image.astype(np.float64) + amplification * pattern)


def _image_seed(image, master_seed):
    h = hashlib.sha256()
    h.update(int(master_seed).to_bytes(8, "little", signed=True))
    h.update(str(image.shape).encode())
    h.update(np.ascontiguousarray(image, dtype=np.uint8).tobytes())
    return int.from_bytes(h.digest()[:16], "little")


def derive_sample_specific_pattern(image, master_seed, intensity):
    """Per-image pseudorandom additive field in [-intensity, intensity].

    Seeded by a hash of the master seed and the image bytes, so equal images
    get equal patterns and any pixel change gives an unrelated one.
    """
    if intensity < 0:
        raise TriggerError("intensity must be >= 0")
    if intensity == 0:
        return np.zeros(image.shape)
    rng = np.random.default_rng(_image_seed(image, master_seed))
    return intensity * rng.uniform(-1.0, 1.0, size=image.shape)


# ---------------------------------------------------------------------------
# Warp


def build_warp_field(k, H, W, seed):
    """Smooth flow field (2, H, W) from a k x k random control grid.

    Control values are uniform in [-1, 1], normalized by their mean absolute
    value and bicubically upsampled, following the WaNet construction.
    """
    if k < 2 or k > min(H, W):
        raise TriggerError(f"control grid size must be in [2, {min(H, W)}]")
    rng = np.random.default_rng(seed)
    ctrl = rng.uniform(-1.0, 1.0, size=(1, 2, k, k))
    ctrl = ctrl / np.mean(np.abs(ctrl))
    up = F.interpolate(torch.from_numpy(ctrl), size=(H, W), mode="bicubic", align_corners=True)
    return up[0].numpy().astype(np.float64)


def apply_warp(image, field, strength):
    """Backward-sample ``image`` at identity + strength * field (pixel units).

    The displacement scale matches WaNet's ``s * field / H`` in normalized
    [-1, 1] coordinates.
    """
    C, H, W = image.shape
    if field.shape != (2, H, W):
        raise TriggerError(f"field shape {field.shape} does not match image {H}x{W}")
    if strength == 0:
        return image.copy()
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    ys = yy + strength * field[0] * (H - 1) / (2.0 * H)
    xs = xx + strength * field[1] * (W - 1) / (2.0 * W)
    return quantize(kernels.warp(image.astype(np.float64), ys, xs))


# ---------------------------------------------------------------------------
# Stylization


STYLES = ("oil_paint", "ink_sketch", "hue_grade")


@dataclass(frozen=True)
class StyleSpec:
    style: str = "oil_paint"
    radius: int = 2
    saturation: float = 1.0
    edge_threshold: float = 60.0
    hue_shift: float = 0.5


def _saturate(img, factor):
    gray = img.mean(axis=0, keepdims=True)
    return gray + factor * (img - gray)


def _sobel_magnitude(gray):
    p = np.pad(gray, 1, mode="edge")
    gx = (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2])
    gy = (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:])
    return np.hypot(gx, gy)


def _rgb_to_hsv(rgb):
    r, g, b = rgb
    mx = rgb.max(axis=0)
    mn = rgb.min(axis=0)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(mx == r, ((g - b) / safe) % 6.0,
                 np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = np.where(delta > 0, h / 6.0, 0.0)
    s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    return h, s, mx


def _hsv_to_rgb(h, s, v):
    i = np.floor(h * 6.0) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    choices = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    out = np.zeros((3,) + h.shape)
    for k, (a, b, c) in enumerate(choices):
        sel = i == k
        out[0][sel], out[1][sel], out[2][sel] = a[sel], b[sel], c[sel]
    return out


def apply_stylization(image, spec: StyleSpec):
    C, H, W = image.shape
    if spec.style not in STYLES:
        raise TriggerError(f"unknown style {spec.style!r}")
    img = image.astype(np.float64)
    if spec.style == "oil_paint":
        if spec.radius < 1 or spec.radius >= min(H, W) / 2:
            raise TriggerError(f"radius {spec.radius} must be in [1, {min(H, W) / 2})")
        out = kernels.kuwahara(img, spec.radius)
        if C == 3 and spec.saturation != 1.0:
            out = _saturate(out, spec.saturation)
        return quantize(out)
    if spec.style == "ink_sketch":
        gray = img.mean(axis=0)
        edges = _sobel_magnitude(gray) > spec.edge_threshold
        paper = 0.6 * gray + 0.4 * 235.0
        out = np.where(edges, 25.0, paper)
        return quantize(np.repeat(out[None], C, axis=0))
    # hue_grade
    if C != 3:
        raise TriggerError("hue_grade needs an RGB image")
    h, s, v = _rgb_to_hsv(img / 255.0)
    return quantize(_hsv_to_rgb((h + spec.hue_shift) % 1.0, s, v) * 255.0)
