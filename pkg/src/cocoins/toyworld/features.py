"""Procedural identity features, mask estimation, and palette classification."""

from __future__ import annotations

import numpy as np
import torch

from .render import IMAGE_SIZE, PALETTES, background_pattern

HUE_BINS = 12
STRIPE_BINS = 5
BORDER = 3                 # palette-classification ring width, kept subject-free
_MOMENT_WEIGHT = 0.5
_STRIPE_WEIGHT = 0.5


def _to_unit(image: torch.Tensor) -> np.ndarray:
    """Model-space [-1,1] image -> clipped [0,1] numpy [3,H,W]."""
    arr = image.detach().cpu().numpy().astype(np.float64)
    return np.clip((arr + 1.0) / 2.0, 0.0, 1.0)


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Vectorized HSV conversion; rgb is [3, N] in [0,1], returns [3, N]."""
    r, g, b = rgb
    maxc = np.max(rgb, axis=0)
    minc = np.min(rgb, axis=0)
    v = maxc
    span = maxc - minc
    s = np.where(maxc > 0, span / np.maximum(maxc, 1e-12), 0.0)
    safe = np.maximum(span, 1e-12)
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    h = np.select(
        [maxc == r, maxc == g], [bc - gc, 2.0 + rc - bc], default=4.0 + gc - rc
    )
    h = np.where(span > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v])


def extract_identity_features(image: torch.Tensor, mask: torch.Tensor) -> np.ndarray:
    """Masked hue histogram + glyph moments + stripe spectrum, L2-normalized."""
    m = mask.detach().cpu().numpy().astype(bool)
    n = int(m.sum())
    if n == 0:
        raise ValueError("empty subject mask")
    img = _to_unit(image)
    hsv = rgb_to_hsv(img[:, m])
    hist, _ = np.histogram(hsv[0], bins=HUE_BINS, range=(0.0, 1.0))
    hist = hist / n

    ys, xs = np.nonzero(m)
    dy = ys - ys.mean()
    dx = xs - xs.mean()
    eta20 = float((dy ** 2).sum()) / n ** 2
    eta02 = float((dx ** 2).sum()) / n ** 2
    eta11 = float((dy * dx).sum()) / n ** 2
    moments = np.array([eta20, eta02, eta11, np.sqrt(n) / IMAGE_SIZE])

    spectrum = _stripe_spectrum(hsv[2], ys)

    feat = np.concatenate([hist, _MOMENT_WEIGHT * moments, _STRIPE_WEIGHT * spectrum])
    return feat / np.linalg.norm(feat)


def _stripe_spectrum(values: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Magnitude of the row-profile DFT at 0..4 cycles over the glyph height."""
    y0, y1 = ys.min(), ys.max()
    height = y1 - y0 + 1
    profile = np.zeros(height)
    counts = np.zeros(height)
    np.add.at(profile, ys - y0, values)
    np.add.at(counts, ys - y0, 1.0)
    profile = profile / np.maximum(counts, 1.0)
    profile = profile - profile.mean()
    k = np.arange(STRIPE_BINS)[:, None]
    y = np.arange(height)[None, :]
    basis = np.exp(-2j * np.pi * k * y / height)
    return np.abs(basis @ profile) / height


def classify_palette(image: torch.Tensor) -> int:
    """Nearest-palette background classification over the border ring."""
    img = _to_unit(image)
    ring = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
    ring[:BORDER, :] = ring[-BORDER:, :] = True
    ring[:, :BORDER] = ring[:, -BORDER:] = True
    errs = [
        float(((img[:, ring] - background_pattern(p)[:, ring]) ** 2).mean())
        for p in range(len(PALETTES))
    ]
    return int(np.argmin(errs))


def estimate_mask(image: torch.Tensor, threshold: float = 0.02,
                  min_pixels: int = 5) -> torch.Tensor:
    """Subject mask for a generated image: pixels far from the inferred background.

    Falls back to a central box when almost nothing deviates from the background,
    so downstream feature extraction stays total.
    """
    img = _to_unit(image)
    pattern = background_pattern(classify_palette(image))
    dist = ((img - pattern) ** 2).mean(axis=0)
    mask = dist > threshold
    mask[:BORDER, :] = mask[-BORDER:, :] = False
    mask[:, :BORDER] = mask[:, -BORDER:] = False
    if mask.sum() < min_pixels:
        mask = np.zeros_like(mask)
        c = IMAGE_SIZE // 2
        mask[c - 5:c + 5, c - 5:c + 5] = True
    return torch.from_numpy(mask)


def subject_pixel_count(image: torch.Tensor, threshold: float = 0.02) -> int:
    """Number of pixels deviating from the inferred background pattern."""
    img = _to_unit(image)
    pattern = background_pattern(classify_palette(image))
    dist = ((img - pattern) ** 2).mean(axis=0)
    return int((dist > threshold).sum())
