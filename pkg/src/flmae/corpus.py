"""Synthetic image corpus and per-client domain shift.

Images are parametric textured blobs: a family-specific color palette, one to
three filled ellipses, and smooth value noise, at any square size. The
recipe is deliberately simple; it only has to make reconstruction nontrivial
and give clients measurably different pixel statistics. Every image is
regenerated bit-exactly from (generator id, seed, index).

Domain shift models site-specific acquisition differences: brightness offset,
contrast scale, box blur, and hue rotation, all deterministic pure functions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .seeding import rng_for


@dataclass(frozen=True)
class SyntheticCorpus:
    """Lazy deterministic image source with latent family (class) labels.

    `noise` sets the smooth value-noise amplitude, i.e. the irreducible
    reconstruction difficulty; it positions the per-patch error distribution
    relative to the fixed report thresholds.
    """

    n_images: int = 9000
    image_size: int = 16
    channels: int = 3
    generator: str = "blobs"
    n_families: int = 9
    seed: int = 0
    noise: float = 0.08

    def __post_init__(self):
        if self.generator != "blobs":
            raise ValueError(f"unknown generator family {self.generator!r}")
        if self.n_images < 1 or self.image_size < 4 or self.n_families < 1:
            raise ValueError("corpus too small to be meaningful")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if not 0.0 <= self.noise <= 0.5:
            raise ValueError("noise amplitude must be in [0, 0.5]")

    def family(self, index: int) -> int:
        rng = rng_for(self.seed, "corpus", 0, index)
        return int(rng.integers(self.n_families))

    def image(self, index: int) -> np.ndarray:
        """(size, size, channels) float64 image in [0, 1]."""
        rng = rng_for(self.seed, "corpus", 0, index)
        fam = int(rng.integers(self.n_families))
        style = _family_style(self.seed, fam, self.n_families, self.channels)
        return _blob_image(rng, self.image_size, self.channels, style, self.noise)

    def materialize(self) -> tuple[np.ndarray, np.ndarray]:
        """All images and family labels, in index order."""
        images = np.stack([self.image(i) for i in range(self.n_images)])
        families = np.array([self.family(i) for i in range(self.n_images)])
        return images, families


def _family_style(seed: int, family: int, n_families: int, channels: int) -> dict:
    """Stable per-family texture statistics: palette, orientation, frequency.

    Orientation and frequency band differ per family, so the correct way to
    extend a partially visible texture is family-specific; that is what makes
    the corpus heterogeneous beyond pixel statistics.
    """
    rng = rng_for(seed, "corpus", 1, family)
    return {
        "palette": rng.uniform(0.1, 0.9, size=(3, channels)),
        "angle": np.pi * family / max(1, n_families) + rng.uniform(-0.1, 0.1),
        "freq": 2.0 + 1.5 * (family % 4) + rng.uniform(-0.2, 0.2),
    }


def _bilinear_upsample(coarse: np.ndarray, size: int) -> np.ndarray:
    g = coarse.shape[0]
    xs = np.linspace(0.0, g - 1.0, size)
    i0 = np.floor(xs).astype(int)
    i1 = np.minimum(i0 + 1, g - 1)
    f = xs - i0
    rows = coarse[i0] * (1 - f)[:, None] + coarse[i1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i1] * f[None, :]


def _blob_image(rng: np.random.Generator, size: int, channels: int,
                style: dict, noise_amp: float = 0.08) -> np.ndarray:
    palette = style["palette"]
    yy, xx = np.mgrid[0:size, 0:size]

    # family-oriented grating between the first two palette colors
    angle = style["angle"] + rng.uniform(-0.08, 0.08)
    freq = style["freq"] * rng.uniform(0.9, 1.1)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    wave = np.sin(2.0 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle))
                  / size + phase)
    mix = 0.5 * (wave + 1.0)
    img = palette[0] * (1.0 - mix[:, :, None]) + palette[1] * mix[:, :, None]

    for _ in range(int(rng.integers(1, 3))):
        cy, cx = rng.uniform(0.2 * size, 0.8 * size, size=2)
        ay, ax = rng.uniform(0.12 * size, 0.35 * size, size=2)
        inside = ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0
        img[inside] = palette[2] * rng.uniform(0.8, 1.1)

    grid = max(3, size // 4)
    noise = _bilinear_upsample(rng.uniform(-1.0, 1.0, size=(grid, grid)), size)
    img += noise_amp * noise[:, :, None]
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------- domain shift

@dataclass(frozen=True)
class DomainShift:
    """One client's acquisition transform."""

    brightness: float = 0.0   # additive, in [-0.5, 0.5]
    contrast: float = 1.0     # scale around 0.5, in [0.1, 3.0]
    blur_radius: int = 0      # box-blur passes, 0..3
    hue_degrees: float = 0.0  # rotation about the gray axis, [-180, 180]

    def __post_init__(self):
        if not -0.5 <= self.brightness <= 0.5:
            raise ValueError("brightness offset outside [-0.5, 0.5]")
        if not 0.1 <= self.contrast <= 3.0:
            raise ValueError("contrast scale outside [0.1, 3.0]")
        if self.blur_radius not in (0, 1, 2, 3):
            raise ValueError("blur_radius must be 0..3")
        if not -180.0 <= self.hue_degrees <= 180.0:
            raise ValueError("hue rotation outside [-180, 180] degrees")


def _hue_matrix(degrees: float) -> np.ndarray:
    """Rotation of RGB space about the gray axis (1,1,1)/sqrt(3)."""
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    third, root = (1.0 - c) / 3.0, np.sqrt(1.0 / 3.0) * s
    return np.array([
        [c + third, third - root, third + root],
        [third + root, c + third, third - root],
        [third - root, third + root, c + third],
    ])


def _box_blur(img: np.ndarray) -> np.ndarray:
    """3x3 mean filter with clamped edges."""
    padded = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    out = np.zeros_like(img)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            out += padded[dy:dy + img.shape[0], dx:dx + img.shape[1]]
    return out / 9.0


def apply_domain_shift(image: np.ndarray, shift: DomainShift) -> np.ndarray:
    """Deterministic pixel transform, output clipped to [0, 1]."""
    out = np.asarray(image, dtype=np.float64)
    if shift.hue_degrees != 0.0 and out.shape[-1] == 3:
        out = out @ _hue_matrix(shift.hue_degrees).T
    out = (out - 0.5) * shift.contrast + 0.5
    out = out + shift.brightness
    for _ in range(shift.blur_radius):
        out = _box_blur(out)
    return np.clip(out, 0.0, 1.0)


def default_client_shifts(n_clients: int, strength: float = 1.0) -> list[DomainShift]:
    """Evenly spread transforms so every pair of clients differs visibly."""
    shifts = []
    for j in range(n_clients):
        u = 0.0 if n_clients == 1 else -1.0 + 2.0 * j / (n_clients - 1)
        shifts.append(DomainShift(
            brightness=float(np.clip(0.18 * u * strength, -0.5, 0.5)),
            contrast=float(np.clip(1.0 + 0.35 * -u * strength, 0.1, 3.0)),
            blur_radius=1 if (j % 3 == 2 and strength > 0) else 0,
            hue_degrees=float(np.clip(100.0 * u * strength, -180.0, 180.0)),
        ))
    return shifts
