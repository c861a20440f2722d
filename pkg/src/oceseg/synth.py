"""Procedural scenes with exact instance labels.

Every scene carries one elliptical object template whose texture is a
radial intensity ramp multiplied into a fixed-orientation linear gradient,
so any patch inside an object uniquely encodes its position.  Copies of
the template are placed uniformly at random without overlap on a noisy
low-intensity background.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .errors import PlacementError, ShapeError

MAX_PLACEMENT_ATTEMPTS = 10_000


@dataclass(frozen=True)
class SceneSpec:
    height: int = 252
    width: int = 252
    n_objects: int = 20
    radius_range: tuple = (8.0, 14.0)
    eccentricity_range: tuple = (1.0, 1.4)
    background_level: float = 0.1
    noise_std: float = 0.02
    min_gap: int = 2  # empty pixels kept between object bounding boxes
    seed: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("canvas must be at least 1x1")
        if self.n_objects < 0:
            raise ValueError("n_objects must be non-negative")
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise ValueError("invalid radius range")
        lo, hi = self.eccentricity_range
        if not 1 <= lo <= hi:
            raise ValueError("eccentricity range must start at 1")


def object_template(radius: float, eccentricity: float = 1.0, angle: float = 0.0):
    """Elliptical template (values, support mask).

    Texture: a radial ramp brightest at the center plus a linear gradient
    along the image x axis; both terms together make every interior patch
    position-identifiable.
    """
    a = radius * eccentricity  # semi-axis along `angle`
    b = radius
    half = int(np.ceil(max(a, b)))
    ys, xs = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    ca, sa = np.cos(angle), np.sin(angle)
    u = ca * xs + sa * ys
    v = -sa * xs + ca * ys
    rho_sq = (u / a) ** 2 + (v / b) ** 2
    support = rho_sq <= 1.0
    values = 0.5 + 0.3 * (1.0 - rho_sq) + 0.15 * (xs / max(a, b))
    values = np.where(support, values, 0.0).astype(np.float32)
    return values, support


def _place_origins(spec: SceneSpec, support: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    th, tw = support.shape
    H, W = spec.height, spec.width
    if th > H or tw > W:
        raise PlacementError("template does not fit the canvas")
    gap = spec.min_gap
    dilated = ndimage.binary_dilation(
        np.pad(support, gap), iterations=gap
    ) if gap else support
    occupied = np.zeros((H, W), bool)
    origins = []
    attempts = 0
    while len(origins) < spec.n_objects:
        attempts += 1
        if attempts > MAX_PLACEMENT_ATTEMPTS:
            raise PlacementError(
                f"placed {len(origins)}/{spec.n_objects} objects in "
                f"{MAX_PLACEMENT_ATTEMPTS} attempts"
            )
        r0 = int(rng.integers(0, H - th + 1))
        c0 = int(rng.integers(0, W - tw + 1))
        if np.any(occupied[r0:r0 + th, c0:c0 + tw] & support):
            continue
        # reserve the support plus a clearance band so instances never touch
        rlo, rhi = max(0, r0 - gap), min(H, r0 + th + gap)
        clo, chi = max(0, c0 - gap), min(W, c0 + tw + gap)
        block = dilated[
            rlo - (r0 - gap):rhi - (r0 - gap),
            clo - (c0 - gap):chi - (c0 - gap),
        ]
        occupied[rlo:rhi, clo:chi] |= block
        origins.append((r0, c0))
    return np.asarray(origins, dtype=np.int64).reshape(-1, 2)


def synth_generate(spec: SceneSpec):
    """One scene: returns (image (1,H,W) float32, labels (H,W) int32).

    All objects in a scene are integer translations of a single template,
    so their pixel patterns agree exactly.  The background is Gaussian
    noise around ``background_level``; object pixels carry template values.
    """
    rng = np.random.default_rng(spec.seed)
    image = rng.normal(
        spec.background_level, spec.noise_std, size=(spec.height, spec.width)
    ).astype(np.float32)
    labels = np.zeros((spec.height, spec.width), np.int32)
    if spec.n_objects == 0:
        return image[None], labels
    radius = float(rng.uniform(*spec.radius_range))
    ecc = float(rng.uniform(*spec.eccentricity_range))
    angle = float(rng.uniform(0.0, np.pi))
    values, support = object_template(radius, ecc, angle)
    origins = _place_origins(spec, support, rng)
    th, tw = support.shape
    for ident, (r0, c0) in enumerate(origins, start=1):
        window = (slice(r0, r0 + th), slice(c0, c0 + tw))
        image[window][support] = values[support]
        labels[window][support] = ident
    return image[None], labels


def generate_dataset(spec: SceneSpec, count: int, seed: int = 0):
    """A list of (image, labels) scenes with per-scene seeds derived from seed."""
    scenes = []
    for i in range(count):
        sub = int(np.random.default_rng([seed, i]).integers(0, 2**31 - 1))
        scenes.append(synth_generate(replace(spec, seed=sub)))
    return scenes


# ---------------------------------------------------------------------------
# Sparse-annotation pseudo dataset

def build_pseudo_dataset(pred_labels, annotations, background_radius: float = 30.0):
    """Override predictions with sparse annotations.

    Predicted instances that intersect any annotation are removed and the
    annotation masks become labels; remaining predictions are kept as
    pseudo labels.  Known background is every pixel strictly closer than
    ``background_radius`` to an annotated object and not inside any label.

    Returns (pseudo label mask, known-background boolean mask).
    """
    pred = np.asarray(pred_labels)
    masks = [np.asarray(m, bool) for m in annotations]
    for m in masks:
        if m.shape != pred.shape:
            raise ShapeError("annotation shape differs from prediction")
    union = np.zeros(pred.shape, bool)
    for m in masks:
        if (union & m).any():
            raise ShapeError("annotations overlap")
        union |= m
    removed = np.unique(pred[union])
    removed = removed[removed > 0]
    pseudo = pred.astype(np.int32, copy=True)
    pseudo[np.isin(pseudo, removed)] = 0
    next_id = int(pseudo.max()) + 1
    for m in masks:
        pseudo[m] = next_id
        next_id += 1
    # relabel to consecutive ids
    ids = np.unique(pseudo)
    ids = ids[ids > 0]
    lut = np.zeros(int(pseudo.max()) + 1, np.int32)
    lut[ids] = np.arange(1, len(ids) + 1)
    pseudo = lut[pseudo]
    if union.any():
        dist = ndimage.distance_transform_edt(~union)
        known_bg = (dist < background_radius) & (pseudo == 0)
    else:
        known_bg = np.zeros(pred.shape, bool)
    return pseudo, known_bg
