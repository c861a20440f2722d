"""Monte-Carlo checks of the expected-offset argument.

Scenes hold identical copies of one template at random non-overlapping
positions.  For two fixed patch contents a and b, the average offset over
all occurrence pairs decomposes into a same-object part (exactly the
intra-object offset) and a cross-object part whose mean vanishes under
random placement; on a periodic canvas that symmetry is exact.  All pair
sums are accumulated in int64, so the decomposition identity
``total = same + cross`` holds exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateError, PlacementError, ShapeError

MAX_PLACEMENT_ATTEMPTS = 10_000


@dataclass
class SceneSample:
    scene: np.ndarray           # (H, W) float32
    origins: np.ndarray         # (n, 2) template top-left corners
    template_shape: tuple
    periodic: bool


def _wrap_centered(delta: np.ndarray, length: int) -> np.ndarray:
    """Map integer offsets into (-length/2, length/2] modulo length.

    For odd lengths the range is symmetric; for even lengths the value
    +length/2 exists while -length/2 does not, which adds a +0.5 bias to
    otherwise-uniform offsets.  Statistical zero-mean checks should use an
    odd canvas for that reason.
    """
    half = (length - 1) // 2
    return (delta + half) % length - half


def place_scene(template, n: int, canvas, rng: np.random.Generator,
                boundary: str = "periodic") -> SceneSample:
    """Place n identical copies of template at random non-overlapping spots.

    Non-overlap is enforced by requiring center distances above the template
    bounding-box diagonal.  Periodic mode wraps content around the canvas and
    measures distances on the torus, which keeps the placement distribution
    free of border effects.
    """
    if boundary not in ("periodic", "bounded"):
        raise ValueError("boundary must be 'periodic' or 'bounded'")
    periodic = boundary == "periodic"
    tmpl = np.asarray(template, dtype=np.float32)
    th, tw = tmpl.shape
    H, W = canvas
    if th > H or tw > W:
        raise PlacementError("template larger than canvas")
    diag_sq = float(th * th + tw * tw)
    origins: list[tuple[int, int]] = []
    attempts = 0
    while len(origins) < n:
        attempts += 1
        if attempts > MAX_PLACEMENT_ATTEMPTS:
            raise PlacementError(
                f"placed {len(origins)}/{n} objects in {MAX_PLACEMENT_ATTEMPTS} attempts"
            )
        if periodic:
            r0 = int(rng.integers(0, H))
            c0 = int(rng.integers(0, W))
        else:
            r0 = int(rng.integers(0, H - th + 1))
            c0 = int(rng.integers(0, W - tw + 1))
        ok = True
        for (pr, pc) in origins:
            dr, dc = r0 - pr, c0 - pc
            if periodic:
                dr = int(_wrap_centered(np.int64(dr), H))
                dc = int(_wrap_centered(np.int64(dc), W))
            if dr * dr + dc * dc <= diag_sq:
                ok = False
                break
        if ok:
            origins.append((r0, c0))
    scene = np.zeros((H, W), np.float32)
    rows = np.arange(th)
    cols = np.arange(tw)
    for (r0, c0) in origins:
        rr = (r0 + rows) % H if periodic else r0 + rows
        cc = (c0 + cols) % W if periodic else c0 + cols
        scene[np.ix_(rr, cc)] = tmpl
    return SceneSample(scene, np.asarray(origins, np.int64).reshape(-1, 2), (th, tw), periodic)


class OccurrenceIndex:
    """Exact-content lookup: every returned location reproduces the patch."""

    def __init__(self, sample: SceneSample):
        self.sample = sample

    def locations(self, patch) -> np.ndarray:
        patch = np.asarray(patch, dtype=np.float32)
        ph, pw = patch.shape
        scene = self.sample.scene
        H, W = scene.shape
        anchor = np.unravel_index(int(np.abs(patch).argmax()), patch.shape)
        val = patch[anchor]
        hits = np.argwhere(scene == val)
        rows = np.arange(ph)
        cols = np.arange(pw)
        found = []
        for (hr, hc) in hits:
            r0, c0 = int(hr - anchor[0]), int(hc - anchor[1])
            if self.sample.periodic:
                r0 %= H
                c0 %= W
                window = scene[np.ix_((r0 + rows) % H, (c0 + cols) % W)]
            else:
                if not (0 <= r0 <= H - ph and 0 <= c0 <= W - pw):
                    continue
                window = scene[r0:r0 + ph, c0:c0 + pw]
            if np.array_equal(window, patch):
                found.append((r0, c0))
        found = sorted(set(found))
        return np.asarray(found, np.int64).reshape(-1, 2)


@dataclass
class OffsetStats:
    mean: np.ndarray        # (2,) float
    se: np.ndarray          # (2,) standard error over scene means
    count: int
    total: np.ndarray       # (2,) int64 pair sum
    scene_means: np.ndarray  # (S, 2)


def _pair_offsets(la: np.ndarray, lb: np.ndarray, sample: SceneSample) -> np.ndarray:
    d = (lb[None, :, :] - la[:, None, :]).reshape(-1, 2)
    if sample.periodic:
        H, W = sample.scene.shape
        d = np.stack([_wrap_centered(d[:, 0], H), _wrap_centered(d[:, 1], W)], axis=1)
    return d


def expected_offset_mc(patch_a, patch_b, samples) -> OffsetStats:
    """Mean offset over all occurrence pairs of the two patches, with the
    standard error estimated from per-scene means."""
    totals = np.zeros(2, np.int64)
    count = 0
    scene_means = []
    for sample in samples:
        index = OccurrenceIndex(sample)
        la = index.locations(patch_a)
        lb = index.locations(patch_b)
        if len(la) == 0 or len(lb) == 0:
            raise DegenerateError("patch does not occur in every scene")
        d = _pair_offsets(la, lb, sample)
        totals += d.sum(axis=0)
        count += len(d)
        scene_means.append(d.mean(axis=0))
    scene_means = np.asarray(scene_means)
    mean = totals / count
    if len(scene_means) > 1:
        se = scene_means.std(axis=0, ddof=1) / np.sqrt(len(scene_means))
    else:
        se = np.full(2, np.nan)
    return OffsetStats(mean, se, count, totals, scene_means)


@dataclass
class OffsetDecomposition:
    same_mean: np.ndarray
    cross_mean: np.ndarray
    cross_se: np.ndarray
    n_same: int
    n_cross: int
    same_total: np.ndarray   # int64
    cross_total: np.ndarray  # int64
    cross_scene_means: np.ndarray


def _membership(locs: np.ndarray, sample: SceneSample, patch_shape) -> np.ndarray:
    """Object index for each occurrence, from the generator's placements."""
    ph, pw = patch_shape
    th, tw = sample.template_shape
    H, W = sample.scene.shape
    owners = np.full(len(locs), -1, np.int64)
    for i, (r, c) in enumerate(locs):
        for k, (orr, occ_) in enumerate(sample.origins):
            dr, dc = r - orr, c - occ_
            if sample.periodic:
                dr %= H
                dc %= W
            if 0 <= dr <= th - ph and 0 <= dc <= tw - pw:
                owners[i] = k
                break
    if (owners < 0).any():
        raise DegenerateError("occurrence outside any placed object")
    return owners


def decompose_offsets(patch_a, patch_b, samples) -> OffsetDecomposition:
    """Split occurrence-pair offsets into same-object and cross-object parts."""
    pa = np.asarray(patch_a, np.float32)
    pb = np.asarray(patch_b, np.float32)
    same_total = np.zeros(2, np.int64)
    cross_total = np.zeros(2, np.int64)
    n_same = n_cross = 0
    cross_means = []
    for sample in samples:
        index = OccurrenceIndex(sample)
        la = index.locations(pa)
        lb = index.locations(pb)
        if len(la) == 0 or len(lb) == 0:
            raise DegenerateError("patch does not occur in every scene")
        oa = _membership(la, sample, pa.shape)
        ob = _membership(lb, sample, pb.shape)
        d = _pair_offsets(la, lb, sample).reshape(len(la), len(lb), 2)
        same_mask = oa[:, None] == ob[None, :]
        ds = d[same_mask]
        dc = d[~same_mask]
        same_total += ds.sum(axis=0)
        cross_total += dc.sum(axis=0)
        n_same += len(ds)
        n_cross += len(dc)
        if len(dc):
            cross_means.append(dc.mean(axis=0))
    cross_means = np.asarray(cross_means)
    if len(cross_means) > 1:
        cross_se = cross_means.std(axis=0, ddof=1) / np.sqrt(len(cross_means))
    else:
        cross_se = np.full(2, np.nan)
    return OffsetDecomposition(
        same_mean=same_total / max(n_same, 1),
        cross_mean=cross_total / max(n_cross, 1),
        cross_se=cross_se,
        n_same=n_same,
        n_cross=n_cross,
        same_total=same_total,
        cross_total=cross_total,
        cross_scene_means=cross_means,
    )


# ---------------------------------------------------------------------------
# Canned experiment

def make_scenes(n_scenes: int, n_objects: int, canvas: int, template,
                seed: int = 0, boundary: str = "periodic"):
    samples = []
    for i in range(n_scenes):
        rng = np.random.default_rng([seed, i])
        samples.append(place_scene(template, n_objects, (canvas, canvas), rng, boundary))
    return samples


def offset_report(patch_pairs, samples) -> str:
    """Tab-separated report: one row per patch pair with both decomposition
    terms, the cross-term standard errors and the pair counts."""
    lines = [
        "pair\tsame_dr\tsame_dc\tcross_dr\tcross_dc\tcross_se_dr\tcross_se_dc\tn_same\tn_cross"
    ]
    for label, pa, pb in patch_pairs:
        dec = decompose_offsets(pa, pb, samples)
        lines.append(
            f"{label}\t{dec.same_mean[0]:.6f}\t{dec.same_mean[1]:.6f}"
            f"\t{dec.cross_mean[0]:.6f}\t{dec.cross_mean[1]:.6f}"
            f"\t{dec.cross_se[0]:.6f}\t{dec.cross_se[1]:.6f}"
            f"\t{dec.n_same}\t{dec.n_cross}"
        )
    return "\n".join(lines) + "\n"
