"""Per-frame image processing: contrast normalization, feature tracking and
detection, binary descriptors, and 2D-feature / 3D-map-point association.

Images are 2D uint8 numpy arrays (row-major, [v, u] indexing); feature pixel
coordinates are subpixel (u, v). All functions here are pure: the left and
right images of a keyframe may be processed concurrently without locking.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import BehindCamera
from .geometry import CameraModel, project

DESCRIPTOR_BITS = 256
_PATCH_RADIUS = 15  # descriptor pairs sampled inside a 31x31 patch
_BORDER_MARGIN = _PATCH_RADIUS + 1  # +1 for the 3x3 smoothing window

# Fixed pseudorandom point-pair pattern; constant seed keeps descriptors
# reproducible across runs and processes.
_PATTERN = np.random.default_rng(8259).integers(
    -(_PATCH_RADIUS - 2), _PATCH_RADIUS - 1, size=(DESCRIPTOR_BITS, 4)
)

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)

# 16-point Bresenham circle of radius 3 as (du, dv), clockwise from 12 o'clock.
_RING = np.array(
    [
        (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
        (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
    ]
)


@dataclass
class Feature:
    """A tracked 2D corner; ids are unique per session and never recycled."""

    id: int
    pixel: np.ndarray  # (u, v), subpixel
    descriptor: np.ndarray | None = None  # 32 bytes = 256 bits
    map_point_id: int | None = None
    track_age: int = 0

    def __post_init__(self):
        self.pixel = np.asarray(self.pixel, dtype=float).reshape(2)


@dataclass(frozen=True)
class ImagePyramid:
    """Level 0 is the source image; each further level halves the resolution.

    Levels are stored as float32 so LK can interpolate subpixel intensities.
    """

    levels: tuple

    @property
    def num_levels(self):
        return len(self.levels)

    @property
    def shape(self):
        return self.levels[0].shape


def as_gray(img) -> np.ndarray:
    a = np.asarray(img)
    if a.ndim != 2:
        raise ValueError(f"expected a 2D grayscale image, got shape {a.shape}")
    return a.astype(np.uint8, copy=False)


def build_pyramid(img, num_levels=3) -> ImagePyramid:
    if num_levels < 2:
        raise ValueError("pyramid needs at least 2 levels")
    levels = [as_gray(img).astype(np.float32)]
    for _ in range(num_levels - 1):
        prev = levels[-1]
        h, w = (prev.shape[0] // 2) * 2, (prev.shape[1] // 2) * 2
        cropped = prev[:h, :w]
        levels.append(0.25 * (cropped[0::2, 0::2] + cropped[1::2, 0::2]
                              + cropped[0::2, 1::2] + cropped[1::2, 1::2]))
    return ImagePyramid(tuple(levels))


def equalize_histogram(img) -> np.ndarray:
    """Remap intensities through the image's own CDF (monotone by construction)."""
    img = as_gray(img)
    hist = np.bincount(img.ravel(), minlength=256)
    cdf = np.cumsum(hist) / img.size
    lut = np.rint(cdf * 255.0).astype(np.uint8)
    return lut[img]


# ------------------------------------------------------------------ tracking


def _sample(img, us, vs):
    # bilinear interpolation; map_coordinates takes (row, col) = (v, u)
    return ndimage.map_coordinates(img, [vs, us], order=1, mode="nearest", output=np.float64)


def _lk_at_level(prev_lvl, curr_lvl, point, guess, half_win, iterations, eps):
    """One Lucas-Kanade solve at a single pyramid level.

    Returns (flow, converged) or (None, False) when the window leaves the
    image or the structure tensor is singular (flat patch).
    """
    h, w = prev_lvl.shape
    du = np.arange(-half_win, half_win + 1)
    gu, gv = np.meshgrid(du, du)
    us = point[0] + gu.ravel()
    vs = point[1] + gv.ravel()
    if (us.min() < 1 or us.max() > w - 2 or vs.min() < 1 or vs.max() > h - 2):
        return None, False

    ix = 0.5 * (_sample(prev_lvl, us + 1, vs) - _sample(prev_lvl, us - 1, vs))
    iy = 0.5 * (_sample(prev_lvl, us, vs + 1) - _sample(prev_lvl, us, vs - 1))
    template = _sample(prev_lvl, us, vs)

    g = np.array([[np.dot(ix, ix), np.dot(ix, iy)], [np.dot(ix, iy), np.dot(iy, iy)]])
    if np.linalg.eigvalsh(g)[0] < 1e-6:
        return None, False
    g_inv = np.linalg.inv(g)

    flow = np.asarray(guess, dtype=float).copy()
    for _ in range(iterations):
        cu = us + flow[0]
        cv = vs + flow[1]
        if (cu.min() < 0 or cu.max() > w - 1 or cv.min() < 0 or cv.max() > h - 1):
            return None, False
        diff = template - _sample(curr_lvl, cu, cv)
        step = g_inv @ np.array([np.dot(diff, ix), np.dot(diff, iy)])
        flow += step
        if float(np.hypot(step[0], step[1])) < eps:
            return flow, True
    return flow, False


def track_features(prev: ImagePyramid, curr: ImagePyramid, features,
                   window=21, iterations=30, eps=0.01):
    """Pyramidal Lucas-Kanade from `prev` to `curr`.

    Returns (tracked, lost): tracked is a list of (feature, new_pixel) keeping
    id and map-point association; lost collects features that left the image,
    sat on a flat patch, or failed to converge.
    """
    if prev.num_levels != curr.num_levels or prev.shape != curr.shape:
        raise ValueError("pyramids must share geometry")
    half_win = window // 2
    tracked, lost = [], []
    n_levels = prev.num_levels
    h, w = prev.shape
    for feat in features:
        flow = np.zeros(2)
        converged = False
        for lvl in range(n_levels - 1, -1, -1):
            scale = 2.0**lvl
            point = feat.pixel / scale
            lvl_flow, converged = _lk_at_level(
                prev.levels[lvl], curr.levels[lvl], point, flow, half_win, iterations, eps
            )
            if lvl_flow is None:
                if lvl > 0:
                    # window unusable at this coarse level; carry the guess down
                    flow = flow * 2.0
                    continue
                flow = None
                break
            flow = lvl_flow * 2.0 if lvl > 0 else lvl_flow
        if flow is None or not converged:
            lost.append(feat)
            continue
        new_pixel = feat.pixel + flow
        if not (0 <= new_pixel[0] <= w - 1 and 0 <= new_pixel[1] <= h - 1):
            lost.append(feat)
            continue
        tracked.append((feat, new_pixel))
    return tracked, lost


# ------------------------------------------------------------------ detection


def _corner_response(img):
    """Intensity-ring corner test: a pixel is a corner when >= 9 contiguous
    ring pixels are all brighter than center + t or all darker than center - t.
    Returns a float response map (0 where not a corner)."""
    return _corner_response_thresholded(img, 20)


def _corner_response_thresholded(img, threshold):
    f = img.astype(np.int16)
    h, w = f.shape
    if h < 7 or w < 7:
        return np.zeros((h, w))
    center = f[3:h - 3, 3:w - 3]
    ring = np.stack([f[3 + dv:h - 3 + dv, 3 + du:w - 3 + du] for du, dv in _RING])
    brighter = ring > (center + threshold)
    darker = ring < (center - threshold)
    excess = np.abs(ring.astype(np.int32) - center) - threshold

    def max_circular_run(mask):
        doubled = np.concatenate([mask, mask], axis=0)
        run = np.zeros(mask.shape[1:], dtype=np.int32)
        best = np.zeros_like(run)
        for k in range(32):
            run = np.where(doubled[k], run + 1, 0)
            np.maximum(best, run, out=best)
        return np.minimum(best, 16)

    is_corner = (max_circular_run(brighter) >= 9) | (max_circular_run(darker) >= 9)
    score = np.where(brighter | darker, np.maximum(excess, 0), 0).sum(axis=0)
    response = np.zeros((h, w))
    response[3:h - 3, 3:w - 3] = np.where(is_corner, score, 0)
    return response


def grid_bin(pixel, shape, grid_size):
    """(row, col) bin of a pixel on the grid used for spatial binning."""
    h, w = shape
    bw = -(-w // grid_size)  # ceil division
    bh = -(-h // grid_size)
    return (min(int(pixel[1] // bh), grid_size - 1), min(int(pixel[0] // bw), grid_size - 1))


def detect_features(img, existing, budget, next_id, grid_size=8, threshold=20):
    """Detect up to `budget` new corners in grid bins not already occupied.

    Each free bin contributes its best-response corner; results carry fresh
    ids starting at `next_id` and no map-point association. May return fewer
    than `budget` features (blank regions simply yield none).
    """
    if budget <= 0:
        raise ValueError("budget must be positive")
    img = as_gray(img)
    response = _corner_response_thresholded(img, threshold)
    occupied = {grid_bin(f.pixel, img.shape, grid_size) for f in existing}

    candidates = []
    vs, us = np.nonzero(response > 0)
    for u, v in zip(us, vs):
        b = grid_bin((u, v), img.shape, grid_size)
        if b in occupied:
            continue
        candidates.append((b, response[v, u], u, v))

    best_per_bin = {}
    for b, score, u, v in candidates:
        cur = best_per_bin.get(b)
        # deterministic ordering: higher score wins, then top-left pixel
        if cur is None or (score, -v, -u) > (cur[0], -cur[2], -cur[1]):
            best_per_bin[b] = (score, u, v)

    ranked = sorted(best_per_bin.values(), key=lambda t: (-t[0], t[2], t[1]))
    out = []
    for score, u, v in ranked[:budget]:
        out.append(Feature(id=next_id, pixel=(float(u), float(v))))
        next_id += 1
    return out


# ------------------------------------------------------------------ descriptors


def _smoothed_sums(img):
    # 3x3 block sums as int32; integer arithmetic keeps pair comparisons exact
    f = img.astype(np.int32)
    k = np.ones((3, 3), dtype=np.int32)
    return ndimage.convolve(f, k, mode="nearest")


def compute_descriptors(img, features):
    """Fill 256-bit binary descriptors from a fixed point-pair pattern.

    Each bit compares 3x3-smoothed intensities at two fixed offsets, so the
    descriptor is invariant to a constant brightness offset and flips entirely
    under intensity inversion. Returns (described, skipped); skipped features
    sit too close to the border and keep descriptor=None.
    """
    img = as_gray(img)
    h, w = img.shape
    sums = _smoothed_sums(img)
    described, skipped = [], []
    for feat in features:
        u = int(round(feat.pixel[0]))
        v = int(round(feat.pixel[1]))
        if not (_BORDER_MARGIN <= u < w - _BORDER_MARGIN
                and _BORDER_MARGIN <= v < h - _BORDER_MARGIN):
            feat.descriptor = None
            skipped.append(feat)
            continue
        a = sums[v + _PATTERN[:, 1], u + _PATTERN[:, 0]]
        b = sums[v + _PATTERN[:, 3], u + _PATTERN[:, 2]]
        feat.descriptor = np.packbits(a < b)
        described.append(feat)
    return described, skipped


def hamming(d1, d2) -> int:
    return int(_POPCOUNT[np.bitwise_xor(d1, d2)].sum())


def descriptor_from_id(identity) -> np.ndarray:
    """Deterministic pseudo-descriptor for simulated landmarks."""
    return np.random.default_rng(identity * 2654435761 % (2**32)).integers(
        0, 256, size=DESCRIPTOR_BITS // 8, dtype=np.uint8
    )


# ------------------------------------------------------------------ map matching


def match_to_map(features, map_view, predicted_state, calib, gate_px=3.0,
                 camera_index=0):
    """Associate 2D features with 3D map points.

    Features that already carry an association (tracked by optical flow) keep
    it. Every other feature is matched to the candidate point minimizing
    descriptor Hamming distance among points whose reprojection under the
    predicted pose falls within `gate_px`. The assignment is one-to-one; ties
    break on smaller Hamming distance, then smaller map-point id, then smaller
    feature id. Returns a list of (feature_id, map_point_id).
    """
    out = []
    taken_points = set()
    for f in features:
        if f.map_point_id is not None:
            out.append((f.id, f.map_point_id))
            taken_points.add(f.map_point_id)

    cam = calib.cameras[camera_index]
    imu_to_cam = calib.imu_to_cam[camera_index]
    r_gb = predicted_state.q.to_matrix()
    p = predicted_state.p

    candidates = []  # (hamming, map_point_id, feature_id)
    free = [f for f in features if f.map_point_id is None and f.descriptor is not None]
    for point_id, position, descriptor in map_view.iter_points():
        if point_id in taken_points:
            continue
        try:
            uv = project(cam, imu_to_cam.apply(r_gb @ (position - p)))
        except BehindCamera:
            continue
        for f in free:
            if float(np.hypot(*(uv - f.pixel))) <= gate_px:
                candidates.append((hamming(f.descriptor, descriptor), point_id, f.id, f))

    candidates.sort(key=lambda c: (c[0], c[1], c[2]))
    taken_features = set()
    for dist, point_id, feature_id, feat in candidates:
        if point_id in taken_points or feature_id in taken_features:
            continue
        taken_points.add(point_id)
        taken_features.add(feature_id)
        feat.map_point_id = point_id
        out.append((feature_id, point_id))
    return out


# ------------------------------------------------------------------ per-frame state


@dataclass
class FrontendState:
    """Owns the tracking state between frames of the left camera.

    Call process() once per frame; it equalizes contrast, tracks features
    from the previous frame, tops the set up with fresh detections where the
    grid has free bins, and recomputes descriptors for new features.
    """

    budget: int = 120
    grid_size: int = 8
    per_bin_cap: int = 4
    corner_threshold: int = 20
    lk_window: int = 21
    lk_levels: int = 3
    lk_iterations: int = 30
    lk_eps: float = 0.01
    min_tracked: int = 60
    next_id: int = 0
    features: list = field(default_factory=list)
    _prev_pyramid: ImagePyramid | None = None

    def process(self, img):
        img = equalize_histogram(img)
        pyramid = build_pyramid(img, self.lk_levels)
        if self._prev_pyramid is not None and self.features:
            tracked, _lost = track_features(
                self._prev_pyramid, pyramid, self.features,
                window=self.lk_window, iterations=self.lk_iterations, eps=self.lk_eps,
            )
            survivors = []
            for feat, new_pixel in tracked:
                feat.pixel = new_pixel
                feat.track_age += 1
                survivors.append(feat)
            self.features = self._enforce_bin_cap(survivors, img.shape)
        else:
            self.features = []

        if len(self.features) < self.min_tracked:
            new = detect_features(
                img, self.features, self.budget - len(self.features),
                self.next_id, self.grid_size, self.corner_threshold,
            )
            if new:
                self.next_id = new[-1].id + 1
                compute_descriptors(img, new)
                self.features.extend(f for f in new if f.descriptor is not None)
        self._prev_pyramid = pyramid
        return img, list(self.features)

    def _enforce_bin_cap(self, feats, shape):
        by_bin = {}
        for f in feats:
            by_bin.setdefault(grid_bin(f.pixel, shape, self.grid_size), []).append(f)
        kept = []
        for group in by_bin.values():
            group.sort(key=lambda f: (-f.track_age, f.id))
            kept.extend(group[: self.per_bin_cap])
        kept.sort(key=lambda f: f.id)
        return kept
