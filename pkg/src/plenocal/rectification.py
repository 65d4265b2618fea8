"""MLA-sensor misalignment: center detection, slope analysis, rectification.

A slightly rotated micro-lens array makes micro-image centers drift off the
ideal square grid; the per-row line slopes then vary across rows.  Detecting
the centers on a white image and fitting the 8-dof homography that maps them
back to a uniform grid reparameterizes the two light-field planes to parallel.
Observations are rectified by mapping their pixel coordinates through that
homography; the raster itself is only warped for visual inspection.
"""

from __future__ import annotations

import math
import re
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import (AmbiguousPitch, DegenerateConfiguration, DegenerateGeometry,
                     NoGridFound, PointAtInfinity, TooFewCenters)
from .projection import Observation
from .rotation import rodrigues_matrix

_PEAK_FRACTION = 0.2          # local maxima below this fraction of peak are noise
_BACKGROUND_PERCENTILE = 20.0
# window must stay inside the micro-image's Voronoi cell: at 0.6 pitch the
# neighbors' tails pull centroids off by ~0.1 px
_CENTROID_RADIUS = 0.45
_ATTACH_RADIUS = 0.35         # lattice walk: max deviation from predicted site
_DLT_RANK_TOL = 1e-8


@dataclass(frozen=True)
class MlaMisalignmentSpec:
    """Pose of the micro-lens array relative to the main lens.

    ``offset`` is the position (x_m, y_m, L) of the reference micro-lens
    (label (0, 0)) and ``sensor_gap`` the axial MLA-to-sensor distance, both
    in the same metric unit as ``lens_pitch``.
    """

    rotation: np.ndarray          # Rodrigues vector of the array rotation
    offset: np.ndarray            # (x_m, y_m, L)
    lens_pitch: float             # d_m > 0
    sensor_gap: float             # l > 0
    pixel_pitch: float            # metric size of one sensor pixel

    def __post_init__(self) -> None:
        object.__setattr__(self, "rotation",
                           np.asarray(self.rotation, dtype=float).reshape(3).copy())
        object.__setattr__(self, "offset",
                           np.asarray(self.offset, dtype=float).reshape(3).copy())
        if self.offset[2] <= 0:
            raise ValueError("MLA distance L must be positive")
        if self.lens_pitch <= 0 or self.sensor_gap <= 0 or self.pixel_pitch <= 0:
            raise ValueError("lens_pitch, sensor_gap and pixel_pitch must be positive")

    @property
    def rotation_matrix(self) -> np.ndarray:
        return rodrigues_matrix(self.rotation)


@dataclass(frozen=True, slots=True)
class MicroImageCenter:
    """Sub-pixel center of one micro-lens image, with its lattice label."""

    i: int
    j: int
    x: float
    y: float


def lens_positions(spec: MlaMisalignmentSpec, labels: np.ndarray) -> np.ndarray:
    """3D micro-lens centers (x_g, y_g, z_g) for an (N, 2) label array."""
    labels = np.atleast_2d(np.asarray(labels, dtype=float))
    grid = np.zeros((labels.shape[0], 3))
    grid[:, 0] = labels[:, 0] * spec.lens_pitch
    grid[:, 1] = labels[:, 1] * spec.lens_pitch
    return grid @ spec.rotation_matrix.T + spec.offset


def project_centers(spec: MlaMisalignmentSpec, labels: np.ndarray) -> np.ndarray:
    """Micro-image centers in axis-relative pixels for an (N, 2) label array.

    Each lens center is projected from the main-lens aperture origin onto the
    sensor plane at distance L + l and converted to pixels.
    """
    g = lens_positions(spec, labels)
    if np.any(g[:, 2] <= 0.0):
        raise DegenerateGeometry("micro-lens center at or behind the aperture plane")
    depth = spec.offset[2] + spec.sensor_gap
    return (g[:, :2] * (depth / g[:, 2])[:, None]) / spec.pixel_pitch


def project_center(spec: MlaMisalignmentSpec, label) -> MicroImageCenter:
    """Single-label convenience wrapper around :func:`project_centers`."""
    i, j = int(label[0]), int(label[1])
    xy = project_centers(spec, np.array([[i, j]], dtype=float))[0]
    return MicroImageCenter(i, j, float(xy[0]), float(xy[1]))


def _blob_candidates(work: np.ndarray, pitch: float) -> np.ndarray:
    """Local-maximum blob seeds as (N, 2) pixel coordinates (x, y)."""
    peak = float(work.max())
    if peak <= 0.0:
        return np.empty((0, 2))
    size = max(3, int(round(pitch * 0.7)) | 1)
    is_max = (work == ndimage.maximum_filter(work, size=size)) \
        & (work > _PEAK_FRACTION * peak)
    labeled, count = ndimage.label(is_max)
    if count == 0:
        return np.empty((0, 2))
    yx = np.asarray(ndimage.center_of_mass(is_max, labeled, np.arange(1, count + 1)))
    return yx[:, ::-1].copy()


def _refine_centroids(work: np.ndarray, seeds: np.ndarray, pitch: float) -> np.ndarray:
    """Intensity-weighted centroid refinement around each seed."""
    h, w = work.shape
    r = int(round(_CENTROID_RADIUS * pitch))
    out = np.empty_like(seeds)
    for k, (sx, sy) in enumerate(seeds):
        cx, cy = int(round(sx)), int(round(sy))
        x0, x1 = max(0, cx - r), min(w, cx + r + 1)
        y0, y1 = max(0, cy - r), min(h, cy + r + 1)
        patch = work[y0:y1, x0:x1]
        total = patch.sum()
        if total <= 0.0:
            out[k] = (sx, sy)
            continue
        ys, xs = np.mgrid[y0:y1, x0:x1]
        out[k] = ((xs * patch).sum() / total, (ys * patch).sum() / total)
    return out


def _orient_axes(centers: np.ndarray, start: int, spacing: float):
    """Initial +i and +j lattice steps from the start blob's neighbors.

    Candidates are restricted to well below the diagonal distance (sqrt(2)
    spacing) and the best-aligned candidate per axis wins, so a diagonal
    neighbor can never masquerade as a lattice axis.
    """
    d = centers - centers[start]
    dist = np.hypot(d[:, 0], d[:, 1])
    near = np.flatnonzero((dist > 0.5 * spacing) & (dist < 1.25 * spacing))
    step_i = step_j = None
    best_i = best_j = 45.0
    for k in near:
        ang = math.degrees(math.atan2(d[k, 1], d[k, 0]))
        if abs(ang) < best_i:
            best_i, step_i = abs(ang), d[k]
        if abs(ang - 90.0) < best_j:
            best_j, step_j = abs(ang - 90.0), d[k]
    if step_i is None or step_j is None or best_i > 30.0 or best_j > 30.0:
        raise NoGridFound("cannot orient lattice axes around the central blob")
    return step_i, step_j


def detect_centers(white_image: np.ndarray, expected_pitch: float) -> list[MicroImageCenter]:
    """Detect and label micro-image centers on a white (pure scene) image.

    Blobs are local maxima refined by intensity-weighted centroids; labels are
    grown outward from the blob nearest the image center by a nearest-neighbor
    walk, so smooth lattice distortion (rotation, perspective) is tolerated.
    """
    img = np.asarray(white_image, dtype=float)
    if img.ndim != 2:
        raise ValueError("white image must be a single-channel raster")
    if expected_pitch <= 4.0:
        raise ValueError("expected pitch must exceed 4 pixels")
    if min(img.shape) < 3 * expected_pitch:
        raise ValueError("image too small for the expected pitch")

    work = img - np.percentile(img, _BACKGROUND_PERCENTILE)
    np.clip(work, 0.0, None, out=work)
    seeds = _blob_candidates(work, expected_pitch)
    # blobs whose centroid window would clip at the border carry biased
    # centroids (truncated discs); drop them before refinement
    margin = _CENTROID_RADIUS * expected_pitch
    h, w = img.shape
    keep = ((seeds[:, 0] > margin) & (seeds[:, 0] < w - 1 - margin)
            & (seeds[:, 1] > margin) & (seeds[:, 1] < h - 1 - margin))
    seeds = seeds[keep]
    if seeds.shape[0] < 10:
        raise NoGridFound(f"only {seeds.shape[0]} usable blobs found")
    centers = _refine_centroids(work, seeds, expected_pitch)

    tree = cKDTree(centers)
    nn, _ = tree.query(centers, k=2)
    spacing = float(np.median(nn[:, 1]))
    if abs(spacing - expected_pitch) > 0.25 * expected_pitch:
        raise AmbiguousPitch(
            f"median spacing {spacing:.2f} px deviates from expected "
            f"{expected_pitch:.2f} px by more than 25%")

    h, w = img.shape
    start = int(np.argmin(np.hypot(centers[:, 0] - (w - 1) / 2,
                                   centers[:, 1] - (h - 1) / 2)))
    step_i, step_j = _orient_axes(centers, start, spacing)

    labels: dict[int, tuple[int, int]] = {start: (0, 0)}
    queue = deque([(start, np.asarray(step_i, float), np.asarray(step_j, float))])
    attach = _ATTACH_RADIUS * spacing
    while queue:
        k, si, sj = queue.popleft()
        i, j = labels[k]
        pos = centers[k]
        for di, dj, step in ((1, 0, si), (-1, 0, -si), (0, 1, sj), (0, -1, -sj)):
            dist, m = tree.query(pos + step)
            if dist > attach or m in labels:
                continue
            labels[m] = (i + di, j + dj)
            local = centers[m] - pos
            nsi = local * (1 if di > 0 else -1) if di != 0 else si
            nsj = local * (1 if dj > 0 else -1) if dj != 0 else sj
            queue.append((m, nsi, nsj))

    out = [MicroImageCenter(i, j, float(centers[k][0]), float(centers[k][1]))
           for k, (i, j) in labels.items()]
    out.sort(key=lambda c: (c.j, c.i))
    return out


def row_slopes(centers: list[MicroImageCenter]) -> list[tuple[int, float]]:
    """Total-least-squares line slope for every row with enough centers.

    Returns (row index j, tangent of the fitted line angle), sorted by j.
    """
    rows: dict[int, list[MicroImageCenter]] = {}
    for c in centers:
        rows.setdefault(c.j, []).append(c)
    usable = {j: cs for j, cs in rows.items() if len(cs) >= 10}
    if len(usable) < 2:
        raise TooFewCenters("need at least 2 rows with 10 or more centers")
    out = []
    for j in sorted(usable):
        pts = np.array([(c.x, c.y) for c in usable[j]])
        pts = pts - pts.mean(axis=0)
        _, _, vt = np.linalg.svd(pts, full_matrices=False)
        vx, vy = vt[0]
        if vx == 0.0:
            raise DegenerateConfiguration(f"row {j} centers are vertical")
        out.append((j, float(vy / vx)))
    return out


def _normalize_2d(pts: np.ndarray):
    mean = pts.mean(axis=0)
    rms = np.sqrt(np.mean(np.sum((pts - mean) ** 2, axis=1)))
    s = 1.0 if rms == 0.0 else math.sqrt(2.0) / rms
    T = np.array([[s, 0.0, -s * mean[0]], [0.0, s, -s * mean[1]], [0.0, 0.0, 1.0]])
    return (pts - mean) * s, T


@dataclass(frozen=True, slots=True)
class RectificationFit:
    """8-dof rectifying homography with its fit diagnostics."""

    homography: np.ndarray     # 3x3, h33 = 1
    fitted_pitch: float        # px, median adjacent-label spacing
    rms: float                 # px, residual to the ideal grid after mapping


def _fitted_pitch(centers: list[MicroImageCenter]) -> float:
    by_label = {(c.i, c.j): (c.x, c.y) for c in centers}
    spacings = []
    for (i, j), xy in by_label.items():
        for nb in ((i + 1, j), (i, j + 1)):
            if nb in by_label:
                spacings.append(math.hypot(by_label[nb][0] - xy[0],
                                           by_label[nb][1] - xy[1]))
    if not spacings:
        return 0.0
    return float(np.median(spacings))


def estimate_rectifying_homography(centers: list[MicroImageCenter],
                                   pitch: float | None = None) -> RectificationFit:
    """Fit the homography mapping detected centers to the ideal uniform grid.

    The grid pitch is the median adjacent-label center spacing unless given.
    Normalized DLT; the result is scaled so h33 = 1.
    """
    if len(centers) < 5:
        raise TooFewCenters(f"need at least 5 centers, got {len(centers)}")
    if len({c.i for c in centers}) < 2 or len({c.j for c in centers}) < 2:
        raise DegenerateConfiguration("centers must span at least 2 rows and columns")

    p = _fitted_pitch(centers)
    if p == 0.0:
        if pitch is None:
            raise DegenerateConfiguration("no adjacent labels to fit a pitch from")
        p = float(pitch)

    src = np.array([(c.x, c.y) for c in centers])
    dst = np.array([(c.i * p, c.j * p) for c in centers])
    # the lattice origin is free; anchoring it at the mean label offset keeps
    # the homography near identity and independent of the labeling reference
    dst += (src - dst).mean(axis=0)
    sn, Ts = _normalize_2d(src)
    dn, Td = _normalize_2d(dst)
    n = len(centers)
    A = np.zeros((2 * n, 9))
    A[0::2, 0:2] = -sn
    A[0::2, 2] = -1.0
    A[0::2, 6:8] = dn[:, 0:1] * sn
    A[0::2, 8] = dn[:, 0]
    A[1::2, 3:5] = -sn
    A[1::2, 5] = -1.0
    A[1::2, 6:8] = dn[:, 1:2] * sn
    A[1::2, 8] = dn[:, 1]
    _, s, Vt = np.linalg.svd(A)
    if s[-2] < _DLT_RANK_TOL * s[0]:
        raise DegenerateConfiguration("homography system is rank deficient")
    Hn = Vt[-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    if abs(H[2, 2]) < 1e-12 * np.abs(H).max():
        raise DegenerateConfiguration("homography has a vanishing scale entry")
    H = H / H[2, 2]
    mapped = apply_homography(src, H)
    rms = float(np.sqrt(np.mean(np.sum((mapped - dst) ** 2, axis=1))))
    return RectificationFit(H, p, rms)


def apply_homography(points: np.ndarray, H: np.ndarray) -> np.ndarray:
    """Map (N, 2) points through a 3x3 homography with dehomogenization."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    hom = np.column_stack([pts, np.ones(len(pts))]) @ np.asarray(H, float).T
    scale = np.linalg.norm(hom, axis=1)
    bad = np.abs(hom[:, 2]) < 1e-14 * scale
    if np.any(bad):
        raise PointAtInfinity(f"{int(bad.sum())} point(s) map to the line at infinity")
    return hom[:, :2] / hom[:, 2:3]


def rectify_observations(observations, H: np.ndarray) -> list[Observation]:
    """Map observation pixel coordinates through the rectifying homography.

    Lens labels are preserved; only the pixel coordinates change.
    """
    obs = list(observations)
    if not obs:
        return []
    pixels = np.array([(o.px, o.py) for o in obs])
    mapped = apply_homography(pixels, H)
    return [Observation(o.pose_id, o.point_id, o.lens_i, o.lens_j,
                        float(x), float(y))
            for o, (x, y) in zip(obs, mapped)]


def warp_image(image: np.ndarray, H: np.ndarray,
               output_shape: tuple[int, int] | None = None) -> np.ndarray:
    """Resample a raster through the homography (for visual inspection only).

    Output pixel q samples the input at H^-1 q with bilinear interpolation.
    """
    img = np.asarray(image, dtype=float)
    shape = img.shape if output_shape is None else output_shape
    Hinv = np.linalg.inv(np.asarray(H, dtype=float))
    ys, xs = np.mgrid[0:shape[0], 0:shape[1]]
    src = apply_homography(np.column_stack([xs.ravel(), ys.ravel()]), Hinv)
    sampled = ndimage.map_coordinates(
        img, [src[:, 1].reshape(shape), src[:, 0].reshape(shape)],
        order=1, mode="constant", cval=0.0)
    return sampled.astype(image.dtype) if np.issubdtype(image.dtype, np.integer) \
        else sampled


# --- PGM (binary P5) rasters --------------------------------------------------

def write_pgm(path, image: np.ndarray) -> None:
    """Write an 8-bit or 16-bit single-channel raster as binary PGM (P5)."""
    img = np.asarray(image)
    if img.dtype == np.uint8:
        maxval, payload = 255, img.tobytes()
    elif img.dtype == np.uint16:
        maxval, payload = 65535, img.astype(">u2").tobytes()
    else:
        raise ValueError(f"PGM rasters must be uint8 or uint16, got {img.dtype}")
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + payload)


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM (P5) raster as uint8 or uint16."""
    with open(path, "rb") as fh:
        data = fh.read()
    m = re.match(rb"P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError(f"{path} is not a binary PGM file")
    width, height, maxval = (int(g) for g in m.groups())
    body = data[m.end():]
    if maxval < 256:
        img = np.frombuffer(body, dtype=np.uint8, count=width * height)
    elif maxval < 65536:
        img = np.frombuffer(body, dtype=">u2", count=width * height).astype(np.uint16)
    else:
        raise ValueError(f"unsupported PGM maxval {maxval}")
    return img.reshape(height, width).copy()
