"""Closed-form initialization and nonlinear refinement of the TPP intrinsics.

Linear stage: decoded rays of each pose constrain a 4x3 plane-to-space
homography; the rotation-column orthogonality of at least three homographies
pins the six distinct entries of the inverse-Gram form Q of the plane
transform, whose entries invert in closed form to the transform parameters;
extrinsics then follow column-by-column.  The transform parameters are mapped
through the decode setting to the scene-side camera parameters.

Refinement: damped least squares on the re-projection error over intrinsics,
two-plane distortion and all poses, with the analytic Jacobian from the
projection module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (BehindPlane, DegenerateBoard, DivergedOptimization,
                     IllConditioned, InsufficientData, InsufficientPoses,
                     MissingReference, NegativeDiscriminant, NonFiniteResidual,
                     ReflectionDetected)
from .projection import (DistortionParams, Observation, Pose, ProjectionBatch,
                         observation_batch, project_pixels, residuals)
from .rotation import nearest_rotation, rodrigues_vector
from .tpp import TppParams, decode_virtual_rays, projective_matrix, rays_to_array

_HOMOGRAPHY_RANK_TOL = 1e-8
_Q_COLLAPSE_RATIO = 0.05
_MIN_BOARD_POINTS = 6

# damped least squares schedule
_LM_DAMPING_INIT = 1e-3          # times trace of the scaled approximate Hessian
_LM_UP, _LM_DOWN = 10.0, 0.1
_LM_MAX_REJECTED = 20
_GRAD_TOL = 1e-10                # relative to the initial gradient inf-norm
_STEP_TOL = 1e-12


@dataclass(frozen=True, slots=True)
class QSolution:
    """Distinct entries of the inverse-Gram form, with its recovered scale."""

    q11: float
    q13: float
    q23: float
    q33: float
    q34: float
    q44: float
    lam: float

    def __post_init__(self) -> None:
        if self.q11 <= 0 or self.q44 <= 0:
            raise NegativeDiscriminant(
                f"diagonal entries must be positive, got q11={self.q11}, q44={self.q44}")
        if self.lam <= 0:
            raise NegativeDiscriminant(f"recovered scale is not positive: {self.lam}")


@dataclass
class CalibrationResult:
    """Calibrated scene-side camera, distortion, per-pose extrinsics, residuals."""

    tpp: TppParams
    dist: DistortionParams
    poses: list[Pose]
    rms: float
    residual_histogram: list[tuple[float, int]] = field(default_factory=list)


@dataclass(frozen=True)
class RefineOptions:
    """Knobs for the nonlinear stage.

    ``optimize_xy_distortion`` frees (s1, s2); because every pixel sits close
    to its micro-image center, the x-y and u-v radial families are nearly
    collinear on raw-image data, and freezing the x-y pair at zero makes the
    u-v pair identifiable.
    """

    optimize_distortion_centers: bool = False
    optimize_xy_distortion: bool = True
    max_iterations: int = 200
    sensor_size: tuple[int, int] | None = None    # (width, height) px


@dataclass
class CalibrationOutput:
    """Linear and refined results plus the iteration trace of the refinement."""

    linear: CalibrationResult
    refined: CalibrationResult
    setting: TppParams
    trace: list[dict] = field(default_factory=list)


def _normalize_board(points: np.ndarray):
    mean = points.mean(axis=0)
    rms = np.sqrt(np.mean(np.sum((points - mean) ** 2, axis=1)))
    s = 1.0 if rms == 0.0 else math.sqrt(2.0) / rms
    T = np.array([[s, 0.0, -s * mean[0]], [0.0, s, -s * mean[1]], [0.0, 0.0, 1.0]])
    return (points - mean) * s, T


def estimate_homography(rays_per_point) -> np.ndarray:
    """Estimate the 4x3 homography from board points to decoded-ray space.

    ``rays_per_point`` pairs each board (X, Y) with the decoded rays of its
    projections in one raw image.  Board and ray coordinates are both
    normalized before the null-space solve and the result de-normalized,
    Frobenius-normalized, and sign-fixed so H[3, 2] > 0.
    """
    if len(rays_per_point) < _MIN_BOARD_POINTS:
        raise InsufficientData(
            f"need at least {_MIN_BOARD_POINTS} board points, got {len(rays_per_point)}")
    board = np.asarray([xy for xy, _ in rays_per_point], dtype=float)
    ray_arrays = []
    for xy, rays in rays_per_point:
        arr = rays if isinstance(rays, np.ndarray) else rays_to_array(rays)
        if arr.shape[0] < 2:
            raise InsufficientData(
                f"board point {tuple(xy)} has fewer than 2 decoded rays")
        ray_arrays.append(arr)

    board_n, Tb = _normalize_board(board)

    # normalize ray coordinates: common planar shift and a global scale keep
    # the incidence rows balanced; both are exact similarities of the decoded
    # 3D frame and are undone on H afterwards.
    planar = np.vstack([np.vstack([a[:, 0:2], a[:, 2:4]]) for a in ray_arrays])
    shift = -planar.mean(axis=0)
    rms = np.sqrt(np.mean(np.sum((planar + shift) ** 2, axis=1)))
    scale = 1.0 if rms == 0.0 else math.sqrt(2.0) / rms
    Td = np.array([[scale, 0.0, 0.0, scale * shift[0]],
                   [0.0, scale, 0.0, scale * shift[1]],
                   [0.0, 0.0, scale, 0.0],
                   [0.0, 0.0, 0.0, 1.0]])

    blocks = []
    for (bx, by), arr in zip(board_n, ray_arrays):
        x = scale * (arr[:, 0] + shift[0])
        y = scale * (arr[:, 1] + shift[1])
        u = scale * (arr[:, 2] + shift[0])
        v = scale * (arr[:, 3] + shift[1])
        f = scale * arr[:, 4]
        m = arr.shape[0]
        M = np.zeros((2 * m, 4))
        M[0::2, 0] = f
        M[0::2, 2] = x - u
        M[0::2, 3] = -f * x
        M[1::2, 1] = f
        M[1::2, 2] = y - v
        M[1::2, 3] = -f * y
        xb = np.array([bx, by, 1.0])
        blocks.append(np.einsum("rk,c->rkc", M, xb).reshape(2 * m, 12))
    A = np.vstack(blocks)

    col = np.linalg.norm(A, axis=0)
    col[col == 0.0] = 1.0
    _, s, Vt = np.linalg.svd(A / col, full_matrices=False)
    if s[-2] < _HOMOGRAPHY_RANK_TOL * s[0]:
        raise DegenerateBoard(
            "homography system is rank deficient (collinear board points?)")
    h = Vt[-1] / col
    H = np.linalg.inv(Td) @ h.reshape(4, 3) @ Tb
    H /= np.linalg.norm(H)
    if H[3, 2] < 0:
        H = -H
    return H


def _orthogonality_rows(H: np.ndarray) -> np.ndarray:
    """Two constraints per pose on the upper-block inverse-Gram entries.

    With rows 1-3 of H equal to K [r1 r2 t] (up to scale) for the upper
    triangular block K of the plane transform, orthogonality and equal norm
    of r1, r2 are linear in the four distinct entries (g11, g13, g23, g33)
    of the patterned symmetric form G = K^-T K^-1 (g22 = g11, g12 = 0).
    """
    h = H
    row_a = np.array([
        h[0, 0] * h[0, 1] + h[1, 0] * h[1, 1],
        h[0, 0] * h[2, 1] + h[0, 1] * h[2, 0],
        h[1, 0] * h[2, 1] + h[1, 1] * h[2, 0],
        h[2, 0] * h[2, 1],
    ])
    row_b = np.array([
        h[0, 0] ** 2 - h[0, 1] ** 2 + h[1, 0] ** 2 - h[1, 1] ** 2,
        2.0 * (h[0, 0] * h[2, 0] - h[0, 1] * h[2, 1]),
        2.0 * (h[1, 0] * h[2, 0] - h[1, 1] * h[2, 1]),
        h[2, 0] ** 2 - h[2, 1] ** 2,
    ])
    return np.stack([row_a, row_b])


def _q_entries(k_xy: float, k_uv: float, u_0: float, v_0: float, f: float,
               f_prime: float) -> np.ndarray:
    """Exact distinct entries of P^-T P^-1 for the plane transform."""
    q11 = 1.0 / (f**2 * k_xy**2 * k_uv**2)
    q13 = -u_0 * q11 / f_prime
    q23 = -v_0 * q11 / f_prime
    q33 = 1.0 / (f_prime**2 * k_xy**2) + (u_0**2 + v_0**2) * q11 / f_prime**2 \
        + (k_uv - k_xy)**2 * q11 / f_prime**2
    q34 = (k_uv - k_xy) * q11 * k_xy / f_prime
    q44 = 1.0 / (f**2 * k_uv**2)
    return np.array([q11, q13, q23, q33, q34, q44])


def solve_q(homographies, f_prime: float) -> QSolution:
    """Solve the six distinct entries of Q from at least three homographies.

    The naive six-unknown null-space solve is numerically rank deficient: the
    q34/q44 columns are weaker than the rest by the square of the small ratio
    (k_x - k_u)/(f' k_x), which buries them below double precision.  The
    same constraints are therefore solved by structured elimination:

    * rows 1-3 of each H are a planar-target pinhole problem whose patterned
      inverse-Gram form gives the parameter shape (a/c, u_0/f', v_0/f');
    * row 4 gives the ratio (k_x - k_u)/(f' k_x) directly, linearly in H;
    * the translation column's unit homogeneous component pins the absolute
      scale through f k_u = sigma (h43 - rho h33).

    The exact Q entries are rebuilt from the recovered parameters, normalized
    to a unit 6-vector with its scale in ``lam``.
    """
    hs = [np.asarray(H, dtype=float) for H in homographies]
    if len(hs) < 3:
        raise InsufficientPoses(f"need at least 3 poses, got {len(hs)}")

    A = np.vstack([_orthogonality_rows(H) for H in hs])
    rn = np.linalg.norm(A, axis=1)
    rn[rn == 0.0] = 1.0
    A = A / rn[:, None]
    col = np.linalg.norm(A, axis=0)
    col[col == 0.0] = 1.0
    _, s, Vt = np.linalg.svd(A / col, full_matrices=False)
    # near-parallel poses collapse the weakest genuine direction s[-2] by two
    # orders (healthy pose sets keep s[-2]/s[0] above ~0.1); the trailing
    # ratio s[-1]/s[-2] alone cannot discriminate, since it stays tiny on
    # noise-free degenerate data and rises on healthy data with unmodeled
    # distortion
    if s[-2] < _Q_COLLAPSE_RATIO * s[0]:
        raise IllConditioned(
            f"intrinsic constraints nearly rank deficient "
            f"(singular values {s[0]:.3e} .. {s[-2]:.3e}, {s[-1]:.3e})")
    g = Vt[-1] / col
    if g[0] < 0:
        g = -g
    g11, g13, g23, g33 = g
    if g11 <= 0:
        raise NegativeDiscriminant(f"leading inverse-Gram entry not positive: {g11}")
    shape_sq = g33 - (g13**2 + g23**2) / g11     # (a/c)^2 * g11-scale factor
    if shape_sq <= 0:
        raise NegativeDiscriminant(
            f"noise overwhelmed the linear stage (shape term {shape_sq})")
    a_over_c = math.sqrt(shape_sq / g11)
    b_over_c = -g13 / g11                        # u_0 / f'
    bp_over_c = -g23 / g11                       # v_0 / f'

    # fourth-row ratio rho = (k_x - k_u) / (f' k_x), linear least squares
    num = sum(H[3, 0] * H[2, 0] + H[3, 1] * H[2, 1] for H in hs)
    den = sum(H[2, 0]**2 + H[2, 1]**2 for H in hs)
    rho = num / den
    gamma = 1.0 - f_prime * rho                  # k_u / k_x
    if gamma <= 0:
        raise NegativeDiscriminant(f"u-v over x-y scale ratio not positive: {gamma}")

    # absolute scale: e/c = f k_u / (f' k_x) from the translation column
    Khat = np.array([[a_over_c, 0.0, b_over_c],
                     [0.0, a_over_c, bp_over_c],
                     [0.0, 0.0, 1.0]])
    Kinv = np.linalg.inv(Khat)
    ratios = []
    for H in hs:
        nu = np.linalg.norm(Kinv @ H[:3, 0])     # |c / sigma_H|
        w = H[3, 2] - rho * H[2, 2]              # e / sigma_H (sign of sigma_H)
        ratios.append(abs(w) / nu)
    e_over_c = float(np.mean(ratios))
    if e_over_c <= 0:
        raise NegativeDiscriminant("translation column gives no positive scale")

    f = f_prime * e_over_c / gamma
    k_x = a_over_c / e_over_c
    k_u = gamma * k_x
    u_0 = f_prime * b_over_c
    v_0 = f_prime * bp_over_c
    if k_x <= 0 or k_u <= 0 or f <= 0:
        raise NegativeDiscriminant(
            f"recovered scales not positive: k_xy={k_x}, k_uv={k_u}, f={f}")

    q = _q_entries(k_x, k_u, u_0, v_0, f, f_prime)
    lam = 1.0 / float(np.linalg.norm(q))
    q = q * lam
    return QSolution(*q, lam)


def closed_form_intrinsics(q: QSolution, f_prime: float
                           ) -> tuple[float, float, float, float, float]:
    """Invert Q's entries to (k_xy, k_uv, u_0, v_0, f) of the plane transform."""
    ratio = q.q44 / q.q11
    if ratio <= 0:
        raise NegativeDiscriminant(f"q44/q11 = {ratio} has no real square root")
    k_xy = math.sqrt(ratio)
    k_uv = k_xy * (1.0 + f_prime * q.q34 / q.q44)
    if k_uv <= 0:
        raise NegativeDiscriminant(f"recovered u-v scale is not positive: {k_uv}")
    u_0 = -f_prime * q.q13 / q.q11
    v_0 = -f_prime * q.q23 / q.q11
    arg = q.lam / q.q44
    if arg <= 0:
        raise NegativeDiscriminant(f"lambda/q44 = {arg} has no real square root")
    f = math.sqrt(arg) / k_uv
    if f <= 0:
        raise NegativeDiscriminant(f"recovered plane separation is not positive: {f}")
    return k_xy, k_uv, u_0, v_0, f


def extrinsics_from_homography(H: np.ndarray, P: np.ndarray) -> Pose:
    """Recover the board pose from its homography and the plane transform.

    The first two columns of P^-1 H are the rotation columns up to a common
    scale; the third carries the translation with a unit fourth component,
    which also fixes the overall sign.  The rotation is re-orthonormalized by
    polar projection before Rodrigues encoding.
    """
    Pinv = np.linalg.inv(np.asarray(P, dtype=float))
    C = Pinv @ np.asarray(H, dtype=float)
    if C[3, 2] < 0:          # homogeneous scale of the translation column
        C = -C
    n1 = np.linalg.norm(C[:3, 0])
    n2 = np.linalg.norm(C[:3, 1])
    if n1 == 0.0 or n2 == 0.0:
        raise DegenerateBoard("homography columns collapse under P^-1")
    r1 = C[:3, 0] / n1
    r2 = C[:3, 1] / n2
    R = nearest_rotation(np.column_stack([r1, r2, np.cross(r1, r2)]))
    if np.linalg.det(R) < 0:
        raise ReflectionDetected("recovered rotation is a reflection")
    t = C[:3, 2] / n1
    return Pose(rodrigues_vector(R), t)


def orthonormality_defect(H: np.ndarray, P: np.ndarray) -> float:
    """Frobenius distance of the raw recovered rotation from orthonormality."""
    C = np.linalg.inv(np.asarray(P, float)) @ np.asarray(H, float)
    n1 = np.linalg.norm(C[:3, 0])
    r1, r2 = C[:3, 0] / n1, C[:3, 1] / np.linalg.norm(C[:3, 1])
    R = np.column_stack([r1, r2, np.cross(r1, r2)])
    return float(np.linalg.norm(R.T @ R - np.eye(3)))


def scene_tpp_from_transform(k_xy: float, k_uv: float, u_0: float, v_0: float,
                             f: float, setting: TppParams) -> TppParams:
    """Map plane-transform parameters through the decode setting to the
    scene-side camera: scales become ratios and offsets difference-ratios."""
    return TppParams.isotropic(
        setting.k_x / k_xy, setting.k_u / k_uv,
        (setting.u_0 - u_0) / k_uv, (setting.v_0 - v_0) / k_uv,
        f, f_prime=setting.f_prime)


def residual_histogram(res: np.ndarray, bin_width: float = 0.1
                       ) -> list[tuple[float, int]]:
    """Histogram of per-observation residual magnitudes in fixed-width bins."""
    if len(res) == 0:
        return []
    mags = np.hypot(res[:, 0], res[:, 1])
    n_bins = max(1, int(math.ceil((float(mags.max()) + 1e-12) / bin_width)))
    counts, edges = np.histogram(mags, bins=n_bins, range=(0.0, n_bins * bin_width))
    return [(float(e), int(c)) for e, c in zip(edges[:-1], counts)]


def _group_rays(observations, board_points, setting: TppParams):
    """Per pose id, the (board XY, decoded ray array) pairs the DLT consumes."""
    by_pose: dict[int, dict[int, list[Observation]]] = {}
    for o in observations:
        by_pose.setdefault(o.pose_id, {}).setdefault(o.point_id, []).append(o)
    grouped = {}
    for pid in sorted(by_pose):
        entries = []
        for point_id in sorted(by_pose[pid]):
            group = by_pose[pid][point_id]
            if len(group) < 2:
                continue
            pixels = np.array([(o.px, o.py) for o in group])
            lenses = np.array([(o.lens_i, o.lens_j) for o in group], dtype=float)
            entries.append((np.asarray(board_points[point_id], dtype=float)[:2],
                            decode_virtual_rays(pixels, lenses, setting)))
        grouped[pid] = entries
    return grouped


def linear_calibrate(observations, board_points, setting: TppParams
                     ) -> tuple[CalibrationResult, tuple]:
    """Closed-form stage: homographies, Q, intrinsics, extrinsics, gauge map.

    Returns the scene-side result (zero distortion) and the raw transform
    parameters (k_xy, k_uv, u_0, v_0, f) for diagnostics.
    """
    if not isinstance(board_points, dict):
        board_points = dict(enumerate(np.atleast_2d(np.asarray(board_points, float))))
    grouped = _group_rays(observations, board_points, setting)
    if len(grouped) < 3:
        raise InsufficientPoses(f"need at least 3 poses, got {len(grouped)}")
    homographies = {pid: estimate_homography(entries)
                    for pid, entries in grouped.items()}
    q = solve_q(list(homographies.values()), setting.f_prime)
    k_xy, k_uv, u_0, v_0, f = closed_form_intrinsics(q, setting.f_prime)
    P = projective_matrix(TppParams.isotropic(k_xy, k_uv, u_0, v_0, f,
                                              f_prime=setting.f_prime))
    poses = [extrinsics_from_homography(homographies[pid], P)
             for pid in sorted(homographies)]
    tpp = scene_tpp_from_transform(k_xy, k_uv, u_0, v_0, f, setting)
    res, rms = residuals(observations, board_points, poses, tpp, DistortionParams())
    result = CalibrationResult(tpp, DistortionParams(), poses, rms,
                               residual_histogram(res))
    return result, (k_xy, k_uv, u_0, v_0, f)


# --- nonlinear refinement -------------------------------------------------------

def _default_centers(tpp: TppParams, observed: np.ndarray,
                     options: RefineOptions) -> tuple[float, float, float, float]:
    """Fixed distortion centers: image-center on x-y, the u-v offset on u-v."""
    if options.sensor_size is not None:
        cx, cy = options.sensor_size[0] / 2.0, options.sensor_size[1] / 2.0
    else:
        cx, cy = observed.mean(axis=0)
    return tpp.k_x * cx, tpp.k_x * cy, tpp.u_0, tpp.v_0


def _pack(tpp: TppParams, dist: DistortionParams, poses, centers: bool) -> np.ndarray:
    head = [tpp.k_x, tpp.k_u, tpp.u_0, tpp.v_0, tpp.f,
            dist.s1, dist.s2, dist.t1, dist.t2]
    if centers:
        head += [dist.x_c, dist.y_c, dist.u_c, dist.v_c]
    tail = []
    for p in poses:
        tail.extend(p.rotation)
        tail.extend(p.translation)
    return np.array(head + tail, dtype=float)


def _unpack(theta: np.ndarray, n_poses: int, centers: bool,
            fixed_centers, f_prime: float):
    k_xy, k_uv, u_0, v_0, f = theta[:5]
    s1, s2, t1, t2 = theta[5:9]
    base = 9
    if centers:
        x_c, y_c, u_c, v_c = theta[9:13]
        base = 13
    else:
        x_c, y_c, u_c, v_c = fixed_centers
    tpp = TppParams.isotropic(k_xy, k_uv, u_0, v_0, f, f_prime=f_prime)
    dist = DistortionParams(s1, s2, t1, t2, x_c, y_c, u_c, v_c)
    poses = []
    for p in range(n_poses):
        off = base + 6 * p
        poses.append(Pose(theta[off:off + 3], theta[off + 3:off + 6]))
    return tpp, dist, poses


def _parameter_scales(theta0: np.ndarray, tpp: TppParams, lenses: np.ndarray,
                      observed: np.ndarray, fixed_centers, n_poses: int,
                      centers: bool) -> np.ndarray:
    """Characteristic magnitudes for conditioning the scaled normal equations."""
    x_c, y_c, u_c, v_c = fixed_centers
    uu = tpp.k_u * lenses[:, 0] + tpp.u_0 - u_c
    vv = tpp.k_u * lenses[:, 1] + tpp.v_0 - v_c
    r_uv = max(1.0, float(np.sqrt(np.mean(uu**2 + vv**2))))
    xx = tpp.k_x * observed[:, 0] - x_c
    yy = tpp.k_x * observed[:, 1] - y_c
    r_xy = max(1.0, float(np.sqrt(np.mean(xx**2 + yy**2))))
    head = [abs(theta0[0]), abs(theta0[1]),
            max(abs(theta0[2]), theta0[1]), max(abs(theta0[3]), theta0[1]),
            abs(theta0[4]),
            r_xy**-2, r_xy**-4, r_uv**-2, r_uv**-4]
    if centers:
        head += [r_xy, r_xy, r_uv, r_uv]
    scales = np.ones_like(theta0)
    scales[:len(head)] = head
    base = len(head)
    for p in range(n_poses):
        off = base + 6 * p
        scales[off:off + 3] = 1.0
        t = theta0[off + 3:off + 6]
        scales[off + 3:off + 6] = np.maximum(np.abs(t), max(1.0, abs(theta0[4])))
    return scales


def refine(initial: CalibrationResult, observations, board_points,
           options: RefineOptions | None = None
           ) -> tuple[CalibrationResult, list[dict]]:
    """Minimize the re-projection error by damped least squares.

    Optimizes (k_xy, k_uv, u_0, v_0, f, s1, s2, t1, t2) plus every pose, and
    optionally the two distortion centers; the decode-plane separation stays
    a fixed convention.  Accepted steps never increase the cost; the damping
    is scaled up by 10 on rejection and down by 10 on acceptance.

    Returns the refined result and the per-iteration trace.
    """
    options = options or RefineOptions()
    if len(initial.poses) < 3:
        raise InsufficientPoses(f"refinement needs >= 3 poses, got {len(initial.poses)}")
    if isinstance(initial.poses, dict):
        pose_map = dict(initial.poses)
    else:
        seen_ids = sorted({o.pose_id for o in observations})
        if len(seen_ids) != len(initial.poses):
            raise MissingReference(
                f"{len(initial.poses)} initial poses for {len(seen_ids)} pose ids")
        pose_map = dict(zip(seen_ids, initial.poses))
    batch, observed, pose_ids, _ = observation_batch(observations, board_points,
                                                     pose_map)
    n_poses = len(pose_ids)
    centers = options.optimize_distortion_centers
    fixed_centers = _default_centers(initial.tpp, observed, options)
    dist0 = replace(initial.dist, x_c=fixed_centers[0], y_c=fixed_centers[1],
                    u_c=fixed_centers[2], v_c=fixed_centers[3])
    f_prime = initial.tpp.f_prime

    theta = _pack(initial.tpp, dist0, initial.poses, centers)
    scales = _parameter_scales(theta, initial.tpp, batch.lenses, observed,
                               fixed_centers, n_poses, centers)

    def evaluate(th: np.ndarray, with_jacobian: bool):
        """Residuals (flattened) and optionally the prediction Jacobian;
        None when the candidate parameters are not evaluable (rejected)."""
        try:
            tpp, dist, poses = _unpack(th, n_poses, centers, fixed_centers, f_prime)
            out = project_pixels(replace_batch_poses(batch, poses), tpp, dist,
                                 jacobian=with_jacobian, optimize_centers=centers)
        except (ValueError, BehindPlane):
            return None
        pred, J = out if with_jacobian else (out, None)
        r = (observed - pred).reshape(-1)
        if not np.all(np.isfinite(r)):
            raise NonFiniteResidual("residual evaluation produced NaN/Inf")
        return r, J

    active = np.ones(theta.size, dtype=bool)
    if not options.optimize_xy_distortion:
        active[5:7] = False              # freeze s1, s2 at their initial values

    first = evaluate(theta, True)
    if first is None:
        raise NonFiniteResidual("initial parameters are not evaluable")
    r, J = first
    if not np.all(np.isfinite(J)):
        raise NonFiniteResidual("Jacobian evaluation produced NaN/Inf")
    cost = float(r @ r)
    Js = (-J * scales[None, :])[:, active]   # residual Jacobian, scaled space
    g = Js.T @ r
    g0_inf = float(np.abs(g).max())
    A = Js.T @ Js
    damping = _LM_DAMPING_INIT * float(np.trace(A))

    trace: list[dict] = []
    rejected_run = 0
    n = int(active.sum())
    for iteration in range(options.max_iterations):
        if g0_inf > 0 and float(np.abs(g).max()) < _GRAD_TOL * g0_inf:
            break
        try:
            step = np.linalg.solve(A + damping * np.eye(n), -g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(A + damping * np.eye(n), -g, rcond=None)[0]
        step_norm = float(np.linalg.norm(step))
        if step_norm < _STEP_TOL:
            break
        delta = np.zeros(theta.size)
        delta[active] = step
        candidate = theta + delta * scales
        ev = evaluate(candidate, False)
        new_cost = float(ev[0] @ ev[0]) if ev is not None else math.inf
        accepted = new_cost < cost
        trace.append({"iteration": iteration, "cost": cost, "candidate_cost": new_cost,
                      "damping": damping, "accepted": accepted,
                      "grad_inf": float(np.abs(g).max())})
        if accepted:
            theta, cost = candidate, new_cost
            r, J = evaluate(theta, True)
            if not np.all(np.isfinite(J)):
                raise NonFiniteResidual("Jacobian evaluation produced NaN/Inf")
            Js = (-J * scales[None, :])[:, active]
            g = Js.T @ r
            A = Js.T @ Js
            damping *= _LM_DOWN
            rejected_run = 0
        else:
            damping *= _LM_UP
            rejected_run += 1
            if rejected_run >= _LM_MAX_REJECTED:
                # a long rejection streak after real progress means the cost
                # sits at its numerical floor; only a streak with no accepted
                # step at all signals a genuinely broken setup
                if any(t["accepted"] for t in trace):
                    break
                raise DivergedOptimization(
                    f"{rejected_run} consecutive rejected steps at cost {cost}")

    tpp, dist, poses = _unpack(theta, n_poses, centers, fixed_centers, f_prime)
    res = r.reshape(-1, 2)
    rms = float(np.sqrt(np.mean(res**2)))
    result = CalibrationResult(tpp, dist, poses, rms, residual_histogram(res))
    return result, trace


def replace_batch_poses(batch: ProjectionBatch, poses) -> ProjectionBatch:
    """New batch with the same points/lenses but fresh pose parameters."""
    return ProjectionBatch(batch.points_w, batch.lenses, batch.pose_index,
                           np.stack([p.rotation for p in poses]),
                           np.stack([p.translation for p in poses]))


def calibrate(observations, board_points, setting: TppParams,
              options: RefineOptions | None = None) -> CalibrationOutput:
    """Full pipeline: closed-form initialization then damped least squares."""
    linear, _ = linear_calibrate(observations, board_points, setting)
    refined, trace = refine(linear, observations, board_points, options)
    return CalibrationOutput(linear, refined, setting, trace)
