"""EPnP: O(n) perspective-n-point with four virtual control points.

Each 3D point is written as a barycentric combination of four control
points. The camera-frame control points lie in the (near) null space of a
2n x 12 projection-constraint matrix; the combination coefficients ("betas")
are recovered in closed form from control-point distance constraints for the
1-, 2- and 3-dimensional null-space approximations, polished by Gauss-Newton,
and the lowest reprojection error wins.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# control-point pairs whose squared distances constrain the betas
_PAIRS = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
# index pairs (k, l), k <= l, of the 10 beta products, in column order of L
_PRODUCTS = ((0, 0), (0, 1), (1, 1), (0, 2), (1, 2), (2, 2), (0, 3), (1, 3), (2, 3), (3, 3))


class PnPError(ValueError):
    """Degenerate PnP configuration."""


@dataclass(frozen=True)
class PnPSolution:
    rotation: np.ndarray  # (3, 3), object -> camera
    translation: np.ndarray  # (3,)
    reprojection_error: float  # mean pixel distance
    case: int  # null-space dimension of the winning solution


def control_points(pw: np.ndarray) -> np.ndarray:
    """Centroid plus the three principal directions scaled by their spread."""
    c0 = pw.mean(axis=0)
    a = pw - c0
    evals, evecs = np.linalg.eigh(a.T @ a / len(pw))
    if evals[-1] <= 0 or evals[0] < 1e-12 * evals[-1]:
        raise PnPError("object points are coplanar or coincident")
    return np.vstack([c0, c0 + np.sqrt(evals)[None, :] * evecs.T])


def barycentric(pw: np.ndarray, cw: np.ndarray) -> np.ndarray:
    """(n, 4) alphas with pw = alphas @ cw and rows summing to 1."""
    c = np.vstack([cw.T, np.ones(4)])
    p = np.vstack([pw.T, np.ones(len(pw))])
    return np.linalg.solve(c, p).T


def _m_matrix(uv: np.ndarray, alphas: np.ndarray, k: np.ndarray) -> np.ndarray:
    fu, fv, uc, vc = k[0, 0], k[1, 1], k[0, 2], k[1, 2]
    n = len(uv)
    m = np.zeros((2 * n, 12))
    for j in range(4):
        a = alphas[:, j]
        m[0::2, 3 * j] = a * fu
        m[0::2, 3 * j + 2] = a * (uc - uv[:, 0])
        m[1::2, 3 * j + 1] = a * fv
        m[1::2, 3 * j + 2] = a * (vc - uv[:, 1])
    return m


def _l_matrix(v: np.ndarray) -> np.ndarray:
    """(6, 10) coefficients of the beta products in the squared pair distances."""
    vs = v.T.reshape(4, 4, 3)  # [null vector, control point, xyz]
    dv = np.stack([vs[:, a] - vs[:, b] for a, b in _PAIRS])  # (6, 4, 3)
    dots = np.einsum("pki,pli->pkl", dv, dv)
    cols = [dots[:, k, l] * (1.0 if k == l else 2.0) for k, l in _PRODUCTS]
    return np.stack(cols, axis=1)


def _pair_dist2(cw: np.ndarray) -> np.ndarray:
    return np.array([np.sum((cw[a] - cw[b]) ** 2) for a, b in _PAIRS])


def _betas_case1(l: np.ndarray, rho: np.ndarray) -> np.ndarray:
    # approximate with the first null vector paired with each of the others
    cols = [0, 1, 3, 6]  # b00 b01 b02 b03
    x = np.linalg.lstsq(l[:, cols], rho, rcond=None)[0]
    if x[0] < 0:
        x = -x
    b0 = np.sqrt(max(x[0], 0.0))
    if b0 == 0:
        return np.zeros(4)
    return np.array([b0, x[1] / b0, x[2] / b0, x[3] / b0])


def _betas_case2(l: np.ndarray, rho: np.ndarray) -> np.ndarray:
    x = np.linalg.lstsq(l[:, [0, 1, 2]], rho, rcond=None)[0]  # b00 b01 b11
    if x[0] < 0:
        x = -x
    b0 = np.sqrt(max(x[0], 0.0))
    b1 = np.sqrt(max(x[2], 0.0)) * (1.0 if x[1] >= 0 else -1.0)
    return np.array([b0, b1, 0.0, 0.0])


def _betas_case3(l: np.ndarray, rho: np.ndarray) -> np.ndarray:
    x = np.linalg.lstsq(l[:, [0, 1, 2, 3, 4]], rho, rcond=None)[0]  # b00 b01 b11 b02 b12
    if x[0] < 0:
        x = -x
    b0 = np.sqrt(max(x[0], 0.0))
    b1 = np.sqrt(max(x[2], 0.0)) * (1.0 if x[1] >= 0 else -1.0)
    b2 = x[3] / b0 if b0 > 0 else 0.0
    return np.array([b0, b1, b2, 0.0])


def _gauss_newton(l: np.ndarray, rho: np.ndarray, betas: np.ndarray, iters: int) -> np.ndarray:
    b = betas.astype(np.float64).copy()
    for _ in range(iters):
        prods = np.array([b[k] * b[q] for k, q in _PRODUCTS])
        r = l @ prods - rho
        dprod = np.zeros((10, 4))
        for c, (k, q) in enumerate(_PRODUCTS):
            dprod[c, k] += b[q]
            dprod[c, q] += b[k]
        j = l @ dprod
        step = np.linalg.lstsq(j, -r, rcond=None)[0]
        b = b + step
        if np.linalg.norm(step) <= 1e-15 * max(1.0, np.linalg.norm(b)):
            break
    return b


def rigid_fit(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rotation and translation with dst ~ src @ R.T + t."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    h = (dst - mu_d).T @ (src - mu_s)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(u @ vt)) or 1.0
    r = u @ np.diag([1.0, 1.0, d]) @ vt
    return r, mu_d - r @ mu_s


def project(pw: np.ndarray, r: np.ndarray, t: np.ndarray, k: np.ndarray) -> np.ndarray:
    pc = pw @ r.T + t
    uvw = pc @ k.T
    return uvw[:, :2] / uvw[:, 2:3]


def _solve_for_betas(v, betas, alphas, pw, uv, k):
    cc = (v @ betas).reshape(4, 3)
    pc = alphas @ cc
    if np.mean(pc[:, 2]) < 0:
        pc = -pc
    r, t = rigid_fit(pw, pc)
    err = float(np.mean(np.linalg.norm(project(pw, r, t, k) - uv, axis=1)))
    return r, t, err


def check_image_points(uv: np.ndarray) -> None:
    a = uv - uv.mean(axis=0)
    s = np.linalg.svd(a, compute_uv=False)
    if s[0] < 1e-9:
        raise PnPError("image points are coincident")
    if s[1] < 1e-6 * s[0]:
        raise PnPError("image points are collinear")


def solve_epnp(
    object_points: np.ndarray, image_points: np.ndarray, camera_matrix: np.ndarray, gn_iters: int = 10
) -> PnPSolution:
    pw = np.asarray(object_points, dtype=np.float64)
    uv = np.asarray(image_points, dtype=np.float64)
    k = np.asarray(camera_matrix, dtype=np.float64)
    if pw.ndim != 2 or pw.shape[1] != 3 or uv.shape != (len(pw), 2):
        raise PnPError(f"mismatched correspondences {pw.shape} vs {uv.shape}")
    if len(pw) < 4:
        raise PnPError("EPnP needs at least 4 correspondences")
    check_image_points(uv)

    cw = control_points(pw)
    alphas = barycentric(pw, cw)
    m = _m_matrix(uv, alphas, k)
    _, evecs = np.linalg.eigh(m.T @ m)
    v = evecs[:, :4]  # ascending eigenvalues: v[:, 0] spans the best 1-D null space
    l = _l_matrix(v)
    rho = _pair_dist2(cw)

    best = None
    for case, solver in ((1, _betas_case1), (2, _betas_case2), (3, _betas_case3)):
        betas = solver(l, rho)
        if gn_iters:
            betas = _gauss_newton(l, rho, betas, gn_iters)
        if not np.all(np.isfinite(betas)) or not np.any(betas):
            continue
        r, t, err = _solve_for_betas(v, betas, alphas, pw, uv, k)
        if best is None or err < best.reprojection_error:
            best = PnPSolution(r, t, err, case)
    if best is None:
        raise PnPError("EPnP failed to produce a finite solution")
    return best
