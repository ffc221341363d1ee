"""
Spectral analysis of Gaussian covariances.

Symmetric eigendecomposition (closed form for 2×2, cyclic Jacobi for 3×3)
and the metrics built on it: spectral radius ρ, condition number κ, spectral
entropy H, eccentricity, the H(κ) closed forms and the Fourier closure check.
All functions are pure.
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from spectral_splat.utils.errors import (
    DegenerateError,
    DomainError,
    GridTooSmallError,
    NonFiniteError,
    ZeroTraceError,
)
from spectral_splat.utils.logger import get_logger

logger = get_logger(__name__)

# A SymMat is a float64 ndarray of shape (2, 2) or (3, 3), symmetric by construction.
SymMat = np.ndarray

EPS_PSD = 1e-9
KAPPA_INF = math.inf
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 50
LN2 = math.log(2.0)
LN3 = math.log(3.0)


@dataclass(frozen=True)
class Spectrum:
    """Descending eigenvalues with an orthonormal basis (columns are eigenvectors)."""

    eigenvalues: np.ndarray
    basis: np.ndarray
    psd: bool = True

    @property
    def dim(self) -> int:
        return int(self.eigenvalues.shape[0])

    def reconstruct(self) -> SymMat:
        return self.basis @ np.diag(self.eigenvalues) @ self.basis.T


@dataclass(frozen=True)
class SpectralSummary:
    radius: float
    condition_number: float
    entropy: float
    eccentricity: Optional[float] = None


# ─── SymMat construction ────────────────────────────────────────────────────

def sym_mat(entries: Union[Sequence[float], np.ndarray]) -> SymMat:
    """
    Build a SymMat from a full matrix or from its upper-triangle entries.

    Args:
        entries: (dim, dim) array, or 3 values (a, b, d) for 2×2, or 6 values
                 (a, b, c, d, e, f) row-major upper triangle for 3×3.

    Returns:
        Symmetric float64 matrix.
    """
    arr = np.asarray(entries, dtype=np.float64)
    if arr.ndim == 1:
        if arr.shape[0] == 3:
            a, b, d = arr
            arr = np.array([[a, b], [b, d]])
        elif arr.shape[0] == 6:
            a, b, c, d, e, f = arr
            arr = np.array([[a, b, c], [b, d, e], [c, e, f]])
        else:
            raise DomainError(f"Expected 3 or 6 upper-triangle entries, got {arr.shape[0]}")
    return _check_symmetric(arr)


def _check_symmetric(m: np.ndarray) -> SymMat:
    m = np.asarray(m, dtype=np.float64)
    if m.shape not in ((2, 2), (3, 3)):
        raise DomainError(f"SymMat must be 2×2 or 3×3, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFiniteError("Matrix has NaN/Inf entries")
    scale = max(1.0, float(np.max(np.abs(m))))
    if np.max(np.abs(m - m.T)) > 1e-12 * scale:
        raise DomainError("Matrix is not symmetric")
    return 0.5 * (m + m.T)


def trace(m: SymMat) -> float:
    return float(np.trace(m))


def determinant(m: SymMat) -> float:
    m = np.asarray(m, dtype=np.float64)
    if m.shape == (2, 2):
        return float(m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0])
    return float(np.linalg.det(m))


# ─── Eigensolvers ───────────────────────────────────────────────────────────

def _eig_sym2(m: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a, b, c = float(m[0, 0]), float(m[0, 1]), float(m[1, 1])
    mid = 0.5 * (a + c)
    rad = math.hypot(0.5 * (a - c), b)
    l1, l2 = mid + rad, mid - rad

    if b == 0.0:
        v1 = (1.0, 0.0) if a >= c else (0.0, 1.0)
    else:
        # pick the better conditioned of the two null-space candidates of (m - l1 I)
        u = (l1 - c, b)
        w = (b, l1 - a)
        cand = u if math.hypot(*u) >= math.hypot(*w) else w
        n = math.hypot(*cand)
        v1 = (cand[0] / n, cand[1] / n)
    basis = np.array([[v1[0], -v1[1]], [v1[1], v1[0]]])
    return np.array([l1, l2]), basis


def _eig_sym3_jacobi(m: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a = [[float(m[i][j]) for j in range(3)] for i in range(3)]
    v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    norm = math.sqrt(sum(a[i][j] ** 2 for i in range(3) for j in range(3)))
    tol = JACOBI_TOL * norm

    for _ in range(JACOBI_MAX_SWEEPS):
        off = math.sqrt(2.0 * (a[0][1] ** 2 + a[0][2] ** 2 + a[1][2] ** 2))
        if off <= tol:
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = a[p][q]
            if apq == 0.0:
                continue
            theta = (a[q][q] - a[p][p]) / (2.0 * apq)
            if abs(theta) > 1e150:
                t = 1.0 / (2.0 * theta)
            else:
                t = (1.0 if theta >= 0.0 else -1.0) / (abs(theta) + math.sqrt(theta * theta + 1.0))
            c = 1.0 / math.sqrt(t * t + 1.0)
            s = t * c

            a[p][p] -= t * apq
            a[q][q] += t * apq
            a[p][q] = a[q][p] = 0.0
            r = 3 - p - q
            arp, arq = a[r][p], a[r][q]
            a[r][p] = a[p][r] = c * arp - s * arq
            a[r][q] = a[q][r] = s * arp + c * arq
            for i in range(3):
                vip, viq = v[i][p], v[i][q]
                v[i][p] = c * vip - s * viq
                v[i][q] = s * vip + c * viq
    else:
        logger.warning(f"Jacobi eigensolver hit {JACOBI_MAX_SWEEPS} sweeps without converging")

    return np.array([a[0][0], a[1][1], a[2][2]]), np.array(v)


def eig_sym(m: SymMat) -> Spectrum:
    """
    Eigendecompose a symmetric 2×2 or 3×3 matrix.

    Returns:
        Spectrum with eigenvalues sorted descending. `psd` is False when the
        smallest eigenvalue falls below -EPS_PSD relative to the matrix scale.

    Raises:
        NonFiniteError: if any entry is NaN/Inf.
    """
    m = _check_symmetric(m)
    if m.shape == (2, 2):
        vals, vecs = _eig_sym2(m)
    else:
        vals, vecs = _eig_sym3_jacobi(m)

    order = np.argsort(-vals, kind="stable")
    vals = vals[order]
    vecs = vecs[:, order]

    scale = max(float(np.max(np.abs(vals))), np.finfo(np.float64).tiny)
    psd = bool(vals[-1] >= -EPS_PSD * scale)
    if not psd:
        logger.warning(f"eig_sym: matrix is not PSD (min eigenvalue {vals[-1]:.3e})")
    return Spectrum(eigenvalues=vals, basis=vecs, psd=psd)


def _as_spectrum(x: Union[Spectrum, SymMat]) -> Spectrum:
    return x if isinstance(x, Spectrum) else eig_sym(x)


def _clamped(sp: Spectrum) -> np.ndarray:
    """Eigenvalues with float-noise negatives in [-EPS_PSD·tr, 0) set to 0."""
    lam = sp.eigenvalues.copy()
    tr = float(np.sum(lam))
    floor = -EPS_PSD * max(abs(tr), np.finfo(np.float64).tiny)
    if np.any(lam < floor):
        raise DomainError(f"Spectrum is not positive semi-definite (min eigenvalue {lam.min():.3e})")
    lam[lam < 0.0] = 0.0
    return lam


# ─── Metrics ────────────────────────────────────────────────────────────────

def spectral_radius(sp: Union[Spectrum, SymMat]) -> float:
    sp = _as_spectrum(sp)
    return float(np.max(np.abs(sp.eigenvalues)))


def condition_number(sp: Union[Spectrum, SymMat], strict: bool = False) -> float:
    """
    κ = λ_max / λ_min.

    Returns KAPPA_INF when λ_min is zero after clamping, or raises
    DegenerateError instead when `strict` is set.
    """
    lam = _clamped(_as_spectrum(sp))
    lo = float(lam[-1])
    if lo <= 0.0:
        if strict:
            raise DegenerateError("Condition number undefined: smallest eigenvalue is 0")
        return KAPPA_INF
    return float(lam[0]) / lo


def spectral_entropy(sp: Union[Spectrum, SymMat]) -> float:
    """Shannon entropy of the trace-normalized eigenvalues, with 0·ln 0 := 0."""
    lam = _clamped(_as_spectrum(sp))
    tr = float(np.sum(lam))
    if tr <= 0.0:
        raise ZeroTraceError("Spectral entropy needs a positive trace")
    t = lam / tr
    nz = t[t > 0.0]
    return float(-np.sum(nz * np.log(nz)))


def entropy_from_kappa(dim: int, kappa: float, lambda_mid_ratio: Optional[float] = None) -> float:
    """
    Closed-form H as a function of κ.

    2D: H = ln(κ+1) − κ ln κ / (κ+1).
    3D: with λ = λ_mid / λ_min, H = ln(κ+λ+1) − (κ ln κ + λ ln λ) / (κ+λ+1).
    """
    if not math.isfinite(kappa) or kappa < 1.0:
        raise DomainError(f"κ must be finite and >= 1, got {kappa}")
    if dim == 2:
        return math.log(kappa + 1.0) - kappa * math.log(kappa) / (kappa + 1.0)
    if dim == 3:
        lam = 1.0 if lambda_mid_ratio is None else float(lambda_mid_ratio)
        if not 1.0 <= lam <= kappa:
            raise DomainError(f"λ_mid_ratio must lie in [1, κ], got {lam}")
        total = kappa + lam + 1.0
        return math.log(total) - (kappa * math.log(kappa) + lam * math.log(lam)) / total
    raise DomainError(f"dim must be 2 or 3, got {dim}")


def eccentricity(kappa: float) -> float:
    """Eccentricity of the ellipse with axis-length ratio √κ: e = √(1 − 1/κ)."""
    if math.isnan(kappa) or kappa < 1.0:
        raise DomainError(f"κ must be >= 1, got {kappa}")
    if math.isinf(kappa):
        return 1.0
    return math.sqrt(1.0 - 1.0 / kappa)


def summarize(m: Union[Spectrum, SymMat]) -> SpectralSummary:
    sp = _as_spectrum(m)
    kappa = condition_number(sp)
    return SpectralSummary(
        radius=spectral_radius(sp),
        condition_number=kappa,
        entropy=spectral_entropy(sp),
        eccentricity=eccentricity(kappa) if sp.dim == 2 else None,
    )


# ─── Batch helpers (renderer / scene statistics) ────────────────────────────

def eigvals_sym2(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized descending eigenvalues of [[a, b], [b, c]]."""
    mid = 0.5 * (a + c)
    rad = np.hypot(0.5 * (a - c), b)
    return mid + rad, mid - rad


def entropy_from_eigenvalues(lam: np.ndarray) -> np.ndarray:
    """Vectorized spectral entropy over the last axis (eigenvalues ≥ 0)."""
    lam = np.clip(np.asarray(lam, dtype=np.float64), 0.0, None)
    tr = np.sum(lam, axis=-1, keepdims=True)
    t = np.divide(lam, tr, out=np.zeros_like(lam), where=tr > 0)
    logs = np.log(t, out=np.zeros_like(t), where=t > 0)
    return -np.sum(t * logs, axis=-1)


def kappa_from_eigenvalues(lam: np.ndarray) -> np.ndarray:
    """Vectorized κ over the last axis; +inf where the smallest eigenvalue is 0."""
    lam = np.clip(np.asarray(lam, dtype=np.float64), 0.0, None)
    hi = np.max(lam, axis=-1)
    lo = np.min(lam, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(lo > 0, hi / np.where(lo > 0, lo, 1.0), np.inf)


# ─── Fourier closure ────────────────────────────────────────────────────────

def frequency_quadratic_form(cov: SymMat) -> SymMat:
    """Quadratic form of the transform exp(−2π² ωᵀΣω); scales with Σ."""
    return 2.0 * math.pi ** 2 * _check_symmetric(cov)


def fourier_closure_check(cov: SymMat, grid_size: int, extent: float) -> float:
    """
    Compare the DFT of a sampled unit-mass 2D Gaussian with exp(−2π² ωᵀΣω).

    Args:
        cov: 2×2 SPD covariance.
        grid_size: samples per axis.
        extent: half-width of the square sampling window.

    Returns:
        Max absolute deviation between |DFT| and the closed form over all bins.

    Raises:
        GridTooSmallError: if the Gaussian mass on the window boundary exceeds 1e-8.
    """
    cov = _check_symmetric(cov)
    if cov.shape != (2, 2):
        raise DomainError("fourier_closure_check expects a 2×2 covariance")
    det = determinant(cov)
    if det <= 0.0:
        raise DegenerateError("Covariance must be positive definite")

    n = int(grid_size)
    dx = 2.0 * extent / n
    coords = (np.arange(n) - n // 2) * dx
    x, y = np.meshgrid(coords, coords, indexing="ij")
    inv = np.linalg.inv(cov)
    q = inv[0, 0] * x * x + 2.0 * inv[0, 1] * x * y + inv[1, 1] * y * y
    g = np.exp(-0.5 * q) / (2.0 * math.pi * math.sqrt(det))

    ring = np.concatenate([g[0, :], g[-1, :], g[1:-1, 0], g[1:-1, -1]])
    boundary_mass = float(np.sum(ring)) * dx * dx
    if boundary_mass > 1e-8:
        raise GridTooSmallError(
            f"Boundary mass {boundary_mass:.3e} > 1e-8; enlarge extent beyond {extent}"
        )

    spectrum = np.abs(np.fft.fft2(np.fft.ifftshift(g))) * dx * dx
    freqs = np.fft.fftfreq(n, d=dx)
    wx, wy = np.meshgrid(freqs, freqs, indexing="ij")
    closed = np.exp(
        -2.0 * math.pi ** 2 * (cov[0, 0] * wx * wx + 2.0 * cov[0, 1] * wx * wy + cov[1, 1] * wy * wy)
    )
    return float(np.max(np.abs(spectrum - closed)))
