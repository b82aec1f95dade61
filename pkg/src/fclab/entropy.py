"""Entropy-number calculus, Gevrey norms, decay-law fitting and the compression-bound optimizer.

Entropy numbers of diagonal operators are reported as constant-factor bands,
never exact values: the laws being verified are asymptotic, so band-level
verification is the honest contract.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize
import scipy.special

from .lattice import GridField, RegionMask

# certified two-sided constant for the volumetric diagonal-operator formula
ENTROPY_BAND_FACTOR = 16.0


@dataclass(frozen=True)
class DiagonalSeqOp:
    """Diagonal operator between Hilbert sequence spaces, given by its singular values."""

    sigmas: np.ndarray
    source_tag: str = "h1"
    target_tag: str = "l2"

    def __post_init__(self):
        s = np.asarray(self.sigmas, dtype=float)
        if s.ndim != 1 or s.size == 0:
            raise ValueError("sigmas must be a nonempty 1d sequence")
        if np.any(s <= 0):
            raise ValueError("sigmas must be positive")
        if np.any(np.diff(s) > 1e-14 * s[0]):
            raise ValueError("sigmas must be nonincreasing")
        object.__setattr__(self, "sigmas", s)

    @property
    def n_trunc(self) -> int:
        return self.sigmas.size


def diag_entropy_numbers(op: DiagonalSeqOp, k_max: int) -> np.ndarray:
    """Entropy-number estimates e_k, k = 1..k_max, via the volumetric formula.

    e_k = sup_m 2^{-(k-1)/m} (sigma_1 ... sigma_m)^{1/m}, exact up to the
    absolute factor ENTROPY_BAND_FACTOR on either side.
    """
    if k_max > op.n_trunc:
        raise ValueError(f"k_max={k_max} exceeds truncation length {op.n_trunc}")
    logs = np.log(op.sigmas)
    m = np.arange(1, op.n_trunc + 1)
    geo = np.cumsum(logs) / m                      # log geometric means
    k = np.arange(1, k_max + 1)
    expo = -(k[:, None] - 1) * np.log(2.0) / m[None, :] + geo[None, :]
    return np.exp(expo.max(axis=1))


def entropy_band(e_values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Certified lower/upper band around the volumetric estimates."""
    e = np.asarray(e_values, dtype=float)
    return e / ENTROPY_BAND_FACTOR, e * ENTROPY_BAND_FACTOR


def exponent_convert(mu: float, direction: str = "forward") -> float:
    """Exchange singular-value and entropy-number stretch exponents.

    forward: mu -> mu/(1+mu);  inverse: nu -> nu/(1-nu) for nu in (0,1).
    """
    if mu <= 0:
        raise ValueError(f"exponent must be positive, got {mu}")
    if direction == "forward":
        return mu / (1.0 + mu)
    if direction == "inverse":
        if mu >= 1.0:
            raise ValueError(f"inverse conversion requires nu < 1, got {mu}")
        return mu / (1.0 - mu)
    raise ValueError(f"unknown direction '{direction}'")


@dataclass(frozen=True)
class GevreyParams:
    """Weights of the weighted-H^ell Gevrey norm: sigma >= 1, rho > 0, truncation order."""

    sigma: float
    rho: float
    ell_max: int = 24

    def __post_init__(self):
        if self.sigma < 1.0:
            raise ValueError(f"sigma must be >= 1, got {self.sigma}")
        if self.rho <= 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if self.ell_max < 4:
            raise ValueError(f"ell_max must be >= 4, got {self.ell_max}")


@dataclass(frozen=True)
class GevreyNormResult:
    value: float
    tail_ratio: float
    converged: bool


def gevrey_norm(u: GridField, params: GevreyParams, tail_tol: float = 1e-3) -> GevreyNormResult:
    """Truncated weighted sum of squared H^ell norms, with a truncation diagnostic.

    The term weights are e^{-2 ell rho} e^{-2 sigma ell log(ell+1)} and the
    H^ell norms use the multiplier (1+|xi|^2)^{ell/2} on the (windowed) field.
    A last-term/total ratio above tail_tol triggers a warning to increase
    ell_max or rho.
    """
    lat = u.lattice
    uh2 = np.abs(np.fft.fftn(u.values)) ** 2 * lat.cell_volume / lat.num_nodes
    log_w = np.log1p(lat.freq_norm_sq)             # log(1+|xi|^2)
    mask = uh2 > 0
    log_uh2 = np.log(uh2[mask])
    log_w = log_w[mask]
    log_terms = np.empty(params.ell_max + 1)
    for ell in range(params.ell_max + 1):
        log_hnorm2 = scipy.special.logsumexp(ell * log_w + log_uh2)
        log_terms[ell] = -2.0 * ell * params.rho - 2.0 * params.sigma * ell * np.log(ell + 1.0) + log_hnorm2
    log_total2 = scipy.special.logsumexp(log_terms)
    value = float(np.exp(0.5 * log_total2))
    tail_ratio = float(np.exp(log_terms[-1] - log_total2))
    converged = tail_ratio <= tail_tol
    if not converged:
        warnings.warn(
            f"Gevrey norm truncation diagnostic {tail_ratio:.2e} > {tail_tol:.0e}: increase ell_max or rho",
            stacklevel=2,
        )
    return GevreyNormResult(value=value, tail_ratio=tail_ratio, converged=converged)


@dataclass(frozen=True)
class DecayFit:
    """Fitted decay law: stretched-exp C exp(-c k^mu) or power C k^{-alpha}."""

    model: str
    params: dict
    k_range: tuple
    residual: float
    degenerate: bool = False

    def __post_init__(self):
        if self.model not in ("stretched-exp", "power"):
            raise ValueError(f"unknown model '{self.model}'")
        if self.residual < 0 or not all(np.isfinite(v) for v in self.params.values()):
            raise ValueError("fit has negative residual or non-finite parameters")

    def predict(self, ks: np.ndarray) -> np.ndarray:
        ks = np.asarray(ks, dtype=float)
        if self.model == "power":
            return self.params["C"] * ks ** (-self.params["alpha"])
        return self.params["C"] * np.exp(-self.params["c"] * ks ** self.params["mu"])


def _log_residual(logv: np.ndarray, logfit: np.ndarray) -> float:
    """Relative RMS misfit in the log domain (normalized by the centered signal)."""
    spread = float(np.sqrt(np.mean((logv - logv.mean()) ** 2)))
    rms = float(np.sqrt(np.mean((logv - logfit) ** 2)))
    if spread == 0.0:
        return np.inf if rms > 0 else 0.0
    return rms / spread


def _window(n: int, drop_head: float, drop_tail: float) -> slice:
    lo = int(np.floor(n * drop_head))
    hi = n - int(np.floor(n * drop_tail))
    if hi - lo < 2:
        lo, hi = 0, n
    return slice(lo, hi)


def fit_decay(
    values,
    model: str,
    ks=None,
    drop_head: float = 0.10,
    drop_tail: float = 0.05,
    mu_bounds: tuple = (0.02, 2.0),
    fixed_mu: float | None = None,
) -> DecayFit:
    """Least-squares fit of a decay law in the log domain.

    For the stretched-exp model the exponent mu is found by golden-section
    search with a linear subfit for (log C, c); pass fixed_mu to pin it.  The
    first drop_head and last drop_tail index fractions are excluded to avoid
    pre-asymptotic contamination.
    """
    v = np.asarray(values, dtype=float)
    if v.size < 8:
        raise ValueError(f"need at least 8 points to fit, got {v.size}")
    if np.any(v <= 0):
        raise ValueError("values must be positive for a log-domain fit")
    k_all = np.arange(1, v.size + 1, dtype=float) if ks is None else np.asarray(ks, dtype=float)
    if k_all.shape != v.shape:
        raise ValueError("ks and values must have equal length")
    sl = _window(v.size, drop_head, drop_tail)
    k, logv = k_all[sl], np.log(v[sl])
    if np.allclose(logv, logv[0]):
        raise ValueError("degenerate input: values have zero variance in the fit window")

    if model == "power":
        A = np.column_stack([np.ones_like(k), -np.log(k)])
        coef, *_ = np.linalg.lstsq(A, logv, rcond=None)
        logfit = A @ coef
        return DecayFit(
            model="power",
            params={"C": float(np.exp(coef[0])), "alpha": float(coef[1])},
            k_range=(int(k[0]), int(k[-1])),
            residual=_log_residual(logv, logfit),
        )

    if model != "stretched-exp":
        raise ValueError(f"unknown model '{model}'")

    def subfit(mu):
        A = np.column_stack([np.ones_like(k), -(k ** mu)])
        coef, *_ = np.linalg.lstsq(A, logv, rcond=None)
        return coef, float(np.sum((A @ coef - logv) ** 2))

    if fixed_mu is not None:
        mu_opt = float(fixed_mu)
    else:
        res = scipy.optimize.minimize_scalar(
            lambda mu: subfit(mu)[1], bounds=mu_bounds, method="bounded",
            options={"xatol": 1e-6},
        )
        mu_opt = float(res.x)
    coef, _ = subfit(mu_opt)
    A = np.column_stack([np.ones_like(k), -(k ** mu_opt)])
    return DecayFit(
        model="stretched-exp",
        params={"C": float(np.exp(coef[0])), "c": float(coef[1]), "mu": mu_opt},
        k_range=(int(k[0]), int(k[-1])),
        residual=_log_residual(logv, A @ coef),
    )


def iterated_compression_bound(C: float, d: float, n: int, k: int) -> tuple[int, float]:
    """Optimize the iterated-compression singular-value bound over the split count N.

    The bound C (C (2N/d) (k/N)^{-1/(n+1)})^N is evaluated in log space over
    integer N and the minimizing (N, bound) pair is returned.  A bound >= 1
    for every admissible N (tiny k) is reported, not an error.
    """
    if C <= 0 or d <= 0 or n < 1:
        raise ValueError("C, d must be positive and n >= 1")
    if k < n + 2:
        raise ValueError(f"k must be >= n+2, got {k}")
    n_cap = max(64, int(16 * k ** (1.0 / (n + 2)))) + 1
    Ns = np.arange(1, min(n_cap, k) + 1, dtype=float)
    log_inner = np.log(C) + np.log(2.0 * Ns / d) - (np.log(k) - np.log(Ns)) / (n + 1.0)
    log_bound = np.log(C) + Ns * log_inner
    i = int(np.argmin(log_bound))
    return int(Ns[i]), float(np.exp(log_bound[i]))


def compression_bound_sweep(C: float, d: float, n: int, ks) -> dict:
    """Evaluate the optimized bound over a k sweep and fit its stretch exponent.

    Returns the per-k rows plus a stretched-exp fit of bound(k); the expected
    exponent is 1/(n+2).
    """
    rows = []
    for k in ks:
        N_opt, bound = iterated_compression_bound(C, d, n, int(k))
        rows.append({"k": int(k), "N_opt": N_opt, "bound": bound,
                     "N_over_scale": N_opt / k ** (1.0 / (n + 2))})
    bounds = np.array([r["bound"] for r in rows])
    fit = fit_decay(bounds, "stretched-exp", ks=np.asarray(ks, dtype=float),
                    drop_head=0.0, drop_tail=0.0)
    return {"rows": rows, "fit": fit, "target_mu": 1.0 / (n + 2)}
