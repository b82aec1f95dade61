"""Exterior-value fractional Schrödinger solver, DtN assembly, and the comparison operator.

The DtN map is realized as the bilinear-form matrix (f, g) -> <Lambda_q f, g>
on node indicators of W: exactly the object whose operator norm
H^s(W) -> H^{-s}(W) the instability statements are about.  Solutions split as
u = f + w with w supported in Omega, so the whole forward map reduces to a
dense Schur complement of the multiplier matrix over Omega.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg

from .lattice import (GridField, LatticeSpec, RegionMask, SobolevGram,
                      build_gram, dual_norm, load_geometry, op_norm)
from .operators import MultiplierOp, frac_laplacian_fourier


class DirichletEigenvalueError(RuntimeError):
    """Raised when a forward solve hits a (near-)zero Dirichlet eigenvalue."""


def _hash_bytes(*chunks) -> str:
    h = hashlib.sha256()
    for c in chunks:
        h.update(c)
    return h.hexdigest()[:16]


def field_hash(u: GridField) -> str:
    return _hash_bytes(np.ascontiguousarray(u.values).tobytes())


@dataclass(frozen=True)
class ProblemGeometry:
    """Lattice plus the three role regions Omega, Omega' (potential support) and W (data)."""

    lattice: LatticeSpec
    omega: RegionMask
    omega_prime: RegionMask
    w: RegionMask
    s: float

    def __post_init__(self):
        if not (0.0 < self.s < 1.0):
            raise ValueError(f"s must lie in (0,1), got {self.s}")
        for reg in (self.omega, self.omega_prime, self.w):
            if reg.lattice != self.lattice:
                raise ValueError("all regions must live on the geometry lattice")
        if not self.omega.contains(self.omega_prime):
            raise ValueError("Omega' must be contained in Omega")
        if not self.omega.disjoint(self.w):
            raise ValueError("Omega and W must be disjoint")

    @classmethod
    def from_file(cls, source, s: float) -> "ProblemGeometry":
        lattice, regions = load_geometry(source)
        try:
            return cls(lattice, regions["Omega"], regions["OmegaPrime"], regions["W"], s)
        except KeyError as exc:
            raise ValueError(f"geometry file lacks required region {exc}") from exc

    @cached_property
    def multiplier(self) -> MultiplierOp:
        return MultiplierOp(self.lattice, self.s)

    @cached_property
    def _kernel_slab(self) -> np.ndarray:
        """Translation kernel of the multiplier: ((-Delta)^s delta_0)(d)."""
        return np.fft.ifftn(self.multiplier.symbol).real

    def symbol_block(self, symbol: np.ndarray, rows: RegionMask, cols: RegionMask) -> np.ndarray:
        """Dense block of a translation-invariant symbol operator in node values."""
        lat = self.lattice
        slab = np.fft.ifftn(symbol).real
        mi = np.stack(np.unravel_index(rows.nodes, lat.shape), axis=-1)
        mj = np.stack(np.unravel_index(cols.nodes, lat.shape), axis=-1)
        diff = (mi[:, None, :] - mj[None, :, :]) % lat.pts_per_side
        return slab[tuple(diff[..., ax] for ax in range(lat.n))]

    def multiplier_block(self, rows: RegionMask, cols: RegionMask) -> np.ndarray:
        """Dense block L[rows, cols] of the multiplier operator in node values."""
        lat = self.lattice
        mi = np.stack(np.unravel_index(rows.nodes, lat.shape), axis=-1)
        mj = np.stack(np.unravel_index(cols.nodes, lat.shape), axis=-1)
        diff = (mi[:, None, :] - mj[None, :, :]) % lat.pts_per_side
        return self._kernel_slab[tuple(diff[..., ax] for ax in range(lat.n))]

    @cached_property
    def gram_w(self) -> SobolevGram:
        return build_gram(self.w, self.s)

    @cached_property
    def gram_omega_prime(self) -> SobolevGram:
        return build_gram(self.omega_prime, self.s)

    @cached_property
    def geometry_hash(self) -> str:
        return _hash_bytes(
            json.dumps(self.lattice.descriptor(), sort_keys=True).encode(),
            np.float64(self.s).tobytes(),
            self.omega.nodes.tobytes(), self.omega_prime.nodes.tobytes(), self.w.nodes.tobytes(),
        )


@dataclass(frozen=True)
class RestrictedOperator:
    """Matrix of R_Omega((-Delta)^s + q) on fields supported in Omega."""

    geometry: ProblemGeometry
    q: GridField
    matrix: np.ndarray

    @cached_property
    def lu(self):
        lu, piv = scipy.linalg.lu_factor(self.matrix)
        diag = np.abs(np.diag(lu))
        if diag.min() <= 1e-12 * max(diag.max(), 1.0):
            raise DirichletEigenvalueError(
                "restricted operator is numerically singular (Dirichlet eigenvalue hit)"
            )
        return lu, piv

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Factorized solve with one step of iterative refinement."""
        lu, piv = self.lu
        x = scipy.linalg.lu_solve((lu, piv), rhs)
        x += scipy.linalg.lu_solve((lu, piv), rhs - self.matrix @ x)
        return x

    @cached_property
    def _singular_extremes(self) -> tuple[float, float]:
        sv = np.linalg.svd(self.matrix, compute_uv=False)
        return float(sv[0]), float(sv[-1])

    @property
    def smallest_singular_value(self) -> float:
        return self._singular_extremes[1]

    @property
    def largest_singular_value(self) -> float:
        return self._singular_extremes[0]


def restricted_operator(geometry: ProblemGeometry, q: GridField,
                        symbol: np.ndarray | None = None) -> RestrictedOperator:
    if q.lattice != geometry.lattice:
        raise ValueError("potential lives on a different lattice")
    if symbol is None:
        M = geometry.multiplier_block(geometry.omega, geometry.omega)
    else:
        M = geometry.symbol_block(symbol, geometry.omega, geometry.omega)
    M = M + np.diag(q.values.flat[geometry.omega.nodes])
    return RestrictedOperator(geometry, q, M)


def solve_exterior(geometry: ProblemGeometry, q: GridField, f: GridField,
                   resid_tol: float = 1e-9) -> GridField:
    """Solve ((-Delta)^s + q) u = 0 in Omega with u = f in the exterior.

    f must vanish on Omega; the solution residual is checked against
    resid_tol * ||f||.
    """
    lat = geometry.lattice
    if np.any(f.values.flat[geometry.omega.nodes] != 0.0):
        raise ValueError("exterior datum must vanish on Omega")
    op = restricted_operator(geometry, q)
    Lf = frac_laplacian_fourier(f, geometry.multiplier).values
    rhs = -Lf.flat[geometry.omega.nodes]
    w_vals = op.solve(rhs)
    u = f.values.copy()
    u.flat[geometry.omega.nodes] += w_vals
    uf = GridField(lat, u)
    resid = frac_laplacian_fourier(uf, geometry.multiplier).values + q.values * u
    rnorm = float(np.linalg.norm(resid.flat[geometry.omega.nodes]))
    fnorm = float(np.linalg.norm(f.values))
    if fnorm > 0 and rnorm > resid_tol * max(1.0, np.linalg.norm(rhs)) and rnorm > resid_tol * fnorm * 1e3:
        raise RuntimeError(f"forward solve residual {rnorm:.3e} exceeds tolerance")
    return uf


@dataclass(frozen=True)
class DtnMatrix:
    """Bilinear-form matrix of the DtN map on W node indicators, with its H^s Gram."""

    geometry: ProblemGeometry
    entries: np.ndarray
    gram: SobolevGram
    q_descriptor: str

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=float)
        nw = self.geometry.w.size
        if e.shape != (nw, nw):
            raise ValueError(f"entries shape {e.shape} does not match |W|={nw}")
        asym = np.linalg.norm(e - e.T) / max(np.linalg.norm(e), 1e-300)
        if asym > 1e-9:
            raise ValueError(f"DtN bilinear matrix is not symmetric (rel asym {asym:.2e})")
        object.__setattr__(self, "entries", 0.5 * (e + e.T))

    def op_norm(self) -> float:
        return op_norm(self.entries, self.gram)

    def apply(self, f_coeffs: np.ndarray) -> np.ndarray:
        """Functional coefficients of Lambda_q f for node coefficients f."""
        return self.entries @ np.asarray(f_coeffs, dtype=float)

    def __sub__(self, other: "DtnMatrix") -> "DtnMatrix":
        if other.geometry is not self.geometry and other.geometry.geometry_hash != self.geometry.geometry_hash:
            raise ValueError("DtN matrices from different geometries")
        return DtnMatrix(self.geometry, self.entries - other.entries, self.gram,
                         f"diff({self.q_descriptor},{other.q_descriptor})")

    def to_dict(self) -> dict:
        return {
            "geometry_hash": self.geometry.geometry_hash,
            "q_hash": self.q_descriptor,
            "gram_hash": _hash_bytes(self.gram.matrix.tobytes()),
            "s": self.geometry.s,
            "entries": self.entries.tolist(),
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)


def assemble_dtn(geometry: ProblemGeometry, q: GridField,
                 symbol: np.ndarray | None = None, tag: str = "") -> DtnMatrix:
    """Assemble <Lambda_q f, g> over W node indicators via the Omega Schur complement.

    An alternative translation-invariant symbol (e.g. the z-discretized
    extension symbol) may replace the default |xi|^{2s} multiplier.
    """
    hn = geometry.lattice.cell_volume
    op = restricted_operator(geometry, q, symbol=symbol)
    if symbol is None:
        L_ww = geometry.multiplier_block(geometry.w, geometry.w)
        L_ow = geometry.multiplier_block(geometry.omega, geometry.w)
    else:
        L_ww = geometry.symbol_block(symbol, geometry.w, geometry.w)
        L_ow = geometry.symbol_block(symbol, geometry.omega, geometry.w)
    X = op.solve(L_ow)
    entries = hn * (L_ww - L_ow.T @ X)
    return DtnMatrix(geometry, entries, geometry.gram_w, tag + field_hash(q))


def gamma_diff(geometry: ProblemGeometry, q: GridField, qbar: GridField) -> DtnMatrix:
    """DtN difference Lambda_q - Lambda_qbar on a shared geometry and Gram."""
    return assemble_dtn(geometry, q) - assemble_dtn(geometry, qbar)


@dataclass(frozen=True)
class ComparisonOperator:
    """Background-solution restriction f -> u_qbar|_{Omega'}, metrized by the region Grams."""

    geometry: ProblemGeometry
    matrix: np.ndarray          # |Omega'| x |W|, node values of u on Omega'
    qbar_descriptor: str

    @cached_property
    def whitened(self) -> np.ndarray:
        g_out = self.geometry.gram_omega_prime
        g_in = self.geometry.gram_w
        return g_out.sqrt @ self.matrix @ g_in.inv_sqrt

    def singular_values(self) -> np.ndarray:
        return np.linalg.svd(self.whitened, compute_uv=False)

    def image_norm(self, f_coeffs: np.ndarray) -> float:
        """H^s(Omega') norm of A f for node coefficients f on W."""
        vals = self.matrix @ np.asarray(f_coeffs, dtype=float)
        return self.geometry.gram_omega_prime.norm(vals)


def comparison_operator(geometry: ProblemGeometry, qbar: GridField) -> ComparisonOperator:
    """Columns are the qbar-solutions for W node indicators, restricted to Omega'."""
    op = restricted_operator(geometry, qbar)
    L_ow = geometry.multiplier_block(geometry.omega, geometry.w)
    W_sol = -op.solve(L_ow)                      # u|_Omega for every W indicator
    omega_nodes = geometry.omega.nodes
    sel = np.searchsorted(omega_nodes, geometry.omega_prime.nodes)
    return ComparisonOperator(geometry, W_sol[sel, :], field_hash(qbar))


@dataclass(frozen=True)
class DominationReport:
    max_ratio: float
    ratios: np.ndarray
    violations: int
    qbar_descriptor: str

    @property
    def passed(self) -> bool:
        return self.violations == 0 and np.isfinite(self.max_ratio)


def domination_check(geometry: ProblemGeometry, qbar: GridField, q_samples,
                     f_samples=None, rng=None) -> DominationReport:
    """Ratios ||Gamma(q) f||_{H^{-s}(W)} / ||A f||_{H^s(Omega')} over samples.

    Af ~ 0 with Gamma(q) f != 0 is flagged as a violation of the domination
    chain; otherwise the report carries the empirical constant.
    """
    rng = np.random.default_rng(rng)
    comp = comparison_operator(geometry, qbar)
    base = assemble_dtn(geometry, qbar)
    nw = geometry.w.size
    if f_samples is None:
        f_samples = [rng.standard_normal(nw) for _ in range(8)]
    ratios = []
    violations = 0
    for q in q_samples:
        diff = (assemble_dtn(geometry, q) - base).entries
        for f in f_samples:
            num = dual_norm(diff @ f, geometry.gram_w)
            den = comp.image_norm(f)
            scale = float(np.linalg.norm(f))
            if den <= 1e-14 * scale:
                if num > 1e-10 * scale:
                    violations += 1
                continue
            ratios.append(num / den)
    ratios = np.asarray(ratios)
    return DominationReport(
        max_ratio=float(ratios.max()) if ratios.size else 0.0,
        ratios=ratios, violations=violations, qbar_descriptor=field_hash(qbar),
    )


@dataclass(frozen=True)
class AqCertificate:
    """Numerical well-posedness certificate: margin vs. perturbation radius r0."""

    qbar_descriptor: str
    r0: float
    margin: float
    embedding_estimate: float
    kappa: float
    verdict: bool
    method: str = "concentrated-node power iteration"


def _embedding_constant(geometry: ProblemGeometry, iters: int = 50) -> float:
    """Worst L^{n/2s}-to-operator-norm blowup of a multiplication perturbation.

    Realized by power iteration on the multiplication operator of a
    single-node perturbation, the discrete extremizer; analytically h^{-2s}.
    """
    lat = geometry.lattice
    h2s = lat.spacing ** (2.0 * geometry.s)
    d = np.zeros(geometry.omega.size)
    d[0] = 1.0
    x = np.ones_like(d) / np.sqrt(d.size)
    for _ in range(iters):
        y = d * (d * x)
        nrm = np.linalg.norm(y)
        if nrm == 0:
            break
        x = y / nrm
    top = float(np.abs(d * x).max())         # operator norm of diag(d)
    lp = float(np.abs(d).max()) * h2s        # L^{n/2s} norm of the node mass
    return top / lp


def check_aq(geometry: ProblemGeometry, qbar: GridField, r0: float,
             kappa: float = 1.0) -> AqCertificate:
    """Certify that the r0-ball around qbar stays clear of Dirichlet eigenvalue zero.

    margin is the smallest singular value of the restricted operator at qbar;
    the verdict couples it to r0 through the estimated embedding constant and
    the declared heuristic factor kappa.  verdict False is a valid output.
    """
    op = restricted_operator(geometry, qbar)
    margin = op.smallest_singular_value
    emb = _embedding_constant(geometry)
    invertible = margin > 1e-12 * op.largest_singular_value
    verdict = bool(invertible and margin > kappa * r0 * emb)
    return AqCertificate(
        qbar_descriptor=field_hash(qbar), r0=r0, margin=margin,
        embedding_estimate=emb, kappa=kappa, verdict=verdict,
    )
