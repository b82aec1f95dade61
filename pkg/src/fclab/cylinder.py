"""Weighted-cylinder machinery: Bessel eigenbasis, Weyl counting, the degenerate-weight
finite-difference extension solver, and the interior energy (Caccioppoli) verifier.

The cylinder eigenproblem separates into Dirichlet-Laplacian modes of the base
times weighted Bessel profiles z^s J_{-s}(j z / R) in the height; the zoo of
asymptotic laws (eigenvalue counting, embedding singular values) lives on the
ordered eigenvalue list.  The extension solver works on the periodic lateral
box with a graded height mesh resolving the z^s boundary layer, and all its
normalizations are calibrated against the artifact's Fourier-multiplier
operator through a single-mode height ODE.

Only the zero-boundary cylinder law is tested two-sided; the free-boundary
embedding bound is one-sided by nature and is not asserted from below.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.integrate
import scipy.linalg
import scipy.optimize
import scipy.sparse
import scipy.sparse.linalg
import scipy.special

from .entropy import DecayFit, fit_decay
from .forward import DtnMatrix, ProblemGeometry, field_hash
from .lattice import GridField, LatticeSpec, RegionMask


# ---------------------------------------------------------------------------
# Bessel machinery
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BesselOrder:
    """Bessel order nu = -s for s in (0,1), with a reference series evaluator."""

    s: float
    series_terms: int = 60

    def __post_init__(self):
        if not (0.0 < self.s < 1.0):
            raise ValueError(f"order is -s with s in (0,1), got s={self.s}")

    @property
    def nu(self) -> float:
        return -self.s

    def mcmahon_zero(self, m: int) -> float:
        """McMahon asymptotic estimate of the m-th positive zero of J_nu."""
        mu = 4.0 * self.nu ** 2
        beta = (m + 0.5 * self.nu - 0.25) * np.pi
        b8 = 8.0 * beta
        return beta - (mu - 1.0) / b8 - 4.0 * (mu - 1.0) * (7.0 * mu - 31.0) / (3.0 * b8 ** 3)

    def series(self, x: float) -> float:
        """Power-series evaluation of J_nu(x); the independent oracle for bessel_j."""
        x = float(x)
        total = 0.0
        log_half_x = np.log(0.5 * x)
        for k in range(self.series_terms):
            log_term = (self.nu + 2 * k) * log_half_x - scipy.special.gammaln(k + 1.0) \
                - scipy.special.gammaln(self.nu + k + 1.0)
            total += (-1.0) ** k * np.exp(log_term)
        return total


def bessel_j(order: BesselOrder, x) -> float | np.ndarray:
    """J_{-s}(x) for x > 0 (scipy backend, accurate to ~1e-12 for x <= 50)."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise ValueError("bessel_j requires x > 0")
    out = scipy.special.jv(order.nu, x)
    return float(out) if out.ndim == 0 else out


def bessel_zeros(order: BesselOrder, count: int) -> np.ndarray:
    """First `count` positive zeros of J_{-s}, strictly increasing, |J| <= 1e-10 each.

    Each zero is bracketed around its McMahon estimate (forward scan fallback
    for the low-order zeros where the asymptotics are off) and refined by
    Brent's method.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    zeros = []
    prev = 1e-8
    for m in range(1, count + 1):
        est = order.mcmahon_zero(m)
        lo = max(est - 0.45 * np.pi, prev + 1e-6)
        hi = est + 0.45 * np.pi
        flo, fhi = bessel_j(order, lo), bessel_j(order, hi)
        if not (np.isfinite(flo) and np.isfinite(fhi)) or flo * fhi > 0:
            lo, hi = _scan_bracket(order, prev)
        root = scipy.optimize.brentq(lambda t: bessel_j(order, t), lo, hi, xtol=1e-14, rtol=1e-15)
        if abs(bessel_j(order, root)) > 1e-10:
            raise RuntimeError(f"zero refinement failed at m={m}: |J({root})| > 1e-10")
        if zeros and root <= zeros[-1]:
            raise RuntimeError(f"bracketing failure at m={m}: zeros not increasing")
        zeros.append(root)
        prev = root
    return np.asarray(zeros)


def _scan_bracket(order: BesselOrder, start: float, step: float = 0.05 * np.pi,
                  max_span: float = 40.0) -> tuple[float, float]:
    x = max(start + 1e-6, 1e-6)
    fx = bessel_j(order, x)
    t = x + step
    while t < start + max_span:
        ft = bessel_j(order, t)
        if fx * ft <= 0:
            return x, t
        x, fx, t = t, ft, t + step
    raise RuntimeError(f"no sign change found scanning from {start} (diagnostic: span {max_span})")


# ---------------------------------------------------------------------------
# Cylinder eigensystem
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CylinderMode:
    l_index: tuple
    m: int
    mu: float
    j_zero: float
    gamma: float
    lam: float


@dataclass(frozen=True)
class CylinderEigenSystem:
    """Ordered eigenpairs of the weighted cylinder problem over Omega x (0, R)."""

    s: float
    R: float
    base: dict
    modes: tuple

    def __post_init__(self):
        lams = self.lambdas
        if np.any(np.diff(lams) < -1e-12):
            raise ValueError("modes must be sorted by eigenvalue")

    @cached_property
    def lambdas(self) -> np.ndarray:
        return np.array([m.lam for m in self.modes])

    @property
    def count(self) -> int:
        return len(self.modes)


def _gamma_normalizer(order: BesselOrder, j_zero: float, R: float) -> float:
    """Closed form sqrt(2)/(R |J_{1-s}(j)|) from Bessel orthogonality at a zero."""
    return np.sqrt(2.0) / (R * abs(scipy.special.jv(order.nu + 1.0, j_zero)))


def gamma_normalizer_quadrature(order: BesselOrder, j_zero: float, R: float) -> float:
    """Independent quadrature check of the normalizer (int_0^R z J(j z/R)^2 dz)^{-1/2}."""
    val, _ = scipy.integrate.quad(
        lambda z: z * scipy.special.jv(order.nu, j_zero * z / R) ** 2, 0.0, R,
        limit=200,
    )
    return 1.0 / np.sqrt(val)


def rectangle_base_eigs(dims, count_cap: float) -> list[tuple[tuple, float]]:
    """Dirichlet-Laplacian eigenpairs of a rectangle: mu = pi^2 sum (p_i/a_i)^2."""
    dims = np.asarray(dims, dtype=float)
    pmax = [int(np.ceil(a * np.sqrt(count_cap) / np.pi)) + 1 for a in dims]
    out = []
    for p in np.ndindex(*[pm for pm in pmax]):
        pv = np.asarray(p) + 1
        mu = np.pi ** 2 * float(np.sum((pv / dims) ** 2))
        if mu <= count_cap:
            out.append((tuple(int(x) for x in pv), mu))
    out.sort(key=lambda t: t[1])
    return out


def mask_base_eigs(region: RegionMask, count: int) -> list[tuple[tuple, float]]:
    """Discrete Dirichlet-Laplacian eigenvalues on a node mask (5-point stencil).

    Cost grows with the mask size; rectangle mode is the default for a reason.
    """
    lat = region.lattice
    nodes = region.nodes
    index = -np.ones(lat.num_nodes, dtype=int)
    index[nodes] = np.arange(nodes.size)
    h2 = lat.spacing ** 2
    rows, cols, vals = [], [], []
    multi = np.stack(np.unravel_index(nodes, lat.shape), axis=-1)
    for ax in range(lat.n):
        for sgn in (+1, -1):
            nb = multi.copy()
            nb[:, ax] = (nb[:, ax] + sgn) % lat.pts_per_side
            nb_flat = np.ravel_multi_index(tuple(nb[:, a] for a in range(lat.n)), lat.shape)
            inside = index[nb_flat] >= 0
            rows.extend(np.arange(nodes.size)[inside])
            cols.extend(index[nb_flat[inside]])
            vals.extend(np.full(int(inside.sum()), -1.0 / h2))
    diag = np.full(nodes.size, 2.0 * lat.n / h2)
    A = scipy.sparse.coo_matrix(
        (np.concatenate([vals, diag]),
         (np.concatenate([rows, np.arange(nodes.size)]),
          np.concatenate([cols, np.arange(nodes.size)]))),
        shape=(nodes.size, nodes.size),
    ).tocsr()
    k = min(count, nodes.size - 2)
    w = scipy.sparse.linalg.eigsh(A, k=k, which="SM", return_eigenvectors=False)
    w = np.sort(w)
    return [((int(i + 1),), float(mu)) for i, mu in enumerate(w)]


def build_eigensystem(omega, s: float, R: float, count: int,
                      mode: str = "rect") -> CylinderEigenSystem:
    """Assemble the first `count` cylinder eigenpairs lambda_{l,m} = mu_l + (j_{-s,m}/R)^2.

    `omega` is the rectangle side-length tuple in rect mode or a RegionMask in
    mask mode.  The returned list is complete: every pair with eigenvalue
    below the enumeration cutoff is present.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    order = BesselOrder(s)
    mu_cap = 40.0 + 8.0 * count ** (2.0 / 3.0)
    while True:
        if mode == "rect":
            base = rectangle_base_eigs(omega, mu_cap)
        elif mode == "mask":
            base = mask_base_eigs(omega, count)
        else:
            raise ValueError(f"unknown eigensystem mode '{mode}'")
        if not base:
            mu_cap *= 2.0
            continue
        mz = max(8, int(np.ceil(R * np.sqrt(mu_cap) / np.pi)) + 2)
        zeros = bessel_zeros(order, mz)
        mu_min, mu_max = base[0][1], base[-1][1]
        lam_complete = min(mu_max + (zeros[0] / R) ** 2, mu_min + (zeros[-1] / R) ** 2)
        pairs = []
        for (l_idx, mu) in base:
            jr2 = (zeros / R) ** 2
            lams = mu + jr2
            keep = lams <= lam_complete
            for m_i in np.flatnonzero(keep):
                pairs.append((float(lams[m_i]), l_idx, int(m_i + 1), mu, float(zeros[m_i])))
        if len(pairs) >= count:
            break
        if mode == "mask" and len(base) >= count:
            raise ValueError(f"requested {count} modes exceed the available discrete spectrum")
        mu_cap *= 1.8
    pairs.sort(key=lambda t: t[0])
    modes = []
    for lam, l_idx, m, mu, j in pairs[:count]:
        modes.append(CylinderMode(
            l_index=l_idx, m=m, mu=mu, j_zero=j,
            gamma=_gamma_normalizer(order, j, R), lam=lam,
        ))
    base_desc = {"mode": mode, "omega": list(omega) if mode == "rect" else omega.label}
    return CylinderEigenSystem(s=s, R=R, base=base_desc, modes=tuple(modes))


def weyl_count(system: CylinderEigenSystem, N: float) -> int:
    """Number of eigenvalues <= N; requires the system to reach that level."""
    lams = system.lambdas
    if lams[-1] < N:
        raise ValueError(f"eigensystem reaches only {lams[-1]:.3f} < N={N}; request more modes")
    return int(np.searchsorted(lams, N, side="right"))


@dataclass(frozen=True)
class EmbeddingSpectrum:
    """Singular values of the H^1->L^2 cylinder embedding plus their power-law fit."""

    sigmas: np.ndarray
    fit: DecayFit
    normalization: str = "inhomogeneous (1+lambda)^(-1/2)"


def embedding_singular_values(system: CylinderEigenSystem, count: int,
                              fit_window: tuple = (100, None)) -> EmbeddingSpectrum:
    """sigma_k = (1+lambda_k)^{-1/2} in the inhomogeneous normalization, plus a power fit."""
    if count > system.count:
        raise ValueError(f"requested {count} values from a system of {system.count}")
    sig = (1.0 + system.lambdas[:count]) ** -0.5
    lo = min(fit_window[0], max(1, count // 4))
    hi = count if fit_window[1] is None else fit_window[1]
    ks = np.arange(lo, hi + 1, dtype=float)
    fit = fit_decay(sig[lo - 1:hi], "power", ks=ks, drop_head=0.0, drop_tail=0.0)
    return EmbeddingSpectrum(sigmas=sig, fit=fit)


# ---------------------------------------------------------------------------
# Finite-difference extension solver on the truncated weighted cylinder
# ---------------------------------------------------------------------------

def _interval_weights(heights: np.ndarray, s: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact integrals of z^{1-2s} over mesh intervals (W_j) and dual cells (V_j)."""
    w = 1.0 - 2.0 * s
    prim = lambda z: z ** (w + 1.0) / (w + 1.0)
    W = prim(heights[1:]) - prim(heights[:-1])
    mids = 0.5 * (heights[1:] + heights[:-1])
    edges = np.concatenate([[0.0], mids, [heights[-1]]])
    V = prim(edges[1:]) - prim(edges[:-1])
    return W, V


@dataclass(frozen=True)
class CylinderGrid:
    """Periodic lateral box times a graded height mesh for the weighted extension.

    heights: 0 = z_0 < ... < z_K = Z with grading exponent 1/(1-s+eps0)
    resolving the z^s boundary behavior; metric: None (identity), a scalar,
    a length-n diagonal, or a per-node diagonal field.  Off-diagonal lateral
    couplings are outside the (2n+1)-point stencil and are rejected.

    top: 'neumann' caps the cylinder with a zero-flux plane, which annihilates
    the lateral-mean mode exactly as the periodic multiplier operator does;
    'dirichlet' pins the top to zero and leaves an O(Z^{-2s}) mean-mode
    offset against the multiplier realization.
    """

    lattice: LatticeSpec
    s: float
    heights: np.ndarray
    metric: np.ndarray | None = None
    cal_mode: tuple = (2, 0)
    top: str = "neumann"

    def __post_init__(self):
        z = np.asarray(self.heights, dtype=float)
        if z[0] != 0.0 or np.any(np.diff(z) <= 0):
            raise ValueError("heights must be strictly increasing from 0")
        if self.top not in ("neumann", "dirichlet"):
            raise ValueError(f"unknown top condition '{self.top}'")
        object.__setattr__(self, "heights", z)
        if self.metric is not None:
            a = np.asarray(self.metric, dtype=float)
            if a.ndim == 2 and a.shape == (self.lattice.n, self.lattice.n):
                if np.any(np.abs(a - np.diag(np.diag(a))) > 0):
                    raise ValueError("off-diagonal lateral metrics are not representable "
                                     "in the (2n+1)-point scheme")
                a = np.diag(a)
            if a.ndim == 1 and a.size == self.lattice.n:
                a = np.broadcast_to(a, self.lattice.shape + (self.lattice.n,)).copy()
            if a.shape != self.lattice.shape + (self.lattice.n,):
                raise ValueError("metric must be scalar, diag(n), or a per-node diagonal field")
            if np.any(a <= 0):
                raise ValueError("metric must be uniformly elliptic (positive diagonal)")
            object.__setattr__(self, "metric", a)

    @classmethod
    def build(cls, lattice: LatticeSpec, s: float, Z: float | None = None,
              K: int = 48, eps0: float = 0.1, metric=None, cal_mode=(2, 0),
              top: str = "neumann") -> "CylinderGrid":
        if Z is None:
            Z = lattice.box_len
        g = 1.0 / (1.0 - s + eps0)
        z = Z * (np.arange(K + 1) / K) ** g
        if metric is not None and np.ndim(metric) == 0:
            metric = np.full(lattice.n, float(metric))
        return cls(lattice, s, z, metric, tuple(cal_mode), top)

    @property
    def K(self) -> int:
        return self.heights.size - 1

    @property
    def Z(self) -> float:
        return float(self.heights[-1])

    @cached_property
    def weights(self) -> tuple[np.ndarray, np.ndarray]:
        return _interval_weights(self.heights, self.s)

    @cached_property
    def ellipticity(self) -> float:
        if self.metric is None:
            return 1.0
        return float(min(self.metric.min(), 1.0 / self.metric.max()))

    def metric_axis(self, ax: int) -> np.ndarray:
        if self.metric is None:
            return np.ones(self.lattice.shape)
        return self.metric[..., ax]

    @cached_property
    def c_s(self) -> float:
        """Neumann-constant calibration by the single-mode height ODE on this mesh."""
        k2 = sum((k / self.lattice.box_len) ** 2 for k in self.cal_mode)
        xi = 2.0 * np.pi * np.sqrt(k2)
        flux = profile_flux_1d(self.heights, self.s, xi, top=self.top)
        return float(xi ** (2.0 * self.s) / flux)


def profile_flux_1d(heights: np.ndarray, s: float, xi: float, top: str = "neumann") -> float:
    """Discrete weighted flux -lim z^{1-2s} d_z phi at z=0 for the single-mode profile.

    phi minimizes int z^{1-2s}(phi'^2 + xi^2 phi^2) with phi(0)=1 and the
    chosen cap at z=Z on the given mesh; the returned flux is the variational
    residual at the z=0 node.  Against the exact half-space symbol this
    converges to xi^{2s} Gamma(1-s) 2^{1-2s} / Gamma(s).
    """
    W, V = _interval_weights(heights, s)
    K = heights.size - 1
    dz = np.diff(heights)
    cv = W / dz ** 2
    if top == "dirichlet":
        main = cv[:-1] + cv[1:] + xi ** 2 * V[1:-1]
        lower = -cv[1:-1]
        nfree = K - 1
    else:
        main = np.concatenate([cv[:-1] + cv[1:], [cv[-1]]]) + xi ** 2 * V[1:]
        lower = -cv[1:]
        nfree = K
    rhs = np.zeros(nfree)
    rhs[0] = cv[0] * 1.0
    ab = np.zeros((3, nfree))
    ab[0, 1:] = lower
    ab[1, :] = main
    ab[2, :-1] = lower
    phi = scipy.linalg.solve_banded((1, 1), ab, rhs)
    # residual of the z=0 row with phi_0 = 1
    return float(cv[0] * (1.0 - phi[0]) + xi ** 2 * V[0] * 1.0)


def exact_halfspace_flux(s: float, xi: float) -> float:
    """Continuum weighted flux for a single mode: xi^{2s} / c_s^{exact}."""
    c_exact = 2.0 ** (2.0 * s - 1.0) * scipy.special.gamma(s) / scipy.special.gamma(1.0 - s)
    return xi ** (2.0 * s) / c_exact


@dataclass(frozen=True)
class ExtensionSolution:
    """Solved truncated extension: field over (K+1) planes plus the trace data."""

    grid: CylinderGrid
    geometry: ProblemGeometry
    field: np.ndarray                 # shape (K+1,) + lattice.shape
    neumann_trace: GridField          # first-cell weighted difference quotient
    c_s: float
    z_tail_fraction: float
    residual: float

    def boundary_values(self) -> GridField:
        return GridField(self.grid.lattice, self.field[0])


class _ExtensionSystem:
    """Assembled sparse stiffness of the truncated weighted extension problem.

    Solves go through an algebraic multigrid (CG-accelerated) with a sparse-LU
    fallback should the potential make the system leave AMG's comfort zone.
    """

    def __init__(self, grid: CylinderGrid, geometry: ProblemGeometry, q: GridField):
        if geometry.lattice != grid.lattice:
            raise ValueError("geometry and cylinder grid use different lateral lattices")
        lat = grid.lattice
        Mn = lat.num_nodes
        K = grid.K
        self.grid, self.geometry = grid, geometry
        self.n_all = (K + 1) * Mn

        W, V = grid.weights
        dz = np.diff(grid.heights)
        hn = lat.cell_volume
        hfac = lat.spacing ** (lat.n - 2)

        rows, cols, vals = [], [], []

        def add_edges(i_idx, j_idx, coeff):
            rows.extend([i_idx, j_idx, i_idx, j_idx])
            cols.extend([i_idx, j_idx, j_idx, i_idx])
            vals.extend([coeff, coeff, -coeff, -coeff])

        base = np.arange(Mn)
        lateral_planes = K + 1 if grid.top == "neumann" else K
        # vertical edges
        for j in range(K):
            cv = W[j] / dz[j] ** 2 * hn
            add_edges(j * Mn + base, (j + 1) * Mn + base, np.full(Mn, cv))
        # lateral edges per plane and axis
        flat = base.reshape(lat.shape)
        for j in range(lateral_planes):
            for ax in range(lat.n):
                nb = np.roll(flat, -1, axis=ax)
                a_face = 0.5 * (grid.metric_axis(ax) + np.roll(grid.metric_axis(ax), -1, axis=ax))
                coeff = V[j] * a_face.ravel() * hfac
                add_edges(j * Mn + base, j * Mn + nb.ravel(), coeff)

        S = scipy.sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_all, self.n_all),
        ).tocsr()

        # potential coupling on the z=0 trace over Omega
        qdiag = np.zeros(self.n_all)
        qdiag[geometry.omega.nodes] = q.values.flat[geometry.omega.nodes] * hn / grid.c_s
        S = S + scipy.sparse.diags(qdiag)
        self.S = S

        free = np.zeros(self.n_all, dtype=bool)
        free[geometry.omega.nodes] = True              # plane 0, Omega
        top_free = (K + 1) * Mn if grid.top == "neumann" else K * Mn
        free[Mn:top_free] = True                       # interior (+ top for neumann cap)
        self.free = free
        self.A = S[free][:, free].tocsr()
        self._amg = None
        self._lu = None

    def _solve_free(self, rhs: np.ndarray) -> np.ndarray:
        try:
            import pyamg
            if self._amg is None and self._lu is None:
                self._amg = pyamg.smoothed_aggregation_solver(self.A)
        except ImportError:
            pass
        if self._amg is not None:
            x = self._amg.solve(rhs, tol=1e-12, accel="cg", maxiter=400)
            if np.linalg.norm(self.A @ x - rhs) <= 1e-8 * max(np.linalg.norm(rhs), 1e-300):
                return x
            self._amg = None
        if self._lu is None:
            self._lu = scipy.sparse.linalg.splu(self.A.tocsc(), permc_spec="MMD_AT_PLUS_A")
        return self._lu.solve(rhs)

    def solve(self, f_vals: np.ndarray) -> np.ndarray:
        """Full field for exterior trace data (values on the z=0 plane, zero on Omega)."""
        u = np.zeros(self.n_all)
        u[: self.grid.lattice.num_nodes] = f_vals.ravel()
        u[self.geometry.omega.nodes] = 0.0
        rhs = -(self.S @ u)[self.free]
        u[self.free] = self._solve_free(rhs)
        return u

    def flux_plane0(self, u: np.ndarray) -> np.ndarray:
        """Variational weighted flux -lim z^w d_z u per unit lateral measure."""
        Mn = self.grid.lattice.num_nodes
        r = (self.S @ u)[:Mn]
        return r / self.grid.lattice.cell_volume


def solve_extension_fd(grid: CylinderGrid, geometry: ProblemGeometry, f: GridField,
                       q: GridField | None = None, tail_warn: float = 1e-3) -> ExtensionSolution:
    """Solve the truncated weighted extension with exterior trace f and potential q.

    Returns the full field, the first-cell weighted difference-quotient
    Neumann trace, and an energy tail diagnostic for the height truncation.
    """
    lat = grid.lattice
    if q is None:
        q = GridField.zeros(lat)
    if np.any(f.values.flat[geometry.omega.nodes] != 0.0):
        raise ValueError("exterior trace must vanish on Omega")
    sys_ = _ExtensionSystem(grid, geometry, q)
    u = sys_.solve(f.values)
    K, Mn = grid.K, lat.num_nodes
    field = u.reshape((K + 1,) + lat.shape)

    z1 = grid.heights[1]
    trace = 2.0 * grid.s * (field[1] - field[0]) / z1 ** (2.0 * grid.s)

    W, V = grid.weights
    dz = np.diff(grid.heights)
    diffs = np.diff(field, axis=0)
    vert = (W / dz ** 2)[:, None] * (diffs.reshape(K, Mn) ** 2)
    tail_planes = grid.heights[:-1] > 0.5 * grid.Z
    tail = float(vert[tail_planes].sum())
    total = float(vert.sum())
    tail_frac = tail / total if total > 0 else 0.0
    if tail_frac > tail_warn:
        warnings.warn(f"height-truncation tail fraction {tail_frac:.2e} above {tail_warn:.0e}; "
                      "increase Z", stacklevel=2)

    resid = float(np.linalg.norm((sys_.S @ u)[sys_.free]))
    return ExtensionSolution(grid=grid, geometry=geometry, field=field,
                             neumann_trace=GridField(lat, trace), c_s=grid.c_s,
                             z_tail_fraction=tail_frac, residual=resid)


def extension_symbol(grid: CylinderGrid) -> np.ndarray:
    """Effective multiplier of the z-discretized extension over the frequency grid.

    Interior planes decouple per lateral mode for the identity metric, so the
    whole truncated extension reduces to the lattice symbol
    m(xi) = c_s * flux(|xi|) with the weighted-mesh flux; the neumann cap makes
    m(0) = 0 exactly, matching the homogeneous multiplier convention.
    """
    lat = grid.lattice
    xi = np.sqrt(lat.freq_norm_sq)
    vals, inverse = np.unique(np.round(xi, 12), return_inverse=True)
    flux = np.empty_like(vals)
    for i, x in enumerate(vals):
        if x == 0.0 and grid.top == "neumann":
            flux[i] = 0.0
        else:
            flux[i] = profile_flux_1d(grid.heights, grid.s, max(x, 1e-12), top=grid.top)
    return (grid.c_s * flux)[inverse].reshape(lat.shape)


def extension_dtn(grid: CylinderGrid, geometry: ProblemGeometry,
                  q: GridField | None = None) -> DtnMatrix:
    """DtN bilinear-form matrix on W node indicators through the truncated extension.

    Identity metric: the lateral modes decouple, so the map is assembled by the
    Schur route with the extension symbol (the mismatch against the multiplier
    realization is then purely the height discretization and calibration).
    Variable metric: dense column-by-column assembly from the finite-difference
    solver, entries c_s times the variational flux at the W nodes.
    """
    lat = grid.lattice
    if q is None:
        q = GridField.zeros(lat)
    if grid.metric is None:
        from .forward import assemble_dtn
        return assemble_dtn(geometry, q, symbol=extension_symbol(grid), tag="extension-z:")
    sys_ = _ExtensionSystem(grid, geometry, q)
    wn = geometry.w.nodes
    entries = np.empty((wn.size, wn.size))
    for col, node in enumerate(wn):
        f = np.zeros(lat.num_nodes)
        f[node] = 1.0
        u = sys_.solve(f)
        entries[:, col] = grid.c_s * (sys_.S @ u)[wn]
    entries = 0.5 * (entries + entries.T)
    return DtnMatrix(geometry, entries, geometry.gram_w,
                     f"extension-fd:{field_hash(q)}")


# ---------------------------------------------------------------------------
# Caccioppoli verification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CaccioppoliReport:
    center: tuple
    r1: float
    r2: float
    lhs: float
    rhs: float
    constant: float

    def __post_init__(self):
        if self.lhs < 0 or self.rhs < 0:
            raise ValueError("energies must be nonnegative")


def caccioppoli_verify(sol: ExtensionSolution, center, r1: float, r2: float,
                       q: GridField | None = None) -> CaccioppoliReport:
    """Interior energy estimate check: weighted gradient energy on the inner ball
    against weighted mass on the outer ball, reported as lhs (r2-r1)^2 / rhs.

    The outer ball must stay inside the cylinder where the solution satisfies
    the equation: away from the top plane, and meeting z=0 only inside Omega
    (the exterior trace is Dirichlet data, not covered by the estimate).
    """
    if not (0.0 < r1 < r2):
        raise ValueError("need 0 < r1 < r2")
    grid, geo = sol.grid, sol.geometry
    lat = grid.lattice
    cx = np.asarray(center[:-1], dtype=float)
    cz = float(center[-1])
    if cz + r2 >= grid.Z:
        raise ValueError("outer ball reaches the truncation plane")
    if cz - r2 < 0.0:
        # ball touches z=0: its lateral footprint must stay inside Omega
        foot = np.sqrt(max(r2 ** 2 - cz ** 2, 0.0))
        all_pos = lat.positions(np.arange(lat.num_nodes))
        inside = lat.torus_dist(all_pos, cx[None, :]) <= foot
        if np.any(inside & ~geo.omega.mask.ravel()):
            raise ValueError("ball footprint on z=0 leaves Omega (Dirichlet data region)")

    W, V = grid.weights
    dz = np.diff(grid.heights)
    hn = lat.cell_volume
    hfac = lat.spacing ** (lat.n - 2)
    field = sol.field
    K = grid.K
    pos = lat.positions(np.arange(lat.num_nodes))
    lat_dist2 = lat.torus_dist(pos, cx[None, :]) ** 2

    lhs = 0.0
    # vertical gradient cells located at (x, interval midpoint)
    zmid = 0.5 * (grid.heights[1:] + grid.heights[:-1])
    for j in range(K):
        sel = lat_dist2 + (zmid[j] - cz) ** 2 <= r1 ** 2
        if sel.any():
            d = (field[j + 1] - field[j]).ravel()[sel]
            lhs += float(W[j] / dz[j] ** 2 * hn * np.sum(d ** 2))
    # lateral gradient cells located at (face midpoint, z_j)
    for j in range(K):
        for ax in range(lat.n):
            shift = np.zeros(lat.n)
            shift[ax] = 0.5 * lat.spacing
            d2 = lat.torus_dist(pos + shift, cx[None, :]) ** 2 + (grid.heights[j] - cz) ** 2
            sel = d2 <= r1 ** 2
            if sel.any():
                a_face = 0.5 * (grid.metric_axis(ax) + np.roll(grid.metric_axis(ax), -1, axis=ax))
                diff = np.roll(field[j], -1, axis=ax) - field[j]
                lhs += float(V[j] * hfac * np.sum(a_face.ravel()[sel] * diff.ravel()[sel] ** 2))

    rhs = 0.0
    for j in range(K):
        sel = lat_dist2 + (grid.heights[j] - cz) ** 2 <= r2 ** 2
        if sel.any():
            rhs += float(V[j] * hn * np.sum(field[j].ravel()[sel] ** 2))

    constant = lhs * (r2 - r1) ** 2 / rhs if rhs > 0 else np.inf if lhs > 0 else 0.0
    return CaccioppoliReport(center=tuple(center), r1=r1, r2=r2, lhs=lhs, rhs=rhs,
                             constant=constant)


def eigenfunction_residual(system: CylinderEigenSystem, mode_idx: int, dims,
                           lateral_pts: int = 24, z_pts: int = 24) -> float:
    """Relative weak residual of a cylinder eigenfunction on a tensor Dirichlet grid.

    Rebuilds the weighted stiffness on rectangle x graded heights with lateral
    Dirichlet walls, evaluates the analytic eigenfunction, and measures
    ||S e - lam M e|| / (lam ||M e||) over interior nodes; refinement drives
    it to zero.
    """
    mode = system.modes[mode_idx]
    s, R = system.s, system.R
    dims = np.asarray(dims, dtype=float)
    n = dims.size
    hx = dims / (lateral_pts + 1)
    axes = [np.arange(1, lateral_pts + 1) * hx[d] for d in range(n)]
    g = 1.0 / (1.0 - s + 0.1)
    z = R * (np.arange(z_pts + 1) / z_pts) ** g
    W, V = _interval_weights(z, s)
    dz = np.diff(z)
    order = BesselOrder(s)

    grids = np.meshgrid(*axes, indexing="ij")
    lateral = np.ones(grids[0].shape)
    for d in range(n):
        lateral *= np.sqrt(2.0 / dims[d]) * np.sin(mode.l_index[d] * np.pi * grids[d] / dims[d])
    prof = np.zeros(z_pts + 1)
    prof[1:] = mode.gamma * z[1:] ** s * scipy.special.jv(order.nu, mode.j_zero * z[1:] / R)
    # z^s J_{-s}(j z/R) -> (j/(2R))^{-s} / Gamma(1-s) as z -> 0
    prof[0] = mode.gamma * (mode.j_zero / (2.0 * R)) ** (-s) / scipy.special.gamma(1.0 - s)
    e = prof[:, None] * lateral.reshape(1, -1)    # (z, lateral) with Dirichlet walls

    hn = float(np.prod(hx))
    hfac = [hn / hx[d] ** 2 for d in range(n)]
    Mn = lateral.size
    K = z_pts
    Su = np.zeros_like(e)
    # vertical
    for j in range(K):
        cv = W[j] / dz[j] ** 2 * hn
        d = e[j + 1] - e[j]
        Su[j] -= cv * d
        Su[j + 1] += cv * d
    # lateral with Dirichlet walls
    shape = grids[0].shape
    for j in range(K + 1):
        plane = e[j].reshape(shape)
        acc = np.zeros(shape)
        for d in range(n):
            padded = np.zeros(np.asarray(shape) + np.eye(n, dtype=int)[d] * 2)
            sl = tuple(slice(1, -1) if dd == d else slice(None) for dd in range(n))
            padded[sl] = plane
            lo = np.diff(padded, axis=d)
            acc += -np.diff(lo, axis=d) * hfac[d]
        Su[j] += V[j] * acc.ravel()
    mass = V[:, None] * e * hn
    interior = slice(1, K)        # exclude z=0 (natural bc) and z=Z (Dirichlet)
    r = Su[interior] - mode.lam * mass[interior]
    return float(np.linalg.norm(r) / (mode.lam * np.linalg.norm(mass[interior])))
