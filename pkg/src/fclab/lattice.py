"""Periodic lattice model of R^n, region masks, grid fields and discrete norms.

The ambient space is a periodic box [0, L)^n sampled at M points per side.
Regions (Omega, Omega', W) are node masks; all Sobolev-type norms are realized
through the discrete Fourier transform on the box.  The quotient H^s norm on a
subdomain has no cheap discrete analogue, so localized H^s norms are always
the Fourier norm of the zero-extended field; this is a documented
approximation, not an oversight.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.linalg


@dataclass(frozen=True)
class LatticeSpec:
    """Periodic grid: n dimensions, physical side length box_len, M points per side."""

    n: int
    box_len: float
    pts_per_side: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"spatial dimension must be >= 1, got {self.n}")
        if self.box_len <= 0:
            raise ValueError(f"box_len must be positive, got {self.box_len}")
        if self.pts_per_side < 2 or self.pts_per_side % 2 != 0:
            raise ValueError(f"pts_per_side must be an even integer >= 2, got {self.pts_per_side}")

    @property
    def spacing(self) -> float:
        return self.box_len / self.pts_per_side

    @property
    def shape(self) -> tuple:
        return (self.pts_per_side,) * self.n

    @property
    def num_nodes(self) -> int:
        return self.pts_per_side ** self.n

    @property
    def cell_volume(self) -> float:
        return self.spacing ** self.n

    @cached_property
    def axis_coords(self) -> np.ndarray:
        return np.arange(self.pts_per_side) * self.spacing

    @cached_property
    def axis_freqs(self) -> np.ndarray:
        """Angular frequencies 2*pi*k/L per axis, FFT layout."""
        return 2.0 * np.pi * np.fft.fftfreq(self.pts_per_side, d=self.spacing)

    @cached_property
    def freq_norm_sq(self) -> np.ndarray:
        """|xi|^2 on the full frequency grid, shape self.shape."""
        grids = np.meshgrid(*([self.axis_freqs] * self.n), indexing="ij")
        return sum(g ** 2 for g in grids)

    def positions(self, flat_idx: np.ndarray) -> np.ndarray:
        """Node coordinates of flat indices, shape (len(idx), n)."""
        multi = np.unravel_index(np.asarray(flat_idx), self.shape)
        return np.stack(multi, axis=-1) * self.spacing

    def torus_delta(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Componentwise displacement a - b wrapped to [-L/2, L/2)."""
        d = a - b
        L = self.box_len
        return (d + L / 2.0) % L - L / 2.0

    def torus_dist(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return np.sqrt(np.sum(self.torus_delta(a, b) ** 2, axis=-1))

    def descriptor(self) -> dict:
        return {"n": self.n, "box_len": self.box_len, "pts_per_side": self.pts_per_side}


@dataclass(frozen=True)
class RegionMask:
    """Set of lattice nodes with a role label (Omega, OmegaPrime, W or custom)."""

    lattice: LatticeSpec
    mask: np.ndarray
    label: str = "custom"

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        if m.shape != self.lattice.shape:
            raise ValueError(f"mask shape {m.shape} does not match lattice shape {self.lattice.shape}")
        if not m.any():
            raise ValueError(f"region '{self.label}' is empty")
        object.__setattr__(self, "mask", m)

    @cached_property
    def nodes(self) -> np.ndarray:
        """Flat node indices, sorted."""
        return np.flatnonzero(self.mask)

    @cached_property
    def positions(self) -> np.ndarray:
        return self.lattice.positions(self.nodes)

    @property
    def size(self) -> int:
        return int(self.mask.sum())

    @property
    def measure(self) -> float:
        return self.size * self.lattice.cell_volume

    def contains(self, other: "RegionMask") -> bool:
        return bool(np.all(self.mask[other.mask]))

    def disjoint(self, other: "RegionMask") -> bool:
        return not bool(np.any(self.mask & other.mask))

    def relabel(self, label: str) -> "RegionMask":
        return RegionMask(self.lattice, self.mask, label)


def rect_mask(lattice: LatticeSpec, lo, hi, label: str = "custom") -> RegionMask:
    """Axis-aligned box [lo, hi) rasterized with the center-in rule."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    mask = np.ones(lattice.shape, dtype=bool)
    for ax in range(lattice.n):
        c = lattice.axis_coords
        sel = (c >= lo[ax]) & (c < hi[ax])
        sh = [1] * lattice.n
        sh[ax] = lattice.pts_per_side
        mask &= sel.reshape(sh)
    return RegionMask(lattice, mask, label)


def ball_mask(lattice: LatticeSpec, center, radius: float, label: str = "custom") -> RegionMask:
    """Torus-metric ball rasterized with the center-in rule."""
    center = np.asarray(center, dtype=float)
    idx = np.arange(lattice.num_nodes)
    pos = lattice.positions(idx)
    d = lattice.torus_dist(pos, center[None, :])
    return RegionMask(lattice, (d <= radius).reshape(lattice.shape), label)


def load_geometry(source) -> tuple[LatticeSpec, dict]:
    """Parse a geometry JSON file/dict into a lattice and labeled region masks.

    Schema: {n, box_len, pts_per_side, regions: [{label, shape: rect|ball|mask, params}]}.
    """
    if isinstance(source, (str, Path)):
        with open(source) as fh:
            doc = json.load(fh)
    else:
        doc = source
    lattice = LatticeSpec(int(doc["n"]), float(doc["box_len"]), int(doc["pts_per_side"]))
    regions = {}
    for reg in doc["regions"]:
        label, shape, params = reg["label"], reg["shape"], reg["params"]
        if shape == "rect":
            rm = rect_mask(lattice, params["lo"], params["hi"], label)
        elif shape == "ball":
            rm = ball_mask(lattice, params["center"], params["radius"], label)
        elif shape == "mask":
            arr = np.asarray(params["mask"], dtype=bool).reshape(lattice.shape)
            rm = RegionMask(lattice, arr, label)
        else:
            raise ValueError(f"unknown region shape '{shape}'")
        regions[label] = rm
    return lattice, regions


@dataclass(frozen=True)
class GridField:
    """Real-valued sampled function on the lattice."""

    lattice: LatticeSpec
    values: np.ndarray
    support_hint: RegionMask | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.size != self.lattice.num_nodes:
            raise ValueError(f"field has {v.size} values for a lattice of {self.lattice.num_nodes} nodes")
        v = v.reshape(self.lattice.shape)
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        if self.support_hint is not None and np.any(v[~self.support_hint.mask] != 0.0):
            raise ValueError("field has nonzero values outside its declared support")
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, lattice: LatticeSpec) -> "GridField":
        return cls(lattice, np.zeros(lattice.shape))

    @classmethod
    def from_function(cls, lattice: LatticeSpec, fn) -> "GridField":
        idx = np.arange(lattice.num_nodes)
        pos = lattice.positions(idx)
        vals = np.asarray(fn(pos), dtype=float).reshape(lattice.shape)
        return cls(lattice, vals)

    @classmethod
    def from_region_values(cls, region: RegionMask, vals: np.ndarray) -> "GridField":
        full = np.zeros(region.lattice.shape)
        full.flat[region.nodes] = vals
        return cls(region.lattice, full, support_hint=region)

    def on_region(self, region: RegionMask) -> np.ndarray:
        return self.values.flat[region.nodes]

    def __add__(self, other: "GridField") -> "GridField":
        return GridField(self.lattice, self.values + other.values)

    def __sub__(self, other: "GridField") -> "GridField":
        return GridField(self.lattice, self.values - other.values)

    def __mul__(self, c: float) -> "GridField":
        return GridField(self.lattice, self.values * c)

    __rmul__ = __mul__


@dataclass(frozen=True)
class FractionalSobolevParams:
    """Order delta in (0,1], integrability p >= 1 and the region for W^{delta,p} norms."""

    delta: float
    p: float
    region: RegionMask

    def __post_init__(self):
        if not (0.0 < self.delta <= 1.0):
            raise ValueError(f"delta must lie in (0, 1], got {self.delta}")
        if self.p < 1.0:
            raise ValueError(f"p must be >= 1, got {self.p}")


@dataclass(frozen=True)
class SobolevGram:
    """Gram matrix of node indicators in the discrete H^s inner product."""

    exponent: float
    node_basis: RegionMask
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.shape != (self.node_basis.size, self.node_basis.size):
            raise ValueError("Gram matrix shape does not match region size")
        object.__setattr__(self, "matrix", m)

    @cached_property
    def cho(self):
        return scipy.linalg.cho_factor(self.matrix, lower=True)

    @cached_property
    def inv_sqrt(self) -> np.ndarray:
        w, V = scipy.linalg.eigh(self.matrix)
        if w[0] <= 0:
            raise np.linalg.LinAlgError("Gram matrix is not positive definite")
        return (V / np.sqrt(w)) @ V.T

    @cached_property
    def sqrt(self) -> np.ndarray:
        w, V = scipy.linalg.eigh(self.matrix)
        return (V * np.sqrt(np.maximum(w, 0.0))) @ V.T

    def norm(self, coeffs: np.ndarray) -> float:
        """H^s norm of the field with the given node coefficients."""
        c = np.asarray(coeffs, dtype=float)
        return float(np.sqrt(c @ self.matrix @ c))


def lp_norm(u: GridField, p: float, region: RegionMask) -> float:
    """Discrete L^p norm over a region: (sum |u|^p h^n)^{1/p}."""
    if p < 1.0:
        raise ValueError(f"p must be >= 1, got {p}")
    if region.lattice != u.lattice:
        raise ValueError("region and field live on different lattices")
    vals = np.abs(u.on_region(region))
    hn = u.lattice.cell_volume
    if np.isinf(p):
        return float(vals.max(initial=0.0))
    return float((np.sum(vals ** p) * hn) ** (1.0 / p))


def gagliardo_norm(u: GridField, params: FractionalSobolevParams) -> float:
    """Sobolev-Slobodeckij norm: L^p part plus the double-sum seminorm.

    The double sum runs over distinct node pairs of the region in the torus
    metric; the diagonal is excluded (indicator differences vanish there and
    the continuum integrand is singular).
    """
    region, p, delta = params.region, params.p, params.delta
    lat = u.lattice
    if region.lattice != lat:
        raise ValueError("region and field live on different lattices")
    vals = u.on_region(region)
    pos = region.positions
    hn = lat.cell_volume
    expo = -(p * delta + lat.n)
    semi_p = 0.0
    # blocked pairwise accumulation to bound memory on large regions
    npts = pos.shape[0]
    block = max(1, int(2e7) // max(1, npts))
    for start in range(0, npts, block):
        stop = min(start + block, npts)
        d = lat.torus_dist(pos[start:stop, None, :], pos[None, :, :])
        dv = np.abs(vals[start:stop, None] - vals[None, :])
        d[np.arange(stop - start), np.arange(start, stop)] = np.inf
        semi_p += float(np.sum(dv ** p * d ** expo))
    return lp_norm(u, p, region) + (semi_p * hn * hn) ** (1.0 / p)


def hs_norm_fourier(u: GridField, s: float) -> float:
    """Inhomogeneous H^s norm via the multiplier (1+|xi|^2)^{s/2} on the box."""
    lat = u.lattice
    uh = np.fft.fftn(u.values)
    w = (1.0 + lat.freq_norm_sq) ** s
    total = np.sum(w * np.abs(uh) ** 2) * lat.cell_volume / lat.num_nodes
    return float(np.sqrt(total))


def indicator_gram_kernel(lattice: LatticeSpec, symbol: np.ndarray) -> np.ndarray:
    """Translation kernel g(d) with G_xy = g(x-y) for a Fourier-multiplier inner product."""
    ker = np.fft.ifftn(symbol).real * lattice.cell_volume
    return ker


def build_gram(region: RegionMask, s: float, cond_cap: float = 1e12) -> SobolevGram:
    """Assemble the H^s Gram matrix of node indicators on a region.

    G_xy = <delta_x, delta_y>_{H^s} computed from the multiplier (1+|xi|^2)^s;
    a condition number above cond_cap is reported as a warning, not a failure.
    """
    lat = region.lattice
    symbol = (1.0 + lat.freq_norm_sq) ** s
    ker = indicator_gram_kernel(lat, symbol)
    nodes = region.nodes
    multi = np.stack(np.unravel_index(nodes, lat.shape), axis=-1)
    diff = (multi[:, None, :] - multi[None, :, :]) % lat.pts_per_side
    G = ker[tuple(diff[..., ax] for ax in range(lat.n))]
    G = 0.5 * (G + G.T)
    gram = SobolevGram(exponent=s, node_basis=region, matrix=G)
    w = scipy.linalg.eigvalsh(G)
    if w[0] <= 0:
        raise np.linalg.LinAlgError("indicator Gram matrix lost positive definiteness")
    cond = w[-1] / w[0]
    if cond > cond_cap:
        warnings.warn(f"H^{s} Gram on '{region.label}' is ill-conditioned (cond={cond:.3e})", stacklevel=2)
    return gram


def dual_norm(functional: np.ndarray, gram: SobolevGram) -> float:
    """Discrete H^{-s} norm (v^T G^{-1} v)^{1/2} of a functional on region nodes."""
    v = np.asarray(functional, dtype=float)
    if v.shape != (gram.node_basis.size,):
        raise ValueError(f"functional length {v.shape} does not match region size {gram.node_basis.size}")
    return float(np.sqrt(v @ scipy.linalg.cho_solve(gram.cho, v)))


def op_norm(bilinear_matrix: np.ndarray, gram: SobolevGram) -> float:
    """Operator norm H^s -> H^{-s} of a bilinear-form matrix D: ||G^{-1/2} D G^{-1/2}||_2."""
    D = np.asarray(bilinear_matrix, dtype=float)
    W = gram.inv_sqrt
    return float(np.linalg.norm(W @ D @ W, ord=2))
