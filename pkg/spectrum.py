#!/usr/bin/env python3
"""
spectrum.py

The operator A as an ordered discrete spectrum.

Responsibilities:
- Dirichlet Laplacian eigenpairs on an interval and on a rectangle
- User-supplied eigenvalue tables (CSV `k,lambda`), coefficient space only
- Multiplicity grouping (relative tolerance 1e-12)
- Fourier analysis (composite Gauss-Legendre) and synthesis
- D(A^tau) norms
"""

from __future__ import annotations

import csv
import math
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from kernel import gauss_panels

log = logging.getLogger(__name__)


# ================= CONFIG =================

GROUP_RTOL = 1e-12
GRAM_MODES = 20
TABLE_HEADER = ["k", "lambda"]

KIND_INTERVAL = "interval"
KIND_RECTANGLE = "rectangle"
KIND_TABLE = "table"


class SpectrumError(ValueError):
    pass


class ProjectionError(RuntimeError):
    def __init__(self, indices):
        super().__init__(f"non-finite projection for modes {list(indices)}")
        self.indices = list(indices)


# ================= TYPES =================

@dataclass(frozen=True)
class Mode:
    index: int
    lam: float
    group: int
    label: tuple


@dataclass(frozen=True)
class ProjectionQuad:
    panels: int = 32
    order: int = 16


@dataclass(frozen=True)
class CoeffVector:
    coeffs: np.ndarray
    tail_norm_estimate: float = 0.0

    def __post_init__(self):
        coeffs = np.atleast_1d(np.asarray(self.coeffs, dtype=float))
        if coeffs.ndim != 1:
            raise SpectrumError("coefficients must be a flat vector")
        if not np.all(np.isfinite(coeffs)):
            raise SpectrumError("coefficients must be finite")
        if not self.tail_norm_estimate >= 0:
            raise SpectrumError("tail_norm_estimate must be >= 0")
        object.__setattr__(self, "coeffs", coeffs)

    @classmethod
    def zeros(cls, K: int) -> "CoeffVector":
        return cls(np.zeros(K))

    @classmethod
    def basis(cls, K: int, k: int, scale: float = 1.0) -> "CoeffVector":
        if not 1 <= k <= K:
            raise SpectrumError(f"mode index {k} outside 1..{K}")
        c = np.zeros(K)
        c[k - 1] = scale
        return cls(c)

    def __len__(self):
        return self.coeffs.size

    def norm(self) -> float:
        return float(np.linalg.norm(self.coeffs))


@dataclass(frozen=True)
class Spectrum:
    modes: tuple
    kind: str
    dims: tuple = ()

    def __post_init__(self):
        if not self.modes:
            raise SpectrumError("spectrum needs at least one mode")
        lams = [m.lam for m in self.modes]
        if any(not (lam > 0 and math.isfinite(lam)) for lam in lams):
            raise SpectrumError("eigenvalues must be positive and finite")
        if any(b < a for a, b in zip(lams, lams[1:])):
            raise SpectrumError("eigenvalues must be nondecreasing")
        groups = [m.group for m in self.modes]
        if groups[0] != 1 or any(b - a not in (0, 1) for a, b in zip(groups, groups[1:])):
            raise SpectrumError("group ids must be contiguous from 1")

    @property
    def K(self) -> int:
        return len(self.modes)

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([m.lam for m in self.modes])

    @property
    def has_eigenfunctions(self) -> bool:
        return self.kind != KIND_TABLE

    def mode(self, k: int) -> Mode:
        if not 1 <= k <= self.K:
            raise SpectrumError(f"mode index {k} outside 1..{self.K}")
        return self.modes[k - 1]

    def groups(self) -> dict:
        out = {}
        for m in self.modes:
            out.setdefault(m.group, []).append(m.index)
        return out

    def eigenfunction(self, mode: Mode, point):
        """v_k at a point (x for the interval, (x, y) for the rectangle)."""
        if self.kind == KIND_INTERVAL:
            (L,) = self.dims
            (k,) = mode.label
            x = np.asarray(point, dtype=float)
            return math.sqrt(2.0 / L) * np.sin(k * math.pi * x / L)
        if self.kind == KIND_RECTANGLE:
            a, b = self.dims
            m, n = mode.label
            x, y = (np.asarray(p, dtype=float) for p in point)
            return (2.0 / math.sqrt(a * b)) * np.sin(m * math.pi * x / a) * np.sin(n * math.pi * y / b)
        raise SpectrumError("user-supplied spectra carry no eigenfunctions")


# -------------------- construction --------------------

def _group_ids(lams):
    ids = []
    group, anchor = 0, None
    for lam in lams:
        if anchor is None or abs(lam - anchor) > GROUP_RTOL * anchor:
            group += 1
            anchor = lam
        ids.append(group)
    return ids


def _build(entries, kind, dims):
    lams = [lam for lam, _ in entries]
    ids = _group_ids(lams)
    modes = tuple(
        Mode(index=i + 1, lam=float(lam), group=gid, label=tuple(label))
        for i, ((lam, label), gid) in enumerate(zip(entries, ids))
    )
    return Spectrum(modes=modes, kind=kind, dims=tuple(float(d) for d in dims))


def _check_K(K):
    if int(K) != K or K < 1:
        raise SpectrumError(f"K must be an integer >= 1, got {K}")


def dirichlet_interval(L: float, K: int) -> Spectrum:
    if not (L > 0 and math.isfinite(L)):
        raise SpectrumError(f"L must be positive, got {L}")
    _check_K(K)
    entries = [((k * math.pi / L) ** 2, (k,)) for k in range(1, K + 1)]
    return _build(entries, KIND_INTERVAL, (L,))


def dirichlet_rectangle(a: float, b: float, K: int) -> Spectrum:
    if not (a > 0 and b > 0 and math.isfinite(a) and math.isfinite(b)):
        raise SpectrumError(f"rectangle sides must be positive, got {a} x {b}")
    _check_K(K)

    # the K smallest pairs all have m, n <= K
    inv_a2, inv_b2 = 1.0 / a ** 2, 1.0 / b ** 2
    pairs = [
        (math.pi ** 2 * (m * m * inv_a2 + n * n * inv_b2), (m, n))
        for m in range(1, K + 1)
        for n in range(1, K + 1)
    ]
    pairs.sort()

    kept = pairs[:K]
    if len(pairs) > K:
        last, nxt = pairs[K - 1][0], pairs[K][0]
        if abs(nxt - last) <= GROUP_RTOL * last:
            log.warning("truncation K=%d splits the multiplicity group at lambda=%.6g", K, last)
    return _build(kept, KIND_RECTANGLE, (a, b))


def spectrum_from_values(lambdas) -> Spectrum:
    lams = [float(x) for x in lambdas]
    entries = [(lam, (k,)) for k, lam in enumerate(lams, start=1)]
    return _build(entries, KIND_TABLE, ())


def spectrum_from_table(path) -> Spectrum:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"spectrum table not found: {path}")

    with path.open(newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != TABLE_HEADER:
            raise SpectrumError(f"spectrum table header must be {','.join(TABLE_HEADER)}, got {reader.fieldnames}")
        rows = list(reader)

    lams = []
    for expected, row in enumerate(rows, start=1):
        try:
            k, lam = int(row["k"]), float(row["lambda"])
        except (TypeError, ValueError):
            raise SpectrumError(f"bad row {expected} in {path}: {row}")
        if k != expected:
            raise SpectrumError(f"row {expected}: mode indices must run 1..K, got k={k}")
        lams.append(lam)

    return spectrum_from_values(lams)


# ================= ANALYSIS / SYNTHESIS =================

def _require_functions(spectrum):
    if not spectrum.has_eigenfunctions:
        raise SpectrumError("user-supplied spectra carry no eigenfunctions; work in coefficient space")


def _tail_norm(coeffs):
    tail = max(1, coeffs.size // 10)
    return float(np.linalg.norm(coeffs[-tail:]))


def _basis_on_nodes(spectrum, quad_cfg):
    """(V, w): V[k, j] = v_k at quadrature node j, w the node weights."""
    if spectrum.kind == KIND_INTERVAL:
        (L,) = spectrum.dims
        x, w = gauss_panels(L, quad_cfg.panels, quad_cfg.order)
        V = np.array([spectrum.eigenfunction(m, x) for m in spectrum.modes])
        return V, w, (x,)

    a, b = spectrum.dims
    x, wx = gauss_panels(a, quad_cfg.panels, quad_cfg.order)
    y, wy = gauss_panels(b, quad_cfg.panels, quad_cfg.order)
    X, Y = np.meshgrid(x, y, indexing="ij")
    w = np.outer(wx, wy).ravel()
    V = np.array([spectrum.eigenfunction(m, (X, Y)).ravel() for m in spectrum.modes])
    return V, w, (X, Y)


def analyze(spectrum: Spectrum, field, quad_cfg: ProjectionQuad = ProjectionQuad()) -> CoeffVector:
    """
    Fourier coefficients (field, v_k).

    `field` is vectorized: field(x) on the interval, field(x, y) on the
    rectangle.
    """
    _require_functions(spectrum)
    V, w, points = _basis_on_nodes(spectrum, quad_cfg)

    values = np.asarray(field(*points), dtype=float)
    values = np.broadcast_to(values, points[0].shape).ravel()
    with np.errstate(invalid="ignore", over="ignore"):
        coeffs = V @ (w * values)

    bad = [m.index for m, c in zip(spectrum.modes, coeffs) if not math.isfinite(c)]
    if bad:
        raise ProjectionError(bad)

    return CoeffVector(coeffs, _tail_norm(coeffs))


def synthesize(spectrum: Spectrum, coeffs, point) -> float:
    _require_functions(spectrum)
    c = coeffs.coeffs if isinstance(coeffs, CoeffVector) else np.asarray(coeffs, dtype=float)
    if c.size != spectrum.K:
        raise SpectrumError(f"expected {spectrum.K} coefficients, got {c.size}")
    vals = np.array([spectrum.eigenfunction(m, point) for m in spectrum.modes], dtype=float)
    return float(np.dot(c, vals))


def gram_matrix(spectrum: Spectrum, n: int = GRAM_MODES, quad_cfg: ProjectionQuad = ProjectionQuad()) -> np.ndarray:
    _require_functions(spectrum)
    m = min(spectrum.K, n)
    V, w, _ = _basis_on_nodes(spectrum, quad_cfg)
    V = V[:m]
    return (V * w) @ V.T


def sobolev_norm(spectrum: Spectrum, coeffs, tau: float) -> float:
    """Squared D(A^tau) norm: sum_k lambda_k^(2 tau) h_k^2."""
    c = coeffs.coeffs if isinstance(coeffs, CoeffVector) else np.asarray(coeffs, dtype=float)
    if c.size != spectrum.K:
        raise SpectrumError(f"expected {spectrum.K} coefficients, got {c.size}")

    with np.errstate(over="ignore", invalid="ignore"):
        total = float(np.sum(spectrum.lambdas ** (2.0 * tau) * c ** 2))
    if not math.isfinite(total):
        raise OverflowError(f"D(A^{tau}) norm overflows for K={spectrum.K}")
    return total
