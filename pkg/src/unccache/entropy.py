"""Spectral quantities of token-sequence matrices.

Everything here works on float64 numpy arrays and is free of side effects.
A token matrix ``x`` has shape ``(N, d)``: one row per token.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    BadK,
    DegenerateInput,
    FlatSpectrum,
    InvalidAlpha,
    NotPSD,
    NotSymmetric,
    ZeroVariance,
)

SYMMETRY_TOL = 1e-10
NEG_EIG_TOL = 1e-9
RANK_TOL = 1e-9


@dataclass(frozen=True)
class Spectrum:
    """Descending eigenvalues of a symmetric PSD matrix."""

    eigenvalues: np.ndarray
    trace: float

    @property
    def dim(self) -> int:
        return int(self.eigenvalues.shape[0])

    @classmethod
    def from_values(cls, values) -> "Spectrum":
        """Build a spectrum from raw values (any order, must be >= -1e-9)."""
        vals = np.asarray(values, dtype=np.float64).ravel()
        if vals.size == 0:
            raise DegenerateInput("empty spectrum")
        if np.any(vals < -NEG_EIG_TOL):
            raise NotPSD(f"eigenvalue {vals.min():.3e} below -{NEG_EIG_TOL}")
        vals = np.sort(np.clip(vals, 0.0, None))[::-1]
        return cls(eigenvalues=vals, trace=float(vals.sum()))

    def normalized(self) -> np.ndarray:
        if self.trace <= 0:
            raise DegenerateInput("spectrum has zero trace")
        return self.eigenvalues / self.trace

    def numerical_rank(self, tol: float = RANK_TOL) -> int:
        return int(np.count_nonzero(self.eigenvalues > tol))

    def to_json(self) -> dict:
        return {"dim": self.dim, "eigenvalues": [float(v) for v in self.eigenvalues]}

    @classmethod
    def from_json(cls, obj: dict) -> "Spectrum":
        out = cls.from_values(obj["eigenvalues"])
        if out.dim != int(obj["dim"]):
            raise DegenerateInput("dim does not match eigenvalue count")
        return out


def covariance(x) -> np.ndarray:
    """Trace-one covariance of the mean-centred, row-normalised token matrix.

    Each centred row is scaled to unit L2 norm before the outer products are
    averaged, so the trace is exactly one up to rounding.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DegenerateInput(f"need a 2-D matrix with at least 2 rows, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DegenerateInput("token matrix has non-finite entries")
    centered = x - x.mean(axis=0)
    norms = np.linalg.norm(centered, axis=1)
    scale = np.abs(x).max() if x.size else 0.0
    # a row sitting on the mean has no direction
    if np.any(norms <= 1e-12 * max(scale, 1.0)):
        raise DegenerateInput("a centred row has zero norm")
    units = centered / norms[:, None]
    cov = units.T @ units / x.shape[0]
    return 0.5 * (cov + cov.T)


def _check_symmetric(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise NotSymmetric(f"matrix must be square, got {m.shape}")
    if np.max(np.abs(m - m.T), initial=0.0) > SYMMETRY_TOL:
        raise NotSymmetric("matrix asymmetry exceeds tolerance")
    return 0.5 * (m + m.T)


def eigh(m) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of a symmetric matrix, eigenvalues descending.

    Returns ``(values, vectors)`` with ``m = vectors @ diag(values) @ vectors.T``.
    """
    m = _check_symmetric(m)
    vals, vecs = np.linalg.eigh(m)
    order = np.argsort(vals, kind="stable")[::-1]
    return vals[order], vecs[:, order]


def spectrum(m) -> Spectrum:
    m = _check_symmetric(m)
    vals, _ = eigh(m)
    if vals.size and vals[-1] < -NEG_EIG_TOL:
        raise NotPSD(f"eigenvalue {vals[-1]:.3e} below -{NEG_EIG_TOL}")
    vals = np.clip(vals, 0.0, None)
    return Spectrum(eigenvalues=vals, trace=float(np.trace(m)))


def token_spectrum(x) -> Spectrum:
    """Shortcut for ``spectrum(covariance(x))``."""
    return spectrum(covariance(x))


def _xlogx(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    pos = p > 0
    out[pos] = p[pos] * np.log(p[pos])
    return out


def renyi_entropy(s: Spectrum, alpha: float) -> float:
    if not alpha > 0 or alpha == 1:
        raise InvalidAlpha(f"alpha must be > 0 and != 1, got {alpha}")
    p = s.normalized()
    p = p[p > 0]
    return float(np.log(np.sum(p**alpha)) / (1.0 - alpha))


def von_neumann_entropy(s: Spectrum) -> float:
    p = s.normalized()
    return float(-np.sum(_xlogx(p)))


def trace_form_entropy(m) -> float:
    """-Tr(M log M), with the matrix log taken through the eigenbasis."""
    vals, vecs = eigh(m)
    vals = np.clip(vals, 0.0, None)
    logs = np.zeros_like(vals)
    pos = vals > 0
    logs[pos] = np.log(vals[pos])
    # 0 * log 0 := 0, so zero modes contribute nothing to M log M
    m_log_m = (vecs * (vals * logs)) @ vecs.T
    return float(-np.trace(m_log_m))


def effective_rank(s: Spectrum) -> float:
    return float(np.exp(von_neumann_entropy(s)))


def elbow_index(s: Spectrum) -> int:
    """Number of leading eigenvalues that sit before the spectrum's elbow.

    The elbow is the interior point of the scree curve farthest from the chord
    joining its endpoints, with both axes min-max scaled to [0, 1]. Ties go to
    the smaller index. Returns ``k`` with ``1 <= k < D``.
    """
    vals = s.eigenvalues
    d = vals.shape[0]
    if d < 3:
        raise FlatSpectrum(f"elbow needs at least 3 eigenvalues, got {d}")
    span = vals[0] - vals[-1]
    if span < 1e-12:
        raise FlatSpectrum("spectrum is flat")
    xs = np.arange(d, dtype=np.float64) / (d - 1)
    ys = (vals - vals[-1]) / span
    # chord runs from (0, 1) to (1, 0): distance is |x + y - 1| / sqrt(2)
    dist = np.abs(xs + ys - 1.0) / np.sqrt(2.0)
    interior = dist[1:-1]
    best = interior.max()
    elbow = 1 + int(np.flatnonzero(interior >= best - 1e-12)[0])
    # elbow is a 0-based position in [1, D-2]; everything before it is kept
    return elbow


def truncated_entropy(s: Spectrum, k: int) -> float:
    """Entropy over the top-k eigenvalues, used as-is (no renormalisation)."""
    if not 1 <= k <= s.dim:
        raise BadK(f"k={k} outside [1, {s.dim}]")
    return float(-np.sum(_xlogx(s.eigenvalues[:k])))


def truncated_erank(s: Spectrum, k: int) -> float:
    return float(np.exp(truncated_entropy(s, k)))


def resolve_k(s: Spectrum, mode) -> int:
    """Truncation depth for a top-k mode: ``"elbow"``, ``"all"`` or an int.

    ``"elbow"`` falls back to the full spectrum when no elbow exists.
    """
    if mode == "all":
        return s.dim
    if mode == "elbow":
        try:
            return elbow_index(s)
        except FlatSpectrum:
            return s.dim
    k = int(mode)
    return min(max(k, 1), s.dim)


def truncated_erank_of(x, mode="elbow") -> float:
    """Truncated effective rank of a token matrix under a top-k mode."""
    s = token_spectrum(x)
    return truncated_erank(s, resolve_k(s, mode))


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape or a.size < 2:
        raise ValueError("pearson needs two equal-length sequences of length >= 2")
    da = a - a.mean()
    db = b - b.mean()
    va = np.dot(da, da)
    vb = np.dot(db, db)
    if va == 0 or vb == 0:
        raise ZeroVariance("input has zero variance")
    r = float(np.dot(da, db) / np.sqrt(va * vb))
    return min(1.0, max(-1.0, r))
