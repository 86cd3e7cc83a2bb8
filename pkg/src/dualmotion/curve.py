"""Target curves: positions p*(lambda) and unit surface normals n*(lambda).

Coordinates are in the frame of the part-holding robot's TCP, in mm. The
parameter lambda is arc length measured along the sampled polyline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class CurveError(ValueError):
    pass


@dataclass(frozen=True)
class Curve:
    lam: np.ndarray
    p: np.ndarray
    n: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=float)
        p = np.asarray(self.p, dtype=float)
        n = np.asarray(self.n, dtype=float)
        if p.ndim != 2 or p.shape[1] != 3 or n.shape != p.shape or lam.shape != (len(p),):
            raise CurveError("curve arrays have inconsistent shapes")
        if len(lam) > 1 and np.any(np.diff(lam) <= 0):
            raise CurveError("lambda must be strictly increasing")
        for name, a in (("lam", lam), ("p", p), ("n", n)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @classmethod
    def from_points(cls, p, n):
        p = np.asarray(p, dtype=float)
        n = np.asarray(n, dtype=float)
        norms = np.linalg.norm(n, axis=1)
        if np.any(norms < 1e-12):
            bad = int(np.argmax(norms < 1e-12))
            raise CurveError(f"degenerate normal at row {bad}")
        seg = np.linalg.norm(np.diff(p, axis=0), axis=1)
        if np.any(seg <= 1e-12):
            bad = int(np.argmax(seg <= 1e-12)) + 1
            raise CurveError(f"duplicate consecutive point at row {bad}")
        lam = np.concatenate([[0.0], np.cumsum(seg)])
        return cls(lam, p, n / norms[:, None])

    @property
    def total_length(self):
        return float(self.lam[-1])

    def __len__(self):
        return len(self.lam)

    @property
    def step(self):
        """Nominal spacing (first interval)."""
        return float(self.lam[1] - self.lam[0]) if len(self) > 1 else 0.0

    def subset(self, idx):
        idx = np.asarray(idx)
        return Curve(self.lam[idx], self.p[idx], self.n[idx])


def load_curve(path) -> Curve:
    """Read a 6-column CSV (px,py,pz,nx,ny,nz); ``#`` lines are skipped."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split(",")
            if len(parts) != 6:
                raise CurveError(f"{path}:{lineno}: expected 6 columns, got {len(parts)}")
            try:
                rows.append([float(v) for v in parts])
            except ValueError as exc:
                raise CurveError(f"{path}:{lineno}: malformed row") from exc
    if len(rows) < 2:
        raise CurveError(f"{path}: need at least 2 rows")
    arr = np.array(rows)
    if not np.all(np.isfinite(arr)):
        raise CurveError(f"{path}: non-finite value")
    return Curve.from_points(arr[:, :3], arr[:, 3:])


def save_curve(curve: Curve, path, comment=None):
    with open(path, "w") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        for p, n in zip(curve.p, curve.n):
            fh.write(",".join(repr(float(v)) for v in (*p, *n)) + "\n")


def slerp_normals(n0, n1, t):
    """Constant-rate rotation from n0 to n1 (rowwise), t in [0, 1]."""
    n0 = np.atleast_2d(n0)
    n1 = np.atleast_2d(n1)
    t = np.asarray(t, dtype=float).reshape(-1, 1)
    dot = np.clip(np.sum(n0 * n1, axis=1, keepdims=True), -1.0, 1.0)
    omega = np.arccos(dot)
    so = np.sin(omega)
    small = so < 1e-9
    safe = np.where(small, 1.0, so)
    a = np.where(small, 1.0 - t, np.sin((1.0 - t) * omega) / safe)
    b = np.where(small, t, np.sin(t * omega) / safe)
    out = a * n0 + b * n1
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def interpolate(curve: Curve, lam_q):
    """Positions and normals at arbitrary lambda (clamped to the curve span)."""
    lam_q = np.clip(np.atleast_1d(np.asarray(lam_q, dtype=float)), curve.lam[0], curve.lam[-1])
    i = np.clip(np.searchsorted(curve.lam, lam_q, side="right") - 1, 0, len(curve) - 2)
    t = (lam_q - curve.lam[i]) / (curve.lam[i + 1] - curve.lam[i])
    p = curve.p[i] + t[:, None] * (curve.p[i + 1] - curve.p[i])
    n = slerp_normals(curve.n[i], curve.n[i + 1], t)
    return p, n


def resample(curve: Curve, step: float) -> Curve:
    if not step > 0 or not step < curve.total_length:
        raise CurveError(f"resample step must lie in (0, {curve.total_length}), got {step}")
    lf = curve.total_length
    grid = np.arange(0.0, lf, step)
    # a short final interval is merged into the previous one (keeps it in [step/2, 3step/2))
    if len(grid) > 1 and lf - grid[-1] < 0.5 * step - 1e-9 * max(1.0, lf):
        grid = grid[:-1]
    grid = np.append(grid, lf)
    p, n = interpolate(curve, grid)
    p[0], p[-1] = curve.p[0], curve.p[-1]
    n[0], n[-1] = curve.n[0], curve.n[-1]
    return Curve(grid, p, n)


@dataclass(frozen=True)
class CurveDerivatives:
    dp: np.ndarray  # p*'(lambda), ~unit
    dn: np.ndarray  # n*'(lambda), 1/mm
    ddp: np.ndarray  # p*''(lambda), 1/mm


def curve_derivatives(curve: Curve) -> CurveDerivatives:
    """Finite-difference derivatives w.r.t. lambda.

    Central differences in the interior, second-order one-sided at the ends.
    """
    if len(curve) < 3:
        raise CurveError("need at least 3 samples for derivatives")
    lam = curve.lam
    dp = np.gradient(curve.p, lam, axis=0, edge_order=2)
    dn = np.gradient(curve.n, lam, axis=0, edge_order=2)
    ddp = np.gradient(dp, lam, axis=0, edge_order=2)
    return CurveDerivatives(dp, dn, ddp)


def closest_points(curve: Curve, pts, hint=None, window=None):
    """Closest point on the curve polyline for each query point.

    Returns ``(lam, foot, dist, seg)`` where ``foot`` is the projection onto the
    nearest polyline segment. The coarse nearest-sample search is brute force
    unless ``hint``/``window`` restrict it to a sample-index band.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    P = curve.p
    m = len(P)
    d2 = np.sum((pts[:, None, :] - P[None, :, :]) ** 2, axis=2) if window is None else None
    if d2 is None:
        hint = np.asarray(hint, dtype=int)
        lo = np.clip(hint - window, 0, m - 1)
        idx = np.empty(len(pts), dtype=int)
        for k in range(len(pts)):
            seg = P[lo[k] : min(m, hint[k] + window + 1)]
            idx[k] = lo[k] + int(np.argmin(np.sum((seg - pts[k]) ** 2, axis=1)))
    else:
        idx = np.argmin(d2, axis=1)
    best_lam = np.empty(len(pts))
    best_foot = np.empty_like(pts)
    best_d = np.full(len(pts), np.inf)
    best_seg = np.zeros(len(pts), dtype=int)
    for off in (-1, 0):
        s = np.clip(idx + off, 0, m - 2)
        a = P[s]
        ab = P[s + 1] - a
        t = np.clip(np.sum((pts - a) * ab, axis=1) / np.sum(ab * ab, axis=1), 0.0, 1.0)
        foot = a + t[:, None] * ab
        d = np.linalg.norm(pts - foot, axis=1)
        better = d < best_d
        best_d[better] = d[better]
        best_foot[better] = foot[better]
        best_lam[better] = (curve.lam[s] + t * (curve.lam[s + 1] - curve.lam[s]))[better]
        best_seg[better] = s[better]
    return best_lam, best_foot, best_d, best_seg
