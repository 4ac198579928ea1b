"""Planar geometry helpers: polylines, frame transforms, oriented boxes."""

from __future__ import annotations

import math

import numpy as np


def wrap_angle(a: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    w = (a + math.pi) % (2.0 * math.pi) - math.pi
    # float rounding can land exactly on +pi
    return -math.pi if w >= math.pi else w


def to_local(points: np.ndarray, x: float, y: float, heading: float) -> np.ndarray:
    """World -> frame at (x, y) with +x along ``heading``."""
    c, s = math.cos(heading), math.sin(heading)
    d = np.asarray(points, dtype=float) - (x, y)
    return np.stack([d[..., 0] * c + d[..., 1] * s, -d[..., 0] * s + d[..., 1] * c], axis=-1)


def to_world(points: np.ndarray, x: float, y: float, heading: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    p = np.asarray(points, dtype=float)
    return np.stack([x + p[..., 0] * c - p[..., 1] * s, y + p[..., 0] * s + p[..., 1] * c], axis=-1)


class Polyline:
    """Piecewise-linear curve with arc-length parametrisation.

    Queries past either end extrapolate along the first/last segment, so a
    route can always be sampled a fixed distance ahead.
    """

    def __init__(self, points):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValueError("polyline needs at least two planar points")
        seg = np.diff(pts, axis=0)
        lens = np.hypot(seg[:, 0], seg[:, 1])
        keep = np.concatenate([[True], lens > 1e-9])
        if keep.sum() < 2:
            raise ValueError("polyline is degenerate")
        pts = pts[keep]
        seg = np.diff(pts, axis=0)
        lens = np.hypot(seg[:, 0], seg[:, 1])
        self.points = pts
        self.seg = seg
        self.seg_len = lens
        self.unit = seg / lens[:, None]
        self.cum = np.concatenate([[0.0], np.cumsum(lens)])
        self.length = float(self.cum[-1])

    def project(self, p) -> tuple[float, float, int]:
        """Closest-point projection.

        Returns ``(s, lateral, segment)``; ``lateral`` is signed, positive to
        the left of the direction of travel. ``s`` may fall outside
        ``[0, length]`` when the point lies beyond an endpoint.
        """
        p = np.asarray(p, dtype=float)
        rel = p - self.points[:-1]
        t = np.einsum("ij,ij->i", rel, self.unit)
        tc = np.clip(t, 0.0, self.seg_len)
        foot = self.points[:-1] + self.unit * tc[:, None]
        d2 = np.sum((p - foot) ** 2, axis=1)
        i = int(np.argmin(d2))
        along = float(t[i])
        if i > 0 and along < 0.0:
            along = 0.0
        if i < len(self.seg_len) - 1 and along > self.seg_len[i]:
            along = float(self.seg_len[i])
        u = self.unit[i]
        r = rel[i]
        lateral = float(u[0] * r[1] - u[1] * r[0])
        return float(self.cum[i] + along), lateral, i

    def _locate(self, s: float) -> tuple[int, float]:
        if s <= 0.0:
            return 0, s
        if s >= self.length:
            return len(self.seg_len) - 1, s - self.cum[-2]
        i = int(np.searchsorted(self.cum, s, side="right") - 1)
        return i, s - self.cum[i]

    def point_at(self, s: float) -> np.ndarray:
        i, a = self._locate(s)
        return self.points[i] + self.unit[i] * a

    def heading_at(self, s: float) -> float:
        i, _ = self._locate(s)
        return math.atan2(self.unit[i, 1], self.unit[i, 0])

    def offset(self, d: float) -> "Polyline":
        """Parallel curve shifted ``d`` metres to the left."""
        normals = np.stack([-self.unit[:, 1], self.unit[:, 0]], axis=1)
        vn = np.empty_like(self.points)
        vn[0] = normals[0]
        vn[-1] = normals[-1]
        if len(normals) > 1:
            avg = normals[:-1] + normals[1:]
            avg /= np.linalg.norm(avg, axis=1, keepdims=True)
            # miter length keeps the offset distance constant at corners
            cos_half = np.einsum("ij,ij->i", avg, normals[1:])
            vn[1:-1] = avg / np.maximum(cos_half, 0.2)[:, None]
        return Polyline(self.points + d * vn)

    def chord_walk(self, s0: float, n: int, step: float = 1.0) -> np.ndarray:
        """``n`` points along the curve, each exactly ``step`` from the previous.

        Starts at the curve point at arc length ``s0`` (not included).
        """
        out = np.empty((n, 2))
        i, a = self._locate(s0)
        c = self.points[i] + self.unit[i] * a
        t_lo = a
        last = len(self.seg_len) - 1
        for k in range(n):
            while True:
                a0 = self.points[i]
                u = self.unit[i]
                f = a0 - c
                # |f + t u|^2 = step^2, take the exit root
                b = float(f @ u)
                cc = float(f @ f) - step * step
                disc = b * b - cc
                if disc >= 0.0:
                    t = -b + math.sqrt(disc)
                    if t >= t_lo - 1e-12 and (t <= self.seg_len[i] or i == last):
                        break
                i += 1
                t_lo = 0.0
            c = a0 + u * t
            out[k] = c
            t_lo = t
        return out


def box_corners(x: float, y: float, heading: float, half_len: float, half_wid: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    ax = np.array([c, s]) * half_len
    ay = np.array([-s, c]) * half_wid
    ctr = np.array([x, y])
    return np.array([ctr + ax + ay, ctr + ax - ay, ctr - ax - ay, ctr - ax + ay])


def boxes_overlap(a: tuple, b: tuple) -> bool:
    """Separating-axis test for two oriented boxes ``(x, y, heading, half_len, half_wid)``."""
    ca = box_corners(*a)
    cb = box_corners(*b)
    for h in (a[2], b[2]):
        for ax in ((math.cos(h), math.sin(h)), (-math.sin(h), math.cos(h))):
            pa = ca @ ax
            pb = cb @ ax
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True
