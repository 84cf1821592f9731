"""Geodesic and Euclidean distance transforms from scribble seeds.

The geodesic transform runs raster sweeps over the 8-connected grid (26 in 3D)
with per-step cost sqrt(lambda^2 * |dpos|^2 + sum_c dI_c^2). With lambda = 0 the
accumulated cost is a discretization of the image-gradient path integral, so a
constant image yields an identically zero map.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy import ndimage

from .tensorcore import DiffTensor

INF = np.inf


class SeedError(ValueError):
    pass


class ScribbleBoundsError(ValueError):
    def __init__(self, pixels):
        self.pixels = list(pixels)
        super().__init__(f"scribble pixels out of bounds: {self.pixels}")


@dataclass
class ImageGrid:
    """Multi-channel scalar field with per-axis spacing.

    values has shape [C, *extents]; extents is (H, W) or (D, H, W).
    """

    values: np.ndarray
    spacing: tuple = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 2:
            self.values = self.values[None]
        if self.values.ndim not in (3, 4):
            raise ValueError(f"expected [C, H, W] or [C, D, H, W], got {self.values.shape}")
        if self.spacing is None:
            self.spacing = (1.0,) * (self.values.ndim - 1)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != self.values.ndim - 1:
            raise ValueError("spacing length must match spatial rank")
        if any(s <= 0 for s in self.spacing):
            raise ValueError("spacing must be positive")
        if not np.isfinite(self.values).all():
            raise ValueError("image values must be finite")

    @property
    def channels(self):
        return self.values.shape[0]

    @property
    def extents(self):
        return self.values.shape[1:]

    def diagonal(self):
        return float(np.sqrt(sum((e * s) ** 2 for e, s in zip(self.extents, self.spacing))))


@dataclass
class ScribbleSet:
    """Foreground and background seed pixels. The two sets must be disjoint."""

    foreground: set = field(default_factory=set)
    background: set = field(default_factory=set)

    def __post_init__(self):
        self.foreground = {tuple(int(c) for c in p) for p in self.foreground}
        self.background = {tuple(int(c) for c in p) for p in self.background}
        overlap = self.foreground & self.background
        if overlap:
            raise ValueError(f"pixels scribbled as both classes: {sorted(overlap)}")

    def check_bounds(self, extents):
        bad = [p for p in sorted(self.foreground | self.background)
               if len(p) != len(extents)
               or any(c < 0 or c >= e for c, e in zip(p, extents))]
        if bad:
            raise ScribbleBoundsError(bad)

    def is_empty(self):
        return not self.foreground and not self.background


def _as_seed_list(seeds, extents):
    seeds = [tuple(int(c) for c in p) for p in seeds]
    if not seeds:
        raise SeedError("seed set is empty")
    bad = [p for p in seeds
           if len(p) != len(extents) or any(c < 0 or c >= e for c, e in zip(p, extents))]
    if bad:
        raise ScribbleBoundsError(bad)
    return seeds


def _neighborhood(ndim, spacing, lam):
    """All nonzero offsets of the 3^ndim kernel with their spatial step costs."""
    offsets = []
    for off in np.ndindex(*(3,) * ndim):
        d = tuple(o - 1 for o in off)
        if all(v == 0 for v in d):
            continue
        offsets.append(d)
    offsets = np.array(offsets, dtype=np.int64)
    spatial = np.sqrt(((offsets * np.array(spacing)) ** 2).sum(axis=1))
    return offsets, (lam * lam) * spatial * spatial


# numba kernels: one forward or backward sweep, returning whether anything changed.
# Offsets passed in are restricted to neighbors already final in the sweep order.


@njit(cache=True)
def _sweep2d(dist, img, offs, sp2, reverse):
    H, W = dist.shape
    C = img.shape[0]
    changed = False
    ys = range(H - 1, -1, -1) if reverse else range(H)
    for y in ys:
        xs = range(W - 1, -1, -1) if reverse else range(W)
        for x in xs:
            best = dist[y, x]
            for k in range(offs.shape[0]):
                ny = y + offs[k, 0]
                nx = x + offs[k, 1]
                if ny < 0 or ny >= H or nx < 0 or nx >= W:
                    continue
                di2 = 0.0
                for c in range(C):
                    dv = img[c, y, x] - img[c, ny, nx]
                    di2 += dv * dv
                cand = dist[ny, nx] + np.sqrt(sp2[k] + di2)
                if cand < best:
                    best = cand
            if best < dist[y, x]:
                dist[y, x] = best
                changed = True
    return changed


@njit(cache=True)
def _sweep3d(dist, img, offs, sp2, reverse):
    D, H, W = dist.shape
    C = img.shape[0]
    changed = False
    zs = range(D - 1, -1, -1) if reverse else range(D)
    for z in zs:
        ys = range(H - 1, -1, -1) if reverse else range(H)
        for y in ys:
            xs = range(W - 1, -1, -1) if reverse else range(W)
            for x in xs:
                best = dist[z, y, x]
                for k in range(offs.shape[0]):
                    nz = z + offs[k, 0]
                    ny = y + offs[k, 1]
                    nx = x + offs[k, 2]
                    if nz < 0 or nz >= D or ny < 0 or ny >= H or nx < 0 or nx >= W:
                        continue
                    di2 = 0.0
                    for c in range(C):
                        dv = img[c, z, y, x] - img[c, nz, ny, nx]
                        di2 += dv * dv
                    cand = dist[nz, ny, nx] + np.sqrt(sp2[k] + di2)
                    if cand < best:
                        best = cand
                if best < dist[z, y, x]:
                    dist[z, y, x] = best
                    changed = True
    return changed


def _causal_split(offsets):
    """Split offsets into those preceding a pixel in raster order and the rest."""
    fwd, bwd = [], []
    for d in offsets:
        before = next((v < 0 for v in d if v != 0))
        (fwd if before else bwd).append(d)
    return np.array(fwd, dtype=np.int64), np.array(bwd, dtype=np.int64)


MAX_SWEEP_PAIRS = 10


def geodesic_distance_map(image: ImageGrid, seeds, lambda_spatial: float = 0.0,
                          mode: str = "single_pass") -> np.ndarray:
    """Raster-scan geodesic distance from a seed set.

    mode "single_pass" runs exactly one forward plus one backward sweep;
    "converged" repeats sweep pairs until no value changes (at most
    MAX_SWEEP_PAIRS), which reaches the exact grid shortest-path fixed point.
    """
    if mode not in ("single_pass", "converged"):
        raise ValueError(f"unknown mode {mode!r}")
    extents = image.extents
    seeds = _as_seed_list(seeds, extents)
    offsets, _ = _neighborhood(len(extents), image.spacing, lambda_spatial)
    fwd, bwd = _causal_split([tuple(o) for o in offsets])
    spacing = np.array(image.spacing)

    def spatial2(offs):
        return (lambda_spatial ** 2) * ((offs * spacing) ** 2).sum(axis=1)

    dist = np.full(extents, INF)
    for p in seeds:
        dist[p] = 0.0

    img = np.ascontiguousarray(image.values)
    sweep = _sweep2d if len(extents) == 2 else _sweep3d
    pairs = 1 if mode == "single_pass" else MAX_SWEEP_PAIRS
    for _ in range(pairs):
        ch_f = sweep(dist, img, fwd, spatial2(fwd), False)
        ch_b = sweep(dist, img, bwd, spatial2(bwd), True)
        if not (ch_f or ch_b):
            break
    return dist


def dijkstra_geodesic_oracle(image: ImageGrid, seeds, lambda_spatial: float = 0.0) -> np.ndarray:
    """Exact multi-seed shortest path on the same weighted grid graph.

    Reference implementation for the raster-scan transform; heap-based and
    deliberately free of any sweep-ordering logic.
    """
    extents = image.extents
    seeds = _as_seed_list(seeds, extents)
    offsets, _ = _neighborhood(len(extents), image.spacing, lambda_spatial)
    spacing = np.array(image.spacing)
    spatial2 = (lambda_spatial ** 2) * ((offsets * spacing) ** 2).sum(axis=1)
    img = image.values

    dist = np.full(extents, INF)
    heap = []
    for p in seeds:
        dist[p] = 0.0
        heap.append((0.0, p))
    heapq.heapify(heap)
    while heap:
        d, p = heapq.heappop(heap)
        if d > dist[p]:
            continue
        for off, s2 in zip(offsets, spatial2):
            npix = tuple(int(a + b) for a, b in zip(p, off))
            if any(c < 0 or c >= e for c, e in zip(npix, extents)):
                continue
            di2 = float(((img[(slice(None),) + p] - img[(slice(None),) + npix]) ** 2).sum())
            nd = d + np.sqrt(s2 + di2)
            if nd < dist[npix]:
                dist[npix] = nd
                heapq.heappush(heap, (nd, npix))
    return dist


def euclidean_distance_map(seeds, extents, spacing=None) -> np.ndarray:
    """Exact Euclidean distance to the nearest seed, spacing-scaled."""
    extents = tuple(int(e) for e in extents)
    if spacing is None:
        spacing = (1.0,) * len(extents)
    seeds = _as_seed_list(seeds, extents)
    marker = np.ones(extents, dtype=bool)
    for p in seeds:
        marker[p] = False
    return ndimage.distance_transform_edt(marker, sampling=spacing)


def encode_interactions(image: ImageGrid, initial_seg, scribbles: ScribbleSet,
                        metric: str = "geodesic", rng=None,
                        mode: str = "single_pass") -> DiffTensor:
    """Assemble the refinement-network input of C_I + 3 channels.

    Channel order: raw image channels, initial foreground probability, the
    foreground-scribble distance map, then the background-scribble map. A
    scribble class with no pixels gets i.i.d. uniform values over
    [0, image diagonal] drawn from rng.
    """
    if metric not in ("geodesic", "euclidean"):
        raise ValueError(f"unknown metric {metric!r}")
    extents = image.extents
    if len(extents) != 2:
        raise ValueError("interaction encoding is 2D only")
    initial_seg = np.asarray(initial_seg, dtype=np.float64)
    if initial_seg.shape != extents:
        raise ValueError(f"initial segmentation {initial_seg.shape} vs image {extents}")
    scribbles.check_bounds(extents)

    def one_map(seed_set):
        if not seed_set:
            if rng is None:
                raise SeedError("empty scribble class needs an rng for random fill")
            return rng.uniform(0.0, image.diagonal(), size=extents)
        if metric == "geodesic":
            return geodesic_distance_map(image, seed_set, mode=mode)
        return euclidean_distance_map(seed_set, extents, image.spacing)

    chans = np.concatenate([
        image.values,
        initial_seg[None],
        one_map(scribbles.foreground)[None],
        one_map(scribbles.background)[None],
    ], axis=0)
    return DiffTensor(chans)
