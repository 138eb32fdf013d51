"""Segment-level scene encoding: grouping, sampling, and the three feature streams.

Points are grouped into segments by graph-based greedy merging over a kNN
graph, then every representation (multi-scale voxel descriptors, rendered
multi-view image features, per-segment point sets) is pooled to segment
granularity so they all share one M x D layout.

Everything parameter-independent is precomputed once per scene into a
SceneCache; the trainable stream functions take explicit weight tensors and
run under the autodiff tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

VOXEL_STRIDES = (1, 2, 4, 8)


# ---------------------------------------------------------------------------
# graph construction and segmentation


def knn_graph(points, k, colors=None, color_weight=0.0):
    """Symmetric k-nearest-neighbor edges with weight ||dp|| + beta * ||dc||.

    Returns a list of (i, j, weight) with i < j, sorted by (i, j). Duplicate
    points produce zero-weight edges.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < 2:
        raise ValueError("knn_graph needs at least two points")
    if not 1 <= k < n:
        raise ValueError(f"k must be in [1, {n - 1}], got {k}")
    if colors is not None and color_weight != 0.0:
        colors = np.asarray(colors, dtype=np.float64)
    else:
        colors = None

    def _sq_dists(a_chunk, b_all):
        sq = (a_chunk**2).sum(axis=1)[:, None] + (b_all**2).sum(axis=1)[None, :]
        sq -= 2.0 * a_chunk @ b_all.T
        return np.maximum(sq, 0.0)

    pairs = set()
    chunk = max(1, int(2**21 // max(n, 1)) + 1)
    cand = min(n - 1, k + 2)
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        d = np.sqrt(_sq_dists(points[lo:hi], points))
        if colors is not None:
            d = d + color_weight * np.sqrt(_sq_dists(colors[lo:hi], colors))
        rows = np.arange(lo, hi)
        d[np.arange(hi - lo), rows] = np.inf  # exclude self
        part = np.argpartition(d, cand - 1, axis=1)[:, :cand]
        for r in range(hi - lo):
            i = lo + r
            order = np.lexsort((part[r], d[r, part[r]]))[:k]
            for j in part[r][order]:
                pairs.add((min(i, int(j)), max(i, int(j))))
    # recompute the kept weights in the exact definitional form
    out = []
    for i, j in sorted(pairs):
        w = float(np.linalg.norm(points[i] - points[j]))
        if colors is not None:
            w += color_weight * float(np.linalg.norm(colors[i] - colors[j]))
        out.append((i, j, w))
    return out


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))
        self.size = [1] * n
        self.internal = [0.0] * n  # max merged-edge weight inside each component

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b, weight):
        a, b = self.find(a), self.find(b)
        if a == b:
            return a
        if self.size[a] < self.size[b]:
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        self.internal[a] = max(self.internal[a], self.internal[b], weight)
        return a


def fh_segments(n_points, edges, tau, min_size):
    """Greedy graph segmentation with threshold tau/|C| and a min-size merge pass.

    Edges are processed in (weight, i, j) order, so the result is invariant
    under permutation of the input list. Ids are compacted to [0, M) in order
    of first appearance by point index.
    """
    uf = _UnionFind(n_points)
    for i, j, w in sorted(edges, key=lambda e: (e[2], e[0], e[1])):
        a, b = uf.find(i), uf.find(j)
        if a == b:
            continue
        thr_a = uf.internal[a] + tau / uf.size[a]
        thr_b = uf.internal[b] + tau / uf.size[b]
        if w <= min(thr_a, thr_b):
            uf.union(a, b, w)
    # merge undersized components along edges, in the same order
    for i, j, w in sorted(edges, key=lambda e: (e[2], e[0], e[1])):
        a, b = uf.find(i), uf.find(j)
        if a != b and (uf.size[a] < min_size or uf.size[b] < min_size):
            uf.union(a, b, w)
    labels = np.empty(n_points, dtype=np.int64)
    remap = {}
    for p in range(n_points):
        root = uf.find(p)
        if root not in remap:
            remap[root] = len(remap)
        labels[p] = remap[root]
    return labels


def fps(points, n, start=0):
    """Greedy max-min farthest point sampling; ties pick the lowest index."""
    points = np.asarray(points, dtype=np.float64)
    total = points.shape[0]
    if not 1 <= n <= total:
        raise ValueError(f"cannot sample {n} of {total} points")
    chosen = [int(start)]
    dist = np.linalg.norm(points - points[start], axis=1)
    for _ in range(n - 1):
        nxt = int(np.argmax(dist))  # argmax returns the first max: lowest index
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return np.asarray(chosen, dtype=np.int64)


# ---------------------------------------------------------------------------
# voxel grid


class VoxelGrid:
    """Floor-quantized voxelization with parent levels at strides 1, 2, 4, 8."""

    def __init__(self, points, size):
        if size <= 0:
            raise ValueError("voxel size must be positive")
        self.size = float(size)
        points = np.asarray(points, dtype=np.float64)
        base = np.floor(points / self.size).astype(np.int64)
        self.base_coords, self.point_to_base = np.unique(base, axis=0, return_inverse=True)
        self.point_to_base = self.point_to_base.astype(np.int64)
        # per level: unique cell coords and base-voxel -> cell index
        self.level_coords = []
        self.base_to_cell = []
        for stride in VOXEL_STRIDES:
            parent = np.floor_divide(self.base_coords, stride)
            cells, idx = np.unique(parent, axis=0, return_inverse=True)
            self.level_coords.append(cells)
            self.base_to_cell.append(idx.astype(np.int64))

    @property
    def n_base(self):
        return self.base_coords.shape[0]

    def voxel_of(self, point):
        return tuple(int(v) for v in np.floor(np.asarray(point) / self.size))

    def points_in_voxel(self, coord):
        """Indices of points whose base voxel is `coord`."""
        coord = np.asarray(coord, dtype=np.int64)
        match = np.nonzero((self.base_coords == coord).all(axis=1))[0]
        if match.size == 0:
            return np.empty(0, dtype=np.int64)
        return np.nonzero(self.point_to_base == match[0])[0]

    @staticmethod
    def parent_coord(coord, stride):
        return tuple(int(v) for v in np.floor_divide(np.asarray(coord, dtype=np.int64), stride))


def voxelize(points, size):
    return VoxelGrid(points, size)


# ---------------------------------------------------------------------------
# Fourier positional encoding


class FourierPE:
    """Fixed Gaussian frequency matrix; encodes 3D coords to [cos || sin]."""

    def __init__(self, n_freqs, seed, sigma=1.0):
        rng = np.random.default_rng(np.random.PCG64([seed, 0xF0E]))
        self.weights = rng.normal(scale=sigma, size=(n_freqs, 3))

    @property
    def out_dim(self):
        return 2 * self.weights.shape[0]

    def __call__(self, coords):
        return fourier_pe(coords, self.weights)


def fourier_pe(coords, freq_weights):
    """[cos(2 pi x W^T) || sin(2 pi x W^T)] for each row of coords."""
    coords = np.asarray(coords, dtype=np.float64)
    ang = 2.0 * np.pi * coords @ np.asarray(freq_weights, dtype=np.float64).T
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=1)


# ---------------------------------------------------------------------------
# exact pooling helpers (numpy, outside the tape)


def segment_mean_np(x, seg_ids, num_segments):
    """Arithmetic per-segment mean, accumulated in row order."""
    x = np.asarray(x, dtype=np.float64)
    seg_ids = np.asarray(seg_ids, dtype=np.int64)
    counts = np.bincount(seg_ids, minlength=num_segments).astype(np.float64)
    acc = np.zeros((num_segments, x.shape[1]), dtype=np.float64)
    np.add.at(acc, seg_ids, x)
    return acc / np.maximum(counts, 1.0)[:, None]


def segment_centroids(points, seg_ids, num_segments):
    return segment_mean_np(points, seg_ids, num_segments)


# ---------------------------------------------------------------------------
# virtual rendering and back-projection


@dataclass
class View:
    depth: np.ndarray  # (h, w), +inf where empty
    hit_point: np.ndarray  # (h, w) int64, -1 where empty
    features: np.ndarray  # (h, w, E + 3)


def point_class_ids(scene, floor_class_id=0):
    cls = np.full(scene.n_points, floor_class_id, dtype=np.int64)
    for inst in scene.instances:
        cls[inst.point_indices] = inst.class_id
    return cls


def render_views(scene, class_embeddings, floor_class_id=0):
    """Point-splat z-buffer render of every camera.

    The pixel feature is the frozen class embedding of the visible point's
    instance class plus the point's RGB in three extra channels. Depth ties
    resolve to the lowest point index.
    """
    pts = scene.points
    cls = point_class_ids(scene, floor_class_id)
    views = []
    for cam in scene.cameras:
        w, h = cam.resolution
        forward = cam.look_at - cam.position
        forward = forward / np.linalg.norm(forward)
        right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
        nr = np.linalg.norm(right)
        if nr < 1e-9:  # straight-down camera: pick a fixed right axis
            right = np.array([1.0, 0.0, 0.0])
        else:
            right = right / nr
        up = np.cross(right, forward)
        rel = pts - cam.position
        z = rel @ forward
        x = rel @ right
        y = rel @ up
        focal = (w / 2.0) / np.tan(np.deg2rad(cam.fov) / 2.0)
        valid = z > 1e-6
        u = np.zeros_like(z)
        v = np.zeros_like(z)
        u[valid] = np.floor(w / 2.0 + focal * x[valid] / z[valid])
        v[valid] = np.floor(h / 2.0 - focal * y[valid] / z[valid])
        valid &= (u >= 0) & (u < w) & (v >= 0) & (v < h)
        idx = np.nonzero(valid)[0]
        pix = (v[idx].astype(np.int64) * w + u[idx].astype(np.int64))
        order = np.lexsort((idx, z[idx], pix))
        pix_sorted = pix[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = pix_sorted[1:] != pix_sorted[:-1]
        winners = idx[order][first]
        win_pix = pix_sorted[first]

        depth = np.full(h * w, np.inf)
        hit = np.full(h * w, -1, dtype=np.int64)
        feat = np.zeros((h * w, class_embeddings.shape[1] + 3))
        depth[win_pix] = z[winners]
        hit[win_pix] = winners
        feat[win_pix, :class_embeddings.shape[1]] = class_embeddings[cls[winners]]
        feat[win_pix, class_embeddings.shape[1]:] = scene.colors[winners]
        views.append(View(depth=depth.reshape(h, w), hit_point=hit.reshape(h, w),
                          features=feat.reshape(h, w, -1)))
    return views


def backproject_point_features(views, n_points):
    """Mean of all pixel features that landed on each point; zeros if unseen."""
    dim = views[0].features.shape[2] if views else 0
    acc = np.zeros((n_points, dim))
    count = np.zeros(n_points)
    for view in views:
        hits = view.hit_point.reshape(-1)
        feats = view.features.reshape(-1, dim)
        seen = hits >= 0
        np.add.at(acc, hits[seen], feats[seen])
        np.add.at(count, hits[seen], 1.0)
    out = acc / np.maximum(count, 1.0)[:, None]
    out[count == 0] = 0.0
    return out


# ---------------------------------------------------------------------------
# per-scene parameter-independent cache


@dataclass
class SceneCache:
    scene: object
    seg_ids: np.ndarray  # (N,)
    n_segments: int
    centroids: np.ndarray  # (M, 3)
    voxel_grid: VoxelGrid
    voxel_descs: list  # per level: (cells x (4 + 2F)) descriptor matrix
    voxel_base_to_cell: list  # per level: (B,) cell index per base voxel
    point_to_base: np.ndarray  # (N,)
    img_seg_desc: np.ndarray  # (M, E + 3)
    point_inputs: np.ndarray  # (M * S, 6) normalized xyz + rgb
    point_block_ids: np.ndarray  # (M * S,)
    query_indices: np.ndarray  # (Q,) fps indices into scene points
    query_positions: np.ndarray  # (Q, 3)
    query_pe: np.ndarray  # (Q, 2F)
    seg_pe: np.ndarray  # (M, 2F) fourier encoding of centroids
    gt_seg_masks: np.ndarray  # (M, n_instances) binary, majority vote
    seg_point_lists: list  # per segment: point index array


def voxel_level_descriptors(scene, grid, pe):
    """Per level: occupancy count, mean color, and center encoding per cell."""
    descs = []
    for level, stride in enumerate(VOXEL_STRIDES):
        cell_of_point = grid.base_to_cell[level][grid.point_to_base]
        n_cells = grid.level_coords[level].shape[0]
        counts = np.bincount(cell_of_point, minlength=n_cells).astype(np.float64)
        mean_color = segment_mean_np(scene.colors, cell_of_point, n_cells)
        centers = (grid.level_coords[level] + 0.5) * grid.size * stride
        descs.append(np.concatenate(
            [counts[:, None], mean_color, pe(centers)], axis=1))
    return descs


def sample_segment_points(scene, seg_ids, n_segments, samples_per_segment, rng):
    """Per segment: S points with replacement, centered and scaled to a unit sphere."""
    blocks = []
    for m in range(n_segments):
        rows = np.nonzero(seg_ids == m)[0]
        pick = rows[rng.integers(0, rows.size, size=samples_per_segment)]
        xyz = scene.points[pick]
        centroid = scene.points[rows].mean(axis=0)
        radius = np.linalg.norm(scene.points[rows] - centroid, axis=1).max()
        scale = radius if radius > 0 else 1.0
        blocks.append(np.concatenate([(xyz - centroid) / scale, scene.colors[pick]], axis=1))
    inputs = np.concatenate(blocks, axis=0)
    block_ids = np.repeat(np.arange(n_segments), samples_per_segment)
    return inputs, block_ids


def instance_segment_masks(scene, seg_ids, n_segments):
    """Binary M x G matrix: segment belongs to an instance iff >50% of its points do."""
    n_inst = len(scene.instances)
    masks = np.zeros((n_segments, n_inst))
    counts = np.bincount(seg_ids, minlength=n_segments).astype(np.float64)
    for g, inst in enumerate(scene.instances):
        overlap = np.bincount(seg_ids[inst.point_indices], minlength=n_segments)
        masks[:, g] = (overlap > 0.5 * counts).astype(np.float64)
    return masks


def build_scene_cache(scene, cfg, frozen, encode_seed=0):
    """All parameter-independent per-scene precompute.

    `cfg` is the model config (dims and grouping parameters); `frozen` holds
    the fixed tensors: FourierPE and the renderer's class embedding table.
    """
    pts = scene.points
    edges = knn_graph(pts, cfg.knn_k, scene.colors, cfg.color_weight)
    seg_ids = fh_segments(pts.shape[0], edges, cfg.fh_tau, cfg.fh_min_size)
    n_seg = int(seg_ids.max()) + 1
    scene.segment_ids = seg_ids
    centroids = segment_centroids(pts, seg_ids, n_seg)

    pe = frozen["fourier"]
    grid = voxelize(pts, cfg.voxel_size)
    voxel_descs = voxel_level_descriptors(scene, grid, pe)

    views = render_views(scene, frozen["class_embeddings"])
    point_feats = backproject_point_features(views, pts.shape[0])
    img_seg_desc = segment_mean_np(point_feats, seg_ids, n_seg)

    rng = np.random.default_rng(np.random.PCG64([encode_seed, scene.scene_id, 0x9E3]))
    point_inputs, point_block_ids = sample_segment_points(
        scene, seg_ids, n_seg, cfg.points_per_segment, rng)

    q = min(cfg.num_queries, pts.shape[0])
    query_indices = fps(pts, q, start=0)
    query_positions = pts[query_indices]

    seg_lists = [np.nonzero(seg_ids == m)[0] for m in range(n_seg)]
    return SceneCache(
        scene=scene, seg_ids=seg_ids, n_segments=n_seg, centroids=centroids,
        voxel_grid=grid, voxel_descs=voxel_descs, voxel_base_to_cell=grid.base_to_cell,
        point_to_base=grid.point_to_base, img_seg_desc=img_seg_desc,
        point_inputs=point_inputs, point_block_ids=point_block_ids,
        query_indices=query_indices, query_positions=query_positions,
        query_pe=pe(query_positions), seg_pe=pe(centroids),
        gt_seg_masks=instance_segment_masks(scene, seg_ids, n_seg),
        seg_point_lists=seg_lists,
    )


# ---------------------------------------------------------------------------
# trainable streams (run under the autodiff tape)


def voxel_stream(cache, level_weights, level_biases, proj_w, proj_b):
    """Multi-scale voxel features pooled to segments: V (M x D)."""
    per_level = []
    for level in range(len(VOXEL_STRIDES)):
        feats = ad.linear(Tensor(cache.voxel_descs[level]),
                          level_weights[level], level_biases[level])
        per_level.append(ad.gather_rows(feats, cache.voxel_base_to_cell[level]))
    base = ad.concat(per_level, axis=1)
    base = ad.linear(base, proj_w, proj_b)
    per_point = ad.gather_rows(base, cache.point_to_base)
    return ad.segment_mean(per_point, cache.seg_ids, cache.n_segments)


def image_stream(cache, w, b):
    """Back-projected multi-view features pooled to segments: I (M x D)."""
    return ad.linear(Tensor(cache.img_seg_desc), w, b)


def point_stream(cache, w1, b1, w2, b2):
    """Shared MLP over sampled segment points, max-pooled per segment: P (M x D)."""
    hidden = ad.relu(ad.linear(Tensor(cache.point_inputs), w1, b1))
    feats = ad.linear(hidden, w2, b2)
    return ad.segment_max(feats, cache.point_block_ids, cache.n_segments)


def location_encoding(centroids, w1, b1, w2, b2):
    """Two-layer MLP from segment centroids to the shared hidden width: L (M x D)."""
    hidden = ad.relu(ad.linear(Tensor(np.asarray(centroids)), w1, b1))
    return ad.linear(hidden, w2, b2)
