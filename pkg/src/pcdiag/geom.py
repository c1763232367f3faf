"""Point-cloud geometry: sampling, neighborhood search, octant partition,
kernel density, rotations, and frozen grouping contexts.

All operations are pure functions of their inputs; brute force is used
throughout (clouds stay small, n <= 2048). Distances are kept squared until
a final comparison.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, CountError, DimensionError, SpecError


class PointCloud:
    """n x 3 coordinates with an optional class label and foreground mask."""

    __slots__ = ("points", "label", "fg_mask")

    def __init__(self, points, label=None, fg_mask=None):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise DimensionError(f"points must be n x 3, got shape {pts.shape}")
        if pts.shape[0] < 1:
            raise DimensionError("a point cloud needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        self.points = pts
        self.label = None if label is None else int(label)
        if fg_mask is not None:
            mask = np.asarray(fg_mask, dtype=bool)
            if mask.shape != (pts.shape[0],):
                raise DimensionError(
                    f"fg_mask length {mask.shape} does not match {pts.shape[0]} points")
            self.fg_mask = mask
        else:
            self.fg_mask = None

    @property
    def n(self):
        return self.points.shape[0]

    def with_points(self, points):
        """Same label and mask over replaced coordinates."""
        return PointCloud(points, label=self.label, fg_mask=self.fg_mask)

    def __repr__(self):
        return f"PointCloud(n={self.n}, label={self.label}, masked={self.fg_mask is not None})"


@dataclass
class NeighborhoodIndex:
    """Per-center ordered neighbor lists (indices into the source cloud)."""

    centers: np.ndarray
    neighbors: np.ndarray  # [len(centers) x K]

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.intp)
        self.neighbors = np.asarray(self.neighbors, dtype=np.intp)

    @property
    def k(self):
        return self.neighbors.shape[1]


@dataclass
class Rotation:
    matrix: np.ndarray
    mode: str

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise DimensionError(f"rotation matrix must be 3x3, got {m.shape}")
        if np.max(np.abs(m.T @ m - np.eye(3))) > 1e-9:
            raise ContractError("rotation matrix is not orthonormal within 1e-9")
        if abs(np.linalg.det(m) - 1.0) > 1e-9:
            raise ContractError("rotation matrix determinant is not 1 within 1e-9")
        self.matrix = m


def _sqdist(a, b):
    """Pairwise squared distances, [len(a) x len(b)]."""
    d = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def farthest_point_sample(cloud, m, start=0):
    """Greedy farthest-point subset of size m, ties broken by lowest index."""
    n = cloud.n
    if not 1 <= m <= n:
        raise CountError(f"cannot sample {m} points from a cloud of {n}")
    if not 0 <= start < n:
        raise IndexError(f"start index {start} out of range for {n} points")
    pts = cloud.points
    chosen = np.empty(m, dtype=np.intp)
    chosen[0] = start
    diff = pts - pts[start]
    min_d = np.einsum("ij,ij->i", diff, diff)
    for i in range(1, m):
        nxt = int(np.argmax(min_d))  # argmax takes the first (lowest) index on ties
        chosen[i] = nxt
        diff = pts - pts[nxt]
        np.minimum(min_d, np.einsum("ij,ij->i", diff, diff), out=min_d)
    return chosen


def knn_search(cloud, centers, k, include_self=True):
    """k nearest points per center, ordered by (distance, index)."""
    centers = np.asarray(centers, dtype=np.intp)
    n = cloud.n
    limit = n if include_self else n - 1
    if not 1 <= k <= limit:
        raise CountError(f"k={k} exceeds the {limit} available neighbors")
    d = _sqdist(cloud.points[centers], cloud.points)
    order = np.argsort(d, axis=1, kind="stable")  # stable sort = ties by index
    if include_self:
        nbr = order[:, :k]
    else:
        nbr = np.empty((len(centers), k), dtype=np.intp)
        for row, c in enumerate(centers):
            picked = order[row][order[row] != c]
            nbr[row] = picked[:k]
    return NeighborhoodIndex(centers=centers, neighbors=nbr)


def ball_query(cloud, centers, r, k):
    """Up to k points within radius r per center, ordered by (distance, index).

    Short lists are padded by repeating the first hit; a center with no hits
    at all is padded with its own index.
    """
    if r <= 0:
        raise ContractError("ball_query radius must be positive")
    if k < 1:
        raise CountError("ball_query needs k >= 1")
    centers = np.asarray(centers, dtype=np.intp)
    d = _sqdist(cloud.points[centers], cloud.points)
    order = np.argsort(d, axis=1, kind="stable")
    r2 = r * r
    nbr = np.empty((len(centers), k), dtype=np.intp)
    for row, c in enumerate(centers):
        hits = order[row][d[row][order[row]] <= r2]
        if hits.size == 0:
            nbr[row] = c
            continue
        take = hits[:k]
        if take.size < k:
            take = np.concatenate([take, np.full(k - take.size, take[0], dtype=np.intp)])
        nbr[row] = take
    return NeighborhoodIndex(centers=centers, neighbors=nbr)


# octant order: (-,-,-), (-,-,+), (-,+,-), (-,++), (+,-,-), (+,-,+), (++,-), (+++)
# i.e. code = 4*(dx>=0) + 2*(dy>=0) + (dz>=0); a zero coordinate difference
# counts as the + half-space.


def octant_neighbors(cloud, center, r):
    """Nearest in-radius point per octant around cloud.points[center].

    The center itself is not a candidate; an empty octant yields the
    center's own index.
    """
    if r <= 0:
        raise ContractError("octant search radius must be positive")
    pts = cloud.points
    center = int(center)
    diff = pts - pts[center]
    d2 = np.einsum("ij,ij->i", diff, diff)
    codes = 4 * (diff[:, 0] >= 0) + 2 * (diff[:, 1] >= 0) + (diff[:, 2] >= 0)
    out = np.full(8, center, dtype=np.intp)
    r2 = r * r
    for o in range(8):
        cand = np.nonzero((codes == o) & (d2 <= r2))[0]
        cand = cand[cand != center]
        if cand.size:
            best = cand[np.lexsort((cand, d2[cand]))[0]]
            out[o] = best
    return out


def kde_density(cloud, nbr, bandwidth):
    """Gaussian-kernel density of each neighbor within its own neighborhood.

    density(x_j) = (1/K) sum_{k in N(i)} exp(-|x_j - x_k|^2 / (2 h^2)) for
    each neighbor j of center i; values lie in (0, 1] and depend on
    distances only.
    """
    if bandwidth <= 0:
        raise ContractError("kde bandwidth must be positive")
    pts = cloud.points
    neighbors = nbr.neighbors
    m, k = neighbors.shape
    out = np.empty((m, k))
    inv = 1.0 / (2.0 * bandwidth * bandwidth)
    for row in range(m):
        p = pts[neighbors[row]]
        sq = _sqdist(p, p)
        out[row] = np.exp(-sq * inv).mean(axis=1)
    return out


def mean_nn_distance(points):
    """Mean distance to the nearest distinct-index point."""
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] < 2:
        raise ContractError("mean 1-NN distance needs at least two points")
    d = _sqdist(points, points)
    np.fill_diagonal(d, np.inf)
    return float(np.sqrt(d.min(axis=1)).mean())


def default_bandwidth(cloud):
    """Default KDE bandwidth: the cloud's mean 1-NN distance."""
    return mean_nn_distance(cloud.points)


def random_rotation(rng, mode="so3"):
    """Uniform rotation: full SO(3) via unit quaternions, or about z only."""
    if mode == "so3":
        q = rng.standard_normal(4)
        q /= np.linalg.norm(q)
        w, x, y, z = q
        m = np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])
    elif mode == "z-axis":
        a = rng.uniform(0.0, 2.0 * np.pi)
        c, s = np.cos(a), np.sin(a)
        m = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    else:
        raise ContractError(f"unknown rotation mode {mode!r}")
    # renormalize against accumulated rounding so the orthonormality
    # invariant holds exactly enough for downstream checks
    u, _, vt = np.linalg.svd(m)
    m = u @ vt
    if np.linalg.det(m) < 0:
        u[:, -1] = -u[:, -1]
        m = u @ vt
    return Rotation(matrix=m, mode=mode)


def apply_rotation(cloud, rot):
    """Rotate every point; label and mask are carried through."""
    return cloud.with_points(cloud.points @ rot.matrix.T)


# ---------------------------------------------------------------------------
# frozen grouping contexts


@dataclass
class SampleRecord:
    local: np.ndarray     # positions chosen within the pre-sample set
    selected: np.ndarray  # global ids of the chosen points


@dataclass
class GroupRecord:
    pool: np.ndarray      # global ids of the candidate set
    centers: np.ndarray   # global ids of the group centers
    neighbors: np.ndarray  # [m x K] positions into pool


@dataclass
class MultiScaleRecord:
    pool: np.ndarray
    centers: np.ndarray
    scales: list          # one [m x K_t] position array per scale


@dataclass
class OctantRecord:
    members: np.ndarray   # global ids of the current point set
    neighbors: np.ndarray  # [m x 8] positions into members


@dataclass
class ContextPlan:
    """Every sampling/grouping index choice of one clean forward pass.

    Reusing a plan on a perturbed copy of the same cloud keeps each feature
    dimension tied to the same point set, so features vary continuously with
    the perturbation.
    """

    n: int
    bandwidth: float
    records: dict


def build_fixed_contexts(cloud, network_spec):
    """Run sampling and grouping once on the clean cloud and freeze indices."""
    pts = cloud.points
    n = cloud.n
    records = {}
    cur = np.arange(n, dtype=np.intp)   # current point set (global ids)
    pool = cur                          # candidate set for grouping
    centers_local = cur                 # positions of cur within pool
    group_open = False
    collapsed = False

    for i, layer in enumerate(network_spec.layers):
        kind = layer.kind
        if kind in ("sample", "group", "arch3", "arch4") and collapsed:
            raise SpecError(f"layer {i} ({kind}) appears after global aggregation")
        if kind == "sample":
            if layer.m > cur.shape[0]:
                raise CountError(
                    f"layer {i} samples {layer.m} points but only {cur.shape[0]} remain")
            sub = PointCloud(pts[cur])
            local = farthest_point_sample(sub, layer.m, start=0)
            pool = cur
            centers_local = local
            cur = cur[local]
            records[layer.name] = SampleRecord(local=local, selected=cur)
        elif kind == "group":
            sub = PointCloud(pts[pool])
            if layer.mode == "knn":
                nbr = knn_search(sub, centers_local, layer.k, include_self=True)
            else:
                nbr = ball_query(sub, centers_local, layer.r, layer.k)
            records[layer.name] = GroupRecord(pool=pool, centers=cur,
                                              neighbors=nbr.neighbors)
            group_open = True
        elif kind == "arch3":
            sub = PointCloud(pts[pool])
            per_scale = []
            for scale in layer.scales:
                if scale.k > pool.shape[0]:
                    raise CountError(
                        f"layer {i} scale k={scale.k} exceeds pool of {pool.shape[0]}")
                nbr = knn_search(sub, centers_local, scale.k, include_self=True)
                per_scale.append(nbr.neighbors)
            records[layer.name] = MultiScaleRecord(pool=pool, centers=cur,
                                                   scales=per_scale)
            # the stage aggregates internally; its centers become the set
            pool = cur
            centers_local = np.arange(cur.shape[0], dtype=np.intp)
        elif kind == "arch4":
            sub = PointCloud(pts[cur])
            oct_nbr = np.empty((cur.shape[0], 8), dtype=np.intp)
            for row in range(cur.shape[0]):
                oct_nbr[row] = octant_neighbors(sub, row, layer.radius)
            records[layer.name] = OctantRecord(members=cur, neighbors=oct_nbr)
        elif kind == "max_aggregate":
            if group_open:
                group_open = False
                # aggregated features live on the group centers; after the
                # block the centers become the current point set
                pool = cur
                centers_local = np.arange(cur.shape[0], dtype=np.intp)
            else:
                collapsed = True

    bandwidth = mean_nn_distance(pts) if n >= 2 else 1.0
    return ContextPlan(n=n, bandwidth=bandwidth, records=records)
