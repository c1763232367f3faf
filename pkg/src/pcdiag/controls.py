"""Small analytically tractable models used as oracles and controls:
an identity featurizer, a foreground-only masking featurizer, a linear
two-class model with a known decision boundary, and a pair of coordinate-
vs distance-based featurizers for rotation-sensitivity comparisons.

They expose the same protocol as trained classifiers (forward/build_plan/
classes/model_id) so every metric runs on them unchanged.
"""

import numpy as np

from . import autograd as ag
from . import geom
from .nets import ForwardResult


def _as_node(x):
    return x if isinstance(x, ag.TensorNode) else ag.TensorNode(
        x.points if isinstance(x, geom.PointCloud) else np.asarray(x, dtype=np.float64))


class IdentityFeatureModel:
    """h(X) = flatten(X); the entropy optimum has a closed form."""

    model_id = "identity-feature"

    def build_plan(self, cloud):
        return None

    def forward(self, x, plan=None):
        node = _as_node(x)
        return ForwardResult(logits=None, tap=ag.reshape(node, (-1,)), input=node)


class ForegroundFlattenModel:
    """h(X) = flatten(X[foreground]); background coordinates carry zero weight."""

    def __init__(self, fg_indices):
        self.fg_indices = np.asarray(fg_indices, dtype=np.intp)
        self.model_id = "foreground-flatten"

    def build_plan(self, cloud):
        return None

    def forward(self, x, plan=None):
        node = _as_node(x)
        tap = ag.reshape(ag.gather_rows(node, self.fg_indices), (-1,))
        return ForwardResult(logits=None, tap=tap, input=node)


class LinearTwoClassModel:
    """Logits (w . flatten(X), 0); the minimal flip norm is |w.x| / |w|."""

    classes = 2

    def __init__(self, w):
        self.w = np.asarray(w, dtype=np.float64).reshape(1, -1)
        self.model_id = "linear-two-class"

    def build_plan(self, cloud):
        return None

    def forward(self, x, plan=None):
        node = _as_node(x)
        flat = ag.reshape(node, (-1, 1))
        z0 = ag.reshape(ag.tensor_matmul(ag.constant(self.w), flat), (1,))
        logits = ag.concat_rows([z0, ag.constant(np.zeros(1))])
        return ForwardResult(logits=logits, tap=logits, input=node)

    def score(self, cloud):
        """Raw first-class logit w . flatten(X)."""
        return float((self.w @ cloud.points.reshape(-1)).item())

    def margin(self, cloud):
        """Distance from the decision hyperplane (the oracle flip norm)."""
        return abs(self.score(cloud)) / float(np.linalg.norm(self.w))


class RawCoordinateFeaturizer:
    """Max-pooled random projection of raw coordinates; orientation-sensitive."""

    def __init__(self, seed=0, width=8):
        rng = np.random.default_rng(seed)
        self.w = rng.standard_normal((width, 3))
        self.model_id = f"raw-coordinate-{seed}"

    def build_plan(self, cloud):
        return None

    def forward(self, x, plan=None):
        node = _as_node(x)
        z = ag.tensor_matmul(ag.constant(self.w), ag.transpose2d(node))
        return ForwardResult(logits=None, tap=ag.tensor_reduce_max(z), input=node)


class DistanceFeaturizer:
    """Max-pooled projection of per-point squared neighbor distances.

    Distances to the plan-frozen neighbors are invariant under rigid
    rotation, so this featurizer is the rotation-invariant control.
    """

    def __init__(self, seed=0, k=8, width=8):
        rng = np.random.default_rng(seed)
        self.k = k
        self.w = rng.standard_normal((width, k))
        self.model_id = f"distance-{seed}"

    def build_plan(self, cloud):
        return geom.knn_search(cloud, np.arange(cloud.n), self.k,
                               include_self=False)

    def forward(self, x, plan=None):
        node = _as_node(x)
        n = node.values.shape[0]
        if plan is None:
            plan = self.build_plan(geom.PointCloud(node.values))
        idx = plan.neighbors.reshape(-1)
        centers = np.repeat(np.arange(n), self.k)
        diff = ag.sub(ag.gather_rows(node, idx), ag.gather_rows(node, centers))
        d2 = ag.reduce_sum(ag.mul(diff, diff), axis=-1)          # [n*k]
        mat = ag.transpose2d(ag.reshape(d2, (n, self.k)))        # [k x n]
        z = ag.tensor_matmul(ag.constant(self.w), mat)
        return ForwardResult(logits=None, tap=ag.tensor_reduce_max(z), input=node)
