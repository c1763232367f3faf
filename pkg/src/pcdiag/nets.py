"""Point-cloud classifiers built from sample/group/shared-MLP/max blocks,
with the four diagnosed architecture modules (density reweighting,
coordinate reweighting, multi-scale concatenation, orientation encoding)
toggled per spec, plus training and checkpoint persistence.
"""

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass
from typing import ClassVar

import numpy as np

from . import autograd as ag
from . import geom
from .errors import (ContractError, CorruptionError, CountError,
                     DimensionError, DivergenceError, FormatError, SpecError)


# ---------------------------------------------------------------------------
# layer descriptors


@dataclass
class Sample:
    m: int
    name: str = ""
    kind: ClassVar[str] = "sample"


@dataclass
class Group:
    k: int
    mode: str = "knn"  # or "ball"
    r: float = 0.0
    name: str = ""
    kind: ClassVar[str] = "group"


@dataclass
class SharedMLP:
    widths: tuple
    name: str = ""
    kind: ClassVar[str] = "shared_mlp"


@dataclass
class MaxAggregate:
    name: str = ""
    kind: ClassVar[str] = "max_aggregate"


@dataclass
class Arch1:
    hidden: int = 16
    name: str = ""
    kind: ClassVar[str] = "arch1"


@dataclass
class Arch2:
    units: int = 32
    name: str = ""
    kind: ClassVar[str] = "arch2"


@dataclass
class Scale:
    k: int
    widths: tuple


@dataclass
class Arch3:
    scales: tuple
    name: str = ""
    kind: ClassVar[str] = "arch3"


@dataclass
class Arch4:
    radius: float = 1.0
    name: str = ""
    kind: ClassVar[str] = "arch4"


@dataclass
class FC:
    widths: tuple
    relu: bool = True
    name: str = ""
    kind: ClassVar[str] = "fc"


@dataclass
class Softmax:
    name: str = "softmax"
    kind: ClassVar[str] = "softmax"


@dataclass
class NetworkSpec:
    layers: list
    tap: str

    @property
    def classes(self):
        for layer in reversed(self.layers):
            if layer.kind == "fc":
                return layer.widths[-1]
        raise SpecError("spec has no fc layer")


def _analyze(spec):
    """Validate a spec and return per-layer input widths for initialization."""
    names = set()
    info = {}
    w = 0            # per-point feature width (0 = raw coordinates only)
    vec_w = None     # global feature width once aggregated
    ctx = None       # open grouping block: {"cur": width, "arch2": bool}
    pending_sample = False
    tap_idx = None
    softmax_idx = None

    def err(i, layer, msg):
        raise SpecError(f"layer {i} ({layer.kind} {layer.name!r}): {msg}")

    for i, layer in enumerate(spec.layers):
        if not layer.name:
            err(i, layer, "every layer needs a name")
        if layer.name in names:
            err(i, layer, "duplicate layer name")
        names.add(layer.name)
        if softmax_idx is not None:
            err(i, layer, "no layers may follow softmax")
        if vec_w is not None and layer.kind not in ("fc", "softmax"):
            err(i, layer, "only fc/softmax may follow global aggregation")

        kind = layer.kind
        if kind == "sample":
            if ctx is not None:
                err(i, layer, "sample inside an open grouping block")
            if layer.m < 1:
                err(i, layer, "sample count must be >= 1")
            if pending_sample:
                err(i, layer, "consecutive sample layers")
            pending_sample = True
        elif kind == "group":
            if ctx is not None:
                err(i, layer, "nested grouping")
            if layer.k < 1:
                err(i, layer, "group size must be >= 1")
            if layer.mode not in ("knn", "ball"):
                err(i, layer, f"unknown grouping mode {layer.mode!r}")
            if layer.mode == "ball" and not layer.r > 0:
                err(i, layer, "ball grouping needs a positive radius")
            ctx = {"cur": 3 + w, "arch2": False}
            info[layer.name] = {"in": 3 + w}
            pending_sample = False
        elif kind == "shared_mlp":
            if ctx is None:
                err(i, layer, "shared_mlp needs an open grouping block")
            if not layer.widths:
                err(i, layer, "widths must be non-empty")
            info[layer.name] = {"in": ctx["cur"]}
            ctx["cur"] = layer.widths[-1]
        elif kind == "arch1":
            if ctx is None:
                err(i, layer, "density reweighting needs an open grouping block")
            if ctx["arch2"]:
                err(i, layer, "density reweighting must precede coordinate reweighting")
            if layer.hidden < 1:
                err(i, layer, "hidden width must be >= 1")
            info[layer.name] = {"in": 1}
        elif kind == "arch2":
            if ctx is None:
                err(i, layer, "coordinate reweighting needs an open grouping block")
            if ctx["arch2"]:
                err(i, layer, "one coordinate reweighting per block")
            if layer.units < 1:
                err(i, layer, "units must be >= 1")
            ctx["arch2"] = True
            info[layer.name] = {"in": 3}
        elif kind == "arch3":
            if ctx is not None:
                err(i, layer, "multi-scale stage inside an open grouping block")
            if not layer.scales:
                err(i, layer, "scale list must be non-empty")
            ks = [s.k for s in layer.scales]
            if len(ks) > 1 and not (all(a > b for a, b in zip(ks, ks[1:]))
                                    or all(a < b for a, b in zip(ks, ks[1:]))):
                err(i, layer, "scale list must be strictly decreasing or increasing")
            for t, s in enumerate(layer.scales):
                if not s.widths:
                    err(i, layer, f"scale {t} widths must be non-empty")
            info[layer.name] = {"in": 3 + w}
            w = sum(s.widths[-1] for s in layer.scales)
            pending_sample = False
        elif kind == "arch4":
            if ctx is not None:
                err(i, layer, "orientation encoding inside an open grouping block")
            if w == 0:
                err(i, layer, "orientation encoding needs per-point features")
            if pending_sample:
                err(i, layer, "orientation encoding cannot directly follow sample")
            if not layer.radius > 0:
                err(i, layer, "radius must be positive")
            info[layer.name] = {"in": w}
        elif kind == "max_aggregate":
            if ctx is not None:
                w = ctx["cur"]
                ctx = None
            else:
                if w == 0:
                    err(i, layer, "nothing to aggregate")
                if pending_sample:
                    err(i, layer, "global aggregation cannot directly follow sample")
                vec_w = w
        elif kind == "fc":
            if vec_w is None:
                err(i, layer, "fc needs the globally aggregated feature")
            if not layer.widths:
                err(i, layer, "widths must be non-empty")
            info[layer.name] = {"in": vec_w}
            vec_w = layer.widths[-1]
        elif kind == "softmax":
            if vec_w is None:
                err(i, layer, "softmax needs logits from an fc layer")
            softmax_idx = i
        else:
            err(i, layer, "unknown layer kind")

        if layer.name == spec.tap:
            tap_idx = i

    if softmax_idx is None:
        raise SpecError("spec must end with a softmax layer")
    if ctx is not None:
        raise SpecError("spec leaves a grouping block unclosed")
    if tap_idx is None:
        raise SpecError(f"tap layer {spec.tap!r} not found")
    if tap_idx >= softmax_idx:
        raise SpecError("tap layer must precede softmax")
    return info


# ---------------------------------------------------------------------------
# spec serialization


def spec_to_dict(spec):
    out = []
    for layer in spec.layers:
        d = {"kind": layer.kind, "name": layer.name}
        if layer.kind == "sample":
            d["m"] = layer.m
        elif layer.kind == "group":
            d.update(k=layer.k, mode=layer.mode, r=layer.r)
        elif layer.kind == "shared_mlp":
            d["widths"] = list(layer.widths)
        elif layer.kind == "arch1":
            d["hidden"] = layer.hidden
        elif layer.kind == "arch2":
            d["units"] = layer.units
        elif layer.kind == "arch3":
            d["scales"] = [{"k": s.k, "widths": list(s.widths)} for s in layer.scales]
        elif layer.kind == "arch4":
            d["radius"] = layer.radius
        elif layer.kind == "fc":
            d.update(widths=list(layer.widths), relu=layer.relu)
        out.append(d)
    return {"tap": spec.tap, "layers": out}


def spec_from_dict(data):
    layers = []
    for d in data["layers"]:
        kind = d["kind"]
        name = d["name"]
        if kind == "sample":
            layers.append(Sample(m=d["m"], name=name))
        elif kind == "group":
            layers.append(Group(k=d["k"], mode=d.get("mode", "knn"),
                                r=d.get("r", 0.0), name=name))
        elif kind == "shared_mlp":
            layers.append(SharedMLP(widths=tuple(d["widths"]), name=name))
        elif kind == "max_aggregate":
            layers.append(MaxAggregate(name=name))
        elif kind == "arch1":
            layers.append(Arch1(hidden=d.get("hidden", 16), name=name))
        elif kind == "arch2":
            layers.append(Arch2(units=d.get("units", 32), name=name))
        elif kind == "arch3":
            scales = tuple(Scale(k=s["k"], widths=tuple(s["widths"]))
                           for s in d["scales"])
            layers.append(Arch3(scales=scales, name=name))
        elif kind == "arch4":
            layers.append(Arch4(radius=d.get("radius", 1.0), name=name))
        elif kind == "fc":
            layers.append(FC(widths=tuple(d["widths"]), relu=d.get("relu", True),
                             name=name))
        elif kind == "softmax":
            layers.append(Softmax(name=name))
        else:
            raise SpecError(f"unknown layer kind {kind!r} in spec data")
    return NetworkSpec(layers=layers, tap=data["tap"])


def desk_baseline_spec(classes=6):
    """Two set-abstraction blocks, global max, small FC head; tap = fc1."""
    layers = [
        Sample(m=128, name="sample1"),
        Group(k=32, mode="knn", name="group1"),
        SharedMLP(widths=(32, 32, 64), name="mlp1"),
        MaxAggregate(name="agg1"),
        Sample(m=32, name="sample2"),
        Group(k=16, mode="knn", name="group2"),
        SharedMLP(widths=(64, 64, 128), name="mlp2"),
        MaxAggregate(name="agg2"),
        MaxAggregate(name="global"),
        FC(widths=(64,), relu=True, name="fc1"),
        FC(widths=(classes,), relu=False, name="logits"),
        Softmax(name="softmax"),
    ]
    return NetworkSpec(layers=layers, tap="fc1")


def desk_multiscale_spec(classes=6, extra_scale=True):
    """Baseline variant whose first stage is a multi-scale concatenation."""
    scales1 = [Scale(k=32, widths=(32, 32, 64))]
    if extra_scale:
        scales1.append(Scale(k=16, widths=(32, 32, 64)))
    layers = [
        Sample(m=128, name="sample1"),
        Arch3(scales=tuple(scales1), name="ms1"),
        Sample(m=32, name="sample2"),
        Arch3(scales=(Scale(k=16, widths=(64, 64, 128)),), name="ms2"),
        MaxAggregate(name="global"),
        FC(widths=(64,), relu=True, name="fc1"),
        FC(widths=(classes,), relu=False, name="logits"),
        Softmax(name="softmax"),
    ]
    return NetworkSpec(layers=layers, tap="fc1")


def with_architecture(spec, toggle):
    """Return a copy of spec with one architecture module toggled on.

    toggle: {"arch": "arch1"|"arch2"|"arch4", "after": [layer names], ...}
    or {"arch": "arch3", "stage": name, "extra_scales": [{"k":..,"widths":[..]}]}.
    """
    arch = toggle["arch"]
    layers = list(spec.layers)
    if arch == "arch3":
        stage = toggle["stage"]
        extra = tuple(Scale(k=s["k"], widths=tuple(s["widths"]))
                      for s in toggle["extra_scales"])
        out = []
        found = False
        for layer in layers:
            if layer.kind == "arch3" and layer.name == stage:
                out.append(Arch3(scales=layer.scales + extra, name=layer.name))
                found = True
            else:
                out.append(layer)
        if not found:
            raise SpecError(f"arch3 stage {toggle['stage']!r} not found in spec")
        return NetworkSpec(layers=out, tap=spec.tap)

    anchors = toggle["after"]
    by_name = {layer.name: i for i, layer in enumerate(layers)}
    for a in anchors:
        if a not in by_name:
            raise SpecError(f"placement anchor {a!r} not found in spec")
    out = []
    for layer in layers:
        out.append(layer)
        if layer.name in anchors:
            mod_name = f"{arch}_{layer.name}"
            if arch == "arch1":
                out.append(Arch1(hidden=toggle.get("hidden", 16), name=mod_name))
            elif arch == "arch2":
                out.append(Arch2(units=toggle.get("units", 32), name=mod_name))
            elif arch == "arch4":
                out.append(Arch4(radius=toggle.get("radius", 1.0), name=mod_name))
            else:
                raise SpecError(f"unknown architecture toggle {arch!r}")
    return NetworkSpec(layers=out, tap=spec.tap)


# ---------------------------------------------------------------------------
# architecture module operations


def shared_mlp(f, weights, biases):
    """Apply the same MLP to every column of f; ReLU between layers only.

    weights/biases are per-layer nodes (or arrays): W_j [out x in],
    b_j [out x 1].
    """
    if len(weights) == 0:
        raise DimensionError("shared_mlp needs at least one layer")
    if len(weights) != len(biases):
        raise DimensionError("weights and biases must pair up")
    cur = f if isinstance(f, ag.TensorNode) else ag.constant(f)
    for j, (w, b) in enumerate(zip(weights, biases)):
        w = w if isinstance(w, ag.TensorNode) else ag.constant(w)
        b = b if isinstance(b, ag.TensorNode) else ag.constant(b)
        if w.shape[1] != cur.shape[0]:
            raise DimensionError(
                f"mlp layer {j} expects {w.shape[1]} input rows, got {cur.shape[0]}")
        cur = ag.linear(w, b, cur, relu=j < len(weights) - 1)
    return cur


def local_max_aggregate(f):
    """Per-dimension max over the neighbor columns of [D x K]."""
    return ag.tensor_reduce_max(f)


@dataclass
class Arch1Params:
    w_hidden: np.ndarray  # [hidden x 1]
    b_hidden: np.ndarray  # [hidden x 1]
    w_out: np.ndarray     # [1 x hidden]
    b_out: np.ndarray     # [1 x 1]


@dataclass
class Arch2Params:
    w: np.ndarray  # [M x 3]
    b: np.ndarray  # [M x 1]


@dataclass
class Arch4Params:
    wx: np.ndarray  # [d x 2]
    wy: np.ndarray  # [d x 2]
    wz: np.ndarray  # [d x 2]


def _arch1_gate(dens_row, params):
    """densities [1 x N] -> per-column scalar weights [1 x N] via the
    two-layer perceptron (ReLU after the hidden layer)."""
    return shared_mlp(dens_row, [params.w_hidden, params.w_out],
                      [params.b_hidden, params.b_out])


def arch1_density_reweight(f, densities, params):
    """Scale each neighbor column of f by a weight learned from its density."""
    f = f if isinstance(f, ag.TensorNode) else ag.constant(f)
    dens = np.asarray(densities, dtype=np.float64).reshape(1, -1) \
        if not isinstance(densities, ag.TensorNode) else densities
    dens = dens if isinstance(dens, ag.TensorNode) else ag.constant(dens)
    if dens.shape[-1] != f.shape[1]:
        raise DimensionError(
            f"{dens.shape[-1]} densities for {f.shape[1]} neighbor columns")
    gate = _arch1_gate(ag.reshape(dens, (1, -1)), params)
    return ag.scale_cols(f, gate)


def arch2_coord_reweight(f, coords, params):
    """Reweight [d x K] features into [d x M] via weights learned from the
    K relative neighbor coordinates."""
    f = f if isinstance(f, ag.TensorNode) else ag.constant(f)
    coords = coords if isinstance(coords, ag.TensorNode) else ag.constant(coords)
    k = f.shape[1]
    if coords.shape != (k, 3):
        raise DimensionError(f"expected {k} x 3 relative coordinates, got {coords.shape}")
    w = shared_mlp(ag.transpose2d(coords), [params.w], [params.b])  # [M x K]
    return ag.group_weight_matmul(f, w, 1, k)


def arch3_multiscale(cloud, center, scales, extractors):
    """Concatenate per-scale local features g_t(F_i^{scale=K_t}).

    Each extractor receives the [3 x K_t] relative-coordinate matrix of the
    K_t nearest neighbors and returns a feature vector node.
    """
    if len(scales) != len(extractors):
        raise DimensionError("one extractor per scale is required")
    n = cloud.n
    parts = []
    x = ag.constant(cloud.points)
    for k, g in zip(scales, extractors):
        if k > n:
            raise CountError(f"scale k={k} exceeds the cloud size {n}")
        nbr = geom.knn_search(cloud, [center], k, include_self=True)
        idx = nbr.neighbors[0]
        rel = ag.transpose2d(ag.sub(ag.gather_rows(x, idx),
                                    ag.gather_rows(x, np.full(k, center))))
        feat = g(rel)
        parts.append(ag.reshape(feat, (-1,)))
    return ag.concat_rows(parts)


def _collapse_stage(cur, w, m, block):
    """One orientation-encoding stage: fold consecutive column pairs of each
    length-`block` group with a per-channel 2-tap kernel, then ReLU."""
    base = (np.arange(m)[:, None] * block)
    even = (base + np.arange(0, block, 2)[None, :]).reshape(-1)
    odd = (base + np.arange(1, block, 2)[None, :]).reshape(-1)
    mixed = ag.add(ag.scale_rows(ag.gather_cols(cur, even), ag.gather_cols(w, [0])),
                   ag.scale_rows(ag.gather_cols(cur, odd), ag.gather_cols(w, [1])))
    return ag.tensor_relu(mixed)


def arch4_orientation_encode(f_oe, params):
    """Three-stage orientation convolution of a [d x 2 x 2 x 2] cube.

    Octant axes are folded one at a time (shape chain d*2*2*2 -> d*2*2 ->
    d*2 -> d), each stage followed by ReLU.
    """
    f_oe = f_oe if isinstance(f_oe, ag.TensorNode) else ag.constant(f_oe)
    if len(f_oe.shape) != 4 or f_oe.shape[1:] != (2, 2, 2):
        raise DimensionError(f"expected a d x 2 x 2 x 2 cube, got {f_oe.shape}")
    d = f_oe.shape[0]
    wx = params.wx if isinstance(params.wx, ag.TensorNode) else ag.constant(params.wx)
    wy = params.wy if isinstance(params.wy, ag.TensorNode) else ag.constant(params.wy)
    wz = params.wz if isinstance(params.wz, ag.TensorNode) else ag.constant(params.wz)
    cur = ag.reshape(f_oe, (d, 8))
    cur = _collapse_stage(cur, wx, 1, 8)
    cur = _collapse_stage(cur, wy, 1, 4)
    cur = _collapse_stage(cur, wz, 1, 2)
    return ag.reshape(cur, (d,))


# ---------------------------------------------------------------------------
# classifier assembly


def _layer_rng(seed, name):
    digest = hashlib.sha256(name.encode()).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([seed, key]))


def _he_uniform(rng, out_w, in_w):
    bound = np.sqrt(6.0 / in_w)
    return rng.uniform(-bound, bound, size=(out_w, in_w))


@dataclass
class ForwardResult:
    logits: ag.TensorNode
    tap: ag.TensorNode
    input: ag.TensorNode


class _GroupState:
    __slots__ = ("m", "cols", "rel", "record", "cur")

    def __init__(self, m, cols, rel, record, cur):
        self.m = m
        self.cols = cols
        self.rel = rel
        self.record = record
        self.cur = cur


class Model:
    """A built classifier: spec, named parameters, and executable forward."""

    def __init__(self, spec, params, seed):
        self.spec = spec
        self.params = params
        self.seed = seed

    @property
    def classes(self):
        return self.spec.classes

    @property
    def model_id(self):
        h = hashlib.sha256(json.dumps(spec_to_dict(self.spec), sort_keys=True).encode())
        for path, p in self.params.items():
            h.update(path.encode())
            h.update(p.values.tobytes())
        return h.hexdigest()[:12]

    def build_plan(self, cloud):
        return geom.build_fixed_contexts(cloud, self.spec)

    def _mlp_nodes(self, name, n_layers):
        ws = [self.params[f"{name}.w{j}"] for j in range(n_layers)]
        bs = [self.params[f"{name}.b{j}"] for j in range(n_layers)]
        return ws, bs

    def forward(self, x, plan=None):
        """Run the network; returns logits and the tap-layer feature.

        x may be a PointCloud, an n x 3 array, or a TensorNode (so callers
        can differentiate the output with respect to a perturbed input).
        """
        if isinstance(x, ag.TensorNode):
            x_node = x
        elif isinstance(x, geom.PointCloud):
            x_node = ag.TensorNode(x.points)
        else:
            x_node = ag.TensorNode(np.asarray(x, dtype=np.float64))
        if plan is None:
            plan = geom.build_fixed_contexts(geom.PointCloud(x_node.values), self.spec)

        feats = None     # [d x P] features of the current point set
        state = None     # open grouping block
        vec = None       # [d x 1] global feature column
        tap = None
        logits = None

        for layer in self.spec.layers:
            kind = layer.kind
            out_node = None
            if kind == "sample":
                out_node = feats
            elif kind == "group":
                rec = plan.records[layer.name]
                m, k = rec.neighbors.shape
                flat = rec.neighbors.reshape(-1)
                nbr_global = rec.pool[flat]
                centers_rep = np.repeat(rec.centers, k)
                rel = ag.transpose2d(ag.sub(ag.gather_rows(x_node, nbr_global),
                                            ag.gather_rows(x_node, centers_rep)))
                cur = rel if feats is None else ag.concat_rows(
                    [rel, ag.gather_cols(feats, flat)])
                state = _GroupState(m=m, cols=k, rel=rel, record=rec, cur=cur)
                out_node = cur
            elif kind == "shared_mlp":
                ws, bs = self._mlp_nodes(layer.name, len(layer.widths))
                state.cur = shared_mlp(state.cur, ws, bs)
                out_node = state.cur
            elif kind == "arch1":
                dens = _density_columns(x_node, state.record, plan.bandwidth)
                p = Arch1Params(self.params[f"{layer.name}.w0"],
                                self.params[f"{layer.name}.b0"],
                                self.params[f"{layer.name}.w1"],
                                self.params[f"{layer.name}.b1"])
                gate = _arch1_gate(dens, p)
                state.cur = ag.scale_cols(state.cur, gate)
                out_node = state.cur
            elif kind == "arch2":
                w = shared_mlp(state.rel, [self.params[f"{layer.name}.w0"]],
                               [self.params[f"{layer.name}.b0"]])
                k0 = state.record.neighbors.shape[1]
                state.cur = ag.group_weight_matmul(state.cur, w, state.m, k0)
                state.cols = layer.units
                out_node = state.cur
            elif kind == "arch3":
                rec = plan.records[layer.name]
                parts = []
                for t, scale in enumerate(layer.scales):
                    nbr = rec.scales[t]
                    m, k = nbr.shape
                    flat = nbr.reshape(-1)
                    rel = ag.transpose2d(ag.sub(
                        ag.gather_rows(x_node, rec.pool[flat]),
                        ag.gather_rows(x_node, np.repeat(rec.centers, k))))
                    cur = rel if feats is None else ag.concat_rows(
                        [rel, ag.gather_cols(feats, flat)])
                    ws, bs = self._mlp_nodes(f"{layer.name}.s{t}", len(scale.widths))
                    cur = shared_mlp(cur, ws, bs)
                    d = cur.shape[0]
                    parts.append(ag.tensor_reduce_max(ag.reshape(cur, (d, m, k))))
                feats = parts[0] if len(parts) == 1 else ag.concat_rows(parts)
                out_node = feats
            elif kind == "arch4":
                rec = plan.records[layer.name]
                m = rec.neighbors.shape[0]
                d = feats.shape[0]
                cur = ag.gather_cols(feats, rec.neighbors.reshape(-1))  # [d x 8m]
                cur = _collapse_stage(cur, self.params[f"{layer.name}.wx"], m, 8)
                cur = _collapse_stage(cur, self.params[f"{layer.name}.wy"], m, 4)
                cur = _collapse_stage(cur, self.params[f"{layer.name}.wz"], m, 2)
                feats = cur
                out_node = feats
            elif kind == "max_aggregate":
                if state is not None:
                    d = state.cur.shape[0]
                    feats = ag.tensor_reduce_max(
                        ag.reshape(state.cur, (d, state.m, state.cols)))
                    state = None
                    out_node = feats
                else:
                    vec = ag.reshape(ag.tensor_reduce_max(feats), (feats.shape[0], 1))
                    feats = None
                    out_node = vec
            elif kind == "fc":
                ws, bs = self._mlp_nodes(layer.name, len(layer.widths))
                for w, b in zip(ws, bs):
                    vec = ag.linear(w, b, vec, relu=layer.relu)
                out_node = vec
            elif kind == "softmax":
                logits = ag.reshape(vec, (-1,))
                out_node = logits
            if layer.name == self.spec.tap:
                tap = out_node

        return ForwardResult(logits=logits, tap=tap, input=x_node)

    def tap_forward(self, x, plan=None):
        return self.forward(x, plan).tap

    def logits_forward(self, x, plan=None):
        return self.forward(x, plan).logits


def _density_columns(x_node, rec, bandwidth):
    """In-graph neighborhood KDE for every grouped neighbor, [1 x m*K].

    Matches geom.kde_density over the same neighborhoods and bandwidth but
    stays differentiable with respect to the input coordinates. Implemented
    as one composite node: the m*K^2 pairwise kernel would otherwise
    dominate the whole forward pass.
    """
    m, k = rec.neighbors.shape
    flat = rec.pool[rec.neighbors].reshape(-1)
    inv = 1.0 / (2.0 * bandwidth * bandwidth)
    xv = x_node.values
    grouped = xv[flat].reshape(m, k, 3)
    radii = np.einsum("mkc,mkc->mk", grouped, grouped)
    gram = grouped @ grouped.transpose(0, 2, 1)
    sq = radii[:, :, None] + radii[:, None, :] - 2.0 * gram
    kern = np.exp(-inv * sq)                                 # [m,k,k]
    dens = kern.mean(axis=2)
    out = ag.TensorNode(dens.reshape(1, m * k), op="nbr_density",
                        parents=(x_node,))

    def _bw(g):
        gs = (g.reshape(m, k, 1) / k) * kern * (-inv)        # d loss / d sq
        row = gs.sum(axis=2)
        col = gs.sum(axis=1)
        grad = 2.0 * (row[:, :, None] * grouped - gs @ grouped)
        grad += 2.0 * (col[:, :, None] * grouped
                       - gs.transpose(0, 2, 1) @ grouped)
        contrib = np.zeros_like(xv)
        flat_grad = grad.reshape(-1, 3)
        for c in range(3):
            contrib[:, c] = np.bincount(flat, weights=flat_grad[:, c],
                                        minlength=xv.shape[0])
        x_node.accumulate(contrib)

    out._backward = _bw
    return out


def build_classifier(spec, seed):
    """Deterministically initialize a model for the given spec.

    He-uniform fan-in for weight matrices, zero biases; the density gate's
    output bias starts at 1 so the module begins near identity.
    """
    info = _analyze(spec)
    params = ag.ParameterSet()

    def add_mlp(name, in_w, widths, rng):
        cur = in_w
        for j, w in enumerate(widths):
            params.add(f"{name}.w{j}", ag.TensorNode(_he_uniform(rng, w, cur)))
            params.add(f"{name}.b{j}", ag.TensorNode(np.zeros((w, 1))))
            cur = w

    for layer in spec.layers:
        rng = _layer_rng(seed, layer.name)
        if layer.kind in ("shared_mlp", "fc"):
            add_mlp(layer.name, info[layer.name]["in"], layer.widths, rng)
        elif layer.kind == "arch1":
            add_mlp(layer.name, 1, (layer.hidden,), rng)
            # rename: w0/b0 hold the hidden layer; w1/b1 the scalar gate
            params.add(f"{layer.name}.w1",
                       ag.TensorNode(_he_uniform(rng, 1, layer.hidden)))
            params.add(f"{layer.name}.b1", ag.TensorNode(np.ones((1, 1))))
        elif layer.kind == "arch2":
            add_mlp(layer.name, 3, (layer.units,), rng)
        elif layer.kind == "arch3":
            in_w = info[layer.name]["in"]
            for t, scale in enumerate(layer.scales):
                add_mlp(f"{layer.name}.s{t}", in_w, scale.widths, rng)
        elif layer.kind == "arch4":
            d = info[layer.name]["in"]
            for axis in ("wx", "wy", "wz"):
                params.add(f"{layer.name}.{axis}",
                           ag.TensorNode(_he_uniform(rng, d, 2)))
    return Model(spec=spec, params=params, seed=seed)


def classify(model, cloud):
    """Predicted class: argmax over logits, lowest index on ties."""
    logits = model.forward(cloud).logits.values
    return int(np.argmax(logits))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 30
    batch: int = 16
    lr: float = 0.01
    optimizer: str = "adam"
    rotation_mode: str = "none"  # none | z-axis | so3
    seed: int = 0

    def to_dict(self):
        return {"epochs": self.epochs, "batch": self.batch, "lr": self.lr,
                "optimizer": self.optimizer, "rotation_mode": self.rotation_mode,
                "seed": self.seed}


def train(model, dataset, config, epoch_callback=None):
    """Cross-entropy training with per-sample rotation augmentation.

    dataset exposes .train and .test lists of (PointCloud, label). Returns
    the per-epoch log; raises DivergenceError on a non-finite loss.
    """
    if not dataset.train:
        raise ContractError("training set is empty")
    for _, label in dataset.train:
        if not 0 <= label < model.classes:
            raise ContractError(f"label {label} outside {model.classes} classes")
    rng = np.random.default_rng(config.seed)
    state = ag.OptimizerState(config.optimizer, config.lr)
    # sampling and grouping indices are distance-based, hence invariant under
    # the rotation augmentation; plans are rebuilt per forward only when an
    # octant partition (orientation encoding) is present
    cacheable = (config.rotation_mode == "none"
                 or not any(l.kind == "arch4" for l in model.spec.layers))
    train_plans = [model.build_plan(c) for c, _ in dataset.train] if cacheable else None
    test_plans = [model.build_plan(c) for c, _ in dataset.test]
    log = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset.train))
        losses = []
        hits = 0
        for start in range(0, len(order), config.batch):
            chunk = order[start:start + config.batch]
            scale = 1.0 / len(chunk)
            for idx in chunk:
                cloud, label = dataset.train[idx]
                if config.rotation_mode != "none":
                    rot = geom.random_rotation(rng, config.rotation_mode)
                    cloud = geom.apply_rotation(cloud, rot)
                plan = train_plans[idx] if cacheable else None
                res = model.forward(cloud, plan)
                loss = ag.softmax_cross_entropy(res.logits, label)
                loss_val = float(loss.values)
                if not np.isfinite(loss_val):
                    raise DivergenceError(epoch)
                losses.append(loss_val)
                hits += int(np.argmax(res.logits.values) == label)
                ag.backward(ag.mul(loss, scale))
            ag.optimizer_step(model.params, state)
        test_hits = sum(
            int(np.argmax(model.forward(c, p).logits.values) == l)
            for (c, l), p in zip(dataset.test, test_plans))
        row = {"epoch": epoch,
               "loss": float(np.mean(losses)),
               "train_acc": hits / len(order),
               "test_acc": test_hits / len(dataset.test) if dataset.test else 0.0}
        log.append(row)
        if epoch_callback is not None:
            epoch_callback(row)
    return log


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"PCDG"
CHECKPOINT_VERSION = 1


def save_checkpoint(model, path, train_config=None):
    """Binary little-endian checkpoint with a trailing CRC32."""
    tc = train_config.to_dict() if hasattr(train_config, "to_dict") else train_config
    meta = {"spec": spec_to_dict(model.spec), "seed": model.seed,
            "train_config": tc}
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
             struct.pack("<I", len(blob)), blob,
             struct.pack("<I", len(model.params))]
    for name, node in model.params.items():
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(node.values, dtype="<f8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def load_checkpoint(path):
    """Rebuild a model bit-identically; returns (model, meta)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise CorruptionError(f"checkpoint {path} is truncated")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {raw[:4]!r}")
    body, crc_bytes = raw[:-4], raw[-4:]
    if struct.unpack("<I", crc_bytes)[0] != (zlib.crc32(body) & 0xFFFFFFFF):
        raise CorruptionError(f"checkpoint {path} failed its CRC check")
    off = 4
    (version,) = struct.unpack_from("<I", body, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (blob_len,) = struct.unpack_from("<I", body, off)
    off += 4
    meta = json.loads(body[off:off + blob_len].decode("utf-8"))
    off += blob_len
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    arrays = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<B", body, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", body, off)
            off += 4 * rank
            size = int(np.prod(dims)) * 8
            if off + size > len(body):
                raise CorruptionError(f"checkpoint {path} array {name!r} truncated")
            arr = np.frombuffer(body[off:off + size], dtype="<f8").reshape(dims)
            off += size
            arrays[name] = arr.astype(np.float64)
    except struct.error as exc:
        raise CorruptionError(f"checkpoint {path} is truncated: {exc}") from exc

    spec = spec_from_dict(meta["spec"])
    model = build_classifier(spec, meta["seed"])
    if set(arrays) != set(model.params.paths()):
        raise CorruptionError("checkpoint parameter names do not match its spec")
    for name, arr in arrays.items():
        node = model.params[name]
        if node.values.shape != arr.shape:
            raise CorruptionError(f"parameter {name!r} has shape {arr.shape}, "
                                  f"expected {node.values.shape}")
        node.values = np.ascontiguousarray(arr)
    return model, meta
