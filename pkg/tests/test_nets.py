import numpy as np
import pytest

from pcdiag import autograd as ag
from pcdiag import data, geom, nets
from pcdiag.errors import (ContractError, CorruptionError, DimensionError,
                           DivergenceError, FormatError, SpecError)


def node(x):
    return ag.TensorNode(np.asarray(x, dtype=np.float64))


def tiny_spec(classes=3):
    return nets.NetworkSpec(layers=[
        nets.Sample(m=12, name="sample1"),
        nets.Group(k=6, mode="knn", name="group1"),
        nets.SharedMLP(widths=(8, 16), name="mlp1"),
        nets.MaxAggregate(name="agg1"),
        nets.MaxAggregate(name="global"),
        nets.FC(widths=(10,), relu=True, name="fc1"),
        nets.FC(widths=(classes,), relu=False, name="logits"),
        nets.Softmax(name="softmax"),
    ], tap="fc1")


def random_cloud(rng, n=40):
    return geom.PointCloud(rng.standard_normal((n, 3)))


# ---------------------------------------------------------------------------
# shared mlp and max aggregation


def test_shared_mlp_identity_passthrough():
    f = node(np.random.default_rng(0).standard_normal((3, 5)))
    out = nets.shared_mlp(f, [np.eye(3)], [np.zeros((3, 1))])
    np.testing.assert_array_equal(out.values, f.values)


def test_shared_mlp_single_column_is_plain_mlp():
    w = np.array([[1.0, 2.0], [0.5, -1.0]])
    b = np.array([[0.1], [0.2]])
    x = np.array([[1.0], [3.0]])
    out = nets.shared_mlp(node(x), [w], [b])
    np.testing.assert_allclose(out.values, w @ x + b)


def test_shared_mlp_hand_case_two_columns():
    w = np.array([[1.0, 1.0], [2.0, 0.0]])
    b = np.array([[0.0], [1.0]])
    f = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = nets.shared_mlp(node(f), [w], [b])
    np.testing.assert_allclose(out.values, [[4.0, 6.0], [3.0, 5.0]])


def test_shared_mlp_relu_between_not_after():
    w1 = -np.eye(2)
    w2 = np.eye(2)
    f = np.array([[1.0], [2.0]])
    out = nets.shared_mlp(node(f), [w1, w2],
                          [np.zeros((2, 1)), np.zeros((2, 1))])
    # first layer output is negative -> relu clamps -> second layer passes 0
    np.testing.assert_allclose(out.values, [[0.0], [0.0]])
    out2 = nets.shared_mlp(node(f), [w1], [np.zeros((2, 1))])
    # single layer: no trailing relu, output stays negative
    np.testing.assert_allclose(out2.values, [[-1.0], [-2.0]])


def test_shared_mlp_shape_errors():
    with pytest.raises(DimensionError):
        nets.shared_mlp(node(np.zeros((3, 2))), [], [])
    with pytest.raises(DimensionError):
        nets.shared_mlp(node(np.zeros((3, 2))), [np.zeros((4, 2))],
                        [np.zeros((4, 1))])


def test_local_max_aggregate_duplicate_columns_neutral():
    f = np.array([[1.0, 3.0], [5.0, 2.0]])
    dup = np.concatenate([f, f[:, :1]], axis=1)
    a = nets.local_max_aggregate(node(f)).values
    b = nets.local_max_aggregate(node(dup)).values
    np.testing.assert_array_equal(a, [3.0, 5.0])
    np.testing.assert_array_equal(a, b)


def test_local_max_aggregate_gradient_hand_case():
    f = node([[1.0, 3.0], [5.0, 2.0]])
    ag.backward(ag.reduce_sum(nets.local_max_aggregate(f)))
    np.testing.assert_array_equal(f.grad, [[0.0, 1.0], [1.0, 0.0]])


# ---------------------------------------------------------------------------
# architecture 1: density reweighting


def _gate_params(hidden=1, w_h=0.0, b_h=0.0, w_o=0.0, b_o=1.0):
    return nets.Arch1Params(
        w_hidden=node(np.full((hidden, 1), w_h)),
        b_hidden=node(np.full((hidden, 1), b_h)),
        w_out=node(np.full((1, hidden), w_o)),
        b_out=node(np.full((1, 1), b_o)))


def test_arch1_unit_gate_is_identity():
    f = np.random.default_rng(1).standard_normal((4, 6))
    out = nets.arch1_density_reweight(node(f), np.full(6, 0.5), _gate_params())
    np.testing.assert_array_equal(out.values, f)


def test_arch1_zeroing_gate_kills_first_column():
    params = _gate_params(w_h=1.0, w_o=1.0, b_o=0.0)  # gate = relu(density)
    f = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = nets.arch1_density_reweight(node(f), [0.0, 1.0], params)
    np.testing.assert_allclose(out.values, [[0.0, 2.0], [0.0, 4.0]])


def test_arch1_matches_diag_matrix_product():
    rng = np.random.default_rng(2)
    f = rng.standard_normal((5, 7))
    dens = rng.uniform(0.1, 1.0, 7)
    params = nets.Arch1Params(w_hidden=node(rng.standard_normal((16, 1))),
                              b_hidden=node(rng.standard_normal((16, 1))),
                              w_out=node(rng.standard_normal((1, 16))),
                              b_out=node(rng.standard_normal((1, 1))))
    out = nets.arch1_density_reweight(node(f), dens, params)
    h = np.maximum(0.0, params.w_hidden.values @ dens.reshape(1, -1)
                   + params.b_hidden.values)
    gate = params.w_out.values @ h + params.b_out.values
    expected = f @ np.diag(gate.reshape(-1))
    np.testing.assert_allclose(out.values, expected, atol=1e-12)


def test_arch1_density_length_mismatch():
    with pytest.raises(DimensionError):
        nets.arch1_density_reweight(node(np.zeros((2, 3))), [1.0, 2.0],
                                    _gate_params())


# ---------------------------------------------------------------------------
# architecture 2: coordinate reweighting


def test_arch2_identity_weights():
    params = nets.Arch2Params(w=node(np.eye(3)), b=node(np.zeros((3, 1))))
    f = np.random.default_rng(3).standard_normal((4, 3))
    out = nets.arch2_coord_reweight(node(f), np.eye(3), params)
    np.testing.assert_allclose(out.values, f, atol=1e-12)


def test_arch2_hand_case_column_sums():
    params = nets.Arch2Params(w=node(np.zeros((1, 3))), b=node(np.ones((1, 1))))
    f = np.array([[1.0, 2.0]])
    coords = np.array([[0.3, 0.0, 0.0], [0.0, 0.4, 0.0]])
    out = nets.arch2_coord_reweight(node(f), coords, params)
    np.testing.assert_allclose(out.values, [[3.0]])


def test_arch2_output_shape_law():
    rng = np.random.default_rng(4)
    for k in (2, 5, 9):
        params = nets.Arch2Params(w=node(rng.standard_normal((4, 3))),
                                  b=node(rng.standard_normal((4, 1))))
        f = rng.standard_normal((3, k))
        out = nets.arch2_coord_reweight(node(f), rng.standard_normal((k, 3)),
                                        params)
        assert out.shape == (3, 4)


def test_arch2_coords_length_mismatch():
    params = nets.Arch2Params(w=node(np.zeros((2, 3))), b=node(np.zeros((2, 1))))
    with pytest.raises(DimensionError):
        nets.arch2_coord_reweight(node(np.zeros((2, 4))), np.zeros((3, 3)),
                                  params)


# ---------------------------------------------------------------------------
# architecture 3: multi-scale concatenation


def _max_extractor(w, b):
    def g(rel):
        return nets.local_max_aggregate(nets.shared_mlp(rel, [w], [b]))
    return g


def test_arch3_single_scale_equals_plain_pipeline():
    rng = np.random.default_rng(5)
    cloud = random_cloud(rng, 20)
    w, b = rng.standard_normal((6, 3)), rng.standard_normal((6, 1))
    out = nets.arch3_multiscale(cloud, 4, [5], [_max_extractor(w, b)])

    nbr = geom.knn_search(cloud, [4], 5, include_self=True)
    rel = (cloud.points[nbr.neighbors[0]] - cloud.points[4]).T
    direct = nets.local_max_aggregate(
        nets.shared_mlp(node(rel), [w], [b])).values
    np.testing.assert_allclose(out.values, direct, atol=1e-12)


def test_arch3_output_length_is_scale_count_times_width():
    rng = np.random.default_rng(6)
    cloud = random_cloud(rng, 30)
    w, b = rng.standard_normal((6, 3)), rng.standard_normal((6, 1))
    for scales in ([8, 4], [12, 8, 4], [16, 12, 8, 4]):
        out = nets.arch3_multiscale(cloud, 0, scales,
                                    [_max_extractor(w, b)] * len(scales))
        assert out.shape == (6 * len(scales),)


def test_arch3_duplicated_scales_repeat_halves():
    rng = np.random.default_rng(7)
    cloud = random_cloud(rng, 25)
    w, b = rng.standard_normal((5, 3)), rng.standard_normal((5, 1))
    out = nets.arch3_multiscale(cloud, 2, [6, 6],
                                [_max_extractor(w, b)] * 2).values
    np.testing.assert_array_equal(out[:5], out[5:])


def test_arch3_scale_exceeding_cloud():
    rng = np.random.default_rng(8)
    cloud = random_cloud(rng, 10)
    with pytest.raises(Exception, match="exceeds"):
        nets.arch3_multiscale(cloud, 0, [11], [lambda rel: rel])


# ---------------------------------------------------------------------------
# architecture 4: orientation encoding


def _unroll_arch4(cube, wx, wy, wz):
    s1 = np.maximum(0.0, wx[:, 0, None, None] * cube[:, :, :, 0]
                    + wx[:, 1, None, None] * cube[:, :, :, 1])
    s2 = np.maximum(0.0, wy[:, 0, None] * s1[:, :, 0]
                    + wy[:, 1, None] * s1[:, :, 1])
    return np.maximum(0.0, wz[:, 0] * s2[:, 0] + wz[:, 1] * s2[:, 1])


def test_arch4_selector_weights_pick_minus_corner():
    rng = np.random.default_rng(9)
    cube = rng.uniform(0.5, 1.5, (3, 2, 2, 2))
    sel = np.tile([1.0, 0.0], (3, 1))
    params = nets.Arch4Params(wx=node(sel), wy=node(sel), wz=node(sel))
    out = nets.arch4_orientation_encode(node(cube), params)
    np.testing.assert_allclose(out.values, cube[:, 0, 0, 0], atol=1e-12)


def test_arch4_uniform_cube_with_averaging_weights():
    cube = np.full((2, 2, 2, 2), 0.7)
    half = np.tile([0.5, 0.5], (2, 1))
    params = nets.Arch4Params(wx=node(half), wy=node(half), wz=node(half))
    out = nets.arch4_orientation_encode(node(cube), params)
    np.testing.assert_allclose(out.values, [0.7, 0.7], atol=1e-12)


def test_arch4_matches_hand_unroll():
    rng = np.random.default_rng(10)
    cube = rng.standard_normal((2, 2, 2, 2))
    wx = rng.standard_normal((2, 2))
    wy = rng.standard_normal((2, 2))
    wz = rng.standard_normal((2, 2))
    params = nets.Arch4Params(wx=node(wx), wy=node(wy), wz=node(wz))
    out = nets.arch4_orientation_encode(node(cube), params)
    np.testing.assert_allclose(out.values, _unroll_arch4(cube, wx, wy, wz),
                               atol=1e-12)


def test_arch4_wrong_cube_shape():
    params = nets.Arch4Params(wx=node(np.zeros((2, 2))),
                              wy=node(np.zeros((2, 2))),
                              wz=node(np.zeros((2, 2))))
    with pytest.raises(DimensionError):
        nets.arch4_orientation_encode(node(np.zeros((2, 2, 2))), params)


# ---------------------------------------------------------------------------
# spec validation and serialization


def test_spec_roundtrip():
    spec = nets.desk_baseline_spec(6)
    d = nets.spec_to_dict(spec)
    back = nets.spec_from_dict(d)
    assert nets.spec_to_dict(back) == d


def test_spec_validation_errors():
    spec = tiny_spec()
    bad = nets.NetworkSpec(layers=spec.layers, tap="nope")
    with pytest.raises(SpecError, match="nope"):
        nets.build_classifier(bad, 0)

    no_softmax = nets.NetworkSpec(layers=spec.layers[:-1], tap="fc1")
    with pytest.raises(SpecError, match="softmax"):
        nets.build_classifier(no_softmax, 0)

    loose_arch1 = nets.NetworkSpec(
        layers=[nets.Arch1(name="a1")] + spec.layers, tap="fc1")
    with pytest.raises(SpecError, match="layer 0"):
        nets.build_classifier(loose_arch1, 0)

    bad_scales = nets.NetworkSpec(layers=[
        nets.Sample(m=8, name="s1"),
        nets.Arch3(scales=(nets.Scale(4, (8,)), nets.Scale(4, (8,))), name="ms"),
        nets.MaxAggregate(name="g"),
        nets.FC(widths=(3,), relu=False, name="logits"),
        nets.Softmax(name="softmax"),
    ], tap="ms")
    with pytest.raises(SpecError, match="strictly"):
        nets.build_classifier(bad_scales, 0)


def test_with_architecture_preserves_remaining_layers():
    spec = nets.desk_baseline_spec(6)
    out = nets.with_architecture(spec, {"arch": "arch1", "after": ["mlp1", "mlp2"]})
    base_names = [l.name for l in spec.layers]
    new_names = [l.name for l in out.layers]
    assert [n for n in new_names if n in base_names] == base_names
    assert len(new_names) == len(base_names) + 2

    with pytest.raises(SpecError):
        nets.with_architecture(spec, {"arch": "arch1", "after": ["missing"]})


def test_with_architecture_arch3_appends_scales():
    spec = nets.desk_multiscale_spec(6, extra_scale=False)
    out = nets.with_architecture(spec, {
        "arch": "arch3", "stage": "ms1",
        "extra_scales": [{"k": 16, "widths": [32, 32, 64]}]})
    ms1 = [l for l in out.layers if l.name == "ms1"][0]
    assert [s.k for s in ms1.scales] == [32, 16]


# ---------------------------------------------------------------------------
# classifier assembly


def test_arch1_toggle_changes_only_its_own_parameters():
    spec = tiny_spec()
    base = nets.build_classifier(spec, 0)
    with_a1 = nets.build_classifier(
        nets.with_architecture(spec, {"arch": "arch1", "after": ["mlp1"]}), 0)
    base_paths = set(base.params.paths())
    new_paths = set(with_a1.params.paths())
    assert base_paths < new_paths
    extra = sorted(new_paths - base_paths)
    assert all(p.startswith("arch1_mlp1.") for p in extra)
    added = sum(with_a1.params[p].values.size for p in extra)
    assert added == 16 * 1 + 16 + 1 * 16 + 1  # the density gate's own weights


def test_forward_is_deterministic():
    rng = np.random.default_rng(11)
    cloud = random_cloud(rng)
    a = nets.build_classifier(tiny_spec(), 5).forward(cloud).logits.values
    b = nets.build_classifier(tiny_spec(), 5).forward(cloud).logits.values
    assert a.tobytes() == b.tobytes()


def test_desk_tap_dimension_is_64():
    rng = np.random.default_rng(12)
    cloud = geom.PointCloud(rng.standard_normal((160, 3)))
    model = nets.build_classifier(nets.desk_baseline_spec(6), 0)
    res = model.forward(cloud)
    assert res.tap.shape == (64, 1)
    assert res.logits.shape == (6,)


def test_arch1_unit_gate_network_matches_base_network():
    rng = np.random.default_rng(13)
    cloud = random_cloud(rng)
    spec = tiny_spec()
    base = nets.build_classifier(spec, 3)
    toggled = nets.build_classifier(
        nets.with_architecture(spec, {"arch": "arch1", "after": ["mlp1"]}), 3)
    # force the gate to 1: identical init of shared layers is name-keyed
    toggled.params["arch1_mlp1.w0"].values[:] = 0.0
    toggled.params["arch1_mlp1.b0"].values[:] = 0.0
    toggled.params["arch1_mlp1.w1"].values[:] = 0.0
    toggled.params["arch1_mlp1.b1"].values[:] = 1.0
    a = base.forward(cloud).logits.values
    b = toggled.forward(cloud).logits.values
    np.testing.assert_array_equal(a, b)


def test_arch3_single_scale_stage_equals_group_block():
    rng = np.random.default_rng(14)
    cloud = random_cloud(rng)
    ms_spec = nets.NetworkSpec(layers=[
        nets.Sample(m=12, name="sample1"),
        nets.Arch3(scales=(nets.Scale(6, (8, 16)),), name="ms1"),
        nets.MaxAggregate(name="global"),
        nets.FC(widths=(10,), relu=True, name="fc1"),
        nets.FC(widths=(3,), relu=False, name="logits"),
        nets.Softmax(name="softmax"),
    ], tap="fc1")
    ms = nets.build_classifier(ms_spec, 7)
    plain = nets.build_classifier(tiny_spec(), 7)
    for j in range(2):
        ms.params[f"ms1.s0.w{j}"].values[:] = plain.params[f"mlp1.w{j}"].values
        ms.params[f"ms1.s0.b{j}"].values[:] = plain.params[f"mlp1.b{j}"].values
    for name in ("fc1", "logits"):
        for j in range(1):
            ms.params[f"{name}.w{j}"].values[:] = plain.params[f"{name}.w{j}"].values
            ms.params[f"{name}.b{j}"].values[:] = plain.params[f"{name}.b{j}"].values
    a = ms.forward(cloud).logits.values
    b = plain.forward(cloud).logits.values
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_whole_network_finite_difference():
    rng = np.random.default_rng(15)
    cloud = random_cloud(rng, 30)
    model = nets.build_classifier(tiny_spec(), 2)
    plan = model.build_plan(cloud)

    def f(x):
        return ag.softmax_cross_entropy(model.forward(x, plan).logits, 1)

    # h large enough that rounding noise stays below the tiniest true
    # gradients (~1e-8) this deep composition produces
    err = ag.finite_difference_check(f, node(cloud.points), h=1e-4)
    assert err < 1e-3


def test_distance_pipeline_is_rotation_invariant():
    from pcdiag.controls import DistanceFeaturizer
    rng = np.random.default_rng(16)
    cloud = random_cloud(rng, 30)
    model = DistanceFeaturizer(seed=0, k=6, width=8)
    plan = model.build_plan(cloud)
    f0 = model.forward(cloud, plan).tap.values
    rot = geom.random_rotation(rng, "so3")
    f1 = model.forward(geom.apply_rotation(cloud, rot), plan).tap.values
    np.testing.assert_allclose(f0, f1, atol=1e-6)


# ---------------------------------------------------------------------------
# classify / train


def test_classify_argmax_and_tie_rule():
    rng = np.random.default_rng(17)
    cloud = random_cloud(rng)
    model = nets.build_classifier(tiny_spec(), 1)
    # zero every parameter: logits become all-equal -> lowest index wins
    for _, p in model.params.items():
        p.values[:] = 0.0
    assert nets.classify(model, cloud) == 0


def test_classify_shift_invariance():
    rng = np.random.default_rng(18)
    cloud = random_cloud(rng)
    model = nets.build_classifier(tiny_spec(), 4)
    before = nets.classify(model, cloud)
    model.params["logits.b0"].values += 5.0  # uniform logits shift
    assert nets.classify(model, cloud) == before


def small_dataset(rng, per_class=2, n=36):
    items = []
    for label in range(3):
        for _ in range(per_class):
            cloud = geom.PointCloud(rng.standard_normal((n, 3)) + 3.0 * label,
                                    label=label)
            items.append((cloud, label))
    return data.Dataset(train=items, test=items[:3])


def test_train_lr_zero_leaves_parameters():
    rng = np.random.default_rng(19)
    ds = small_dataset(rng)
    model = nets.build_classifier(tiny_spec(), 0)
    before = {p: model.params[p].values.copy() for p in model.params.paths()}
    nets.train(model, ds, nets.TrainConfig(epochs=2, batch=4, lr=0.0, seed=0))
    for p, v in before.items():
        np.testing.assert_array_equal(model.params[p].values, v)


def test_train_memorizes_single_sample():
    rng = np.random.default_rng(20)
    cloud = geom.PointCloud(rng.standard_normal((36, 3)), label=1)
    ds = data.Dataset(train=[(cloud, 1)], test=[(cloud, 1)])
    model = nets.build_classifier(tiny_spec(), 0)
    log = nets.train(model, ds, nets.TrainConfig(epochs=200, batch=1, lr=0.01,
                                                 seed=0))
    assert log[-1]["loss"] < 0.01
    assert log[-1]["epoch"] == 199


@pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
def test_train_divergence_reports_epoch():
    rng = np.random.default_rng(21)
    ds = small_dataset(rng)
    model = nets.build_classifier(tiny_spec(), 0)
    with pytest.raises(DivergenceError) as err:
        nets.train(model, ds, nets.TrainConfig(epochs=50, batch=4, lr=1e14,
                                               optimizer="sgd", seed=0))
    assert err.value.epoch >= 0


def test_train_rotation_augmentation_runs():
    rng = np.random.default_rng(22)
    ds = small_dataset(rng)
    model = nets.build_classifier(tiny_spec(), 0)
    log = nets.train(model, ds, nets.TrainConfig(epochs=2, batch=4, lr=0.01,
                                                 rotation_mode="so3", seed=0))
    assert [r["epoch"] for r in log] == [0, 1]


def test_train_rejects_bad_labels():
    rng = np.random.default_rng(23)
    cloud = geom.PointCloud(rng.standard_normal((36, 3)))
    ds = data.Dataset(train=[(cloud, 7)], test=[])
    model = nets.build_classifier(tiny_spec(), 0)
    with pytest.raises(ContractError):
        nets.train(model, ds, nets.TrainConfig(epochs=1, seed=0))


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    rng = np.random.default_rng(24)
    cloud = random_cloud(rng)
    model = nets.build_classifier(tiny_spec(), 9)
    path = tmp_path / "model.ckpt"
    nets.save_checkpoint(model, path, nets.TrainConfig(seed=9))
    loaded, meta = nets.load_checkpoint(path)
    for p in model.params.paths():
        assert model.params[p].values.tobytes() == loaded.params[p].values.tobytes()
    np.testing.assert_array_equal(model.forward(cloud).logits.values,
                                  loaded.forward(cloud).logits.values)
    assert meta["train_config"]["seed"] == 9

    path2 = tmp_path / "model2.ckpt"
    nets.save_checkpoint(loaded, path2, meta["train_config"])
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\0" * 64)
    with pytest.raises(FormatError):
        nets.load_checkpoint(path)


def test_checkpoint_truncated_and_corrupt(tmp_path):
    model = nets.build_classifier(tiny_spec(), 0)
    path = tmp_path / "model.ckpt"
    nets.save_checkpoint(model, path)
    blob = path.read_bytes()

    trunc = tmp_path / "trunc.ckpt"
    trunc.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CorruptionError):
        nets.load_checkpoint(trunc)

    flipped = bytearray(blob)
    flipped[60] ^= 0xFF
    corrupt = tmp_path / "corrupt.ckpt"
    corrupt.write_bytes(bytes(flipped))
    with pytest.raises(CorruptionError):
        nets.load_checkpoint(corrupt)
