import numpy as np
import pytest

from morphnas.morphisms import MorphConfig, replay, sample_mutation
from morphnas.netgraph import (
    Dataset,
    FormatError,
    GraphError,
    HeadParams,
    LayerNode,
    NetworkGraph,
    TrainConfig,
    build_initial_model,
    conv_node,
    decode_network,
    encode_network,
    evaluate,
    forward,
    infer_shapes,
    topology_signature,
    train_epochs,
)
from morphnas.tensor import ShapeError, SgdrSchedule, batchnorm_forward, conv2d_forward, relu, sgdr_lr


def closed_form_params(c, stem, block, final, classes, k=3):
    convs = [(c, stem), (stem, block), (block, block), (block, block), (block, final)]
    return sum(k * k * a * b + 2 * b for a, b in convs) + final * classes + classes


def test_default_model_topology_and_params():
    g = build_initial_model()
    kinds = [n.kind for n in g.topo_order()]
    # stem, three block convs, final conv
    assert kinds.count("conv") == 5
    assert kinds.count("maxpool") == 2 and kinds.count("gap") == 1 and kinds.count("head") == 1
    assert g.param_count() == closed_form_params(3, 64, 128, 256, 10) == 669_258
    assert abs(g.param_count() - 0.67e6) / 0.67e6 <= 0.05


def test_desk_model_same_topology():
    big = build_initial_model((16, 16, 3), 4)
    small = build_initial_model((16, 16, 3), 4, 8, 16, 32)
    assert [n.kind for n in big.topo_order()] == [n.kind for n in small.topo_order()]
    assert small.param_count() == closed_form_params(3, 8, 16, 32, 4)


@pytest.mark.parametrize("bad", [dict(stem=0), dict(block=-1), dict(classes=0)])
def test_non_positive_widths_rejected(bad):
    with pytest.raises(ValueError):
        build_initial_model(**bad)


def test_blocks_partition_the_evolutionary_convs():
    g = build_initial_model((16, 16, 3), 4, 8, 16, 32)
    assert g.blocks() == [["b0.conv"], ["b1.conv"], ["b2.conv"]]


def test_shapes_of_initial_model():
    g = build_initial_model()
    s = infer_shapes(g)
    assert s["gap"] == (1, 1, 256)
    assert s["pool0"] == (16, 16, 128) and s["pool1"] == (8, 8, 128)
    assert s["head"] == (10,)


def test_concat_channels_add():
    rng = np.random.default_rng(0)
    nodes = [
        LayerNode("input", "input"),
        conv_node("a", "input", 3, 64, rng, np.float32),
        conv_node("b", "input", 3, 64, rng, np.float32),
        LayerNode("cat", "concat", ["a", "b"]),
        LayerNode("gap", "gap", ["cat"]),
        LayerNode("head", "head", ["gap"], head=HeadParams(np.zeros((128, 2), np.float32), np.zeros(2, np.float32))),
    ]
    g = NetworkGraph({n.id: n for n in nodes}, (4, 4, 3), np.float32)
    assert infer_shapes(g)["cat"] == (4, 4, 128)


def test_add_shape_mismatch_rejected():
    rng = np.random.default_rng(0)
    nodes = [
        LayerNode("input", "input"),
        conv_node("a", "input", 3, 4, rng, np.float32),
        conv_node("b", "input", 3, 5, rng, np.float32),
        LayerNode("add", "add", ["a", "b"]),
        LayerNode("gap", "gap", ["add"]),
        LayerNode("head", "head", ["gap"], head=HeadParams(np.zeros((4, 2), np.float32), np.zeros(2, np.float32))),
    ]
    with pytest.raises(ShapeError, match="add inputs disagree"):
        NetworkGraph({n.id: n for n in nodes}, (4, 4, 3), np.float32).validate()


def test_cycle_rejected():
    g = build_initial_model((8, 8, 3), 2, 2, 2, 2)
    g.nodes["stem"].inputs = ["b0.conv"]
    with pytest.raises(GraphError):
        g.topo_order()


def test_widen_updates_downstream_shapes():
    from morphnas.morphisms import WidenPlan, widen_layer

    g = build_initial_model((8, 8, 3), 2, 4, 4, 4)
    widen_layer(g, WidenPlan("b1.conv", 4, 6, np.array([0, 2])))
    s = infer_shapes(g)
    assert s["b1.conv"] == (4, 4, 6) and s["pool1"] == (2, 2, 6)
    assert g.nodes["b2.conv"].conv.in_channels == 6


def test_forward_zero_input_finite_and_deterministic():
    g = build_initial_model((16, 16, 3), 4, 8, 16, 32)
    h = build_initial_model((16, 16, 3), 4, 8, 16, 32)
    x = np.zeros((2, 16, 16, 3), np.float32)
    a = forward(g, x, "infer")
    assert np.isfinite(a).all()
    assert np.array_equal(a, forward(h, x, "infer"))


def test_forward_matches_hand_composition():
    rng = np.random.default_rng(3)
    conv = conv_node("c", "input", 2, 3, rng, np.float64)
    conv.bn.running_mean[:] = rng.standard_normal(3)
    conv.bn.running_var[:] = rng.uniform(0.5, 2, 3)
    conv.bn.gamma[:] = rng.uniform(0.5, 2, 3)
    head = HeadParams(rng.standard_normal((3, 2)), rng.standard_normal(2))
    nodes = [LayerNode("input", "input"), conv, LayerNode("gap", "gap", ["c"]), LayerNode("head", "head", ["gap"], head=head)]
    g = NetworkGraph({n.id: n for n in nodes}, (4, 4, 2), np.float64)
    x = rng.standard_normal((3, 4, 4, 2))
    y, _ = batchnorm_forward(conv2d_forward(x, conv.conv.w), conv.bn, "infer")
    expected = relu(y).mean(axis=(1, 2)) @ head.w + head.b
    np.testing.assert_allclose(forward(g, x, "infer"), expected, rtol=1e-12)


def _toy_separable(n=64, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    x = rng.standard_normal((n, 6, 6, 1)).astype(np.float32) * 0.3
    x += np.where(labels == 1, 1.0, -1.0)[:, None, None, None]
    return Dataset(x, labels)


def test_zero_epochs_is_noop():
    g = build_initial_model((6, 6, 1), 2, 4, 4, 4)
    before = encode_network(g)
    train_epochs(g, _toy_separable(), 0)
    assert encode_network(g) == before


def test_one_epoch_loss_trend_decreases():
    g = build_initial_model((6, 6, 1), 2, 4, 4, 4)
    log = train_epochs(g, _toy_separable(256), 1, TrainConfig(batch_size=8))
    l = np.array(log.losses)
    half = len(l) // 2
    assert l[half:].mean() < l[:half].mean()
    assert np.polyfit(np.arange(len(l)), l, 1)[0] < 0


def test_lr_trace_follows_schedule():
    data = _toy_separable(40)
    cfg = TrainConfig(batch_size=10, schedule=SgdrSchedule(0.05, 1, 2))
    g = build_initial_model((6, 6, 1), 2, 2, 2, 2)
    log = train_epochs(g, data, 7, cfg, epoch_offset=0)
    expected = [sgdr_lr(cfg.schedule, e + b / 4) for e in range(7) for b in range(4)]
    assert log.lrs == expected


def test_epoch_offset_and_restart_flag():
    data = _toy_separable(20)
    g = build_initial_model((6, 6, 1), 2, 2, 2, 2)
    cont = train_epochs(g.copy(), data, 1, TrainConfig(batch_size=20), epoch_offset=3)
    fresh = train_epochs(g.copy(), data, 1, TrainConfig(batch_size=20, restart_per_burst=True), epoch_offset=3)
    assert cont.lrs == [sgdr_lr(SgdrSchedule(), 3)]
    assert fresh.lrs == [sgdr_lr(SgdrSchedule(), 0)]


def test_memorises_tiny_set():
    rng = np.random.default_rng(0)
    data = Dataset(rng.standard_normal((12, 6, 6, 1)).astype(np.float32), np.arange(12) % 3)
    g = build_initial_model((6, 6, 1), 3, 8, 8, 8)
    train_epochs(g, data, 60, TrainConfig(batch_size=12, weight_decay=0), rng=np.random.default_rng(1))
    assert evaluate(g, data) == 1.0


def test_random_weights_chance_accuracy():
    rng = np.random.default_rng(5)
    data = Dataset(rng.standard_normal((2000, 6, 6, 1)).astype(np.float32), rng.integers(0, 4, 2000))
    g = build_initial_model((6, 6, 1), 4, 4, 4, 4)
    assert abs(evaluate(g, data) - 0.25) < 0.05


def test_evaluate_empty_dataset():
    g = build_initial_model((6, 6, 1), 2, 2, 2, 2)
    with pytest.raises(ValueError):
        evaluate(g, Dataset(np.zeros((0, 6, 6, 1), np.float32), np.zeros(0, np.int64)))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_encode_decode_roundtrip(dtype):
    g = build_initial_model((8, 8, 3), 3, 4, 6, 8, dtype=dtype)
    doc = encode_network(g)
    h = decode_network(doc)
    assert encode_network(h) == doc
    assert topology_signature(g) == topology_signature(h)
    assert h.blocks() == g.blocks()
    x = np.random.default_rng(0).standard_normal((2, 8, 8, 3)).astype(dtype)
    assert np.array_equal(forward(g, x), forward(h, x))


def test_mutated_graph_roundtrip_exact_outputs():
    rng = np.random.default_rng(0)
    g = build_initial_model((8, 8, 3), 3, 4, 6, 8)
    for gid in range(1, 9):
        sample_mutation(g, MorphConfig(), rng, gid)
    h = decode_network(encode_network(g))
    x = rng.standard_normal((2, 8, 8, 3)).astype(np.float32)
    assert np.array_equal(forward(g, x), forward(h, x))


def test_decode_errors():
    doc = encode_network(build_initial_model((8, 8, 3), 2, 2, 2, 2))
    with pytest.raises(FormatError):
        decode_network(doc[:-3])
    with pytest.raises(FormatError):
        decode_network(doc[:20])
    with pytest.raises(FormatError):
        decode_network(b"XXXX" + doc[4:])
    bumped = doc.replace(b'"format_version": 1', b'"format_version": 9')
    with pytest.raises(FormatError, match="format_version"):
        decode_network(bumped)


def test_signature_ignores_node_ids():
    g = build_initial_model((8, 8, 3), 2, 2, 2, 2)
    r1 = sample_mutation(g.copy(), MorphConfig(), np.random.default_rng(1), 1)[0]
    a = replay([r1], g)
    b = replay([r1], g)
    assert topology_signature(a) == topology_signature(b)
    assert topology_signature(a) != topology_signature(g)
