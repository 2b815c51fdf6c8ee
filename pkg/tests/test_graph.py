import numpy as np
import pytest

from conftest import residual_graph
from nnfault.errors import GraphError, HookError
from nnfault.graph import (
    Graph,
    HookPoint,
    LayerKind,
    LayerNode,
    Site,
    conv2d,
    forward,
    list_paths,
    permanent_weights,
)
from nnfault.tensor import DType, Tensor


def naive_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))).astype(np.float64)
    ho, wo = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, k, ho, wo))
    for i in range(n):
        for o in range(k):
            for y in range(ho):
                for z in range(wo):
                    patch = xp[i, :, y * stride : y * stride + kh, z * stride : z * stride + kw]
                    out[i, o, y, z] = (patch * w[o]).sum() + (b[o] if b is not None else 0.0)
    return out


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_matches_naive(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.normal(size=(2, 3, 7, 7)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    b = rng.normal(size=4).astype(np.float32)
    np.testing.assert_allclose(conv2d(x, w, b, stride, pad), naive_conv(x, w, b, stride, pad), rtol=1e-5, atol=1e-5)


def test_conv2d_identity_kernel():
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    w = np.zeros((1, 1, 3, 3), np.float32)
    w[0, 0, 1, 1] = 1
    np.testing.assert_array_equal(conv2d(x, w, None, 1, 1), x)


def test_non_integral_conv_extent():
    with pytest.raises(GraphError):
        conv2d(np.zeros((1, 1, 6, 6), np.float32), np.zeros((1, 1, 3, 3), np.float32), None, 2, 0)


def _pool_graph(kind):
    return Graph([LayerNode("p", kind, {"k": 2})], (1, 4, 4))


def test_pooling_matches_reshape_oracle():
    x = np.random.default_rng(1).normal(size=(3, 1, 4, 4)).astype(np.float32)
    blocks = x.reshape(3, 1, 2, 2, 2, 2)
    np.testing.assert_array_equal(forward(_pool_graph(LayerKind.MaxPool2d), x).data, blocks.max(axis=(3, 5)))
    np.testing.assert_allclose(forward(_pool_graph(LayerKind.AvgPool2d), x).data, blocks.mean(axis=(3, 5)), rtol=1e-6)


def test_shape_inference_lenet(lenet):
    graph, _ = lenet
    assert graph.out_shapes["model.conv1"] == (6, 24, 24)
    assert graph.out_shapes["model.pool2"] == (16, 4, 4)
    assert graph.output_shape == (10,)
    weighted = [n.kind for n in graph.layers if n.kind.weighted or n.kind.name.endswith("Pool2d")]
    assert weighted.count(LayerKind.Conv2d) == 2 and weighted.count(LayerKind.Linear) == 2
    assert weighted.count(LayerKind.MaxPool2d) == 2


def test_residual_forward_matches_manual(resnet):
    x = np.random.default_rng(2).normal(size=(2, 2, 4, 4)).astype(np.float32)
    L = resnet.layer
    h1 = np.maximum(naive_conv(x, L("model.block1.conv1").weight.data, L("model.block1.conv1").bias.data, 1, 1), 0)
    h2 = np.maximum(naive_conv(h1, L("model.block2.conv1").weight.data, L("model.block2.conv1").bias.data, 1, 1) + h1, 0)
    p = h2.reshape(2, 4, 2, 2, 2, 2).mean(axis=(3, 5)).reshape(2, -1)
    ref = p @ L("model.fc").weight.data.T + L("model.fc").bias.data
    np.testing.assert_allclose(forward(resnet, x).data, ref, rtol=1e-4, atol=1e-5)


def test_single_sample_and_batch_agree(resnet):
    x = np.random.default_rng(3).normal(size=(2, 2, 4, 4)).astype(np.float32)
    batch = forward(resnet, x).data
    np.testing.assert_allclose(forward(resnet, x[1]).data, batch[1], rtol=1e-6, atol=1e-7)


def test_identity_hooks_bit_identical(resnet):
    x = np.random.default_rng(4).normal(size=(2, 2, 4, 4)).astype(np.float32)
    hooks = [(HookPoint(p, s), lambda t: t) for p in resnet.paths for s in (Site.ActivationPre, Site.ActivationPost)]
    hooks.append((HookPoint("model.fc", Site.WeightPre), lambda t: t))
    assert forward(resnet, x, hooks).bit_equal(forward(resnet, x))


def test_hook_order_and_sites(resnet):
    seen = []

    def rec(tag):
        def hook(t):
            seen.append(tag)
            return t
        return hook

    hooks = [
        (HookPoint("model.fc", Site.ActivationPost), rec("post")),
        (HookPoint("model.fc", Site.WeightPre), rec("weight")),
        (HookPoint("model.fc", Site.ActivationPre), rec("pre")),
    ]
    forward(resnet, np.zeros((2, 4, 4), np.float32), hooks)
    assert seen == ["pre", "weight", "post"]


def test_weight_hook_is_transient(resnet):
    x = np.ones((2, 4, 4), np.float32)
    zero = lambda t: Tensor(np.zeros(t.shape, np.float32))
    before = resnet.layer("model.fc").weight.data.copy()
    out = forward(resnet, x, [(HookPoint("model.fc", Site.WeightPre), zero)]).data
    np.testing.assert_allclose(out, resnet.layer("model.fc").bias.data)
    np.testing.assert_array_equal(resnet.layer("model.fc").weight.data, before)


def test_permanent_weights_restores(resnet):
    zero = lambda t: Tensor(np.zeros(t.shape, np.float32))
    act = (HookPoint("model.fc", Site.ActivationPost), lambda t: t)
    original = resnet.layer("model.fc").weight
    with permanent_weights(resnet, [(HookPoint("model.fc", Site.WeightPre), zero), act]) as rest:
        assert rest == [act]
        assert not resnet.layer("model.fc").weight.data.any()
    assert resnet.layer("model.fc").weight is original


def test_bad_hook_return(resnet):
    with pytest.raises(HookError):
        forward(resnet, np.zeros((2, 4, 4), np.float32), [(HookPoint("model.fc", Site.ActivationPost), lambda t: Tensor(np.zeros(2, np.float32)))])
    with pytest.raises(HookError):
        forward(resnet, np.zeros((2, 4, 4), np.float32), [(HookPoint("model.fc", Site.ActivationPost), lambda t: Tensor.from_float(t.data, DType.F16))])
    with pytest.raises(HookError):
        forward(resnet, np.zeros((2, 4, 4), np.float32), [(HookPoint("model.block1.relu1", Site.WeightPre), lambda t: t)])


def test_graph_validation_errors():
    w = Tensor(np.zeros((2, 1, 3, 3), np.float32))
    with pytest.raises(GraphError):
        Graph([LayerNode("c", LayerKind.Conv2d, {}, w)], (3, 5, 5))
    with pytest.raises(GraphError):
        Graph([LayerNode("c", LayerKind.Conv2d, {}, None)], (1, 5, 5))
    with pytest.raises(GraphError):
        Graph([LayerNode("a", LayerKind.ReLU), LayerNode("a", LayerKind.ReLU)], (4,))
    with pytest.raises(GraphError):
        Graph([LayerNode("add", LayerKind.Add, {"src": "later"}), LayerNode("later", LayerKind.ReLU)], (4,))
    with pytest.raises(GraphError):
        Graph([LayerNode("l", LayerKind.Linear, {}, Tensor(np.zeros((3, 4), np.float32)))], (1, 2, 2))
    with pytest.raises(GraphError):
        forward(residual_graph(), np.zeros((3, 3), np.float32))


def test_list_paths(lenet):
    graph, _ = lenet
    assert list_paths(graph, "model.conv*") == ["model.conv1", "model.conv2"]
    assert list_paths(graph, "model.fc?") == ["model.fc1", "model.fc2"]
    assert list_paths(graph, "nothing*") == []


def test_copy_isolates_nodes(resnet):
    g = resnet.copy()
    g.layer("model.fc").weight = Tensor(np.zeros((3, 16), np.float32))
    assert resnet.layer("model.fc").weight.data.any()


def test_linear_identity():
    g = Graph([LayerNode("l", LayerKind.Linear, {}, Tensor(np.eye(2, dtype=np.float32)))], (2,))
    np.testing.assert_array_equal(forward(g, np.array([3, 5], np.float32)).data, [3, 5])


def test_conv_hand_examples():
    x = np.array([[[[1, 2], [3, 4]]]], np.float32)
    assert conv2d(x, np.ones((1, 1, 2, 2), np.float32)).tolist() == [[[[10.0]]]]
    assert conv2d(np.ones((1, 1, 3, 3), np.float32), np.ones((1, 1, 3, 3), np.float32)).tolist() == [[[[9.0]]]]
    out = conv2d(np.random.default_rng(0).normal(size=(1, 2, 4, 4)).astype(np.float32), np.zeros((3, 2, 2, 2), np.float32), np.array([1, 2, 3], np.float32))
    assert np.array_equal(out, np.broadcast_to(np.array([1, 2, 3], np.float32)[None, :, None, None], (1, 3, 3, 3)))
    one = Graph([LayerNode("c", LayerKind.Conv2d, {}, Tensor(np.ones((1, 1, 1, 1), np.float32)), Tensor(np.zeros(1, np.float32)))], (1, 3, 3))
    x = np.random.default_rng(1).normal(size=(1, 3, 3)).astype(np.float32)
    np.testing.assert_array_equal(forward(one, x).data, x)


def test_conv_random_2x2_kernel_vs_loops():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(1, 1, 4, 4)).astype(np.float32)
    w = rng.normal(size=(2, 1, 2, 2)).astype(np.float32)
    np.testing.assert_allclose(conv2d(x, w), naive_conv(x, w, None, 1, 0), atol=1e-6)


def test_list_paths_residual_blocks(resnet):
    assert list_paths(resnet, "model.block*.conv1") == ["model.block1.conv1", "model.block2.conv1"]
    assert list_paths(resnet, "*") == resnet.paths


def test_golden_determinism(lenet):
    graph, ds = lenet
    assert forward(graph, ds.inputs[:16]).bit_equal(forward(graph, ds.inputs[:16]))
