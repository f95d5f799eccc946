import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nasf.descriptor import (
    CompileError, DeclarationError, Descriptor, DescriptorError, LayerKind, UnknownLayerError,
)
from nasf.search.ga import Chromosome, decode
from oracles import conv_net_parameters, enumerate_parameters, reachable

CONV = LayerKind.CONV2D


def chain():
    d = Descriptor()
    d.add_layer(CONV, {"out_channels": 4, "kernel": 3}, "c1")
    d.add_layer(CONV, {"out_channels": 4, "kernel": 3}, "c2")
    d.add_layer(LayerKind.FLATTEN, {}, "flat")
    d.add_layer(LayerKind.DENSE, {"out_features": 10}, "out")
    for a, b in [("c1", "c2"), ("c2", "flat"), ("flat", "out")]:
        d.connect(a, b)
    return d


def test_add_layer_registers_without_connections():
    d = Descriptor()
    d.add_layer(CONV, {"out_channels": 2, "kernel": 3}, "conv1")
    d.add_layer(CONV, {"out_channels": 2, "kernel": 3}, "conv2")
    d.add_layer(LayerKind.DENSE, {"out_features": 10}, "out")
    assert len(d.layers) == 3 and d.connections == []
    with pytest.raises(DeclarationError):
        d.add_layer(CONV, {"out_channels": 2, "kernel": 3}, "conv1")


@pytest.mark.parametrize("params", [{}, {"out_channels": 0, "kernel": 3},
                                    {"out_channels": 2, "kernel": 1.5},
                                    {"out_channels": 2, "kernel": 3, "stride": 2}])
def test_bad_parameters_are_declaration_errors(params):
    with pytest.raises(DeclarationError):
        Descriptor().add_layer(CONV, params, "c")


def test_connect_errors():
    d = chain()
    with pytest.raises(UnknownLayerError):
        d.connect("c1", "ghost")
    with pytest.raises(DeclarationError):
        d.connect("c1", "c2")


def test_sequential_mode_builds_a_named_path():
    d = Descriptor()
    names = [d.add_layer_sequential(CONV, {"out_channels": 2, "kernel": 3}) for _ in range(3)]
    assert names == ["conv2d_0", "conv2d_1", "conv2d_2"]
    assert d.connections == [("conv2d_0", "conv2d_1"), ("conv2d_1", "conv2d_2")]
    single = Descriptor()
    single.add_layer_sequential(LayerKind.RELU)
    assert single.connections == []


def test_validate_examples():
    report = chain().validate()
    assert report.valid and report.order == ["c1", "c2", "flat", "out"]
    assert (report.source, report.sink) == ("c1", "out")

    cyc = Descriptor()
    cyc.add_layer(LayerKind.RELU, {}, "c1")
    cyc.add_layer(LayerKind.RELU, {}, "c2")
    cyc.connect("c1", "c2")
    cyc.connect("c2", "c1")
    assert not cyc.validate().valid
    assert any("cycle" in e for e in cyc.validate().errors)

    orphan = chain()
    orphan.add_layer(LayerKind.RELU, {}, "orphan")
    assert not orphan.validate().valid


def diamond(branch_channels=8):
    d = Descriptor()
    d.add_layer(CONV, {"out_channels": 3, "kernel": 3}, "c1")
    d.add_layer(CONV, {"out_channels": branch_channels, "kernel": 3}, "c2")
    d.add_layer(CONV, {"out_channels": branch_channels, "kernel": 1}, "c3")
    d.add_layer(CONV, {"out_channels": 2, "kernel": 1}, "m")
    for a, b in [("c1", "c2"), ("c1", "c3"), ("c2", "m"), ("c3", "m")]:
        d.connect(a, b)
    return d


def test_diamond_merges_by_channel_concatenation():
    d = diamond()
    assert d.validate().valid
    assert d.infer_shapes((3, 5, 5))["m"][0] == (16, 5, 5)
    net = d.compile((3, 5, 5), seed=1)
    x = np.random.default_rng(0).normal(size=(2, 3, 5, 5))
    out = net.forward(x)
    assert out.shape == (2, 2, 5, 5)
    # merge node input is exactly [c2(c1(x)), c3(c1(x))] along channels
    a = net.layers["c1"].forward(x)
    merged = np.concatenate([net.layers["c2"].forward(a), net.layers["c3"].forward(a)], axis=1)
    assert np.allclose(net.layers["m"].forward(merged), out)


def test_branching_gradients_accumulate():
    net = diamond(2).compile((3, 4, 4), seed=3)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 3, 4, 4))
    r = rng.normal(size=(1, 2, 4, 4))
    net.forward(x)
    dx = net.backward(r)
    eps = 1e-6
    fd = np.zeros_like(x)
    for idx in itertools.product(*map(range, x.shape)):
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        fd[idx] = (np.sum(net.forward(xp) * r) - np.sum(net.forward(xm) * r)) / (2 * eps)
    assert np.allclose(dx, fd, atol=1e-6)


def test_compile_errors():
    d = Descriptor()
    d.add_layer_sequential(CONV, {"out_channels": 2, "kernel": 3})
    d.add_layer_sequential(LayerKind.DENSE, {"out_features": 3})
    with pytest.raises(CompileError):
        d.compile((3, 4, 4))
    with pytest.raises(CompileError):
        Descriptor().compile((3, 4, 4))


def test_mismatched_merge_is_a_compile_error():
    d = Descriptor()
    d.add_layer(CONV, {"out_channels": 2, "kernel": 3}, "a")
    d.add_layer(LayerKind.FLATTEN, {}, "f")
    d.add_layer(CONV, {"out_channels": 2, "kernel": 3}, "b")
    d.add_layer(LayerKind.RELU, {}, "m")
    for e in [("a", "f"), ("a", "b"), ("f", "m"), ("b", "m")]:
        d.connect(*e)
    with pytest.raises(CompileError):
        d.compile((3, 4, 4))


def test_parameter_count_examples():
    single = Descriptor()
    single.add_layer(CONV, {"in_channels": 3, "out_channels": 10, "kernel": 5}, "c")
    assert single.count_parameters((3, 32, 32)) == 760
    assert decode(Chromosome((5, 10, 5, 10))).count_parameters((3, 32, 32)) == 105680
    assert decode(Chromosome((1, 1, 1, 1))).count_parameters((3, 32, 32)) == 10256
    shapeless = Descriptor()
    shapeless.add_layer_sequential(LayerKind.RELU)
    shapeless.add_layer_sequential(LayerKind.FLATTEN)
    assert shapeless.count_parameters((3, 4, 4)) == 0


def test_parameter_count_matches_enumeration_for_random_chromosomes():
    rng = np.random.default_rng(7)
    for _ in range(100):
        genes = tuple(int(g) for g in rng.integers(1, 51, size=4))
        desc = decode(Chromosome(genes), (3, 4, 4), 10)
        expected = conv_net_parameters(genes, (3, 4, 4), 10)
        assert desc.count_parameters((3, 4, 4)) == expected
        assert enumerate_parameters(desc.compile((3, 4, 4))) == expected


def test_same_seed_same_initial_parameters():
    a = decode(Chromosome((3, 4, 3, 4)), (3, 6, 6), 4).compile((3, 6, 6), seed=5)
    b = decode(Chromosome((3, 4, 3, 4)), (3, 6, 6), 4).compile((3, 6, 6), seed=5)
    for sa, sb in zip(a.states, b.states):
        assert np.array_equal(sa.weights, sb.weights) and np.array_equal(sa.biases, sb.biases)
    logits = a.forward(np.zeros((1, 3, 6, 6)))
    assert logits.shape == (1, 4)


def test_serialization_round_trip():
    for d in (chain(), diamond(), decode(Chromosome((5, 10, 5, 10)))):
        back = Descriptor.from_json(d.to_json())
        assert back == d and back.to_json() == d.to_json()
    doc = chain().to_dict()
    assert set(doc) == {"layers", "connections"}
    assert set(doc["layers"][0]) == {"name", "kind", "params"}
    with pytest.raises(DescriptorError):
        Descriptor.from_dict({"layers": []})


def test_decode_is_injective():
    seen = set()
    rng = np.random.default_rng(0)
    for _ in range(300):
        genes = tuple(int(g) for g in rng.integers(1, 51, size=4))
        seen.add((genes, decode(Chromosome(genes)).to_json()))
    assert len({g for g, _ in seen}) == len({j for _, j in seen})


@st.composite
def random_graphs(draw):
    n = draw(st.integers(1, 8))
    pairs = [(a, b) for a in range(n) for b in range(n) if a != b]
    edges = draw(st.lists(st.sampled_from(pairs), unique=True, max_size=len(pairs))) if pairs else []
    return n, edges


def _oracle_valid(n, edges):
    nodes = range(n)
    closure = {v: reachable(edges, v) for v in nodes}
    acyclic = all(v not in reachable(edges, w) for v, w in edges)
    sources = [v for v in nodes if not any(b == v for _, b in edges)]
    sinks = [v for v in nodes if not any(a == v for a, _ in edges)]
    if not acyclic or len(sources) != 1 or len(sinks) != 1:
        return False
    return all(v in closure[sources[0]] and sinks[0] in closure[v] for v in nodes)


@settings(max_examples=300, deadline=None)
@given(random_graphs())
def test_validate_agrees_with_brute_force_oracle(graph):
    n, edges = graph
    d = Descriptor()
    for i in range(n):
        d.add_layer(LayerKind.RELU, {}, f"n{i}")
    for a, b in edges:
        d.connect(f"n{a}", f"n{b}")
    report = d.validate()
    assert report.valid == _oracle_valid(n, edges)
    if report.valid:
        pos = {name: i for i, name in enumerate(report.order)}
        assert all(pos[f"n{a}"] < pos[f"n{b}"] for a, b in edges)
