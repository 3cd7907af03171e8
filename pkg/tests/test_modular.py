import functools
import itertools
from collections import deque

import numpy as np
import pytest

from fedmn import tensor as T
from fedmn.errors import ConfigError, RoutingError, ShapeError
from fedmn.modular import (
    ArchitectureSpec,
    DecisionVector,
    active_mask,
    block_count,
    block_input,
    connection_matrices,
    edge_index,
    encode,
    forward,
    output_index,
    parse_architecture,
    path_count,
    repair_output_path,
)
from fedmn.pool import ModulePool


def small_spec(widths, **kw):
    dims = dict(input_dim=5, num_classes=3, encoder_out_dim=6, block_hidden_dim=7, block_out_dim=4)
    dims.update(kw)
    return ArchitectureSpec(tuple(widths), **dims)


@pytest.mark.parametrize("widths,paths,blocks", [
    ((2, 2, 2), 10, 4),
    ((3, 3, 3), 21, 6),
    ((1, 4, 3), 19, 7),
])
def test_counts_examples(widths, paths, blocks):
    assert path_count(widths) == paths
    assert block_count(widths) == blocks


def test_counts_closed_form_exhaustive():
    for L in (2, 3, 4):
        for widths in itertools.product(range(1, 6), repeat=L):
            spec = small_spec(widths)
            edges = sum(widths[i] * widths[i + 1] for i in range(L - 1)) + widths[-1]
            assert path_count(spec) == edges
            assert block_count(spec) == sum(widths[1:])
            mats, out = connection_matrices(np.zeros(edges), spec)
            assert sum(m.size for m in mats.values()) + out.size == edges


def test_parse_architecture():
    assert parse_architecture("1x4x3") == (1, 4, 3)
    assert parse_architecture("2×2") == (2, 2)
    for bad in ("3", "1x", "ax2", "", None):
        with pytest.raises(ConfigError):
            parse_architecture(bad)


def test_spec_rejects_bad_widths():
    with pytest.raises(ConfigError):
        small_spec((2,))
    with pytest.raises(ConfigError):
        small_spec((2, 0, 1))


def test_canonical_indexing_is_source_major():
    spec = small_spec((2, 3, 2))
    # pair (1,2): 6 entries, pair (2,3): 6 entries, output: 2
    assert edge_index(spec, 2, 0, 0) == 0
    assert edge_index(spec, 2, 0, 2) == 2
    assert edge_index(spec, 2, 1, 0) == 3
    assert edge_index(spec, 3, 0, 0) == 6
    assert edge_index(spec, 3, 2, 1) == 11
    assert output_index(spec, 0) == 12
    values = np.arange(14, dtype=float) / 13
    mats, out = connection_matrices(values, spec)
    assert mats[2].shape == (3, 2) and mats[3].shape == (2, 3)
    assert mats[2][2, 1] == values[5]
    assert mats[3][1, 2] == values[11]
    np.testing.assert_array_equal(out, values[12:])


def test_decision_vector_invariants():
    with pytest.raises(ValueError):
        DecisionVector(np.array([0.5, 1.0]), hard=True)
    with pytest.raises(ValueError):
        DecisionVector(np.array([1.5]))
    v = DecisionVector.from_bits("1011")
    assert v.bitstring() == "1011" and len(v) == 4
    with pytest.raises(ValueError):
        DecisionVector(np.array([0.3])).bitstring()


def test_encode_singleton_and_independence(rng):
    spec = small_spec((1, 2))
    pool = ModulePool.create(spec, seed=3)
    x = rng.normal(size=(4, 5))
    (z,) = encode(x, pool)
    w, b = pool.block_params(1, 0)
    np.testing.assert_array_equal(z.data, np.maximum(x @ w.data + b.data, 0))

    spec2 = small_spec((2, 2))
    pool2 = ModulePool.create(spec2, seed=3)
    before = encode(x, pool2)[0].data.copy()
    for p in pool2.block_params(1, 1):
        p.data += 10.0
    np.testing.assert_array_equal(encode(x, pool2)[0].data, before)
    for a, b in zip(pool2.block_params(1, 1), pool2.block_params(1, 0)):
        a.data[...] = b.data
    z0, z1 = encode(x, pool2)
    np.testing.assert_array_equal(z0.data, z1.data)


def test_encode_dimension_mismatch():
    pool = ModulePool.create(small_spec((1, 2)), seed=0)
    with pytest.raises(ShapeError):
        encode(np.zeros((2, 4)), pool)


def test_block_input_examples(rng):
    u1, u2 = T.tensor(rng.normal(size=(3, 4))), T.tensor(rng.normal(size=(3, 4)))
    assert np.all(block_input([u1, u2], [0.0, 0.0]).data == 0)
    np.testing.assert_array_equal(block_input([u1, u2], [1.0, 0.0]).data, u1.data)
    np.testing.assert_allclose(block_input([u1, u2], [1.0, 1.0]).data, (u1.data + u2.data) / 2, rtol=1e-15)
    # below threshold counts as no input
    assert np.all(block_input([u1, u2], [5e-7, 4e-7]).data == 0)


def test_block_input_relaxed_continuity(rng):
    ups = [T.tensor(rng.normal(size=(2, 3))) for _ in range(3)]
    g = np.array([0.2, 0.7, 0.05])
    base = block_input(ups, g).data
    for scale in (1e-2, 1e-4, 1e-6, 1e-8):
        delta = rng.normal(size=3) * scale
        diff = np.max(np.abs(block_input(ups, g + delta).data - base))
        assert diff < 50 * scale


def _dense_oracle(x, pool):
    """Ungated composition: every block averages all upstream outputs."""
    spec = pool.spec
    params = {pid: p.data for pid, p in pool.params.items()}

    def run(h, layer, j, final):
        n = len(spec.block_shapes(layer)) // 2 if layer > 1 else 1
        for i in range(n):
            h = h @ params[(layer, j, f"w{i}")] + params[(layer, j, f"b{i}")]
            if i < n - 1 or not final:
                h = np.maximum(h, 0)
        return h

    outs = [run(x, 1, j, False) for j in range(spec.width(1))]
    for l in range(2, spec.num_layers + 1):
        mean_in = functools.reduce(np.add, outs) / len(outs)
        outs = [run(mean_in, l, j, l == spec.num_layers) for j in range(spec.width(l))]
    return functools.reduce(np.add, outs) / len(outs)


@pytest.mark.parametrize("arch", ["2x2x2", "1x4x3", "3x3x3", "2x3", "1x1x1x1", "3x2x4x2"])
@pytest.mark.parametrize("depth", [1, 2])
def test_all_ones_matches_dense_network_bit_for_bit(arch, depth, rng):
    spec = small_spec(parse_architecture(arch), block_depth=depth)
    pool = ModulePool.create(spec, seed=5)
    x = rng.normal(size=(6, 5))
    logits = forward(x, DecisionVector.ones(spec), pool)
    assert np.array_equal(logits.data, _dense_oracle(x, pool))


def _set(pool, pid, value):
    pool.params[pid].data[...] = np.asarray(value, dtype=float)


def test_hand_traced_forward_1x2x2():
    spec = ArchitectureSpec((1, 2, 2), input_dim=2, num_classes=2, encoder_out_dim=2,
                            block_hidden_dim=2, block_out_dim=2, block_depth=1)
    pool = ModulePool.create(spec, seed=0)
    _set(pool, (1, 0, "w0"), [[1, 0], [0, 1]])
    _set(pool, (1, 0, "b0"), [0, -1])
    _set(pool, (2, 0, "w0"), [[1, 1], [0, 1]])
    _set(pool, (2, 0, "b0"), [0, 0])
    _set(pool, (2, 1, "w0"), [[-1, 0], [0, 3]])
    _set(pool, (2, 1, "b0"), [0, 0])
    _set(pool, (3, 0, "w0"), [[1, 0], [0, 1]])
    _set(pool, (3, 0, "b0"), [0, 0.5])
    _set(pool, (3, 1, "w0"), [[2, 0], [1, 1]])
    _set(pool, (3, 1, "b0"), [0, 0])
    x = np.array([[1.0, 2.0]])
    # encoder: relu([1, 2 - 1]) = [1, 1]
    # layer 2: A = [1, 2], B = relu([-1, 3]) = [0, 3]
    # layer 3: block 0 sees mean(A, B) = [0.5, 2.5] -> [0.5, 3.0]
    #          block 1 sees B only = [0, 3] -> [3, 3]
    # output: mean of both = [1.75, 3.0]
    V = DecisionVector.from_bits("11101111")
    np.testing.assert_allclose(forward(x, V, pool).data, [[1.75, 3.0]], rtol=0, atol=1e-15)
    V = DecisionVector.from_bits("11101110")
    np.testing.assert_allclose(forward(x, V, pool).data, [[0.5, 3.0]], rtol=0, atol=1e-15)


def test_inactive_blocks_have_no_influence_and_zero_gradient(rng):
    spec = small_spec((2, 2, 2))
    x = rng.normal(size=(4, 5))
    y = T.one_hot(rng.integers(0, 3, size=4), 3)
    checked = 0
    for bits in itertools.product([0, 1], repeat=path_count(spec)):
        mask = active_mask(np.array(bits, float), spec)
        if mask.all() or not any(bits[-2:][j] and mask[2 + j] for j in range(2)):
            continue
        if rng.random() > 0.15:
            continue
        V = DecisionVector(np.array(bits, float), hard=True)
        pool = ModulePool.create(spec, seed=checked)
        params = pool.parameters()
        T.zero_grad(params)
        loss = T.softmax_cross_entropy(forward(x, V, pool), y)
        loss.backward()
        for (l, j), on in zip(spec.block_keys(), mask):
            if on:
                continue
            for p in pool.block_params(l, j):
                assert np.all(p.grad == 0)
                p.data += rng.normal(size=p.data.shape)
        assert T.softmax_cross_entropy(forward(x, V, pool), y).item() == loss.item()
        checked += 1
    assert checked > 20


def test_dead_block_output_excluded_when_outgoing_gate_off(rng):
    spec = small_spec((1, 2, 1))
    pool = ModulePool.create(spec, seed=2)
    x = rng.normal(size=(3, 5))
    # block (2,1) has no input and no outgoing path
    V = DecisionVector.from_bits("10101")
    ref = forward(x, V, pool).data.copy()
    for p in pool.block_params(2, 1):
        p.data += 3.0
    np.testing.assert_array_equal(forward(x, V, pool).data, ref)


def test_no_live_output_raises_without_fallback(rng):
    spec = small_spec((1, 2))
    pool = ModulePool.create(spec, seed=0)
    V = DecisionVector.from_bits("1100")
    with pytest.raises(RoutingError):
        forward(rng.normal(size=(2, 5)), V, pool)
    logits = forward(rng.normal(size=(2, 5)), V, pool, fallback=1)
    assert logits.shape == (2, 3)


def _bfs_mask(bits, widths):
    """Reachability from encoders, walking the canonical order with a counter."""
    edges = {}
    i = 0
    for l in range(1, len(widths)):
        for k in range(widths[l - 1]):
            for j in range(widths[l]):
                edges.setdefault((l, k), []).append(((l + 1, j), bits[i]))
                i += 1
    seen = {(1, k) for k in range(widths[0])}
    queue = deque(seen)
    while queue:
        node = queue.popleft()
        for nxt, on in edges.get(node, []):
            if on and nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return [(l, j) in seen for l in range(2, len(widths) + 1) for j in range(widths[l - 1])]


@pytest.mark.parametrize("widths", [(1, 2, 2), (2, 2, 2)])
def test_active_mask_matches_brute_force_reachability(widths):
    spec = small_spec(widths)
    for bits in itertools.product([0, 1], repeat=path_count(spec)):
        assert active_mask(np.array(bits, float), spec).tolist() == _bfs_mask(bits, widths)


def test_active_mask_examples():
    spec = small_spec((1, 2, 2))
    assert active_mask(np.ones(8), spec).all()
    # encoder feeds A only; layer-3 block 1 hangs off B alone
    bits = np.array([1, 0, 1, 0, 0, 1, 1, 1], float)
    assert active_mask(bits, spec).tolist() == [True, False, True, False]


def test_repair_switches_on_best_reachable_output():
    spec = small_spec((1, 2, 2))
    bits = np.array([1, 0, 1, 1, 0, 0, 0, 0], float)
    probs = np.array([0.5] * 6 + [0.2, 0.4])
    fixed = repair_output_path(bits, probs, spec)
    assert fixed.bitstring() == "10110001"
    healthy = DecisionVector.from_bits("10110010")
    assert repair_output_path(healthy, probs, spec).bitstring() == "10110010"


def test_repair_builds_path_back_to_encoder():
    spec = small_spec((1, 2, 2))
    probs = np.array([0.1, 0.3, 0.2, 0.1, 0.6, 0.2, 0.4, 0.9])
    fixed = repair_output_path(np.zeros(8), probs, spec)
    # output gate 1, then best incoming edge into (3,1) is from (2,1), then (1,0)->(2,1)
    assert fixed.bitstring() == "01000101"
    assert active_mask(fixed, spec)[3]
    pool = ModulePool.create(spec, seed=0)
    forward(np.zeros((1, 5)), fixed, pool)
