"""Supernet: mixed-edge mixture semantics, cell DAG, alpha updates, pruning
and genotype derivation."""

import copy
import json

import numpy as np
import pytest

from bnas.errors import SearchError, ShapeError
from bnas.ops import build_op
from bnas.supernet import (
    EDGE_LAYOUT,
    EDGES_PER_CELL,
    AlphaParam,
    DerivedNetwork,
    Genotype,
    MixedEdge,
    Network,
    NetworkConfig,
    derive_genotype,
    reduction_positions,
)
from bnas.tensor import softmax

from test_ops import analytic_param_count

TOY_OPS = ("none", "skip_connect", "sep_conv_3x3", "avg_pool_3x3")


def toy_config(**overrides):
    base = dict(classes=2, in_channels=3, init_channels=8, cells=2, op_set=TOY_OPS,
                precision="bnn", divisor=2, seed=11)
    base.update(overrides)
    return NetworkConfig(**base)


def make_edge(kinds, channels=4, stride=1, divisor=1, seed=3, alpha=None, dtype=np.float32):
    rng = np.random.default_rng(seed)
    ops_ = [build_op(k, channels, stride, "full", rng, dtype=dtype) for k in kinds]
    a = AlphaParam(len(kinds))
    if alpha is not None:
        a.values[...] = alpha
    return MixedEdge(channels, stride, divisor, a, ops_)


class TestMixedEdge:
    def test_divisor_one_single_op_equals_op(self, rng):
        edge = make_edge(["sep_conv_3x3"], channels=4, divisor=1)
        twin = copy.deepcopy(edge.ops[0])
        x = rng.standard_normal((2, 4, 8, 8)).astype(np.float32)
        y = edge.forward(x, False, np.random.default_rng(0))
        np.testing.assert_array_equal(y, twin.forward(x, False))

    def test_all_none_bypasses_half(self, rng):
        edge = make_edge(["none", "none"], channels=4, divisor=2, seed=5)
        x = rng.standard_normal((1, 4, 6, 6)).astype(np.float32)
        y = edge.forward(x, False, np.random.default_rng(42))
        order = np.random.default_rng(42).permutation(4)
        byp = np.sort(order[2:])
        z = np.concatenate([np.zeros_like(x[:, :2]), x[:, byp]], axis=1)
        perm = np.arange(4).reshape(2, 2).T.ravel()
        np.testing.assert_array_equal(y, z[:, perm])

    def test_equal_alpha_mixes_to_mean(self, rng):
        edge = make_edge(["skip_connect", "avg_pool_3x3"], channels=4, divisor=2, seed=9)
        twins = [copy.deepcopy(op) for op in edge.ops]
        x = rng.standard_normal((2, 4, 6, 6)).astype(np.float32)
        mask_rng = np.random.default_rng(17)
        y = edge.forward(x, False, mask_rng)
        # hand-composed mixture with the same mask draw
        order = np.random.default_rng(17).permutation(4)
        sel, byp = np.sort(order[:2]), np.sort(order[2:])
        mask = np.zeros(4, dtype=np.float32)
        mask[sel] = 1.0
        xm = x * mask[None, :, None, None]
        mix = 0.5 * (twins[0].forward(xm, False)[:, sel] + twins[1].forward(xm, False)[:, sel])
        z = np.concatenate([mix, x[:, byp]], axis=1)
        perm = np.arange(4).reshape(2, 2).T.ravel()
        np.testing.assert_allclose(y, z[:, perm], rtol=1e-6, atol=1e-7)

    def test_stride2_bypass_is_avg_pooled(self, rng):
        from bnas.tensor import pool2d

        edge = make_edge(["none", "none"], channels=4, stride=2, divisor=2, seed=2)
        x = rng.standard_normal((1, 4, 8, 8)).astype(np.float32)
        y = edge.forward(x, False, np.random.default_rng(8))
        order = np.random.default_rng(8).permutation(4)
        byp = np.sort(order[2:])
        pooled = pool2d(np.ascontiguousarray(x[:, byp]), "avg", 2)
        z = np.concatenate([np.zeros_like(pooled), pooled], axis=1)
        perm = np.arange(4).reshape(2, 2).T.ravel()
        np.testing.assert_array_equal(y, z[:, perm])

    def test_backward_matches_finite_differences(self, rng):
        """Adjoint of the full mixture path, including mask, bypass, shuffle."""
        from conftest import central_diff, rel_err

        edge = make_edge(["skip_connect", "dil_conv_3x3"], channels=4, divisor=2,
                         seed=21, alpha=[0.3, -0.2], dtype=np.float64)
        x = rng.standard_normal((1, 4, 6, 6))
        g = rng.standard_normal((1, 4, 6, 6))

        def f(v):
            probe = copy.deepcopy(edge)
            out = probe.forward(v, False, np.random.default_rng(33))
            return float(np.sum(out * g))

        probe = copy.deepcopy(edge)
        probe.forward(x, False, np.random.default_rng(33))
        gx = probe.backward(g)
        assert rel_err(gx, central_diff(f, x)) < 1e-3

    def test_unknown_sampled_op_rejected(self, rng):
        edge = make_edge(["none", "skip_connect"], channels=4)
        x = rng.standard_normal((1, 4, 4, 4)).astype(np.float32)
        with pytest.raises(SearchError):
            edge.forward_sampled(x, "sep_conv_5x5", False)

    def test_mask_selects_ceil_of_channels_over_divisor(self, rng):
        """Odd channel counts round the mask size up; the shuffle degrades to
        identity when the divisor does not divide the channels."""
        edge = make_edge(["none", "none"], channels=5, divisor=2, seed=1)
        x = rng.standard_normal((1, 5, 4, 4)).astype(np.float32)
        y = edge.forward(x, False, np.random.default_rng(3))
        order = np.random.default_rng(3).permutation(5)
        sel, byp = np.sort(order[:3]), np.sort(order[3:])
        assert sel.size == 3  # ceil(5/2)
        np.testing.assert_array_equal(
            y, np.concatenate([np.zeros_like(x[:, :3]), x[:, byp]], axis=1)
        )

    def test_prune_keeps_alpha_aligned(self):
        edge = make_edge(["none", "skip_connect", "avg_pool_3x3"], alpha=[0.1, 0.2, 0.3])
        edge.prune_local("skip_connect")
        edge.alpha.prune(1)
        assert edge.kinds == ["none", "avg_pool_3x3"]
        np.testing.assert_allclose(edge.alpha.values, [0.1, 0.3])

    def test_prune_last_op_rejected(self):
        edge = make_edge(["none"])
        with pytest.raises(SearchError):
            edge.prune_local("none")


class TestCellDag:
    def test_edge_layout(self):
        assert EDGES_PER_CELL == 14
        assert EDGE_LAYOUT[0] == (1, -1)
        assert EDGE_LAYOUT[1] == (1, 0)
        assert EDGE_LAYOUT[-1] == (4, 3)
        for to, frm in EDGE_LAYOUT:
            assert frm < to  # acyclic

    def test_every_cell_has_fourteen_edges(self):
        net = Network(toy_config())
        for cell in net.cells:
            assert len(cell.edges) == 14

    def test_node_values_are_sums_of_incoming_edges(self, rng):
        """All-skip sampled arch: B_j = sum of all previous states."""
        net = Network(toy_config(cells=1))
        cell = net.cells[0]
        twin = copy.deepcopy(cell)
        s = rng.standard_normal((1, 24, 8, 8)).astype(np.float32)
        arch = {("normal", e): "skip_connect" for e in range(14)}
        y = cell.forward(s, s, False, arch=arch)
        p0 = twin.pre0.forward(s, False)
        p1 = twin.pre1.forward(s, False)
        states = [p0, p1]
        for j in range(1, 5):
            states.append(sum(states[:j + 1]))
        expected = np.concatenate(states[2:], axis=1)
        np.testing.assert_allclose(y, expected, rtol=1e-5, atol=1e-6)


class TestNetworkForward:
    def test_output_shape(self, rng):
        net = Network(toy_config())
        x = rng.standard_normal((3, 3, 16, 16)).astype(np.float32)
        assert net.forward(x, False).shape == (3, 2)

    def test_all_none_arch_gives_constant_bias_logits(self, rng):
        net = Network(toy_config())
        arch = {key: "none" for key in net.edge_keys()}
        x = rng.standard_normal((4, 3, 16, 16)).astype(np.float32)
        logits = net.forward(x, False, arch)
        np.testing.assert_allclose(logits, np.broadcast_to(net.fc_b.value, logits.shape),
                                   atol=1e-7)

    @pytest.mark.slow
    def test_full_supernet_smoke(self, rng):
        cfg = NetworkConfig(classes=10, init_channels=16, cells=6, divisor=2,
                            precision="bnn", seed=0)
        net = Network(cfg)
        x = rng.standard_normal((4, 3, 32, 32)).astype(np.float32)
        logits = net.forward(x, True)
        assert logits.shape == (4, 10)
        assert np.isfinite(logits).all()
        net.backward(np.ones_like(logits) / 4)
        params, kernels = net.trainable(None)
        assert any(p.grad.any() for p in params)
        assert any(k.g_xhat.any() for k in kernels)

    def test_sampled_forward_independent_of_alpha(self, rng):
        net = Network(toy_config())
        arch = {key: "sep_conv_3x3" for key in net.edge_keys()}
        x = rng.standard_normal((2, 3, 16, 16)).astype(np.float32)
        before = net.forward(x, False, arch)
        for a in net.alpha_params():
            a.values += rng.standard_normal(a.values.shape).astype(a.values.dtype)
        after = net.forward(x, False, arch)
        np.testing.assert_array_equal(before, after)

    def test_mixture_forward_is_seeded_deterministic(self, rng):
        x = np.asarray(rng.standard_normal((2, 3, 16, 16)), dtype=np.float32)
        nets = [Network(toy_config()) for _ in range(2)]
        a = nets[0].forward(x, False)
        b = nets[1].forward(x, False)
        assert a.tobytes() == b.tobytes()


class TestAlphaStep:
    def test_zero_gradient_leaves_alpha(self):
        from bnas.training import OptimConfig, Optimizer

        net = Network(toy_config())
        before = [a.values.copy() for a in net.alpha_params()]
        Optimizer(OptimConfig()).alpha_step(net.alpha_params())
        for a, b in zip(net.alpha_params(), before):
            np.testing.assert_array_equal(a.values, b)

    def test_gradient_sign_moves_useful_op_up(self, rng):
        """Single edge, loss favoring skip over none: one step raises the
        skip weight."""
        from bnas.training import OptimConfig, Optimizer

        edge = make_edge(["none", "skip_connect"], channels=4, divisor=1, alpha=[0.0, 0.0])
        x = rng.standard_normal((2, 4, 6, 6)).astype(np.float32)
        out = edge.forward(x, False, np.random.default_rng(0))
        # L = 0.5 || out - x ||^2, minimized when the mixture is the identity
        edge.backward(out - x)
        Optimizer(OptimConfig(alpha_lr=0.1)).alpha_step([edge.alpha])
        assert edge.alpha.values[1] > 0.0 > edge.alpha.values[0]

    def test_softmax_stays_normalized_after_steps(self, rng):
        edge = make_edge(["none", "skip_connect"], channels=4, divisor=1)
        edge.alpha.values[...] = rng.standard_normal(2)
        assert abs(softmax(edge.alpha.values).sum() - 1.0) < 1e-9


class TestPrune:
    def test_prune_decrements_and_tracks_alpha(self):
        net = Network(NetworkConfig(classes=2, init_channels=8, cells=2, seed=3))
        key = ("normal", 0)
        assert len(net.edge_kinds(key)) == 8
        net.prune(key, "max_pool_3x3")
        assert len(net.edge_kinds(key)) == 7
        assert net.alpha_of(key).values.shape == (7,)
        assert "max_pool_3x3" not in net.edge_kinds(key)

    def test_log_space_size_bookkeeping(self):
        net = Network(NetworkConfig(classes=2, init_channels=8, cells=2, seed=3))
        sizes = net.log_space_size()
        assert sizes["normal"] == pytest.approx(14 * np.log(8))
        for e in range(14):
            net.prune(("normal", e), "none")
        sizes = net.log_space_size()
        assert sizes["normal"] == pytest.approx(14 * np.log(7))
        assert sizes["reduce"] == pytest.approx(14 * np.log(8))

    def test_prune_does_not_affect_other_sampled_archs(self, rng):
        net = Network(toy_config())
        arch = {key: "sep_conv_3x3" for key in net.edge_keys()}
        x = rng.standard_normal((2, 3, 16, 16)).astype(np.float32)
        before = net.forward(x, False, arch)
        for key in net.edge_keys():
            net.prune(key, "avg_pool_3x3")
        after = net.forward(x, False, arch)
        np.testing.assert_array_equal(before, after)

    def test_single_survivor_edge_still_functions(self, rng):
        edge = make_edge(["none", "skip_connect", "avg_pool_3x3"], channels=4, divisor=1,
                         alpha=[0.0, 0.0, 0.0])
        for kind in ("none", "avg_pool_3x3"):
            idx = edge.op_index(kind)
            edge.prune_local(kind)
            edge.alpha.prune(idx)
        x = rng.standard_normal((1, 4, 5, 5)).astype(np.float32)
        y = edge.forward(x, False, np.random.default_rng(0))
        np.testing.assert_array_equal(y, x)  # lone skip at divisor 1


def prune_to_single(net, keep):
    """Prune every edge of `net` down to the op chosen by keep(kind, e)."""
    for kind, e in net.edge_keys():
        target = keep(kind, e)
        for op_kind in [k for k in net.edge_kinds((kind, e)) if k != target]:
            net.prune((kind, e), op_kind)


class TestDeriveGenotype:
    def test_requires_single_op_per_edge(self):
        net = Network(toy_config())
        with pytest.raises(SearchError):
            derive_genotype(net)

    def test_top2_by_alpha(self):
        net = Network(toy_config())
        prune_to_single(net, lambda kind, e: "sep_conv_3x3")
        # node 2's incoming edges are indices 2, 3, 4
        for kind in net.cell_kinds:
            for e, val in zip((2, 3, 4), (0.5, 0.2, 0.9)):
                net.alpha[kind][e].values[...] = val
        genotype = derive_genotype(net)
        for entries in (genotype.normal, genotype.reduce):
            assert len(entries) == 8
            node2 = [(op, frm) for op, frm, to in entries if to == 2]
            froms = sorted(frm for _, frm in node2)
            assert froms == [EDGE_LAYOUT[2][1], EDGE_LAYOUT[4][1]]  # alpha .5 and .9

    def test_every_node_has_arity_two_and_no_none(self):
        net = Network(toy_config())
        prune_to_single(net, lambda kind, e: TOY_OPS[2 + (e % 2)])
        genotype = derive_genotype(net)
        for entries in (genotype.normal, genotype.reduce):
            for j in range(1, 5):
                assert sum(1 for _, _, to in entries if to == j) == 2
            assert all(op != "none" for op, _, _ in entries)

    def test_none_survivors_fall_back_to_skip_with_warning(self):
        net = Network(toy_config())
        prune_to_single(net, lambda kind, e: "none")
        with pytest.warns(UserWarning):
            genotype = derive_genotype(net)
        assert all(op == "skip_connect" for op, _, _ in genotype.normal)

    def test_json_round_trip(self):
        net = Network(toy_config())
        prune_to_single(net, lambda kind, e: "sep_conv_3x3" if e % 3 else "skip_connect")
        genotype = derive_genotype(net)
        back = Genotype.from_dict(json.loads(json.dumps(genotype.to_dict())))
        assert back == genotype


class TestReductionPlacement:
    def test_six_cells_reduce_at_second_and_fourth(self):
        assert reduction_positions(6) == {1, 3}

    def test_two_cells_single_reduction(self):
        assert reduction_positions(2) == {1}

    def test_single_cell_no_reduction(self):
        assert reduction_positions(1) == set()


class TestDerivedNetwork:
    def _genotype(self):
        entries = [
            ("sep_conv_3x3", -1, 1), ("skip_connect", 0, 1),
            ("sep_conv_3x3", 0, 2), ("skip_connect", 1, 2),
            ("avg_pool_3x3", 0, 3), ("sep_conv_3x3", 2, 3),
            ("skip_connect", 2, 4), ("sep_conv_3x3", 3, 4),
        ]
        return Genotype(normal=entries, reduce=entries, meta={})

    def test_forward_backward_shapes(self, rng):
        cfg = toy_config(divisor=1)
        net = DerivedNetwork(self._genotype(), cfg)
        x = rng.standard_normal((2, 3, 16, 16)).astype(np.float32)
        logits = net.forward(x, True)
        assert logits.shape == (2, 2)
        net.backward(np.ones_like(logits))

    @pytest.mark.parametrize("cells", [2, 4])
    def test_weight_count_matches_analytic_table(self, cells):
        cfg = toy_config(divisor=1, cells=cells, precision="bnn")
        genotype = self._genotype()
        net = DerivedNetwork(genotype, cfg)
        c_stem = cfg.init_channels * cfg.stem_multiplier
        count = cfg.in_channels * c_stem * 9 + 2 * c_stem
        reductions = reduction_positions(cells)
        c_pp, c_p, c = c_stem, c_stem, cfg.init_channels
        for i in range(cells):
            red = i in reductions
            if red:
                c *= 2
            count += c_pp * c + 2 * c  # pre0 (1x1 adapter and reduce cost the same)
            count += c_p * c + 2 * c   # pre1
            for op, frm, to in (genotype.reduce if red else genotype.normal):
                stride = 2 if red and frm < 1 else 1
                count += analytic_param_count(op, c, stride, cfg.precision)
            c_pp, c_p = c_p, 4 * c
        count += c_p * cfg.classes + cfg.classes
        assert net.num_weights() == count

    def test_cells_change_weight_count(self):
        cfg2 = toy_config(divisor=1, cells=2)
        cfg4 = toy_config(divisor=1, cells=4)
        g = self._genotype()
        assert DerivedNetwork(g, cfg2).num_weights() != DerivedNetwork(g, cfg4).num_weights()


def test_binarizable_preprocess_flag(rng):
    net = Network(toy_config(binarize_preprocess=True))
    x = rng.standard_normal((1, 3, 16, 16)).astype(np.float32)
    assert np.isfinite(net.forward(x, False)).all()
    from bnas.ops import collect_kernels
    assert collect_kernels(net.cells[0].pre1.body)


def test_factorized_reduce_needs_even_spatial(rng):
    net = Network(toy_config())
    x = rng.standard_normal((1, 3, 15, 15)).astype(np.float32)
    with pytest.raises(ShapeError):
        net.forward(x, False)
