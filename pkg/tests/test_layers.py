import numpy as np
import pytest

from quantkan.errors import ConfigError, DimensionError
from quantkan.layers import (BSPLINE, GRAM, RBF, BasisConfig, KanLayer,
                             basis_features, bspline_basis, build_kan_mlp,
                             gram_basis, kan_forward, rbf_basis, silu)
from quantkan.tensor import Rng, Tensor

from oracles import bspline_exact, legendre_scalar, rbf_scalar, tape_grads


class TestSilu:
    def test_zero(self):
        assert silu(Tensor([0.0])).data[0] == 0.0

    def test_asymptotes(self):
        out = silu(Tensor([30.0, -30.0])).data
        assert abs(out[0] - 30.0) < 1e-8
        assert abs(out[1]) < 1e-8

    def test_at_one(self):
        # 1 / (1 + e^-1), evaluated from the scalar formula
        assert abs(silu(Tensor([1.0])).data[0] - 0.7310585786300049) < 1e-15


class TestBsplineBasis:
    def test_order_zero_is_indicator(self):
        cfg = BasisConfig(BSPLINE, grid_size=4, spline_order=0, domain=(0.0, 1.0))
        out = bspline_basis(Tensor([[0.3]]), cfg).data[0, 0]
        assert out.sum() == 1.0
        assert (out == 1.0).sum() == 1

    @pytest.mark.parametrize("order", [1, 2, 3])
    @pytest.mark.parametrize("grid", [3, 5, 7])
    def test_partition_of_unity(self, order, grid):
        cfg = BasisConfig(BSPLINE, grid_size=grid, spline_order=order)
        x = Rng(order * 10 + grid).uniform((1, 1000), -1, 1)
        sums = bspline_basis(Tensor(x), cfg).data.sum(axis=-1)
        assert np.abs(sums - 1.0).max() < 1e-10

    def test_locality(self):
        cfg = BasisConfig(BSPLINE, grid_size=7, spline_order=3)
        x = Rng(2).uniform((1, 200), -1, 1)
        vals = bspline_basis(Tensor(x), cfg).data
        assert ((vals != 0).sum(axis=-1) <= cfg.spline_order + 1).all()

    def test_matches_exact_rational_recursion(self):
        cfg = BasisConfig(BSPLINE, grid_size=5, spline_order=3)
        out = bspline_basis(Tensor([[0.3]]), cfg).data[0, 0]
        oracle = bspline_exact(0.3, 5, 3)
        assert np.abs(out - np.array(oracle)).max() < 1e-12

    def test_outside_domain_uses_extension_knots(self):
        cfg = BasisConfig(BSPLINE, grid_size=5, spline_order=3)
        vals = bspline_basis(Tensor([[1.5]]), cfg).data[0, 0]
        oracle = bspline_exact(1.5, 5, 3)
        assert np.abs(vals - np.array(oracle)).max() < 1e-12
        assert vals.sum() < 1.0  # unity only holds inside the domain

    def test_gradient(self):
        cfg = BasisConfig(BSPLINE, grid_size=5, spline_order=3)
        x = Rng(4).uniform((3, 2), -0.9, 0.9)

        def build(ts):
            return (bspline_basis(ts[0], cfg) ** 2.0).sum()

        assert tape_grads(build, [x]) < 1e-4


class TestRbfBasis:
    def test_value_one_at_center(self):
        cfg = BasisConfig(RBF, grid_size=5, spline_order=3)
        centers, _ = cfg.rbf_centers()
        out = rbf_basis(Tensor([[centers[2]]]), cfg).data[0, 0]
        assert out[2] == 1.0

    def test_decay_far_outside(self):
        cfg = BasisConfig(RBF, grid_size=5, spline_order=3)
        out = rbf_basis(Tensor([[9.0]]), cfg).data[0, 0]
        assert (out < 1e-6).all()

    def test_midpoint_between_centers(self):
        cfg = BasisConfig(RBF, grid_size=5, spline_order=3)
        centers, width = cfg.rbf_centers()
        mid = (centers[3] + centers[4]) / 2
        out = rbf_basis(Tensor([[mid]]), cfg).data[0, 0]
        expected = np.exp(-0.25)
        assert abs(out[3] - expected) < 1e-12
        assert abs(out[4] - expected) < 1e-12

    def test_matches_scalar_formula(self):
        cfg = BasisConfig(RBF, grid_size=5, spline_order=3)
        centers, width = cfg.rbf_centers()
        out = rbf_basis(Tensor([[0.37]]), cfg).data[0, 0]
        assert np.abs(out - rbf_scalar(0.37, centers, width)).max() < 1e-14

    def test_gradient(self):
        cfg = BasisConfig(RBF, grid_size=5, spline_order=3)
        x = Rng(6).uniform((3, 2), -1, 1)

        def build(ts):
            return (rbf_basis(ts[0], cfg) ** 2.0).sum()

        assert tape_grads(build, [x]) < 1e-4


class TestGramBasis:
    def test_degree_zero_and_one(self):
        cfg = BasisConfig(GRAM, degree=3)
        out = gram_basis(Tensor([[0.4]]), cfg).data[0, 0]
        assert out[0] == 1.0
        assert out[1] == 0.4

    def test_p3_at_half(self):
        cfg = BasisConfig(GRAM, degree=3)
        out = gram_basis(Tensor([[0.5]]), cfg).data[0, 0]
        assert abs(out[3] - (-0.4375)) < 1e-15

    def test_matches_scalar_recurrence(self):
        cfg = BasisConfig(GRAM, degree=5)
        out = gram_basis(Tensor([[-0.73]]), cfg).data[0, 0]
        assert np.abs(out - np.array(legendre_scalar(-0.73, 5))).max() < 1e-14

    def test_bounded_on_domain(self):
        cfg = BasisConfig(GRAM, degree=6)
        x = Rng(8).uniform((1, 500), -1, 1)
        vals = gram_basis(Tensor(x), cfg).data
        assert (np.abs(vals) <= 1.0 + 1e-12).all()

    def test_requires_symmetric_domain(self):
        with pytest.raises(ConfigError):
            BasisConfig(GRAM, domain=(0.0, 1.0))

    def test_gradient_through_tanh_squash(self):
        cfg = BasisConfig(GRAM, degree=3)
        x = Rng(10).uniform((3, 2), -2, 2)

        def build(ts):
            return (basis_features(ts[0], cfg) ** 2.0).sum()

        assert tape_grads(build, [x]) < 1e-4


class TestKanForward:
    def test_spline_branch_off_gives_plain_linear(self):
        cfg = BasisConfig(BSPLINE)
        layer = KanLayer(3, 2, cfg, Rng(0), base_activation="identity")
        layer.W_s.data[:] = 0.0
        x = Rng(1).uniform((4, 3), -1, 1)
        out = kan_forward(layer, Tensor(x))
        assert np.abs(out.data - x @ layer.W_b.data.T).max() < 1e-14

    def test_base_branch_vanishes_at_zero_with_silu(self):
        cfg = BasisConfig(BSPLINE)
        layer = KanLayer(3, 2, cfg, Rng(0))
        layer.W_b.data[:] = 0.0
        x = Tensor(np.zeros((1, 3)))
        expected = layer.spline_features(x).data @ layer.W_s.data.T
        out = kan_forward(layer, x)
        assert np.array_equal(out.data, expected)

    @pytest.mark.parametrize("kind", [BSPLINE, RBF, GRAM])
    def test_edgewise_scalar_oracle(self, kind):
        cfg = BasisConfig(kind, grid_size=5, spline_order=3, degree=3)
        layer = KanLayer(4, 3, cfg, Rng(12))
        x = Rng(13).uniform((3, 4), -0.9, 0.9)
        out = kan_forward(layer, Tensor(x)).data

        nb = cfg.num_basis
        centers, width = cfg.rbf_centers()
        expected = np.zeros((3, 3))
        for b in range(3):
            for o in range(3):
                acc = 0.0
                for i in range(4):
                    v = x[b, i]
                    acc += layer.W_b.data[o, i] * (v / (1 + np.exp(-v)))
                    if kind == BSPLINE:
                        phi = bspline_exact(v, 5, 3)
                    elif kind == RBF:
                        phi = rbf_scalar(v, centers, width)
                    else:
                        phi = legendre_scalar(np.tanh(v), 3)
                    for j in range(nb):
                        acc += layer.W_s.data[o, i * nb + j] * phi[j]
                expected[b, o] = acc
        rel = np.abs(out - expected).max() / max(np.abs(expected).max(), 1.0)
        assert rel < 1e-10

    def test_linear_in_weights(self):
        cfg = BasisConfig(BSPLINE)
        layer = KanLayer(3, 2, cfg, Rng(3))
        x = Tensor(Rng(4).uniform((5, 3), -1, 1))
        base = kan_forward(layer, x).data
        layer.W_b.data *= 2.0
        doubled_b = kan_forward(layer, x).data
        base_branch = layer.base_features(x).data @ (layer.W_b.data / 2.0).T
        assert np.abs((doubled_b - base) - base_branch).max() < 1e-12
        layer.W_b.data /= 2.0
        layer.W_s.data *= 3.0
        tripled_s = kan_forward(layer, x).data
        spline_branch = layer.spline_features(x).data @ (layer.W_s.data / 3.0).T
        assert np.abs((tripled_s - base) - 2.0 * spline_branch).max() < 1e-12

    def test_gradients_match_finite_differences(self):
        cfg = BasisConfig(BSPLINE)
        rng = Rng(5)
        xd = rng.uniform((3, 4), -0.8, 0.8)
        layer = KanLayer(4, 2, cfg, Rng(6))

        def build(ts):
            probe = KanLayer(4, 2, cfg, Rng(6))
            probe.W_b, probe.W_s = ts[1], ts[2]
            return (kan_forward(probe, ts[0]) ** 2.0).mean()

        arrays = [xd, layer.W_b.data.copy(), layer.W_s.data.copy()]
        assert tape_grads(build, arrays) < 1e-4

    def test_width_mismatch(self):
        layer = KanLayer(3, 2, BasisConfig(BSPLINE), Rng(0))
        with pytest.raises(DimensionError):
            kan_forward(layer, Tensor(np.zeros((2, 5))))

    def test_finite_on_finite_input(self):
        for kind in (BSPLINE, RBF, GRAM):
            layer = KanLayer(6, 4, BasisConfig(kind), Rng(1))
            out = kan_forward(layer, Tensor(Rng(2).uniform((8, 6), -5, 5)))
            assert np.isfinite(out.data).all()


class TestBuildKanMlp:
    def test_paper_architecture_parameter_count(self):
        cfg = BasisConfig(BSPLINE, grid_size=5, spline_order=3)
        model = build_kan_mlp([784, 64, 10], cfg, Rng(0))
        assert len(model.layers) == 2
        expected = sum(o * i * (1 + 5 + 3)
                       for i, o in [(784, 64), (64, 10)])
        assert model.num_parameters() == expected

    def test_single_layer_shapes(self):
        cfg = BasisConfig(BSPLINE, grid_size=5, spline_order=3)
        model = build_kan_mlp([4, 2], cfg, Rng(0))
        assert model.layers[0].W_b.shape == (2, 4)
        assert model.layers[0].W_s.shape == (2, 32)

    def test_seed_determinism(self):
        cfg = BasisConfig(BSPLINE)
        m1 = build_kan_mlp([4, 3, 2], cfg, Rng(9))
        m2 = build_kan_mlp([4, 3, 2], cfg, Rng(9))
        for p1, p2 in zip(m1.parameters(), m2.parameters()):
            assert np.array_equal(p1.data, p2.data)

    def test_too_few_widths(self):
        with pytest.raises(ConfigError):
            build_kan_mlp([4], BasisConfig(BSPLINE), Rng(0))
