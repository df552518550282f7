"""Channel highlighters and depth-wise cross correlation.

Hand-computed expectations were derived independently (plain math on the
documented layer formulas) and are frozen here as constants.
"""

import numpy as np
import pytest
import torch

from fsdet.backbone import FeatureMap, SupportEmbedding
from fsdet.errors import ShapeError, UsageError
from fsdet.highlight import (
    COARSE,
    FINE,
    CoarseHighlighter,
    ExcitingFactor,
    FineHighlighter,
    HighlightModule,
    apply_highlight,
    dw_cross_correlate,
)
from conftest import make_feature_map


def brute_force_dwcc(vals: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Sliding-window cross correlation, channel by channel, valid mode."""
    c, h, w = vals.shape
    _, kh, kw = kernels.shape
    out = np.zeros((c, h - kh + 1, w - kw + 1), dtype=np.float64)
    for ch in range(c):
        for i in range(h - kh + 1):
            for j in range(w - kw + 1):
                out[ch, i, j] = np.sum(
                    vals[ch, i:i + kh, j:j + kw] * kernels[ch]
                )
    return out


def _embedding(values, class_id=0):
    return SupportEmbedding(
        values=torch.as_tensor(values, dtype=torch.float32), class_id=class_id
    )


class TestCoarseHighlighter:
    def test_hand_forward(self):
        """4 -> 3 -> 3 -> 2, all weights 0.1, fc3 bias [0, -1], input [1,2,3,4]:
        relu(fc1) = [1,1,1]; relu(fc2) = [0.3]*3; fc3 pre = [0.09, -0.91]."""
        hl = CoarseHighlighter(4, 3, 3, 2)
        with torch.no_grad():
            for layer in (hl.fc1, hl.fc2, hl.fc3):
                layer.weight.fill_(0.1)
                layer.bias.zero_()
            hl.fc3.bias.copy_(torch.tensor([0.0, -1.0]))
        factor = hl(_embedding([1.0, 2.0, 3.0, 4.0], class_id=7))
        expected = [0.5224848247918001, 0.2869998372477183]
        np.testing.assert_allclose(factor.values.detach().numpy(), expected,
                                   atol=1e-6)
        assert factor.stage == COARSE
        assert factor.class_id == 7

    def test_zero_parameters_give_half_everywhere(self):
        hl = CoarseHighlighter(5, 4, 4, 6)
        with torch.no_grad():
            for p in hl.parameters():
                p.zero_()
        factor = hl(_embedding(np.random.default_rng(0).normal(size=5)))
        np.testing.assert_allclose(factor.values.detach().numpy(), 0.5,
                                   atol=1e-7)

    def test_factors_strictly_inside_unit_interval(self):
        torch.manual_seed(0)
        hl = CoarseHighlighter(8, 6, 6, 10)
        rng = np.random.default_rng(1)
        for _ in range(20):
            v = hl(_embedding(rng.normal(scale=3.0, size=8))).values
            assert (v > 0).all() and (v < 1).all()

    def test_wrong_embedding_length(self):
        hl = CoarseHighlighter(4, 3, 3, 2)
        with pytest.raises(ShapeError):
            hl(_embedding([1.0, 2.0]))


class TestFineHighlighter:
    W = [[1.0, 0.0, 0.0], [0.0, -2.0, 0.0], [0.5, 0.5, 0.5]]
    B = [0.0, 1.0, -1.0]
    COARSE_IN = [0.2, 0.6, 0.9]
    # pre-activation: [0.2, -0.2, -0.15]
    SIGMOID_OUT = [0.549833997312478, 0.45016600268752216, 0.46257015465625045]
    IDENTITY_OUT = [0.2, -0.19999999999999996, -0.1499999999999999]

    def _make(self, activation):
        hl = FineHighlighter(3, activation=activation)
        with torch.no_grad():
            hl.fc.weight.copy_(torch.tensor(self.W))
            hl.fc.bias.copy_(torch.tensor(self.B))
        return hl

    def _coarse_factor(self):
        return ExcitingFactor(
            values=torch.tensor(self.COARSE_IN), class_id=3, stage=COARSE
        )

    def test_hand_forward_sigmoid(self):
        out = self._make("sigmoid")(self._coarse_factor())
        np.testing.assert_allclose(out.values.detach().numpy(),
                                   self.SIGMOID_OUT, atol=1e-6)
        assert out.stage == FINE

    def test_hand_forward_identity(self):
        out = self._make("identity")(self._coarse_factor())
        np.testing.assert_allclose(out.values.detach().numpy(),
                                   self.IDENTITY_OUT, atol=1e-6)

    def test_stage_mismatch_rejected(self):
        hl = FineHighlighter(3)
        fine = ExcitingFactor(values=torch.zeros(3), class_id=0, stage=FINE)
        with pytest.raises(UsageError):
            hl(fine)

    def test_unknown_activation_rejected(self):
        with pytest.raises(UsageError):
            FineHighlighter(3, activation="tanh")


class TestDwCrossCorrelate:
    def test_matches_brute_force_on_random_instances(self):
        rng = np.random.default_rng(42)
        for _ in range(30):
            c = int(rng.integers(1, 9))
            h = int(rng.integers(3, 17))
            w = int(rng.integers(3, 17))
            kh = int(rng.integers(1, min(4, h + 1)))
            kw = int(rng.integers(1, min(4, w + 1)))
            vals = rng.normal(size=(c, h, w))
            kernels = rng.normal(size=(c, kh, kw))
            fm = make_feature_map(vals)
            out = dw_cross_correlate(
                fm, torch.as_tensor(kernels, dtype=torch.float32)
            )
            expected = brute_force_dwcc(vals, kernels)
            np.testing.assert_allclose(out.values.detach().numpy(), expected,
                                       atol=1e-4, rtol=1e-4)
            assert out.values.shape == (c, h - kh + 1, w - kw + 1)

    def test_identity_kernels_preserve_map(self):
        fm = make_feature_map(np.random.default_rng(0).normal(size=(4, 6, 6)))
        out = dw_cross_correlate(fm, torch.ones(4, 1, 1))
        assert torch.allclose(out.values, fm.values)
        assert out.stride == fm.stride
        assert out.image_size == fm.image_size

    def test_zero_kernels_annihilate(self):
        fm = make_feature_map(np.random.default_rng(1).normal(size=(3, 5, 5)))
        out = dw_cross_correlate(fm, torch.zeros(3, 1, 1))
        assert torch.count_nonzero(out.values) == 0

    def test_one_by_one_serial_composition_is_product(self):
        """Two serial 1x1 correlations equal one correlation with the
        elementwise kernel product, in either order."""
        rng = np.random.default_rng(2)
        fm = make_feature_map(rng.normal(size=(5, 4, 4)))
        a = torch.as_tensor(rng.normal(size=(5, 1, 1)), dtype=torch.float32)
        b = torch.as_tensor(rng.normal(size=(5, 1, 1)), dtype=torch.float32)
        ab = dw_cross_correlate(dw_cross_correlate(fm, a), b)
        ba = dw_cross_correlate(dw_cross_correlate(fm, b), a)
        prod = dw_cross_correlate(fm, a * b)
        assert torch.allclose(ab.values, prod.values, atol=1e-5)
        assert torch.allclose(ba.values, prod.values, atol=1e-5)

    def test_linear_in_kernels(self):
        rng = np.random.default_rng(3)
        fm = make_feature_map(rng.normal(size=(2, 6, 6)))
        k1 = torch.as_tensor(rng.normal(size=(2, 3, 3)), dtype=torch.float32)
        k2 = torch.as_tensor(rng.normal(size=(2, 3, 3)), dtype=torch.float32)
        lhs = dw_cross_correlate(fm, 2.0 * k1 + k2).values
        rhs = (2.0 * dw_cross_correlate(fm, k1).values
               + dw_cross_correlate(fm, k2).values)
        assert torch.allclose(lhs, rhs, atol=1e-5)

    def test_channel_mismatch_rejected(self):
        fm = make_feature_map(np.zeros((3, 4, 4)))
        with pytest.raises(ShapeError):
            dw_cross_correlate(fm, torch.ones(2, 1, 1))

    def test_oversized_kernel_rejected(self):
        fm = make_feature_map(np.zeros((2, 4, 4)))
        with pytest.raises(ShapeError):
            dw_cross_correlate(fm, torch.ones(2, 5, 5))


def _relative_error(a, n):
    return abs(a - n) / max(1.0, abs(a), abs(n))


def central_difference_grads(f, params, eps=1e-5):
    """Numeric gradient of scalar f() w.r.t. a list of tensors."""
    grads = []
    for p in params:
        g = torch.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = f()
            flat[i] = orig - eps
            lo = f()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


class TestGradients:
    """Analytic vs central-difference gradients, relative error <= 1e-4."""

    def test_coarse_highlighter_gradients(self):
        torch.manual_seed(5)
        hl = CoarseHighlighter(4, 3, 3, 2).double()
        emb = SupportEmbedding(
            values=torch.randn(4, dtype=torch.float64), class_id=0
        )
        probe = torch.randn(2, dtype=torch.float64)

        def loss():
            with torch.no_grad():
                return float((hl(emb).values * probe).sum())

        out = (hl(emb).values * probe).sum()
        out.backward()
        params = [p for p in hl.parameters()]
        numeric = central_difference_grads(loss, [p.data for p in params])
        for p, n in zip(params, numeric):
            worst = max(
                _relative_error(a, b)
                for a, b in zip(p.grad.reshape(-1).tolist(),
                                n.reshape(-1).tolist())
            )
            assert worst <= 1e-4

    def test_fine_highlighter_gradients(self):
        torch.manual_seed(6)
        hl = FineHighlighter(3).double()
        factor = ExcitingFactor(
            values=torch.randn(3, dtype=torch.float64), class_id=0,
            stage=COARSE,
        )
        probe = torch.randn(3, dtype=torch.float64)

        def loss():
            with torch.no_grad():
                return float((hl(factor).values * probe).sum())

        (hl(factor).values * probe).sum().backward()
        params = list(hl.parameters())
        numeric = central_difference_grads(loss, [p.data for p in params])
        for p, n in zip(params, numeric):
            worst = max(
                _relative_error(a, b)
                for a, b in zip(p.grad.reshape(-1).tolist(),
                                n.reshape(-1).tolist())
            )
            assert worst <= 1e-4

    def test_correlation_gradients_wrt_kernels(self):
        torch.manual_seed(7)
        vals = torch.randn(3, 5, 5, dtype=torch.float64)
        fm = FeatureMap(values=vals, stride=16, image_size=(80, 80))
        kernels = torch.randn(3, 2, 2, dtype=torch.float64,
                              requires_grad=True)
        probe = torch.randn(3, 4, 4, dtype=torch.float64)

        def loss():
            with torch.no_grad():
                return float((dw_cross_correlate(fm, kernels).values
                              * probe).sum())

        (dw_cross_correlate(fm, kernels).values * probe).sum().backward()
        numeric = central_difference_grads(loss, [kernels.data])[0]
        worst = max(
            _relative_error(a, b)
            for a, b in zip(kernels.grad.reshape(-1).tolist(),
                            numeric.reshape(-1).tolist())
        )
        assert worst <= 1e-4


class TestHighlightModule:
    def test_factors_stage_tags(self):
        torch.manual_seed(8)
        mod = HighlightModule(embed_dim=6, feature_channels=4,
                              hidden1=5, hidden2=5)
        emb = _embedding(np.random.default_rng(0).normal(size=6))
        coarse, fine = mod.factors(emb)
        assert coarse.stage == COARSE and fine.stage == FINE
        assert coarse.values.shape == (4,) and fine.values.shape == (4,)

    def test_embedding_wiring_requires_matching_width(self):
        with pytest.raises(ShapeError):
            HighlightModule(embed_dim=6, feature_channels=4,
                            fine_input="embedding")

    def test_unknown_fine_input_rejected(self):
        with pytest.raises(UsageError):
            HighlightModule(embed_dim=4, feature_channels=4,
                            fine_input="nonsense")

    def test_apply_highlight_one_map_per_class(self):
        torch.manual_seed(9)
        mod = HighlightModule(embed_dim=6, feature_channels=4,
                              hidden1=5, hidden2=5)
        fm = make_feature_map(np.random.default_rng(1).normal(size=(4, 3, 3)))
        rng = np.random.default_rng(2)
        embs = [_embedding(rng.normal(size=6), class_id=c) for c in (2, 5)]
        out = apply_highlight(fm, embs, mod)
        assert sorted(out) == [2, 5]
        for c, mapped in out.items():
            assert mapped.values.shape == fm.values.shape
            assert not torch.allclose(mapped.values, fm.values)

    def test_apply_highlight_is_serial_product_of_factors(self):
        torch.manual_seed(10)
        mod = HighlightModule(embed_dim=6, feature_channels=4,
                              hidden1=5, hidden2=5)
        fm = make_feature_map(np.random.default_rng(3).normal(size=(4, 3, 3)))
        emb = _embedding(np.random.default_rng(4).normal(size=6), class_id=1)
        coarse, fine = mod.factors(emb)
        expected = fm.values * (coarse.values * fine.values)[:, None, None]
        got = apply_highlight(fm, [emb], mod)[1].values
        assert torch.allclose(got, expected, atol=1e-6)

    def test_duplicate_classes_rejected(self):
        torch.manual_seed(11)
        mod = HighlightModule(embed_dim=6, feature_channels=4,
                              hidden1=5, hidden2=5)
        fm = make_feature_map(np.zeros((4, 3, 3)))
        embs = [_embedding(np.ones(6), class_id=1),
                _embedding(np.zeros(6), class_id=1)]
        with pytest.raises(UsageError):
            apply_highlight(fm, embs, mod)
