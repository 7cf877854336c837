"""Normalization schemes against direct-formula oracles, plus the geometric
properties that set the per-token and whole-extent variants apart."""

import numpy as np
import pytest

from irnorm.norms import LAYERSCALE_INIT, NORM_KINDS, NormSpec, block_combine, normalize
from irnorm.tensor import Precision, Tensor, finite_difference_grad, matmul, mul, sum_axes

EPS = 1e-6


def ln_oracle(x: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Per-token layer norm, direct formula (gamma=1, beta=0)."""
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def lnstar_oracle(x: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Whole-extent layer norm: one mu/sigma^2 over all tokens and channels."""
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    return (x - mu) / np.sqrt(var + eps)


def rms_oracle(x: np.ndarray, eps: float = EPS) -> np.ndarray:
    ms = (x ** 2).mean(axis=-1, keepdims=True)
    return x / np.sqrt(ms + eps)


class TestLN:
    def test_matches_direct_formula(self):
        rng = np.random.default_rng(42)
        x = rng.standard_normal((12, 6)) * 2.0 + 0.5
        spec = NormSpec("LN", 6)
        out = normalize(spec, Tensor(x))
        np.testing.assert_allclose(out.y.data, ln_oracle(x), rtol=0, atol=1e-13)

    def test_per_token_stats_shape(self):
        spec = NormSpec("LN", 5)
        out = normalize(spec, Tensor(np.random.default_rng(0).standard_normal((2, 7, 5))))
        assert out.mu.shape == (2, 7, 1)
        assert out.sigma2.shape == (2, 7, 1)

    def test_tokens_normalized_to_unit_stats(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((9, 16)) * 7.0 - 3.0
        out = normalize(NormSpec("LN", 16), Tensor(x))
        np.testing.assert_allclose(out.y.data.mean(axis=-1), np.zeros(9), atol=1e-12)
        np.testing.assert_allclose(out.y.data.var(axis=-1), np.ones(9), atol=1e-4)

    def test_affine_applies_gamma_beta(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((4, 3))
        spec = NormSpec("LN", 3)
        spec.gamma.data[:] = [2.0, 0.5, -1.0]
        spec.beta.data[:] = [0.1, 0.0, 3.0]
        out = normalize(spec, Tensor(x))
        want = ln_oracle(x) * np.array([2.0, 0.5, -1.0]) + np.array([0.1, 0.0, 3.0])
        np.testing.assert_allclose(out.y.data, want, atol=1e-13)

    def test_not_a_homothety_on_generic_input(self):
        """Pairwise token differences are NOT rescaled by a single factor."""
        rng = np.random.default_rng(7)
        x = rng.standard_normal((6, 8))
        y = normalize(NormSpec("LN", 8), Tensor(x)).y.data
        dx01 = x[0] - x[1]
        dy01 = y[0] - y[1]
        dx23 = x[2] - x[3]
        dy23 = y[2] - y[3]
        a01 = (dy01 @ dx01) / (dx01 @ dx01)
        a23 = (dy23 @ dx23) / (dx23 @ dx23)
        assert abs(a01 - a23) > 1e-3
        # and the best single-scale fit leaves a visible residual
        resid = np.linalg.norm(dy01 - a01 * dx01) / np.linalg.norm(dx01)
        assert resid > 1e-3 or abs(a01 - a23) > 1e-3


class TestLNStar:
    def test_matches_direct_formula(self):
        rng = np.random.default_rng(42)
        x = rng.standard_normal((8, 4)) * 3.0 + 1.0
        out = normalize(NormSpec("LNStar", 4), Tensor(x))
        np.testing.assert_allclose(out.y.data, lnstar_oracle(x), rtol=0, atol=1e-13)

    def test_reconstruction_from_two_pass_stats(self):
        """y * sigma_hat + mu_hat rebuilds x, with oracle statistics."""
        rng = np.random.default_rng(42)
        x = rng.standard_normal((8, 4)) * 5.0 - 2.0
        out = normalize(NormSpec("LNStar", 4), Tensor(x))
        mu_hat = x.mean()
        sigma_hat = np.sqrt(((x - mu_hat) ** 2).mean() + EPS)
        np.testing.assert_allclose(out.y.data * sigma_hat + mu_hat, x, rtol=0, atol=1e-12)

    def test_single_stat_per_image(self):
        rng = np.random.default_rng(1)
        out = normalize(NormSpec("LNStar", 4), Tensor(rng.standard_normal((3, 10, 4))))
        assert out.mu.shape == (3, 1, 1)
        assert out.sigma2.shape == (3, 1, 1)

    def test_pre_affine_scales_all_differences_equally(self):
        """The homothety property: every token difference shrinks by 1/rescale."""
        rng = np.random.default_rng(11)
        x = rng.standard_normal((10, 6)) * 4.0
        out = normalize(NormSpec("LNStar", 6), Tensor(x))
        a = 1.0 / float(out.rescale.data.reshape(()))
        y = out.y.data
        for i in range(10):
            for j in range(i + 1, 10):
                np.testing.assert_allclose(
                    y[i] - y[j], a * (x[i] - x[j]), rtol=0, atol=1e-12
                )

    def test_batch_entries_normalized_independently(self):
        rng = np.random.default_rng(13)
        x = rng.standard_normal((2, 6, 4))
        x[1] *= 40.0
        batched = normalize(NormSpec("LNStar", 4), Tensor(x)).y.data
        single0 = normalize(NormSpec("LNStar", 4), Tensor(x[0])).y.data
        single1 = normalize(NormSpec("LNStar", 4), Tensor(x[1])).y.data
        np.testing.assert_allclose(batched[0], single0, atol=1e-13)
        np.testing.assert_allclose(batched[1], single1, atol=1e-13)


class TestRMSNorm:
    def test_matches_direct_formula(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((7, 5)) * 2.0
        out = normalize(NormSpec("RMSNorm", 5), Tensor(x))
        np.testing.assert_allclose(out.y.data, rms_oracle(x), atol=1e-13)

    def test_gamma_only_no_beta(self):
        spec = NormSpec("RMSNorm", 5)
        assert spec.beta is None
        assert set(spec.params()) == {"gamma"}

    def test_no_centering(self):
        x = np.full((3, 4), 2.0)
        out = normalize(NormSpec("RMSNorm", 4), Tensor(x))
        assert out.mu is None
        assert np.all(out.y.data > 0.99)  # sign preserved, mean not removed


class TestInstanceNorm:
    def test_matches_direct_formula(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 9, 5)) * 3.0
        out = normalize(NormSpec("InstanceNorm", 5), Tensor(x))
        mu = x.mean(axis=1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
        np.testing.assert_allclose(out.y.data, (x - mu) / np.sqrt(var + EPS), atol=1e-13)
        assert out.mu.shape == (2, 1, 5)


class TestBatchNorm:
    def test_train_uses_batch_stats(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((3, 6, 4)) + 5.0
        out = normalize(NormSpec("BatchNorm", 4), Tensor(x), mode="train")
        mu = x.mean(axis=(0, 1))
        var = ((x - mu) ** 2).mean(axis=(0, 1))
        np.testing.assert_allclose(out.y.data, (x - mu) / np.sqrt(var + EPS), atol=1e-12)

    def test_first_batch_initializes_running_stats(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 8, 3)) * 2.0 + 1.0
        spec = NormSpec("BatchNorm", 3)
        normalize(spec, Tensor(x), mode="train")
        np.testing.assert_allclose(spec.running_mean, x.mean(axis=(0, 1)), atol=1e-13)
        np.testing.assert_allclose(spec.running_var, x.var(axis=(0, 1)), atol=1e-13)

    def test_momentum_update_rule(self):
        rng = np.random.default_rng(6)
        a = rng.standard_normal((2, 8, 3))
        b = rng.standard_normal((2, 8, 3)) + 4.0
        spec = NormSpec("BatchNorm", 3, momentum=0.1)
        normalize(spec, Tensor(a), mode="train")
        normalize(spec, Tensor(b), mode="train")
        want_mean = 0.9 * a.mean(axis=(0, 1)) + 0.1 * b.mean(axis=(0, 1))
        want_var = 0.9 * a.var(axis=(0, 1)) + 0.1 * b.var(axis=(0, 1))
        np.testing.assert_allclose(spec.running_mean, want_mean, atol=1e-13)
        np.testing.assert_allclose(spec.running_var, want_var, atol=1e-13)

    def test_eval_before_train_raises(self):
        with pytest.raises(ValueError, match="running stats"):
            normalize(NormSpec("BatchNorm", 3), Tensor(np.ones((2, 4, 3))), mode="eval")

    def test_train_and_eval_outputs_diverge(self):
        rng = np.random.default_rng(7)
        spec = NormSpec("BatchNorm", 3)
        normalize(spec, Tensor(rng.standard_normal((2, 8, 3))), mode="train")
        fresh = rng.standard_normal((2, 8, 3)) + 2.0
        train_out = normalize(spec, Tensor(fresh), mode="train").y.data
        eval_out = normalize(spec, Tensor(fresh), mode="eval").y.data
        assert np.max(np.abs(train_out - eval_out)) > 1e-3


class TestBlockCombine:
    def _linear(self, rng, c):
        w = Tensor(rng.standard_normal((c, c)) * 0.3)
        return lambda t: matmul(t, w), w

    def test_iln_formula(self):
        """x + sqrt(sigma^2+eps) * f(LNStar(x)), composed manually."""
        rng = np.random.default_rng(42)
        x = rng.standard_normal((6, 4)) * 3.0
        spec = NormSpec("iLN", 4)
        f, w = self._linear(rng, 4)
        got = block_combine(spec, Tensor(x), f).data
        mu = x.mean()
        sigma2 = ((x - mu) ** 2).mean()
        rescale = np.sqrt(sigma2 + EPS)
        want = x + rescale * (((x - mu) / rescale) @ w.data)
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)

    def test_iln_zero_branch_is_identity_bitwise(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((5, 4))
        out = block_combine(NormSpec("iLN", 4), Tensor(x), lambda t: mul(t, 0.0))
        assert out.data.tobytes() == x.tobytes()

    def test_rezero_init_is_identity_bitwise(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((5, 4))
        f, _ = self._linear(rng, 4)
        out = block_combine(NormSpec("ReZero", 4), Tensor(x), f)
        assert out.data.tobytes() == x.tobytes()

    def test_layerscale_init_formula(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((5, 4))
        f, w = self._linear(rng, 4)
        got = block_combine(NormSpec("LayerScale", 4), Tensor(x), f).data
        want = x + LAYERSCALE_INIT * (ln_oracle(x) @ w.data)
        np.testing.assert_allclose(got, want, atol=1e-13)

    def test_nonenorm_plain_residual(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((5, 4))
        f, w = self._linear(rng, 4)
        np.testing.assert_allclose(
            block_combine(NormSpec("NoneNorm", 4), Tensor(x), f).data,
            x + x @ w.data,
            atol=1e-13,
        )

    def test_ln_pre_norm_residual(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((5, 4))
        f, w = self._linear(rng, 4)
        np.testing.assert_allclose(
            block_combine(NormSpec("LN", 4), Tensor(x), f).data,
            x + ln_oracle(x) @ w.data,
            atol=1e-13,
        )


class TestGradients:
    """Reverse-mode gradients through every scheme vs finite differences,
    statistics included."""

    @pytest.mark.parametrize("kind", NORM_KINDS)
    def test_block_combine_grad_wrt_input(self, kind):
        rng = np.random.default_rng(17)
        c = 4
        x = rng.standard_normal((6, c)) * 2.0
        w = rng.standard_normal((c, c)) * 0.5
        probe = rng.standard_normal((6, c))

        def fresh_spec():
            spec = NormSpec(kind, c)
            if kind == "ReZero":
                spec.rezero_scalar.data[...] = 0.7  # generic point, not the zero init
            if kind == "LayerScale":
                spec.layerscale_diag.data[:] = rng.standard_normal(c) * 0.3
            return spec

        spec = fresh_spec()

        def loss_of(t):
            out = block_combine(spec, t, lambda u: matmul(u, Tensor(w)))
            return sum_axes(mul(out, Tensor(probe)))

        leaf = Tensor(x, requires_grad=True)
        loss_of(leaf).backward()
        want = finite_difference_grad(lambda t: loss_of(t).item(), Tensor(x), h=1e-6)
        scale = max(np.max(np.abs(want)), 1e-10)
        assert np.max(np.abs(leaf.grad - want)) / scale < 1e-5

    @pytest.mark.parametrize("kind", [k for k in NORM_KINDS if k != "NoneNorm"])
    def test_param_grads_populated(self, kind):
        rng = np.random.default_rng(18)
        c = 4
        spec = NormSpec(kind, c)
        if kind == "ReZero":
            spec.rezero_scalar.data[...] = 0.5
        x = Tensor(rng.standard_normal((6, c)))
        w = Tensor(rng.standard_normal((c, c)))
        out = block_combine(spec, x, lambda u: matmul(u, w))
        sum_axes(mul(out, out)).backward()
        for name, leaf in spec.params().items():
            assert leaf.grad is not None, f"{kind}.{name} got no gradient"
            assert np.any(leaf.grad != 0.0), f"{kind}.{name} gradient identically zero"


class TestValidation:
    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown norm kind"):
            NormSpec("GroupNorm", 4)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channels"):
            normalize(NormSpec("LN", 4), Tensor(np.ones((3, 5))))

    def test_bad_rank(self):
        with pytest.raises(ValueError, match="rank"):
            normalize(NormSpec("LN", 4), Tensor(np.ones(4)))

    def test_bad_mode(self):
        with pytest.raises(ValueError, match="mode"):
            normalize(NormSpec("LN", 4), Tensor(np.ones((2, 4))), mode="test")
