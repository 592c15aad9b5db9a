import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _util import add_noise
from rsym.analysis import LossCurve, equivalence_check, interpolate, interpolate_losses, loss_barrier, param_distance
from rsym.errors import ConfigError, FormatError, InputError
from rsym.matching import match_model
from rsym.model import flatten, from_tensors, gen_synthetic, loss, named_tensors, random_model
from rsym.symmetry import apply_model_symmetry, random_symmetry


class TestDistance:
    def test_self(self, small_cfg):
        m = random_model(small_cfg, 0)
        assert param_distance(m, m) == 0.0

    def test_single_shift(self, small_cfg):
        m = random_model(small_cfg, 0)
        tensors = dict(named_tensors(m))
        tensors["layer.1.ffn.wi"] = tensors["layer.1.ffn.wi"].copy()
        tensors["layer.1.ffn.wi"][2, 3] += 3.0
        assert param_distance(m, from_tensors(small_cfg, tensors)) == pytest.approx(3.0, abs=1e-14)

    def test_symmetric(self, small_cfg):
        a, b = random_model(small_cfg, 0), random_model(small_cfg, 1)
        assert param_distance(a, b) == param_distance(b, a)

    def test_config_mismatch(self, small_cfg, tiny_cfg):
        with pytest.raises(ConfigError):
            param_distance(random_model(small_cfg, 0), random_model(tiny_cfg, 0))


class TestInterpolation:
    def test_endpoints(self, small_cfg):
        a, b = random_model(small_cfg, 0), random_model(small_cfg, 1)
        assert np.array_equal(flatten(interpolate(a, b, 1.0)), flatten(a))
        assert np.array_equal(flatten(interpolate(a, b, 0.0)), flatten(b))

    def test_same_model_zero_barrier(self, small_cfg):
        a = random_model(small_cfg, 0)
        data = gen_synthetic(small_cfg, random_model(small_cfg, 2), 20, 1)
        curve = interpolate_losses(a, a, data, 9)
        assert np.all(curve.losses == curve.losses[0]) and curve.barrier == 0.0

    def test_endpoint_losses(self, small_cfg):
        a, b = random_model(small_cfg, 0), random_model(small_cfg, 1)
        data = gen_synthetic(small_cfg, a, 20, 1)
        curve = interpolate_losses(a, b, data, 5)
        assert curve.loss_a == loss(a, data) and curve.loss_b == loss(b, data)
        assert curve.alphas[0] == 0.0 and curve.alphas[-1] == 1.0

    def test_barrier_shrinks_after_match(self, small_cfg):
        a = random_model(small_cfg, 0)
        b = apply_model_symmetry(a, random_symmetry(small_cfg, 1))
        data = gen_synthetic(small_cfg, a, 40, 2)
        matched, _ = match_model(b, a)
        before = interpolate_losses(a, b, data, 11).barrier
        after = interpolate_losses(a, matched, data, 11).barrier
        assert after < before and after < 1e-9

    def test_too_few_points(self, small_cfg):
        a = random_model(small_cfg, 0)
        with pytest.raises(InputError):
            interpolate_losses(a, a, gen_synthetic(small_cfg, a, 3, 0), 2)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 10), min_size=3, max_size=20))
    def test_barrier_definition(self, losses):
        losses = np.array(losses)
        alphas = np.linspace(0, 1, len(losses))
        b = loss_barrier(alphas, losses, losses[-1], losses[0])
        line = alphas * losses[-1] + (1 - alphas) * losses[0]
        assert b >= 0.0 and b == pytest.approx(max(0.0, float(np.max(losses - line))), abs=1e-12)


class TestLossCurveCsv:
    def test_roundtrip(self, small_cfg):
        a, b = random_model(small_cfg, 0), random_model(small_cfg, 1)
        curve = interpolate_losses(a, b, gen_synthetic(small_cfg, a, 10, 1), 7)
        back = LossCurve.from_csv(curve.to_csv())
        assert np.max(np.abs(back.losses - curve.losses)) <= 1e-15
        assert np.array_equal(back.alphas, curve.alphas) and back.barrier == curve.barrier

    @pytest.mark.parametrize("text", ["", "a,b\n0,1\n", "alpha,loss\n0,x\n1,2\n# barrier=0\n", "alpha,loss\n0,1\n1,1\n"])
    def test_malformed(self, text):
        with pytest.raises(FormatError):
            LossCurve.from_csv(text)


class TestEquivalence:
    def test_same(self, small_cfg):
        m = random_model(small_cfg, 0)
        assert equivalence_check(m, m).max_abs_logit_diff == 0.0

    def test_symmetry(self, small_cfg):
        m = random_model(small_cfg, 0)
        rep = equivalence_check(m, apply_model_symmetry(m, random_symmetry(small_cfg, 4)), n_inputs=100)
        assert rep.max_abs_logit_diff < 1e-9 and rep.n_inputs == 100

    def test_noise_detected(self, small_cfg):
        m = random_model(small_cfg, 0)
        assert equivalence_check(m, add_noise(m, 0.1, 1)).max_abs_logit_diff > 1e-3

    def test_bad_count(self, small_cfg):
        m = random_model(small_cfg, 0)
        with pytest.raises(InputError):
            equivalence_check(m, m, n_inputs=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 2**31), st.integers(0, 2**31))
def test_distance_metric_axioms(s1, s2, s3):
    from rsym.model import TransformerConfig

    cfg = TransformerConfig(1, 2, 4, 2, 5, 6, 2, 3)
    a, b, c = (random_model(cfg, s) for s in (s1, s2, s3))
    ab, bc, ac = param_distance(a, b), param_distance(b, c), param_distance(a, c)
    assert ab >= 0 and ab == param_distance(b, a)
    assert ac <= ab + bc + 1e-9
    assert (ab == 0.0) == (flatten(a).tobytes() == flatten(b).tobytes())
