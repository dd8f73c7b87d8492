import numpy as np
import pytest

from sketchstyle.guidance import GuidanceConfig, Ramp, combine, omega2_at


@pytest.fixture
def eps():
    rng = np.random.default_rng(0)
    return rng.standard_normal((3, 4, 8, 8))


def test_no_guidance(eps):
    u, c, s = eps
    assert combine(u, c, s, 0.0, 0.0).tobytes() == u.tobytes()


def test_cfg_degeneration(eps):
    u, c, s = eps
    np.testing.assert_allclose(combine(u, c, s, 1.0, 0.0), c, atol=1e-15)


def test_scalar_hand_case():
    out = combine(np.array(0.0), np.array(1.0), np.array(2.0), 15.0, 15.0)
    assert out == 45.0


def test_style_equal_uncond_is_classic_cfg(eps):
    u, c, _ = eps
    for w1 in (1.0, 7.5, 15.0):
        assert combine(u, c, u, w1, 15.0).tobytes() == (u + w1 * (c - u)).tobytes()


def test_affine_in_each_argument(eps):
    u, c, s = eps
    d = np.random.default_rng(1).standard_normal(u.shape)
    base = combine(u, c, s, 3.0, 2.0)
    np.testing.assert_allclose(combine(u, c + d, s, 3.0, 2.0) - base, 3.0 * d, atol=1e-12)
    np.testing.assert_allclose(combine(u, c, s + d, 3.0, 2.0) - base, 2.0 * d, atol=1e-12)
    np.testing.assert_allclose(combine(u + d, c, s, 3.0, 2.0) - base, (1 - 3.0 - 2.0) * d, atol=1e-12)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        combine(np.zeros(3), np.zeros(3), np.zeros(4), 1.0, 1.0)


class TestRamp:
    def test_endpoints(self):
        cfg = GuidanceConfig(omega2_max=15.0)
        assert omega2_at(cfg, 0, 100) == 5.0
        assert omega2_at(cfg, 99, 100) == 15.0

    def test_odd_grid_midpoint(self):
        assert omega2_at(GuidanceConfig(omega2_max=15.0), 50, 101) == pytest.approx(10.0, abs=1e-12)

    def test_constant(self):
        cfg = GuidanceConfig(omega2_max=15.0, ramp="constant")
        assert {omega2_at(cfg, i, 10) for i in range(10)} == {15.0}

    def test_single_step(self):
        assert omega2_at(GuidanceConfig(omega2_max=25.0), 0, 1) == 25.0

    def test_monotone_and_bounded(self):
        cfg = GuidanceConfig(omega2_max=25.0)
        vals = [omega2_at(cfg, i, 37) for i in range(37)]
        assert all(a <= b for a, b in zip(vals, vals[1:]))
        assert min(vals) >= 25.0 / 3 and max(vals) <= 25.0

    @pytest.mark.parametrize("i", [-1, 10])
    def test_out_of_range(self, i):
        with pytest.raises(ValueError):
            omega2_at(GuidanceConfig(), i, 10)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            GuidanceConfig(omega1=-1.0)
        with pytest.raises(ValueError):
            GuidanceConfig(omega2_max=float("inf"))
        assert GuidanceConfig(ramp="constant").ramp is Ramp.CONSTANT
