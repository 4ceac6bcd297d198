import math

import numpy as np
import pytest

from fbpnet.degrade import (
    TRANSMISSION_FLOOR,
    NoiseParams,
    degrade,
    interpolate_angles,
    subsample_angles,
    transmission,
)
from fbpnet.geometry import Sinogram, make_geometry, radon_forward
from fbpnet.phantoms import shepp_logan


@pytest.fixture(scope="module")
def clean():
    geom = make_geometry(32, 30)
    return radon_forward(shepp_logan(32), geom)


class TestNoiseParams:
    def test_validation(self):
        with pytest.raises(ValueError):
            NoiseParams(b=0)
        with pytest.raises(ValueError):
            NoiseParams(var=-1e-3)

    def test_streams_are_independent(self):
        p = NoiseParams(seed=3)
        a = p.rng(0, 1).normal(size=5)
        b = p.rng(0, 2).normal(size=5)
        assert not np.array_equal(a, b)
        assert np.array_equal(a, p.rng(0, 1).normal(size=5))


class TestDegrade:
    def test_noiseless_limit_is_identity(self, clean):
        x = degrade(clean, NoiseParams(b=1e7, var=0.0), poisson="mean")
        assert isinstance(x, Sinogram)
        assert np.max(np.abs(x.data - clean.data)) <= 1e-9 * clean.data.max()

    def test_output_range(self, clean):
        x = degrade(clean, NoiseParams(b=1e3, var=0.01, seed=1))
        ceiling = -clean.data.max() * math.log(TRANSMISSION_FLOOR)
        assert np.all(x.data >= 0) and np.all(x.data <= ceiling)

    def test_same_seed_same_output(self, clean):
        p = NoiseParams(seed=42)
        a = degrade(clean, p).data
        b = degrade(clean, p).data
        assert np.array_equal(a, b)
        assert not np.array_equal(a, degrade(clean, NoiseParams(seed=43)).data)

    def test_array_in_array_out(self, clean):
        x = degrade(clean.data, NoiseParams(seed=1))
        assert isinstance(x, np.ndarray) and x.shape == clean.shape

    def test_more_photons_less_error(self, clean):
        errs = []
        for b in (1e3, 1e5, 1e7):
            x = degrade(clean, NoiseParams(b=b, var=0.0, seed=5))
            errs.append(np.linalg.norm(x.data - clean.data))
        assert errs[0] > errs[1] > errs[2]

    def test_rejects_bad_inputs(self):
        p = NoiseParams()
        with pytest.raises(ValueError):
            degrade(np.zeros((4, 4)), p)
        with pytest.raises(ValueError):
            degrade(-np.ones((4, 4)), p)
        with pytest.raises(ValueError):
            degrade(np.ones((4, 4)), p, poisson="exact")

    def test_transmission_variance(self):
        rng = np.random.default_rng(7)
        y = rng.uniform(0.0, 10.0, size=32)
        y[0] = 10.0
        p = NoiseParams(b=1e4, var=0.002, seed=11)
        draws = transmission(np.broadcast_to(y, (10_000, 32)).copy(), p)
        expected = np.exp(-y / 10.0) / p.b + p.var
        assert np.all(np.abs(draws.var(axis=0) / expected - 1.0) <= 0.05)


class TestAngles:
    def test_subsample_keeps_even_columns(self, clean):
        sub = subsample_angles(clean, 2)
        assert np.array_equal(sub.data, clean.data[:, ::2])
        assert sub.geometry.angles == clean.geometry.angles[::2]

    def test_subsample_rejects_bad_stride(self, clean):
        with pytest.raises(ValueError):
            subsample_angles(clean, 7)

    def test_interpolation_reproduces_nodes(self, clean):
        sub = subsample_angles(clean, 2)
        full = interpolate_angles(sub, 30)
        assert np.array_equal(full.data[:, ::2], sub.data)
        assert full.geometry.angles == pytest.approx(clean.geometry.angles, abs=1e-15)

    def test_interpolation_midpoints(self, clean):
        sub = subsample_angles(clean, 2)
        full = interpolate_angles(sub, 30).data
        for j in range(1, 29, 2):
            assert np.allclose(full[:, j], 0.5 * (sub.data[:, j // 2] + sub.data[:, j // 2 + 1]),
                               rtol=0, atol=1e-12 * sub.data.max())
        assert np.allclose(full[:, 29], 0.5 * (sub.data[:, 14] + sub.data[::-1, 0]), rtol=0,
                           atol=1e-12 * sub.data.max())

    def test_linear_data_is_a_fixed_point(self):
        # p(s, theta) = a(s) + b(s) * theta stays pi-periodic when b is odd in s
        # and a(s) - a(-s) = -pi*b(s); angles here are in degrees / (pi/180)
        m, n = 16, 180
        s = np.arange(m) - (m - 1) / 2
        b = 0.01 * s
        a = 5.0 - 90.0 * b
        deg = np.arange(n)
        full = a[:, None] + b[:, None] * deg[None, :]
        geom = make_geometry(m, n)
        sub = subsample_angles(Sinogram(full, geom), 2)
        out = interpolate_angles(sub, n).data
        assert np.max(np.abs(out - full)) <= 1e-10

    def test_against_per_row_oracle(self, rng):
        m, n = 8, 12
        data = rng.uniform(size=(m, n // 3))
        sub = Sinogram(data, make_geometry(m, n // 3))
        out = interpolate_angles(sub, n).data
        src = np.arange(n // 3) * math.pi / (n // 3)
        tgt = np.arange(n) * math.pi / n
        for i in range(m):
            xp = np.append(src, math.pi)
            fp = np.append(data[i], data[m - 1 - i, 0])
            assert np.allclose(out[i], np.interp(tgt, xp, fp), rtol=0, atol=1e-12)

    def test_rejects_fewer_targets(self, clean):
        with pytest.raises(ValueError):
            interpolate_angles(clean, 10)
