import numpy as np
import pytest

from dense_rdn.diffcore import Tensor, directional_check, ops, packed
from dense_rdn.genmodels import Encoder, Generator, bit_accuracy, encode_z, generate_x0, sample_z
from dense_rdn.reactor import gaussian_blur


def test_sample_z():
    assert sample_z(np.random.default_rng(0), 0).shape == (0,)
    a = sample_z(np.random.default_rng(1), 16)
    np.testing.assert_array_equal(a, sample_z(np.random.default_rng(1), 16))
    assert set(np.unique(a)) <= {0.0, 1.0}
    draws = sample_z(np.random.default_rng(2), 16, batch=10_000)
    assert draws.shape == (10_000, 16)
    means = draws.mean(axis=0)
    assert np.all((means >= 0.45) & (means <= 0.55))


def test_generator_shape_and_range():
    gen = Generator(n_species=3, n_bits=4, n_blocks=6, base_width=8, min_width=4)
    params = gen.init_params(np.random.default_rng(0))
    x = generate_x0(sample_z(np.random.default_rng(1), 4, 2), params, gen)
    assert x.shape == (2, 3, 64, 64)
    assert gen.output_shape == (64, 64)
    assert x.value.min() >= 0 and x.value.max() <= 10


def test_generator_range_invariant_random_params():
    gen = Generator(n_species=2, n_bits=3, n_blocks=3, base_width=4, min_width=2)
    rng = np.random.default_rng(2)
    base = gen.init_params(rng)
    for _ in range(1000):
        params = {k: rng.normal(0, 3, v.shape) for k, v in base.items()}
        x = gen(sample_z(rng, 3, 2), params).value
        assert x.min() >= 0 and x.max() <= 10


def test_generator_deterministic():
    gen = Generator(n_species=2, n_bits=4, n_blocks=3, base_width=4)
    params = gen.init_params(np.random.default_rng(3))
    z = sample_z(np.random.default_rng(4), 4, 2)
    np.testing.assert_array_equal(gen(z, params).value, gen(z, params).value)


def test_generator_non_square_seed():
    gen = Generator(n_species=2, n_bits=4, n_blocks=2, base_width=4, seed_shape=(3, 2))
    params = gen.init_params(np.random.default_rng(5))
    assert gen(sample_z(np.random.default_rng(6), 4, 1), params).shape == (1, 2, 12, 8)


def test_generator_shape_errors():
    gen = Generator(n_species=2, n_bits=4, n_blocks=2, base_width=4)
    params = gen.init_params(np.random.default_rng(7))
    with pytest.raises(ValueError):
        gen(np.zeros(5), params)
    params["w1"] = np.zeros((3, 2, 4, 4))
    with pytest.raises(ValueError):
        gen(np.zeros(4), params)


def test_blur_preserves_totals():
    x = np.random.default_rng(8).uniform(0, 10, (2, 3, 16, 16))
    out = gaussian_blur(x, 1.0).value
    np.testing.assert_allclose(out.sum(axis=(2, 3)), x.sum(axis=(2, 3)), rtol=0, atol=1e-10 * x.sum())


def test_encoder_logits_and_chance_accuracy():
    enc = Encoder(n_species=3, n_bits=4, n_blocks=2, base_width=4, max_width=8)
    rng = np.random.default_rng(9)
    accs = []
    for _ in range(1000 // 8):
        params = enc.init_params(rng, (8, 8))
        x = rng.uniform(0, 1, (8, 3, 8, 8))
        z = sample_z(rng, 4, 8)
        logits = encode_z(x, params, enc)
        assert logits.shape == (8, 4)
        accs.append(bit_accuracy(logits, z))
    assert 0.45 < np.mean(accs) < 0.55


def test_encoder_extent_error():
    enc = Encoder(n_species=2, n_bits=4, n_blocks=3)
    with pytest.raises(ValueError):
        enc.init_params(np.random.default_rng(0), (12, 12))


def test_zero_logits_cross_entropy():
    z = sample_z(np.random.default_rng(10), 16, 2)
    bce = ops.bce_with_logits(Tensor(np.zeros((2, 16))), z).value.mean()
    assert bce == pytest.approx(np.log(2))


def group_directions(rng, arrays):
    """One random direction overall plus one confined to each array.

    Biases feeding a batch norm have an exactly zero gradient, where a
    per-coordinate relative check would only measure finite-difference noise.
    """
    sizes = np.cumsum([0] + [a.size for a in arrays])
    n = sizes[-1]
    dirs = [rng.normal(size=n)]
    for lo, hi in zip(sizes[:-1], sizes[1:]):
        v = np.zeros(n)
        v[lo:hi] = rng.normal(size=hi - lo)
        dirs.append(v)
    return dirs


def test_encoder_gradcheck():
    enc = Encoder(n_species=2, n_bits=3, n_blocks=2, base_width=2, max_width=4)
    rng = np.random.default_rng(11)
    params = enc.init_params(rng, (4, 4))
    names = sorted(params)
    x0 = rng.uniform(0, 1, (2, 2, 4, 4))
    z = sample_z(rng, 3, 2)

    def loss(x, *parts):
        return ops.bce_with_logits(enc(x, dict(zip(names, parts))), z).mean()

    arrays = [x0] + [params[k] for k in names]
    fn, point = packed(loss, arrays)
    assert directional_check(fn, point, group_directions(rng, arrays)) < 1e-4


def test_generator_gradcheck():
    gen = Generator(n_species=2, n_bits=3, n_blocks=2, base_width=4, min_width=2)
    rng = np.random.default_rng(12)
    params = gen.init_params(rng)
    names = sorted(params)
    z = sample_z(rng, 3, 2)
    w = rng.normal(size=(2, 2, 4, 4))

    def loss(*parts):
        return (gen(z, dict(zip(names, parts))) * w).sum()

    arrays = [params[k] for k in names]
    fn, point = packed(loss, arrays)
    assert directional_check(fn, point, group_directions(rng, arrays)) < 1e-4
