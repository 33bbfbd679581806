import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from advmix import autodiff as ad
from advmix import generators as G
from advmix.autodiff import Tensor
from advmix.generators import FactorLatent, PerpRegion, project_perp, project_simplex
from advmix.models import Classifier

from conftest import fd_grad, max_rel_err


def test_procedural_red_and_black(proc_dec):
    g = proc_dec.glyphs[3].reshape(32, 32)
    img = G.decode(proc_dec, FactorLatent([3], [1.0, 0.0, 0.0]))
    assert np.array_equal(img[:, :, 0], g)
    assert not img[:, :, 1:].any()
    assert not G.decode(proc_dec, FactorLatent([3], [0, 0, 0])).any()


def test_procedural_formula_exact(proc_dec):
    c = np.array([0.2, 0.7, 0.1])
    img = G.decode(proc_dec, FactorLatent([5], c))
    g = proc_dec.glyphs[5].reshape(32, 32)
    assert np.array_equal(img, np.clip(g[:, :, None] * c[None, None, :], 0, 1))


def test_decode_dimension_mismatch(proc_dec):
    with pytest.raises(ValueError):
        G.decode(proc_dec, FactorLatent([1], [0.5, 0.5]))
    with pytest.raises(ValueError):
        G.decode(proc_dec, FactorLatent([10 ** 6], [0.5, 0.5, 0.5]))


def test_mix_identity_and_color_transfer(proc_dec):
    a = FactorLatent([2], [0.3, 0.6, 0.9])
    b = FactorLatent([7], [0.9, 0.1, 0.4])
    assert np.array_equal(G.mix(proc_dec, a, a), G.decode(proc_dec, a))
    mixed = G.mix(proc_dec, a, b)
    assert np.array_equal(mixed, G.decode(proc_dec, FactorLatent([2], b.z_perp)))
    for c0 in ([0, 0, 0], [1, 1, 1], [0.5, 0.2, 0.1]):
        assert np.array_equal(G.mix(proc_dec, FactorLatent([2], c0), b), mixed)


def test_toy_mix_changes_only_x1():
    dec = G.ToyDecoder()
    n = 10_000
    rng = np.random.default_rng(0)
    x0 = dec.decode_batch(np.full((n, 1), 20.0), np.zeros((n, 1)), rng).data
    x1 = dec.decode_batch(np.full((n, 1), 20.0), np.full((n, 1), 10.0), rng).data
    se1 = math.sqrt(3.0 / n)
    se2 = 1.0 / math.sqrt(n)
    assert abs(x0[:, 0].mean()) < 3 * se1 and abs(x1[:, 0].mean() - 10.0) < 3 * se1
    assert abs(x0[:, 1].mean() - x1[:, 1].mean()) < 3 * math.sqrt(2) * se2
    assert abs(x0[:, 0].std() - math.sqrt(3)) < 0.05 and abs(x1[:, 1].std() - 1.0) < 0.05


def test_toy_requires_rng():
    with pytest.raises(ValueError):
        G.ToyDecoder().decode_batch([[0.0]], [[0.0]])


def test_procedural_sampler_frequencies(proc_dec):
    dec = proc_dec.with_sampler(np.eye(3))
    draws = dec.sample_perp(np.random.default_rng(1), 10_000)
    freq = np.bincount(draws.argmax(axis=1), minlength=3) / 10_000
    assert np.all(np.abs(freq - 1 / 3) < 0.02)
    red = proc_dec.with_sampler(np.eye(3), [0.999, 0.0005, 0.0005]).sample_perp(np.random.default_rng(2), 100_000)
    assert abs((red.argmax(axis=1) == 0).mean() - 0.999) < 0.002
    cube = proc_dec.sample_perp(np.random.default_rng(3), 1000)
    assert cube.min() >= 0 and cube.max() <= 1


def _tiny_learned(colors, rng):
    d_par, hidden = 4, 8
    return G.LearnedDecoder(rng.normal(size=(d_par, hidden)), np.zeros(hidden),
                            rng.normal(size=(hidden, G.N_PIXELS)) * 0.1, np.zeros(G.N_PIXELS),
                            rng.normal(size=(5, d_par)), np.asarray(colors, dtype=float), 0.1, 0.2)


def test_learned_sampler_jitter_and_bias():
    rng = np.random.default_rng(0)
    colors = np.array([[1.0, 0, 0]] * 999 + [[0, 1.0, 0]])
    dec = _tiny_learned(colors, rng)
    draws = dec.sample_perp(np.random.default_rng(5), 100_000)
    base = np.eye(3)[draws.argmax(axis=1)]
    dist = np.abs(draws - base).max(axis=1)
    assert np.mean(dist <= 5 * 0.02) >= 0.9999
    assert dist.max() <= 5 * 0.02 + 1e-15  # hull expanded by 5 jitter stds
    assert abs((draws.argmax(axis=1) == 0).mean() - 0.999) < 0.002


def test_learned_output_range_and_save_load(tmp_path):
    rng = np.random.default_rng(1)
    dec = _tiny_learned(np.eye(3), rng)
    x = dec.decode_batch(dec.embeddings[:3], np.array([[2.0, -1.0, 0.5]] * 3)).data
    assert x.min() >= 0 and x.max() <= 1
    p = tmp_path / "d.advmixd"
    dec.save(p)
    back = G.LearnedDecoder.load(p)
    for a, b in zip(dec.params() + [dec.embeddings, dec.color_table], back.params() + [back.embeddings,
                                                                                        back.color_table]):
        assert np.array_equal(a, b)
    assert (back.recon_rmse, back.recon_tol, back.jitter_std) == (0.1, 0.2, dec.jitter_std)
    raw = p.read_bytes()
    assert raw[:8] == b"ADVMIXD1"
    p.write_bytes(raw[:-9])
    with pytest.raises(ValueError):
        G.LearnedDecoder.load(p)
    p.write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(ValueError, match="magic"):
        G.LearnedDecoder.load(p)


def test_learned_decoder_fits_held_out_factor_pairs(gray_small):
    """Decoder trained on red/green examples reproduces unseen (glyph, color) pairings."""
    from advmix import data as D

    rng = np.random.default_rng(0)
    colored = D.colorize(gray_small.take(np.arange(120)), D.ColorSpec("rgb_restricted"), rng)
    dec = G.train_learned_decoder(colored.glyph_index, colored.flat(), colored.colors, rng, epochs=25)
    # same glyphs, swapped colors: the recorded tolerance must cover them
    uniq, inverse = np.unique(colored.glyph_index, return_inverse=True)
    new_colors = np.roll(colored.colors, 1, axis=1)
    target = colored.decoder.decode_batch(colored.z_par, new_colors).data
    x_hat = dec.decode_batch(dec.embeddings[inverse], new_colors).data
    per_image = np.sqrt(((x_hat - target) ** 2).mean(axis=1))
    assert np.quantile(per_image, 0.95) <= dec.recon_tol
    assert dec.recon_rmse < 0.2


def test_typical_shell():
    assert G.typical_shell_check(np.full(512, 1.0), 1e-9)
    z = np.zeros(512)
    z[0] = 25.0
    upper = math.sqrt(512) + 0.5 * 512 ** 0.25
    assert G.typical_shell_check(z, 0.5) == (25.0 <= upper)
    assert G.typical_shell_check(z, 0.5)
    assert not G.typical_shell_check([2.0], 0.5)
    z[0] = upper + 1e-6
    assert not G.typical_shell_check(z, 0.5)


def test_project_perp_examples():
    r = PerpRegion(np.array([0.5]), 0.03)
    assert project_perp(np.array([0.55]), r)[0] == pytest.approx(0.53, abs=1e-15)
    assert project_perp(np.array([0.51]), r)[0] == 0.51
    with pytest.raises(ValueError):
        PerpRegion(np.array([0.5]), 0.0)
    with pytest.raises(ValueError):
        PerpRegion(np.array([0.5, 0.5, 0.0]), 0.5, simplex=True)


vec3 = arrays(np.float64, 3, elements=st.floats(-2, 3, allow_nan=False))


@settings(max_examples=300, deadline=None)
@given(vec3, arrays(np.float64, 3, elements=st.floats(0, 1)), st.floats(1e-4, 1.5))
def test_project_perp_idempotent_and_bounded(z, center, eps):
    r = PerpRegion(center, eps, np.zeros(3), np.ones(3))
    p = project_perp(z, r)
    assert np.array_equal(project_perp(p, r), p)
    assert np.abs(p - center).max() <= eps + 1e-12
    assert p.min() >= 0 and p.max() <= 1


@settings(max_examples=200, deadline=None)
@given(vec3)
def test_project_simplex_properties(v):
    p = project_simplex(v)
    assert p.min() >= 0 and abs(p.sum() - 1) < 1e-12
    assert np.allclose(project_simplex(p), p, atol=1e-15)
    # optimality: no simplex vertex is closer than the projection
    for e in np.eye(3):
        assert np.sum((v - p) ** 2) <= np.sum((v - e) ** 2) + 1e-12


def test_decode_classifier_gradient_wrt_color(proc_dec):
    rng = np.random.default_rng(2)
    f = Classifier("mlp2", 3072, 10, rng)
    z_par = np.array([[4.0], [9.0]])
    color = rng.uniform(0.1, 0.9, size=(2, 3))

    def loss(c):
        return ad.cross_entropy(f.forward(proc_dec.decode_batch(z_par, c)), [1, 2])

    t = Tensor(color, requires_grad=True)
    ad.backward(loss(t))
    num = fd_grad(lambda v: loss(Tensor(v)).item(), color)
    assert max_rel_err(t.grad, num) <= 1e-4
