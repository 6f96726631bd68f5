import math

import numpy as np
import pytest

from mdnet import gan
from mdnet import layers as L
from mdnet import training as T
from mdnet.data import LabeledSet
from mdnet.errors import DataError, ParameterError, SpecError
from mdnet.tensor import make_rng

DISC_1D = L.NetworkSpec((1,), [L.dense(16), L.activation("relu"), L.dense(16), L.activation("relu")], 1)


def toy_cfg(**kw):
    base = dict(noise_dim=4, gen_hidden=16, gen_output_activation="linear", batch_size=32, seed=0)
    base.update(kw)
    return gan.GanConfig(**base)


def fresh(dspec, cfg, seed=0):
    rng = make_rng(seed)
    gspec = gan.make_generator(dspec, cfg)
    return gspec, L.init_network(dspec, rng, np.float64), L.init_network(gspec, rng, np.float64), rng


def test_generator_matches_discriminator_input():
    dspec = L.NetworkSpec((32, 1), [L.conv1d(4, 3), L.global_avg_pool()], 1)
    gspec = gan.make_generator(dspec, gan.GanConfig())
    assert gspec.shapes[-1] == (32,)
    assert gspec.input_shape == (64,)
    assert gspec.stack()[0].units == 256


def test_generator_shape_mismatch_is_a_spec_error():
    cfg = toy_cfg()
    bad = gan.make_generator(L.NetworkSpec((3,), [L.dense(2)], 1), cfg)
    _, ds, _, rng = fresh(DISC_1D, cfg)
    with pytest.raises(SpecError):
        gan.adversarial_phase(DISC_1D, ds, bad, L.init_network(bad, rng), np.ones((4, 1)), cfg, rng)


def test_initial_discriminator_loss_near_ln2():
    cfg = toy_cfg(adversarial_epochs=1, learning_rate=1e-6)
    gspec, ds, gs, rng = fresh(DISC_1D, cfg)
    for k in ds:
        if k.endswith(".W"):
            ds[k] = ds[k] * 0.01  # small random logits
    _, _, h = gan.adversarial_phase(DISC_1D, ds, gspec, gs, np.full((64, 1), 0.5), cfg, rng)
    assert h.disc_loss[0] == pytest.approx(2 * math.log(2), abs=0.01)


def test_zero_adversarial_epochs_leaves_states_unchanged():
    cfg = toy_cfg(adversarial_epochs=0)
    gspec, ds, gs, rng = fresh(DISC_1D, cfg)
    d0, g0 = L.copy_state(ds), L.copy_state(gs)
    gan.adversarial_phase(DISC_1D, ds, gspec, gs, np.ones((4, 1)), cfg, rng)
    assert all(np.array_equal(ds[k], d0[k]) for k in ds)
    assert all(np.array_equal(gs[k], g0[k]) for k in gs)


def test_empty_minority_set():
    cfg = toy_cfg()
    gspec, ds, gs, rng = fresh(DISC_1D, cfg)
    with pytest.raises(DataError):
        gan.adversarial_phase(DISC_1D, ds, gspec, gs, np.zeros((0, 1)), cfg, rng)


def test_generator_learns_gaussian_mean():
    cfg = toy_cfg(adversarial_epochs=150, learning_rate=3e-3)
    gspec, ds, gs, rng = fresh(DISC_1D, cfg)
    real = rng.normal(5.0, 1.0, size=(256, 1))
    ds, gs, h = gan.adversarial_phase(DISC_1D, ds, gspec, gs, real, cfg, rng)
    out, _ = L.forward(gspec, gs, gan.sample_noise(2000, cfg, rng, np.float64), "eval")
    assert abs(out.mean() - 5.0) <= 1.0
    assert all(np.isfinite(h.disc_loss)) and all(np.isfinite(h.gen_loss))


def test_discriminator_plateaus_at_2ln2_when_fakes_equal_reals():
    cfg = toy_cfg(adversarial_epochs=60, learning_rate=1e-3)
    gspec, ds, gs, rng = fresh(DISC_1D, cfg)
    real = rng.normal(5.0, 1.0, size=(256, 1))
    g0 = L.copy_state(gs)

    def copies(n, r):
        return real[r.integers(0, len(real), n)]

    _, gs, h = gan.adversarial_phase(DISC_1D, ds, gspec, gs, real, cfg, rng, fake_sampler=copies)
    assert np.mean(h.disc_loss[-10:]) == pytest.approx(2 * math.log(2), abs=0.02)
    assert all(np.array_equal(gs[k], g0[k]) for k in gs)


def test_logit_bce_touches_only_column_k():
    logits = make_rng(0).normal(size=(5, 4))
    loss, grad = gan.logit_bce(logits, 2, 1.0)
    assert np.all(grad[:, [0, 1, 3]] == 0)
    assert np.all(grad[:, 2] != 0)
    ref, _ = T.bce_loss(logits[:, 2:3], np.ones((5, 1)))
    assert loss == ref


def test_multiclass_invalid_class():
    spec = L.NetworkSpec((2,), [L.dense(4)], 3)
    cfg = toy_cfg()
    gspec, ds, gs, rng = fresh(spec, cfg)
    for k in (-1, 3):
        with pytest.raises(ParameterError):
            gan.multiclass_adversarial_phase(spec, ds, gspec, gs, np.ones((4, 2)), k, cfg, rng)


def test_multiclass_with_two_logits_matches_binary_game_on_that_logit():
    spec = L.NetworkSpec((1,), [L.dense(8), L.activation("relu")], 2)
    cfg = toy_cfg(adversarial_epochs=3)
    real = make_rng(5).normal(5.0, 1.0, size=(64, 1))
    gspec, ds, gs, rng = fresh(spec, cfg)
    ds, gs, h = gan.multiclass_adversarial_phase(spec, ds, gspec, gs, real, 1, cfg, rng)
    # same game played by hand through logit_bce on column 1
    gspec2, ds2, gs2, rng2 = fresh(spec, cfg)
    ds2, gs2, h2 = gan._adversarial_loop(spec, ds2, gspec2, gs2, real, 1, 1.0, cfg, rng2, 3)
    assert h.disc_loss == h2.disc_loss
    assert all(np.array_equal(ds[k], ds2[k]) for k in ds)


def test_multiclass_leaves_other_output_rows_alone():
    spec = L.NetworkSpec((2,), [L.dense(6), L.activation("relu")], 3)
    cfg = toy_cfg(adversarial_epochs=2)
    gspec, ds, gs, rng = fresh(spec, cfg)
    before = ds["2.W"].copy()
    ds, _, _ = gan.multiclass_adversarial_phase(spec, ds, gspec, gs, np.ones((16, 2)), 1, cfg, rng)
    assert np.array_equal(ds["2.W"][[0, 2]], before[[0, 2]])
    assert not np.array_equal(ds["2.W"][1], before[1])


def blobs(rng, counts):
    centers = np.array([[0.0, 0.0], [3.0, 0.0], [1.5, 3.0]])
    X = np.concatenate([rng.normal(centers[c], 1.0, size=(n, 2)) for c, n in enumerate(counts)])
    return LabeledSet(X, np.repeat(np.arange(3), counts), 3)


def test_rare_class_accuracy_not_below_plain_mlp():
    spec = L.NetworkSpec((2,), [L.dense(16), L.activation("relu")], 3)
    plain, disc = [], []
    for seed in range(5):
        rng = make_rng(seed)
        tr, te = blobs(rng, [300, 300, 20]), blobs(rng, [500, 500, 500])
        tc = T.TrainConfig(epochs=20, batch_size=32, seed=seed, dtype="float64")
        s0 = L.init_network(spec, make_rng(seed), np.float64)
        _, rp = T.train(spec, s0, tr, te, tc)
        gc = toy_cfg(adversarial_epochs=50, attack_classes=[2], seed=seed)
        _, _, rg, _ = gan.train_discgan(spec, tr, te, gc, tc, disc_state=s0)
        plain.append(rp.per_class_accuracy[2])
        disc.append(rg.per_class_accuracy[2])
    assert np.median(disc) >= np.median(plain)


def test_supervised_phase_alone_is_plain_training():
    spec = L.NetworkSpec((2,), [L.dense(8), L.activation("relu")], 3)
    data = blobs(make_rng(0), [20, 20, 20])
    s0 = L.init_network(spec, make_rng(1))
    tc = T.TrainConfig(epochs=2, batch_size=8)
    a, ra = gan.supervised_phase(spec, s0, data, data, tc)
    b, rb = T.train(spec, s0, data, data, tc)
    assert ra.loss_history == rb.loss_history


def test_train_discgan_is_deterministic():
    dspec = L.NetworkSpec((8, 1), [L.conv1d(3, 3), L.batchnorm(), L.activation("relu"), L.global_avg_pool()], 1)
    rng = make_rng(0)
    data = LabeledSet(rng.random((40, 8, 1)), [1] * 8 + [0] * 32, 2)
    gc = gan.GanConfig(noise_dim=8, gen_hidden=16, adversarial_epochs=3, batch_size=8)
    tc = T.TrainConfig(epochs=2, batch_size=8)
    d1, g1, r1, h1 = gan.train_discgan(dspec, data, data, gc, tc)
    d2, g2, r2, h2 = gan.train_discgan(dspec, data, data, gc, tc)
    assert h1.disc_loss == h2.disc_loss and r1.loss_history == r2.loss_history
    assert all(d1[k].tobytes() == d2[k].tobytes() for k in d1)
    assert all(np.isfinite(h1.disc_loss))
