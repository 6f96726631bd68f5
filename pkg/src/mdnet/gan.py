"""DiscGAN: a GAN discriminator reused as the classifier.

Phase 1 plays the usual two-player game, but only on the instances of one
class (the rare one): the discriminator learns real-vs-generated for that
class. Phase 2 trains the warmed-up discriminator as an ordinary supervised
classifier on the full labeled set; the generator is frozen from then on.

For C > 2 classes the discriminator has C logits and the game is played on
the sigmoid of logit ``k`` only; the other logits receive no gradient.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import layers as L
from . import presets
from .data import LabeledSet, random_crop_batch
from .errors import DataError, ParameterError, SpecError
from .tensor import Rng, make_rng
from .training import TrainConfig, bce_loss, rmsprop_step, train

log = logging.getLogger(__name__)


@dataclass
class GanConfig:
    noise_dim: int = 64
    gen_hidden: int = 256
    gen_output_activation: str = "sigmoid"
    noise: str = "gaussian"  # or "uniform"
    adversarial_epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-3
    rmsprop_decay: float = 0.9
    rmsprop_eps: float = 1e-8
    minority_class: int = 1
    attack_classes: list[int] | None = None  # multi-class: None = every class in turn
    saturating: bool = False  # literal min log(1 - D(G(z))) instead of max log D(G(z))
    seed: int = 0

    def __post_init__(self):
        if self.noise_dim < 1:
            raise ParameterError("noise_dim must be positive")
        if self.noise not in ("gaussian", "uniform"):
            raise ParameterError(f"unknown noise kind {self.noise!r}")


@dataclass
class AdversarialHistory:
    disc_loss: list[float] = field(default_factory=list)
    gen_loss: list[float] = field(default_factory=list)


def make_generator(disc_spec: L.NetworkSpec, cfg: GanConfig) -> L.NetworkSpec:
    out = int(np.prod(disc_spec.input_shape))
    return presets.generator_mlp(cfg.noise_dim, out, cfg.gen_hidden, cfg.gen_output_activation)


def sample_noise(n: int, cfg: GanConfig, rng: Rng, dtype=np.float32) -> np.ndarray:
    if cfg.noise == "uniform":
        return rng.uniform(-1.0, 1.0, size=(n, cfg.noise_dim)).astype(dtype)
    return rng.standard_normal((n, cfg.noise_dim)).astype(dtype)


def _check_pair(disc_spec, gen_spec):
    if gen_spec.stack()[-1].kind == "dense":
        out_units = gen_spec.output_units
    else:
        out_units = gen_spec.shapes[-1][0]
    if out_units != int(np.prod(disc_spec.input_shape)):
        raise SpecError(
            f"generator emits {out_units} values, discriminator expects {disc_spec.input_shape}"
        )


def logit_bce(logits, column: int, target: float):
    """BCE on one logit column; the gradient is zero on every other column."""
    loss, g = bce_loss(logits[:, column:column + 1], np.full((len(logits), 1), target))
    grad = np.zeros_like(logits)
    grad[:, column] = g[:, 0]
    return loss, grad


def _generate(gen_spec, gen_state, disc_spec, z, rng):
    flat, cache = L.forward(gen_spec, gen_state, z, "train", rng)
    return flat.reshape((len(z), *disc_spec.input_shape)), cache


def _adversarial_loop(
    disc_spec, disc_state, gen_spec, gen_state, real, column, real_target, cfg, rng, epochs,
    fake_sampler=None,
):
    history = AdversarialHistory()
    opt_d: dict = {}
    opt_g: dict = {}
    dtype = next(iter(disc_state.values())).dtype
    real = np.asarray(real, dtype=dtype)
    fake_target = 1.0 - real_target
    n = len(real)
    T_in = disc_spec.input_shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        d_epoch, g_epoch, steps = 0.0, 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            b = len(idx)
            xr = real[idx]
            if xr.ndim == 3 and xr.shape[1] != T_in:
                xr = random_crop_batch(xr, T_in, rng)
            # discriminator step: real -> real_target, fake -> fake_target
            if fake_sampler is not None:
                xf = np.asarray(fake_sampler(b, rng), dtype=dtype)
            else:
                xf, _ = _generate(gen_spec, gen_state, disc_spec, sample_noise(b, cfg, rng, dtype), rng)
            # separate real and fake passes so batchnorm statistics match the
            # fake-only batches seen in the generator step
            logits, cache = L.forward(disc_spec, disc_state, xr, "train", rng)
            loss_r, g_r = logit_bce(logits, column, real_target)
            grads = L.backward(disc_spec, disc_state, cache, g_r)
            logits, cache = L.forward(disc_spec, disc_state, xf, "train", rng)
            loss_f, g_f = logit_bce(logits, column, fake_target)
            for k, v in L.backward(disc_spec, disc_state, cache, g_f).items():
                grads[k] = grads[k] + v
            rmsprop_step(disc_state, grads, opt_d, cfg.learning_rate, cfg.rmsprop_decay, cfg.rmsprop_eps)
            d_epoch += loss_r + loss_f
            steps += 1
            if fake_sampler is not None:
                continue
            # generator step through a frozen discriminator
            z = sample_noise(b, cfg, rng, dtype)
            xf, g_cache = _generate(gen_spec, gen_state, disc_spec, z, rng)
            logits, d_cache = L.forward(disc_spec, disc_state, xf, "train", rng, update_running=False)
            if cfg.saturating:
                loss_g, g_logits = logit_bce(logits, column, fake_target)
                loss_g, g_logits = -loss_g, -g_logits
            else:
                loss_g, g_logits = logit_bce(logits, column, real_target)
            _, d_input = L.backward(disc_spec, disc_state, d_cache, g_logits, return_input_grad=True)
            g_grads = L.backward(gen_spec, gen_state, g_cache, d_input.reshape(b, -1))
            rmsprop_step(gen_state, g_grads, opt_g, cfg.learning_rate, cfg.rmsprop_decay, cfg.rmsprop_eps)
            g_epoch += loss_g
        history.disc_loss.append(d_epoch / max(steps, 1))
        history.gen_loss.append(g_epoch / max(steps, 1))
    return disc_state, gen_state, history


def adversarial_phase(
    disc_spec: L.NetworkSpec,
    disc_state: dict,
    gen_spec: L.NetworkSpec,
    gen_state: dict,
    minority,
    cfg: GanConfig,
    rng: Rng,
    fake_sampler: Callable[[int, Rng], np.ndarray] | None = None,
):
    """Binary game on the minority-class instances.

    Returns (disc_state, gen_state, history); the input states are updated
    in place. With ``fake_sampler`` the generator is bypassed and left
    untouched (used to probe the discriminator's optimum).
    """
    _check_pair(disc_spec, gen_spec)
    if len(minority) == 0:
        raise DataError("adversarial phase needs at least one minority instance")
    if disc_spec.output_units != 1:
        raise SpecError("binary adversarial phase needs a single-logit discriminator")
    real_target = 1.0 if cfg.minority_class == 1 else 0.0
    return _adversarial_loop(
        disc_spec, disc_state, gen_spec, gen_state, minority, 0, real_target, cfg, rng,
        cfg.adversarial_epochs, fake_sampler,
    )


def multiclass_adversarial_phase(
    disc_spec: L.NetworkSpec,
    disc_state: dict,
    gen_spec: L.NetworkSpec,
    gen_state: dict,
    class_data,
    attack_class: int,
    cfg: GanConfig,
    rng: Rng,
    epochs: int | None = None,
):
    """Game on the sigmoid of logit ``attack_class`` using that class's data."""
    _check_pair(disc_spec, gen_spec)
    C = disc_spec.output_units
    if C < 2:
        raise SpecError("multi-class adversarial phase needs at least 2 logits")
    if not 0 <= attack_class < C:
        raise ParameterError(f"attack class {attack_class} outside [0, {C})")
    if len(class_data) == 0:
        raise DataError(f"no instances of class {attack_class}")
    return _adversarial_loop(
        disc_spec, disc_state, gen_spec, gen_state, class_data, attack_class, 1.0, cfg, rng,
        cfg.adversarial_epochs if epochs is None else epochs,
    )


def supervised_phase(disc_spec, disc_state, full_set: LabeledSet, val_set, cfg: TrainConfig):
    """Ordinary supervised training starting from the warmed discriminator."""
    return train(disc_spec, disc_state, full_set, val_set, cfg)


def train_discgan(
    disc_spec: L.NetworkSpec,
    train_set: LabeledSet,
    val_set: LabeledSet | None,
    gan_cfg: GanConfig,
    train_cfg: TrainConfig,
    disc_state: dict | None = None,
):
    """Both phases end to end. Returns (disc_state, gen_state, report, history)."""
    rng = make_rng(gan_cfg.seed)
    dtype = np.dtype(train_cfg.dtype)
    if disc_state is None:
        disc_state = L.init_network(disc_spec, rng, dtype)
    else:
        disc_state = L.copy_state(disc_state)
    gen_spec = make_generator(disc_spec, gan_cfg)
    gen_state = L.init_network(gen_spec, rng, dtype)
    if disc_spec.output_units == 1:
        minority = train_set.instances[train_set.labels == gan_cfg.minority_class]
        disc_state, gen_state, history = adversarial_phase(
            disc_spec, disc_state, gen_spec, gen_state, minority, gan_cfg, rng
        )
    else:
        classes = gan_cfg.attack_classes
        if classes is None:
            classes = list(range(disc_spec.output_units))
        history = AdversarialHistory()
        # one epoch per attacked class, cycling until the epoch budget is spent
        for e in range(gan_cfg.adversarial_epochs):
            k = classes[e % len(classes)]
            data_k = train_set.instances[train_set.labels == k]
            if len(data_k) == 0:
                continue
            disc_state, gen_state, h = multiclass_adversarial_phase(
                disc_spec, disc_state, gen_spec, gen_state, data_k, k, gan_cfg, rng, epochs=1
            )
            history.disc_loss += h.disc_loss
            history.gen_loss += h.gen_loss
    disc_state, report = supervised_phase(disc_spec, disc_state, train_set, val_set, train_cfg)
    return disc_state, gen_state, report, history
