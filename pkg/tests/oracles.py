"""Shared gradient-check cases for the unit tests and the acceptance suite."""

import numpy as np

from echodiff.config import RunConfig
from echodiff.diffusion import posterior
from echodiff.models import (build_discriminator, build_generator, discriminator_score,
                             generator_predict)
from echodiff.tensor import (Tensor, add, concat, conv2d, instance_norm, leaky_relu, matmul,
                             mean, mean_pool, mul, reshape, scale, sigmoid, softplus, sub, tabs,
                             tanh, tsum, upsample2x)
from echodiff.training import generator_loss, sample_training_triple

# central-difference steps, frozen from sweeps over seeds 0-99 with held-out checks
PRIMITIVE_STEP = 1e-5
E2E_STEP = 1e-4


def _t(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def _unary(op):
    def build(rng):
        return op, [_t(rng, 2, 3, 4, 4)]
    return build


def _conv(stride, padding, bias):
    def build(rng):
        ins = [_t(rng, 2, 3, 6, 6), _t(rng, 4, 3, 3, 3)]
        if bias:
            ins.append(_t(rng, 4))
        return lambda x, w, *b: conv2d(x, w, *b, stride=stride, padding=padding), ins
    return build


PRIMITIVES = {
    "add": lambda rng: (add, [_t(rng, 3, 4), _t(rng, 1, 4)]),
    "sub": lambda rng: (sub, [_t(rng, 3, 4), _t(rng, 3, 1)]),
    "mul": lambda rng: (mul, [_t(rng, 3, 4), _t(rng, 4)]),
    "scale": lambda rng: ((lambda x: scale(x, 2.5)), [_t(rng, 3, 4)]),
    "abs": _unary(tabs),
    "matmul": lambda rng: (matmul, [_t(rng, 3, 5), _t(rng, 5, 2)]),
    "conv2d": _conv(1, 0, False),
    "conv2d_padded_bias": _conv(1, 1, True),
    "conv2d_stride2": _conv(2, 1, True),
    "upsample2x": _unary(upsample2x),
    "concat": lambda rng: ((lambda a, b: concat([a, b])), [_t(rng, 2, 1, 3, 3),
                                                           _t(rng, 2, 2, 3, 3)]),
    "reshape": lambda rng: ((lambda x: reshape(x, (6, 4))), [_t(rng, 2, 3, 4)]),
    "mean_pool": _unary(mean_pool),
    "sum": lambda rng: ((lambda x: tsum(x, axis=1)), [_t(rng, 3, 4)]),
    "mean": lambda rng: ((lambda x: mean(x, axis=(2, 3))), [_t(rng, 2, 3, 4, 4)]),
    "leaky_relu": _unary(leaky_relu),
    "tanh": _unary(tanh),
    "sigmoid": _unary(sigmoid),
    "softplus": _unary(softplus),
    "instance_norm": _unary(instance_norm),
}


def e2e_case(seed: int):
    """Full generator loss at 8x8 in float64, as a function of the generator weights.

    The networks are built for side 16 and run on 8x8 inputs; the patch
    discriminator then scores a 1x1 map.
    """
    cfg = RunConfig(side=16, precision="float64", seed=seed)
    gen, disc = build_generator(cfg), build_discriminator(cfg)
    sched = cfg.schedule()
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(-1, 1, (2, 1, 8, 8))
    guide = rng.uniform(-1, 1, (2, 1, 8, 8))
    t, _, x_t = sample_training_triple(x0, sched, rng)
    z = rng.standard_normal((2, cfg.latent_dim))
    noise = rng.standard_normal(x0.shape) * 0.01

    def loss(*_params):
        x0_hat = generator_predict(gen, x_t, guide, t, z)
        post_mean, _ = posterior(x0_hat, x_t, t, sched)
        score = discriminator_score(disc, post_mean + Tensor(noise), x_t, t).mean(axis=(1, 2, 3))
        return generator_loss(score, x0_hat, x0, cfg.lambda_rec)[0]

    return loss, gen.parameters()
