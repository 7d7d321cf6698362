"""
Adversarial training of the large-step reverse kernel.

Each step draws a true pair ``(x_{t-k}, x_t)`` from the forward chain, asks
the generator for ``x0_hat``, turns it into a fake ``x'_{t-k}`` with the
Gaussian posterior, and updates the discriminator then the generator.  The
generator also carries an L1 reconstruction term on ``x0_hat``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .config import RunConfig
from .data import Dataset, EmptyDatasetError, encode_guide, split
from .diffusion import NoiseSchedule, forward_span, posterior
from .models import (Checkpoint, DiscriminatorNet, GeneratorNet, discriminator_score,
                     generator_predict, save_checkpoint)
from .optim import Adam
from .tensor import Tensor, backward, no_grad, softplus, tabs

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.echodiff"
STEP_LOG_NAME = "steps.log"


class NonFiniteLossError(FloatingPointError):
    def __init__(self, report: "StepReport"):
        super().__init__(f"non-finite loss at step {report.step}: d_loss={report.d_loss}, "
                         f"g_adv={report.g_adv_loss}, g_rec={report.g_rec_loss}")
        self.report = report


@dataclass(frozen=True)
class StepReport:
    step: int
    d_loss: float
    g_adv_loss: float
    g_rec_loss: float
    finite: bool

    def log_line(self, epoch: int) -> str:
        return (f"step step={self.step} epoch={epoch} d_loss={self.d_loss!r} "
                f"g_adv={self.g_adv_loss!r} g_rec={self.g_rec_loss!r}")


def sample_training_triple(x0: np.ndarray, sched: NoiseSchedule, rng: np.random.Generator):
    """Joint draw of ``(t, x_{t-k}, x_t)`` from the forward chain.

    ``x0`` is a (N, ...) batch; ``t`` is drawn per sample from {k, 2k, ..., T}.
    """
    x0 = np.asarray(x0)
    n = x0.shape[0]
    t = sched.k * rng.integers(1, sched.n_steps + 1, size=n)
    eps1 = rng.standard_normal(x0.shape).astype(x0.dtype)
    eps2 = rng.standard_normal(x0.shape).astype(x0.dtype)
    ab = sched.alpha_bar[t - sched.k]
    shape = (n,) + (1,) * (x0.ndim - 1)
    a = np.sqrt(ab).reshape(shape).astype(x0.dtype)
    s = np.sqrt(1.0 - ab).reshape(shape).astype(x0.dtype)
    at_start = (t == sched.k).reshape(shape)
    x_tmk = np.where(at_start, x0, a * x0 + s * eps1)
    x_t = forward_span(x_tmk, t, eps2, sched)
    return t, x_tmk, x_t


def _mean(x):
    return x.mean() if isinstance(x, Tensor) else float(np.mean(x))


def _softplus(x):
    if isinstance(x, Tensor):
        return softplus(x)
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def discriminator_loss(real_score, fake_score, kind: str = "lsgan"):
    """Least squares ``½(real-1)² + ½fake²`` (batch mean), or the logistic form."""
    if kind == "lsgan":
        return _mean((real_score - 1.0) * (real_score - 1.0) * 0.5
                     + fake_score * fake_score * 0.5)
    if kind == "logistic":
        return _mean(_softplus(-real_score) + _softplus(fake_score))
    raise ValueError(f"unknown adversarial loss {kind!r}")


def generator_loss(fake_score, x0_hat, x0, lambda_rec: float, kind: str = "lsgan"):
    """Returns ``(total, adversarial, reconstruction)``."""
    if kind == "lsgan":
        adv = _mean((fake_score - 1.0) * (fake_score - 1.0) * 0.5)
    elif kind == "logistic":
        adv = _mean(_softplus(-fake_score))
    else:
        raise ValueError(f"unknown adversarial loss {kind!r}")
    if isinstance(x0_hat, Tensor):
        rec = tabs(x0_hat - np.asarray(x0, dtype=x0_hat.dtype)).mean()
    else:
        if np.shape(x0_hat) != np.shape(x0):
            raise ValueError(f"shape mismatch {np.shape(x0_hat)} vs {np.shape(x0)}")
        rec = float(np.mean(np.abs(np.asarray(x0_hat, np.float64) - np.asarray(x0, np.float64))))
    return adv + rec * float(lambda_rec), adv, rec


def batch_arrays(samples, cfg: RunConfig):
    x0 = np.stack([s.image for s in samples])[:, None].astype(cfg.dtype)
    guide = np.stack([encode_guide(s.mask, cfg.guide_mode) for s in samples]).astype(cfg.dtype)
    return x0, guide


def _score(disc, candidate, x_t, t):
    return discriminator_score(disc, candidate, x_t, t).mean(axis=(1, 2, 3))


def train_step(batch, gen: GeneratorNet, disc: DiscriminatorNet, opt_g: Adam, opt_d: Adam,
               sched: NoiseSchedule, cfg: RunConfig, rng: np.random.Generator,
               step: int = 0) -> StepReport:
    """One discriminator update followed by one generator update."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    x0, guide = batch_arrays(batch, cfg)
    n = len(x0)
    t, x_tmk, x_t = sample_training_triple(x0, sched, rng)
    z = rng.standard_normal((n, cfg.latent_dim)).astype(cfg.dtype)
    eps = rng.standard_normal(x0.shape).astype(cfg.dtype)

    # discriminator: true pair vs posterior sample at the generator's estimate
    with no_grad():
        x0_hat = generator_predict(gen, x_t, guide, t, z).data
    mean, var = posterior(x0_hat, x_t, t, sched)
    noise = (np.sqrt(var).reshape(n, 1, 1, 1) * eps).astype(cfg.dtype)
    fake = (mean + noise).astype(cfg.dtype)
    disc.set_trainable(True)
    opt_d.zero_grad()
    d_loss = discriminator_loss(_score(disc, x_tmk, x_t, t), _score(disc, fake, x_t, t),
                                cfg.adv_loss)
    d_val = float(d_loss.data)
    if not math.isfinite(d_val):
        raise NonFiniteLossError(StepReport(step, d_val, math.nan, math.nan, False))
    backward(d_loss)
    opt_d.step()

    # generator: discriminator frozen so no gradient reaches its parameters
    disc.set_trainable(False)
    try:
        opt_g.zero_grad()
        x0_hat_t = generator_predict(gen, x_t, guide, t, z)
        mean_t, _ = posterior(x0_hat_t, x_t, t, sched)
        fake_t = mean_t + Tensor(noise)
        total, adv, rec = generator_loss(_score(disc, fake_t, x_t, t), x0_hat_t, x0,
                                         cfg.lambda_rec, cfg.adv_loss)
        g_adv, g_rec = float(adv.data), float(rec.data)
        if not (math.isfinite(g_adv) and math.isfinite(g_rec)):
            raise NonFiniteLossError(StepReport(step, d_val, g_adv, g_rec, False))
        backward(total)
        opt_g.step()
    finally:
        disc.set_trainable(True)
    return StepReport(step, d_val, g_adv, g_rec, True)


def validation_rec_loss(gen: GeneratorNet, ds: Dataset, sched: NoiseSchedule,
                        cfg: RunConfig, seed: int = 12345, batch_size: int = 16) -> float:
    """Mean L1 of ``x0_hat`` on a fixed noise draw, so epochs are comparable."""
    rng = np.random.default_rng(seed)
    total, count = 0.0, 0
    with no_grad():
        for i in range(0, len(ds), batch_size):
            x0, guide = batch_arrays(ds.samples[i:i + batch_size], cfg)
            t, _, x_t = sample_training_triple(x0, sched, rng)
            z = rng.standard_normal((len(x0), cfg.latent_dim)).astype(cfg.dtype)
            x0_hat = generator_predict(gen, x_t, guide, t, z).data
            total += float(np.abs(x0_hat.astype(np.float64) - x0).sum())
            count += x0.size
    return total / count


def train(dataset: Dataset, cfg: RunConfig, out_dir=None,
          on_record: Optional[Callable[[str], None]] = None,
          ckpt: Optional[Checkpoint] = None) -> Checkpoint:
    """Train on ``dataset`` (split per ``cfg.validation_fraction``).

    With ``out_dir`` the step log is written there and the checkpoint is
    refreshed after every epoch.
    """
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot train on an empty dataset")
    train_ds, val_ds = split(dataset, 1.0 - cfg.validation_fraction, cfg.seed)
    ckpt = ckpt or Checkpoint.initial(cfg)
    sched = cfg.schedule()
    shuffle_ss, noise_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    noise_rng = np.random.default_rng(noise_ss)

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / STEP_LOG_NAME, "w")

    def emit(line: str) -> None:
        if log_fh is not None:
            log_fh.write(line + "\n")
            log_fh.flush()
        if on_record is not None:
            on_record(line)

    history = []
    try:
        if cfg.epochs > 0:
            v0 = validation_rec_loss(ckpt.generator, val_ds, sched, cfg)
            history.append(v0)
            emit(f"epoch epoch=0 val_g_rec={v0!r}")
        for epoch in range(1, cfg.epochs + 1):
            order = shuffle_rng.permutation(len(train_ds))
            d_sum, steps = 0.0, 0
            for i in range(0, len(order), cfg.batch_size):
                batch = [train_ds[int(j)] for j in order[i:i + cfg.batch_size]]
                ckpt.step += 1
                rep = train_step(batch, ckpt.generator, ckpt.discriminator, ckpt.opt_g,
                                 ckpt.opt_d, sched, cfg, noise_rng, ckpt.step)
                emit(rep.log_line(epoch))
                d_sum += rep.d_loss
                steps += 1
            v = validation_rec_loss(ckpt.generator, val_ds, sched, cfg)
            history.append(v)
            ckpt.epoch = epoch
            ckpt.extra = {"val_g_rec": history}
            emit(f"epoch epoch={epoch} val_g_rec={v!r} mean_d_loss={d_sum / steps!r}")
            log.info("epoch %d: val_g_rec=%.5f", epoch, v)
            if out is not None:
                save_checkpoint(out / CHECKPOINT_NAME, ckpt)
    finally:
        if log_fh is not None:
            log_fh.close()
    ckpt.extra = {"val_g_rec": history}
    if out is not None:
        save_checkpoint(out / CHECKPOINT_NAME, ckpt)
    return ckpt
