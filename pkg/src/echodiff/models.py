"""
Conditional generator, patch discriminator and the checkpoint container.

Generator: a small U-Net.  Input planes are the noisy image, the guide
(gray-level mask, or four one-hot planes) and a constant ``t / T`` plane.
Three stride-2 stages (32, 64, 128 channels) lead to a bottleneck where the
latent vector and the step plane are broadcast and concatenated; three
nearest-upsample stages with skip concatenation return to full resolution
and a tanh head emits the ``x0`` estimate.

Discriminator: four stride-2 conv blocks (32, 64, 128, 256) with leaky
rectifiers over (candidate, x_t, step plane), then a 1-channel conv that
produces a logit map at 1/16 of the input side.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config import RunConfig, parse_config
from .diffusion import NoiseSchedule, make_schedule
from .optim import Adam
from .tensor import Tensor, concat, conv2d, instance_norm, leaky_relu, tanh, upsample2x

GEN_WIDTHS = (32, 64, 128)
DISC_WIDTHS = (32, 64, 128, 256)


class Network:
    """Named parameter container; parameters keep declaration order."""

    def __init__(self, cfg: RunConfig, seed: int):
        self.cfg = cfg
        self.params: dict = {}
        self._rng = np.random.default_rng(seed)
        self._dtype = cfg.dtype

    def _add_conv(self, name: str, cin: int, cout: int, k: int) -> None:
        w = self._rng.normal(0.0, self.cfg.init_std, size=(cout, cin, k, k))
        self.params[f"{name}.weight"] = Tensor(w.astype(self._dtype), requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(np.zeros(cout, self._dtype), requires_grad=True)

    def _conv(self, name: str, x, stride: int = 1, padding: int = 1) -> Tensor:
        return conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"],
                      stride=stride, padding=padding)

    def parameters(self) -> list:
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> list:
        return [p.data for p in self.params.values()]

    def load_state_arrays(self, arrays) -> None:
        if len(arrays) != len(self.params):
            raise ValueError(f"expected {len(self.params)} parameter arrays, got {len(arrays)}")
        for (name, p), a in zip(self.params.items(), arrays):
            if a.shape != p.shape:
                raise ValueError(f"parameter {name}: shape {a.shape} != {p.shape}")
            p.data = np.array(a, dtype=p.dtype)


def step_plane(t, T: int, n: int, h: int, w: int, dtype=np.float32) -> np.ndarray:
    """Constant ``t / T`` plane per sample, shape (n, 1, h, w)."""
    ts = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    return np.broadcast_to((ts / T).astype(dtype)[:, None, None, None], (n, 1, h, w)).copy()


class GeneratorNet(Network):
    def __init__(self, cfg: RunConfig, seed: Optional[int] = None):
        super().__init__(cfg, cfg.seed if seed is None else seed)
        self.side = cfg.side
        self.T = cfg.T
        self.latent_dim = cfg.latent_dim
        self.guide_channels = 1 if cfg.guide_mode == "gray" else 4
        self.calls = 0
        w1, w2, w3 = GEN_WIDTHS
        cin = 2 + self.guide_channels
        self._add_conv("down1", cin, w1, 3)
        self._add_conv("down2", w1, w2, 3)
        self._add_conv("down3", w2, w3, 3)
        self._add_conv("bottleneck", w3 + self.latent_dim + 1, w3, 3)
        self._add_conv("up3", w3 + w2, w2, 3)
        self._add_conv("up2", w2 + w1, w1, 3)
        self._add_conv("up1", w1 + cin, 16, 3)
        self._add_conv("head", 16, 1, 3)

    def forward(self, x_t, guide, t, z) -> Tensor:
        x_t = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t, self._dtype))
        n, _, h, w = x_t.shape
        tp = step_plane(t, self.T, n, h, w, self._dtype)
        inp = concat([x_t, Tensor(np.asarray(guide, self._dtype)), Tensor(tp)])

        d1 = leaky_relu(self._conv("down1", inp, stride=2))
        d2 = leaky_relu(instance_norm(self._conv("down2", d1, stride=2)))
        d3 = leaky_relu(self._conv("down3", d2, stride=2))
        bh, bw = d3.shape[2:]
        zp = np.broadcast_to(np.asarray(z, self._dtype)[:, :, None, None],
                             (n, self.latent_dim, bh, bw)).copy()
        b = concat([d3, Tensor(zp), Tensor(step_plane(t, self.T, n, bh, bw, self._dtype))])
        b = leaky_relu(self._conv("bottleneck", b))
        # no normalisation here: z and t arrive as constant planes and would be subtracted out
        u3 = leaky_relu(self._conv("up3", concat([upsample2x(b), d2])))
        u2 = leaky_relu(instance_norm(self._conv("up2", concat([upsample2x(u3), d1]))))
        u1 = leaky_relu(self._conv("up1", concat([upsample2x(u2), inp])))
        return tanh(self._conv("head", u1))


class DiscriminatorNet(Network):
    def __init__(self, cfg: RunConfig, seed: Optional[int] = None):
        super().__init__(cfg, (cfg.seed if seed is None else seed) + 1)
        self.T = cfg.T
        cin = 3
        for i, width in enumerate(DISC_WIDTHS, start=1):
            self._add_conv(f"block{i}", cin, width, 3)
            cin = width
        self._add_conv("logits", cin, 1, 3)

    def forward(self, candidate, x_t, t) -> Tensor:
        candidate = candidate if isinstance(candidate, Tensor) else Tensor(
            np.asarray(candidate, self._dtype))
        x_t = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t, self._dtype))
        n, _, h, w = candidate.shape
        h_ = concat([candidate, x_t, Tensor(step_plane(t, self.T, n, h, w, self._dtype))])
        for i in range(1, len(DISC_WIDTHS) + 1):
            h_ = leaky_relu(self._conv(f"block{i}", h_, stride=2))
        return self._conv("logits", h_)


def build_generator(cfg: RunConfig, seed: Optional[int] = None) -> GeneratorNet:
    if cfg.side % 8:
        raise ValueError(f"generator image side must be divisible by 8, got {cfg.side}")
    return GeneratorNet(cfg, seed)


def build_discriminator(cfg: RunConfig, seed: Optional[int] = None) -> DiscriminatorNet:
    if cfg.side % 16:
        raise ValueError(f"discriminator image side must be divisible by 16, got {cfg.side}")
    return DiscriminatorNet(cfg, seed)


def _spatial(a) -> tuple:
    return tuple(np.shape(a.data if isinstance(a, Tensor) else a))


def generator_predict(gen: GeneratorNet, x_t, guide, t, z) -> Tensor:
    """Estimate of the clean image from (x_t, guide, t, z); values in (-1, 1)."""
    xs, gs, zs = _spatial(x_t), _spatial(guide), np.shape(z)
    if len(xs) != 4 or xs[1] != 1:
        raise ValueError(f"x_t must be (N, 1, H, W), got {xs}")
    if len(gs) != 4 or gs[0] != xs[0] or gs[2:] != xs[2:]:
        raise ValueError(f"guide shape {gs} does not match x_t shape {xs}")
    if gs[1] != gen.guide_channels:
        raise ValueError(f"guide has {gs[1]} channels, generator expects {gen.guide_channels}")
    if zs != (xs[0], gen.latent_dim):
        raise ValueError(f"latent shape {zs} != expected {(xs[0], gen.latent_dim)}")
    if xs[2] % 8 or xs[3] % 8:
        raise ValueError(f"spatial size {xs[2:]} must be divisible by 8")
    gen.calls += 1
    return gen.forward(x_t, guide, t, z)


def discriminator_score(disc: DiscriminatorNet, candidate, x_t, t) -> Tensor:
    """Patch logit map for ``candidate`` as the step before ``x_t``."""
    cs, xs = _spatial(candidate), _spatial(x_t)
    if cs != xs:
        raise ValueError(f"candidate shape {cs} does not match x_t shape {xs}")
    if len(cs) != 4 or cs[1] != 1:
        raise ValueError(f"expected (N, 1, H, W) inputs, got {cs}")
    return disc.forward(candidate, x_t, t)


# -- checkpoint ----------------------------------------------------------------
MAGIC = b"ECHODIFF"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    def __init__(self, found: int, expected: int = FORMAT_VERSION):
        super().__init__(f"checkpoint format version {found} is not supported "
                         f"(this build reads version {expected})")
        self.found, self.expected = found, expected


class FingerprintMismatchError(CheckpointError):
    def __init__(self, stored: str, session: str):
        super().__init__(f"checkpoint config fingerprint {stored} does not match "
                         f"session fingerprint {session}")
        self.stored, self.session = stored, session


@dataclass
class Checkpoint:
    cfg: RunConfig
    generator: GeneratorNet
    discriminator: DiscriminatorNet
    opt_g: Adam
    opt_d: Adam
    step: int = 0
    epoch: int = 0
    version: int = FORMAT_VERSION
    extra: dict = field(default_factory=dict)

    @property
    def schedule(self) -> NoiseSchedule:
        return self.cfg.schedule()

    @property
    def fingerprint(self) -> str:
        return self.cfg.fingerprint()

    @classmethod
    def initial(cls, cfg: RunConfig) -> "Checkpoint":
        gen = build_generator(cfg)
        disc = build_discriminator(cfg)
        betas = (cfg.adam_beta1, cfg.adam_beta2)
        return cls(cfg, gen, disc, Adam(gen.parameters(), cfg.lr_g, betas),
                   Adam(disc.parameters(), cfg.lr_d, betas))


def _blocks(ckpt: Checkpoint) -> list:
    out = []
    for prefix, arrays, names in (
        ("generator", ckpt.generator.state_arrays(), list(ckpt.generator.params)),
        ("discriminator", ckpt.discriminator.state_arrays(), list(ckpt.discriminator.params)),
    ):
        out += [(f"{prefix}.{n}", a) for n, a in zip(names, arrays)]
    for prefix, opt, net in (("opt_g", ckpt.opt_g, ckpt.generator),
                             ("opt_d", ckpt.opt_d, ckpt.discriminator)):
        names = list(net.params)
        out += [(f"{prefix}.m.{n}", a) for n, a in zip(names, opt.m)]
        out += [(f"{prefix}.v.{n}", a) for n, a in zip(names, opt.v)]
    return out


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    blocks = _blocks(ckpt)
    payload = b"".join(np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<")).tobytes()
                       for _, a in blocks)
    meta = {
        "schedule": ckpt.schedule.to_dict(),
        "fingerprint": ckpt.fingerprint,
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "opt_steps": [ckpt.opt_g.step_count, ckpt.opt_d.step_count],
        "config": ckpt.cfg.dump(),
        "blocks": [{"name": n, "shape": list(a.shape), "dtype": a.dtype.newbyteorder("<").str}
                   for n, a in blocks],
        "payload_crc32": zlib.crc32(payload),
        "extra": ckpt.extra,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", ckpt.version, len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(payload)
    tmp.replace(path)


def load_checkpoint(path, session_fingerprint: Optional[str] = None,
                    allow_mismatch: bool = False) -> Checkpoint:
    raw = Path(path).read_bytes()
    head = len(MAGIC) + 12
    if len(raw) < head or raw[:len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError(f"{path}: missing ECHODIFF header")
    version, meta_len = struct.unpack("<IQ", raw[len(MAGIC):head])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(version)
    if len(raw) < head + meta_len:
        raise CorruptCheckpointError(f"{path}: truncated metadata block")
    try:
        meta = json.loads(raw[head:head + meta_len].decode())
        cfg = parse_config(meta["config"], source=f"{path} metadata")
        specs = meta["blocks"]
    except (ValueError, KeyError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable metadata ({exc})") from None
    payload = raw[head + meta_len:]
    expected = sum(int(np.prod(s["shape"])) * np.dtype(s["dtype"]).itemsize for s in specs)
    if len(payload) != expected:
        raise CorruptCheckpointError(
            f"{path}: payload holds {len(payload)} bytes, metadata describes {expected}")
    if zlib.crc32(payload) != meta.get("payload_crc32"):
        raise CorruptCheckpointError(f"{path}: payload checksum mismatch")
    if cfg.fingerprint() != meta["fingerprint"]:
        raise CorruptCheckpointError(f"{path}: stored config does not hash to its fingerprint")
    if session_fingerprint is not None and session_fingerprint != meta["fingerprint"] \
            and not allow_mismatch:
        raise FingerprintMismatchError(meta["fingerprint"], session_fingerprint)

    arrays, off = {}, 0
    for s in specs:
        dt = np.dtype(s["dtype"])
        count = int(np.prod(s["shape"]))
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=off).reshape(s["shape"])
        arrays[s["name"]] = arr.astype(dt.newbyteorder("="))
        off += count * dt.itemsize

    ckpt = Checkpoint.initial(cfg)
    try:
        for prefix, net in (("generator", ckpt.generator), ("discriminator", ckpt.discriminator)):
            net.load_state_arrays([arrays[f"{prefix}.{n}"] for n in net.params])
        steps = meta["opt_steps"]
        for i, (prefix, opt, net) in enumerate((("opt_g", ckpt.opt_g, ckpt.generator),
                                                ("opt_d", ckpt.opt_d, ckpt.discriminator))):
            names = list(net.params)
            opt.load_state_arrays([arrays[f"{prefix}.m.{n}"] for n in names]
                                  + [arrays[f"{prefix}.v.{n}"] for n in names], steps[i])
    except (KeyError, ValueError) as exc:
        raise CorruptCheckpointError(f"{path}: parameter blocks inconsistent ({exc})") from None
    ckpt.step = meta["step"]
    ckpt.epoch = meta["epoch"]
    ckpt.extra = meta.get("extra", {})
    if make_schedule(**meta["schedule"]) != ckpt.schedule:
        raise CorruptCheckpointError(f"{path}: schedule block disagrees with stored config")
    return ckpt
