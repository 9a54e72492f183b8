"""
3D U-Net generator, patch discriminator, conditional adversarial + L1
training and block/volume inference.
"""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Parameter
from .degrade import DEFAULT_PEAK, ConditionKind, make_condition, pairs_to_arrays
from .errors import CheckpointError, ConfigError, ShapeMismatchError, CTCGANError
from .volume import (
    PreprocessParams,
    Volume,
    VoxelBlock,
    apply_preprocess,
    denormalize_and_unequalize,
    partition,
    preprocess,
    stitch,
)

log = logging.getLogger(__name__)

LEAKY_SLOPE = 0.2
LOSS_EPS = 1e-7


class DivergenceError(CTCGANError):
    """Raised when a training loss becomes NaN or infinite."""


@dataclass
class GeneratorConfig:
    edge: int = 32
    in_channels: int = 2
    base_channels: int = 16
    depth: int = 3
    kernel: int = 3
    noise: bool = True

    def validate(self) -> None:
        if self.depth < 1:
            raise ConfigError("generator depth must be >= 1")
        if self.edge % (2 ** self.depth):
            raise ConfigError(f"edge {self.edge} not divisible by 2^{self.depth}")
        if self.in_channels != (2 if self.noise else 1):
            raise ConfigError("in_channels must be 2 with a noise channel, 1 without")
        if self.kernel % 2 == 0 or self.base_channels < 1:
            raise ConfigError("kernel must be odd and base_channels >= 1")


@dataclass
class DiscriminatorConfig:
    edge: int = 32
    in_channels: int = 2
    base_channels: int = 16
    layers: int = 3

    def validate(self) -> None:
        if self.layers < 1:
            raise ConfigError("discriminator needs at least one layer")
        if self.edge % (2 ** self.layers):
            raise ConfigError(f"edge {self.edge} not divisible by 2^{self.layers}")
        if self.in_channels != 2:
            raise ConfigError("discriminator input is (condition, candidate): 2 channels")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    lambda_l1: float = 100.0
    seed: int = 0
    generator_loss_mode: str = "non-saturating"
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    checkpoint_every: int = 1

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lambda_l1 < 0:
            raise ConfigError("lambda_l1 must be >= 0")
        if self.generator_loss_mode not in ("saturating", "non-saturating"):
            raise ConfigError(f"unknown generator loss mode {self.generator_loss_mode!r}")


def default_configs(edge: int, base_channels: int = 16) -> Tuple[GeneratorConfig, DiscriminatorConfig]:
    """Depth 3 at edge 32, depth 2 below."""
    depth = 3 if edge >= 32 else 2
    layers = 3 if edge >= 32 else 2
    return (GeneratorConfig(edge, base_channels=base_channels, depth=depth),
            DiscriminatorConfig(edge, base_channels=base_channels, layers=layers))


# ---------------------------------------------------------------------------
# layers and models


def _he_std(fan_in: float) -> float:
    return math.sqrt(2.0 / ((1 + LEAKY_SLOPE ** 2) * fan_in))


class Conv3d:
    def __init__(self, name: str, cin: int, cout: int, k: int, stride: int, padding: int, rng):
        self.stride, self.padding = stride, padding
        std = _he_std(cin * k ** 3)
        self.weight = Parameter(rng.normal(0, std, (cout, cin, k, k, k)), f"{name}.weight")
        self.bias = Parameter(np.zeros(cout), f"{name}.bias")

    def __call__(self, x: Node) -> Node:
        return ad.conv3d(x, self.weight, self.bias, self.stride, self.padding)

    def parameters(self) -> List[Parameter]:
        return [self.weight, self.bias]


class ConvTranspose3d:
    def __init__(self, name: str, cin: int, cout: int, k: int, stride: int, padding: int, rng):
        self.stride, self.padding = stride, padding
        std = _he_std(cin * k ** 3 / stride ** 3)
        self.weight = Parameter(rng.normal(0, std, (cin, cout, k, k, k)), f"{name}.weight")
        self.bias = Parameter(np.zeros(cout), f"{name}.bias")

    def __call__(self, x: Node) -> Node:
        return ad.conv_transpose3d(x, self.weight, self.bias, self.stride, self.padding)

    def parameters(self) -> List[Parameter]:
        return [self.weight, self.bias]


class Module:
    layers: List

    def parameters(self) -> List[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in state:
                raise CheckpointError(f"missing parameter {p.name}")
            value = np.asarray(state[p.name])
            if value.shape != p.shape:
                raise ShapeMismatchError(f"{p.name}: checkpoint shape {value.shape}, model {p.shape}")
            p.value = value.astype(ad.get_dtype())


class Generator(Module):
    """U-Net: stride-2 encoder, bottleneck, transposed-conv decoder with
    concatenated skips (the outermost skip is the input itself), tanh head."""

    def __init__(self, cfg: GeneratorConfig, rng: np.random.Generator, prefix: str = "G"):
        cfg.validate()
        self.cfg = cfg
        k, pad = cfg.kernel, cfg.kernel // 2
        widths = [cfg.base_channels * 2 ** i for i in range(cfg.depth)]
        self.encoder = []
        cin = cfg.in_channels
        for i, w in enumerate(widths):
            self.encoder.append(Conv3d(f"{prefix}.enc{i}", cin, w, k, 2, pad, rng))
            cin = w
        self.bottleneck = Conv3d(f"{prefix}.mid", cin, cin, k, 1, pad, rng)
        skips = [cfg.in_channels] + widths[:-1]
        self.decoder = []
        for i in reversed(range(cfg.depth)):
            out = widths[i - 1] if i > 0 else cfg.base_channels
            self.decoder.append(ConvTranspose3d(f"{prefix}.dec{i}", cin, out, 4, 2, 1, rng))
            cin = out + skips[i]
        self.head = Conv3d(f"{prefix}.out", cin, 1, k, 1, pad, rng)
        self.layers = self.encoder + [self.bottleneck] + self.decoder + [self.head]

    @property
    def edge(self) -> int:
        return self.cfg.edge

    def __call__(self, condition, noise=None) -> Node:
        x = condition if isinstance(condition, Node) else ad.tensor(condition)
        if self.cfg.noise:
            if noise is None:
                raise ShapeMismatchError("generator expects a noise channel")
            z = noise if isinstance(noise, Node) else ad.tensor(noise)
            x = ad.concat_channels(x, z)
        if x.shape[1] != self.cfg.in_channels or x.shape[2:] != (self.edge,) * 3:
            raise ShapeMismatchError(f"generator input {x.shape} does not match edge {self.edge}")
        skips = [x]
        h = x
        for conv in self.encoder:
            h = ad.leaky_relu(conv(h), LEAKY_SLOPE)
            skips.append(h)
        h = ad.leaky_relu(self.bottleneck(h), LEAKY_SLOPE)
        for up, skip in zip(self.decoder, reversed(skips[:-1])):
            h = ad.concat_channels(ad.leaky_relu(up(h), LEAKY_SLOPE), skip)
        return ad.tanh(self.head(h))

    def sample_noise(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, (n, 1) + (self.edge,) * 3).astype(ad.get_dtype())

    def predict(self, condition: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Forward pass without recording a graph. ``condition`` is [N, 1, e, e, e]."""
        noise = self.sample_noise(rng, condition.shape[0]) if self.cfg.noise else None
        with ad.no_grad():
            return self(condition.astype(ad.get_dtype()), noise).value


class Discriminator(Module):
    """Patch discriminator over the channel-concatenated (condition, candidate)."""

    def __init__(self, cfg: DiscriminatorConfig, rng: np.random.Generator, prefix: str = "D"):
        cfg.validate()
        self.cfg = cfg
        self.convs = []
        cin = cfg.in_channels
        for i in range(cfg.layers):
            w = cfg.base_channels * 2 ** i
            self.convs.append(Conv3d(f"{prefix}.conv{i}", cin, w, 3, 2, 1, rng))
            cin = w
        self.head = Conv3d(f"{prefix}.out", cin, 1, 3, 1, 1, rng)
        self.layers = self.convs + [self.head]

    def __call__(self, condition, candidate) -> Node:
        y = condition if isinstance(condition, Node) else ad.tensor(condition)
        c = candidate if isinstance(candidate, Node) else ad.tensor(candidate)
        h = ad.concat_channels(y, c)
        for conv in self.convs:
            h = ad.leaky_relu(conv(h), LEAKY_SLOPE)
        return ad.sigmoid(self.head(h))


def build_generator(cfg: GeneratorConfig, seed: int = 0) -> Generator:
    return Generator(cfg, np.random.default_rng([seed, 1]))


def build_discriminator(cfg: DiscriminatorConfig, seed: int = 0) -> Discriminator:
    return Discriminator(cfg, np.random.default_rng([seed, 2]))


# ---------------------------------------------------------------------------
# losses


def _node(x) -> Node:
    return x if isinstance(x, Node) else ad.tensor(x)


def discriminator_loss(d_real, d_fake, eps: float = LOSS_EPS) -> Node:
    """-mean ln D(x|y) - mean ln(1 - D(G(z|y)|y))."""
    return ad.bce_loss(_node(d_real), 1.0, eps) + ad.bce_loss(_node(d_fake), 0.0, eps)


def generator_loss(d_fake, g_out, target, lambda_l1: float = 100.0, mode: str = "non-saturating",
                   eps: float = LOSS_EPS) -> Node:
    d_fake = _node(d_fake)
    if mode == "non-saturating":
        adv = ad.bce_loss(d_fake, 1.0, eps)
    elif mode == "saturating":
        adv = -ad.bce_loss(d_fake, 0.0, eps)
    else:
        raise ConfigError(f"unknown generator loss mode {mode!r}")
    if lambda_l1 == 0:
        return adv
    return adv + ad.l1_loss(_node(g_out), target) * lambda_l1


# ---------------------------------------------------------------------------
# training


@dataclass
class Checkpoint:
    gen_cfg: GeneratorConfig
    disc_cfg: DiscriminatorConfig
    train_cfg: TrainConfig
    epoch: int
    gen_state: Dict[str, np.ndarray]
    disc_state: Dict[str, np.ndarray]
    opt_g: dict
    opt_d: dict
    rng_state: dict
    history: List[Tuple[int, float, float, float]] = field(default_factory=list)
    version: int = 1


class Trainer:
    """Owns both models, their optimizers and the training RNG."""

    def __init__(self, gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig, train_cfg: TrainConfig):
        train_cfg.validate()
        if gen_cfg.edge != disc_cfg.edge:
            raise ConfigError("generator and discriminator edges differ")
        self.gen_cfg, self.disc_cfg, self.cfg = gen_cfg, disc_cfg, train_cfg
        self.gen = build_generator(gen_cfg, train_cfg.seed)
        self.disc = build_discriminator(disc_cfg, train_cfg.seed)
        self.opt_g = ad.Adam(self.gen.parameters(), train_cfg.lr, train_cfg.beta1, train_cfg.beta2)
        self.opt_d = ad.Adam(self.disc.parameters(), train_cfg.lr, train_cfg.beta1, train_cfg.beta2)
        self.rng = np.random.default_rng(train_cfg.seed)
        self.epoch = 0
        self.history: List[Tuple[int, float, float, float]] = []

    def train_step(self, condition: np.ndarray, target: np.ndarray) -> Tuple[float, float, float]:
        """One discriminator update then one generator update.

        Returns (d_loss, g_loss, g_l1)."""
        if condition.shape != target.shape or condition.shape[0] == 0:
            raise ShapeMismatchError(f"batch shapes {condition.shape} vs {target.shape}")
        dt = ad.get_dtype()
        cond = ad.tensor(condition.astype(dt))
        tgt = target.astype(dt)
        n = condition.shape[0]

        fake = self.gen(cond, self.gen.sample_noise(self.rng, n)).detach()
        self.opt_d.zero_grad()
        d_loss = discriminator_loss(self.disc(cond, tgt), self.disc(cond, fake))
        d_loss.backward()
        self.opt_d.step()

        self.opt_g.zero_grad()
        fake = self.gen(cond, self.gen.sample_noise(self.rng, n))
        g_loss = generator_loss(self.disc(cond, fake), fake, tgt, self.cfg.lambda_l1,
                                self.cfg.generator_loss_mode)
        g_loss.backward()
        self.opt_g.step()
        self.opt_d.zero_grad()

        l1 = float(np.mean(np.abs(fake.value - tgt)))
        losses = (d_loss.item(), g_loss.item(), l1)
        if not all(math.isfinite(x) for x in losses):
            raise DivergenceError(f"non-finite loss at epoch {self.epoch}: {losses}")
        return losses

    def run_epoch(self, cond: np.ndarray, target: np.ndarray) -> Tuple[int, float, float, float]:
        n = cond.shape[0]
        b = self.cfg.batch_size
        perm = self.rng.permutation(n)
        totals = np.zeros(3)
        steps = steps_per_epoch(n, b)
        for s in range(steps):
            idx = np.sort(perm[s * b:(s + 1) * b])
            totals += self.train_step(cond[idx], target[idx])
        self.epoch += 1
        row = (self.epoch, *(float(x) for x in totals / steps))
        self.history.append(row)
        return row

    # -- checkpointing --------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        def opt_state(opt):
            return {"t": opt.t, "m": {k: m for k, (m, _) in opt.state.items()},
                    "v": {k: v for k, (_, v) in opt.state.items()}}

        return Checkpoint(self.gen_cfg, self.disc_cfg, self.cfg, self.epoch, self.gen.state_dict(),
                          self.disc.state_dict(), opt_state(self.opt_g), opt_state(self.opt_d),
                          self.rng.bit_generator.state, list(self.history))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, train_cfg: Optional[TrainConfig] = None) -> "Trainer":
        t = cls(ckpt.gen_cfg, ckpt.disc_cfg, train_cfg or ckpt.train_cfg)
        t.gen.load_state_dict(ckpt.gen_state)
        t.disc.load_state_dict(ckpt.disc_state)
        for opt, st in ((t.opt_g, ckpt.opt_g), (t.opt_d, ckpt.opt_d)):
            opt.t = int(st["t"])
            opt.state = {k: (st["m"][k].astype(ad.get_dtype()), st["v"][k].astype(ad.get_dtype())) for k in st["m"]}
        t.rng.bit_generator.state = ckpt.rng_state
        t.epoch = ckpt.epoch
        t.history = [tuple(r) for r in ckpt.history]
        return t


def steps_per_epoch(n_pairs: int, batch_size: int) -> int:
    return -(-n_pairs // batch_size)


def _as_arrays(pairs) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(pairs, tuple) and len(pairs) == 2 and isinstance(pairs[0], np.ndarray):
        return pairs
    return pairs_to_arrays(pairs)


def format_loss_log(history) -> str:
    return "".join(f"{e}, {d:.9g}, {g:.9g}, {l1:.9g}\n" for e, d, g, l1 in history)


def train(pairs, train_cfg: TrainConfig, gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig,
          checkpoint_dir=None, resume=None) -> Checkpoint:
    """Train for ``train_cfg.epochs`` epochs, writing checkpoints and ``loss.log``.

    ``pairs`` is either a list of (condition, target) VoxelBlocks or a tuple of
    stacked arrays. ``resume`` is a checkpoint path or object; training then
    continues from its epoch with ``train_cfg`` governing the remaining run.
    """
    cond, target = _as_arrays(pairs)
    if cond.shape[0] == 0:
        raise CTCGANError("training needs at least one pair")
    if resume is not None:
        ckpt = load_checkpoint(resume) if not isinstance(resume, Checkpoint) else resume
        trainer = Trainer.from_checkpoint(ckpt, train_cfg)
    else:
        trainer = Trainer(gen_cfg, disc_cfg, train_cfg)
    if cond.shape[2:] != (trainer.gen_cfg.edge,) * 3:
        raise ShapeMismatchError(f"pairs have edge {cond.shape[2]}, model edge {trainer.gen_cfg.edge}")
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)
    while trainer.epoch < train_cfg.epochs:
        row = trainer.run_epoch(cond, target)
        log.info("epoch %d d_loss %.5f g_loss %.5f g_l1 %.5f", *row)
        last = trainer.epoch == train_cfg.epochs
        if ckdir is not None and (last or trainer.epoch % train_cfg.checkpoint_every == 0):
            ck = trainer.checkpoint()
            save_checkpoint(ckdir / f"epoch{trainer.epoch:04d}.ckpt", ck)
            save_checkpoint(ckdir / "latest.ckpt", ck)
            (ckdir / "loss.log").write_text(format_loss_log(trainer.history))
    final = trainer.checkpoint()
    if ckdir is not None:
        (ckdir / "loss.log").write_text(format_loss_log(trainer.history))
    return final


# ---------------------------------------------------------------------------
# checkpoint files: "CKPT", u32 version, u32-length JSON header, u32 tensor
# count, then per tensor: u16 name length, name, u8 ndim, u32 dims, f32 LE data

CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    tensors: List[Tuple[str, np.ndarray]] = []
    tensors += sorted(ckpt.gen_state.items())
    tensors += sorted(ckpt.disc_state.items())
    for tag, st in (("opt_g", ckpt.opt_g), ("opt_d", ckpt.opt_d)):
        tensors += [(f"{tag}.m/{k}", v) for k, v in sorted(st["m"].items())]
        tensors += [(f"{tag}.v/{k}", v) for k, v in sorted(st["v"].items())]
    header = {
        "gen_cfg": asdict(ckpt.gen_cfg),
        "disc_cfg": asdict(ckpt.disc_cfg),
        "train_cfg": asdict(ckpt.train_cfg),
        "epoch": ckpt.epoch,
        "opt_t": {"opt_g": ckpt.opt_g["t"], "opt_d": ckpt.opt_d["t"]},
        "rng_state": ckpt.rng_state,
        "history": [list(r) for r in ckpt.history],
        "gen_params": sorted(ckpt.gen_state),
        "disc_params": sorted(ckpt.disc_state),
    }
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", ckpt.version))
    blob = json.dumps(header, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        raw = name.encode()
        arr = np.asarray(arr)
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    try:
        Path(path).write_bytes(buf.getvalue())
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack_from("<I", raw, 8)
        header = json.loads(raw[12:12 + hlen])
        pos = 12 + hlen
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            size = int(np.prod(shape))
            if pos + 4 * size > len(raw):
                raise CheckpointError(f"{path}: truncated tensor {name}")
            tensors[name] = np.frombuffer(raw, "<f4", size, pos).reshape(shape).astype(np.float32)
            pos += 4 * size
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt checkpoint ({e})") from e

    def opt(tag):
        pre_m, pre_v = f"{tag}.m/", f"{tag}.v/"
        return {
            "t": header["opt_t"][tag],
            "m": {k[len(pre_m):]: v for k, v in tensors.items() if k.startswith(pre_m)},
            "v": {k[len(pre_v):]: v for k, v in tensors.items() if k.startswith(pre_v)},
        }

    return Checkpoint(
        GeneratorConfig(**header["gen_cfg"]),
        DiscriminatorConfig(**header["disc_cfg"]),
        TrainConfig(**header["train_cfg"]),
        header["epoch"],
        {k: tensors[k] for k in header["gen_params"]},
        {k: tensors[k] for k in header["disc_params"]},
        opt("opt_g"),
        opt("opt_d"),
        header["rng_state"],
        [tuple(r) for r in header["history"]],
        version,
    )


def generator_from_checkpoint(ckpt) -> Generator:
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    gen = build_generator(ckpt.gen_cfg, ckpt.train_cfg.seed)
    gen.load_state_dict(ckpt.gen_state)
    return gen


# ---------------------------------------------------------------------------
# inference


def infer_block(gen, condition: VoxelBlock, seed) -> VoxelBlock:
    """Generate one block; deterministic given ``seed``."""
    e = gen.edge
    if condition.data.shape != (e, e, e):
        raise ShapeMismatchError(f"condition block {condition.data.shape} does not match edge {e}")
    out = gen.predict(condition.data[None, None], np.random.default_rng(seed))
    return VoxelBlock(out[0, 0].astype(np.float64), condition.origin)


def infer_volume(gen, v: Volume, params: Optional[PreprocessParams] = None, bounds=None,
                 kind=ConditionKind.AUTOENCODER, seed: int = 0, batch_size: int = 8,
                 peak: float = DEFAULT_PEAK) -> Volume:
    """Preprocess, partition, condition, generate, stitch, and undo preprocessing.

    ``gen`` is anything with an ``edge`` attribute and a
    ``predict(condition[N, 1, e, e, e], rng)`` method.  Without recorded
    ``params``/``bounds`` the volume's own statistics are used.
    """
    if params is None or bounds is None:
        norm, params, bounds = preprocess(v)
    else:
        norm = apply_preprocess(v, params, bounds)
    grid, blocks = partition(norm, gen.edge, -1.0)
    conds = np.stack([make_condition(b, kind, (seed, 0, 0, i), peak).data for i, b in enumerate(blocks)])
    rng = np.random.default_rng([seed, 7])
    outputs = []
    for s in range(0, len(blocks), batch_size):
        outputs.append(np.asarray(gen.predict(conds[s:s + batch_size, None], rng))[:, 0])
    generated = np.concatenate(outputs).astype(np.float64)
    out_blocks = [VoxelBlock(g, b.origin) for g, b in zip(generated, blocks)]
    return denormalize_and_unequalize(stitch(grid, out_blocks, v.spacing), params, bounds)
