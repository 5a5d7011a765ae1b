"""Super-resolution stage: 4x generator, discriminator, losses, training.

The generator is the classic residual-trunk design: a wide k9 head, B
identical residual blocks, a post-trunk conv with global skip, two learned
sub-pixel (pixel-shuffle) x2 stages, and a k9 tail to RGB. The
discriminator is a strided k3 conv stack from 64 to 512 channels with
LeakyReLU(0.2) and a two-layer dense head emitting a single logit.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import nn as N
from . import tensor as T
from .checkpoint import limbs_to_seed, load_tensors, save_tensors, seed_to_limbs
from .data import DatasetError
from .optim import Adam
from .rng import Rng
from .tensor import Tensor


@dataclass
class SrConfig:
    b_blocks: int = 4           # residual trunk depth (16 at full scale)
    base_channels: int = 64
    hr_size: int = 32
    scale: int = 4
    batch_size: int = 16
    iterations: int = 4000
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adversarial_weight: float = 1e-3
    checkpoint_every: int = 1000

    def validate(self):
        if self.b_blocks < 1 or self.base_channels < 8:
            raise ValueError("generator too small to be meaningful")
        if self.scale != 4:
            raise ValueError("only the x4 two-stage sub-pixel generator is supported")
        if self.hr_size % 16:
            raise ValueError(f"hr_size {self.hr_size} must be divisible by 16")
        return self


class SrGenerator(N.Module):
    """Residual-trunk generator upscaling (N, 3, H, W) to (N, 3, 4H, 4W)."""

    def __init__(self, rng, b_blocks=4, base=64):
        super().__init__()
        self.head = N.Conv2d(rng, 3, base, 9, 1)
        self.head_act = N.PReLU(base)
        self.blocks = N.ModuleList([N.ResidualBlock(rng, base) for _ in range(b_blocks)])
        self.post = N.Conv2d(rng, base, base, 3, 1, bias=False)
        self.post_bn = N.BatchNorm2d(base)
        self.up1 = N.PixelShuffleBlock(rng, base, 2)
        self.up2 = N.PixelShuffleBlock(rng, base, 2)
        self.tail = N.Conv2d(rng, base, 3, 9, 1)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 3:
            raise T.DimensionError(f"generator expects (N, 3, H, W), got {x.shape}")
        if x.shape[2] < 8 or x.shape[3] < 8:
            raise T.DimensionError(
                f"input {x.shape[2]}x{x.shape[3]} too small, need at least 8x8"
            )
        h = self.head_act(self.head(x))
        skip = h
        for blk in self.blocks:
            h = blk(h)
        h = self.post_bn(self.post(h)) + skip
        h = self.up2(self.up1(h))
        y = self.tail(h)
        if not self.training:
            y = T.clamp(y, 0.0, 1.0)  # valid pixel range at inference only
        return y


class SrDiscriminator(N.Module):
    """Conv stack 64 -> 512 with alternating stride 2, dense head to one logit."""

    def __init__(self, rng, hr_size=32, base=64):
        super().__init__()
        if hr_size % 16:
            raise ValueError(f"hr_size {hr_size} must be divisible by 16")
        self.first = N.Conv2d(rng, 3, base, 3, 1)
        plan = [(base, 2), (base * 2, 1), (base * 2, 2), (base * 4, 1),
                (base * 4, 2), (base * 8, 1), (base * 8, 2)]
        convs, c_in = [], base
        for c_out, s in plan:
            convs.append(N.ConvBnAct(rng, c_in, c_out, 3, s, act="leaky"))
            c_in = c_out
        self.stack = N.ModuleList(convs)
        feat = base * 8 * (hr_size // 16) ** 2
        self.dense = N.Dense(rng, feat, 1024, act="leaky")
        self.out = N.Linear(rng, 1024, 1)

    def forward(self, x):
        h = T.leaky_relu(self.first(x), 0.2)
        for conv in self.stack:
            h = conv(h)
        h = h.reshape(h.shape[0], -1)
        return self.out(self.dense(h)).reshape(h.shape[0])


def sr_losses(sr, hr, d_logits_real=None, d_logits_fake=None, adversarial_weight=1e-3):
    """Pixel-MSE content loss plus standard adversarial BCE terms."""
    if sr.shape != hr.shape:
        raise T.DimensionError(f"sr shape {sr.shape} != hr shape {hr.shape}")
    diff = sr - (hr if isinstance(hr, Tensor) else Tensor(hr))
    out = {"content": (diff * diff).mean()}
    if d_logits_fake is not None:
        out["adversarial_g"] = T.bce_with_logits(
            d_logits_fake, np.ones(d_logits_fake.shape, np.float32))
        out["generator_total"] = out["content"] + out["adversarial_g"] * adversarial_weight
    else:
        out["generator_total"] = out["content"]
    if d_logits_real is not None and d_logits_fake is not None:
        out["d_loss"] = (
            T.bce_with_logits(d_logits_real, np.ones(d_logits_real.shape, np.float32))
            + T.bce_with_logits(d_logits_fake, np.zeros(d_logits_fake.shape, np.float32))
        )
    return out


@dataclass
class SrTrainState:
    generator: SrGenerator
    discriminator: SrDiscriminator
    opt_g: Adam
    opt_d: Adam
    iteration: int
    seed: int
    content_history: list = field(default_factory=list)

    def state_dict(self):
        out = {}
        for k, v in self.generator.state_dict().items():
            out["gen." + k] = v
        for k, v in self.discriminator.state_dict().items():
            out["disc." + k] = v
        out.update(self.opt_g.state_tensors("adam_g"))
        out.update(self.opt_d.state_tensors("adam_d"))
        out["iteration"] = np.asarray([float(self.iteration)], np.float32)
        out["seed"] = seed_to_limbs(self.seed)
        return out

    def load_state_dict(self, state):
        self.generator.load_state_dict(
            {k[len("gen."):]: v for k, v in state.items() if k.startswith("gen.")})
        self.discriminator.load_state_dict(
            {k[len("disc."):]: v for k, v in state.items() if k.startswith("disc.")})
        self.opt_g.load_state_tensors(state, "adam_g")
        self.opt_d.load_state_tensors(state, "adam_d")
        self.opt_g.t = int(state["adam_g.t"][0])
        self.opt_d.t = int(state["adam_d.t"][0])
        self.iteration = int(state["iteration"][0])
        self.seed = limbs_to_seed(state["seed"])

    def save(self, path):
        save_tensors(path, self.state_dict())

    def load(self, path):
        self.load_state_dict(load_tensors(path))


def make_sr_state(config, seed=0):
    config.validate()
    init = Rng(seed)
    gen = SrGenerator(init.child("sr-generator"), config.b_blocks, config.base_channels)
    disc = SrDiscriminator(init.child("sr-discriminator"), config.hr_size, config.base_channels)
    opt_g = Adam(gen.parameters(), config.lr, config.beta1, config.beta2)
    opt_d = Adam(disc.parameters(), config.lr, config.beta1, config.beta2)
    return SrTrainState(gen, disc, opt_g, opt_d, 0, seed)


def sr_train(pairs, config, seed=0, out_dir=None, quiet=True):
    """Alternating discriminator/generator training over (LR, HR) pairs.

    Deterministic under ``seed``: batch composition at iteration i depends
    only on (seed, i). Checkpoints are written every
    ``config.checkpoint_every`` iterations when ``out_dir`` is given.
    """
    config.validate()
    if not pairs:
        raise DatasetError("sr_train: empty dataset")
    scale = config.scale
    for i, (lr_img, hr_img) in enumerate(pairs):
        if (hr_img.shape[1] != lr_img.shape[1] * scale
                or hr_img.shape[2] != lr_img.shape[2] * scale):
            raise DatasetError(
                f"pair {i}: HR dims {hr_img.shape[1:]} are not {scale}x LR dims {lr_img.shape[1:]}"
            )
    state = make_sr_state(config, seed)
    gen, disc = state.generator, state.discriminator
    root = Rng(seed).child("sr-train")
    n = len(pairs)
    bs = min(config.batch_size, n)
    adversarial = config.adversarial_weight > 0.0

    for it in range(config.iterations):
        rng = root.child("iter", it)
        idxs = rng.integers(0, n, bs)
        lr_batch = Tensor(np.stack([pairs[int(j)][0] for j in idxs]))
        hr_batch = Tensor(np.stack([pairs[int(j)][1] for j in idxs]))

        gen.train()
        sr = gen(lr_batch)
        if adversarial:
            disc.train()
            d_real = disc(hr_batch)
            d_fake_det = disc(sr.detach())
            d_loss = sr_losses(sr.detach(), hr_batch, d_real, d_fake_det)["d_loss"]
            state.opt_d.zero_grad()
            gen.zero_grad()
            d_loss.backward()
            state.opt_d.step()

            d_fake = disc(sr)
            losses = sr_losses(sr, hr_batch, None, d_fake, config.adversarial_weight)
            state.opt_g.zero_grad()
            state.opt_d.zero_grad()
            losses["generator_total"].backward()
            state.opt_g.step()
        else:
            # with zero adversarial weight the discriminator cannot influence
            # the generator, so its updates are skipped
            losses = sr_losses(sr, hr_batch)
            state.opt_g.zero_grad()
            losses["generator_total"].backward()
            state.opt_g.step()

        state.iteration = it + 1
        state.content_history.append(losses["content"].item())
        if not quiet and (it % 100 == 0 or it + 1 == config.iterations):
            print(f"iter {it:5d} content {state.content_history[-1]:.6f}")
        if out_dir and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            os.makedirs(out_dir, exist_ok=True)
            state.save(os.path.join(out_dir, f"sr_{it + 1:06d}.b2bd"))

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        state.save(os.path.join(out_dir, "sr_final.b2bd"))
    return state


def sr_infer(gen, image):
    """Upscale one (3, H, W) image by 4x, clamped to [0, 1]."""
    gen.eval()
    with T.no_grad():
        out = gen(Tensor(image[None]))
    return out.data[0]
