"""The four translation networks: one encoder and one decoder per domain.

Encoders run a 7x7 stride-1 conv, two stride-2 convs, then residual
blocks; decoders mirror that back up to image size, ending in tanh so all
pixels land in [-1, 1]. Parameters are held in named ParamGroups so
cloning, freezing, checkpointing, and the tied-weights ablation all work
by manipulating the name -> tensor map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamGroup, Tensor


@dataclass
class NetConfig:
    image_channels: int = 3
    image_size: int = 32
    base_width: int = 32
    n_residual_blocks: int = 1

    def __post_init__(self):
        if self.image_size % 4 != 0:
            raise ValueError(f"image_size {self.image_size} must be divisible by 4")
        if self.n_residual_blocks < 1:
            raise ValueError("n_residual_blocks must be >= 1")
        if self.image_channels < 1 or self.base_width < 1:
            raise ValueError("image_channels and base_width must be positive")

    @property
    def latent_channels(self):
        return 4 * self.base_width

    def latent_shape(self):
        return (self.latent_channels, self.image_size // 4, self.image_size // 4)


@dataclass
class ShareSpec:
    """Weight tying between domains (ablation only). ``tied`` shares the
    encoder-top and decoder-bottom residual blocks."""

    mode: str = "none"

    def __post_init__(self):
        if self.mode not in ("none", "tied"):
            raise ValueError(f"share mode must be 'none' or 'tied', got {self.mode!r}")


@dataclass
class AutoencoderParams:
    encoder: ParamGroup
    decoder: ParamGroup
    config: NetConfig
    domain_tag: str = "B"


def _init_conv(group, prefix, rng, c_out, c_in, kh, kw, transpose=False):
    fan_in = c_in * kh * kw
    shape = (c_in, c_out, kh, kw) if transpose else (c_out, c_in, kh, kw)
    w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    group.add(f"{prefix}.w", w.astype(np.float32))
    group.add(f"{prefix}.b", np.zeros(c_out, np.float32))


def _init_bn(group, prefix, c):
    group.add(f"{prefix}.g", np.ones(c, np.float32))
    group.add(f"{prefix}.b", np.zeros(c, np.float32))
    group.add_buffer(f"{prefix}.rm", np.zeros(c, np.float32))
    group.add_buffer(f"{prefix}.rv", np.ones(c, np.float32))


def _init_resblock(group, prefix, rng, c):
    _init_conv(group, f"{prefix}.c1", rng, c, c, 3, 3)
    _init_bn(group, f"{prefix}.bn1", c)
    _init_conv(group, f"{prefix}.c2", rng, c, c, 3, 3)
    _init_bn(group, f"{prefix}.bn2", c)


def build_autoencoder(config, rng_seed, domain_tag="B"):
    """Freshly initialized autoencoder; same seed gives bitwise-equal params."""
    rng = np.random.Generator(np.random.PCG64(rng_seed))
    w = config.base_width
    enc = ParamGroup(f"E_{domain_tag}")
    _init_conv(enc, "c1", rng, w, config.image_channels, 7, 7)
    _init_bn(enc, "c1.bn", w)
    _init_conv(enc, "c2", rng, 2 * w, w, 4, 4)
    _init_bn(enc, "c2.bn", 2 * w)
    _init_conv(enc, "c3", rng, 4 * w, 2 * w, 4, 4)
    _init_bn(enc, "c3.bn", 4 * w)
    for i in range(config.n_residual_blocks):
        _init_resblock(enc, f"res{i}", rng, 4 * w)

    dec = ParamGroup(f"D_{domain_tag}")
    for i in range(config.n_residual_blocks):
        _init_resblock(dec, f"res{i}", rng, 4 * w)
    _init_conv(dec, "u1", rng, 2 * w, 4 * w, 4, 4, transpose=True)
    _init_bn(dec, "u1.bn", 2 * w)
    _init_conv(dec, "u2", rng, w, 2 * w, 4, 4, transpose=True)
    _init_bn(dec, "u2.bn", w)
    _init_conv(dec, "c7", rng, config.image_channels, w, 7, 7)
    return AutoencoderParams(enc, dec, config, domain_tag)


def parameter_count(config):
    """Closed-form learnable parameter count of one autoencoder."""
    w, c = config.base_width, config.image_channels

    def conv(co, ci, k):
        return co * ci * k * k + co

    def bn(ch):
        return 2 * ch

    def res(ch):
        return 2 * conv(ch, ch, 3) + 2 * bn(ch)

    enc = conv(w, c, 7) + bn(w) + conv(2 * w, w, 4) + bn(2 * w) + conv(4 * w, 2 * w, 4) + bn(4 * w)
    enc += config.n_residual_blocks * res(4 * w)
    dec = config.n_residual_blocks * res(4 * w)
    dec += conv(2 * w, 4 * w, 4) + bn(2 * w) + conv(w, 2 * w, 4) + bn(w) + conv(c, w, 7)
    return enc + dec


# ---------------------------------------------------------------------------
# forward passes (parameters looked up by name so tying/cloning just work)


def _cbr(g, prefix, x, stride, padding, mode):
    h = ad.conv2d(x, g.params[f"{prefix}.w"], g.params[f"{prefix}.b"], stride, padding)
    h = ad.batch_norm(h, g.params[f"{prefix}.bn.g"], g.params[f"{prefix}.bn.b"], mode,
                      g.buffers[f"{prefix}.bn.rm"], g.buffers[f"{prefix}.bn.rv"])
    return ad.relu(h)


def _resblock(g, prefix, x, mode):
    h = ad.conv2d(x, g.params[f"{prefix}.c1.w"], g.params[f"{prefix}.c1.b"], 1, 1)
    h = ad.batch_norm(h, g.params[f"{prefix}.bn1.g"], g.params[f"{prefix}.bn1.b"], mode,
                      g.buffers[f"{prefix}.bn1.rm"], g.buffers[f"{prefix}.bn1.rv"])
    h = ad.relu(h)
    h = ad.conv2d(h, g.params[f"{prefix}.c2.w"], g.params[f"{prefix}.c2.b"], 1, 1)
    h = ad.batch_norm(h, g.params[f"{prefix}.bn2.g"], g.params[f"{prefix}.bn2.b"], mode,
                      g.buffers[f"{prefix}.bn2.rm"], g.buffers[f"{prefix}.bn2.rv"])
    return ad.add(h, x)


def _batched(x):
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.data.ndim == 3:
        return Tensor(t.data[None]) if not t.requires_grad else _lift(t), True
    return t, False


def _lift(t):
    # rank-3 -> rank-4 view that still backpropagates to the original
    def back(g):
        ad._accum(t, g[0])

    return ad._result(t.data[None], (t,), "unsqueeze", back)


def _drop(t):
    def back(g):
        ad._accum(t, g[None])

    return ad._result(t.data[0], (t,), "squeeze", back)


def encode(params, image, mode="train", collect_stages=None):
    """Image [C,H,W] or [N,C,H,W] -> latent code. ``collect_stages`` (a list)
    receives the three conv-stage activations when provided."""
    x, squeezed = _batched(image)
    g = params.encoder
    h = _cbr(g, "c1", x, 1, 3, mode)
    if collect_stages is not None:
        collect_stages.append(h)
    h = _cbr(g, "c2", h, 2, 1, mode)
    if collect_stages is not None:
        collect_stages.append(h)
    h = _cbr(g, "c3", h, 2, 1, mode)
    if collect_stages is not None:
        collect_stages.append(h)
    for i in range(params.config.n_residual_blocks):
        h = _resblock(g, f"res{i}", h, mode)
    return _drop(h) if squeezed else h


def decode(params, code, mode="train"):
    """Latent code -> image in [-1, 1] (tanh output)."""
    x, squeezed = _batched(code)
    g = params.decoder
    h = x
    for i in range(params.config.n_residual_blocks):
        h = _resblock(g, f"res{i}", h, mode)
    h = ad.conv_transpose2d(h, g.params["u1.w"], g.params["u1.b"], 2, 1)
    h = ad.batch_norm(h, g.params["u1.bn.g"], g.params["u1.bn.b"], mode,
                      g.buffers["u1.bn.rm"], g.buffers["u1.bn.rv"])
    h = ad.relu(h)
    h = ad.conv_transpose2d(h, g.params["u2.w"], g.params["u2.b"], 2, 1)
    h = ad.batch_norm(h, g.params["u2.bn.g"], g.params["u2.bn.b"], mode,
                      g.buffers["u2.bn.rm"], g.buffers["u2.bn.rv"])
    h = ad.relu(h)
    h = ad.conv2d(h, g.params["c7.w"], g.params["c7.b"], 1, 3)
    h = ad.tanh(h)
    return _drop(h) if squeezed else h


def reconstruct(params, image, mode="train"):
    return decode(params, encode(params, image, mode), mode)


def clone_params(src, domain_tag=None):
    """Deep copy: parameters, batch-norm stats, config. Mutating the clone
    never touches the source."""
    tag = src.domain_tag if domain_tag is None else domain_tag
    return AutoencoderParams(
        encoder=src.encoder.clone(f"E_{tag}"),
        decoder=src.decoder.clone(f"D_{tag}"),
        config=src.config,
        domain_tag=tag,
    )


def apply_share_spec(ae_a, ae_b, spec):
    """In tied mode, point ae_a's encoder-top / decoder-bottom residual block
    entries at ae_b's tensors, so both domains train the same physical block."""
    if spec.mode == "none":
        return ae_a, ae_b
    if ae_a.config != ae_b.config:
        raise ValueError("share spec requires identical NetConfig on both sides")
    last = ae_a.config.n_residual_blocks - 1
    _tie_block(ae_a.encoder, ae_b.encoder, f"res{last}")
    _tie_block(ae_a.decoder, ae_b.decoder, "res0")
    return ae_a, ae_b


def _tie_block(dst_group, src_group, prefix):
    for name, t in src_group.params.items():
        if name.startswith(prefix + "."):
            if dst_group not in t._owners:
                t._owners = t._owners + (dst_group,)
            dst_group.params[name] = t
    for name, b in src_group.buffers.items():
        if name.startswith(prefix + "."):
            dst_group.buffers[name] = b


def shared_param_ids(ae_a, ae_b):
    """Identities of parameter tensors physically shared between the domains."""
    ids_b = {id(t) for t in ae_b.encoder.params.values()} | {id(t) for t in ae_b.decoder.params.values()}
    out = set()
    for t in list(ae_a.encoder.params.values()) + list(ae_a.decoder.params.values()):
        if id(t) in ids_b:
            out.add(id(t))
    return out
