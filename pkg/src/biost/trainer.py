"""Two-phase training: pretrain domain B's autoencoder, then clone it for
domain A and jointly optimize the full objective with per-term detach masks.

Everything is driven by one seed. Subsystem generators are derived by
labeled hashing, draw only 64-bit values, and serialize to the 32-byte
PCG64 state, which makes checkpoint resume bitwise-exact.
"""

from __future__ import annotations

import hashlib
import os
import struct
from collections import deque
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import networks as nets
from . import objectives as obj
from .autodiff import Tensor
from .data import FormatError
from .networks import NetConfig, ShareSpec
from .objectives import CycleToggles, LossWeights


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


CHECKPOINT_MAGIC = b"BIOSTCKP"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    seed: int = 0
    phase1_steps: int = 2000
    phase2_steps: int = 2000
    batch_size_b: int = 16
    copies_of_x_per_batch: int = 16
    learning_rate: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_rotation_degrees: float = 10.0
    max_shift_pixels: int = 2
    toggles: CycleToggles = field(default_factory=CycleToggles)
    share: ShareSpec = field(default_factory=ShareSpec)
    weights: LossWeights = field(default_factory=LossWeights)
    net: NetConfig = field(default_factory=NetConfig)

    def __post_init__(self):
        if self.phase1_steps <= 0 or self.phase2_steps <= 0:
            raise ValueError("step counts must be positive")
        if self.batch_size_b < 1 or self.copies_of_x_per_batch < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.max_rotation_degrees < 0 or self.max_shift_pixels < 0:
            raise ValueError("augmentation bounds must be nonnegative")
        self.weights.validate()

    def canonical_text(self):
        """Stable key=value rendering used for the checkpoint config hash."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if hasattr(v, "__dataclass_fields__"):
                for sub in fields(v):
                    lines.append(f"{f.name}.{sub.name}={getattr(v, sub.name)!r}")
            else:
                lines.append(f"{f.name}={v!r}")
        return "\n".join(sorted(lines)) + "\n"

    def config_hash(self):
        return hashlib.sha256(self.canonical_text().encode()).digest()


def derive_seed(seed, label):
    h = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def derive_rng(seed, label):
    return np.random.Generator(np.random.PCG64(derive_seed(seed, label)))


def spawn_rng(rng):
    """Child generator seeded from the parent stream (one 64-bit draw)."""
    return np.random.Generator(np.random.PCG64(int(rng.integers(0, 2**63, dtype=np.int64))))


def rng_state_bytes(rng):
    st = rng.bit_generator.state
    if st["has_uint32"]:
        raise ad.ContractError("rng holds a cached 32-bit draw; state is not 32 bytes")
    return st["state"]["state"].to_bytes(16, "little") + st["state"]["inc"].to_bytes(16, "little")


def rng_from_state_bytes(raw):
    if len(raw) != 32:
        raise FormatError(f"rng state must be 32 bytes, got {len(raw)}")
    bg = np.random.PCG64()
    bg.state = {
        "bit_generator": "PCG64",
        "state": {"state": int.from_bytes(raw[:16], "little"), "inc": int.from_bytes(raw[16:], "little")},
        "has_uint32": 0,
        "uinteger": 0,
    }
    return np.random.Generator(bg)


# ---------------------------------------------------------------------------
# augmentation


def augment(image, rng, max_rotation_degrees, max_shift_pixels):
    """Random rotation (bilinear, border filled with -1) then a random
    integer horizontal shift. Draws exactly two values from ``rng``."""
    angle = float(rng.uniform(-max_rotation_degrees, max_rotation_degrees))
    shift = int(rng.integers(-max_shift_pixels, max_shift_pixels + 1, dtype=np.int64))
    out = image
    if angle != 0.0:
        out = _rotate_bilinear(out, angle)
    if shift != 0:
        out = _hshift(out, shift)
    return out


def _rotate_bilinear(img, angle_deg):
    c, h, w = img.shape
    theta = np.deg2rad(angle_deg)
    cos, sin = np.cos(theta), np.sin(theta)
    my, mx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64) - my, np.arange(w, dtype=np.float64) - mx, indexing="ij")
    sy = my + cos * yy + sin * xx
    sx = mx - sin * yy + cos * xx
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy = (sy - y0).astype(np.float32)
    fx = (sx - x0).astype(np.float32)

    def sample(yi, xi):
        inside = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        yc = np.clip(yi, 0, h - 1)
        xc = np.clip(xi, 0, w - 1)
        vals = img[:, yc, xc]
        return np.where(inside[None], vals, np.float32(-1.0))

    v00 = sample(y0, x0)
    v01 = sample(y0, x0 + 1)
    v10 = sample(y0 + 1, x0)
    v11 = sample(y0 + 1, x0 + 1)
    top = v00 * (1 - fx)[None] + v01 * fx[None]
    bot = v10 * (1 - fx)[None] + v11 * fx[None]
    return (top * (1 - fy)[None] + bot * fy[None]).astype(np.float32)


def _hshift(img, k):
    out = np.full_like(img, -1.0)
    if k > 0:
        out[:, :, k:] = img[:, :, :-k]
    else:
        out[:, :, :k] = img[:, :, -k:]
    return out


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam over a named parameter set, deduplicated by tensor identity so
    tied (shared) parameters are updated once. Gradients are zeroed after
    each step. Parameters whose groups are all frozen are skipped."""

    def __init__(self, named_params, lr, beta1=0.5, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.params = []
        seen = set()
        for name, p in named_params:
            if id(p) in seen:
                continue
            seen.add(id(p))
            self.params.append((name, p))
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient in {name}")
            if ad._is_frozen(p):
                g.fill(0.0)
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            g.fill(0.0)


def named_params_of(tag, ae):
    out = []
    for k, t in ae.encoder.params.items():
        out.append((f"{tag}.enc.{k}", t))
    for k, t in ae.decoder.params.items():
        out.append((f"{tag}.dec.{k}", t))
    return out


def named_buffers_of(tag, ae):
    out = []
    for k, b in ae.encoder.buffers.items():
        out.append((f"{tag}.enc.{k}", b))
    for k, b in ae.decoder.buffers.items():
        out.append((f"{tag}.dec.{k}", b))
    return out


# ---------------------------------------------------------------------------
# training loops


class LossLog:
    """CSV rows for one training run, kept as strings so identical runs
    produce byte-identical logs."""

    def __init__(self):
        self.header = None
        self.rows = []

    def append(self, step, report):
        if self.header is None:
            self.header = report.csv_header()
        self.rows.append(report.csv_row(step))

    def text(self):
        return "\n".join(([self.header] if self.header else []) + self.rows) + "\n"

    def write(self, path):
        _atomic_write(path, self.text().encode())


def _sample_batch(dataset, rng, size, cfg):
    idx = rng.integers(0, len(dataset), size=size, dtype=np.int64)
    return np.stack([augment(dataset[int(i)], rng, cfg.max_rotation_degrees, cfg.max_shift_pixels) for i in idx])


def _augment_copies(x, rng, count, cfg):
    return np.stack([augment(x, rng, cfg.max_rotation_degrees, cfg.max_shift_pixels) for _ in range(count)])


class Phase1Trainer:
    """Optimizes domain B's autoencoder on augmented minibatches."""

    def __init__(self, config, dataset_b, ae_b=None, rng=None, adam_state=None, step=0):
        if len(dataset_b) == 0:
            raise ad.ContractError("phase 1 needs a nonempty dataset")
        self.config = config
        self.dataset = dataset_b
        self.ae_b = ae_b if ae_b is not None else nets.build_autoencoder(
            config.net, derive_seed(config.seed, "init_b"), "B")
        self.rng = rng if rng is not None else derive_rng(config.seed, "phase1")
        self.adam = Adam(named_params_of("B", self.ae_b), config.learning_rate,
                         config.adam_beta1, config.adam_beta2, config.adam_eps)
        if adam_state is not None:
            load_adam_state(self.adam, adam_state)
        self.step = step
        self.log = LossLog()
        self.history = deque(maxlen=100)

    def run(self, n_steps=None):
        n = self.config.phase1_steps if n_steps is None else n_steps
        for _ in range(n):
            batch = _sample_batch(self.dataset, self.rng, self.config.batch_size_b, self.config)
            report = obj.phase1_total(self.ae_b, batch, self.config.weights)
            if not np.isfinite(report.total):
                raise DivergenceError(f"phase 1 diverged at step {self.step}: total={report.total}")
            self.adam.step()
            self.step += 1
            self.history.append(report.total)
            self.log.append(self.step, report)
        return self.ae_b, self.log


class Phase2Trainer:
    """Joint optimization of both autoencoders; A starts as a clone of B."""

    def __init__(self, config, x, dataset_b, ae_b, ae_a=None, rng=None, adam_state=None, step=0):
        if len(dataset_b) == 0:
            raise ad.ContractError("phase 2 needs a nonempty dataset")
        self.config = config
        self.x = x
        self.dataset = dataset_b
        self.ae_b = ae_b
        if ae_a is None:
            ae_a = nets.clone_params(ae_b, "A")
            nets.apply_share_spec(ae_a, ae_b, config.share)
        self.ae_a = ae_a
        self.rng = rng if rng is not None else derive_rng(config.seed, "phase2")
        self.adam = Adam(named_params_of("A", self.ae_a) + named_params_of("B", self.ae_b),
                         config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)
        if adam_state is not None:
            load_adam_state(self.adam, adam_state)
        self.step = step
        self.log = LossLog()
        self.history = deque(maxlen=100)

    def run(self, n_steps=None):
        n = self.config.phase2_steps if n_steps is None else n_steps
        cfg = self.config
        for _ in range(n):
            batch_b = _sample_batch(self.dataset, self.rng, cfg.batch_size_b, cfg)
            batch_a = _augment_copies(self.x, self.rng, cfg.copies_of_x_per_batch, cfg)
            perm_rng = spawn_rng(self.rng) if (cfg.toggles.fcycle and cfg.toggles.fcycle_random) else None
            report = obj.phase2_total(self.ae_a, self.ae_b, batch_a, batch_b,
                                      cfg.weights, cfg.toggles, rng=perm_rng)
            if not np.isfinite(report.total):
                raise DivergenceError(f"phase 2 diverged at step {self.step}: total={report.total}")
            self.adam.step()
            self.step += 1
            self.history.append(report.total)
            self.log.append(self.step, report)
        return self.ae_a, self.ae_b, self.log


def train_phase1(config, dataset_b):
    trainer = Phase1Trainer(config, dataset_b)
    return trainer.run()


def train_phase2(config, x, dataset_b, ae_b):
    trainer = Phase2Trainer(config, x, dataset_b, ae_b)
    return trainer.run()


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout (little-endian): magic "BIOSTCKP", version u16, config hash (32
# bytes), then two counted sections of named float32 entries (parameters
# with batch-norm stats, then optimizer moments and the step counter), each
# entry as name-length u16, UTF-8 name, rank u8, dims u32[rank], data; the
# file ends with the 32-byte RNG state.


@dataclass
class Checkpoint:
    config_hash: bytes
    params: dict
    moments: dict
    rng_bytes: bytes
    version: int = CHECKPOINT_VERSION


def _write_entry(chunks, name, arr):
    nb = name.encode()
    arr = np.asarray(arr, dtype=np.float32)
    chunks.append(struct.pack("<H", len(nb)))
    chunks.append(nb)
    chunks.append(struct.pack("<B", arr.ndim))
    chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    chunks.append(arr.astype("<f4", copy=False).tobytes())


def save_checkpoint(path, ckpt):
    chunks = [CHECKPOINT_MAGIC, struct.pack("<H", ckpt.version)]
    if len(ckpt.config_hash) != 32:
        raise FormatError("config hash must be 32 bytes")
    chunks.append(ckpt.config_hash)
    for section in (ckpt.params, ckpt.moments):
        chunks.append(struct.pack("<I", len(section)))
        for name, arr in section.items():
            _write_entry(chunks, name, arr)
    chunks.append(ckpt.rng_bytes)
    _atomic_write(path, b"".join(chunks))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.off = 0

    def take(self, n, what):
        if self.off + n > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {what}")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def u16(self, what):
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf)
    if r.take(8, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    version = r.u16("version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    config_hash = r.take(32, "config hash")
    sections = []
    for label in ("params", "moments"):
        count = r.u32(f"{label} count")
        entries = {}
        for _ in range(count):
            nlen = r.u16("name length")
            name = r.take(nlen, "name").decode()
            rank = struct.unpack("<B", r.take(1, "rank"))[0]
            dims = struct.unpack(f"<{rank}I", r.take(4 * rank, "dims"))
            size = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(r.take(4 * size, f"data of {name}"), dtype="<f4").reshape(dims)
            entries[name] = data.copy()
        sections.append(entries)
    rng_bytes = r.take(32, "rng state")
    if r.off != len(buf):
        raise FormatError(f"{len(buf) - r.off} trailing bytes after rng state")
    return Checkpoint(config_hash=bytes(config_hash), params=sections[0],
                      moments=sections[1], rng_bytes=bytes(rng_bytes), version=version)


def adam_state_entries(adam):
    out = {"step": np.asarray(float(adam.t), dtype=np.float32)}
    for name, _ in adam.params:
        out[f"m:{name}"] = adam.m[name]
        out[f"v:{name}"] = adam.v[name]
    return out


def load_adam_state(adam, entries):
    adam.t = int(entries["step"])
    for name, _ in adam.params:
        adam.m[name] = entries[f"m:{name}"].astype(np.float32).copy()
        adam.v[name] = entries[f"v:{name}"].astype(np.float32).copy()


NET_META_FIELDS = ("image_channels", "image_size", "base_width", "n_residual_blocks")


def checkpoint_from_trainer(trainer, config):
    """Snapshot a Phase1Trainer or Phase2Trainer into a Checkpoint."""
    params = {}
    for f in NET_META_FIELDS:
        params[f"meta.{f}"] = np.asarray(float(getattr(config.net, f)), dtype=np.float32)
    pairs = []
    if hasattr(trainer, "ae_a"):
        pairs.append(("A", trainer.ae_a))
    pairs.append(("B", trainer.ae_b))
    for tag, ae in pairs:
        for name, t in named_params_of(tag, ae):
            params[name] = t.data
        for name, b in named_buffers_of(tag, ae):
            params[name] = b
    return Checkpoint(
        config_hash=config.config_hash(),
        params=params,
        moments=adam_state_entries(trainer.adam),
        rng_bytes=rng_state_bytes(trainer.rng),
    )


def net_config_from_checkpoint(ckpt):
    kwargs = {f: int(ckpt.params[f"meta.{f}"]) for f in NET_META_FIELDS}
    return NetConfig(**kwargs)


def autoencoder_from_checkpoint(ckpt, tag, config=None):
    """Rebuild one domain's autoencoder from checkpoint entries."""
    cfg = config if config is not None else net_config_from_checkpoint(ckpt)
    ae = nets.build_autoencoder(cfg, 0, tag)
    for name, t in named_params_of(tag, ae):
        if name not in ckpt.params:
            raise FormatError(f"checkpoint missing parameter {name}")
        if ckpt.params[name].shape != t.data.shape:
            raise FormatError(f"checkpoint entry {name} has shape {ckpt.params[name].shape}, expected {t.data.shape}")
        t.data[...] = ckpt.params[name]
    for name, b in named_buffers_of(tag, ae):
        if name not in ckpt.params:
            raise FormatError(f"checkpoint missing buffer {name}")
        b[...] = ckpt.params[name]
    return ae


def has_domain(ckpt, tag):
    return any(k.startswith(f"{tag}.enc.") for k in ckpt.params)


def resume_phase1(config, dataset_b, ckpt):
    _check_hash(config, ckpt)
    ae_b = autoencoder_from_checkpoint(ckpt, "B", config.net)
    tr = Phase1Trainer(config, dataset_b, ae_b=ae_b, rng=rng_from_state_bytes(ckpt.rng_bytes),
                       adam_state=ckpt.moments)
    tr.step = tr.adam.t
    return tr


def resume_phase2(config, x, dataset_b, ckpt):
    _check_hash(config, ckpt)
    ae_b = autoencoder_from_checkpoint(ckpt, "B", config.net)
    ae_a = autoencoder_from_checkpoint(ckpt, "A", config.net)
    nets.apply_share_spec(ae_a, ae_b, config.share)
    tr = Phase2Trainer(config, x, dataset_b, ae_b, ae_a=ae_a,
                       rng=rng_from_state_bytes(ckpt.rng_bytes), adam_state=ckpt.moments)
    tr.step = tr.adam.t
    return tr


def _check_hash(config, ckpt):
    if ckpt.config_hash != config.config_hash():
        raise FormatError("checkpoint was written under a different config (hash mismatch)")


def _atomic_write(path, data):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
