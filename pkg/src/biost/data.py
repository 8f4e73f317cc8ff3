"""Synthetic two-domain image data with ground-truth content labels.

Both domains draw the same four shape classes with identical geometry;
they differ only in appearance. Domain B renders filled shapes on a dark
background, domain A renders outlined shapes with an inverted palette.
Matched scenes across domains exist only so evaluation has an oracle
pairing; training never uses it.

Also defines the on-disk formats: a float32 raster ("BIOSTIMG"), a
line-oriented manifest, and a one-way 8-bit PNG export for inspection.
"""

from __future__ import annotations

import hashlib
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamGroup, Tensor

IMAGE_MAGIC = b"BIOSTIMG"
SHAPE_CLASSES = ("circle", "square", "triangle", "cross")
CANVAS_MARGIN = 2


class FormatError(ValueError):
    """A serialized image or manifest does not match its declared layout."""


class ConfigurationError(RuntimeError):
    """Generator and classifier disagree (classifier failed to converge)."""


@dataclass
class SceneSpec:
    shape_class: str
    center: tuple
    scale: float
    content_seed: int = 0

    def validate(self, size):
        if self.shape_class not in SHAPE_CLASSES:
            raise ValueError(f"unknown shape class {self.shape_class!r}")
        cy, cx = self.center
        lo = CANVAS_MARGIN + self.scale
        hi = size - 1 - CANVAS_MARGIN - self.scale
        if not (lo <= cy <= hi and lo <= cx <= hi):
            raise ValueError(
                f"{self.shape_class} at {self.center} scale {self.scale} leaves "
                f"less than {CANVAS_MARGIN}px margin on a {size}px canvas")


@dataclass
class StyleSpec:
    domain_tag: str
    fg: tuple
    bg: tuple
    render_mode: str = "filled"
    noise_sigma: float = 0.0
    stroke_width: float = 3.0

    def validate(self):
        if self.render_mode not in ("filled", "outlined"):
            raise ValueError(f"render_mode must be filled|outlined, got {self.render_mode!r}")
        fg, bg = np.asarray(self.fg, float), np.asarray(self.bg, float)
        if fg.shape != (3,) or bg.shape != (3,):
            raise ValueError("fg/bg must be 3-channel colors")
        if np.any(np.abs(fg) > 1) or np.any(np.abs(bg) > 1):
            raise ValueError("colors must lie in [-1, 1]")
        if np.max(np.abs(fg - bg)) < 0.5:
            raise ValueError("fg and bg must differ by >= 0.5 in at least one channel")


_SS = 8  # supersampling factor per axis for coverage antialiasing


def _inside(shape_class, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if shape_class == "circle":
        return dy * dy + dx * dx <= r * r
    if shape_class == "square":
        s = 0.8 * r
        return (np.abs(dy) <= s) & (np.abs(dx) <= s)
    if shape_class == "triangle":
        v = np.array([[cy - r, cx], [cy + r / 2, cx - r * np.sqrt(3) / 2], [cy + r / 2, cx + r * np.sqrt(3) / 2]])
        ok = np.ones_like(yy, dtype=bool)
        for i in range(3):
            ay, ax = v[i]
            by, bx = v[(i + 1) % 3]
            ok &= (bx - ax) * (yy - ay) - (by - ay) * (xx - ax) <= 0
        return ok
    if shape_class == "cross":
        t = 0.35 * r
        return ((np.abs(dx) <= t) & (np.abs(dy) <= r)) | ((np.abs(dy) <= t) & (np.abs(dx) <= r))
    raise ValueError(f"unknown shape class {shape_class!r}")


def _coverage(scene, size, scale):
    n = size * _SS
    coords = (np.arange(n) + 0.5) / _SS - 0.5
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    mask = _inside(scene.shape_class, yy, xx, scene.center[0], scene.center[1], scale)
    return mask.reshape(size, _SS, size, _SS).mean(axis=(1, 3)).astype(np.float32)


def shape_mask(scene, size):
    """Silhouette coverage in [0,1]; depends on geometry only, never style."""
    scene.validate(size)
    return _coverage(scene, size, scene.scale)


def render(scene, style, size):
    """Deterministic rasterization of a scene under a style, in [-1, 1]."""
    scene.validate(size)
    style.validate()
    cov = _coverage(scene, size, scene.scale)
    if style.render_mode == "outlined":
        inner = max(scene.scale - style.stroke_width, 0.25)
        cov = np.clip(cov - _coverage(scene, size, inner), 0.0, 1.0)
    fg = np.asarray(style.fg, np.float32)
    bg = np.asarray(style.bg, np.float32)
    img = bg[:, None, None] + cov[None] * (fg - bg)[:, None, None]
    if style.noise_sigma > 0:
        digest = hashlib.sha256(f"{scene.content_seed}:noise:{style.domain_tag}".encode()).digest()
        rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))
        img = img + style.noise_sigma * rng.standard_normal(img.shape).astype(np.float32)
    return np.clip(img, -1.0, 1.0).astype(np.float32)


def sample_scene(rng, size, shape_class):
    scale = float(rng.uniform(0.22, 0.34)) * size
    lo = CANVAS_MARGIN + scale
    hi = size - 1 - CANVAS_MARGIN - scale
    cy = float(rng.uniform(lo, hi))
    cx = float(rng.uniform(lo, hi))
    seed = int(rng.integers(0, 2**63, dtype=np.int64))
    return SceneSpec(shape_class, (cy, cx), scale, seed)


def sample_style(rng, domain_tag):
    bright = rng.uniform(0.45, 0.95, 3)
    dark = rng.uniform(-0.95, -0.55, 3)
    if domain_tag == "B":
        return StyleSpec("B", tuple(bright), tuple(dark), "filled", noise_sigma=0.02)
    return StyleSpec("A", tuple(dark), tuple(bright), "outlined", noise_sigma=0.02, stroke_width=3.0)


# ---------------------------------------------------------------------------
# dataset files


@dataclass
class DatasetManifest:
    entries: list  # (relative path, shape_class, domain_tag)
    seed: int
    version: int = 1


def generate_dataset(n, domain_tag, seed, size, out_dir):
    """n rendered samples with round-robin class balancing, written as native
    rasters plus a manifest. Same seed, same bytes."""
    from .trainer import derive_rng

    os.makedirs(out_dir, exist_ok=True)
    rng = derive_rng(seed, f"gen:{domain_tag}")
    entries = []
    for i in range(n):
        cls = SHAPE_CLASSES[i % len(SHAPE_CLASSES)]
        scene = sample_scene(rng, size, cls)
        style = sample_style(rng, domain_tag)
        img = render(scene, style, size)
        name = f"{domain_tag}_{i:05d}.bimg"
        write_image(os.path.join(out_dir, name), img)
        entries.append((name, cls, domain_tag))
    manifest = DatasetManifest(entries=entries, seed=seed)
    write_manifest(os.path.join(out_dir, "manifest.tsv"), manifest)
    return manifest


def write_manifest(path, manifest):
    lines = [f"# biost-manifest v{manifest.version}", f"# seed={manifest.seed}"]
    for rel, cls, tag in manifest.entries:
        lines.append(f"{rel}\t{cls}\t{tag}")
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def read_manifest(path):
    version, seed, entries = None, 0, []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("biost-manifest v"):
                    version = int(body.split("v")[-1])
                elif body.startswith("seed="):
                    seed = int(body.split("=", 1)[1])
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected path<TAB>class<TAB>domain")
            if parts[1] not in SHAPE_CLASSES:
                raise FormatError(f"{path}:{lineno}: unknown class {parts[1]!r}")
            entries.append(tuple(parts))
    if version is None:
        raise FormatError(f"{path}: missing manifest version header")
    return DatasetManifest(entries=entries, seed=seed, version=version)


def load_images(manifest, base_dir):
    """Images, integer labels, and domain tags for every manifest entry."""
    images, labels, domains = [], [], []
    for rel, cls, tag in manifest.entries:
        images.append(read_image(os.path.join(base_dir, rel)))
        labels.append(SHAPE_CLASSES.index(cls))
        domains.append(tag)
    return np.stack(images), np.asarray(labels, np.int64), domains


def write_image(path, img):
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim != 3:
        raise FormatError(f"raster must be rank 3 (C,H,W), got shape {arr.shape}")
    header = IMAGE_MAGIC + struct.pack("<III", *arr.shape)
    _atomic_write(path, header + arr.astype("<f4", copy=False).tobytes())


def read_image(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 20:
        raise FormatError(f"{path}: truncated raster header")
    if buf[:8] != IMAGE_MAGIC:
        raise FormatError(f"{path}: bad raster magic {buf[:8]!r}")
    c, h, w = struct.unpack("<III", buf[8:20])
    expect = 20 + 4 * c * h * w
    if len(buf) != expect:
        raise FormatError(f"{path}: payload is {len(buf) - 20} bytes, expected {expect - 20}")
    return np.frombuffer(buf[20:], dtype="<f4").reshape(c, h, w).copy()


def export_png(path, img):
    """8-bit quantized one-way PNG export of a [-1,1] C,H,W image."""
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise FormatError(f"png export expects a 3-channel image, got shape {arr.shape}")
    u8 = np.clip(np.round((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)
    h, w = u8.shape[1], u8.shape[2]
    raster = u8.transpose(1, 2, 0)
    payload = b"".join(b"\x00" + raster[y].tobytes() for y in range(h))

    def chunk(tag, body):
        return struct.pack(">I", len(body)) + tag + body + struct.pack(">I", zlib.crc32(tag + body))

    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    data = b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr) + chunk(b"IDAT", zlib.compress(payload)) + chunk(b"IEND", b"")
    _atomic_write(path, data)


def _atomic_write(path, data):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# evaluation classifier (two stride-2 convs + pooled linear head)


@dataclass
class ClassifierParams:
    group: ParamGroup
    n_classes: int = len(SHAPE_CLASSES)


def build_classifier(rng_seed, image_channels=3, width=16, n_classes=len(SHAPE_CLASSES)):
    rng = np.random.Generator(np.random.PCG64(rng_seed))
    g = ParamGroup("classifier")

    def conv(prefix, co, ci, k):
        g.add(f"{prefix}.w", (rng.standard_normal((co, ci, k, k)) * np.sqrt(2.0 / (ci * k * k))).astype(np.float32))
        g.add(f"{prefix}.b", np.zeros(co, np.float32))
        g.add(f"{prefix}.bn.g", np.ones(co, np.float32))
        g.add(f"{prefix}.bn.b", np.zeros(co, np.float32))
        g.add_buffer(f"{prefix}.bn.rm", np.zeros(co, np.float32))
        g.add_buffer(f"{prefix}.bn.rv", np.ones(co, np.float32))

    conv("c1", width, image_channels, 4)
    conv("c2", 2 * width, width, 4)
    g.add("fc.w", (rng.standard_normal((n_classes, 2 * width)) * np.sqrt(2.0 / (2 * width))).astype(np.float32))
    g.add("fc.b", np.zeros(n_classes, np.float32))
    return ClassifierParams(group=g, n_classes=n_classes)


def classifier_logits(clf, images, mode="eval"):
    g = clf.group
    x = images if isinstance(images, Tensor) else Tensor(images)
    for prefix in ("c1", "c2"):
        x = ad.conv2d(x, g.params[f"{prefix}.w"], g.params[f"{prefix}.b"], 2, 1)
        x = ad.batch_norm(x, g.params[f"{prefix}.bn.g"], g.params[f"{prefix}.bn.b"], mode,
                          g.buffers[f"{prefix}.bn.rm"], g.buffers[f"{prefix}.bn.rv"])
        x = ad.relu(x)
    x = ad.global_avg_pool(x)
    return ad.linear(x, g.params["fc.w"], g.params["fc.b"])


def classifier_predict(clf, images):
    with ad.no_grad():
        logits = classifier_logits(clf, images, "eval")
    return np.argmax(logits.data, axis=1)


def classifier_accuracy(clf, images, labels, batch=64):
    hits = 0
    for i in range(0, len(images), batch):
        hits += int(np.sum(classifier_predict(clf, images[i : i + batch]) == labels[i : i + batch]))
    return hits / len(images)


def train_eval_classifier(train_images, train_labels, test_images, test_labels,
                          seed=0, steps=600, batch_size=32, min_accuracy=0.90):
    """Train the frozen evaluation classifier on labeled domain-B data.

    Raises ConfigurationError if held-out accuracy lands below
    ``min_accuracy``, which signals a generator/classifier mismatch.
    """
    from .trainer import Adam, derive_rng, derive_seed

    clf = build_classifier(derive_seed(seed, "classifier-init"))
    rng = derive_rng(seed, "classifier")
    adam = Adam([(k, t) for k, t in clf.group.params.items()], lr=1e-3, beta1=0.9, beta2=0.999)
    n = len(train_images)
    for _ in range(steps):
        idx = rng.integers(0, n, size=min(batch_size, n), dtype=np.int64)
        logits = classifier_logits(clf, train_images[idx], "train")
        loss = ad.cross_entropy(logits, train_labels[idx])
        ad.backward(loss)
        adam.step()
    acc = classifier_accuracy(clf, test_images, test_labels)
    if acc < min_accuracy:
        raise ConfigurationError(f"classifier reached only {acc:.3f} held-out accuracy (< {min_accuracy})")
    clf.group.frozen = True
    return clf, acc
