"""Cross-domain translators and the metrics used to score them.

Content preservation is measured as mean L1 between feature maps under a
frozen copy of the phase-I domain-B encoder; style similarity uses Gram
matrices of that encoder's three conv stages against a reference set's
mean Gram. Classifier accuracy applies to B-styled outputs only. The
ablation harness sweeps the cycle-term toggles over seeds and writes both
per-seed and summary CSV tables.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import data as datamod
from . import networks as nets
from . import trainer as tr
from .autodiff import Tensor


def translate_a_to_b(ae_a, ae_b, x):
    """F(x) = D_B(E_A(x)), eval-mode, pure function of (params, input)."""
    with ad.no_grad():
        return nets.decode(ae_b, nets.encode(ae_a, Tensor(x), "eval"), "eval").data


def translate_b_to_a(ae_a, ae_b, s):
    """G(s) = D_A(E_B(s)), eval-mode, pure function of (params, input)."""
    with ad.no_grad():
        return nets.decode(ae_a, nets.encode(ae_b, Tensor(s), "eval"), "eval").data


@dataclass
class FrozenFeatureExtractor:
    """Frozen snapshot of a trained encoder, used for both metrics."""

    params: nets.AutoencoderParams

    @classmethod
    def from_autoencoder(cls, ae):
        snap = nets.clone_params(ae)
        snap.encoder.frozen = True
        snap.decoder.frozen = True
        return cls(params=snap)

    def features(self, images):
        with ad.no_grad():
            return nets.encode(self.params, Tensor(images), "eval").data

    def stages(self, images):
        out = []
        with ad.no_grad():
            nets.encode(self.params, Tensor(images), "eval", collect_stages=out)
        return [t.data for t in out]


def content_distance(img1, img2, feat):
    """Mean L1 between the two images' feature maps."""
    f1 = feat.features(img1)
    f2 = feat.features(img2)
    if f1.shape != f2.shape:
        raise ad.ShapeError(f"feature shapes differ: {f1.shape} vs {f2.shape}")
    return float(np.abs(f1 - f2).mean())


def gram_matrices(images, feat):
    """Per-stage Gram matrices A A^T / (c h w); returns [N, c, c] per stage."""
    batched = images if images.ndim == 4 else images[None]
    grams = []
    for act in feat.stages(batched):
        n, c, h, w = act.shape
        a = act.reshape(n, c, h * w)
        grams.append(np.einsum("ncx,ndx->ncd", a, a) / (c * h * w))
    return grams


def reference_grams(reference_set, feat, batch=64):
    """Mean Gram of a reference image set, one matrix per stage."""
    if len(reference_set) == 0:
        raise ad.ContractError("empty style reference set")
    sums = None
    for i in range(0, len(reference_set), batch):
        gs = gram_matrices(np.asarray(reference_set[i : i + batch]), feat)
        parts = [g.sum(axis=0) for g in gs]
        sums = parts if sums is None else [s + p for s, p in zip(sums, parts)]
    return [s / len(reference_set) for s in sums]


def style_distance(img, reference_set, feat, ref_grams=None):
    """Sum over stages of the mean squared deviation from the reference
    set's mean Gram matrix."""
    if ref_grams is None:
        ref_grams = reference_grams(reference_set, feat)
    gs = gram_matrices(img, feat)
    return float(sum(np.mean((g[0] - r) ** 2) for g, r in zip(gs, ref_grams)))


@dataclass
class MetricReport:
    direction: str
    classifier_accuracy: float | None
    content_distance: float
    style_distance: float
    n_samples: int
    seed: int

    def __post_init__(self):
        if self.classifier_accuracy is not None and not 0.0 <= self.classifier_accuracy <= 1.0:
            raise ValueError("accuracy must lie in [0, 1]")
        if self.content_distance < 0 or self.style_distance < 0:
            raise ValueError("distances must be nonnegative")


def evaluate_direction(ae_a, ae_b, test_images, test_labels, classifier, feat,
                       direction, style_ref, seed=0, batch=32):
    """Translate a test set and score it.

    A->B outputs are B-styled, so the classifier contributes an accuracy;
    for B->A the content distance is the fidelity metric and accuracy is
    absent. ``style_ref`` holds target-domain images.
    """
    if len(test_images) == 0:
        raise ad.ContractError("empty test set")
    if direction not in ("A->B", "B->A"):
        raise ValueError(f"direction must be 'A->B' or 'B->A', got {direction!r}")
    fn = translate_a_to_b if direction == "A->B" else translate_b_to_a
    ref_g = reference_grams(style_ref, feat)

    hits = 0
    content_sum = 0.0
    style_sum = 0.0
    n = len(test_images)
    for i in range(0, n, batch):
        src = np.asarray(test_images[i : i + batch])
        out = fn(ae_a, ae_b, src)
        if direction == "A->B" and classifier is not None:
            hits += int(np.sum(datamod.classifier_predict(classifier, out) == test_labels[i : i + batch]))
        fsrc = feat.features(src)
        fout = feat.features(out)
        content_sum += float(np.abs(fsrc - fout).mean(axis=(1, 2, 3)).sum())
        for g_img in zip(*gram_matrices(out, feat)):
            style_sum += float(sum(np.mean((g - r) ** 2) for g, r in zip(g_img, ref_g)))
    acc = (hits / n) if (direction == "A->B" and classifier is not None) else None
    return MetricReport(direction, acc, content_sum / n, style_sum / n, n, seed)


# ---------------------------------------------------------------------------
# ablation harness


@dataclass
class AblationCell:
    """One toggle configuration with per-direction metrics over seeds."""

    bab: bool
    aba: bool
    fcycle: bool
    variant: str = "base"  # base | random_fcycle | weight_sharing
    reports: dict = field(default_factory=dict)  # direction -> list[MetricReport]

    def key(self):
        return (int(self.bab), int(self.aba), int(self.fcycle), self.variant)

    def mean(self, direction, attr):
        vals = [getattr(r, attr) for r in self.reports[direction]]
        vals = [v for v in vals if v is not None]
        return sum(vals) / len(vals) if vals else float("nan")


def base_toggle_grid():
    """The eight on/off combinations of (bab, aba, fcycle)."""
    return [AblationCell(bool(b), bool(a), bool(f)) for b in (0, 1) for a in (0, 1) for f in (0, 1)]


@dataclass
class AblationData:
    """Everything the harness needs besides the config: unpaired training
    images for B, a pool of A images to draw one-shot samples from, held-out
    test sets, and the frozen classifier."""

    train_b: np.ndarray
    pool_a: np.ndarray
    test_a: np.ndarray
    test_a_labels: np.ndarray
    test_b: np.ndarray
    classifier: object


def cell_config(base_config, cell):
    from .objectives import CycleToggles

    toggles = CycleToggles(bab=cell.bab, aba=cell.aba,
                           fcycle=cell.fcycle or cell.variant == "random_fcycle",
                           fcycle_random=cell.variant == "random_fcycle")
    share = nets.ShareSpec("tied" if cell.variant == "weight_sharing" else "none")
    return replace(base_config, toggles=toggles, share=share)


def run_ablation(base_config, cells, n_seeds, bundle, progress=None):
    """Phase I runs once per seed and is shared across cells; each cell then
    trains phase II from a fresh clone and is evaluated in both directions."""
    if n_seeds < 1:
        raise ad.ContractError("n_seeds must be >= 1")
    cells = [AblationCell(c.bab, c.aba, c.fcycle, c.variant) for c in cells]
    for i in range(n_seeds):
        seed = base_config.seed + i
        cfg_seed = replace(base_config, seed=seed)
        ae_b1, _ = tr.train_phase1(cfg_seed, bundle.train_b)
        feat = FrozenFeatureExtractor.from_autoencoder(ae_b1)
        x = bundle.pool_a[tr.derive_seed(seed, "oneshot") % len(bundle.pool_a)]
        for cell in cells:
            cfg_cell = cell_config(cfg_seed, cell)
            phase2 = tr.Phase2Trainer(cfg_cell, x, bundle.train_b, nets.clone_params(ae_b1, "B"))
            ae_a, ae_b2, _ = phase2.run()
            rep_ab = evaluate_direction(ae_a, ae_b2, bundle.test_a, bundle.test_a_labels,
                                        bundle.classifier, feat, "A->B", bundle.test_b, seed)
            rep_ba = evaluate_direction(ae_a, ae_b2, bundle.test_b, None, None, feat,
                                        "B->A", x[None], seed)
            cell.reports.setdefault("A->B", []).append(rep_ab)
            cell.reports.setdefault("B->A", []).append(rep_ba)
            if progress is not None:
                progress(seed, cell)
    return cells


def ablation_seed_csv(cells):
    rows = ["bab,aba,fcycle,variant,direction,seed,accuracy,content_distance,style_distance"]
    for cell in cells:
        for direction in ("A->B", "B->A"):
            for rep in cell.reports.get(direction, []):
                acc = "" if rep.classifier_accuracy is None else repr(rep.classifier_accuracy)
                rows.append(f"{int(cell.bab)},{int(cell.aba)},{int(cell.fcycle)},{cell.variant},"
                            f"{direction},{rep.seed},{acc},{rep.content_distance!r},{rep.style_distance!r}")
    return "\n".join(rows) + "\n"


def ablation_summary_csv(cells):
    """One row per cell and direction, averaged over seeds."""
    rows = ["bab,aba,fcycle,variant,direction,accuracy,content_distance,style_distance,n_seeds"]
    for cell in cells:
        for direction in ("A->B", "B->A"):
            if direction not in cell.reports:
                continue
            n = len(cell.reports[direction])
            acc = cell.mean(direction, "classifier_accuracy")
            accs = "" if np.isnan(acc) else repr(acc)
            rows.append(f"{int(cell.bab)},{int(cell.aba)},{int(cell.fcycle)},{cell.variant},"
                        f"{direction},{accs},{cell.mean(direction, 'content_distance')!r},"
                        f"{cell.mean(direction, 'style_distance')!r},{n}")
    return "\n".join(rows) + "\n"


def dump_translations(out_dir, ae_a, ae_b, images, direction, png=True):
    """Write translated images (native raster plus optional PNG) for
    qualitative inspection."""
    os.makedirs(out_dir, exist_ok=True)
    fn = translate_a_to_b if direction == "A->B" else translate_b_to_a
    tag = "a2b" if direction == "A->B" else "b2a"
    for i, src in enumerate(images):
        out = fn(ae_a, ae_b, src)
        datamod.write_image(os.path.join(out_dir, f"{tag}_{i:05d}.bimg"), out)
        if png:
            datamod.export_png(os.path.join(out_dir, f"{tag}_{i:05d}.png"), out)
