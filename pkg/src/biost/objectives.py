"""Loss terms and phase totals for the two-phase training regime.

Seven terms: per-domain reconstruction and latent-Gaussian penalties, the
two pixel cycles, and the feature cycle. Each term carries a detach mask
naming the networks whose parameters are frozen while it backpropagates;
gradients still flow through frozen networks to whatever sits upstream.
The cycle masks implement the asymmetry of the method: domain A adapts to
domain B's latent space, never the reverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import networks as nets
from .autodiff import Tensor


@dataclass
class LossWeights:
    """Trade-off coefficients. Keys follow the phase II total:
    rec_B + l2*rec_A + l3*vae_B + l4*vae_A + l5*bab + l6*aba + l7*fcycle;
    l1 weights the phase I latent penalty."""

    l1: float = 0.001
    l2: float = 1.0
    l3: float = 0.001
    l4: float = 0.001
    l5: float = 1.0
    l6: float = 1.0
    l7: float = 0.001

    def validate(self):
        for name in ("l1", "l2", "l3", "l4", "l5", "l6", "l7"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")


@dataclass
class CycleToggles:
    bab: bool = True
    aba: bool = True
    fcycle: bool = True
    fcycle_random: bool = False


# term -> networks frozen during that term's backward pass
DETACH_MASKS = {
    "rec_b": (),
    "vae_b": (),
    "rec_a": (),
    "vae_a": (),
    "bab": ("E_A", "D_A"),
    "aba": ("E_B", "D_B"),
    "fcycle": ("E_B",),
}

CSV_TERMS = ("rec_b", "rec_a", "vae_b", "vae_a", "bab", "aba", "fcycle")


def mask_groups(term, ae_a, ae_b):
    """ParamGroups frozen for ``term``'s backward pass."""
    lookup = {"E_A": ae_a.encoder, "D_A": ae_a.decoder, "E_B": ae_b.encoder, "D_B": ae_b.decoder}
    return tuple(lookup[name] for name in DETACH_MASKS[term])


@dataclass
class LossReport:
    """Per-term scalar values plus the weighted total for one batch."""

    values: dict = field(default_factory=dict)
    total: float = 0.0

    def csv_header(self):
        return "step," + ",".join(self.values) + ",total"

    def csv_row(self, step):
        cells = [str(step)] + [repr(v) for v in self.values.values()] + [repr(self.total)]
        return ",".join(cells)


def _check_batch(batch):
    arr = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
    if arr.ndim != 4 or arr.shape[0] < 1:
        raise ad.ContractError(f"expected a nonempty [N,C,H,W] batch, got shape {arr.shape}")
    return batch if isinstance(batch, Tensor) else Tensor(arr)


def loss_rec(ae, batch, mode="train"):
    """Mean L1 between a batch and its reconstruction."""
    b = _check_batch(batch)
    return ad.l1_loss(nets.reconstruct(ae, b, mode), b)


def loss_vae(ae, batch, mode="train"):
    """Unit-Gaussian penalty on the batch's latent codes."""
    b = _check_batch(batch)
    return ad.kl_unit_gaussian(nets.encode(ae, b, mode))


def loss_bab_cycle(ae_a, ae_b, batch_b, mode="train"):
    """B -> A -> B pixel cycle. Mask freezes E_A and D_A; E_B and D_B learn,
    with gradient flowing through the frozen pair."""
    s = _check_batch(batch_b)
    mid = nets.decode(ae_a, nets.encode(ae_b, s, mode), mode)
    back = nets.decode(ae_b, nets.encode(ae_a, mid, mode), mode)
    return ad.l1_loss(back, s)


def loss_aba_cycle(ae_a, ae_b, batch_a, mode="train"):
    """A -> B -> A pixel cycle. Mask freezes E_B and D_B."""
    t = _check_batch(batch_a)
    mid = nets.decode(ae_b, nets.encode(ae_a, t, mode), mode)
    back = nets.decode(ae_a, nets.encode(ae_b, mid, mode), mode)
    return ad.l1_loss(back, t)


def loss_f_cycle(ae_a, ae_b, batch_b, mode="train"):
    """Feature cycle: codes of B samples must survive A's decoder/encoder.
    The inner encoding and the target are both detached, so only E_A and
    D_A receive gradient."""
    s = _check_batch(batch_b)
    with ad.no_grad():
        code = nets.encode(ae_b, s, mode)
    code = code.detach()
    pred = nets.encode(ae_a, nets.decode(ae_a, code, mode), mode)
    return ad.l1_loss(pred, code)


def permute_codes(codes, rng):
    """Seeded random permutation of each sample's flattened code coordinates."""
    flat = codes.reshape(codes.shape[0], -1)
    out = np.empty_like(flat)
    for i in range(flat.shape[0]):
        out[i] = flat[i][rng.permutation(flat.shape[1])]
    return out.reshape(codes.shape)


def loss_f_cycle_random(ae_a, latent_batch, mode="train"):
    """Feature cycle against permuted codes (ablation variant). The permuted
    batch is a constant target; only E_A and D_A update."""
    z = _check_batch(latent_batch)
    z = z.detach() if z.requires_grad else z
    pred = nets.encode(ae_a, nets.decode(ae_a, z, mode), mode)
    return ad.l1_loss(pred, z)


def phase1_total(ae_b, batch_b, weights, backprop=True, mode="train"):
    """rec_B + l1 * vae_B, sharing one encoder pass between the terms."""
    s = _check_batch(batch_b)
    code = nets.encode(ae_b, s, mode)
    rec = ad.l1_loss(nets.decode(ae_b, code, mode), s)
    vae = ad.kl_unit_gaussian(code)
    report = LossReport(
        values={"rec_b": float(rec.data), "vae_b": float(vae.data)},
        total=float(rec.data) + weights.l1 * float(vae.data),
    )
    if backprop:
        ad.backward(ad.add(rec, ad.scale(vae, weights.l1)))
    return report


def phase2_total(ae_a, ae_b, batch_a, batch_b, weights, toggles=None,
                 backprop=True, mode="train", rng=None):
    """The full joint objective, term by term under each term's detach mask.

    Reconstruction and latent terms of the same domain share an encoder
    pass (their masks coincide); each cycle term runs its own forward and
    backward so its mask applies exactly. Disabled cycle terms are skipped
    entirely and absent from the report.
    """
    toggles = toggles or CycleToggles()
    t = _check_batch(batch_a)
    s = _check_batch(batch_b)
    values = {}

    code_b = nets.encode(ae_b, s, mode)
    rec_b = ad.l1_loss(nets.decode(ae_b, code_b, mode), s)
    vae_b = ad.kl_unit_gaussian(code_b)
    values["rec_b"] = float(rec_b.data)
    if backprop:
        ad.backward(ad.add(rec_b, ad.scale(vae_b, weights.l3)))

    code_a = nets.encode(ae_a, t, mode)
    rec_a = ad.l1_loss(nets.decode(ae_a, code_a, mode), t)
    vae_a = ad.kl_unit_gaussian(code_a)
    values["rec_a"] = float(rec_a.data)
    values["vae_b"] = float(vae_b.data)
    values["vae_a"] = float(vae_a.data)
    if backprop:
        ad.backward(ad.add(ad.scale(rec_a, weights.l2), ad.scale(vae_a, weights.l4)))

    if toggles.bab:
        term = loss_bab_cycle(ae_a, ae_b, s, mode)
        values["bab"] = float(term.data)
        if backprop:
            with ad.frozen(*mask_groups("bab", ae_a, ae_b)):
                ad.backward(term, seed=weights.l5)

    if toggles.aba:
        term = loss_aba_cycle(ae_a, ae_b, t, mode)
        values["aba"] = float(term.data)
        if backprop:
            with ad.frozen(*mask_groups("aba", ae_a, ae_b)):
                ad.backward(term, seed=weights.l6)

    if toggles.fcycle:
        if toggles.fcycle_random:
            if rng is None:
                raise ad.ContractError("random feature cycle needs an rng")
            with ad.no_grad():
                raw = nets.encode(ae_b, s, mode)
            term = loss_f_cycle_random(ae_a, Tensor(permute_codes(raw.data, rng)), mode)
        else:
            term = loss_f_cycle(ae_a, ae_b, s, mode)
        values["fcycle"] = float(term.data)
        if backprop:
            with ad.frozen(*mask_groups("fcycle", ae_a, ae_b)):
                ad.backward(term, seed=weights.l7)

    coeff = {"rec_b": 1.0, "rec_a": weights.l2, "vae_b": weights.l3, "vae_a": weights.l4,
             "bab": weights.l5, "aba": weights.l6, "fcycle": weights.l7}
    ordered = {k: values[k] for k in CSV_TERMS if k in values}
    total = sum(coeff[k] * v for k, v in ordered.items())
    return LossReport(values=ordered, total=total)
