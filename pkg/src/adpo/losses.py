"""Preference and adversarial losses.

Sequence log-probabilities are sums over answer tokens; every loss is an
arithmetic mean over pairs.  The preferred-image DPO term scores ``y_w``
given the clean image and ``y_l`` given the adversarial image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

from .errors import ConfigError, PreconditionError
from .prefgen import PairTensors, collate
from .toyvlm import TokenSeq, ToyVLM, sequence_logprob

VARIANTS = ("dpo", "ipo", "simpo")


@dataclass(frozen=True)
class LossConfig:
    beta: float = 0.1
    lam: float = 1.0
    variant: str = "dpo"
    ipo_tau: float = 0.5
    simpo_gamma: float = 0.5

    def __post_init__(self):
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown loss variant {self.variant!r}")
        if self.ipo_tau <= 0:
            raise ConfigError("ipo tau must be positive")


@dataclass
class LossBreakdown:
    total: torch.Tensor
    l_p: torch.Tensor
    l_a: torch.Tensor
    margin: float
    chosen_logratio: float
    rejected_logratio: float

    def scalars(self) -> dict[str, float]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        return out


# -- closed forms on precomputed log-probabilities --------------------------

def dpo_from_logps(pc, pr, rc, rr, beta: float) -> torch.Tensor:
    """``-log sigmoid(beta * ((pc - rc) - (pr - rr)))`` averaged over the batch."""
    return -F.logsigmoid(beta * ((pc - rc) - (pr - rr))).mean()


def ipo_from_logps(pc, pr, rc, rr, tau: float) -> torch.Tensor:
    if tau <= 0:
        raise ConfigError("ipo tau must be positive")
    margin = (pc - rc) - (pr - rr)
    return (margin - 1.0 / (2.0 * tau)).pow(2).mean()


def simpo_from_logps(pc, pr, len_c, len_r, beta: float, gamma: float) -> torch.Tensor:
    return -F.logsigmoid(beta * (pc / len_c - pr / len_r) - gamma).mean()


# -- model-level losses ------------------------------------------------------

def _policy_ref_logps(policy: ToyVLM, ref: ToyVLM, x_w, x_l, batch: PairTensors):
    pc = sequence_logprob(policy, x_w, batch.chosen)
    pr = sequence_logprob(policy, x_l, batch.rejected)
    with torch.no_grad():
        rc = sequence_logprob(ref, x_w, batch.chosen)
        rr = sequence_logprob(ref, x_l, batch.rejected)
    return pc, pr, rc, rr


def dpo_loss(policy: ToyVLM, ref: ToyVLM, x_w_img, x_l_img, pairs, beta: float) -> torch.Tensor:
    """DPO with ``y_w`` scored on ``x_w_img`` and ``y_l`` on ``x_l_img``."""
    batch = collate(pairs)
    return dpo_from_logps(*_policy_ref_logps(policy, ref, x_w_img, x_l_img, batch), beta)


def preferred_image_loss(policy: ToyVLM, ref: ToyVLM, pairs, beta: float) -> torch.Tensor:
    batch = collate(pairs)
    return dpo_loss(policy, ref, batch.x_m, batch.x_adv, batch, beta)


def lm_loss_adversarial(policy: ToyVLM, x_adv: torch.Tensor, chosen: TokenSeq) -> torch.Tensor:
    """``-sum_t log pi(y_w^t | x_adv, prompt, y_w^{<t})`` averaged over the batch.

    ``chosen`` is the full prompt+answer sequence; only answer tokens count.
    """
    if not bool(chosen.answer_mask[:, 1:].any(dim=1).all()):
        raise PreconditionError("y_w needs a nonempty answer region")
    return -sequence_logprob(policy, x_adv, chosen).mean()


def ipo_loss(policy: ToyVLM, ref: ToyVLM, pairs, tau: float) -> torch.Tensor:
    if tau <= 0:
        raise ConfigError("ipo tau must be positive")
    batch = collate(pairs)
    return ipo_from_logps(*_policy_ref_logps(policy, ref, batch.x_m, batch.x_adv, batch), tau)


def simpo_loss(policy: ToyVLM, pairs, beta: float, gamma: float) -> torch.Tensor:
    """Reference-free, length-normalised preference loss."""
    batch = collate(pairs)
    pc = sequence_logprob(policy, batch.x_m, batch.chosen)
    pr = sequence_logprob(policy, batch.x_adv, batch.rejected)
    len_c = batch.chosen.answer_lengths().to(pc.dtype)
    len_r = batch.rejected.answer_lengths().to(pr.dtype)
    return simpo_from_logps(pc, pr, len_c, len_r, beta, gamma)


def fare_baseline_loss(encoder_current, encoder_original, x_m: torch.Tensor, x_adv: torch.Tensor) -> torch.Tensor:
    """``||enc(x_adv) - enc_org(x_m)||^2`` per item, averaged over the batch."""
    with torch.no_grad():
        target = encoder_original(x_m)
    return (encoder_current(x_adv) - target).pow(2).flatten(1).sum(dim=1).mean()


def adpo_loss(policy: ToyVLM, ref: ToyVLM, pairs, cfg: LossConfig = LossConfig()) -> LossBreakdown:
    """``total = l_p + lam * l_a`` with the preference term chosen by ``cfg.variant``.

    With ``lam == 0`` the adversarial term is still reported but kept out of
    the graph, so gradients equal those of the preference term alone.
    """
    batch = collate(pairs)
    pc, pr, rc, rr = _policy_ref_logps(policy, ref, batch.x_m, batch.x_adv, batch)
    if cfg.variant == "dpo":
        l_p = dpo_from_logps(pc, pr, rc, rr, cfg.beta)
    elif cfg.variant == "ipo":
        l_p = ipo_from_logps(pc, pr, rc, rr, cfg.ipo_tau)
    else:
        len_c = batch.chosen.answer_lengths().to(pc.dtype)
        len_r = batch.rejected.answer_lengths().to(pr.dtype)
        l_p = simpo_from_logps(pc, pr, len_c, len_r, cfg.beta, cfg.simpo_gamma)
    if cfg.lam == 0:
        with torch.no_grad():
            l_a = lm_loss_adversarial(policy, batch.x_adv, batch.chosen)
    else:
        l_a = lm_loss_adversarial(policy, batch.x_adv, batch.chosen)
    total = l_p + cfg.lam * l_a
    chosen_lr = (pc - rc).detach()
    rejected_lr = (pr - rr).detach()
    return LossBreakdown(
        total=total,
        l_p=l_p,
        l_a=l_a,
        margin=float((cfg.beta * (chosen_lr - rejected_lr)).mean()),
        chosen_logratio=float(chosen_lr.mean()),
        rejected_logratio=float(rejected_lr.mean()),
    )


LN2 = math.log(2.0)
