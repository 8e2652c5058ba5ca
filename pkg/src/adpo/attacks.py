"""l-infinity bounded gradient attacks on images.

Four objectives share one ascent engine:

* ``feature-discrepancy``: squared distance between the current encoder's
  features of the perturbed image and the frozen original encoder's features
  of the clean image (training-time adversary, plain sign-PGD).
* ``caption-nll-untargeted``: negative log-likelihood of the ground-truth
  caption (evaluation adversary).
* ``caption-nll-targeted``: log-likelihood of a target answer.
* ``margin``: C&W-style per-token logit margin.

The evaluation attacks use momentum sign steps with the step size halved at
30%, 60% and 90% of the budget, restarting from the best iterate each time.
All results report the best iterate per item.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
from typing import Callable, Sequence

import torch

from .errors import ConfigError, PreconditionError, ShapeError, VocabularyError
from .toyvlm import DecodeConfig, TokenSeq, ToyVLM, Vocabulary, generate, sequence_logprob

OBJECTIVES = ("feature-discrepancy", "caption-nll-untargeted", "caption-nll-targeted", "margin")
HALVING_POINTS = (0.3, 0.6, 0.9)


@dataclass(frozen=True)
class PerturbationBudget:
    epsilon: float
    norm: str = "linf"

    def __post_init__(self):
        if not 0 < self.epsilon <= 1:
            raise ConfigError("epsilon must lie in (0, 1]")
        if self.norm != "linf":
            raise ConfigError("only the linf threat model is supported")


@dataclass(frozen=True)
class AttackConfig:
    """Attack hyper-parameters.

    ``step_size=None`` picks the default for the objective: ``2.5 * eps / steps``
    for feature PGD and ``2 * eps`` (initial, halved on schedule) for the
    momentum attacks. ``epsilon=0`` is accepted and collapses the ball.
    """

    epsilon: float
    steps: int = 10
    step_size: float | None = None
    init: str = "zero"
    objective: str = "feature-discrepancy"
    seed: int = 0
    momentum: float = 0.75
    kappa: float = 0.0
    check_every: int = 50

    def __post_init__(self):
        if not 0 <= self.epsilon <= 1:
            raise ConfigError("epsilon must lie in [0, 1]")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.step_size is not None and self.steps > 0 and self.step_size <= 0:
            raise ConfigError("step_size must be positive")
        if self.init not in ("zero", "random"):
            raise ConfigError(f"unknown init {self.init!r}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.check_every < 1:
            raise ConfigError("check_every must be >= 1")

    @property
    def budget(self) -> PerturbationBudget:
        return PerturbationBudget(self.epsilon)

    def resolved_step_size(self) -> float:
        if self.step_size is not None:
            return self.step_size
        if self.objective == "feature-discrepancy":
            return 2.5 * self.epsilon / max(self.steps, 1)
        return 2.0 * self.epsilon

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown attack keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AttackResult:
    x_adv: torch.Tensor
    objective_trace: torch.Tensor  # (steps + 1, batch), entry 0 is the initial point
    best_step: torch.Tensor  # (batch,)
    success: torch.Tensor | None = None  # targeted attacks only

    @property
    def best_objective(self) -> torch.Tensor:
        return self.objective_trace.gather(0, self.best_step.unsqueeze(0)).squeeze(0)

    def write_csv(self, path) -> None:
        """One row per (step, item) with the objective value."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "item", "objective"])
            for step, row in enumerate(self.objective_trace.tolist()):
                for item, value in enumerate(row):
                    w.writerow([step, item, repr(float(value))])


def project_linf(x: torch.Tensor, x_clean: torch.Tensor, eps: float) -> torch.Tensor:
    """Clamp ``x`` into ``[x_clean - eps, x_clean + eps] ∩ [0, 1]``.

    Bounds are computed in double precision, rounded to the working dtype and
    nudged inward by ulps where rounding left them outside the ball, so that
    ``|x - x_clean| <= eps`` holds exactly when checked in double precision.
    """
    if x.shape != x_clean.shape:
        raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_clean.shape)}")
    xd = x_clean.double()
    upper = (xd + eps).to(x.dtype)
    lower = (xd - eps).to(x.dtype)
    while True:
        bad_u = upper.double() - xd > eps
        bad_l = xd - lower.double() > eps
        if not bool(bad_u.any() or bad_l.any()):
            break
        upper = torch.where(bad_u, torch.nextafter(upper, torch.full_like(upper, -1.0)), upper)
        lower = torch.where(bad_l, torch.nextafter(lower, torch.full_like(lower, 2.0)), lower)
    return torch.minimum(torch.maximum(x, lower), upper).clamp(0.0, 1.0)


def _item_generator(seed: int, index: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed) * 1_000_003 + index)


def _initial_point(x_clean: torch.Tensor, cfg: AttackConfig) -> torch.Tensor:
    if cfg.init == "zero" or cfg.epsilon == 0:
        return x_clean.clone()
    noise = torch.stack(
        [
            torch.rand(x_clean.shape[1:], generator=_item_generator(cfg.seed, i), dtype=x_clean.dtype)
            for i in range(x_clean.shape[0])
        ]
    )
    return project_linf(x_clean + (2 * noise - 1) * cfg.epsilon, x_clean, cfg.epsilon)


def _value_and_grad(objective: Callable, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    x = x.detach().requires_grad_(True)
    with torch.enable_grad():
        value = objective(x)
        (grad,) = torch.autograd.grad(value.sum(), x)
    return value.detach(), grad.detach()


def ascend(
    objective: Callable[[torch.Tensor], torch.Tensor],
    x_clean: torch.Tensor,
    cfg: AttackConfig,
    momentum_schedule: bool,
    success_fn: Callable[[torch.Tensor], torch.Tensor] | None = None,
) -> AttackResult:
    """Maximise a per-item ``objective`` over the l-inf ball around ``x_clean``.

    With ``momentum_schedule`` the update is the APGD-style momentum step with
    fixed halving points; otherwise plain sign-gradient PGD. When ``success_fn``
    is given it is evaluated on the best iterate at step 0, every
    ``cfg.check_every`` steps and at the end; items that succeed are frozen.
    """
    eps = cfg.epsilon
    steps = cfg.steps
    b = x_clean.shape[0]
    eta = cfg.resolved_step_size()
    x = _initial_point(x_clean, cfg)
    value, grad = _value_and_grad(objective, x)
    trace = [value]
    best_x, best_val, best_grad = x.clone(), value.clone(), grad.clone()
    best_step = torch.zeros(b, dtype=torch.long)
    active = torch.ones(b, dtype=torch.bool)
    success = None
    if success_fn is not None:
        success = success_fn(best_x)
        active &= ~success
    halve_at = {max(1, int(p * steps)) for p in HALVING_POINTS} if momentum_schedule else set()
    x_prev = x
    view = (-1,) + (1,) * (x_clean.dim() - 1)
    for k in range(1, steps + 1):
        if not bool(active.any()):
            trace.append(trace[-1])
            continue
        step = eta * grad.sign()
        z = project_linf(x + step, x_clean, eps)
        if momentum_schedule and k > 1:
            a = cfg.momentum
            z = project_linf(x + a * (z - x) + (1 - a) * (x - x_prev), x_clean, eps)
        z = torch.where(active.view(view), z, x)
        x_prev, x = x, z
        value, grad = _value_and_grad(objective, x)
        trace.append(value)
        improved = (value > best_val) & active
        if bool(improved.any()):
            m = improved.view(view)
            best_x = torch.where(m, x, best_x)
            best_grad = torch.where(m, grad, best_grad)
            best_val = torch.where(improved, value, best_val)
            best_step = torch.where(improved, torch.full_like(best_step, k), best_step)
        if k in halve_at:
            eta /= 2
            x, x_prev, grad = best_x.clone(), best_x.clone(), best_grad.clone()
        if success_fn is not None and (k % cfg.check_every == 0 or k == steps):
            newly = success_fn(best_x) & active
            success |= newly
            active &= ~newly
            if bool(newly.any()):
                m = newly.view(view)
                x = torch.where(m, best_x, x)
                x_prev = torch.where(m, best_x, x_prev)
    return AttackResult(best_x.detach(), torch.stack(trace), best_step, success)


def feature_discrepancy(encoder: torch.nn.Module, x: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-item squared l2 distance ``||encoder(x) - target||^2``."""
    return (encoder(x) - target).pow(2).flatten(1).sum(dim=1)


def pgd_feature_attack(
    encoder_current: torch.nn.Module,
    encoder_original: torch.nn.Module,
    x_clean: torch.Tensor,
    cfg: AttackConfig,
) -> AttackResult:
    if cfg.objective != "feature-discrepancy":
        raise ConfigError("pgd_feature_attack needs objective='feature-discrepancy'")
    with torch.no_grad():
        target = encoder_original(x_clean)
    return ascend(lambda x: feature_discrepancy(encoder_current, x, target), x_clean, cfg, momentum_schedule=False)


def _expand_seq(seq: TokenSeq, n: int) -> TokenSeq:
    if len(seq) == n:
        return seq
    if len(seq) == 1:
        return TokenSeq(seq.ids.expand(n, -1), seq.answer_mask.expand(n, -1))
    raise ShapeError(f"sequence batch {len(seq)} does not match image batch {n}")


def _check_answer(seq: TokenSeq) -> None:
    if not bool(seq.answer_mask[:, 1:].any(dim=1).all()):
        raise PreconditionError("caption lacks an answer region")


def apgd_caption_attack(model: ToyVLM, x_clean: torch.Tensor, gt_caption: TokenSeq, cfg: AttackConfig) -> AttackResult:
    """Untargeted attack maximising the answer-region NLL of ``gt_caption``."""
    if cfg.objective != "caption-nll-untargeted":
        raise ConfigError("apgd_caption_attack needs objective='caption-nll-untargeted'")
    seq = _expand_seq(gt_caption, x_clean.shape[0])
    _check_answer(seq)
    return ascend(lambda x: -sequence_logprob(model, x, seq), x_clean, cfg, momentum_schedule=True)


def margin_objective(logits: torch.Tensor, seq: TokenSeq, kappa: float = 0.0) -> torch.Tensor:
    """Sum over answer tokens of ``min(best_other_logit - gt_logit, kappa)``.

    This is the negated C&W hinge ``max(gt - best_other, -kappa)``: it is
    negative while the ground-truth token still wins and saturates at
    ``kappa`` (zero gradient) once another token overtakes it.
    """
    logits = logits[:, :-1]
    target = seq.ids[:, 1:]
    mask = seq.answer_mask[:, 1:]
    gt = logits.gather(-1, target.unsqueeze(-1)).squeeze(-1)
    others = logits.scatter(-1, target.unsqueeze(-1), float("-inf"))
    best_other = others.max(dim=-1).values
    per_token = torch.clamp(best_other - gt, max=kappa)
    return (per_token * mask.to(per_token.dtype)).sum(dim=1)


def margin_attack(model: ToyVLM, x_clean: torch.Tensor, gt_caption: TokenSeq, cfg: AttackConfig) -> AttackResult:
    if cfg.objective != "margin":
        raise ConfigError("margin_attack needs objective='margin'")
    seq = _expand_seq(gt_caption, x_clean.shape[0])
    _check_answer(seq)
    return ascend(
        lambda x: margin_objective(model.logits(x, seq.ids), seq, cfg.kappa), x_clean, cfg, momentum_schedule=True
    )


def contains_target(vocab: Vocabulary, answers: Sequence[Sequence[int]], target: str) -> torch.Tensor:
    """Whole-word containment of ``target`` in each decoded answer."""
    padded = f" {target} "
    return torch.tensor([padded in f" {vocab.decode(a)} " for a in answers], dtype=torch.bool)


def targeted_attack(
    model: ToyVLM,
    x_clean: torch.Tensor,
    prompt: Sequence[int],
    target_string: str,
    cfg: AttackConfig,
    vocab: Vocabulary,
    decode_cfg: DecodeConfig = DecodeConfig(),
) -> AttackResult:
    """Drive greedy decoding towards ``target_string``; ``result.success`` marks
    items whose decoded answer at ``x_adv`` contains the target."""
    if cfg.objective != "caption-nll-targeted":
        raise ConfigError("targeted_attack needs objective='caption-nll-targeted'")
    from .toyvlm import EOS_ID

    try:
        target_ids = vocab.encode(target_string) + [EOS_ID]
    except VocabularyError as exc:
        raise VocabularyError(f"target string is not tokenizable: {exc}") from None
    seq = TokenSeq.from_parts(prompt, [target_ids] * x_clean.shape[0])

    def succeeded(x: torch.Tensor) -> torch.Tensor:
        return contains_target(vocab, generate(model, x, prompt, decode_cfg).answers(), target_string)

    return ascend(lambda x: sequence_logprob(model, x, seq), x_clean, cfg, momentum_schedule=True, success_fn=succeeded)
