"""Encoder-only adversarial preference training.

Each step attacks the current encoder (targets from the frozen original
encoder), builds preference pairs online, evaluates the loss and applies an
AdamW update to the image encoder only.  The reference model and the original
encoder are frozen snapshots taken when training starts.
"""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from .attacks import AttackConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, TrainingDiverged
from .losses import LossConfig, adpo_loss, fare_baseline_loss, preferred_image_loss
from .prefgen import build_batch
from .toyvlm import DecodeConfig, ToyVLM, clone_frozen

OBJECTIVES = ("adpo", "lp-only", "fare-baseline")

# Values used at full scale; the desk-scale defaults below differ where noted
# in the run manifest.
FULL_SCALE_SETTINGS = {
    "pgd_steps": 10,
    "beta": 0.1,
    "lambda": 1.0,
    "learning_rate": 1e-5,
    "weight_decay": 1e-4,
    "batch_size": 128,
    "epochs": 2,
    "epsilon": [2 / 255, 4 / 255],
}


@dataclass(frozen=True)
class TrainConfig:
    epsilon: float = 4 / 255
    pgd_steps: int = 10
    pgd_init: str = "random"
    beta: float = 0.1
    lam: float = 1.0
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 16
    epochs: int = 2
    objective: str = "adpo"
    variant: str = "dpo"
    ipo_tau: float = 0.5
    simpo_gamma: float = 0.5
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown training objective {self.objective!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.pgd_steps < 0:
            raise ConfigError("batch_size >= 1, epochs >= 0 and pgd_steps >= 0 required")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and weight_decay must be >= 0")
        self.loss_config()  # validates beta / lambda / variant

    def loss_config(self) -> LossConfig:
        lam = 0.0 if self.objective == "lp-only" else self.lam
        return LossConfig(self.beta, lam, self.variant, self.ipo_tau, self.simpo_gamma)

    def attack_config(self, seed: int) -> AttackConfig:
        return AttackConfig(
            epsilon=self.epsilon, steps=self.pgd_steps, init=self.pgd_init, objective="feature-discrepancy", seed=seed
        )

    def deviations(self) -> dict:
        """Settings that differ from the full-scale training recipe."""
        out = {}
        mine = {**asdict(self), "lambda": self.lam}
        for key, ref in FULL_SCALE_SETTINGS.items():
            value = mine[key]
            if (value not in ref) if isinstance(ref, list) else (value != ref):
                out[key] = {"used": value, "full_scale": ref}
        return out


@dataclass
class TrainState:
    policy: ToyVLM
    reference: ToyVLM
    encoder_original: torch.nn.Module
    optimizer: torch.optim.Optimizer
    step: int = 0
    metrics: list[dict] = field(default_factory=list)


def init_state(base: ToyVLM, cfg: TrainConfig) -> TrainState:
    """Policy copy with only the encoder trainable, plus frozen snapshots."""
    policy = copy.deepcopy(base)
    policy.requires_grad_(False)
    policy.encoder.requires_grad_(True)
    policy.eval()
    reference = clone_frozen(base)
    encoder_original = clone_frozen(base).encoder
    optimizer = torch.optim.AdamW(
        policy.encoder.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay, foreach=False
    )
    return TrainState(policy, reference, encoder_original, optimizer)


def _step_seed(seed: int, step: int) -> int:
    return (int(seed) * 7_919 + step * 104_729) % (2**31 - 1)


def _dump_and_raise(state: TrainState, record: dict, dump_dir: Path | None) -> None:
    if dump_dir is not None:
        dump_dir.mkdir(parents=True, exist_ok=True)
        (dump_dir / f"diverged_step{state.step}.json").write_text(json.dumps(record, indent=2, default=str))
    raise TrainingDiverged(f"non-finite loss at step {state.step}: {record}")


def train_step(
    state: TrainState,
    images: torch.Tensor,
    cfg: TrainConfig,
    prompt: Sequence[int],
    decode_cfg: DecodeConfig = DecodeConfig(),
    dump_dir: Path | None = None,
) -> dict:
    """One optimisation step; returns the metrics record for this step."""
    t0 = time.perf_counter()
    policy = state.policy
    attack_cfg = cfg.attack_config(_step_seed(cfg.seed, state.step))
    batch = build_batch(policy, state.encoder_original, images, prompt, attack_cfg, decode_cfg)
    record = {
        "step": state.step + 1,
        "n_pairs": len(batch),
        "skip_rate": batch.skip_rate,
        "total": None,
        "l_p": None,
        "l_a": None,
        "margin": None,
        "chosen_logratio": None,
        "rejected_logratio": None,
        "grad_norm": 0.0,
        "updated": False,
    }
    loss = None
    if cfg.objective == "fare-baseline":
        loss = fare_baseline_loss(policy.encoder, state.encoder_original, images, batch.x_adv)
        record["total"] = float(loss.detach())
    elif len(batch):
        if cfg.objective == "lp-only":
            loss = preferred_image_loss(policy, state.reference, batch, cfg.beta)
            record.update(total=float(loss.detach()), l_p=float(loss.detach()))
        else:
            breakdown = adpo_loss(policy, state.reference, batch, cfg.loss_config())
            loss = breakdown.total
            record.update(breakdown.scalars())
    if loss is not None:
        if not torch.isfinite(loss):
            _dump_and_raise(state, record, dump_dir)
        state.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        params = list(policy.encoder.parameters())
        norm = torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip) if cfg.grad_clip > 0 else torch.sqrt(
            sum(p.grad.pow(2).sum() for p in params)
        )
        state.optimizer.step()
        state.optimizer.zero_grad(set_to_none=True)
        record["grad_norm"] = float(norm)
        record["updated"] = True
    state.step += 1
    record["wall_time"] = time.perf_counter() - t0
    state.metrics.append(record)
    return record


def batch_schedule(n: int, cfg: TrainConfig) -> list[torch.Tensor]:
    """Index batches for every step: a seeded permutation per epoch."""
    out = []
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=torch.Generator().manual_seed(cfg.seed * 1_000 + epoch))
        out.extend(perm[i : i + cfg.batch_size] for i in range(0, n, cfg.batch_size))
    return out


def total_steps(n: int, cfg: TrainConfig) -> int:
    return cfg.epochs * math.ceil(n / cfg.batch_size)


# -- optimizer state persistence ---------------------------------------------

def optimizer_tensors(state: TrainState) -> dict[str, torch.Tensor]:
    names = {id(p): n for n, p in state.policy.encoder.named_parameters()}
    out = {}
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            st = state.optimizer.state.get(p)
            if not st:
                continue
            name = names[id(p)]
            out[f"exp_avg.{name}"] = st["exp_avg"]
            out[f"exp_avg_sq.{name}"] = st["exp_avg_sq"]
            out[f"step.{name}"] = torch.as_tensor(st["step"], dtype=torch.float32).reshape(1)
    return out


def load_optimizer_tensors(state: TrainState, tensors: dict[str, torch.Tensor]) -> None:
    for name, p in state.policy.encoder.named_parameters():
        if f"exp_avg.{name}" not in tensors:
            continue
        state.optimizer.state[p] = {
            "step": torch.tensor(float(tensors[f"step.{name}"][0])),
            "exp_avg": tensors[f"exp_avg.{name}"].clone(),
            "exp_avg_sq": tensors[f"exp_avg_sq.{name}"].clone(),
        }


def save_train_checkpoint(path: Path, state: TrainState) -> str:
    model = state.policy
    digest = save_checkpoint(path, dict(model.state_dict()), model.arch.to_dict(), model.seed, state.step)
    save_checkpoint(path.with_suffix(".optim"), optimizer_tensors(state), model.arch.to_dict(), model.seed, state.step)
    return digest


def restore_train_checkpoint(path: Path, state: TrainState) -> None:
    header, tensors = load_checkpoint(path)
    state.policy.load_state_dict(tensors)
    _, opt = load_checkpoint(Path(path).with_suffix(".optim"))
    load_optimizer_tensors(state, opt)
    state.step = int(header["step"])

