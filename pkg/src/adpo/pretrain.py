"""Supervised captioning pretraining: produces the undefended toy model.

This is the only training stage that reads ground-truth captions.  Every
step draws scenes from the non-eval pool with fresh render seeds, so the
model sees position/size jitter rather than a fixed image set.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError
from .evalharness import EvalContext, eval_clean
from .shapesdata import EvalSplit, Scene, caption_ids, pretrain_scenes, render_batch, split_scenes
from .toyvlm import ArchConfig, TokenSeq, ToyVLM, init_model, sequence_logprob

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PretrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 32
    min_steps: int = 1200
    max_steps: int = 6000
    eval_every: int = 200
    gate: float = 0.9
    n_gate_eval: int = 64
    grad_clip: float = 1.0
    seed: int = 0
    decoder: str = "small"

    def __post_init__(self):
        if self.decoder not in ("small", "large"):
            raise ConfigError("pretrain.decoder must be 'small' or 'large'")
        if self.max_steps < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("invalid pretrain schedule")


@dataclass
class PretrainResult:
    model: ToyVLM
    steps: int
    score: float
    passed: bool
    history: list[tuple[int, float]]


def pretrain_captioner(
    arch: ArchConfig,
    cfg: PretrainConfig,
    data_seed: int = 0,
    n_eval: int = 100,
    ctx: EvalContext | None = None,
    encoder_from: ToyVLM | None = None,
    on_eval=None,
) -> PretrainResult:
    """Train all parameters (or projector + decoder when ``encoder_from`` is
    given, whose encoder is then copied in and frozen) until the clean score
    on the first ``n_gate_eval`` held-out scenes reaches ``cfg.gate`` after
    ``min_steps``, or ``max_steps`` is exhausted."""
    ctx = ctx or EvalContext()
    if cfg.decoder == "large":
        arch = arch.large()
    model = init_model(arch, cfg.seed)
    params = list(model.parameters())
    if encoder_from is not None:
        model.encoder.load_state_dict(encoder_from.encoder.state_dict())
        model.encoder.requires_grad_(False)
        params = [p for n, p in model.named_parameters() if not n.startswith("encoder.")]
    eval_scenes, _, _ = split_scenes(data_seed, 1, n_eval)
    gate_scenes = eval_scenes[: cfg.n_gate_eval]
    gate_split = EvalSplit(render_batch(gate_scenes), tuple(gate_scenes))
    pool = pretrain_scenes(data_seed, n_eval)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay, foreach=False)
    prompt = ctx.prompt

    history: list[tuple[int, float]] = []
    score = eval_clean(model, gate_split, ctx)
    history.append((0, score))
    step = 0
    while step < cfg.max_steps:
        idx = rng.integers(0, len(pool), cfg.batch_size)
        seeds = rng.integers(1, 2**31 - 1, cfg.batch_size)
        scenes = [Scene(pool[i].shapes, int(s)) for i, s in zip(idx, seeds)]
        x = render_batch(scenes)
        seq = TokenSeq.from_parts(prompt, [caption_ids(s, ctx.vocab) for s in scenes])
        loss = -sequence_logprob(model, x, seq).mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        step += 1
        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            score = eval_clean(model, gate_split, ctx)
            history.append((step, score))
            log.info("pretrain step %d loss %.4f clean %.4f", step, float(loss.detach()), score)
            if on_eval is not None:
                on_eval(step, float(loss.detach()), score)
            if step >= cfg.min_steps and score >= cfg.gate:
                break
    model.requires_grad_(True)
    model.eval()
    return PretrainResult(copy.deepcopy(model), step, score, score >= cfg.gate, history)
