"""Online preference pairs: the policy's answer on the clean image is the
preferred response, its answer on the adversarial image the rejected one.

Nothing here reads ground-truth captions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch

from .attacks import AttackConfig, pgd_feature_attack
from .toyvlm import DecodeConfig, TokenSeq, ToyVLM, generate


@dataclass
class PreferencePair:
    x_m: torch.Tensor  # clean image (3, H, W)
    x_adv: torch.Tensor
    prompt: list[int]
    y_w: list[int]  # answer ids, EOS included when generated
    y_l: list[int]
    index: int = -1  # position in the source batch

    def __post_init__(self):
        if not self.y_w or not self.y_l:
            raise ValueError("preference responses need nonempty answers")


@dataclass
class PairBatch:
    pairs: list[PreferencePair]
    skipped: int = 0
    total: int = 0
    x_adv: torch.Tensor | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]

    @property
    def skip_rate(self) -> float:
        return self.skipped / self.total if self.total else 0.0


@dataclass
class PairTensors:
    """Collated pairs ready for the losses."""

    x_m: torch.Tensor
    x_adv: torch.Tensor
    chosen: TokenSeq
    rejected: TokenSeq

    def __len__(self) -> int:
        return self.x_m.shape[0]

    def to(self, dtype: torch.dtype) -> "PairTensors":
        return PairTensors(self.x_m.to(dtype), self.x_adv.to(dtype), self.chosen, self.rejected)


def collate(pairs) -> PairTensors:
    if isinstance(pairs, PairTensors):
        return pairs
    pairs = list(pairs)
    if not pairs:
        raise ValueError("cannot collate an empty pair list")
    prompt = pairs[0].prompt
    return PairTensors(
        torch.stack([p.x_m for p in pairs]),
        torch.stack([p.x_adv for p in pairs]),
        TokenSeq.from_parts(prompt, [p.y_w for p in pairs]),
        TokenSeq.from_parts(prompt, [p.y_l for p in pairs]),
    )


def build_pairs(
    policy: ToyVLM,
    x_m: torch.Tensor,
    x_adv: torch.Tensor,
    prompt: Sequence[int],
    decode_cfg: DecodeConfig = DecodeConfig(),
) -> list[PreferencePair | None]:
    """Batched :func:`build_pair`; ``None`` marks a skipped (degenerate) pair."""
    y_w = generate(policy, x_m, prompt, decode_cfg).answers()
    y_l = generate(policy, x_adv, prompt, decode_cfg).answers()
    out: list[PreferencePair | None] = []
    for i, (w, l) in enumerate(zip(y_w, y_l)):
        out.append(None if w == l else PreferencePair(x_m[i], x_adv[i], list(prompt), w, l, i))
    return out


def build_pair(policy, x_m, x_adv, prompt, decode_cfg: DecodeConfig = DecodeConfig()) -> PreferencePair | None:
    """Pair for a single image (``x_m`` of shape (3, H, W)), or None when y_w == y_l."""
    return build_pairs(policy, x_m.unsqueeze(0), x_adv.unsqueeze(0), prompt, decode_cfg)[0]


def build_batch(
    policy: ToyVLM,
    encoder_original: torch.nn.Module,
    images: torch.Tensor,
    prompt: Sequence[int],
    attack_cfg: AttackConfig,
    decode_cfg: DecodeConfig = DecodeConfig(),
) -> PairBatch:
    """Attack every image against the policy's current encoder, then pair up."""
    if images.shape[0] == 0:
        raise ValueError("build_batch needs at least one image")
    result = pgd_feature_attack(policy.encoder, encoder_original, images, attack_cfg)
    built = build_pairs(policy, images, result.x_adv, prompt, decode_cfg)
    pairs = [p for p in built if p is not None]
    return PairBatch(pairs, skipped=len(built) - len(pairs), total=len(built), x_adv=result.x_adv)
