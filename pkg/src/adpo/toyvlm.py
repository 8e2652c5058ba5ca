"""Miniature vision-language model: patch encoder, affine projector and a
prefix-conditioned causal decoder.

Projected image tokens are prepended to the text embeddings; the decoder then
runs a single causal transformer over ``[image tokens; BOS; prompt; answer]``.
Log-probabilities of a response are summed over the answer region only.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, replace
from typing import Iterable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, PreconditionError, ShapeError, VocabularyError

# How per-token log-probabilities are aggregated into log pi(y|x).
LOGPROB_AGGREGATION = "sum"

PAD_ID, BOS_ID, EOS_ID = 0, 1, 2
SPECIALS = ("<pad>", "<bos>", "<eos>")


class Vocabulary:
    """Word-level id table with reserved specials ``<pad>=0, <bos>=1, <eos>=2``."""

    def __init__(self, words: Iterable[str]):
        words = list(words)
        if len(set(words)) != len(words):
            raise ConfigError("duplicate words in vocabulary")
        if any(w in SPECIALS for w in words):
            raise ConfigError("special tokens are reserved")
        self.itos = list(SPECIALS) + words
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    def encode(self, text: str) -> list[int]:
        ids = []
        for word in text.split():
            if word not in self.stoi or word in SPECIALS:
                raise VocabularyError(word)
            ids.append(self.stoi[word])
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        """Join words up to the first EOS, skipping other specials."""
        words = []
        for i in ids:
            i = int(i)
            if i == EOS_ID:
                break
            if i < len(SPECIALS):
                continue
            if i >= len(self.itos):
                raise VocabularyError(i)
            words.append(self.itos[i])
        return " ".join(words)


@dataclass
class TokenSeq:
    """Right-padded batch of token ids with a per-token answer flag.

    ``answer_mask[b, j]`` is True when token ``j`` of row ``b`` belongs to the
    answer region. The answer region is a contiguous run ending at EOS (or at
    the last non-pad token when generation hit the length limit).
    """

    ids: torch.Tensor
    answer_mask: torch.Tensor

    def __post_init__(self):
        if self.ids.dim() != 2 or self.ids.shape != self.answer_mask.shape:
            raise ShapeError(
                f"ids {tuple(self.ids.shape)} and answer_mask "
                f"{tuple(self.answer_mask.shape)} must be matching 2-d tensors"
            )
        self.ids = self.ids.long()
        self.answer_mask = self.answer_mask.bool()

    def __len__(self) -> int:
        return self.ids.shape[0]

    @classmethod
    def from_parts(cls, prompt: Sequence[int], answers: Sequence[Sequence[int]]) -> "TokenSeq":
        """Build ``BOS + prompt + answer`` rows, right padded with PAD."""
        head = [BOS_ID, *prompt]
        width = len(head) + max((len(a) for a in answers), default=0)
        ids = torch.full((len(answers), width), PAD_ID, dtype=torch.long)
        mask = torch.zeros((len(answers), width), dtype=torch.bool)
        for row, ans in enumerate(answers):
            ids[row, : len(head)] = torch.tensor(head, dtype=torch.long)
            if ans:
                ids[row, len(head) : len(head) + len(ans)] = torch.tensor(list(ans), dtype=torch.long)
                mask[row, len(head) : len(head) + len(ans)] = True
        return cls(ids, mask)

    @classmethod
    def answer_only(cls, answer: Sequence[int]) -> "TokenSeq":
        ids = torch.tensor([list(answer)], dtype=torch.long)
        return cls(ids, torch.ones_like(ids, dtype=torch.bool))

    def answers(self) -> list[list[int]]:
        return [row[m].tolist() for row, m in zip(self.ids, self.answer_mask)]

    def answer_lengths(self) -> torch.Tensor:
        return self.answer_mask.sum(dim=1)

    def prompt_ids(self, row: int = 0) -> list[int]:
        """Prompt words of ``row`` (BOS and answer excluded)."""
        ids = self.ids[row][~self.answer_mask[row]].tolist()
        return [i for i in ids if i not in (PAD_ID, BOS_ID)]

    def select(self, index) -> "TokenSeq":
        return TokenSeq(self.ids[index], self.answer_mask[index])

    def validate(self, vocab_size: int) -> None:
        if (self.ids < 0).any() or (self.ids >= vocab_size).any():
            raise VocabularyError("token id outside vocabulary")


@dataclass(frozen=True)
class ArchConfig:
    image_size: int = 32
    channels: int = 3
    patch: int = 4
    enc_width: int = 64
    enc_depth: int = 2
    enc_heads: int = 4
    dec_width: int = 64
    dec_depth: int = 2
    dec_heads: int = 4
    mlp_ratio: int = 4
    vocab_size: int = 32
    max_text_len: int = 32

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not isinstance(value, int) or value <= 0:
                raise ConfigError(f"arch.{name} must be a positive integer, got {value!r}")
        if self.image_size % self.patch:
            raise ConfigError("arch.image_size must be a multiple of arch.patch")
        if self.enc_width % self.enc_heads or self.dec_width % self.dec_heads:
            raise ConfigError("widths must be divisible by the head counts")
        if self.vocab_size <= len(SPECIALS):
            raise ConfigError("arch.vocab_size must exceed the number of specials")

    @property
    def num_image_tokens(self) -> int:
        return (self.image_size // self.patch) ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown arch keys: {sorted(unknown)}")
        return cls(**d)

    def large(self) -> "ArchConfig":
        """Depth-4, width-128 decoder used for transfer evaluation."""
        return replace(self, dec_width=128, dec_depth=4)


class Attention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x: torch.Tensor, causal: bool) -> torch.Tensor:
        b, t, c = x.shape
        q, k, v = self.qkv(x).view(b, t, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(c // self.heads)
        if causal:
            mask = torch.ones(t, t, dtype=torch.bool, device=x.device).triu(1)
            att = att.masked_fill(mask, float("-inf"))
        y = att.softmax(dim=-1) @ v
        return self.proj(y.transpose(1, 2).reshape(b, t, c))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, width: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = Attention(width, heads)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, mlp_ratio * width), nn.GELU(), nn.Linear(mlp_ratio * width, width)
        )

    def forward(self, x: torch.Tensor, causal: bool = False) -> torch.Tensor:
        x = x + self.attn(self.ln1(x), causal)
        return x + self.mlp(self.ln2(x))


class ImageEncoder(nn.Module):
    """4x4 patch embedding followed by bidirectional pre-norm blocks."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.image_size = arch.image_size
        self.channels = arch.channels
        self.width = arch.enc_width
        self.num_tokens = arch.num_image_tokens
        self.patch_embed = nn.Conv2d(arch.channels, arch.enc_width, arch.patch, stride=arch.patch)
        self.pos = nn.Parameter(torch.zeros(1, self.num_tokens, arch.enc_width))
        self.blocks = nn.ModuleList(
            Block(arch.enc_width, arch.enc_heads, arch.mlp_ratio) for _ in range(arch.enc_depth)
        )
        self.ln = nn.LayerNorm(arch.enc_width)

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        expected = (self.channels, self.image_size, self.image_size)
        if pixels.dim() != 4 or tuple(pixels.shape[1:]) != expected:
            raise ShapeError(f"expected images of shape (B, {expected}), got {tuple(pixels.shape)}")
        x = self.patch_embed(pixels - 0.5).flatten(2).transpose(1, 2) + self.pos
        for block in self.blocks:
            x = block(x)
        return self.ln(x)


class TextDecoder(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.tok = nn.Embedding(arch.vocab_size, arch.dec_width)
        self.pos = nn.Parameter(torch.zeros(1, arch.num_image_tokens + arch.max_text_len, arch.dec_width))
        self.blocks = nn.ModuleList(
            Block(arch.dec_width, arch.dec_heads, arch.mlp_ratio) for _ in range(arch.dec_depth)
        )
        self.ln = nn.LayerNorm(arch.dec_width)
        self.head = nn.Linear(arch.dec_width, arch.vocab_size)
        self.max_len = arch.max_text_len

    def forward(self, prefix: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
        """Logits for every text position; ``out[:, j]`` predicts ``ids[:, j + 1]``."""
        if ids.shape[1] > self.max_len:
            raise ShapeError(f"text length {ids.shape[1]} exceeds max_text_len {self.max_len}")
        p = prefix.shape[1]
        x = torch.cat([prefix, self.tok(ids)], dim=1)
        x = x + self.pos[:, : x.shape[1]]
        for block in self.blocks:
            x = block(x, causal=True)
        return self.head(self.ln(x[:, p:]))


class ToyVLM(nn.Module):
    """Encoder + projector + decoder. Parameter names are prefixed by the part
    they belong to (``encoder.``, ``projector.``, ``decoder.``)."""

    def __init__(self, arch: ArchConfig, seed: int | None = None):
        super().__init__()
        self.arch = arch
        self.seed = seed
        self.encoder = ImageEncoder(arch)
        self.projector = nn.Linear(arch.enc_width, arch.dec_width)
        self.decoder = TextDecoder(arch)

    def prefix(self, pixels: torch.Tensor) -> torch.Tensor:
        return self.projector(self.encoder(pixels))

    def logits(self, pixels: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.prefix(pixels), ids)


# Reference models are plain ToyVLM instances with gradients disabled.
ReferenceModel = ToyVLM


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, (nn.Linear, nn.Conv2d)):
        nn.init.normal_(module.weight, std=0.02)
        nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Embedding):
        nn.init.normal_(module.weight, std=0.02)
    elif isinstance(module, (ImageEncoder, TextDecoder)):
        nn.init.normal_(module.pos, std=0.02)


def init_model(arch: ArchConfig | dict | None = None, seed: int = 0) -> ToyVLM:
    """Deterministically initialised model; the global RNG is left untouched."""
    if arch is None:
        arch = ArchConfig()
    elif isinstance(arch, dict):
        arch = ArchConfig.from_dict(arch)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ToyVLM(arch, seed=seed)
        model.apply(_init_weights)
    return model.eval()


def encode_image(model: ToyVLM, x: torch.Tensor) -> torch.Tensor:
    return model.encoder(x)


def answer_logprob(logits: torch.Tensor, seq: TokenSeq) -> torch.Tensor:
    """Sum of log-probabilities of the answer tokens of ``seq`` under ``logits``."""
    target_mask = seq.answer_mask[:, 1:]
    if not bool(target_mask.any(dim=1).all()):
        raise PreconditionError("every sequence needs a nonempty answer region after BOS")
    logp = F.log_softmax(logits[:, :-1], dim=-1)
    token_lp = logp.gather(-1, seq.ids[:, 1:].unsqueeze(-1)).squeeze(-1)
    return (token_lp * target_mask.to(token_lp.dtype)).sum(dim=1)


def sequence_logprob(model: ToyVLM, x: torch.Tensor, seq: TokenSeq) -> torch.Tensor:
    """log pi(answer | image, prompt) per batch item, summed over answer tokens."""
    if not bool(seq.answer_mask[:, 1:].any(dim=1).all()):
        raise PreconditionError("every sequence needs a nonempty answer region after BOS")
    return answer_logprob(model.logits(x, seq.ids), seq)


@dataclass(frozen=True)
class DecodeConfig:
    greedy: bool = True
    temperature: float = 1.0
    max_len: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.max_len < 1:
            raise ConfigError("decode max_len must be >= 1")
        if not self.greedy and self.temperature <= 0:
            raise ConfigError("sampling temperature must be positive")


@torch.no_grad()
def generate(
    model: ToyVLM, x: torch.Tensor, prompt: Sequence[int], cfg: DecodeConfig = DecodeConfig()
) -> TokenSeq:
    """Decode an answer for every image; rows that emit EOS are PAD-filled."""
    b = x.shape[0]
    prefix = model.prefix(x)
    head = torch.tensor([BOS_ID, *prompt], dtype=torch.long)
    ids = head.expand(b, -1).clone()
    done = torch.zeros(b, dtype=torch.bool)
    gen = None if cfg.greedy else torch.Generator().manual_seed(cfg.seed)
    for _ in range(cfg.max_len):
        logits = model.decoder(prefix, ids)[:, -1]
        if cfg.greedy:
            nxt = logits.argmax(dim=-1)
        else:
            probs = torch.softmax(logits.double() / cfg.temperature, dim=-1)
            nxt = torch.multinomial(probs, 1, generator=gen).squeeze(1)
        nxt = torch.where(done, torch.full_like(nxt, PAD_ID), nxt)
        ids = torch.cat([ids, nxt.unsqueeze(1)], dim=1)
        done |= nxt == EOS_ID
        if bool(done.all()):
            break
    mask = torch.zeros_like(ids, dtype=torch.bool)
    mask[:, head.numel() :] = ids[:, head.numel() :] != PAD_ID
    return TokenSeq(ids, mask)


def clone_frozen(model: ToyVLM) -> ToyVLM:
    """Deep copy with gradients disabled; later updates to ``model`` never reach it."""
    ref = copy.deepcopy(model)
    ref.requires_grad_(False)
    return ref.eval()


def swap_encoder(model: ToyVLM, encoder: ImageEncoder | dict) -> ToyVLM:
    """Copy of ``model`` whose image encoder is replaced by ``encoder``."""
    out = copy.deepcopy(model)
    if isinstance(encoder, ImageEncoder):
        if encoder.width != model.projector.in_features:
            raise ShapeError(
                f"encoder width {encoder.width} != projector input {model.projector.in_features}"
            )
        if encoder.num_tokens != model.arch.num_image_tokens:
            raise ShapeError("encoder token count does not match the decoder prefix length")
        out.encoder = copy.deepcopy(encoder)
    else:
        state = {k.removeprefix("encoder."): v for k, v in encoder.items()}
        own = out.encoder.state_dict()
        for name, value in state.items():
            if name not in own or own[name].shape != value.shape:
                raise ShapeError(f"encoder parameter {name!r} does not fit the target model")
        out.encoder.load_state_dict(state)
    return out


def part_parameters(model: ToyVLM, part: str) -> dict[str, torch.Tensor]:
    """Named parameters of one model part (``encoder``/``projector``/``decoder``)."""
    return {n: p for n, p in model.named_parameters() if n.split(".", 1)[0] == part}


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
