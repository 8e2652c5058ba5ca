"""Clean / robust captioning evaluation, targeted attack success rate,
encoder transfer and ablation sweeps."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .attacks import AttackConfig, apgd_caption_attack, margin_attack, targeted_attack
from .errors import ConfigError, PreconditionError
from .shapesdata import DEFAULT_PROMPT, FUNCTION_WORDS, EvalSplit, caption_ids, default_vocabulary
from .toyvlm import DecodeConfig, TokenSeq, ToyVLM, Vocabulary, generate, swap_encoder

ATTACK_KINDS = ("caption-nll-untargeted", "margin")
# Aliases accepted by the ablation harness and the CLI.
ATTACK_ALIASES = {"caption-nll": "caption-nll-untargeted", "apgd": "caption-nll-untargeted"}

DEFAULT_TARGETS = (
    "a yellow triangle at the bottom",
    "a green square at the top",
    "a blue circle at the left",
    "a red triangle at the right",
    "a green circle at the bottom",
)


def _content(text: str) -> list[str]:
    return [w for w in text.split() if w not in FUNCTION_WORDS]


def item_score(prediction: str, truth: str) -> float:
    """max(exact match, F1 over position-aligned content tokens) for one caption.

    Function words are dropped and the remaining tokens are compared slot by
    slot; the grammar has a fixed word order, so a bag-of-words overlap would
    reward word salad that happens to contain attribute words.
    """
    if prediction.split() == truth.split():
        return 1.0
    pred, gold = _content(prediction), _content(truth)
    if not pred or not gold:
        return 0.0
    common = sum(p == g for p, g in zip(pred, gold))
    if common == 0:
        return 0.0
    precision, recall = common / len(pred), common / len(gold)
    return 2 * precision * recall / (precision + recall)


def caption_score(predictions: Sequence[str], ground_truths: Sequence[str]) -> float:
    if len(predictions) != len(ground_truths):
        raise PreconditionError(f"{len(predictions)} predictions vs {len(ground_truths)} ground truths")
    if not predictions:
        return 0.0
    return float(np.mean([item_score(p, t) for p, t in zip(predictions, ground_truths)]))


@dataclass
class EvalContext:
    """Vocabulary, prompt and batching shared by every evaluation call."""

    vocab: Vocabulary = field(default_factory=default_vocabulary)
    prompt_text: str = DEFAULT_PROMPT
    batch_size: int = 100
    decode: DecodeConfig = DecodeConfig()

    @property
    def prompt(self) -> list[int]:
        return self.vocab.encode(self.prompt_text)


def decode_captions(model: ToyVLM, images: torch.Tensor, ctx: EvalContext | None = None) -> list[str]:
    ctx = ctx or EvalContext()
    out = []
    for i in range(0, images.shape[0], ctx.batch_size):
        seq = generate(model, images[i : i + ctx.batch_size], ctx.prompt, ctx.decode)
        out.extend(ctx.vocab.decode(a) for a in seq.answers())
    return out


def clean_item_scores(model: ToyVLM, split: EvalSplit, ctx: EvalContext | None = None) -> list[float]:
    preds = decode_captions(model, split.images, ctx)
    return [item_score(p, t) for p, t in zip(preds, split.captions)]


def eval_clean(model: ToyVLM, split: EvalSplit, ctx: EvalContext | None = None) -> float:
    return float(np.mean(clean_item_scores(model, split, ctx)))


@dataclass
class RobustResult:
    score: float
    clean_score: float
    n_attacked: int
    n_skipped: int
    item_scores: list[float]
    predictions: list[str]


def normalize_attack_kind(kind: str) -> str:
    kind = ATTACK_ALIASES.get(kind, kind)
    if kind not in ATTACK_KINDS:
        raise ConfigError(f"unknown attack kind {kind!r}; choose from {ATTACK_KINDS}")
    return kind


def eval_robust(
    model: ToyVLM,
    split: EvalSplit,
    attack_kind: str,
    eps: float,
    steps: int,
    ctx: EvalContext | None = None,
    threshold: float = 0.0,
    seed: int = 0,
    attack_batch: int = 50,
    details: bool = False,
) -> float | RobustResult:
    """Attack every sample whose clean score exceeds ``threshold`` and score
    the decoded answers on the attacked images.  Skipped samples keep their
    clean image (and therefore their clean score)."""
    ctx = ctx or EvalContext()
    kind = normalize_attack_kind(attack_kind)
    clean_scores = clean_item_scores(model, split, ctx)
    todo = [i for i, s in enumerate(clean_scores) if s > threshold]
    x_adv = split.images.clone()
    for start in range(0, len(todo), attack_batch):
        idx = todo[start : start + attack_batch]
        x = split.images[idx]
        gt = TokenSeq.from_parts(ctx.prompt, [caption_ids(split.scenes[i], ctx.vocab) for i in idx])
        cfg = AttackConfig(epsilon=eps, steps=steps, objective=kind, seed=seed + start)
        attack = apgd_caption_attack if kind == "caption-nll-untargeted" else margin_attack
        x_adv[idx] = attack(model, x, gt, cfg).x_adv
    preds = decode_captions(model, x_adv, ctx)
    scores = [item_score(p, t) for p, t in zip(preds, split.captions)]
    result = RobustResult(
        score=float(np.mean(scores)),
        clean_score=float(np.mean(clean_scores)),
        n_attacked=len(todo),
        n_skipped=len(split) - len(todo),
        item_scores=scores,
        predictions=preds,
    )
    return result if details else result.score


@dataclass(frozen=True)
class TargetSpec:
    target: str
    n_images: int = 20


def select_target_images(
    model: ToyVLM, pool: torch.Tensor, target: str, n: int, ctx: EvalContext, seed: int = 0
) -> torch.Tensor:
    """``n`` seeded picks from ``pool`` whose clean answer does not already contain ``target``."""
    from .attacks import contains_target

    preds = generate(model, pool, ctx.prompt, ctx.decode).answers()
    hit = contains_target(ctx.vocab, preds, target)
    candidates = torch.nonzero(~hit).squeeze(1)
    if candidates.numel() < n:
        raise PreconditionError(f"only {candidates.numel()} images avoid target {target!r}")
    order = torch.randperm(candidates.numel(), generator=torch.Generator().manual_seed(seed))
    return pool[candidates[order[:n]].sort().values]


def eval_targeted_asr(
    model: ToyVLM,
    pool: torch.Tensor,
    targets: Sequence[TargetSpec],
    eps: float,
    steps: int,
    ctx: EvalContext | None = None,
    seed: int = 0,
    image_selector: ToyVLM | None = None,
) -> dict:
    """Per-target success counts and the mean attack success rate.

    Images for each target are drawn from ``pool`` among those whose clean
    answer (under ``image_selector``, default ``model``) does not contain the
    target, so that a success always requires the perturbation.
    """
    if not targets:
        raise PreconditionError("at least one target is required")
    ctx = ctx or EvalContext()
    selector = image_selector or model
    per_target = {}
    rates = []
    for t_i, spec in enumerate(targets):
        images = select_target_images(selector, pool, spec.target, spec.n_images, ctx, seed + t_i)
        cfg = AttackConfig(epsilon=eps, steps=steps, objective="caption-nll-targeted", seed=seed + t_i)
        res = targeted_attack(model, images, ctx.prompt, spec.target, cfg, ctx.vocab, ctx.decode)
        n_ok = int(res.success.sum())
        per_target[spec.target] = {"success": n_ok, "n": spec.n_images, "asr": n_ok / spec.n_images}
        rates.append(n_ok / spec.n_images)
    return {"per_target": per_target, "mean_asr": float(np.mean(rates)), "eps": eps, "steps": steps}


def eval_transfer(
    robust_encoder,
    large_model: ToyVLM,
    split: EvalSplit,
    eps: float,
    steps: int = 100,
    ctx: EvalContext | None = None,
    attack_kind: str = "caption-nll-untargeted",
) -> dict:
    """Clean and robust scores of ``large_model`` before and after swapping in
    ``robust_encoder``."""
    swapped = swap_encoder(large_model, robust_encoder)
    out = {}
    for name, model in (("before", large_model), ("after", swapped)):
        r = eval_robust(model, split, attack_kind, eps, steps, ctx, details=True)
        out[name] = {"clean": r.clean_score, "robust": r.score}
    return out


@dataclass
class EvalReport:
    clean_score: float
    robust_scores: dict[str, float] = field(default_factory=dict)  # "<attack>@<eps>" -> score
    asr: dict = field(default_factory=dict)
    sample_counts: dict[str, int] = field(default_factory=dict)
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        values = [self.clean_score, *self.robust_scores.values()]
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise ValueError("scores must lie in [0, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def table(self) -> str:
        rows = [("clean", f"{self.clean_score:.4f}")]
        rows += [(f"robust {k}", f"{v:.4f}") for k, v in sorted(self.robust_scores.items())]
        if self.asr:
            rows.append(("mean ASR", f"{self.asr.get('mean_asr', float('nan')):.4f}"))
            for target, rec in sorted(self.asr.get("per_target", {}).items()):
                rows.append((f"  {target}", f"{rec['success']}/{rec['n']}"))
        for k, v in sorted(self.extra.items()):
            rows.append((k, json.dumps(v, sort_keys=True) if not isinstance(v, str) else v))
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{name:<{width}}  {value}" for name, value in rows)


ABLATION_KINDS = ("lambda-sweep", "eps-sweep", "variant-sweep", "attack-type")


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    text = buf.getvalue()
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def run_ablation(
    kind: str,
    grid: Sequence,
    train_fn: Callable[[object], ToyVLM] | None,
    evaluate_fn: Callable[[ToyVLM, object], tuple[float, float]],
    model: ToyVLM | None = None,
    csv_path=None,
) -> dict:
    """Generic sweep driver.

    For training sweeps ``train_fn(value)`` returns the trained model of one
    grid point; for ``attack-type`` the single ``model`` is evaluated with
    ``evaluate_fn(model, value)`` per attack kind.  Returns the rows and the
    observed direction of the lambda trade-off when applicable.
    """
    if kind not in ABLATION_KINDS:
        raise ConfigError(f"unknown ablation kind {kind!r}")
    if not grid:
        raise ConfigError("ablation grid must be nonempty")
    rows = []
    for value in grid:
        m = model if kind == "attack-type" else train_fn(value)
        clean, robust = evaluate_fn(m, value)
        rows.append((value, clean, robust))
    out = {"kind": kind, "rows": rows}
    if kind == "lambda-sweep" and len(rows) > 1:
        ordered = sorted(rows, key=lambda r: float(r[0]))
        d_clean = ordered[-1][1] - ordered[0][1]
        d_robust = ordered[-1][2] - ordered[0][2]
        out["lambda_direction"] = {
            "clean_change_low_to_high": d_clean,
            "robust_change_low_to_high": d_robust,
            "summary": (
                f"increasing lambda {'raised' if d_robust > 0 else 'did not raise'} robust score and "
                f"{'raised' if d_clean > 0 else 'did not raise'} clean score"
            ),
        }
    if csv_path is not None:
        out["csv_sha256"] = write_csv(csv_path, ["grid_value", "clean", "robust"], rows)
    return out
