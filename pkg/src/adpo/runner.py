"""Command line entry point and run-directory orchestration.

Run directory layout::

    DIR/config.snapshot    canonical config text
    DIR/manifest.json      config hash, seeds, deviations, artifact digests
    DIR/metrics.jsonl      one JSON record per step
    DIR/checkpoints/       model (and optimizer) checkpoints
    DIR/reports/           JSON reports, tables and CSVs

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import filelock
import torch

from . import __version__
from .attacks import apgd_caption_attack, margin_attack
from .checkpoint import FORMAT_VERSION, atomic_write, file_digest, load_model, save_model, tensor_digest
from .config import RunConfig
from .errors import ConfigError
from .evalharness import (
    EvalContext,
    EvalReport,
    caption_score,
    decode_captions,
    eval_clean,
    eval_robust,
    eval_targeted_asr,
    eval_transfer,
    normalize_attack_kind,
    run_ablation,
    write_csv,
)
from .pretrain import pretrain_captioner
from .shapesdata import caption_ids, make_dataset, render_batch, split_scenes
from .toyvlm import TokenSeq, part_parameters
from .trainer import (
    TrainConfig,
    batch_schedule,
    init_state,
    restore_train_checkpoint,
    save_train_checkpoint,
    total_steps,
    train_step,
)

log = logging.getLogger("adpo")

SUBCOMMANDS = ("pretrain", "train", "attack", "eval", "transfer", "ablate", "report")


class StageFailed(RuntimeError):
    """A stage ran but did not meet its success condition."""


def set_deterministic(flag: bool) -> None:
    torch.use_deterministic_algorithms(flag)
    if flag:
        torch.set_num_threads(1)


class RunDir:
    def __init__(self, path, cfg: RunConfig | None = None):
        self.path = Path(path)
        self.cfg = cfg
        self.checkpoints = self.path / "checkpoints"
        self.reports = self.path / "reports"
        self.metrics_path = self.path / "metrics.jsonl"
        self.manifest_path = self.path / "manifest.json"

    def prepare(self) -> None:
        self.checkpoints.mkdir(parents=True, exist_ok=True)
        self.reports.mkdir(parents=True, exist_ok=True)
        if self.cfg is not None:
            atomic_write(self.path / "config.snapshot", self.cfg.to_text().encode())

    def lock(self) -> filelock.FileLock:
        self.path.mkdir(parents=True, exist_ok=True)
        return filelock.FileLock(str(self.path / ".lock"), timeout=0)

    def write_metrics(self, records: list[dict]) -> None:
        text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
        atomic_write(self.metrics_path, text.encode())

    def read_metrics(self) -> list[dict]:
        if not self.metrics_path.exists():
            return []
        return [json.loads(line) for line in self.metrics_path.read_text().splitlines() if line.strip()]

    def write_report(self, name: str, payload: dict | str) -> Path:
        path = self.reports / name
        data = payload if isinstance(payload, str) else json.dumps(payload, sort_keys=True, indent=2) + "\n"
        atomic_write(path, data.encode())
        return path

    def write_manifest(self, stage: str, inputs: dict | None = None, extra: dict | None = None) -> dict:
        artifacts = {}
        for p in sorted(self.path.rglob("*")):
            if p.is_file() and p.name not in ("manifest.json", ".lock") and not p.name.startswith("."):
                artifacts[str(p.relative_to(self.path))] = file_digest(p)
        cfg = self.cfg
        manifest = {
            "format_version": FORMAT_VERSION,
            "code_version": __version__,
            "stage": stage,
            "config_hash": cfg.hash() if cfg else None,
            "config": cfg.values if cfg else None,
            "seeds": {k: cfg.get(k) for k in ("model.init_seed", "data.seed", "pretrain.seed", "attack.seed", "train.seed")}
            if cfg
            else {},
            "inputs": inputs or {},
            "artifacts": artifacts,
            **(extra or {}),
        }
        atomic_write(self.manifest_path, json.dumps(manifest, sort_keys=True, indent=2).encode() + b"\n")
        return manifest


def verify_manifest(run_dir) -> dict[str, bool]:
    """Recompute every artifact digest listed in the manifest."""
    run = RunDir(run_dir)
    manifest = json.loads(run.manifest_path.read_text())
    out = {}
    for rel, digest in manifest["artifacts"].items():
        p = run.path / rel
        out[rel] = p.exists() and file_digest(p) == digest
    for name, rec in manifest.get("inputs", {}).items():
        p = Path(rec["path"])
        out[f"input:{name}"] = p.exists() and file_digest(p) == rec["sha256"]
    return out


def _input(path_str: str, key: str) -> tuple[Path, dict]:
    if not path_str:
        raise ConfigError(f"{key} must be set for this stage")
    p = Path(path_str)
    if not p.exists():
        raise ConfigError(f"{key} points to a missing file: {p}")
    return p, {"path": str(p), "sha256": file_digest(p)}


def _context(cfg: RunConfig) -> EvalContext:
    return EvalContext(batch_size=cfg.get("eval.batch_size"), decode=cfg.decode())


def _eval_split(cfg: RunConfig, n: int | None = None):
    _, ev = make_dataset(cfg.get("data.seed"), cfg.get("data.n_train"), cfg.get("data.n_eval"))
    return ev.subset(n or cfg.get("eval.n_eval"))


# -- stages -------------------------------------------------------------------

def run_pretrain(cfg: RunConfig, out) -> dict:
    run = RunDir(out, cfg)
    with run.lock():
        run.prepare()
        pc = cfg.pretrain()
        inputs = {}
        encoder_from = None
        if pc.decoder == "large":
            path, inputs["base_checkpoint"] = _input(cfg.get("io.base_checkpoint"), "io.base_checkpoint")
            encoder_from, _ = load_model(path)
        history = []

        def on_eval(step, loss, score):
            history.append({"step": step, "loss": loss, "clean": score})

        result = pretrain_captioner(
            cfg.arch(), pc, cfg.get("data.seed"), cfg.get("data.n_eval"), _context(cfg), encoder_from, on_eval
        )
        save_model(run.checkpoints / "final.ckpt", result.model, result.steps)
        run.write_metrics(history)
        report = {"clean_score": result.score, "steps": result.steps, "passed": result.passed, "gate": pc.gate}
        run.write_report("pretrain.json", report)
        run.write_manifest("pretrain", inputs)
    if not result.passed:
        raise StageFailed(f"pretrain gate unmet: clean score {result.score:.4f} < {pc.gate} after {result.steps} steps")
    return report


def _frozen_digests(state) -> dict:
    policy = state.policy
    return {
        "decoder_projector": tensor_digest({**part_parameters(policy, "decoder"), **part_parameters(policy, "projector")}),
        "reference": tensor_digest(dict(state.reference.state_dict())),
        "encoder_original": tensor_digest(dict(state.encoder_original.state_dict())),
    }


def _latest_step_checkpoint(run: RunDir) -> Path | None:
    found = sorted(run.checkpoints.glob("step_*.ckpt"))
    return found[-1] if found else None


def run_train(cfg: RunConfig, out, resume: bool = False, stop_after: int | None = None) -> dict:
    """Adversarial preference training from ``io.base_checkpoint``.

    ``stop_after`` ends the run early after that many total steps (leaving a
    step checkpoint behind), which is how interrupted runs are simulated.
    """
    run = RunDir(out, cfg)
    tc: TrainConfig = cfg.train()
    deterministic = cfg.get("io.deterministic")
    with run.lock():
        run.prepare()
        base_path, base_rec = _input(cfg.get("io.base_checkpoint"), "io.base_checkpoint")
        base, _ = load_model(base_path)
        train_split, _ = make_dataset(cfg.get("data.seed"), cfg.get("data.n_train"), cfg.get("data.n_eval"))
        ctx = _context(cfg)
        state = init_state(base, tc)
        frozen_before = _frozen_digests(state)
        records = []
        if resume:
            ckpt = _latest_step_checkpoint(run)
            if ckpt is not None:
                restore_train_checkpoint(ckpt, state)
                records = [r for r in run.read_metrics() if r["step"] <= state.step]
        schedule = batch_schedule(len(train_split), tc)
        n_steps = total_steps(len(train_split), tc)
        end = n_steps if stop_after is None else min(n_steps, stop_after)
        while state.step < end:
            idx = schedule[state.step]
            rec = train_step(state, train_split.images[idx], tc, ctx.prompt, ctx.decode, dump_dir=run.reports)
            if deterministic:
                rec["wall_time"] = None
            records.append(rec)
            log.info("train step %d total=%s margin=%s skip=%.2f", rec["step"], rec["total"], rec["margin"], rec["skip_rate"])
            every = tc.checkpoint_every
            if (every and state.step % every == 0) or state.step == end:
                save_train_checkpoint(run.checkpoints / f"step_{state.step:06d}.ckpt", state)
            run.write_metrics(records)
        run.write_metrics(records)
        frozen_after = _frozen_digests(state)
        summary = {"steps": state.step, "total_steps": n_steps, "complete": state.step >= n_steps}
        if state.step >= n_steps:
            save_model(run.checkpoints / "final.ckpt", state.policy, state.step)
            margins = [r["margin"] for r in records if r["margin"] is not None]
            summary.update(
                initial_margin=margins[0] if margins else None,
                final_margin=margins[-1] if margins else None,
                mean_skip_rate=sum(r["skip_rate"] for r in records) / max(len(records), 1),
            )
        summary["frozen_unchanged"] = frozen_before == frozen_after
        summary["frozen_digests"] = frozen_after
        run.write_report("train.json", summary)
        run.write_manifest("train", {"base_checkpoint": base_rec}, {"deviations": tc.deviations()})
    return summary


def run_eval(cfg: RunConfig, out) -> EvalReport:
    run = RunDir(out, cfg)
    with run.lock():
        run.prepare()
        path, rec = _input(cfg.get("io.checkpoint"), "io.checkpoint")
        model, _ = load_model(path)
        ctx = _context(cfg)
        split = _eval_split(cfg)
        kind = normalize_attack_kind(cfg.get("attack.kind"))
        eps, steps = cfg.get("attack.eps"), cfg.get("attack.steps")
        r = eval_robust(model, split, kind, eps, steps, ctx, cfg.get("attack.threshold"), cfg.get("attack.seed"), details=True)
        report = EvalReport(
            clean_score=r.clean_score,
            robust_scores={f"{kind}@{eps:.6f}": r.score},
            sample_counts={"n_eval": len(split), "n_attacked": r.n_attacked, "n_skipped": r.n_skipped},
            config_hash=cfg.hash(),
        )
        if cfg.get("eval.asr"):
            pool = _asr_pool(cfg)
            report.asr = eval_targeted_asr(
                model, pool, cfg.targets(), eps, cfg.get("eval.targeted_steps"), ctx, cfg.get("attack.seed")
            )
        run.write_report("eval_report.json", report.to_json() + "\n")
        run.write_report("eval_report.txt", report.table() + "\n")
        run.write_manifest("eval", {"checkpoint": rec})
    return report


def _asr_pool(cfg: RunConfig):
    eval_scenes, _, _ = split_scenes(cfg.get("data.seed"), cfg.get("data.n_train"), cfg.get("data.n_eval"))
    return render_batch(eval_scenes)


def run_attack(cfg: RunConfig, out) -> dict:
    """Single attack over the eval images; exports the objective trace as CSV."""
    run = RunDir(out, cfg)
    with run.lock():
        run.prepare()
        path, rec = _input(cfg.get("io.checkpoint"), "io.checkpoint")
        model, _ = load_model(path)
        ctx = _context(cfg)
        split = _eval_split(cfg)
        kind = normalize_attack_kind(cfg.get("attack.kind"))
        acfg = cfg.attack(kind)
        gt = TokenSeq.from_parts(ctx.prompt, [caption_ids(s, ctx.vocab) for s in split.scenes])
        attack = apgd_caption_attack if kind == "caption-nll-untargeted" else margin_attack
        res = attack(model, split.images, gt, acfg)
        res.write_csv(run.reports / "attack_trace.csv")
        linf = float((res.x_adv.double() - split.images.double()).abs().max())
        report = {
            "kind": kind,
            "config": acfg.to_dict(),
            "mean_best_objective": float(res.best_objective.mean()),
            "linf": linf,
            "clean": eval_clean(model, split, ctx),
        }
        report["attacked"] = caption_score(decode_captions(model, res.x_adv, ctx), list(split.captions))
        run.write_report("attack.json", report)
        run.write_manifest("attack", {"checkpoint": rec})
    return report


def run_transfer(cfg: RunConfig, out) -> dict:
    run = RunDir(out, cfg)
    with run.lock():
        run.prepare()
        rpath, rrec = _input(cfg.get("io.robust_checkpoint"), "io.robust_checkpoint")
        lpath, lrec = _input(cfg.get("io.large_checkpoint"), "io.large_checkpoint")
        robust, _ = load_model(rpath)
        large, _ = load_model(lpath)
        result = eval_transfer(
            robust.encoder, large, _eval_split(cfg), cfg.get("attack.eps"), cfg.get("attack.steps"), _context(cfg),
            cfg.get("attack.kind"),
        )
        run.write_report("transfer.json", result)
        run.write_manifest("transfer", {"robust_checkpoint": rrec, "large_checkpoint": lrec})
    return result


def run_ablate(cfg: RunConfig, out) -> dict:
    kind = cfg.get("ablate.kind")
    grid = cfg.ablation_grid()
    run = RunDir(out, cfg)
    ctx = _context(cfg)
    split = _eval_split(cfg, cfg.get("ablate.n_eval"))
    eps, steps = cfg.get("attack.eps"), cfg.get("attack.steps")
    key = {"lambda-sweep": "train.lambda", "eps-sweep": "train.epsilon", "variant-sweep": "loss.variant"}.get(kind)

    def train_point(value):
        sub = RunConfig(cfg.values)
        sub.set(key, value if isinstance(value, str) else float(value))
        label = str(value).replace("/", "_")
        run_train(sub, run.path / "points" / f"{kind}_{label}")
        model, _ = load_model(run.path / "points" / f"{kind}_{label}" / "checkpoints" / "final.ckpt")
        return model

    def evaluate(model, value):
        attack_kind = normalize_attack_kind(value) if kind == "attack-type" else cfg.get("attack.kind")
        r = eval_robust(model, split, attack_kind, eps, steps, ctx, cfg.get("attack.threshold"), cfg.get("attack.seed"), details=True)
        return r.clean_score, r.score

    model = None
    if kind == "attack-type":
        path, _ = _input(cfg.get("io.checkpoint"), "io.checkpoint")
        model, _ = load_model(path)
    with run.lock():
        run.prepare()
        result = run_ablation(kind, grid, None if kind == "attack-type" else train_point, evaluate, model)
        write_csv(run.reports / f"ablation_{kind}.csv", ["grid_value", "clean", "robust"], result["rows"])
        run.write_report(f"ablation_{kind}.json", result)
        run.write_manifest("ablate")
    return result


def run_report(run_dir, make_figures: bool = False, verify: bool = False, stream=None) -> int:
    """Print stored reports; never recomputes anything."""
    stream = stream or sys.stdout
    run = RunDir(run_dir)
    if not run.reports.exists():
        raise ConfigError(f"{run_dir} has no reports directory")
    for path in sorted(run.reports.glob("*.json")):
        print(f"== {path.name}", file=stream)
        data = json.loads(path.read_text())
        if path.name == "eval_report.json":
            print(EvalReport(**data).table(), file=stream)
        else:
            print(json.dumps(data, sort_keys=True, indent=2), file=stream)
    if make_figures:
        figs = run.reports / "figures"
        figs.mkdir(exist_ok=True)
        for path in sorted(run.reports.glob("ablation_*.json")):
            data = json.loads(path.read_text())
            write_csv(figs / f"{data['kind']}.csv", ["grid_value", "clean", "robust"], data["rows"])
            print(f"wrote {figs / (data['kind'] + '.csv')}", file=stream)
    if verify:
        checks = verify_manifest(run.path)
        bad = [k for k, ok in checks.items() if not ok]
        for k, ok in sorted(checks.items()):
            print(f"{'ok ' if ok else 'BAD'} {k}", file=stream)
        if bad:
            raise StageFailed(f"digest mismatch: {bad}")
    return 0


# -- argument parsing ---------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="adpo", description="Adversarial preference optimisation at toy scale")
    parser.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        if name == "report":
            p.add_argument("--run", required=True, help="finished run directory")
            p.add_argument("--make-figures", action="store_true", help="write ablation plot data as CSV")
            p.add_argument("--verify", action="store_true", help="recompute manifest digests")
            continue
        p.add_argument("--config", help="config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted-key override")
        p.add_argument("--seed", type=int, help="set every seed")
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--deterministic", action="store_true")
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from the latest step checkpoint")
        if name == "ablate":
            p.add_argument("--kind", help="overrides ablate.kind")
    return parser


def load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.set_seed(args.seed)
    cfg.apply_overrides(args.set)
    if args.deterministic:
        cfg.set("io.deterministic", True)
    if getattr(args, "kind", None):
        cfg.set("ablate.kind", args.kind)
    return cfg


def cli_main(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        if args.command is None:
            raise ConfigError(f"a subcommand is required: {', '.join(SUBCOMMANDS)}")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        cfg = None if args.command == "report" else load_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    if cfg is not None:
        set_deterministic(cfg.get("io.deterministic"))
    try:
        if args.command == "report":
            return run_report(args.run, args.make_figures, args.verify)
        if args.command == "pretrain":
            out = run_pretrain(cfg, args.out)
        elif args.command == "train":
            out = run_train(cfg, args.out, resume=args.resume)
        elif args.command == "attack":
            out = run_attack(cfg, args.out)
        elif args.command == "eval":
            report = run_eval(cfg, args.out)
            print(report.table())
            return 0
        elif args.command == "transfer":
            out = run_transfer(cfg, args.out)
        else:
            out = run_ablate(cfg, args.out)
        print(json.dumps(out, sort_keys=True, indent=2, default=str))
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except filelock.Timeout:
        print(f"run directory {getattr(args, 'out', None) or args.run} is locked by another process", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 2
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()

