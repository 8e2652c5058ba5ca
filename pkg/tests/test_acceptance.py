"""End-to-end acceptance criteria A1-A11 at desk scale.

Slow: the module pretrains two captioners and trains several encoders, which
takes roughly half an hour on one CPU core. Each criterion prints one
PASS/FAIL line; the lines are repeated in the pytest terminal summary.
"""

import json
import math
import time

import pytest
import torch

from adpo.attacks import AttackConfig, apgd_caption_attack, margin_attack, pgd_feature_attack, targeted_attack
from adpo.checkpoint import load_model, tensor_digest
from adpo.config import RunConfig
from adpo.evalharness import DEFAULT_TARGETS, EvalContext, eval_robust, eval_targeted_asr
from adpo.losses import (
    LN2,
    LossConfig,
    adpo_loss,
    dpo_from_logps,
    dpo_loss,
    ipo_loss,
    lm_loss_adversarial,
    preferred_image_loss,
    simpo_loss,
)
from adpo.prefgen import collate
from adpo.runner import run_ablate, run_eval, run_pretrain, run_train, run_transfer, set_deterministic, _asr_pool
from adpo.shapesdata import make_dataset
from adpo.toyvlm import EOS_ID, TokenSeq, clone_frozen, init_model, part_parameters

from helpers import directional_grad_errors, make_pairs, perturb_, record

pytestmark = pytest.mark.acceptance

EPS_EVAL = 8 / 255


def cpu_timed(fn, *args, **kwargs):
    start = time.process_time()
    out = fn(*args, **kwargs)
    return out, time.process_time() - start


def frozen_digest(model):
    return tensor_digest({**part_parameters(model, "decoder"), **part_parameters(model, "projector")})


def digest(model):
    return tensor_digest(dict(model.state_dict()))


# -- shared artifacts ---------------------------------------------------------

@pytest.fixture(scope="session")
def work(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def ctx():
    return EvalContext()


@pytest.fixture(scope="session")
def eval_split():
    cfg = RunConfig()
    _, ev = make_dataset(cfg.get("data.seed"), cfg.get("data.n_train"), cfg.get("data.n_eval"))
    return ev


@pytest.fixture(scope="session")
def pretrained(work):
    cfg = RunConfig()
    report, cpu = cpu_timed(run_pretrain, cfg, work / "pretrain")
    path = work / "pretrain" / "checkpoints" / "final.ckpt"
    return {"path": path, "report": report, "cpu": cpu, "model": load_model(path)[0]}


@pytest.fixture(scope="session")
def undefended(pretrained, eval_split, ctx):
    model = pretrained["model"]
    r, cpu = cpu_timed(eval_robust, model, eval_split, "caption-nll-untargeted", EPS_EVAL, 100, ctx, details=True)
    return {"clean": r.clean_score, "robust": r.score, "cpu": cpu}


def train_cfg(base_path, *overrides):
    cfg = RunConfig()
    cfg.apply_overrides([f"io.base_checkpoint={base_path}", *overrides])
    return cfg


@pytest.fixture(scope="session")
def adpo_run(work, pretrained):
    out = work / "train"
    summary, cpu = cpu_timed(run_train, train_cfg(pretrained["path"]), out)
    path = out / "checkpoints" / "final.ckpt"
    return {"path": path, "summary": summary, "cpu": cpu, "model": load_model(path)[0], "dir": out}


@pytest.fixture(scope="session")
def defended(adpo_run, eval_split, ctx):
    r = eval_robust(adpo_run["model"], eval_split, "caption-nll-untargeted", EPS_EVAL, 100, ctx, details=True)
    return {"clean": r.clean_score, "robust": r.score}


# -- A1 -----------------------------------------------------------------------

def test_a1_pretrain_gate(pretrained):
    rep = pretrained["report"]
    ok = rep["passed"] and rep["clean_score"] >= 0.90 and pretrained["cpu"] <= 600
    record("A1", ok, f"clean={rep['clean_score']:.3f} on 64 scenes after {rep['steps']} steps, "
                     f"cpu={pretrained['cpu']:.0f}s (need >=0.90 within 600s)")
    assert ok


# -- A2 / A3 ------------------------------------------------------------------

def test_a2_loss_identities(tiny_arch, images, prompt):
    policy = init_model(tiny_arch, seed=0).double()
    ref = clone_frozen(policy)
    pairs = make_pairs(images.double(), prompt, n=100)
    b = collate(pairs)
    at_clone = abs(dpo_loss(policy, ref, b.x_m, b.x_adv, pairs, 0.1).item() - LN2)

    gen = torch.Generator().manual_seed(0)
    pc, pr, rc, rr = (-20 * torch.rand(100, generator=gen, dtype=torch.float64) for _ in range(4))
    base = dpo_from_logps(pc, pr, rc, rr, 0.1)
    shift = max(abs(dpo_from_logps(pc + c, pr + c, rc + c, rr + c, 0.1) - base).item() for c in (-50.0, 3.0, 75.0))

    perturb_(policy.encoder)
    decomposition = 0.0
    for lam in (0.0, 0.5, 1.0, 2.0):
        parts = adpo_loss(policy, ref, pairs[:8], LossConfig(lam=lam))
        expected = preferred_image_loss(policy, ref, pairs[:8], 0.1)
        if lam:
            expected = expected + lam * lm_loss_adversarial(policy, collate(pairs[:8]).x_adv, collate(pairs[:8]).chosen)
        decomposition = max(decomposition, abs((parts.total - expected).item()))
    ok = at_clone <= 1e-6 and shift <= 1e-6 and decomposition == 0.0
    record("A2", ok, f"|L-ln2|={at_clone:.1e} shift={shift:.1e} decomposition={decomposition:.1e}")
    assert ok


def test_a3_gradient_checks(tiny_arch, images, prompt):
    policy = init_model(tiny_arch, seed=0).double()
    ref = clone_frozen(policy)
    perturb_(policy.encoder)
    batch = collate(make_pairs(images.double(), prompt, n=4))
    losses = {
        "dpo": lambda: dpo_loss(policy, ref, batch.x_m, batch.x_adv, batch, 0.5),
        "lm_adv": lambda: lm_loss_adversarial(policy, batch.x_adv, batch.chosen),
        "adpo": lambda: adpo_loss(policy, ref, batch, LossConfig(beta=0.5, lam=1.0)).total,
        "ipo": lambda: ipo_loss(policy, ref, batch, 0.5),
        "simpo": lambda: simpo_loss(policy, batch, 0.5, 0.5),
    }
    params = list(policy.encoder.parameters())
    worst = {name: max(directional_grad_errors(fn, params, probes=10)) for name, fn in losses.items()}
    ok = all(v <= 1e-4 for v in worst.values())
    record("A3", ok, " ".join(f"{k}={v:.1e}" for k, v in worst.items()) + " (10 probes each, need <=1e-4)")
    assert ok


# -- A4 -----------------------------------------------------------------------

def test_a4_attack_constraints(tiny_model, prompt, vocab):
    perturb_(tiny_model, scale=0.3, seed=5)
    org = clone_frozen(tiny_model).encoder
    perturb_(tiny_model.encoder, scale=0.2, seed=6)
    gen = torch.Generator().manual_seed(0)
    linf_violation = range_violation = 0.0
    best_mismatch = 0
    counts = dict.fromkeys(("feature", "caption-nll", "margin", "targeted"), 0)
    for i in range(1000):
        kind = list(counts)[i % 4]
        counts[kind] += 1
        x = torch.rand(2, 3, 32, 32, generator=gen)
        eps = float(torch.empty(1).uniform_(0.0, 0.1, generator=gen))
        steps = int(torch.randint(0, 5, (1,), generator=gen))
        common = dict(epsilon=eps, steps=steps, init="random" if i % 3 else "zero", seed=i)
        if kind == "feature":
            res = pgd_feature_attack(tiny_model.encoder, org, x, AttackConfig(**common))
        elif kind == "targeted":
            target = DEFAULT_TARGETS[i % len(DEFAULT_TARGETS)]
            acfg = AttackConfig(objective="caption-nll-targeted", check_every=1 + i % 3, **common)
            res = targeted_attack(tiny_model, x, prompt, target, acfg, vocab)
        else:
            answers = torch.randint(3, 32, (2, 3), generator=gen).tolist()
            gt = TokenSeq.from_parts(prompt, [a + [EOS_ID] for a in answers])
            if kind == "caption-nll":
                res = apgd_caption_attack(tiny_model, x, gt, AttackConfig(objective="caption-nll-untargeted", **common))
            else:
                res = margin_attack(tiny_model, x, gt, AttackConfig(objective="margin", **common))
        dev = float((res.x_adv.double() - x.double()).abs().max())
        linf_violation = max(linf_violation, dev - eps)
        range_violation = max(range_violation, float(-res.x_adv.min()), float(res.x_adv.max() - 1))
        best_mismatch += not torch.equal(res.best_objective, res.objective_trace.max(dim=0).values)
    linf_violation = max(linf_violation, 0.0)
    range_violation = max(range_violation, 0.0)
    ok = linf_violation == 0 and range_violation == 0 and best_mismatch == 0
    record("A4", ok, f"{sum(counts.values())} invocations {counts}: linf violation={linf_violation} "
                     f"range violation={range_violation} best!=max(trace) in {best_mismatch}")
    assert ok


# -- A5 / A6 ------------------------------------------------------------------

def test_a5_untargeted_collapse(undefended):
    u = undefended
    ok = u["robust"] <= 0.5 * u["clean"] and u["cpu"] <= 900
    record("A5", ok, f"undefended clean={u['clean']:.3f} robust@8/255={u['robust']:.3f} "
                     f"(need <={0.5 * u['clean']:.3f}), cpu={u['cpu']:.0f}s (limit 900s)")
    assert ok


def test_a6_adpo_robustness_gain(undefended, defended, adpo_run):
    u, d = undefended, defended
    ok = d["robust"] >= 2 * u["robust"] and d["clean"] >= 0.8 * u["clean"] and adpo_run["cpu"] <= 1800
    record("A6", ok, f"robust {u['robust']:.3f}->{d['robust']:.3f} (need >={2 * u['robust']:.3f}), "
                     f"clean {u['clean']:.3f}->{d['clean']:.3f} (need >={0.8 * u['clean']:.3f}), "
                     f"train cpu={adpo_run['cpu']:.0f}s (limit 1800s)")
    assert ok


# -- A7 -----------------------------------------------------------------------

# Known shortfall, kept at full strength: strict xfail turns the suite red if
# it ever passes. Lower contrast or longer pretraining lifts the undefended ASR,
# but the trained encoder then loses robustness faster than the 0.20 ceiling
# allows (README, "Results").
@pytest.mark.xfail(strict=True, reason="undefended >= 0.90 and trained <= 0.20 ASR are not met together at this scale")
def test_a7_targeted_asr(pretrained, adpo_run, ctx):
    cfg = RunConfig()
    pool = _asr_pool(cfg)
    targets = cfg.targets()
    assert len(targets) == 5 and all(t.n_images == 20 for t in targets)
    steps = cfg.get("eval.targeted_steps")
    before = eval_targeted_asr(pretrained["model"], pool, targets, EPS_EVAL, steps, ctx, seed=0)
    after = eval_targeted_asr(adpo_run["model"], pool, targets, EPS_EVAL, steps, ctx, seed=0)
    ok = steps == 1000 and before["mean_asr"] >= 0.90 and after["mean_asr"] <= 0.20
    record("A7", ok, f"mean ASR undefended={before['mean_asr']:.2f} (need >=0.90) "
                     f"AdPO={after['mean_asr']:.2f} (need <=0.20), 5x20 images, {steps} steps")
    assert ok


# -- A8 -----------------------------------------------------------------------

def test_a8_encoder_transfer(work, pretrained, adpo_run):
    large_cfg = RunConfig()
    large_cfg.apply_overrides(["pretrain.decoder=large", f"io.base_checkpoint={pretrained['path']}"])
    run_pretrain(large_cfg, work / "pretrain_large")
    large_path = work / "pretrain_large" / "checkpoints" / "final.ckpt"
    assert load_model(large_path)[0].arch.dec_depth == 4
    cfg = RunConfig()
    cfg.apply_overrides([f"io.robust_checkpoint={adpo_run['path']}", f"io.large_checkpoint={large_path}"])
    out = run_transfer(cfg, work / "transfer")
    b, a = out["before"], out["after"]
    ok = a["robust"] > b["robust"] and a["clean"] >= 0.8 * b["clean"]
    record("A8", ok, f"depth-4 decoder robust {b['robust']:.3f}->{a['robust']:.3f}, "
                     f"clean {b['clean']:.3f}->{a['clean']:.3f} (need >={0.8 * b['clean']:.3f})")
    assert ok


# -- A10 / A9 -----------------------------------------------------------------

@pytest.fixture(scope="session")
def ablations(work, pretrained, adpo_run):
    out = {}
    for kind, grid in (("lambda-sweep", "0,0.5,1,2"), ("variant-sweep", "dpo,ipo,simpo"),
                       ("attack-type", "caption-nll,margin")):
        cfg = train_cfg(pretrained["path"], f"ablate.kind={kind}", f"ablate.grid={grid}",
                        f"io.checkpoint={adpo_run['path']}")
        out[kind] = run_ablate(cfg, work / f"ablate_{kind}")
    return out


def test_a10_ablation_harness(work, pretrained, ablations):
    csvs = {k: (work / f"ablate_{k}" / "reports" / f"ablation_{k}.csv") for k in ablations}
    lines = {k: p.read_text().splitlines() if p.exists() else [] for k, p in csvs.items()}
    complete = {k: len(lines[k]) == 1 + len(ablations[k]["rows"]) for k in ablations}
    complete["counts"] = [len(ablations[k]["rows"]) for k in ablations] == [4, 3, 2]

    lp_dir = work / "train_lp_only"
    run_train(train_cfg(pretrained["path"], "train.objective=lp-only"), lp_dir)
    lam0 = work / "ablate_lambda-sweep" / "points" / "lambda-sweep_0.0" / "checkpoints" / "final.ckpt"
    bit_match = lam0.read_bytes() == (lp_dir / "checkpoints" / "final.ckpt").read_bytes()

    robust = [row[2] for row in ablations["attack-type"]["rows"]]
    spread = max(robust) - min(robust)
    ok = all(complete.values()) and bit_match and spread <= 0.15
    record("A10", ok, f"csv complete={all(complete.values())} lambda=0 bit-matches lp-only={bit_match} "
                      f"attack-type robust={[round(r, 3) for r in robust]} spread={spread:.3f} (need <=0.15)")
    assert ok


def test_a9_encoder_only_training(work, pretrained, adpo_run, ablations):
    base = pretrained["model"]
    base_frozen = frozen_digest(base)
    base_all = digest(base)
    base_encoder = tensor_digest(dict(base.encoder.state_dict()))
    runs = [adpo_run["dir"], *sorted((work).glob("ablate_*/points/*"))]
    bad = []
    for run in runs:
        final = load_model(run / "checkpoints" / "final.ckpt")[0]
        summary = json.loads((run / "reports" / "train.json").read_text())
        digests = summary["frozen_digests"]
        if not (frozen_digest(final) == base_frozen and summary["frozen_unchanged"]
                and digests["reference"] == base_all and digests["encoder_original"] == base_encoder):
            bad.append(run.name)
    ok = not bad and len(runs) >= 8
    record("A9", ok, f"{len(runs)} train runs, decoder+projector/reference/original encoder unchanged; failures={bad}")
    assert ok


# -- A11 ----------------------------------------------------------------------

def test_a11_determinism(work, pretrained):
    def files(d):
        return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file() and p.name != ".lock"}

    set_deterministic(True)
    try:
        short = ["pretrain.min_steps=100", "pretrain.max_steps=100", "pretrain.eval_every=50", "pretrain.gate=0",
                 "data.n_eval=64"]
        pre = []
        for name in ("pre_a", "pre_b"):
            cfg = RunConfig()
            cfg.apply_overrides(short)
            cfg.set("io.deterministic", True)
            run_pretrain(cfg, work / "det" / name)
            pre.append(files(work / "det" / name))

        cfg = train_cfg(pretrained["path"], "io.deterministic=true", "data.n_train=64")
        for name in ("train_a", "train_b"):
            run_train(cfg, work / "det" / name)
        train = [files(work / "det" / n) for n in ("train_a", "train_b")]

        ecfg = RunConfig()
        ecfg.apply_overrides([f"io.checkpoint={work / 'det' / 'train_a' / 'checkpoints' / 'final.ckpt'}",
                              "io.deterministic=true", "eval.n_eval=20", "attack.steps=20"])
        for name in ("eval_a", "eval_b"):
            run_eval(ecfg, work / "det" / name)
        evals = [files(work / "det" / n) for n in ("eval_a", "eval_b")]
    finally:
        set_deterministic(False)
    metrics = [json.loads(line) for line in train[0]["metrics.jsonl"].decode().splitlines()]
    checks = {"pretrain": pre[0] == pre[1], "train": train[0] == train[1], "eval": evals[0] == evals[1],
              "finite": all(math.isfinite(m["total"]) for m in metrics if m["total"] is not None)}
    ok = all(checks.values())
    n = sum(len(x[0]) for x in (pre, train, evals))
    record("A11", ok, f"{n} files compared byte for byte across paired runs: {checks}")
    assert ok
