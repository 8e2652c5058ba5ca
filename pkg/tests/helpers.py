"""Shared test utilities."""

import torch

from adpo.prefgen import PreferencePair
from adpo.toyvlm import EOS_ID


def directional_grad_errors(loss_fn, params, probes=10, h=1e-5, seed=0):
    """Relative errors between analytic and central-difference directional
    derivatives of ``loss_fn()`` along random directions in ``params``."""
    grads = torch.autograd.grad(loss_fn(), params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for g, p in zip(grads, params)]
    gen = torch.Generator().manual_seed(seed)
    errors = []
    for _ in range(probes):
        dirs = [torch.randn(p.shape, generator=gen, dtype=p.dtype) for p in params]
        analytic = float(sum((g * d).sum() for g, d in zip(grads, dirs)))
        with torch.no_grad():
            for p, d in zip(params, dirs):
                p.add_(h * d)
            up = float(loss_fn())
            for p, d in zip(params, dirs):
                p.sub_(2 * h * d)
            down = float(loss_fn())
            for p, d in zip(params, dirs):
                p.add_(h * d)
        fd = (up - down) / (2 * h)
        errors.append(abs(analytic - fd) / max(abs(fd), 1e-12))
    return errors


def make_pairs(images, prompt, n=None, seed=0, eps=8 / 255):
    """Synthetic preference pairs over ``images`` with random answers."""
    gen = torch.Generator().manual_seed(seed)
    out = []
    n = n or images.shape[0]
    for i in range(n):
        x = images[i % images.shape[0]]
        noise = (2 * torch.rand(x.shape, generator=gen, dtype=x.dtype) - 1) * eps
        x_adv = (x + noise).clamp(0, 1)
        lw = int(torch.randint(1, 6, (1,), generator=gen))
        ll = int(torch.randint(1, 6, (1,), generator=gen))
        y_w = torch.randint(3, 32, (lw,), generator=gen).tolist() + [EOS_ID]
        y_l = torch.randint(3, 32, (ll,), generator=gen).tolist() + [EOS_ID]
        out.append(PreferencePair(x, x_adv, list(prompt), y_w, y_l, i))
    return out


def perturb_(module, scale=0.05, seed=1):
    """Add seeded noise to every parameter of ``module`` in place."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))


ACCEPTANCE_LINES: list[str] = []


def record(criterion, ok, detail=""):
    """Print and keep one PASS/FAIL line; conftest repeats them in the summary."""
    line = f"{criterion} {'PASS' if ok else 'FAIL'} {detail}".rstrip()
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return ok
