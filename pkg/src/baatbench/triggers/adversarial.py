"""Gradient-based generators: PGD perturbations and targeted universal
adversarial perturbations.

Models take float tensors in [0, 1]; perturbations are handled in pixel
units so that budgets map onto integer levels exactly.
"""
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .image import quantize


class NumericalError(RuntimeError):
    pass


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PerturbationSpec:
    epsilon: float = 8 / 255  # l-inf budget as a fraction of 255
    steps: int = 40
    step_size: float = None  # fraction of 255; default 2.5 * epsilon / steps
    targeted: bool = False
    target_class: int = None

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.targeted and self.target_class is None:
            raise ValueError("targeted perturbation needs target_class")

    @property
    def eps_pixels(self):
        return self.epsilon * 255.0

    @property
    def step_pixels(self):
        if self.step_size is not None:
            return self.step_size * 255.0
        return 2.5 * self.eps_pixels / max(self.steps, 1)


def _as_batch(images):
    images = np.asarray(images)
    return (images[None], True) if images.ndim == 3 else (images, False)


def _grad(model, x_pix, labels, targeted):
    x = (x_pix / 255.0).requires_grad_(True)
    loss = F.cross_entropy(model(x), labels, reduction="sum")
    (g,) = torch.autograd.grad(loss, x)
    if not torch.isfinite(g).all():
        raise NumericalError("non-finite input gradient during PGD")
    return -g if targeted else g


def pgd_pixels(model, x0, y, spec: PerturbationSpec):
    """PGD on a float pixel tensor; returns the unquantized adversarial batch."""
    eps, step = spec.eps_pixels, spec.step_pixels
    lo = torch.clamp(x0 - eps, 0.0, 255.0)
    hi = torch.clamp(x0 + eps, 0.0, 255.0)
    x = x0.clone()
    for _ in range(spec.steps):
        g = _grad(model, x, y, spec.targeted)
        x = torch.minimum(torch.maximum(x + step * g.sign(), lo), hi).detach()
    return x


def pgd_perturb(model, images, labels, spec: PerturbationSpec, batch_size=250):
    """l-inf PGD in pixel space (no random start), quantized to uint8.

    Untargeted runs ascend the loss at ``labels``; targeted runs descend the
    loss at ``spec.target_class``. Works on one image or a batch.
    """
    batch, single = _as_batch(images)
    labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (len(batch),))
    if spec.eps_pixels == 0 or spec.steps == 0:
        return batch[0].copy() if single else batch.copy()
    was_training = model.training
    model.eval()
    out = np.empty_like(batch)
    try:
        for s in range(0, len(batch), batch_size):
            x0 = torch.from_numpy(batch[s:s + batch_size].astype(np.float32))
            if spec.targeted:
                y = torch.full((len(x0),), int(spec.target_class), dtype=torch.long)
            else:
                y = torch.tensor(labels[s:s + batch_size], dtype=torch.long)
            out[s:s + batch_size] = quantize(pgd_pixels(model, x0, y, spec).numpy())
    finally:
        model.train(was_training)
    return out[0] if single else out


@dataclass
class UAPResult:
    pattern: np.ndarray  # (C, H, W) float, pixel units, |.| <= eps
    fooling_rate: float  # fraction of held-out non-target images sent to target
    base_rate: float  # same fraction without the pattern
    warning: str = None


@torch.no_grad()
def _target_rate(model, images, target, pattern=None, batch_size=500):
    hits = 0
    for s in range(0, len(images), batch_size):
        x = images[s:s + batch_size]
        if pattern is not None:
            x = quantize(x.astype(np.float64) + pattern)
        pred = model(torch.from_numpy(x.astype(np.float32) / 255.0)).argmax(1)
        hits += int((pred == target).sum())
    return hits / max(len(images), 1)


def universal_perturbation(model, dataset, target_class, spec: PerturbationSpec, holdout=None,
                           epochs=5, batch_size=128, seed=0, min_fooling_ratio=3.0):
    """Targeted universal perturbation by projected sign-gradient descent.

    One shared pattern is optimized over ``dataset`` to push inputs towards
    ``target_class``; the fooling rate is measured on ``holdout`` (defaults to
    ``dataset``) over its non-target images.
    """
    C, H, W = dataset.shape
    eval_set = holdout if holdout is not None else dataset
    eval_imgs = eval_set.images[eval_set.labels != target_class]
    eps = spec.eps_pixels
    pattern = torch.zeros((C, H, W))
    was_training = model.training
    model.eval()
    try:
        if eps > 0:
            src = dataset.images[dataset.labels != target_class]
            rng = np.random.default_rng(seed)
            step = spec.step_pixels if spec.step_size is not None else max(eps / 10.0, 0.25)
            for _ in range(epochs):
                order = rng.permutation(len(src))
                for s in range(0, len(src), batch_size):
                    x0 = torch.from_numpy(src[order[s:s + batch_size]].astype(np.float32))
                    delta = pattern.clone().requires_grad_(True)
                    x = torch.clamp(x0 + delta, 0.0, 255.0) / 255.0
                    y = torch.full((len(x0),), int(target_class), dtype=torch.long)
                    (g,) = torch.autograd.grad(F.cross_entropy(model(x), y), delta)
                    if not torch.isfinite(g).all():
                        raise NumericalError("non-finite gradient in universal perturbation")
                    pattern = torch.clamp(pattern - step * g.sign(), -eps, eps).detach()
        pat = pattern.double().numpy()
        # integer budget: rounding inside quantize keeps |delta| <= eps when eps is a whole level
        base = _target_rate(model, eval_imgs, target_class)
        rate = _target_rate(model, eval_imgs, target_class, pat) if eps > 0 else base
    finally:
        model.train(was_training)
    warning = None
    if eps > 0 and rate < min_fooling_ratio * max(base, 1e-12):
        warning = f"fooling rate {rate:.3f} below {min_fooling_ratio}x base rate {base:.3f}"
        warnings.warn(warning, ConvergenceWarning)
    return UAPResult(pat, rate, base, warning)
