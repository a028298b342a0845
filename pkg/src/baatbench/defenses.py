"""Repairing, pre-processing and detection defenses.

Repairing defenses (fine-tuning, pruning) work on a private copy of the
model. Detection scores (STRIP, SCALE-UP, Neural Cleanse) only read it.
"""
import csv
import hashlib
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import rankdata

from .dataset import Dataset
from .models import is_conv
from .training import (TrainedModel, UnsupportedArchitecture, _to_tensor, attack_success_rate,
                       benign_accuracy)
from .triggers import save_pattern

# names kept in the report schema so tables line up; not implemented here
RESERVED_DEFENSES = ("MCR", "NAD", "AutoEncoder")
DEFENSES = ("fine_tune", "prune", "shrink_pad", "strip", "scale_up", "neural_cleanse")

MAD_CONSTANT = 1.4826


class DefenseError(RuntimeError):
    pass


@dataclass
class DefenseReport:
    defense: str
    params: dict = field(default_factory=dict)
    ba_before: float = None
    asr_before: float = None
    ba_after: float = None
    asr_after: float = None
    scores: dict = field(default_factory=dict)
    auroc: float = None
    trace: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def __post_init__(self):
        for name in ("ba_before", "asr_before", "ba_after", "asr_after"):
            v = getattr(self, name)
            if v is not None and not math.isnan(v) and not 0.0 <= v <= 100.0:
                raise ValueError(f"{name}={v} outside [0, 100]")
        if self.auroc is not None and not 0.0 <= self.auroc <= 1.0:
            raise ValueError(f"auroc={self.auroc} outside [0, 1]")

    def to_dict(self):
        return asdict(self)


def _check_benign(benign: Dataset):
    if benign is None or len(benign) == 0:
        raise DefenseError("defense needs a nonempty benign subset")


def benign_fraction(dataset: Dataset, fraction, seed=0):
    """Seeded class-agnostic subset holding ``floor(fraction * N)`` images."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    n = max(1, int(math.floor(fraction * len(dataset) + 1e-9)))
    idx = np.sort(np.random.default_rng([seed, 0xBE9]).permutation(len(dataset))[:n])
    return dataset.take(idx)


# ---------------------------------------------------------------------------
# Repairing defenses


def _attack_point(model, test, trigger, target):
    ba = benign_accuracy(model, test) if test is not None else None
    asr = None
    if test is not None and trigger is not None:
        asr = attack_success_rate(model, test, trigger, target)
    return ba, asr


def fine_tune(trained: TrainedModel, benign: Dataset, epochs=30, lr=0.01, batch_size=128, momentum=0.9,
              seed=0, test=None, trigger=None, target_class=None):
    """Retrain only the fully-connected layers on benign data.

    The feature extractor stays in eval mode, so batch-norm statistics are not
    touched either. Returns ``(model, trace)`` where ``trace`` holds BA/ASR
    after every epoch when ``test`` is given.
    """
    _check_benign(benign)
    out = trained.clone()
    net = out.model
    params = net.fc_parameters()
    fc_ids = {id(p) for p in params}
    for p in net.parameters():
        p.requires_grad_(id(p) in fc_ids)
    opt = torch.optim.SGD(params, lr=lr, momentum=momentum) if lr > 0 else None
    x_all = _to_tensor(benign.images)
    y_all = torch.from_numpy(benign.labels.astype(np.int64))
    rng = np.random.default_rng([seed, 0xF1E])
    trace = []
    try:
        for epoch in range(epochs):
            net.eval()
            if opt is not None:
                order = torch.from_numpy(rng.permutation(len(benign)))
                for s in range(0, len(benign), batch_size):
                    idx = order[s:s + batch_size]
                    loss = F.cross_entropy(net(x_all[idx]), y_all[idx])
                    if not torch.isfinite(loss):
                        raise DefenseError(f"fine-tuning diverged in epoch {epoch}")
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
            if test is not None:
                ba, asr = _attack_point(out, test, trigger, target_class)
                trace.append({"epoch": epoch + 1, "ba": ba, "asr": asr})
    finally:
        for p in net.parameters():
            p.requires_grad_(True)
    net.eval()
    return out, trace


@torch.no_grad()
def channel_activations(trained: TrainedModel, images, batch_size=500):
    """Mean last-conv activation per channel (mask applied) over ``images``."""
    net = trained.model
    if not is_conv(net):
        raise UnsupportedArchitecture(f"pruning needs a conv architecture, got {trained.arch}")
    net.eval()
    total, n = None, 0
    for s in range(0, len(images), batch_size):
        a = net.masked_features(_to_tensor(images[s:s + batch_size])).double()
        part = a.mean(dim=(2, 3)).sum(0)
        total = part if total is None else total + part
        n += len(a)
    return (total / n).numpy()


def prune_channels(trained: TrainedModel, benign: Dataset, beta, activations=None):
    """Zero the ``floor(beta * C)`` last-conv channels least active on ``benign``."""
    if not 0.0 <= beta < 1.0:
        raise ValueError("beta must lie in [0, 1)")
    if not is_conv(trained.model):
        raise UnsupportedArchitecture(f"pruning needs a conv architecture, got {trained.arch}")
    _check_benign(benign)
    out = trained.clone()
    if activations is None:
        activations = channel_activations(trained, benign.images)
    C = len(activations)
    k = int(math.floor(beta * C + 1e-9))
    order = np.argsort(activations, kind="stable")
    mask = out.model.channel_mask.clone()
    mask[torch.from_numpy(order[:k])] = 0.0
    out.model.channel_mask.copy_(mask)
    return out


def prune_sweep(trained, benign, test, trigger, target_class, betas=None):
    """BA/ASR over a pruning-ratio grid (default 0, 0.02, ..., 0.98)."""
    if betas is None:
        betas = [round(0.02 * i, 2) for i in range(50)]
    act = channel_activations(trained, benign.images)
    rows = []
    for b in betas:
        pruned = prune_channels(trained, benign, b, activations=act)
        ba, asr = _attack_point(pruned, test, trigger, target_class)
        rows.append({"beta": float(b), "pruned": int((pruned.model.channel_mask == 0).sum()), "ba": ba,
                     "asr": asr})
    return rows


# ---------------------------------------------------------------------------
# Pre-processing


def shrink_pad(image, shrink_pixels, seed=0):
    """Bilinear shrink by ``s`` pixels, zero-padded back at a seeded random offset."""
    image = np.asarray(image)
    C, H, W = image.shape
    s = int(shrink_pixels)
    if not 0 <= s < min(H, W):
        raise ValueError(f"shrink_pixels must lie in [0, {min(H, W)})")
    if s == 0:
        return image.copy()
    x = torch.from_numpy(image.astype(np.float64))[None]
    small = F.interpolate(x, size=(H - s, W - s), mode="bilinear", align_corners=False)[0].numpy()
    rng = np.random.default_rng(seed)
    dy, dx = int(rng.integers(0, s + 1)), int(rng.integers(0, s + 1))
    out = np.zeros((C, H, W), dtype=np.float64)
    out[:, dy:dy + H - s, dx:dx + W - s] = small
    return np.clip(np.rint(out), 0, 255).astype(image.dtype)


def shrink_pad_batch(images, shrink_pixels, seed=0):
    return np.stack([shrink_pad(x, shrink_pixels, seed=[seed, i]) for i, x in enumerate(images)])


def shrink_pad_report(trained, test, trigger, target_class, shrink_pixels=4, seed=0):
    ba0, asr0 = _attack_point(trained, test, trigger, target_class)
    pre = lambda x: shrink_pad_batch(x, shrink_pixels, seed)  # noqa: E731
    ba1 = 100.0 * float(np.mean(trained.predict(pre(test.images)) == test.labels))
    asr1 = attack_success_rate(trained, test, trigger, target_class, preprocess=pre)
    return DefenseReport("shrink_pad", {"shrink_pixels": shrink_pixels, "seed": seed}, ba0, asr0, ba1, asr1)


# ---------------------------------------------------------------------------
# STRIP


def entropy_bits(p):
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(p > 0, -p * np.log2(p), 0.0)
    return t.sum(axis=-1)


def _pool_selection(pool, n, seed):
    """Pick ``n`` pool images by a content-keyed order, so pool order does not matter."""
    keys = [hashlib.sha256(repr(seed).encode() + np.ascontiguousarray(x).tobytes()).digest() for x in pool]
    order = sorted(range(len(pool)), key=lambda i: keys[i])
    if n > len(order):
        order = (order * (n // len(order) + 1))
    return np.asarray(order[:n])


def strip_entropy(trained, image, benign_pool, n=64, alpha=0.5, seed=0, prob_fn=None):
    """Mean base-2 prediction entropy of ``alpha*image + (1-alpha)*b`` over ``n`` pool images ``b``.

    ``image`` may be a single image or a batch; a batch gives one entropy per image.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    pool = np.asarray(benign_pool.images if isinstance(benign_pool, Dataset) else benign_pool)
    if len(pool) == 0:
        raise ValueError("benign pool is empty")
    image = np.asarray(image)
    single = image.ndim == 3
    batch = image[None] if single else image
    picks = pool[_pool_selection(pool, n, seed)].astype(np.float64)
    probs = prob_fn or trained.probs
    out = np.empty(len(batch))
    for i, x in enumerate(batch):
        mixed = alpha * x.astype(np.float64)[None] + (1 - alpha) * picks
        out[i] = entropy_bits(probs(mixed)).mean()
    return float(out[0]) if single else out


def strip_report(trained, benign_pool, poisoned_images, clean_images=None, n=64, alpha=0.5, seed=0):
    ent_p = strip_entropy(trained, poisoned_images, benign_pool, n, alpha, seed)
    scores = {"mean_entropy_poisoned": float(np.mean(ent_p))}
    auroc = None
    if clean_images is not None:
        ent_c = strip_entropy(trained, clean_images, benign_pool, n, alpha, seed)
        scores["mean_entropy_clean"] = float(np.mean(ent_c))
        # low entropy flags a poisoned input
        auroc = roc_auc(np.concatenate([-ent_p, -ent_c]),
                        np.concatenate([np.ones(len(ent_p)), np.zeros(len(ent_c))]))
    return DefenseReport("strip", {"n": n, "alpha": alpha, "seed": seed}, scores=scores, auroc=auroc)


# ---------------------------------------------------------------------------
# SCALE-UP


SCALE_SET = tuple(range(2, 12))


def _check_scales(scale_set):
    scale_set = tuple(scale_set)
    if not scale_set:
        raise ValueError("scale_set is empty")
    if any(s < 1 for s in scale_set):
        raise ValueError("scales must be >= 1")
    return scale_set


def scale_up_score(trained, image, scale_set=SCALE_SET):
    """Scaled prediction consistency: share of scales keeping the argmax."""
    scale_set = _check_scales(scale_set)
    image = np.asarray(image)
    single = image.ndim == 3
    batch = (image[None] if single else image).astype(np.float64)
    base = trained.predict(batch)
    hits = np.zeros(len(batch))
    for s in scale_set:
        hits += trained.predict(np.clip(s * batch, 0.0, 255.0)) == base
    spc = hits / len(scale_set)
    return float(spc[0]) if single else spc


def roc_auc(scores, labels):
    """Rank-based AUROC (ties count one half); label 1 is the positive class."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both positive and negative samples")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def scale_up_auroc(trained, poisoned_images, benign_images, scale_set=SCALE_SET):
    """AUROC of SPC with poisoned inputs as positives; returns ``(auroc, scores, labels)``."""
    sp = scale_up_score(trained, np.asarray(poisoned_images), scale_set)
    sb = scale_up_score(trained, np.asarray(benign_images), scale_set)
    scores = np.concatenate([np.atleast_1d(sp), np.atleast_1d(sb)])
    labels = np.concatenate([np.ones(np.size(sp)), np.zeros(np.size(sb))]).astype(int)
    return roc_auc(scores, labels), scores, labels


def write_scores_csv(path, scores, labels):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["score", "label"])
        for s, l in zip(scores, labels):
            w.writerow([repr(float(s)), int(l)])


# ---------------------------------------------------------------------------
# Neural Cleanse


@dataclass
class SynthesizedTrigger:
    class_index: int
    mask: np.ndarray  # (H, W) in [0, 1]
    pattern: np.ndarray  # (C, H, W) pixel units
    l1: float
    attack_success: float
    anomaly_index: float = float("nan")
    failed: bool = False
    note: str = ""

    def __post_init__(self):
        if self.mask.size and (self.mask.min() < 0 or self.mask.max() > 1):
            raise ValueError("mask values must lie in [0, 1]")


@dataclass
class NeuralCleanseResult:
    triggers: list
    anomaly_index: dict
    flagged: list  # index > 2
    flagged_small: list  # index > 2 and L1 below the median

    def trigger_for(self, c):
        return next(t for t in self.triggers if t.class_index == c)

    def summary(self):
        return {
            "l1": {t.class_index: t.l1 for t in self.triggers},
            "anomaly_index": self.anomaly_index,
            "flagged": self.flagged,
            "flagged_small": self.flagged_small,
            "failed": [t.class_index for t in self.triggers if t.failed],
        }


def anomaly_indices(values):
    """|v - median| / (1.4826 * MAD) for each value."""
    v = np.asarray(values, dtype=np.float64)
    med = np.median(v)
    dev = np.abs(v - med)
    mad = np.median(dev)
    if mad == 0:
        return np.where(dev == 0, 0.0, np.inf)
    return dev / (MAD_CONSTANT * mad)


def _reverse_one(net, pool_x, c, steps, lr, init_cost, batch_size, threshold, patience, rng):
    # schedule of the reference implementation: epochs over the pool, cost 0 until the
    # attack first holds for `patience` epochs, then x1.5 up / x1.5^1.5 down
    N, C, H, W = pool_x.shape
    mask_raw = torch.zeros((1, 1, H, W), requires_grad=True)
    pat_raw = torch.zeros((1, C, H, W), requires_grad=True)
    opt = torch.optim.Adam([mask_raw, pat_raw], lr=lr, betas=(0.5, 0.9))
    per_epoch = max(1, -(-N // batch_size))
    cost, cost_set, set_count = 0.0, False, 0
    best, up, down = None, 0, 0
    last = (None, None, 0.0)
    for _ in range(max(1, steps // per_epoch)):
        order = torch.from_numpy(rng.permutation(N))
        accs, l1s = [], []
        for s in range(0, N, batch_size):
            x = pool_x[order[s:s + batch_size]]
            y = torch.full((len(x),), int(c), dtype=torch.long)
            m = torch.tanh(mask_raw) / 2 + 0.5
            p = torch.tanh(pat_raw) / 2 + 0.5
            logits = net((1 - m) * x + m * p)
            l1 = m.sum()
            loss = F.cross_entropy(logits, y) + cost * l1
            if not torch.isfinite(loss):
                raise FloatingPointError("non-finite Neural Cleanse loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
            accs.append(float((logits.argmax(1) == y).float().mean()))
            l1s.append(float(l1.detach()))
        acc, l1 = float(np.mean(accs)), float(np.mean(l1s))
        with torch.no_grad():
            last = ((torch.tanh(mask_raw) / 2 + 0.5)[0, 0].numpy().copy(),
                    (torch.tanh(pat_raw) / 2 + 0.5)[0].numpy().copy(), acc)
        if acc >= threshold and (best is None or l1 < best[0]):
            best = (l1, last[0], last[1], acc)
        if not cost_set:
            set_count = set_count + 1 if acc >= threshold else 0
            if set_count >= patience:
                cost, cost_set = init_cost, True
            continue
        if acc >= threshold:
            up, down = up + 1, 0
        else:
            up, down = 0, down + 1
        if up >= patience:
            cost, up = cost * 1.5, 0
        elif down >= patience:
            cost, down = cost / 1.5 ** 1.5, 0
    if best is not None:
        return best[1], best[2], best[3], ""
    return last[0], last[1], last[2], f"attack success never reached {threshold}"


def neural_cleanse(trained: TrainedModel, sample_pool, classes=None, steps=400, lr=0.1, init_cost=1e-3,
                   batch_size=64, threshold=0.9, patience=5, seed=0):
    """Reverse-engineer a minimal (mask, pattern) trigger for every class.

    Per class the mask with the smallest L1 norm among steps that reach
    ``threshold`` attack success is kept. A class whose optimization diverges
    is recorded as failed and left out of the anomaly statistics.
    """
    net = trained.model
    net.eval()
    pool = np.asarray(sample_pool.images if isinstance(sample_pool, Dataset) else sample_pool)
    if len(pool) == 0:
        raise ValueError("sample pool is empty")
    classes = list(range(trained.num_classes)) if classes is None else [int(c) for c in classes]
    pool_x = _to_tensor(pool)
    for p in net.parameters():
        p.requires_grad_(False)
    triggers = []
    try:
        for c in classes:
            rng = np.random.default_rng([seed, c])
            try:
                m, p, acc, note = _reverse_one(net, pool_x, c, steps, lr, init_cost, batch_size, threshold,
                                               patience, rng)
                triggers.append(SynthesizedTrigger(c, m.astype(np.float64), p.astype(np.float64) * 255.0,
                                                   float(m.sum()), acc, note=note))
            except FloatingPointError as e:
                H, W = pool.shape[-2:]
                triggers.append(SynthesizedTrigger(c, np.zeros((H, W)), np.zeros(pool.shape[1:]), float("nan"),
                                                   0.0, failed=True, note=str(e)))
    finally:
        for p in net.parameters():
            p.requires_grad_(True)
    ok = [t for t in triggers if not t.failed]
    idx = anomaly_indices([t.l1 for t in ok]) if ok else np.array([])
    med = float(np.median([t.l1 for t in ok])) if ok else float("nan")
    for t, a in zip(ok, idx):
        t.anomaly_index = float(a)
    ai = {t.class_index: t.anomaly_index for t in triggers}
    flagged = [t.class_index for t in ok if t.anomaly_index > 2]
    flagged_small = [t.class_index for t in ok if t.anomaly_index > 2 and t.l1 < med]
    return NeuralCleanseResult(triggers, ai, flagged, flagged_small)


def binarize_mask(mask, rel_threshold=0.5):
    mask = np.asarray(mask, dtype=np.float64)
    peak = mask.max()
    if peak <= 0:
        return np.zeros(mask.shape, bool)
    return mask >= rel_threshold * peak


def mask_iou(mask, truth, rel_threshold=0.5):
    """IoU of the mask binarized at ``rel_threshold`` of its peak with a boolean truth mask."""
    a = binarize_mask(mask, rel_threshold)
    b = np.asarray(truth, dtype=bool)
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def mask_concentration(mask, area_fraction=0.25):
    """Largest share of mask mass inside any square window covering ``area_fraction`` of the image."""
    mask = np.asarray(mask, dtype=np.float64)
    H, W = mask.shape
    total = mask.sum()
    if total <= 0:
        return 0.0
    h = max(1, int(round(H * math.sqrt(area_fraction))))
    w = max(1, int(round(W * math.sqrt(area_fraction))))
    ii = np.zeros((H + 1, W + 1))
    ii[1:, 1:] = mask.cumsum(0).cumsum(1)
    win = ii[h:, w:] - ii[:-h, w:] - ii[h:, :-w] + ii[:-h, :-w]
    return float(win.max() / total)


def is_concentrated(mask, area_fraction=0.25, mass=0.9):
    return mask_concentration(mask, area_fraction) >= mass


def flip_iou(mask, truth, rel_threshold=0.5):
    """IoU with the truth box or its left-right mirror, whichever is larger.

    A model trained with flip augmentation sees the patch at both mirrored
    positions, and either copy is a valid reversed trigger.
    """
    truth = np.asarray(truth, dtype=bool)
    return max(mask_iou(mask, truth, rel_threshold), mask_iou(mask, truth[:, ::-1], rel_threshold))


def neural_cleanse_report(result: NeuralCleanseResult, target_class=None, truth_mask=None, params=None,
                          mirrored=False):
    """Report; with ``mirrored`` the IoU also accepts the mirrored patch box (flip-augmented training)."""
    scores = result.summary()
    notes = ["IoU and concentration are constructed quantifications of a qualitative comparison"]
    if target_class is not None:
        t = result.trigger_for(target_class)
        scores["target_anomaly_index"] = t.anomaly_index
        scores["target_concentration"] = mask_concentration(t.mask)
        if truth_mask is not None:
            scores["target_iou_placed"] = mask_iou(t.mask, truth_mask)
            scores["target_iou"] = flip_iou(t.mask, truth_mask) if mirrored else scores["target_iou_placed"]
    notes += [f"class {t.class_index}: {t.note}" for t in result.triggers if t.note]
    return DefenseReport("neural_cleanse", params or {}, scores=scores, notes=notes)


def save_synthesized(result: NeuralCleanseResult, out_dir):
    out_dir = Path(out_dir)
    files = []
    for t in result.triggers:
        files += save_pattern(t.mask, out_dir / f"class{t.class_index}_mask")
        files += save_pattern(t.pattern, out_dir / f"class{t.class_index}_pattern")
    return files
