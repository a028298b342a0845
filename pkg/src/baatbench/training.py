"""Training, BA/ASR evaluation, Grad-CAM and checkpoint persistence."""
import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import Dataset
from .models import build_model, is_conv
from .triggers import PerturbationSpec, TriggerSpec, apply_trigger
from .triggers.adversarial import pgd_pixels

torch.set_num_threads(1)


class TrainingError(RuntimeError):
    pass


class EvaluationError(RuntimeError):
    pass


class UnsupportedArchitecture(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 128
    lr: float = 0.05
    lr_milestones: tuple = (0.5, 0.75)  # fractions of ``epochs``
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    augmentation: str = "horizontal_flip"
    seed: int = 0
    adversarial_training: PerturbationSpec = None

    def __post_init__(self):
        if self.augmentation not in ("none", "horizontal_flip"):
            raise ValueError(f"unknown augmentation {self.augmentation!r}")

    def milestone_epochs(self):
        return sorted({int(round(f * self.epochs)) for f in self.lr_milestones})

    def to_dict(self):
        d = asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("lr_milestones") is not None:
            d["lr_milestones"] = tuple(d["lr_milestones"])
        if d.get("adversarial_training"):
            d["adversarial_training"] = PerturbationSpec(**d["adversarial_training"])
        return cls(**d)


@dataclass
class TrainedModel:
    arch: str
    model: torch.nn.Module
    num_classes: int
    input_shape: tuple
    config: TrainConfig
    loss_curve: list = field(default_factory=list)
    dataset_hash: str = ""

    def clone(self):
        return TrainedModel(self.arch, copy.deepcopy(self.model), self.num_classes, self.input_shape,
                            self.config, list(self.loss_curve), self.dataset_hash)

    @torch.no_grad()
    def logits(self, images, batch_size=500):
        self.model.eval()
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        out = [self.model(_to_tensor(images[s:s + batch_size])) for s in range(0, len(images), batch_size)]
        return torch.cat(out).numpy() if out else np.zeros((0, self.num_classes), np.float32)

    def probs(self, images):
        z = torch.from_numpy(self.logits(images)).double()
        return torch.softmax(z, dim=1).numpy()

    def predict(self, images):
        return self.logits(images).argmax(axis=1)


def _to_tensor(images):
    return torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32) / 255.0)


def train(arch, dataset: Dataset, config: TrainConfig = TrainConfig(), log=None):
    """SGD with momentum, step-decayed learning rate and optional flip / PGD training."""
    if len(dataset) == 0:
        raise TrainingError("empty training set")
    torch.manual_seed(config.seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    C, H, W = dataset.shape
    model = build_model(arch, dataset.num_classes, C, H)
    opt = torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, config.milestone_epochs(), config.lr_decay)
    rng = np.random.default_rng([config.seed, 7])
    x_all = torch.from_numpy(dataset.images.astype(np.float32))  # pixel units
    y_all = torch.from_numpy(dataset.labels.astype(np.int64))
    adv = config.adversarial_training
    curve = []
    for epoch in range(config.epochs):
        model.train()
        order = torch.from_numpy(rng.permutation(len(dataset)))
        flips = rng.random(len(dataset)) < 0.5 if config.augmentation == "horizontal_flip" else None
        total, seen = 0.0, 0
        for s in range(0, len(dataset), config.batch_size):
            idx = order[s:s + config.batch_size]
            x, y = x_all[idx], y_all[idx]
            if flips is not None:
                f = torch.from_numpy(flips[idx.numpy()])
                x = torch.where(f.view(-1, 1, 1, 1), x.flip(-1), x)
            if adv is not None and adv.epsilon > 0:
                model.eval()
                x = pgd_pixels(model, x, y, adv)
                model.train()
            loss = F.cross_entropy(model(x / 255.0), y)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss in epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            seen += len(idx)
        sched.step()
        curve.append(total / seen)
        if log:
            log(f"epoch {epoch + 1}/{config.epochs} loss {curve[-1]:.4f}")
    model.eval()
    return TrainedModel(arch, model, dataset.num_classes, (C, H, W), config, curve, dataset.fingerprint())


# ---------------------------------------------------------------------------
# Metrics


def benign_accuracy(model: TrainedModel, test_set: Dataset):
    if len(test_set) == 0:
        raise EvaluationError("empty test set")
    return 100.0 * float(np.mean(model.predict(test_set.images) == test_set.labels))


def per_class_accuracy(model: TrainedModel, test_set: Dataset):
    pred = model.predict(test_set.images)
    return {int(c): 100.0 * float(np.mean(pred[test_set.labels == c] == c))
            for c in np.unique(test_set.labels)}


def attack_success_rate(model: TrainedModel, test_set: Dataset, trigger: TriggerSpec, target_class,
                        include_target=False, preprocess=None):
    """Percent of triggered test images (true label != target) predicted as target.

    ``preprocess`` is applied to the triggered batch before prediction, which
    is how input-transformation defenses are evaluated.
    """
    keep = np.ones(len(test_set), bool) if include_target else test_set.labels != target_class
    if not keep.any():
        raise EvaluationError("no test images outside the target class")
    x = apply_trigger(test_set.images[keep], trigger, model=model.model, labels=test_set.labels[keep])
    if preprocess is not None:
        x = preprocess(x)
    return 100.0 * float(np.mean(model.predict(x) == target_class))


@dataclass
class AttackReport:
    benign_accuracy: float
    attack_success_rate: float
    per_class_accuracy: dict
    provenance: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def evaluate(model: TrainedModel, test_set: Dataset, trigger: TriggerSpec = None, target_class=None,
             provenance=None):
    ba = benign_accuracy(model, test_set)
    asr = None  # not evaluated
    if trigger is not None:
        asr = attack_success_rate(model, test_set, trigger, target_class)
    return AttackReport(ba, asr, per_class_accuracy(model, test_set), provenance or {})


# ---------------------------------------------------------------------------
# Grad-CAM


def gradcam(model: TrainedModel, image, class_index, weighting="channel"):
    """Grad-CAM map (H, W) in [0, 1] from the last conv activation.

    ``weighting="channel"`` is standard Grad-CAM (spatially averaged
    gradients per channel); ``"element"`` multiplies gradients and
    activations position by position, which keeps the spatial information a
    flatten-then-FC head puts into the gradient.
    """
    if weighting not in ("channel", "element"):
        raise ValueError("weighting must be 'channel' or 'element'")
    net = model.model
    if not is_conv(net):
        raise UnsupportedArchitecture(f"Grad-CAM needs a conv architecture, got {model.arch}")
    net.eval()
    x = _to_tensor(np.asarray(image)[None])
    acts = net.masked_features(x).detach().requires_grad_(True)
    score = net.head(acts)[0, int(class_index)]
    (grads,) = torch.autograd.grad(score, acts)
    weights = grads.mean(dim=(2, 3), keepdim=True) if weighting == "channel" else grads
    cam = torch.relu((weights * acts).sum(dim=1, keepdim=True))
    cam = F.interpolate(cam, size=x.shape[-2:], mode="bilinear", align_corners=False)[0, 0].detach()
    peak = float(cam.max())
    if peak > 0:
        cam = cam / peak
    return cam.clamp(0.0, 1.0).numpy().astype(np.float64)


# ---------------------------------------------------------------------------
# Persistence


def save_model(trained: TrainedModel, path, extra=None):
    """State dict at ``path`` plus a JSON sidecar ``path.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(trained.model.state_dict(), path)
    meta = {
        "arch": trained.arch,
        "num_classes": trained.num_classes,
        "input_shape": list(trained.input_shape),
        "config": trained.config.to_dict(),
        "config_hash": config_hash(trained.config.to_dict()),
        "dataset_hash": trained.dataset_hash,
        "loss_curve": trained.loss_curve,
    }
    if extra:
        meta.update(extra)
    with open(str(path) + ".json", "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=1)


def load_model(path):
    path = Path(path)
    with open(str(path) + ".json", encoding="utf-8") as f:
        meta = json.load(f)
    C, H, W = meta["input_shape"]
    net = build_model(meta["arch"], meta["num_classes"], C, H)
    net.load_state_dict(torch.load(path, weights_only=True))
    net.eval()
    return TrainedModel(meta["arch"], net, meta["num_classes"], (C, H, W),
                        TrainConfig.from_dict(meta["config"]), meta.get("loss_curve", []),
                        meta.get("dataset_hash", ""))


def config_hash(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
