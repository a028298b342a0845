"""Tagged trigger descriptions and batch application."""
import hashlib
import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

from . import image as im
from .adversarial import PerturbationSpec, pgd_perturb

KINDS = ("patch", "blended", "additive_agnostic", "additive_specific", "warp", "stylize", "pgd", "uap")

# kind -> (allowed params, required params)
_PARAMS = {
    "patch": ({"pattern", "size", "locations", "seed"}, set()),
    "blended": ({"seed", "pattern"}, set()),
    "additive_agnostic": ({"pattern"}, {"pattern"}),
    "additive_specific": ({"master_seed", "base_intensity"}, set()),
    "warp": ({"k", "seed"}, set()),
    "stylize": ({"style", "radius", "saturation", "edge_threshold", "hue_shift"}, set()),
    "pgd": ({"epsilon", "steps", "step_size", "targeted", "target_class"}, set()),
    "uap": ({"pattern", "epsilon"}, {"pattern"}),
}

DEFAULT_SPECIFIC_INTENSITY = 4.0
DEFAULT_WARP_K = 8


@dataclass(frozen=True)
class TriggerSpec:
    """One trigger family plus its parameters.

    ``intensity`` means: blend weight for patch/blended/stylize, amplification
    for the additive kinds and uap, warp strength for warp. It is ignored by
    pgd, whose strength is its epsilon.
    """

    kind: str
    params: dict = field(default_factory=dict)
    intensity: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise im.TriggerError(f"unknown trigger kind {self.kind!r}")
        allowed, required = _PARAMS[self.kind]
        extra = set(self.params) - allowed
        if extra:
            raise im.TriggerError(f"{self.kind}: unexpected parameters {sorted(extra)}")
        missing = required - set(self.params)
        if missing:
            raise im.TriggerError(f"{self.kind}: missing parameters {sorted(missing)}")
        if self.intensity < 0:
            raise im.TriggerError("intensity must be >= 0")
        if self.kind in ("patch", "blended", "stylize") and self.intensity > 1:
            raise im.TriggerError(f"{self.kind}: intensity is a blend weight in [0, 1]")

    def to_dict(self):
        params = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.params.items()}
        return {"kind": self.kind, "params": params, "intensity": float(self.intensity)}

    @classmethod
    def from_dict(cls, d):
        params = dict(d.get("params", {}))
        if isinstance(params.get("pattern"), list):
            params["pattern"] = np.asarray(params["pattern"], dtype=np.float64)
        if isinstance(params.get("locations"), list):
            params["locations"] = tuple(params["locations"])
        return cls(d["kind"], params, float(d.get("intensity", 1.0)))

    def with_intensity(self, intensity):
        return TriggerSpec(self.kind, dict(self.params), float(intensity))

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def needs_model(self):
        return self.kind == "pgd"


# ---------------------------------------------------------------------------
# Builders for the standard attacks


def badnets(size=3, locations=("bottom_right",), alpha=1.0, pattern="checker"):
    return TriggerSpec("patch", {"pattern": pattern, "size": size, "locations": tuple(locations)}, alpha)


def warp(strength=1.0, k=DEFAULT_WARP_K, seed=0):
    return TriggerSpec("warp", {"k": k, "seed": seed}, strength)


def additive_specific(amplification=1.0, master_seed=0, base_intensity=DEFAULT_SPECIFIC_INTENSITY):
    return TriggerSpec("additive_specific", {"master_seed": master_seed, "base_intensity": base_intensity},
                       amplification)


def additive_agnostic(pattern, amplification=1.0):
    return TriggerSpec("additive_agnostic", {"pattern": np.asarray(pattern, dtype=np.float64)}, amplification)


def frozen_specific(image, amplification=1.0, master_seed=0, base_intensity=DEFAULT_SPECIFIC_INTENSITY):
    """Sample-agnostic variant: one image's sample-specific pattern, shared by all."""
    return additive_agnostic(im.derive_sample_specific_pattern(image, master_seed, base_intensity), amplification)


def stylize(style="oil_paint", **params):
    return TriggerSpec("stylize", {"style": style, **params}, 1.0)


def uap(pattern, epsilon):
    return TriggerSpec("uap", {"pattern": np.asarray(pattern, dtype=np.float64), "epsilon": epsilon}, 1.0)


def perturbation_spec(spec: TriggerSpec):
    p = spec.params
    return PerturbationSpec(epsilon=p.get("epsilon", 8 / 255), steps=p.get("steps", 40),
                            step_size=p.get("step_size"), targeted=p.get("targeted", False),
                            target_class=p.get("target_class"))


def patch_spec(spec: TriggerSpec, channels):
    p = spec.params
    size = int(p.get("size", 3))
    kind = p.get("pattern", "checker")
    if isinstance(kind, np.ndarray):
        patch = kind
    elif kind == "checker":
        patch = im.checker_patch(size, channels)
    elif kind == "white":
        patch = im.solid_patch(size, 255.0, channels)
    elif kind == "black":
        patch = im.solid_patch(size, 0.0, channels)
    elif kind == "noise":
        patch = im.noise_patch(size, p.get("seed", 0), channels)
    else:
        raise im.TriggerError(f"unknown patch pattern {kind!r}")
    return im.PatchSpec(patch, tuple(p.get("locations", ("bottom_right",))), float(spec.intensity))


@lru_cache(maxsize=32)
def _warp_field(k, H, W, seed):
    f = im.build_warp_field(k, H, W, seed)
    f.setflags(write=False)
    return f


def _style_spec(spec: TriggerSpec):
    return im.StyleSpec(**spec.params)


def apply_trigger(images, spec: TriggerSpec, model=None, labels=None):
    """Apply ``spec`` to one image (C, H, W) or a batch (N, C, H, W)."""
    images = np.asarray(images)
    single = images.ndim == 3
    batch = images[None] if single else images
    N, C, H, W = batch.shape
    a = spec.intensity
    if spec.kind == "pgd":
        if model is None:
            raise im.TriggerError("pgd trigger needs a model")
        if labels is None and not spec.params.get("targeted", False):
            raise im.TriggerError("untargeted pgd needs ground-truth labels")
        out = pgd_perturb(model, batch, labels if labels is not None else 0, perturbation_spec(spec))
    elif spec.kind == "patch":
        ps = patch_spec(spec, C)
        out = np.stack([im.apply_patch(x, ps) for x in batch])
    elif spec.kind == "blended":
        pat = spec.params.get("pattern")
        if pat is None:
            pat = np.random.default_rng(spec.params.get("seed", 0)).integers(0, 256, size=(C, H, W)).astype(float)
        out = np.stack([im.apply_blend(x, np.asarray(pat, dtype=np.float64), a) for x in batch])
    elif spec.kind in ("additive_agnostic", "uap"):
        pat = np.asarray(spec.params["pattern"], dtype=np.float64)
        out = np.stack([im.apply_additive(x, pat, a) for x in batch])
    elif spec.kind == "additive_specific":
        seed = spec.params.get("master_seed", 0)
        base = spec.params.get("base_intensity", DEFAULT_SPECIFIC_INTENSITY)
        out = np.stack([im.apply_additive(x, im.derive_sample_specific_pattern(x, seed, base), a)
                        for x in batch])
    elif spec.kind == "warp":
        field_ = _warp_field(int(spec.params.get("k", DEFAULT_WARP_K)), H, W, int(spec.params.get("seed", 0)))
        out = np.stack([im.apply_warp(x, field_, a) for x in batch])
    elif spec.kind == "stylize":
        ss = _style_spec(spec)
        if a == 0:
            out = batch.copy()
        else:
            styled = np.stack([im.apply_stylization(x, ss) for x in batch])
            out = styled if a == 1 else im.quantize((1 - a) * batch.astype(float) + a * styled)
    else:  # pragma: no cover
        raise im.TriggerError(spec.kind)
    return out[0] if single else out


def save_pattern(pattern, stem):
    """PNG preview (rescaled to [0, 255]) plus an exact ``.npy`` sidecar."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    pattern = np.asarray(pattern, dtype=np.float64)
    np.save(stem.with_suffix(".npy"), pattern)
    lo, hi = pattern.min(), pattern.max()
    vis = np.zeros_like(pattern) if hi == lo else (pattern - lo) / (hi - lo) * 255.0
    vis = im.quantize(vis)
    arr = vis[0] if vis.ndim == 3 and vis.shape[0] == 1 else (np.transpose(vis, (1, 2, 0)) if vis.ndim == 3 else vis)
    Image.fromarray(arr).save(stem.with_suffix(".png"))
    return stem.with_suffix(".png"), stem.with_suffix(".npy")


def load_pattern(stem):
    return np.load(Path(stem).with_suffix(".npy"))
