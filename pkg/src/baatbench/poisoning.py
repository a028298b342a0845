"""Assembly of poisoned training sets D_p = D_m (modified) + D_b (benign)."""
from dataclasses import dataclass, field
from fractions import Fraction
from math import floor

import numpy as np

from .dataset import CapacityError, Dataset, save_dataset
from .triggers import TriggerSpec, apply_trigger

POLICIES = ("clean", "poisoned")


@dataclass(frozen=True)
class PoisonPlan:
    """Who gets poisoned, how, and with which label.

    Exactly one of ``global_rate`` (fraction of the whole set) and
    ``target_class_fraction`` (fraction of the target class size) is set.
    ``pre_perturbation`` is an optional pgd trigger applied to the victims
    before ``trigger``, as in the label-consistent attack.
    """

    target_class: int
    trigger: TriggerSpec
    label_policy: str = "clean"
    target_class_fraction: float = None
    global_rate: float = None
    seed: int = 0
    pre_perturbation: TriggerSpec = None

    def __post_init__(self):
        if self.label_policy not in POLICIES:
            raise ValueError(f"label_policy must be one of {POLICIES}")
        if (self.global_rate is None) == (self.target_class_fraction is None):
            raise ValueError("set exactly one of global_rate and target_class_fraction")
        if self.pre_perturbation is not None and self.pre_perturbation.kind != "pgd":
            raise ValueError("pre_perturbation must be a pgd trigger")

    def to_dict(self):
        return {
            "target_class": self.target_class,
            "trigger": self.trigger.to_dict(),
            "label_policy": self.label_policy,
            "target_class_fraction": self.target_class_fraction,
            "global_rate": self.global_rate,
            "seed": self.seed,
            "pre_perturbation": None if self.pre_perturbation is None else self.pre_perturbation.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["trigger"] = TriggerSpec.from_dict(d["trigger"])
        if d.get("pre_perturbation"):
            d["pre_perturbation"] = TriggerSpec.from_dict(d["pre_perturbation"])
        return cls(**d)


def victim_count(dataset: Dataset, plan: PoisonPlan):
    """floor() of the requested fraction; see ``select_victims``."""
    frac = plan.global_rate if plan.global_rate is not None else plan.target_class_fraction
    if not 0.0 <= frac <= 1.0:
        raise CapacityError(f"poisoning fraction {frac} outside [0, 1]")
    if plan.global_rate is not None:
        return floor(plan.global_rate * len(dataset) + 1e-9)
    class_size = int(np.sum(dataset.labels == plan.target_class))
    return floor(plan.target_class_fraction * class_size + 1e-9)


def select_victims(dataset: Dataset, plan: PoisonPlan):
    """Sorted indices of the samples to modify (D_s).

    Clean-label plans draw only from the target class; poisoned-label plans
    draw only from the other classes, so every relabeled sample is genuinely
    mislabeled. Ties in the floor() count are broken by a seeded shuffle.
    """
    if not 0 <= plan.target_class < dataset.num_classes:
        raise CapacityError(f"target class {plan.target_class} outside [0, {dataset.num_classes})")
    n = victim_count(dataset, plan)
    if plan.label_policy == "clean":
        pool = np.flatnonzero(dataset.labels == plan.target_class)
    else:
        pool = np.flatnonzero(dataset.labels != plan.target_class)
    if n > len(pool):
        raise CapacityError(f"{n} victims requested from a pool of {len(pool)} ({plan.label_policy} policy)")
    rng = np.random.default_rng([plan.seed, 0x5e1ec7])
    return np.sort(rng.permutation(pool)[:n])


@dataclass(frozen=True)
class PoisonedDataset:
    base: Dataset
    plan: PoisonPlan
    modified: np.ndarray  # sorted indices into base (D_m provenance)
    assembled: Dataset
    original_labels: np.ndarray = field(repr=False, default=None)

    @property
    def benign(self):
        mask = np.ones(len(self.base), dtype=bool)
        mask[self.modified] = False
        return np.flatnonzero(mask)

    def __len__(self):
        return len(self.assembled)

    def manifest_extra(self):
        return {
            "plan": self.plan.to_dict(),
            "modified_indices": [int(i) for i in self.modified],
            "original_labels": [int(v) for v in self.original_labels],
            "poisoning_rate": str(poisoning_rate(self)),
        }


def assemble_poisoned_dataset(dataset: Dataset, plan: PoisonPlan, surrogate=None):
    """Replace every victim by G(victim) and relabel per the plan's policy."""
    victims = select_victims(dataset, plan)
    images = np.array(dataset.images)
    labels = np.array(dataset.labels)
    if len(victims):
        x = dataset.images[victims]
        try:
            if plan.pre_perturbation is not None:
                if surrogate is None:
                    raise ValueError("pre_perturbation needs a surrogate model")
                x = apply_trigger(x, plan.pre_perturbation, model=surrogate, labels=dataset.labels[victims])
            x = apply_trigger(x, plan.trigger, model=surrogate, labels=dataset.labels[victims])
        except Exception as exc:
            raise RuntimeError(f"poison generator failed on victims starting at index {int(victims[0])}: {exc}") \
                from exc
        images[victims] = x
        if plan.label_policy == "poisoned":
            labels[victims] = plan.target_class
    assembled = dataset.replace(images=images, labels=labels, name=f"{dataset.name}-poisoned",
                                notes=dict(dataset.notes, plan=plan.to_dict()))
    return PoisonedDataset(dataset, plan, victims, assembled, np.array(dataset.labels))


def poisoning_rate(poisoned: PoisonedDataset):
    """|D_m| / |D| as an exact fraction."""
    if len(poisoned.base) == 0:
        return Fraction(0)
    return Fraction(len(poisoned.modified), len(poisoned.base))


def save_poisoned_dataset(poisoned: PoisonedDataset, directory):
    return save_dataset(poisoned.assembled, directory, extra=poisoned.manifest_extra())
