"""Serializable experiment configuration."""
import copy
import json
from dataclasses import asdict, dataclass, field, replace

from ..dataset import DIFFICULTIES
from ..models import ARCHS
from ..poisoning import PoisonPlan
from ..training import TrainConfig, config_hash
from ..triggers import PerturbationSpec

DEFENSE_NAMES = ("fine_tune", "prune", "shrink_pad", "strip", "scale_up", "neural_cleanse")
TRIGGER_SOURCES = ("uap", "frozen_specific")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # synthetic | cifar10
    num_classes: int = 10
    per_class_train: int = 500
    per_class_test: int = 50
    image_size: int = 32
    difficulty: str = "natural"
    seed: int = 0
    cifar10_dir: str = None

    def __post_init__(self):
        if self.source not in ("synthetic", "cifar10"):
            raise ConfigError(f"unknown dataset source {self.source!r}")
        if self.difficulty not in DIFFICULTIES:
            raise ConfigError(f"difficulty must be one of {DIFFICULTIES}")


@dataclass(frozen=True)
class SurrogateConfig:
    """Benign model trained on the clean training split, used by model-based generators.

    With ``adversarial`` set it is PGD-adversarially trained (the robust model).
    """

    arch: str = "conv_small"
    train: TrainConfig = TrainConfig()
    adversarial: PerturbationSpec = None

    def to_dict(self):
        return {"arch": self.arch, "train": self.train.to_dict(),
                "adversarial": None if self.adversarial is None else asdict(self.adversarial)}

    @classmethod
    def from_dict(cls, d):
        adv = d.get("adversarial")
        return cls(d.get("arch", "conv_small"), TrainConfig.from_dict(d.get("train", {})),
                   PerturbationSpec(**adv) if adv else None)


@dataclass(frozen=True)
class ExperimentConfig:
    """poison -> train -> evaluate -> defend, fully described.

    ``trigger_source`` builds a model-dependent trigger at run time
    (``{"kind": "uap", "epsilon": e}`` or ``{"kind": "frozen_specific",
    "index": i, "amplification": a}``) and replaces ``poison.trigger``.
    ``distortion`` (``{"epsilon": e, "steps": n}``) perturbs every training
    image with untargeted PGD against the surrogate before training.
    The global ``seed`` overrides the train and poison seeds.
    """

    name: str = "experiment"
    dataset: DataConfig = DataConfig()
    arch: str = "conv_small"
    train: TrainConfig = TrainConfig()
    poison: PoisonPlan = None
    trigger_source: dict = None
    eval_trigger: object = None  # TriggerSpec; defaults to the poison trigger
    surrogate: SurrogateConfig = None
    distortion: dict = None
    evaluations: tuple = ("ba", "asr")
    defenses: tuple = ()
    output_dir: str = None
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown architecture {self.arch!r}")
        for e in self.evaluations:
            if e not in ("ba", "asr"):
                raise ConfigError(f"unknown evaluation {e!r}")
        for d in self.defenses:
            if not isinstance(d, dict) or d.get("name") not in DEFENSE_NAMES:
                raise ConfigError(f"bad defense entry {d!r}; names: {DEFENSE_NAMES}")
        if self.trigger_source is not None:
            if self.trigger_source.get("kind") not in TRIGGER_SOURCES:
                raise ConfigError(f"trigger_source kind must be one of {TRIGGER_SOURCES}")
            if self.poison is None:
                raise ConfigError("trigger_source needs a poison plan")
        needs_surrogate = (self.trigger_source is not None and self.trigger_source["kind"] == "uap") \
            or self.distortion is not None \
            or (self.poison is not None and (self.poison.pre_perturbation is not None
                                             or self.poison.trigger.needs_model))
        if needs_surrogate and self.surrogate is None:
            raise ConfigError("this configuration needs a surrogate model")
        if "asr" in self.evaluations and self.poison is None and self.eval_trigger is None:
            raise ConfigError("asr evaluation needs a poison plan or an eval_trigger")

    # -- effective values --------------------------------------------------
    @property
    def effective_train(self):
        return replace(self.train, seed=self.seed)

    @property
    def effective_plan(self):
        return None if self.poison is None else replace(self.poison, seed=self.seed)

    # -- serialization -----------------------------------------------------
    def to_dict(self):
        return {
            "name": self.name,
            "dataset": asdict(self.dataset),
            "arch": self.arch,
            "train": self.train.to_dict(),
            "poison": None if self.poison is None else self.poison.to_dict(),
            "trigger_source": copy.deepcopy(self.trigger_source),
            "eval_trigger": None if self.eval_trigger is None else self.eval_trigger.to_dict(),
            "surrogate": None if self.surrogate is None else self.surrogate.to_dict(),
            "distortion": copy.deepcopy(self.distortion),
            "evaluations": list(self.evaluations),
            "defenses": copy.deepcopy(list(self.defenses)),
            "output_dir": self.output_dir,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        from ..triggers import TriggerSpec
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config fields {sorted(extra)}")
        try:
            return cls(
                name=d.get("name", "experiment"),
                dataset=DataConfig(**d.get("dataset", {})),
                arch=d.get("arch", "conv_small"),
                train=TrainConfig.from_dict(d.get("train", {})),
                poison=PoisonPlan.from_dict(d["poison"]) if d.get("poison") else None,
                trigger_source=d.get("trigger_source"),
                eval_trigger=TriggerSpec.from_dict(d["eval_trigger"]) if d.get("eval_trigger") else None,
                surrogate=SurrogateConfig.from_dict(d["surrogate"]) if d.get("surrogate") else None,
                distortion=d.get("distortion"),
                evaluations=tuple(d.get("evaluations", ("ba", "asr"))),
                defenses=tuple(d.get("defenses", ())),
                output_dir=d.get("output_dir"),
                seed=int(d.get("seed", 0)),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as e:
            raise ConfigError(f"invalid config: {e}") from e

    def hash(self):
        """Content hash; ignores ``output_dir`` and is stable across key order."""
        d = self.to_dict()
        d.pop("output_dir")
        return config_hash(d)

    def with_path(self, path, value):
        return ExperimentConfig.from_dict(set_path(self.to_dict(), path, value))


def load_config(path):
    try:
        with open(path, encoding="utf-8") as f:
            d = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return ExperimentConfig.from_dict(d)


def get_path(d, path):
    cur = d
    for part in path.split("."):
        if not isinstance(cur, dict) or part not in cur:
            raise ConfigError(f"config path {path!r} does not exist")
        cur = cur[part]
    return cur


def set_path(d, path, value):
    """Copy of ``d`` with the scalar at dotted ``path`` replaced."""
    d = copy.deepcopy(d)
    parts = path.split(".")
    cur = d
    for part in parts[:-1]:
        if not isinstance(cur, dict) or not isinstance(cur.get(part), dict):
            raise ConfigError(f"config path {path!r} does not exist")
        cur = cur[part]
    if not isinstance(cur, dict) or parts[-1] not in cur:
        raise ConfigError(f"config path {path!r} does not exist")
    old = cur[parts[-1]]
    if isinstance(old, (dict, list)):
        raise ConfigError(f"config path {path!r} does not address a scalar")
    cur[parts[-1]] = value
    return d
