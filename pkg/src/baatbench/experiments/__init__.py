from .cache import Cache
from .config import (ConfigError, DataConfig, ExperimentConfig, SurrogateConfig, get_path, load_config,
                     set_path)
from .presets import PRESETS, attack_config, run_preset
from .report import render_report
from .runner import (Prepared, RunReport, StageFailure, environment_fingerprint, prepare, run_experiment, sweep,
                     train_cached)
