"""Few-shot meta-learning with cross adversarial training, on a small numpy autodiff core."""

from .attacks import AttackConfig, adversarial_episode, pgd_attack
from .data import DatasetStore, Episode, SamplerConfig, generate_synthetic, load_fsb, save_fsb
from .errors import LcatError
from .evaluation import EvalConfig, MetricReport, evaluate, format_metric, pgd_step_sweep
from .models import EmbeddingNetConfig, fine_tune, head_logits, init_params
from .training import PRESETS, ScheduleConfig, run_training

__all__ = [
    "AttackConfig", "adversarial_episode", "pgd_attack",
    "DatasetStore", "Episode", "SamplerConfig", "generate_synthetic", "load_fsb", "save_fsb",
    "LcatError",
    "EvalConfig", "MetricReport", "evaluate", "format_metric", "pgd_step_sweep",
    "EmbeddingNetConfig", "fine_tune", "head_logits", "init_params",
    "PRESETS", "ScheduleConfig", "run_training",
]
