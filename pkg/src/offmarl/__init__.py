"""Offline conservative and distributional multi-agent RL for UAV data collection.

Pipeline: collect an offline dataset with an online behavior policy
(:mod:`offmarl.dataset`), train a conservative / distributional variant on
it (:mod:`offmarl.algos`), and evaluate risk-aware metrics online
(:mod:`offmarl.evaluate`). The grid-world environment lives in
:mod:`offmarl.env`; the dense-network substrate in :mod:`offmarl.nets` runs
on a compiled kernel core when available (:mod:`offmarl.kernels`).
"""

from .algos import (ALGORITHMS, AgentHeads, TrainerConfig, cql_penalty,
                    fit_offline, greedy_action, ma_ccql_loss, ma_ccqr_loss,
                    ma_ciql_loss, ma_ciqr_loss, make_greedy_policies,
                    quantile_huber, quantile_midpoints, train)
from .dataset import (BehaviorConfig, Dataset, load_dataset, relabel_rewards,
                      sample_batch, save_dataset, subsample,
                      train_behavior_policy)
from .env import (AgentAction, EnvConfig, EnvState, make_env_config, reset,
                  step, update_aoi)
from .errors import (ConfigError, DataFormatError, DivergenceError,
                     OffmarlError)
from .evaluate import (EvalReport, cvar_of, evaluate_heads, evaluate_policies,
                       pareto_sweep, rollout, violation_pct)
from .kernels import backend_name
from .nets import GradientBundle, MlpNet, logsumexp_stable

__version__ = "0.1.0"

__all__ = [
    "ALGORITHMS", "AgentAction", "AgentHeads", "BehaviorConfig", "ConfigError",
    "DataFormatError", "Dataset", "DivergenceError", "EnvConfig", "EnvState",
    "EvalReport", "GradientBundle", "MlpNet", "OffmarlError", "TrainerConfig",
    "backend_name", "cql_penalty", "cvar_of", "evaluate_heads",
    "evaluate_policies", "fit_offline", "greedy_action", "load_dataset",
    "logsumexp_stable", "ma_ccql_loss", "ma_ccqr_loss", "ma_ciql_loss",
    "ma_ciqr_loss", "make_env_config", "make_greedy_policies", "pareto_sweep",
    "quantile_huber", "quantile_midpoints", "relabel_rewards", "reset",
    "rollout", "sample_batch", "save_dataset", "step", "subsample", "train",
    "train_behavior_policy", "update_aoi", "violation_pct",
]
