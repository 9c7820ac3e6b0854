"""tiersim: trace-driven hybrid storage simulation with learned data placement."""

from .agent import (AgentConfig, AtomSupport, Experience, ExperienceBuffer,
                    SibylAgent, default_support, experience_bits,
                    pack_experience, project_distribution, reward_value,
                    select_action, train_step, unpack_experience)
from .devices import (DeviceSpec, DeviceState, Hss, PRESETS, PageTable,
                      ServiceOutcome, apply_placement, device_service_us,
                      fast_capacity_for)
from .features import (BinScheme, BinningConfig, ObservationVector, bin_value,
                       capacity_bin, extract, observation_bits,
                       pack_observation, unpack_observation)
from .harness import (ConfigError, ExperimentConfig, MetricsReport,
                      run_experiment, run_replay, sweep, write_csv)
from .nn import (Network, copy_weights, load_checkpoint, mac_count,
                 param_count, save_checkpoint, weight_count)
from .policies import (Cde, CdeConfig, FastOnly, Hps, HpsConfig, OraclePolicy,
                       PolicyDecision, SibylPolicy, SlowOnly, TriHeuristic)
from .trace import (Op, SynthKind, TraceRecord, Workload, WorkloadStats,
                    load_msrc, parse_msrc_line, synth_trace, workload_stats)

__version__ = "0.1.0"
