"""Joint V2I/V2V spectrum sharing simulator with multi-agent deep Q-learning."""

from .env import (
    Action,
    EpisodeState,
    NetworkConfig,
    StepOutcome,
    build_observation,
    build_observations,
    env_reset,
    env_step,
    global_reward,
    link_rate,
    v2i_sinr,
    v2v_interference,
    v2v_reward,
    v2v_sinr,
)
from .evalkit import (
    DeliveryHistogram,
    RunMetrics,
    compare_runs,
    delivery_rate,
    delivery_time_histogram,
    v2i_sum_capacity,
)
from .geochannel import (
    GainTensor,
    LinkClass,
    Obstacle,
    PropagationParams,
    Scene,
    ShadowingState,
    TraceSet,
    Vehicle,
    channel_snapshot,
    classify_link,
    generate_grid_traces,
    large_scale_gain_db,
    load_obstacles,
    load_traces,
    pair_v2v,
    sample_small_scale,
    update_shadowing,
)
from .marl import (
    AgentBundle,
    ReplayMemory,
    TrainSchedule,
    Transition,
    Variant,
    ddqn_target,
    dqn_target,
    epsilon_at,
    evaluate,
    loss_and_gradients,
    select_action,
    sync_target,
    train,
)
from .qnet import (
    OptimizerState,
    QNetwork,
    backward,
    forward,
    grad_check,
    init_network,
    load_checkpoint,
    rmsprop_step,
    save_checkpoint,
)

__version__ = "0.1.0"
