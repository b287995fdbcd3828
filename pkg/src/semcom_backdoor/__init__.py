"""Backdoor attacks and defenses for semantic-symbol reconstruction."""

from .model import (
    ChannelSpec,
    LabeledDataset,
    SemanticAutoencoder,
    TrainConfig,
    channel_transmit,
    load_checkpoint,
    power_normalize,
    psnr,
    save_checkpoint,
    train,
)
from .data import ingest_dataset, default_target, generate_synthetic
from .attack import (
    PoisonPlan,
    TriggerSpec,
    apply_trigger,
    evaluate_attack,
    make_patch_trigger,
    poison_datasets,
)
from .pruning import (
    PruneSweepConfig,
    find_knee,
    kernel_counts,
    prune,
    prune_defense,
    rank_kernels,
)
from .trigger_inversion import (
    RevEngConfig,
    TriggerEstimate,
    estimate_trigger,
    p1_objective,
    verify_trigger,
)
from .split_training import SplitConfig, ExchangeLog, receiver_view_audit, ushape_train
from .experiments import (
    ExperimentConfig,
    ResultRecord,
    f1_score,
    run_attack_experiment,
    run_defense_experiment,
)

__version__ = "0.1.0"
