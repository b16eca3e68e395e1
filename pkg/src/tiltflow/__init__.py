"""2D flow matching with representation-aligned training and feature-guided
sampling from tilted distributions, verified against a rejection oracle."""

from .batchio import SampleBatch, read_csv, write_csv
from .net import (
    Arch,
    FeatureMap,
    ForwardTape,
    ModelParams,
    backward,
    forward_projection,
    forward_velocity,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .potentials import (
    CompositePotential,
    IPAPotential,
    SPAPotential,
    WeightMatrix,
    eval_potential,
    grad_potential,
    make_weight_matrix,
    parse_potential,
)
from .sampling import SamplerConfig, drift, sample_ode, sample_sde, velocity_to_score
from .training import TrainConfig, TrainReport, adam_step, compound_loss, interpolate, train
from .world import (
    ConditionFeature,
    feature_rows,
    gaussian_world_score,
    gaussian_world_velocity,
    point_feature,
    rejection_sample,
    sample_p0,
)
from .evaluation import (
    EmbedScanReport,
    GridHistogram,
    alignment_score,
    coverage,
    embed_scan,
    energy_distance,
    symmetric_kl_grid,
)

__version__ = "0.1.0"
