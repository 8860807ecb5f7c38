"""tiflab: a desk-scale lab for time-step few-shot learning.

Forward-diffusion attribute-loss analysis, per-class low-rank adapters on a
small from-scratch denoiser, and time-step-weighted reconstruction-error
classification, evaluated on synthetic worlds with controlled spurious
correlations.
"""

from .schedule import Schedule, forward_sample, make_linear_schedule
from .attrloss import (
    LossCurve,
    attribute_loss_degree,
    erfc_scaled,
    fosd_check,
    loss_curve,
    loss_onset,
    mc_reconstruction_err,
    reconstruction_err,
)
from .worldgen import (
    FewShotTask,
    WorldPremiseError,
    WorldSpec,
    flip_distance_samples,
    load_task,
    make_world,
    pair_sampler,
    premise_stats,
    read_pgm,
    render,
    sample_task,
    save_task,
    write_pgm,
)
from .denoiser import (
    AdapterBank,
    AdapterDivergenceError,
    Arch,
    DenoiserParams,
    LoraAdapter,
    OptConfig,
    epsilon_mse,
    inject_lora,
    load_adapter,
    load_base,
    predict_x0,
    pretrain_base,
    recon_loss,
    sample_image,
    sample_images,
    save_adapter,
    save_base,
    train_adapter,
    weights_hash,
)
from .tif import (
    TifScore,
    TimestepWeights,
    classify,
    estimate_delta_star,
    per_class_losses,
    tif_score,
    timestep_weights,
    write_weight_csv,
)
from .baseline import (
    BaselineDivergenceError,
    LinearOpt,
    PrototypeModel,
    classify_baseline,
    fit_baseline,
)

__version__ = "0.1.0"
