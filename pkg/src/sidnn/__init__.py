"""Nonlinear system identification with GRU and TCN sequence models.

Autoregressive (AR) and non-autoregressive (NAR) variants, trained from
scratch (hand-written backprop) with TBPTT, loss masking, RAdam+Lookahead,
cosine annealing, an lr finder, and ASHA hyperparameter search.
"""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (
    SequenceData,
    Standardizer,
    WindowPlan,
    fit_standardizer,
    load_csv,
    load_descriptor,
    sample_windows,
    split_estimation,
    synth_wiener_hammerstein,
    wiener_hammerstein_response,
)
from .errors import SidnnError
from .hpo import SearchSpace, TrialRecord, asha_decide, run_search, sample_config
from .inference import (
    SimReport,
    bench_inference_time,
    bench_training_time,
    evaluate_rmse,
    fast_ar_step,
    simulate,
)
from .models import (
    ConvCache,
    HiddenState,
    Model,
    ModelSpec,
    ParamStore,
    gru_cell,
    gru_forward,
    gru_forward_ar,
    init_params,
    receptive_field,
    tcn_forward,
    tcn_forward_ar,
)
from .training import (
    TrainConfig,
    TrainState,
    cosine_schedule,
    fit,
    lr_finder,
    masked_mse,
    radam_lookahead_step,
    train_epoch,
)

__version__ = "0.1.0"
