"""TMOE attention and the TimeExpert forecasting models on a small numpy autodiff core."""

from .attention import SelectionTrace, TmoeConfig, multi_head_tmoe, tmoe_head_forward, vanilla_attention
from .data import AnomalySpec, Dataset, Series, SplitSpec, inject_anomaly, load_csv, make_windows, synth_series
from .model import Model, ModelConfig, PatchConfig, init_params, timeexpert_forward, timeexpert_g_forward
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
