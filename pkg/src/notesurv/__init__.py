"""Neural and Cox survival models over clinical notes and measurements."""

from .dataset import (
    FeatureSchema, RawAdmissionEvent, SurvivalDataset, SurvivalRecord,
    aggregate_admission, load_dataset, risk_set, save_dataset, simulate,
)
from .metrics import c_index, confusion, roc_auc
from .model import ModelConfig, NeuralSurvModel, TrainConfig, fit_neural, predict
from .survival import (
    BaselineHazard, CoxModel, CoxParams, SurvivalCurve, bce_loss, breslow, fit_cox,
    likelihood, pll_loss, survival_curve,
)

__version__ = "0.1.0"
