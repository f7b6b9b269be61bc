"""Multi-branch cooperation network for CTR prediction on numpy."""
__version__ = "0.1.0"

from .branches import MBCNet, ModelConfig, profile_config
from .config import RunConfig, load_config, parse_config, serialize_config
from .cooperation import CoopConfig, bct_loss, mdr_loss, variant_total_loss
from .evaluation import EvalReport, evaluate, run_ablation, sweep
from .features import Batch, FeatureField, FeatureSchema, GeneratorConfig, GroupSpec, generate_synthetic, load_csv
from .kernels import BACKEND
from .metrics import auc, logloss
from .training import TrainConfig, checkpoint_load, checkpoint_save, train
