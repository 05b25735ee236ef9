"""Dataset regeneration and model-aware reweighting for sequential recommendation."""

from .bilevel import BilevelConfig, hypergradient, neumann_inverse_hvp, train_dr4sr_plus
from .config import PipelineConfig, load_config
from .corpus import Dataset, Sequence, generate_synthetic, leave_one_out_split, load_dataset
from .evalkit import MetricReport, evaluate
from .miner import MinerConfig, build_pretrain_pairs, mine_patterns
from .personalizer import Personalizer
from .regenerator import RegeneratorConfig, pretrain, regenerate_dataset
from .target_models import TargetModelConfig, train_target

__version__ = "0.1.0"
