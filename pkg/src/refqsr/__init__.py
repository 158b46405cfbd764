"""Reference-based mixed-precision quantized super-resolution inference."""
from .config import NetworkConfig, RunConfig, TilingConfig
from .cost_model import CostReport, InferencePlan, cost_report, count_bitops, compute_fqr, count_params
from .pipeline import RunResult, quantized_inference, run_refqsr
from .quantizer import BitPolicy, derive_bit_policy
from .weights import ModelWeights, init_random, load_weights, save_weights

__version__ = "0.1.0"
