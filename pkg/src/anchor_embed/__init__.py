"""Two-stage [EOS] text embeddings on a numpy micro transformer.

Stage I trains the [EOS] state as a soft prefix that reconstructs the other
side of a query/document pair; Stage II fine-tunes it contrastively.
"""

from .ablation import AblationGrid, AblationResult, run_ablation
from .adapters import LowRankAdapter, attach_adapters, merge_adapters
from .config import RunConfig
from .data import PairBatch, QDPair, SyntheticSpec, Tokenizer, generate_synthetic_pairs, split_pairs
from .estimator import AnchorEmbedder
from .model import ModelConfig, ModelParams, decode_with_prefix, encode_eos, init_params, load_checkpoint, save_checkpoint
from .retrieval import EvalReport, compute_metrics, embed_corpus, evaluate_pairs, retrieve_topk
from .stage1 import Stage1Config, train_stage1
from .stage2 import AdapterConfig, Stage2Config, info_nce, train_stage2
from .verify import grad_check

__version__ = "0.1.0"

__all__ = [
    "AblationGrid",
    "AblationResult",
    "AdapterConfig",
    "AnchorEmbedder",
    "EvalReport",
    "LowRankAdapter",
    "ModelConfig",
    "ModelParams",
    "PairBatch",
    "QDPair",
    "RunConfig",
    "Stage1Config",
    "Stage2Config",
    "SyntheticSpec",
    "Tokenizer",
    "attach_adapters",
    "compute_metrics",
    "decode_with_prefix",
    "embed_corpus",
    "encode_eos",
    "evaluate_pairs",
    "generate_synthetic_pairs",
    "grad_check",
    "info_nce",
    "init_params",
    "load_checkpoint",
    "merge_adapters",
    "retrieve_topk",
    "run_ablation",
    "save_checkpoint",
    "split_pairs",
    "train_stage1",
    "train_stage2",
]
