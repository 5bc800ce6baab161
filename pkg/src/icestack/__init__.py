"""Graph-transformer completion of ice-layer thickness stacks, in numpy."""

__version__ = "0.1.0"

from .graph_stack import LayerStackSample, make_sample, read_jsonl, write_jsonl  # noqa: E402
from .model import GraphTransformer, ModelConfig, load_checkpoint, save_checkpoint  # noqa: E402
from .optim import TrainConfig, fit  # noqa: E402

__all__ = [
    "GraphTransformer", "LayerStackSample", "ModelConfig", "TrainConfig", "fit",
    "load_checkpoint", "make_sample", "read_jsonl", "save_checkpoint", "write_jsonl",
]
