from .adam import AdamState, adam_step
from .checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from .tape import DEFAULT_LEAKY_SLOPE, Node, ShapeError, Tape

__all__ = [
    "AdamState",
    "adam_step",
    "CheckpointError",
    "read_checkpoint",
    "write_checkpoint",
    "DEFAULT_LEAKY_SLOPE",
    "Node",
    "ShapeError",
    "Tape",
]
