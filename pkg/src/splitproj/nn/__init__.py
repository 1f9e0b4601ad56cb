from .layers import BatchNorm, Conv2d, Dense, Flatten, Identity, Layer, MaxPool2d, ReLU, Reshape
from .losses import accuracy, cross_entropy
from .network import Network, Tape, backward_from_seed, forward
from .optim import Optimizer, optimizer_apply

__all__ = [
    "BatchNorm", "Conv2d", "Dense", "Flatten", "Identity", "Layer", "MaxPool2d", "ReLU", "Reshape",
    "Network", "Tape", "forward", "backward_from_seed", "cross_entropy", "accuracy",
    "Optimizer", "optimizer_apply",
]
