"""Numpy neural-network core: layers, networks, checkpoints, gradient checks."""

from .checkpoint import load_checkpoint, save_checkpoint
from .layers import Parameter, sigmoid, softmax
from .network import (Classifier, Encoder, EncoderSpec, Network, UNet, build_classifier,
                      build_encoder, build_network, build_unet, network_from_state)

__all__ = [
    "Classifier", "Encoder", "EncoderSpec", "Network", "Parameter", "UNet",
    "build_classifier", "build_encoder", "build_network", "build_unet",
    "load_checkpoint", "network_from_state", "save_checkpoint", "sigmoid", "softmax",
]
