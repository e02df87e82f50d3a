"""Residual encoder, multi-label classifier and U-Net segmenter.

Topology (``c0..c3`` are :attr:`EncoderSpec.channels`)::

    encoder.stem      conv3x3 3->c0, relu                  120x120
    encoder.stage0    residual c0->c0                      120x120  skip0
    encoder.stage1    maxpool2, residual c0->c1             60x60   skip1
    encoder.stage2    maxpool2, residual c1->c2             30x30   skip2
    encoder.stage3    maxpool2, residual c2->c3             15x15

    classifier: global_avg_pool -> head.dense (c3 -> K)    logits [B,K]

    decoder.up{i} for i = 3, 2, 1:
        upsample2_nearest, conv3x3 c_i->c_{i-1}, relu,
        concat_skip(skip_{i-1}), residual 2*c_{i-1}->c_{i-1}
    head.conv         conv1x1 c0->K                        logits [B,K,H,W]

Encoder parameter names are identical in both networks, so classifier
weights load straight into the U-Net.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import NetworkError
from .layers import (ConcatSkip, Conv2d, Dense, GlobalAvgPool, Layer, MaxPool2, Parameter,
                     ReLU, ResidualBlock, Sigmoid, SoftmaxPixelwise, Upsample2Nearest)

FREEZE_PARTS = ("encoder", "all_but_head")


@dataclass(frozen=True)
class EncoderSpec:
    channels: tuple[int, int, int, int] = (8, 16, 32, 64)
    in_channels: int = 3
    seed: int = 0

    def __post_init__(self):
        if len(self.channels) != 4 or min(self.channels) < 1:
            raise NetworkError("encoder needs four positive channel counts")


class Encoder(Layer):
    kind = "encoder"

    def __init__(self, spec: EncoderSpec):
        super().__init__("encoder")
        self.spec = spec
        c, seed = spec.channels, spec.seed
        self.stem = Conv2d("encoder.stem", spec.in_channels, c[0], 3, seed=seed)
        self.stem_relu = ReLU("encoder.stem.relu")
        self.blocks = [ResidualBlock("encoder.stage0", c[0], c[0], seed=seed)]
        self.pools = [None]
        for i in (1, 2, 3):
            self.pools.append(MaxPool2(f"encoder.stage{i}.pool"))
            self.blocks.append(ResidualBlock(f"encoder.stage{i}", c[i - 1], c[i], seed=seed))

    def parameters(self):
        params = self.stem.parameters()
        for b in self.blocks:
            params += b.parameters()
        return params

    def forward(self, x):
        """Feature maps at full, 1/2, 1/4 and 1/8 resolution."""
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise NetworkError(f"encoder: expected input [B,{self.spec.in_channels},H,W], "
                               f"got {list(x.shape)}")
        if x.shape[2] % 8 or x.shape[3] % 8:
            raise NetworkError(f"encoder: spatial size {x.shape[2]}x{x.shape[3]} "
                               "must be divisible by 8")
        h = self.blocks[0](self.stem_relu(self.stem(x)))
        feats = [h]
        for pool, block in zip(self.pools[1:], self.blocks[1:]):
            h = block(pool(h))
            feats.append(h)
        self._cache = True
        return feats

    def backward(self, dfeats):
        """``dfeats`` holds one gradient (or None) per feature map."""
        self._take_cache()
        d = None
        for i in (3, 2, 1):
            if dfeats[i] is not None:
                d = dfeats[i] if d is None else d + dfeats[i]
            if d is not None:
                d = self.pools[i].backward(self.blocks[i].backward(d))
            else:
                self.pools[i]._cache = self.blocks[i]._cache = None
        if dfeats[0] is not None:
            d = dfeats[0] if d is None else d + dfeats[0]
        if d is None:
            return None
        return self.stem.backward(self.stem_relu.backward(self.blocks[0].backward(d)))


class Network:
    """Base for the two task networks: parameter table, freezing, state I/O."""

    task = ""

    def __init__(self, encoder: Encoder, num_classes: int):
        self.encoder = encoder
        self.num_classes = num_classes
        self._forwarded = False

    def layers(self) -> list:
        raise NotImplementedError

    def parameters(self) -> list[Parameter]:
        params = []
        for layer in self.layers():
            params += layer.parameters()
        return params

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def num_parameters(self) -> int:
        return int(sum(p.value.size for p in self.parameters()))

    def part(self, name: str) -> list[Parameter]:
        if name == "encoder":
            return [p for p in self.parameters() if p.name.startswith("encoder.")]
        if name == "all_but_head":
            return [p for p in self.parameters() if not p.name.startswith("head.")]
        if name == "head":
            return [p for p in self.parameters() if p.name.startswith("head.")]
        raise NetworkError(f"unknown network part {name!r}; expected one of {FREEZE_PARTS}")

    def freeze(self, part: str) -> None:
        if part not in FREEZE_PARTS:
            raise NetworkError(f"unknown network part {part!r}; expected one of {FREEZE_PARTS}")
        for p in self.part(part):
            p.frozen = True

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.frozen = False

    def trainable(self) -> list[Parameter]:
        return [p for p in self.parameters() if not p.frozen]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> "Network":
        for p in self.parameters():
            p.astype(dtype)
        return self

    @property
    def dtype(self):
        return self.encoder.stem.weight.value.dtype

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.parameters()}

    def load_state(self, state: dict[str, np.ndarray], prefix: str = "",
                   strict: bool = True) -> list[str]:
        """Copy matching arrays into parameters whose names start with ``prefix``.

        With ``strict`` every such parameter must be present in ``state`` with
        the same shape. Returns the loaded names.
        """
        loaded = []
        for name, p in self.named_parameters().items():
            if not name.startswith(prefix):
                continue
            if name not in state:
                if strict:
                    raise NetworkError(f"checkpoint lacks parameter {name}")
                continue
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise NetworkError(f"parameter {name}: checkpoint shape {value.shape} "
                                   f"!= network shape {p.shape}")
            p.value = value.astype(p.value.dtype).copy()
            loaded.append(name)
        return loaded

    def _check_forwarded(self):
        if not self._forwarded:
            raise NetworkError(f"{self.task}: backward called before forward")
        self._forwarded = False

    def _encoder_frozen(self):
        return all(p.frozen for p in self.part("encoder"))


class Classifier(Network):
    task = "classify"

    def __init__(self, encoder: Encoder, num_classes: int):
        super().__init__(encoder, num_classes)
        c3 = encoder.spec.channels[3]
        self.pool = GlobalAvgPool("head.pool")
        self.dense = Dense("head.dense", c3, num_classes, seed=encoder.spec.seed)
        # every class starts at p=0.5 instead of at random confident logits
        self.dense.weight.value[...] = 0
        self.output = Sigmoid("head.sigmoid")

    def layers(self):
        return [self.encoder, self.dense]

    def forward(self, x):
        """Multi-label logits ``[B, K]``."""
        feats = self.encoder(x)
        self._forwarded = True
        return self.dense(self.pool(feats[3]))

    def predict_proba(self, x):
        return self.output.forward(self.forward(x))

    def backward(self, dlogits):
        self._check_forwarded()
        d = self.pool.backward(self.dense.backward(dlogits))
        if self._encoder_frozen():
            self.encoder._take_cache()
            return
        self.encoder.backward([None, None, None, d])


class DecoderStage(Layer):
    kind = "decoder_stage"

    def __init__(self, name, in_channels, out_channels, seed=0):
        super().__init__(name)
        self.up = Upsample2Nearest(f"{name}.up")
        self.conv = Conv2d(f"{name}.conv", in_channels, out_channels, 3, seed=seed)
        self.relu = ReLU(f"{name}.relu")
        self.concat = ConcatSkip(f"{name}.concat")
        self.block = ResidualBlock(f"{name}.block", 2 * out_channels, out_channels, seed=seed)

    def parameters(self):
        return self.conv.parameters() + self.block.parameters()

    def forward(self, x, skip):
        h = self.relu(self.conv(self.up(x)))
        return self.block(self.concat(h, skip))

    def __call__(self, x, skip):
        return self.forward(x, skip)

    def backward(self, dy):
        dh, dskip = self.concat.backward(self.block.backward(dy))
        return self.up.backward(self.conv.backward(self.relu.backward(dh))), dskip


class UNet(Network):
    task = "segment"

    def __init__(self, encoder: Encoder, num_classes: int):
        super().__init__(encoder, num_classes)
        c, seed = encoder.spec.channels, encoder.spec.seed
        self.stages = [DecoderStage(f"decoder.up{i}", c[i], c[i - 1], seed=seed)
                       for i in (3, 2, 1)]
        self.head = Conv2d("head.conv", c[0], num_classes, 1, seed=seed)
        self.output = SoftmaxPixelwise("head.softmax")

    def layers(self):
        return [self.encoder, *self.stages, self.head]

    def forward(self, x):
        """Per-pixel logits ``[B, K, H, W]`` at input resolution."""
        feats = self.encoder(x)
        h = feats[3]
        for stage, skip in zip(self.stages, (feats[2], feats[1], feats[0])):
            h = stage(h, skip)
        self._forwarded = True
        return self.head(h)

    def predict_proba(self, x):
        return self.output.forward(self.forward(x))

    def backward(self, dlogits):
        self._check_forwarded()
        d = self.head.backward(dlogits)
        dskips = [None, None, None, None]
        for stage, level in zip(self.stages[::-1], (0, 1, 2)):
            d, dskips[level] = stage.backward(d)
        dskips[3] = d
        if self._encoder_frozen():
            self.encoder._take_cache()
            return
        self.encoder.backward(dskips)


def build_encoder(spec: EncoderSpec | None = None) -> Encoder:
    return Encoder(spec or EncoderSpec())


def build_classifier(encoder: Encoder, num_classes: int) -> Classifier:
    return Classifier(encoder, num_classes)


def build_unet(encoder: Encoder, num_classes: int) -> UNet:
    """U-Net over ``encoder``; the decoder mirrors its three downsampling stages."""
    return UNet(encoder, num_classes)


def build_network(task: str, num_classes: int, spec: EncoderSpec | None = None) -> Network:
    encoder = build_encoder(spec)
    if task == "classify":
        return build_classifier(encoder, num_classes)
    if task == "segment":
        return build_unet(encoder, num_classes)
    raise NetworkError(f"unknown task {task!r}")


def network_from_state(state: dict[str, np.ndarray], seed: int = 0) -> Network:
    """Rebuild the network a checkpoint was saved from, inferring shapes."""
    try:
        channels = (state["encoder.stem.weight"].shape[0],
                    *(state[f"encoder.stage{i}.conv1.weight"].shape[0] for i in (1, 2, 3)))
        in_channels = state["encoder.stem.weight"].shape[1]
    except KeyError as exc:
        raise NetworkError(f"checkpoint lacks encoder parameter {exc.args[0]}") from None
    spec = EncoderSpec(tuple(int(c) for c in channels), int(in_channels), seed)
    if "head.dense.weight" in state:
        net = build_network("classify", state["head.dense.weight"].shape[0], spec)
    elif "head.conv.weight" in state:
        net = build_network("segment", state["head.conv.weight"].shape[0], spec)
    else:
        raise NetworkError("checkpoint has neither a classification nor segmentation head")
    net.load_state(state)
    return net
