"""Networks: residual encoder (image-only and image+sparse-depth fusion),
ConvLSTM bottleneck cell, multi-scale disparity decoder, pose network, and
checkpoint (de)serialization.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_SCHEMA = 1

LSTM_ACTIVATIONS = ("tanh", "relu", "elu", "none")
ENCODER_BLOCKS = {18: (2, 2, 2, 2), 34: (3, 4, 6, 3)}


@dataclass(frozen=True)
class ModelConfig:
    resolution: tuple[int, int] = (192, 640)  # (height, width)
    encoder_layers: int = 18
    bottleneck_channels: int = 512
    lstm_activation: str = "elu"
    pretrained: bool = False
    min_depth: float = 0.1
    max_depth: float = 100.0
    use_sparse_input: bool = False
    recurrent: bool = True

    def __post_init__(self):
        h, w = self.resolution
        if h % 16 != 0 or w % 16 != 0:
            raise ValueError(f"resolution must be divisible by 16, got {h}x{w}")
        if self.encoder_layers not in ENCODER_BLOCKS:
            raise ValueError(f"encoder_layers must be one of {sorted(ENCODER_BLOCKS)}")
        if self.bottleneck_channels % 8 != 0 or self.bottleneck_channels < 8:
            raise ValueError("bottleneck_channels must be a positive multiple of 8")
        if self.lstm_activation not in LSTM_ACTIVATIONS:
            raise ValueError(f"lstm_activation must be one of {LSTM_ACTIVATIONS}")
        if not 0 < self.min_depth < self.max_depth:
            raise ValueError("need 0 < min_depth < max_depth")


@dataclass
class EncoderFeatures:
    skips: list[torch.Tensor]  # strides 2, 4, 8, 16
    bottleneck: torch.Tensor  # stride 32
    input_hw: tuple[int, int]


def disp_to_depth(disp: torch.Tensor, min_depth: float, max_depth: float) -> torch.Tensor:
    """Sigmoid disparity in (0, 1) -> metric depth strictly inside (min, max)."""
    min_disp, max_disp = 1.0 / max_depth, 1.0 / min_depth
    return 1.0 / (min_disp + (max_disp - min_disp) * disp)


def _activation(name: str):
    return {
        "tanh": torch.tanh,
        "relu": F.relu,
        "elu": F.elu,
        "none": lambda t: t,
    }[name]


def _init_weights(module: nn.Module):
    # He initialization for convolutions, standard affine for the norms
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResidualEncoder(nn.Module):
    """Residual trunk producing skips at strides 2, 4, 8, 16 and a stride-32
    bottleneck. Widths scale with the bottleneck channel count (512 recovers
    the standard 18-layer layout 64/64/128/256/512)."""

    def __init__(self, in_channels: int = 3, bottleneck_channels: int = 512, layers: int = 18):
        super().__init__()
        b = bottleneck_channels
        widths = [b // 8, b // 8, b // 4, b // 2, b]
        blocks = ENCODER_BLOCKS[layers]
        self.widths = widths
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, widths[0], 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(inplace=True),
        )
        self.pool = nn.MaxPool2d(3, stride=2, padding=1)
        self.stage1 = self._stage(widths[0], widths[1], blocks[0], stride=1)
        self.stage2 = self._stage(widths[1], widths[2], blocks[1], stride=2)
        self.stage3 = self._stage(widths[2], widths[3], blocks[2], stride=2)
        self.stage4 = self._stage(widths[3], widths[4], blocks[3], stride=2)
        _init_weights(self)

    @staticmethod
    def _stage(in_ch, out_ch, num_blocks, stride):
        layers = [BasicBlock(in_ch, out_ch, stride=stride)]
        layers += [BasicBlock(out_ch, out_ch) for _ in range(num_blocks - 1)]
        return nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> EncoderFeatures:
        hw = tuple(x.shape[-2:])
        f0 = self.stem(x)
        f1 = self.stage1(self.pool(f0))
        f2 = self.stage2(f1)
        f3 = self.stage3(f2)
        bottleneck = self.stage4(f3)
        return EncoderFeatures(skips=[f0, f1, f2, f3], bottleneck=bottleneck, input_hw=hw)


class FusionStem(nn.Module):
    """Processes the image and the sparse depth (+ validity mask) through two
    small convolution stacks and concatenates them for the shared trunk."""

    def __init__(self, base_width: int):
        super().__init__()
        half = max(base_width // 2, 4)
        self.image_branch = nn.Sequential(
            nn.Conv2d(3, base_width, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(base_width, base_width, 3, padding=1),
            nn.ReLU(inplace=True),
        )
        self.depth_branch = nn.Sequential(
            nn.Conv2d(2, half, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(half, half, 3, padding=1),
            nn.ReLU(inplace=True),
        )
        self.out_channels = base_width + half
        _init_weights(self)

    def forward(self, image, sparse_depth, sparse_mask):
        if sparse_depth.shape[-2:] != image.shape[-2:]:
            raise ValueError("sparse depth resolution must match the image")
        d = torch.cat([sparse_depth, sparse_mask], dim=1)
        return torch.cat([self.image_branch(image), self.depth_branch(d)], dim=1)


class ConvLSTMCell(nn.Module):
    """ConvLSTM over spatial feature maps; the gate convolution sees the
    channel-concatenation of the input and the previous hidden state.

    The cell state is clamped to a generous box: with unbounded candidate
    activations (ELU/ReLU/none) the state feedback loop can otherwise run
    away over long sequences, overflowing float32 during sequence training
    and long-horizon inference. The bound sits far outside the healthy
    operating range and is inactive there."""

    STATE_BOUND = 100.0

    def __init__(self, input_channels: int, hidden_channels: int, activation: str = "elu"):
        super().__init__()
        self.hidden_channels = hidden_channels
        self.act = _activation(activation)
        # gate order: input, forget, candidate, output
        self.gates = nn.Conv2d(input_channels + hidden_channels, 4 * hidden_channels, 3, padding=1)
        _init_weights(self)
        with torch.no_grad():
            # bias the forget gate open so early training leans on the hidden state
            self.gates.bias[hidden_channels : 2 * hidden_channels].fill_(1.0)

    def forward(self, x, state):
        h_prev, c_prev = state
        if h_prev.shape[-2:] != x.shape[-2:]:
            raise ValueError("hidden state spatial size must match the input features")
        gi, gf, gg, go = self.gates(torch.cat([x, h_prev], dim=1)).chunk(4, dim=1)
        i, f, o = torch.sigmoid(gi), torch.sigmoid(gf), torch.sigmoid(go)
        c = (f * c_prev + i * self.act(gg)).clamp(-self.STATE_BOUND, self.STATE_BOUND)
        h = o * self.act(c)
        return h, c


class ConvELU(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)

    def forward(self, x):
        return F.elu(self.conv(x))


class MultiScaleDecoder(nn.Module):
    """Upconvolutional decoder with skip connections; emits sigmoid disparity
    at strides 8, 4, 2, 1 (coarse to fine)."""

    def __init__(self, bottleneck_channels: int, skip_channels: Sequence[int]):
        super().__init__()
        b = bottleneck_channels
        widths = [max(b // 2 ** (5 - i), 4) for i in range(5)]
        self.blocks_a = nn.ModuleList()
        self.blocks_b = nn.ModuleList()
        # skip_channels are ordered stride 2, 4, 8, 16; block i consumes skip i-1
        for i in range(4, -1, -1):
            in_a = b if i == 4 else widths[i + 1]
            self.blocks_a.append(ConvELU(in_a, widths[i]))
            in_b = widths[i] + (skip_channels[i - 1] if i >= 1 else 0)
            self.blocks_b.append(ConvELU(in_b, widths[i]))
        self.disp_heads = nn.ModuleList(
            nn.Conv2d(widths[i], 1, 3, padding=1) for i in (3, 2, 1, 0)
        )
        _init_weights(self)

    def forward(self, bottleneck, skips, input_hw):
        disps = []
        x = bottleneck
        for step, i in enumerate(range(4, -1, -1)):
            x = self.blocks_a[step](x)
            target = skips[i - 1].shape[-2:] if i >= 1 else input_hw
            x = F.interpolate(x, size=target, mode="nearest")
            if i >= 1:
                x = torch.cat([x, skips[i - 1]], dim=1)
            x = self.blocks_b[step](x)
            if i <= 3:
                disps.append(torch.sigmoid(self.disp_heads[3 - i](x)))
        return disps  # strides 8, 4, 2, 1


class RecurrentDepthModel(nn.Module):
    """Encoder -> (ConvLSTM bottleneck) -> multi-scale decoder with a learnable
    initial hidden state. recurrent=False ablates the ConvLSTM (image-based
    counterpart) while keeping the same interface."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        b = config.bottleneck_channels
        if config.use_sparse_input:
            self.fusion = FusionStem(base_width=b // 8)
            in_channels = self.fusion.out_channels
        else:
            self.fusion = None
            in_channels = 3
        self.encoder = ResidualEncoder(
            in_channels=in_channels,
            bottleneck_channels=b,
            layers=config.encoder_layers,
        )
        if config.pretrained:
            _load_pretrained_trunk(self.encoder, in_channels)
        if config.recurrent:
            self.lstm = ConvLSTMCell(b, b, activation=config.lstm_activation)
        else:
            self.lstm = None
        self.decoder = MultiScaleDecoder(b, self.encoder.widths[:4])
        h, w = config.resolution
        state_hw = (-(-h // 32), -(-w // 32))
        self.init_h = nn.Parameter(torch.zeros(1, b, *state_hw))
        self.init_c = nn.Parameter(torch.zeros(1, b, *state_hw))

    def initial_state(self, batch_size: int) -> tuple[torch.Tensor, torch.Tensor]:
        """The learnable initial (H, C), expanded over the batch."""
        return (
            self.init_h.expand(batch_size, -1, -1, -1),
            self.init_c.expand(batch_size, -1, -1, -1),
        )

    def encode(self, image, sparse_depth=None, sparse_mask=None) -> EncoderFeatures:
        if tuple(image.shape[-2:]) != tuple(self.config.resolution):
            raise ValueError(
                f"input resolution {tuple(image.shape[-2:])} does not match the "
                f"configured {tuple(self.config.resolution)}"
            )
        if self.fusion is not None:
            if sparse_depth is None:
                raise ValueError("this model expects a sparse depth input")
            if sparse_mask is None:
                sparse_mask = (sparse_depth > 0).to(sparse_depth.dtype)
            x = self.fusion(image, sparse_depth, sparse_mask)
        else:
            x = image
        return self.encoder(x)

    def step(self, features: EncoderFeatures, state):
        """One temporal step: ConvLSTM update (if recurrent) + decode."""
        if self.lstm is not None:
            h, c = self.lstm(features.bottleneck, state)
            disps = self.decoder(h, features.skips, features.input_hw)
            return disps, (h, c)
        disps = self.decoder(features.bottleneck, features.skips, features.input_hw)
        return disps, state

    def forward(self, image, state=None, sparse_depth=None, sparse_mask=None):
        if state is None:
            state = self.initial_state(image.shape[0])
        features = self.encode(image, sparse_depth, sparse_mask)
        return self.step(features, state)


class PoseNetwork(nn.Module):
    """Predicts the relative camera motion between two frames as a 6-vector
    (axis-angle, translation), scaled by 0.01 so random-init poses start near
    the identity."""

    def __init__(self, bottleneck_channels: int = 512, layers: int = 18):
        super().__init__()
        self.encoder = ResidualEncoder(
            in_channels=6, bottleneck_channels=bottleneck_channels, layers=layers
        )
        head_width = max(bottleneck_channels // 2, 16)
        self.head = nn.Sequential(
            nn.Conv2d(bottleneck_channels, head_width, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(head_width, head_width, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(head_width, head_width, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(head_width, 6, 1),
        )
        _init_weights(self)

    def forward(self, img_a, img_b):
        if img_a.shape != img_b.shape:
            raise ValueError("pose network inputs must share a resolution")
        features = self.encoder(torch.cat([img_a, img_b], dim=1))
        vec = self.head(features.bottleneck).mean(dim=(2, 3)) * 0.01
        return vec[:, :3], vec[:, 3:]


def _load_pretrained_trunk(encoder: ResidualEncoder, in_channels: int):
    if in_channels != 3 or encoder.widths[-1] != 512:
        raise ValueError(
            "pretrained weights are only available for the 3-channel, "
            "512-bottleneck trunk"
        )
    try:
        import torchvision

        ref = torchvision.models.resnet18(weights="IMAGENET1K_V1")
    except Exception as exc:  # pragma: no cover - depends on weight availability
        raise RuntimeError(
            "could not load pretrained classification weights; "
            "run with pretrained=false"
        ) from exc
    mapping = {
        "stem.0": ref.conv1,
        "stem.1": ref.bn1,
    }
    own = dict(encoder.named_modules())
    for name, src in mapping.items():
        own[name].load_state_dict(src.state_dict())
    for stage, ref_stage in zip(
        (encoder.stage1, encoder.stage2, encoder.stage3, encoder.stage4),
        (ref.layer1, ref.layer2, ref.layer3, ref.layer4),
    ):
        for block, ref_block in zip(stage, ref_stage):
            block.conv1.load_state_dict(ref_block.conv1.state_dict())
            block.bn1.load_state_dict(ref_block.bn1.state_dict())
            block.conv2.load_state_dict(ref_block.conv2.state_dict())
            block.bn2.load_state_dict(ref_block.bn2.state_dict())
            if not isinstance(block.shortcut, nn.Identity):
                block.shortcut[0].load_state_dict(ref_block.downsample[0].state_dict())
                block.shortcut[1].load_state_dict(ref_block.downsample[1].state_dict())


def save_checkpoint(
    path,
    model: RecurrentDepthModel,
    pose_net: PoseNetwork | None = None,
    *,
    metadata: dict | None = None,
    optimizer_state: dict | None = None,
):
    """Serialize weights (incl. the learnable initial state), config, and
    bookkeeping metadata. Round-trips bit-exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "schema_version": CHECKPOINT_SCHEMA,
        "model_config": asdict(model.config),
        "model_state": model.state_dict(),
        "pose_state": pose_net.state_dict() if pose_net is not None else None,
        "metadata": dict(metadata or {}),
        "optimizer_state": optimizer_state,
    }
    torch.save(payload, path)


@dataclass
class LoadedCheckpoint:
    model: RecurrentDepthModel
    pose_net: PoseNetwork | None
    metadata: dict
    optimizer_state: dict | None = None
    schema_version: int = CHECKPOINT_SCHEMA


def load_checkpoint(path) -> LoadedCheckpoint:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if payload.get("schema_version") != CHECKPOINT_SCHEMA:
        raise ValueError(
            f"unsupported checkpoint schema {payload.get('schema_version')!r}"
        )
    cfg_dict = dict(payload["model_config"])
    cfg_dict["resolution"] = tuple(cfg_dict["resolution"])
    # never re-fetch pretrained weights when restoring a trained model
    cfg_dict["pretrained"] = False
    config = ModelConfig(**cfg_dict)
    model = RecurrentDepthModel(config)
    model.load_state_dict(payload["model_state"])
    pose_net = None
    if payload.get("pose_state") is not None:
        pose_net = PoseNetwork(config.bottleneck_channels, config.encoder_layers)
        pose_net.load_state_dict(payload["pose_state"])
    return LoadedCheckpoint(
        model=model,
        pose_net=pose_net,
        metadata=payload.get("metadata", {}),
        optimizer_state=payload.get("optimizer_state"),
        schema_version=payload["schema_version"],
    )
