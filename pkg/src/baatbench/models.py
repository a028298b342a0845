"""Desk-scale classifiers.

Conv models split into ``features`` (ending at the last conv activation, the
layer Grad-CAM and channel pruning act on) and ``head``. A per-channel mask
buffer sits between the two so pruning only zeroes channels.
"""
import torch
import torch.nn as nn

ARCHS = ("conv_small", "conv_deeper", "mlp")


def _conv_bn(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
                         nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class _Masked(nn.Module):
    last_channels = None

    def init_mask(self):
        self.register_buffer("channel_mask", torch.ones(self.last_channels))

    def forward(self, x):
        return self.head(self.masked_features(x))

    def masked_features(self, x):
        return self.features(x) * self.channel_mask.view(1, -1, 1, 1)

    def fc_parameters(self):
        return [p for m in self.head.modules() if isinstance(m, nn.Linear) for p in m.parameters()]


class ConvSmall(_Masked):
    """4 conv layers + 2 fully-connected layers (VGG-like stand-in)."""

    def __init__(self, num_classes, in_channels=3, image_size=32, width=16):
        super().__init__()
        w = width
        self.last_channels = 2 * w
        self.features = nn.Sequential(
            _conv_bn(in_channels, w), _conv_bn(w, w), nn.MaxPool2d(2),
            _conv_bn(w, 2 * w), _conv_bn(2 * w, 2 * w),
        )
        s = image_size // 4
        self.head = nn.Sequential(nn.MaxPool2d(2), nn.Flatten(), nn.Linear(2 * w * s * s, 128),
                                  nn.ReLU(inplace=True), nn.Linear(128, num_classes))
        self.init_mask()


class _Residual(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.skip = nn.Identity() if stride == 1 and cin == cout else nn.Sequential(
            nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        return torch.relu(self.bn2(self.conv2(out)) + self.skip(x))


class ConvDeeper(_Masked):
    """8 conv layers with residual connections (ResNet-like stand-in)."""

    def __init__(self, num_classes, in_channels=3, image_size=32, width=16):
        super().__init__()
        w = width
        self.last_channels = 4 * w
        self.features = nn.Sequential(
            _conv_bn(in_channels, w),
            _Residual(w, w, 1), _Residual(w, 2 * w, 2), _Residual(2 * w, 4 * w, 2),
            _conv_bn(4 * w, 4 * w),
        )
        self.head = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(4 * w, num_classes))
        self.init_mask()


class MLP(nn.Module):
    def __init__(self, num_classes, in_channels=3, image_size=32, hidden=256):
        super().__init__()
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(in_channels * image_size * image_size, hidden),
                                  nn.ReLU(inplace=True), nn.Linear(hidden, num_classes))

    def forward(self, x):
        return self.head(x)

    def fc_parameters(self):
        return list(self.head.parameters())


def build_model(arch, num_classes, in_channels=3, image_size=32):
    if arch == "conv_small":
        return ConvSmall(num_classes, in_channels, image_size)
    if arch == "conv_deeper":
        return ConvDeeper(num_classes, in_channels, image_size)
    if arch == "mlp":
        return MLP(num_classes, in_channels, image_size)
    raise ValueError(f"unknown architecture {arch!r}; choose from {ARCHS}")


def is_conv(model):
    return isinstance(model, _Masked)
