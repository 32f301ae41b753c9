"""Named desk-scale backbones.

``dave2-small`` is a four-convolution steering network for 1x64x64 track
images; ``resnet-small`` is a two-block residual network for 3x32x32 sign
images. Both end in flatten + tanh so they can feed an RBF head directly.
``vae-monitor`` is a separate encoder/decoder-shaped network used only as a
stand-in second model in latency comparisons.
"""

from __future__ import annotations

from .errors import ConfigError
from .numeric import Conv2D, Dense, Flatten, Network, ReLU, ResidualBlock, Tanh, layer_from_dict


def dave2_small():
    return Network(
        [
            Conv2D(8, 5, 2), ReLU(),
            Conv2D(16, 5, 2), ReLU(),
            Conv2D(16, 3, 2), ReLU(),
            Conv2D(8, 3, 1),
            Flatten(), Tanh(),
        ],
        (1, 64, 64),
    )


def resnet_small():
    return Network(
        [
            Conv2D(8, 3, 2, 1), ReLU(),
            ResidualBlock(8),
            ResidualBlock(16, 2),
            Conv2D(8, 3, 2, 1),
            Flatten(), Tanh(),
        ],
        (3, 32, 32),
    )


def mlp_tiny(input_dim: int = 2):
    return Network([Dense(8), Tanh(), Dense(4), Tanh()], (input_dim,))


def vae_monitor(input_shape=(1, 64, 64)):
    """Encoder (5 convs 24/36/48/48/64, dense 1164) plus a mirrored decoder."""
    c = input_shape[0]
    return Network(
        [
            Conv2D(24, 5, 2, 2), ReLU(),
            Conv2D(36, 5, 2, 2), ReLU(),
            Conv2D(48, 5, 2, 2), ReLU(),
            Conv2D(48, 3, 1, 1), ReLU(),
            Conv2D(64, 3, 1, 1), ReLU(),
            Flatten(), Dense(1164), ReLU(),
            Dense(64 * 8 * 8), ReLU(),
            # decoder convolutions run at the bottleneck resolution; there is
            # no transposed-convolution layer in this library
            _Unflatten(64, 8, 8),
            Conv2D(64, 3, 1, 1), ReLU(),
            Conv2D(48, 3, 1, 1), ReLU(),
            Conv2D(48, 5, 1, 2), ReLU(),
            Conv2D(36, 5, 1, 2), ReLU(),
            Conv2D(c * 64, 5, 1, 2),
        ],
        input_shape,
    )


class _Unflatten:
    kind = "unflatten"

    def __init__(self, *shape):
        self.shape = tuple(shape)

    def output_shape(self, in_shape):
        return self.shape

    def init(self, in_shape, rng):
        return {}

    def forward(self, params, x):
        return x.reshape((x.shape[0],) + self.shape), x.shape

    def backward(self, params, cache, dy):
        return {}, dy.reshape(cache)


BACKBONES = {"dave2-small": dave2_small, "resnet-small": resnet_small, "mlp-tiny": mlp_tiny}


def build_backbone(spec) -> Network:
    """A backbone from a preset name or ``{"input_shape": [...], "layers": [...]}``."""
    if isinstance(spec, str):
        if spec not in BACKBONES:
            raise ConfigError("backbone", f"unknown preset {spec!r}; choose from {sorted(BACKBONES)}")
        return BACKBONES[spec]()
    try:
        return Network([layer_from_dict(d) for d in spec["layers"]], spec["input_shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError("backbone", str(exc)) from None
