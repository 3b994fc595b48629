"""The localization network: encoder -> coordinate head, decoder -> features.

Four encoder blocks (two 3x3x3 convolutions + stride-2 average pooling
each) feed a three-layer fully connected head that emits a 3-vector
latent coordinate per patch. Four decoder blocks (two convolutions +
nearest-neighbor 2x upsampling each) grow the bottleneck back out;
1x1x1 heads tap the trunk at full, half and quarter resolution and are
channel-normalized, so every voxel carries a unit-length descriptor.

Encoder block outputs are added back into the decoder trunk at the
matching resolutions (channel widths line up, so the skips are
parameter-free). Without them every descriptor would be a function of
the 1-voxel bottleneck code and position alone, and the similarity
objective cannot encode local appearance at all.

Input patches must have side lengths divisible by 16 (four exact
halvings).
"""

import numpy as np

from .. import errors
from . import tensor as T

ENC_CHANNELS = (8, 16, 32, 64)
DEC_CHANNELS = (32, 32, 16, 8)
FEATURE_CHANNELS = (8, 16, 32)  # full, half, quarter resolution heads
MLP_SIZES = (64, 32, 3)
KERNEL = 3
PAD = 1


def parameter_shapes():
    """Ordered name -> shape map for every trainable parameter."""
    shapes = {}
    cin = 1
    for i, cout in enumerate(ENC_CHANNELS, start=1):
        shapes[f"enc{i}.conv1.w"] = (cout, cin, KERNEL, KERNEL, KERNEL)
        shapes[f"enc{i}.conv1.b"] = (cout,)
        shapes[f"enc{i}.conv2.w"] = (cout, cout, KERNEL, KERNEL, KERNEL)
        shapes[f"enc{i}.conv2.b"] = (cout,)
        cin = cout
    fin = ENC_CHANNELS[-1]
    for i, fout in enumerate(MLP_SIZES, start=1):
        shapes[f"mlp.fc{i}.w"] = (fout, fin)
        shapes[f"mlp.fc{i}.b"] = (fout,)
        fin = fout
    cin = ENC_CHANNELS[-1]
    for i, cout in enumerate(DEC_CHANNELS, start=1):
        shapes[f"dec{i}.conv1.w"] = (cout, cin, KERNEL, KERNEL, KERNEL)
        shapes[f"dec{i}.conv1.b"] = (cout,)
        shapes[f"dec{i}.conv2.w"] = (cout, cout, KERNEL, KERNEL, KERNEL)
        shapes[f"dec{i}.conv2.b"] = (cout,)
        cin = cout
    # heads are indexed by scale: 0 = full resolution (after dec4),
    # 1 = half (after dec3), 2 = quarter (after dec2)
    for scale, cout in enumerate(FEATURE_CHANNELS):
        trunk = DEC_CHANNELS[3 - scale]
        shapes[f"head{scale}.w"] = (cout, trunk, 1, 1, 1)
        shapes[f"head{scale}.b"] = (cout,)
    return shapes


class NetworkWeights:
    """Ordered mapping of parameter names to gradient-carrying tensors."""

    def __init__(self, params):
        expected = parameter_shapes()
        if list(params.keys()) != list(expected.keys()):
            raise errors.ShapeMismatch("parameter set does not match architecture")
        for name, p in params.items():
            if tuple(p.data.shape) != expected[name]:
                raise errors.ShapeMismatch(
                    f"{name}: shape {p.data.shape}, expected {expected[name]}")
            if not np.isfinite(p.data).all():
                raise errors.ShapeMismatch(f"{name}: non-finite parameters")
        self.params = params

    @classmethod
    def initialize(cls, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in parameter_shapes().items():
            if name.startswith("head") and name.endswith(".b"):
                # keep descriptor vectors off the exact zero point, where
                # the normalization guard has enormous slope
                data = np.full(shape, 0.01, dtype=dtype)
            elif name.endswith(".b"):
                data = np.zeros(shape, dtype=dtype)
            else:
                fan_in = int(np.prod(shape[1:]))
                std = np.sqrt(2.0 / fan_in)
                data = (rng.standard_normal(shape) * std).astype(dtype)
            params[name] = T.Tensor(data, requires_grad=True)
        return cls(params)

    def __getitem__(self, name):
        return self.params[name]

    def items(self):
        return self.params.items()

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def astype(self, dtype):
        return NetworkWeights({
            n: T.Tensor(p.data.astype(dtype), requires_grad=True)
            for n, p in self.params.items()
        })


def _conv_block(x, weights, prefix):
    x = T.relu(T.conv3d(x, weights[f"{prefix}.conv1.w"], weights[f"{prefix}.conv1.b"], pad=PAD))
    x = T.relu(T.conv3d(x, weights[f"{prefix}.conv2.w"], weights[f"{prefix}.conv2.b"], pad=PAD))
    return x


def _check_input(x):
    if x.data.ndim != 5 or x.data.shape[1] != 1:
        raise errors.ShapeMismatch(f"expected (B,1,D,H,W) input, got {x.data.shape}")
    for s in x.data.shape[2:]:
        if s % 16 != 0:
            raise errors.ShapeMismatch(f"patch sides must be divisible by 16, got {x.data.shape[2:]}")


def encode(x, weights, keep_stages=False):
    """Encoder trunk: (B,1,D,H,W) -> bottleneck (B,64,D/16,...).

    With ``keep_stages`` the pre-pooling block outputs are returned
    too (skip sources for the decoder).
    """
    _check_input(x)
    stages = []
    for i in range(1, 5):
        x = _conv_block(x, weights, f"enc{i}")
        stages.append(x)
        x = T.avg_pool2(x)
    return (x, stages) if keep_stages else x


def latent_from_bottleneck(z, weights):
    h = T.global_mean_spatial(z)
    h = T.relu(T.linear(h, weights["mlp.fc1.w"], weights["mlp.fc1.b"]))
    h = T.relu(T.linear(h, weights["mlp.fc2.w"], weights["mlp.fc2.b"]))
    return T.linear(h, weights["mlp.fc3.w"], weights["mlp.fc3.b"])


def features_from_bottleneck(z, stages, weights):
    x = _conv_block(z, weights, "dec1")
    x = T.upsample_nearest2(x)
    x = _conv_block(x, weights, "dec2")
    x = T.add(T.upsample_nearest2(x), stages[2])  # quarter resolution
    f2 = T.l2_normalize_channels(T.conv3d(x, weights["head2.w"], weights["head2.b"]))
    x = _conv_block(x, weights, "dec3")
    x = T.add(T.upsample_nearest2(x), stages[1])  # half resolution
    f1 = T.l2_normalize_channels(T.conv3d(x, weights["head1.w"], weights["head1.b"]))
    x = _conv_block(x, weights, "dec4")
    x = T.add(T.upsample_nearest2(x), stages[0])  # full resolution
    f0 = T.l2_normalize_channels(T.conv3d(x, weights["head0.w"], weights["head0.b"]))
    return [f0, f1, f2]


def forward(x, weights, want_latent=True, want_features=True):
    """Run the network on a batch of patches.

    Returns ``(latent, features)`` where ``latent`` is a (B,3) tensor
    and ``features`` a list of three channel-normalized maps at full,
    half and quarter resolution. Either output can be skipped.
    """
    z, stages = encode(x, weights, keep_stages=True)
    latent = latent_from_bottleneck(z, weights) if want_latent else None
    feats = features_from_bottleneck(z, stages, weights) if want_features else None
    return latent, feats


def patch_batch(patches, dtype=np.float32):
    """Stack patch data arrays into a (B,1,D,H,W) input tensor."""
    arr = np.stack([np.asarray(p, dtype=dtype) for p in patches])[:, None]
    return T.Tensor(np.ascontiguousarray(arr))
