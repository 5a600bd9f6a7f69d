"""Two-tower model: attention-augmented residual CNN and radiomics MLP.

The image tower maps a grayscale input to a 128-dim embedding u through a
stem, two residual/attention stages, global average pooling, and an MLP
head.  The radiomics tower maps the standardized 102-feature vector to a
128-dim embedding v through an MLP of the same hidden width.  A binary
classifier head (attached for fine-tuning) scores u alone.

The stem downsamples 4x (stride-2 conv, ReLU, 2x2 max-pool) before stage 1
and a 2x max-pool sits between stages, so a 64x64 input runs its stages at
16x16 and 8x8.  Without the stem reduction the end-to-end budget on CPU is
blown by an order of magnitude.

Feature maps are channels-last throughout; see :mod:`radiocon.autodiff`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import GrayImage, resize_bilinear
from .errors import ParameterError, ShapeMismatchError
from .rng import substream

EMBEDDING_DIM = 128
MLP_HIDDEN = 256
RADIOMICS_DIM = 102
STEM_STRIDE = 2
STEM_POOL = 2

#: Projection output layers start small so initial embeddings nearly
#: coincide, every pair score is nearly equal, and the first contrastive
#: epoch sits at the uniform-softmax value log(N).  Exact zeros would pin
#: the distance subgradient at zero; too small a scale leaves gradients
#: without enough signal to escape the degenerate region.
PROJECTION_INIT_SCALE = 0.08

#: Fixed length of the normalized MLP hidden vectors.  Stability of plain
#: SGD requires lr * gain^2 / tau = O(1); gradient flow into the conv
#: tower improves with larger gain.  4.0 balances the two at the default
#: lr = 0.1, tau = 0.1.
HIDDEN_NORM_GAIN = 4.0


@dataclass(frozen=True)
class BackboneConfig:
    """Shape of the image tower; embedding width is fixed at 128."""

    input_resolution: int = 64
    stem_channels: int = 16
    stage_channels: tuple = (16, 32)
    attention_modules: int = 1
    embedding_dim: int = EMBEDDING_DIM

    def __post_init__(self):
        r = self.input_resolution
        if r < 32 or (r & (r - 1)) != 0:
            raise ParameterError(
                f"input resolution must be a power of two >= 32, got {r}")
        if self.embedding_dim != EMBEDDING_DIM:
            raise ParameterError(
                f"embedding dim is fixed at {EMBEDDING_DIM}, got {self.embedding_dim}")
        if self.attention_modules < 1 or not self.stage_channels:
            raise ParameterError("need at least one stage and attention module")
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))


def _conv_shapes(cfg: BackboneConfig):
    """(name, kernel shape) for every convolution, in forward order."""
    shapes = []
    shapes.append(("stem.conv", (3, 3, 1, cfg.stem_channels)))
    c_in = cfg.stem_channels
    for si, c_out in enumerate(cfg.stage_channels, start=1):
        shapes.append((f"stage{si}.res.conv1", (3, 3, c_in, c_out)))
        shapes.append((f"stage{si}.res.conv2", (3, 3, c_out, c_out)))
        if c_in != c_out:
            shapes.append((f"stage{si}.res.skip", (1, 1, c_in, c_out)))
        for ai in range(1, cfg.attention_modules + 1):
            base = f"stage{si}.attn{ai}"
            for block in ("trunk1", "trunk2"):
                shapes.append((f"{base}.{block}.conv1", (3, 3, c_out, c_out)))
                shapes.append((f"{base}.{block}.conv2", (3, 3, c_out, c_out)))
            shapes.append((f"{base}.mask.conv", (3, 3, c_out, c_out)))
        c_in = c_out
    return shapes


def _linear_shapes(cfg: BackboneConfig):
    c_last = cfg.stage_channels[-1]
    return [
        ("img_mlp.fc1", (c_last, MLP_HIDDEN)),
        ("img_mlp.fc2", (MLP_HIDDEN, cfg.embedding_dim)),
        ("radi_mlp.fc1", (RADIOMICS_DIM, MLP_HIDDEN)),
        ("radi_mlp.fc2", (MLP_HIDDEN, cfg.embedding_dim)),
    ]


def init_params(cfg: BackboneConfig, seed: int) -> dict[str, Tensor]:
    """He-initialised weights and zero biases for both towers.

    Each parameter draws from its own named substream, so values do not
    depend on construction order.
    """
    params: dict[str, Tensor] = {}

    def he(name, shape, fan_in, scale=1.0):
        rng = substream(seed, "init", name)
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape) * scale
        params[f"{name}.weight"] = Tensor(w.astype(np.float32))

    for name, shape in _conv_shapes(cfg):
        he(name, shape, fan_in=shape[0] * shape[1] * shape[2])
        params[f"{name}.bias"] = Tensor(np.zeros(shape[3], np.float32))
    for name, shape in _linear_shapes(cfg):
        scale = PROJECTION_INIT_SCALE if name.endswith("fc2") else 1.0
        he(name, shape, fan_in=shape[0], scale=scale)
        params[f"{name}.bias"] = Tensor(np.zeros(shape[1], np.float32))
    return params


def attach_head(params: dict[str, Tensor], cfg: BackboneConfig) -> None:
    """Add the zero-initialised classifier head (fine-tuning onward)."""
    params["head.weight"] = Tensor(np.zeros((cfg.embedding_dim, 1), np.float32))
    params["head.bias"] = Tensor(np.zeros(1, np.float32))


def param_count(cfg: BackboneConfig, with_head: bool = False) -> int:
    total = 0
    for _, shape in _conv_shapes(cfg):
        total += int(np.prod(shape)) + shape[3]
    for _, shape in _linear_shapes(cfg):
        total += shape[0] * shape[1] + shape[1]
    if with_head:
        total += cfg.embedding_dim + 1
    return total


def image_tower_param_names(params) -> list[str]:
    """Every parameter the fine-tuning objective reaches (u path + head)."""
    return [n for n in params if not n.startswith("radi_mlp.")]


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def _conv(x, params, name, padding=1):
    return ad.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"],
                     stride=1, padding=padding, cache_key=name)


def _residual_block(x: Tensor, params, prefix: str) -> Tensor:
    out = ad.relu(_conv(x, params, f"{prefix}.conv1"))
    out = _conv(out, params, f"{prefix}.conv2")
    if f"{prefix}.skip.weight" in params:
        skip = _conv(x, params, f"{prefix}.skip", padding=0)
    else:
        skip = x
    return ad.relu(ad.add(out, skip))


def attention_module_forward(x: Tensor, params, prefix: str):
    """Trunk-and-mask attention: output = (1 + M(x)) * T(x).

    T is two residual blocks; M downsamples 2x, convolves, upsamples
    (nearest-neighbour), and gates through a sigmoid, so M in (0, 1).
    Returns (output, mask).
    """
    spatial = x.shape[-3:-1]
    if min(spatial) < 4:
        raise ShapeMismatchError(
            f"attention module needs spatial extent >= 4, got {spatial}")
    trunk = _residual_block(x, params, f"{prefix}.trunk1")
    trunk = _residual_block(trunk, params, f"{prefix}.trunk2")
    down = ad.max_pool2d(x, 2)
    mask = ad.sigmoid(ad.upsample_nearest(_conv(down, params, f"{prefix}.mask.conv"), 2))
    return ad.mul(ad.add(mask, 1.0), trunk), mask


def forward_image(x: Tensor, params, cfg: BackboneConfig):
    """Image tower on a batch (N, R, R, 1) -> embeddings (N, 128).

    Returns (embeddings, masks) with one attention mask per module.
    """
    r = cfg.input_resolution
    if x.shape[-3:] != (r, r, 1):
        raise ShapeMismatchError(
            f"expected input resized to ({r}, {r}, 1), got {x.shape}")
    out = ad.relu(ad.conv2d(x, params["stem.conv.weight"], params["stem.conv.bias"],
                            stride=STEM_STRIDE, padding=1, cache_key="stem.conv"))
    out = ad.max_pool2d(out, STEM_POOL)
    masks = []
    for si in range(1, len(cfg.stage_channels) + 1):
        if si > 1:
            out = ad.max_pool2d(out, 2)
        out = _residual_block(out, params, f"stage{si}.res")
        for ai in range(1, cfg.attention_modules + 1):
            out, mask = attention_module_forward(out, params, f"stage{si}.attn{ai}")
            masks.append(mask)
    # fixed per-sample feature scaling: keeps the towers scale-invariant so
    # plain SGD at lr 0.1 with tau 0.1 cannot run away (batch norm is out
    # for determinism; the distance objective otherwise pumps magnitudes)
    c_last = cfg.stage_channels[-1]
    pooled = ad.l2_normalize(ad.global_avg_pool(out), gain=float(np.sqrt(c_last)))
    hidden = ad.l2_normalize(ad.relu(ad.bias_add(
        ad.matmul(pooled, params["img_mlp.fc1.weight"]),
        params["img_mlp.fc1.bias"])), gain=HIDDEN_NORM_GAIN)
    u = ad.bias_add(ad.matmul(hidden, params["img_mlp.fc2.weight"]),
                    params["img_mlp.fc2.bias"])
    return u, masks


def forward_radiomics(r: Tensor, params) -> Tensor:
    """Radiomics tower on a batch (N, 102) -> embeddings (N, 128)."""
    if r.values.ndim != 2 or r.shape[1] != RADIOMICS_DIM:
        raise ShapeMismatchError(
            f"expected radiomics batch (N, {RADIOMICS_DIM}), got {r.shape}")
    hidden = ad.l2_normalize(ad.relu(ad.bias_add(
        ad.matmul(r, params["radi_mlp.fc1.weight"]),
        params["radi_mlp.fc1.bias"])), gain=HIDDEN_NORM_GAIN)
    return ad.bias_add(ad.matmul(hidden, params["radi_mlp.fc2.weight"]),
                       params["radi_mlp.fc2.bias"])


def classify(u: Tensor, params) -> Tensor:
    """Probability of the positive class from image embeddings (N, 128) -> (N,)."""
    z = ad.bias_add(ad.matmul(u, params["head.weight"]), params["head.bias"])
    return ad.reshape(ad.sigmoid(z), (u.shape[0],))


# ---------------------------------------------------------------------------
# inference conveniences
# ---------------------------------------------------------------------------


def image_batch_to_tensor(pixel_batch: np.ndarray) -> Tensor:
    """(N, R, R) pixels in [0, 255] -> (N, R, R, 1) float32 in [0, 1].

    Intensities are kept unstandardized on purpose: global exposure is a
    legitimate instance cue that the radiomics tower sees through its
    first-order features, so the image tower must be able to see it too.
    """
    arr = np.asarray(pixel_batch, dtype=np.float32) / 255.0
    return Tensor(arr[..., None], requires_grad=False)


def encode_image(image, params, cfg: BackboneConfig) -> np.ndarray:
    """Embed one image already at the configured resolution."""
    pixels = np.asarray(image.pixels if isinstance(image, GrayImage) else image)
    r = cfg.input_resolution
    if pixels.shape != (r, r):
        raise ShapeMismatchError(
            f"expected a ({r}, {r}) image, got {pixels.shape}")
    u, _ = forward_image(image_batch_to_tensor(pixels[None]), params, cfg)
    return u.values[0].copy()


def encode_radiomics(vector, params) -> np.ndarray:
    """Embed one standardized 102-feature vector."""
    arr = np.asarray(getattr(vector, "values", vector), dtype=np.float32)
    if arr.shape != (RADIOMICS_DIM,):
        raise ShapeMismatchError(
            f"expected a {RADIOMICS_DIM}-vector, got shape {arr.shape}")
    return forward_radiomics(Tensor(arr[None]), params).values[0].copy()


def extract_attention_map(image, params, cfg: BackboneConfig) -> np.ndarray:
    """Channel-averaged mask of the last attention module as a [0, 1] map.

    The map is bilinearly upsampled to the input resolution and min-max
    normalised; a constant mask yields all zeros.
    """
    pixels = np.asarray(image.pixels if isinstance(image, GrayImage) else image)
    r = cfg.input_resolution
    if pixels.shape != (r, r):
        raise ShapeMismatchError(f"expected a ({r}, {r}) image, got {pixels.shape}")
    _, masks = forward_image(image_batch_to_tensor(pixels[None]), params, cfg)
    mask = masks[-1].values[0].mean(axis=-1)
    up = resize_bilinear(mask, r, r).astype(np.float64)
    lo, hi = up.min(), up.max()
    if hi - lo <= 0:
        return np.zeros_like(up)
    return (up - lo) / (hi - lo)
