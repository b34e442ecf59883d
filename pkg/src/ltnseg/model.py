"""Small U-Net style encoder-decoder producing per-voxel class probabilities."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ltnseg import autodiff as ad
from ltnseg.autodiff import Tensor

CKPT_MAGIC = b"SLSGCKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


@dataclass
class SegModelConfig:
    in_channels: int = 1
    width: int = 8
    depth: int = 2
    classes: int = 3
    seed: int = 0

    def __post_init__(self):
        if min(self.in_channels, self.width, self.classes) < 1 or self.depth < 0:
            raise ValueError(f"invalid model config {self}")


def layer_shapes(cfg):
    """Ordered (name, kernel shape) pairs; kernels are (kh, kw, Cin, Cout)."""
    w, shapes = cfg.width, []
    shapes.append(("enc0", (3, 3, cfg.in_channels, w)))
    for level in range(1, cfg.depth + 1):
        cin, cout = w * 2 ** (level - 1), w * 2 ** level
        shapes.append((f"down{level}", (3, 3, cin, cout)))
    for level in range(cfg.depth, 0, -1):
        cin, cout = w * 2 ** level, w * 2 ** (level - 1)
        shapes.append((f"up{level}", (2, 2, cin, cout)))
        shapes.append((f"dec{level}", (3, 3, 2 * cout, cout)))
    shapes.append(("head", (1, 1, w, cfg.classes)))
    return shapes


def param_count(cfg):
    """Closed-form count: every layer contributes its kernel plus one bias per output."""
    w, c, ci, d = cfg.width, cfg.classes, cfg.in_channels, cfg.depth
    total = 9 * w * ci + w
    for level in range(1, d + 1):
        co = w * 2 ** level
        total += 9 * co * (co // 2) + co
        total += 4 * co * (co // 2) + co // 2
        total += 9 * (co // 2) * co + co // 2
    total += c * w + c
    return total


class SegModel:
    def __init__(self, config, params):
        self.config = config
        self.params = list(params)
        self._names = [name for name, _ in layer_shapes(config)]

    @classmethod
    def init(cls, config=None, seed=None):
        config = config or SegModelConfig()
        if seed is not None:
            config = SegModelConfig(**{**asdict(config), "seed": seed})
        rng = np.random.default_rng(config.seed)
        params = []
        for _, shape in layer_shapes(config):
            bound = np.sqrt(6.0 / (shape[0] * shape[1] * shape[2]))
            params.append(Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True))
            params.append(Tensor(np.zeros(shape[3]), requires_grad=True))
        return cls(config, params)

    def layer(self, name):
        i = self._names.index(name)
        return self.params[2 * i], self.params[2 * i + 1]

    def n_params(self):
        return sum(p.size for p in self.params)

    def check_input(self, images):
        x = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
        if x.ndim == 3:
            x = x[..., None]
        if x.ndim != 4 or x.shape[3] != self.config.in_channels:
            raise ad.ShapeError("forward", x.shape, ("N", "H", "W", self.config.in_channels))
        k = 2 ** self.config.depth
        if x.shape[1] % k or x.shape[2] % k:
            raise ad.ShapeError("forward", x.shape[1:3], f"multiples of {k}")
        return x

    def logits(self, images):
        x = Tensor(self.check_input(images))
        h = ad.relu(ad.conv2d(x, *self.layer("enc0"), stride=1, padding=1))
        skips = [h]
        for level in range(1, self.config.depth + 1):
            h = ad.relu(ad.conv2d(h, *self.layer(f"down{level}"), stride=2, padding=1))
            skips.append(h)
        for level in range(self.config.depth, 0, -1):
            h = ad.conv_transpose2d(h, *self.layer(f"up{level}"), stride=2)
            h = ad.concat([h, skips[level - 1]], axis=3)
            h = ad.relu(ad.conv2d(h, *self.layer(f"dec{level}"), stride=1, padding=1))
        return ad.conv2d(h, *self.layer("head"), stride=1, padding=0)

    def forward(self, images):
        """Class probabilities ``(N, C, H, W)`` via softmax over the class axis.

        ``images`` is ``(N, H, W)`` or channels-last ``(N, H, W, Cin)``.
        """
        return ad.softmax(ad.transpose(self.logits(images), (0, 3, 1, 2)), axis=1)

    __call__ = forward

    def state(self):
        return [p.data.copy() for p in self.params]

    def load_state(self, arrays):
        if len(arrays) != len(self.params):
            raise ValueError("parameter count mismatch")
        for p, a in zip(self.params, arrays):
            if p.shape != a.shape:
                raise ad.ShapeError("load_state", p.shape, a.shape)
            p.data = np.array(a, dtype=np.float64)


def init_params(config=None, seed=None):
    return SegModel.init(config, seed)


def predict_mask(probs):
    """Argmax over the class axis (axis 0 for one sample, 1 for a batch)."""
    data = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    axis = 1 if data.ndim == 4 else 0
    return np.argmax(data, axis=axis)


# -- checkpoints ----------------------------------------------------------

def save_checkpoint(model, path):
    cfg = model.config
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<I", CKPT_VERSION)
    buf += struct.pack("<IIIIq", cfg.in_channels, cfg.width, cfg.depth, cfg.classes, cfg.seed)
    buf += struct.pack("<I", len(model.params))
    for p in model.params:
        buf += struct.pack("<I", p.ndim)
        buf += struct.pack(f"<{p.ndim}I", *p.shape)
        buf += p.data.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(raw):
            raise CheckpointError(f"truncated {what}: expected {n} bytes, found {len(raw) - off}", off)
        chunk = raw[off:off + n]
        off += n
        return chunk

    if take(8, "magic") != CKPT_MAGIC:
        raise CheckpointError("bad magic", 0)
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported version {version}", 8)
    ci, w, d, c, seed = struct.unpack("<IIIIq", take(24, "config block"))
    cfg = SegModelConfig(ci, w, d, c, seed)
    (count,) = struct.unpack("<I", take(4, "parameter count"))
    arrays = []
    for _ in range(count):
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        n = int(np.prod(dims))
        arrays.append(np.frombuffer(take(8 * n, "parameter data"), dtype="<f8").astype(np.float64).reshape(dims))
    model = SegModel.init(cfg)
    model.load_state(arrays)
    return model
