"""Sensor towers, projection heads, probes/heads and the contrastive loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .sensorsim import CHANNELS

BACKBONE_DIM = 128
PROJ_HIDDEN = 128
LATENT_DIM = 64
POSE_HIDDEN = 256
THETA_SCALE = 3.75  # degrees -> units comparable with mm (+-30 deg -> +-8)
CONV_CHANNELS = (16, 32, 64)
# (offset, scale) bringing each sensor's pixels to roughly unit spread
INPUT_NORM = {"gel": (0.35, 5.0), "membrane": (0.0, 2.0)}


def prepare_frames(frames, sensor: str, in_ch: int | None = None) -> np.ndarray:
    """Normalize raw frames of one sensor and match the encoder's input channels.

    A single-channel membrane map fed to a 3-channel (shared) encoder is
    replicated across channels.
    """
    x = np.asarray(frames, dtype=np.float32)
    if x.ndim != 4 or x.shape[1] != CHANNELS[sensor]:
        raise ValueError(f"{sensor} frames must be (N, {CHANNELS[sensor]}, H, W), got {x.shape}")
    off, scale = INPUT_NORM[sensor]
    x = (x - np.float32(off)) * np.float32(scale)
    in_ch = in_ch or x.shape[1]
    if x.shape[1] != in_ch:
        if x.shape[1] != 1:
            raise ValueError(f"cannot feed {x.shape[1]}-channel {sensor} frames to a {in_ch}-channel encoder")
        x = np.repeat(x, in_ch, axis=1)
    return x


class Module:
    """Named parameter container."""

    def __init__(self, prefix: str):
        self.prefix = prefix
        self.params: dict[str, Tensor] = {}

    def _add(self, key, shape, rng, fan_in=None, scheme="uniform-fan-in"):
        name = f"{self.prefix}.{key}"
        t = ad.seeded_init(shape, scheme, rng, fan_in=fan_in, name=name)
        self.params[name] = t
        return t

    def _linear(self, key, n_in, n_out, rng):
        self._add(f"{key}.w", (n_out, n_in), rng)
        self._add(f"{key}.b", (n_out,), rng, scheme="zeros")

    def p(self, key) -> Tensor:
        return self.params[f"{self.prefix}.{key}"]

    def lin(self, key, x):
        return ad.linear(x, self.p(f"{key}.w"), self.p(f"{key}.b"))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def alias(self, prefix: str) -> "Module":
        """Same tensors under another name prefix (weight tying)."""
        twin = object.__new__(type(self))
        twin.__dict__.update(self.__dict__)
        twin.prefix = prefix
        twin.params = {prefix + k[len(self.prefix):]: t for k, t in self.params.items()}
        return twin

    def load(self, tensors: dict):
        for k, t in self.params.items():
            if k not in tensors:
                raise KeyError(f"checkpoint lacks tensor {k!r}")
            arr = np.asarray(tensors[k], dtype=np.float32)
            if arr.shape != t.shape:
                raise ValueError(f"{k}: checkpoint shape {arr.shape} != model shape {t.shape}")
            t.data = arr.copy()


class Encoder(Module):
    """Three stride-2 convs, global average pool, linear to the backbone feature."""

    def __init__(self, sensor: str, rng, backbone_dim: int = BACKBONE_DIM, prefix=None, in_ch=None):
        super().__init__(prefix or f"{sensor}.enc")
        self.sensor = sensor
        self.in_ch = in_ch or CHANNELS[sensor]
        c_in = self.in_ch
        for i, c_out in enumerate(CONV_CHANNELS, 1):
            self._add(f"conv{i}.w", (c_out, c_in, 3, 3), rng)
            self._add(f"conv{i}.b", (c_out,), rng, scheme="zeros")
            c_in = c_out
        self._linear("fc", c_in, backbone_dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ValueError(f"encoder expects (N, {self.in_ch}, H, W) inputs, got {x.shape}")
        for i in range(1, len(CONV_CHANNELS) + 1):
            x = ad.relu(ad.conv2d(x, self.p(f"conv{i}.w"), self.p(f"conv{i}.b"), stride=2, padding=1))
        return self.lin("fc", ad.global_avg_pool(x))


class Projection(Module):
    def __init__(self, sensor: str, rng, backbone_dim: int = BACKBONE_DIM,
                 hidden: int = PROJ_HIDDEN, out_dim: int = LATENT_DIM):
        super().__init__(f"{sensor}.proj")
        self._linear("l1", backbone_dim, hidden, rng)
        self._linear("l2", hidden, out_dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin("l2", ad.relu(self.lin("l1", x)))


@dataclass
class Embedding:
    backbone: np.ndarray
    projected: np.ndarray


class Tower:
    """Encoder plus projection head for one sensor.

    With ``tie_to`` the tower reuses another tower's tensors under its own
    names, so both sensors are embedded by one network.
    """

    def __init__(self, sensor: str, rng=None, backbone_dim: int = BACKBONE_DIM,
                 tie_to: "Tower | None" = None, in_ch: int | None = None):
        self.sensor = sensor
        if tie_to is not None:
            self.encoder = tie_to.encoder.alias(f"{sensor}.enc")
            self.encoder.sensor = sensor
            self.projection = tie_to.projection.alias(f"{sensor}.proj")
        else:
            self.encoder = Encoder(sensor, rng, backbone_dim, in_ch=in_ch)
            self.projection = Projection(sensor, rng, backbone_dim)

    def parameters(self):
        return self.encoder.parameters() + self.projection.parameters()

    def state(self):
        return {**self.encoder.state(), **self.projection.state()}

    def load(self, tensors):
        self.encoder.load(tensors)
        self.projection.load(tensors)

    def features(self, frames) -> Tensor:
        """Backbone features of raw frames of this tower's sensor."""
        return self.encoder(Tensor(prepare_frames(frames, self.sensor, self.encoder.in_ch)))

    def forward(self, frames) -> tuple[Tensor, Tensor]:
        b = self.features(frames)
        return b, self.projection(b)


def build_towers(seed: int, backbone_dim: int = BACKBONE_DIM, tied: bool = False) -> dict:
    """Gel and membrane towers, each from its own init stream, or one shared network."""
    gel = Tower("gel", ad.rng_stream(seed, "init/gel"), backbone_dim)
    if tied:
        return {"gel": gel, "membrane": Tower("membrane", tie_to=gel)}
    return {"gel": gel, "membrane": Tower("membrane", ad.rng_stream(seed, "init/membrane"), backbone_dim)}


def unique_parameters(towers: dict) -> list[Tensor]:
    seen, out = set(), []
    for t in towers.values():
        for p in t.parameters():
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
    return out


def towers_state(towers: dict) -> dict:
    out = {}
    for s in ("gel", "membrane"):
        out.update(towers[s].state())
    return out


def load_towers(tensors: dict, backbone_dim: int | None = None) -> dict:
    """Rebuild towers from checkpoint tensors (the backbone size is read from the file)."""
    missing = [s for s in ("gel", "membrane") if f"{s}.enc.fc.w" not in tensors]
    if missing:
        raise KeyError(f"checkpoint is missing the tower(s): {', '.join(missing)}")
    dim = backbone_dim or int(np.asarray(tensors["gel.enc.fc.w"]).shape[0])
    towers = {}
    for s in ("gel", "membrane"):
        conv1 = tensors.get(f"{s}.enc.conv1.w")
        in_ch = int(np.asarray(conv1).shape[1]) if conv1 is not None else None
        towers[s] = Tower(s, ad.rng_stream(0, f"init/{s}"), dim, in_ch=in_ch)
        towers[s].load(tensors)
    return towers


def encode(frames: np.ndarray, sensor: str, tower: Tower, batch: int = 256) -> Embedding:
    """Backbone and projected features for a stack of frames of one sensor."""
    if sensor != tower.sensor:
        raise ValueError(f"{sensor} frames fed to the {tower.sensor} tower")
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim == 3:
        frames = frames[None]
    bs, zs = [], []
    with ad.no_grad():
        for i in range(0, len(frames), batch):
            b, z = tower.forward(frames[i:i + batch])
            bs.append(b.data)
            zs.append(z.data)
    return Embedding(np.concatenate(bs), np.concatenate(zs))


# ----------------------------------------------------------------- similarity / InfoNCE

def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass
class ContrastiveConfig:
    tau: float = 0.07
    symmetric: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")


def infonce_loss(z1: Tensor, z2: Tensor, cfg: ContrastiveConfig = ContrastiveConfig()) -> Tensor:
    """Cross-sensor InfoNCE over in-batch negatives.

    Row i of ``z1`` and ``z2`` is a positive pair; every other row of the other
    sensor is a negative.  With ``cfg.symmetric`` the 1->2 and 2->1 losses are
    averaged.
    """
    if z1.shape != z2.shape or z1.ndim != 2:
        raise ad.ShapeError(f"infonce_loss: embeddings {z1.shape} and {z2.shape} must match")
    n = z1.shape[0]
    if n < 2:
        raise ValueError("infonce_loss needs at least 2 pairs (no negatives otherwise)")
    logits = ad.matmul(ad.l2_normalize(z1), ad.transpose(ad.l2_normalize(z2))) * (1.0 / cfg.tau)
    labels = np.arange(n)
    loss = ad.softmax_cross_entropy(logits, labels)
    if cfg.symmetric:
        loss = (loss + ad.softmax_cross_entropy(ad.transpose(logits), labels)) * 0.5
    return loss


# ----------------------------------------------------------------- heads

class ClassifierHead(Module):
    def __init__(self, n_in: int, n_classes: int, rng, prefix="head.class"):
        super().__init__(prefix)
        self.n_classes = n_classes
        self._linear("fc", n_in, n_classes, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin("fc", x)


def ce_loss(logits: Tensor, labels) -> Tensor:
    return ad.softmax_cross_entropy(logits, labels)


def scale_pose(pose) -> np.ndarray:
    """(y mm, z mm, theta deg) -> regression targets with theta/3.75."""
    p = np.asarray(pose, dtype=np.float64)[..., :3].copy()
    p[..., 2] /= THETA_SCALE
    return p


def unscale_pose(pred) -> np.ndarray:
    p = np.asarray(pred, dtype=np.float64).copy()
    p[..., 2] *= THETA_SCALE
    return p


class PoseHead(Module):
    def __init__(self, n_in: int, rng, hidden: int = POSE_HIDDEN, prefix="head.pose"):
        super().__init__(prefix)
        self._linear("l1", n_in, hidden, rng)
        self._linear("l2", hidden, hidden, rng)
        self._linear("l3", hidden, 3, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.relu(self.lin("l1", x))
        h = ad.relu(self.lin("l2", h))
        return self.lin("l3", h)


def pose_mse(pred: Tensor, pose) -> Tensor:
    return ad.mse(pred, scale_pose(pose).astype(pred.data.dtype))


class ReconHead(Module):
    def __init__(self, n_in: int, channels: int, rng, size: int = 32, prefix="head.recon"):
        super().__init__(prefix)
        self.out_shape = (channels, size, size)
        self._linear("fc", n_in, channels * size * size, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.reshape(self.lin("fc", x), (x.shape[0],) + self.out_shape)


def recon_mse(pred: Tensor, frames) -> Tensor:
    return ad.mse(pred, np.asarray(frames, dtype=pred.data.dtype))
