"""Conv backbone, cosine classifier and the two self-supervision heads."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

CKPT_MAGIC = b"CFSL1\n"
DEFAULT_WIDTHS = (16, 32, 64, 64)
DEFAULT_TAU = 30.0


class CheckpointError(ValueError):
    pass


@dataclass
class FeatureOutput:
    spatial_map: Tensor  # (B, h_f, w_f, D), post-relu
    feature: Tensor  # (B, D) spatial mean
    feature_normalized: Tensor  # (B, D)


def _uniform_init(rng, shape, fan_in, fan_out, scheme="glorot"):
    if scheme == "glorot":
        s = np.sqrt(6.0 / (fan_in + fan_out))
    elif scheme == "he":
        s = np.sqrt(6.0 / fan_in)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return rng.uniform(-s, s, size=shape)


class ModelState:
    """All trainable parameters, keyed by checkpoint name.

    ``classifier.W_raw`` is stored raw; the classifier always uses its
    elementwise absolute value.
    """

    def __init__(self, params: dict[str, Tensor], tau: float = DEFAULT_TAU):
        self.params = params
        self.tau = float(tau)
        self.n_blocks = sum(1 for k in params if k.endswith(".weight"))

    @classmethod
    def init(cls, in_channels=1, n_classes=20, widths=DEFAULT_WIDTHS, n_splits=4,
             n_perms=24, kernel=3, tau=DEFAULT_TAU, seed=0, conv_init="glorot"):
        rng = np.random.default_rng(seed)
        params = {}
        cin = in_channels
        for i, cout in enumerate(widths):
            params[f"conv{i}.weight"] = T.tensor(
                _uniform_init(rng, (kernel, kernel, cin, cout), kernel * kernel * cin,
                              kernel * kernel * cout, conv_init), requires_grad=True)
            params[f"conv{i}.bias"] = T.tensor(np.zeros(cout), requires_grad=True)
            cin = cout
        d = widths[-1]
        params["classifier.W_raw"] = T.tensor(
            _uniform_init(rng, (d, n_classes), d, n_classes), requires_grad=True)
        params["perm_head"] = T.tensor(
            _uniform_init(rng, (n_splits * d, n_perms), n_splits * d, n_perms), requires_grad=True)
        params["rot_head"] = T.tensor(_uniform_init(rng, (d, 4), d, 4), requires_grad=True)
        return cls(params, tau)

    # -- shape info --
    @property
    def in_channels(self):
        return self.params["conv0.weight"].shape[2]

    @property
    def feature_dim(self):
        return self.params["classifier.W_raw"].shape[0]

    @property
    def n_classes(self):
        return self.params["classifier.W_raw"].shape[1]

    @property
    def n_perms(self):
        return self.params["perm_head"].shape[1]

    @property
    def n_splits(self):
        return self.params["perm_head"].shape[0] // self.feature_dim

    def trainable(self):
        return list(self.params.values())

    def effective_W(self) -> Tensor:
        return T.abs(self.params["classifier.W_raw"])

    def copy(self):
        return ModelState({k: T.tensor(v.data.copy(), requires_grad=True)
                           for k, v in self.params.items()}, self.tau)

    def digest(self) -> str:
        return hashlib.sha256(checkpoint_bytes(self)).hexdigest()


def _batched(x):
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 3 else x


def forward_features(model: ModelState, x) -> FeatureOutput:
    """Run the conv stack on images (B, H, W, ch) or a single (H, W, ch)."""
    x = x.data if isinstance(x, Tensor) else _batched(x)
    if x.ndim != 4:
        raise ValueError(f"expected images (B, H, W, ch), got shape {x.shape}")
    if x.shape[3] != model.in_channels:
        raise ValueError(f"expected {model.in_channels} input channels, got {x.shape[3]}")
    m = 2 ** model.n_blocks
    if x.shape[1] % m or x.shape[2] % m:
        raise ValueError(f"spatial size {x.shape[1:3]} not divisible by {m}")
    h = Tensor(x)
    for i in range(model.n_blocks):
        h = T.conv2d(h, model.params[f"conv{i}.weight"], model.params[f"conv{i}.bias"])
        h = T.avg_pool2(T.relu(h))
    f = T.global_avg_pool(h)
    return FeatureOutput(h, f, T.l2_normalize(f, axis=-1))


def classify_known(model: ModelState, feat) -> Tensor:
    """Cosine logits tau * <W^c_{:,i}, f^c> for every known class."""
    fc = feat.feature_normalized if isinstance(feat, FeatureOutput) else T.l2_normalize(feat)
    wc = T.l2_normalize(model.effective_W(), axis=0)
    if fc.ndim == 1:
        fc = T.reshape(fc, (1, -1))
    return T.scale(T.matmul(fc, wc), model.tau)


def predict_permutation(model: ModelState, split_features: Tensor, perms) -> Tensor:
    """Reorder the n split features of each sample, concatenate, apply the head.

    split_features: (B, n, D) or (n, D); perms: (B, n) or (n,) with
    permuted[i] = features[perm[i]].
    """
    if split_features.ndim == 2:
        split_features = T.reshape(split_features, (1,) + split_features.shape)
    b, n, d = split_features.shape
    perms = np.asarray(perms).reshape(b, -1)
    if n * d != model.params["perm_head"].shape[0]:
        raise ValueError(f"expected {model.n_splits} splits of dim {model.feature_dim}, got {(n, d)}")
    for p in perms:
        if p.shape != (n,) or sorted(p.tolist()) != list(range(n)):
            raise ValueError(f"not a permutation of 0..{n - 1}: {p.tolist()}")
    rows = (np.arange(b)[:, None] * n + perms).reshape(-1)
    permuted = T.take_rows(T.reshape(split_features, (b * n, d)), rows)
    fs = T.reshape(permuted, (b, n * d))
    return T.matmul(fs, model.params["perm_head"])


def predict_rotation(model: ModelState, f: Tensor) -> Tensor:
    if f.ndim == 1:
        f = T.reshape(f, (1, -1))
    return T.matmul(f, model.params["rot_head"])


def extract_features(model: ModelState, images, batch_size=128):
    """Pooled features (N, D) as a plain array, no graph kept."""
    images = np.asarray(images, dtype=np.float64)
    with T.no_grad():
        out = [forward_features(model, images[i:i + batch_size]).feature.data
               for i in range(0, len(images), batch_size)]
    if not out:
        return np.zeros((0, model.feature_dim))
    return np.concatenate(out, axis=0)


# -- checkpoint format ---------------------------------------------------------

def checkpoint_bytes(model: ModelState) -> bytes:
    chunks = [CKPT_MAGIC]
    items = list(model.params.items()) + [("tau", T.tensor(model.tau))]
    for name, t in items:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", t.data.ndim))
        chunks.append(struct.pack(f"<{t.data.ndim}Q", *t.data.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(chunks)


def save_checkpoint(model: ModelState, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def parse_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    if not buf.startswith(CKPT_MAGIC):
        raise CheckpointError("bad checkpoint magic (expected CFSL1)")
    pos = len(CKPT_MAGIC)
    out = {}
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            count = int(np.prod(shape)) if rank else 1
            if pos + 8 * count > len(buf):
                raise CheckpointError(f"truncated record {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    return out


def load_checkpoint(path) -> ModelState:
    with open(path, "rb") as fh:
        arrays = parse_checkpoint(fh.read())
    tau = float(arrays.pop("tau", DEFAULT_TAU))
    required = {"classifier.W_raw", "perm_head", "rot_head", "conv0.weight"}
    missing = required - set(arrays)
    if missing:
        raise CheckpointError(f"checkpoint missing tensors: {sorted(missing)}")
    return ModelState({k: T.tensor(v, requires_grad=True) for k, v in arrays.items()}, tau)
