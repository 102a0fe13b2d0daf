"""A small pre-norm transformer encoder with hand-written backpropagation.

The encoder tokenises each input row into patches, prepends a class token,
adds positional embeddings and runs ``depth`` blocks of

    x = x + Attention(LayerNorm(x))
    x = x + MLP(LayerNorm(x))

The pooled feature is the final-LayerNorm class-token state.  Interventions
(see :mod:`core_reft.reft`) edit the output of selected blocks.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import (
    CheckpointTruncatedError,
    CheckpointVersionError,
    DivergenceError,
    EmptyInputError,
    FrozenParameterError,
    ShapeError,
    StaleTapeError,
)
from .linalg import SeededRng
from .reft import InterventionParams
from .train import SGD, LinearHead, TrainHyper, clip_grads, cross_entropy, lr_at, minibatches

ENCODER_MAGIC = b"COREENC1"
LN_EPS = 1e-6


@dataclass
class EncoderConfig:
    depth: int = 4
    dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    # "image": rows are C*H*W pixels (channel-major) cut into square patches;
    # "tokens": rows are num_patches consecutive chunks of token_dim features
    input_mode: str = "image"
    image_size: int = 32
    channels: int = 3
    patch_size: int = 8
    num_patches: int = 16
    token_dim: int = 8
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.depth < 0:
            raise ValueError(f"depth must be >= 0, got {self.depth}")
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads:
            raise ValueError(f"dim {self.dim} must be a positive multiple of heads {self.heads}")
        if self.mlp_ratio <= 0:
            raise ValueError("mlp_ratio must be > 0")
        if self.input_mode == "image":
            if self.image_size % self.patch_size:
                raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        elif self.input_mode == "tokens":
            if self.num_patches < 1 or self.token_dim < 1:
                raise ValueError("num_patches and token_dim must be >= 1")
        else:
            raise ValueError(f"unknown input_mode {self.input_mode!r}")

    @property
    def n_patches(self) -> int:
        if self.input_mode == "image":
            return (self.image_size // self.patch_size) ** 2
        return self.num_patches

    @property
    def patch_dim(self) -> int:
        if self.input_mode == "image":
            return self.channels * self.patch_size**2
        return self.token_dim

    @property
    def tokens(self) -> int:
        return self.n_patches + 1

    @property
    def input_dim(self) -> int:
        return self.n_patches * self.patch_dim

    @property
    def hidden(self) -> int:
        return int(round(self.dim * self.mlp_ratio))

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: EncoderConfig) -> list[tuple[str, tuple]]:
    """Parameter names and shapes in checkpoint order."""
    d, m = cfg.dim, cfg.hidden
    shapes = [
        ("embed.w", (cfg.patch_dim, d)),
        ("embed.b", (d,)),
        ("cls", (d,)),
        ("pos", (cfg.tokens, d)),
    ]
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        shapes += [
            (p + "ln1.g", (d,)), (p + "ln1.b", (d,)),
            (p + "wq", (d, d)), (p + "bq", (d,)),
            (p + "wk", (d, d)), (p + "bk", (d,)),
            (p + "wv", (d, d)), (p + "bv", (d,)),
            (p + "wo", (d, d)), (p + "bo", (d,)),
            (p + "ln2.g", (d,)), (p + "ln2.b", (d,)),
            (p + "w1", (d, m)), (p + "b1", (m,)),
            (p + "w2", (m, d)), (p + "b2", (d,)),
        ]
    shapes += [("norm.g", (d,)), ("norm.b", (d,))]
    return shapes


def init_params(cfg: EncoderConfig) -> dict:
    rng = SeededRng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            params[name] = np.ones(shape)
        elif len(shape) == 2 and name != "pos":
            params[name] = rng.normal(size=shape, scale=1.0 / math.sqrt(shape[0]))
        elif name in ("cls", "pos"):
            params[name] = rng.normal(size=shape, scale=0.02)
        else:
            params[name] = np.zeros(shape)
    return params


class FrozenEncoder:
    """Encoder weights plus config.  ``freeze()`` makes every array read-only."""

    def __init__(self, config: EncoderConfig, params: dict | None = None, frozen: bool = False):
        self.config = config
        self.params = init_params(config) if params is None else params
        for name, shape in param_shapes(config):
            if self.params[name].shape != shape:
                raise ShapeError(f"parameter {name} has shape {self.params[name].shape}, expected {shape}")
        self.frozen = False
        self.version = 0
        if frozen:
            self.freeze()

    def freeze(self) -> "FrozenEncoder":
        for arr in self.params.values():
            arr.flags.writeable = False
        self.frozen = True
        return self

    def thawed_copy(self) -> "FrozenEncoder":
        return FrozenEncoder(self.config, {k: v.copy() for k, v in self.params.items()})

    def mark_updated(self):
        if self.frozen:
            raise FrozenParameterError("frozen encoder parameters cannot be updated")
        self.version += 1

    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, _ in param_shapes(self.config):
            h.update(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return h.hexdigest()

    def __eq__(self, other):
        if not isinstance(other, FrozenEncoder):
            return NotImplemented
        return (
            self.config == other.config
            and self.frozen == other.frozen
            and all(np.array_equal(self.params[k], other.params[k]) for k, _ in param_shapes(self.config))
        )


# ---------------------------------------------------------------- layers


def _ln_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def _ln_bwd(dy, cache, want_params):
    xhat, inv, g = cache
    dxhat = dy * g
    n = xhat.shape[-1]
    dx = inv / n * (n * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
    if not want_params:
        return dx, None, None
    axes = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=axes), dy.sum(axis=axes)


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(x):
    """tanh-form GELU; returns the activation and the tanh term for backward."""
    th = np.tanh(_GELU_C * (x + 0.044715 * x * x * x))
    return 0.5 * x * (1.0 + th), th


def _gelu_grad(x, th):
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def _split_heads(x, heads):
    n, t, d = x.shape
    return x.reshape(n, t, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    n, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(n, t, h * dh)


def _attn_fwd(x, p, pre, heads):
    q = _split_heads(x @ p[pre + "wq"] + p[pre + "bq"], heads)
    k = _split_heads(x @ p[pre + "wk"] + p[pre + "bk"], heads)
    v = _split_heads(x @ p[pre + "wv"] + p[pre + "bv"], heads)
    scale = 1.0 / math.sqrt(q.shape[-1])
    s = q @ k.transpose(0, 1, 3, 2) * scale
    s -= s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    probs = e / e.sum(axis=-1, keepdims=True)
    o = _merge_heads(probs @ v)
    return o @ p[pre + "wo"] + p[pre + "bo"], (x, q, k, v, probs, o, scale)


def _attn_bwd(dout, cache, p, pre, heads, grads):
    x, q, k, v, probs, o, scale = cache
    do = _split_heads(dout @ p[pre + "wo"].T, heads)
    dprobs = do @ v.transpose(0, 1, 3, 2)
    dv = probs.transpose(0, 1, 3, 2) @ do
    ds = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True)) * scale
    dq = _merge_heads(ds @ k)
    dk = _merge_heads(ds.transpose(0, 1, 3, 2) @ q)
    dv = _merge_heads(dv)
    dx = dq @ p[pre + "wq"].T + dk @ p[pre + "wk"].T + dv @ p[pre + "wv"].T
    if grads is not None:
        d = x.shape[-1]
        xf = x.reshape(-1, d)
        grads[pre + "wo"] = o.reshape(-1, d).T @ dout.reshape(-1, d)
        grads[pre + "bo"] = dout.sum(axis=(0, 1))
        for name, dy in (("q", dq), ("k", dk), ("v", dv)):
            grads[pre + "w" + name] = xf.T @ dy.reshape(-1, d)
            grads[pre + "b" + name] = dy.sum(axis=(0, 1))
    return dx


def patchify(x, cfg: EncoderConfig):
    n = x.shape[0]
    if cfg.input_mode == "tokens":
        return x.reshape(n, cfg.num_patches, cfg.token_dim)
    c, s, ps = cfg.channels, cfg.image_size, cfg.patch_size
    g = s // ps
    img = x.reshape(n, c, g, ps, g, ps)
    return img.transpose(0, 2, 4, 1, 3, 5).reshape(n, g * g, c * ps * ps)


def unpatchify(patches, cfg: EncoderConfig):
    n = patches.shape[0]
    if cfg.input_mode == "tokens":
        return patches.reshape(n, -1)
    c, s, ps = cfg.channels, cfg.image_size, cfg.patch_size
    g = s // ps
    img = patches.reshape(n, g, g, c, ps, ps).transpose(0, 3, 1, 4, 2, 5)
    return img.reshape(n, c * s * s)


# ---------------------------------------------------------------- forward / backward


@dataclass
class Tape:
    """Activations cached by :func:`forward` for one batch."""

    encoder: FrozenEncoder
    version: int
    patches: np.ndarray
    blocks: list = field(default_factory=list)
    interventions: dict = field(default_factory=dict)
    positions: str = "all"
    final: tuple | None = None
    feature_shape: tuple = ()

    @property
    def num_layers(self) -> int:
        return len(self.blocks)


def _select(x, positions):
    return x if positions == "all" else x[:, :1]


def forward(encoder: FrozenEncoder, batch, interventions=None, positions: str = "all"):
    """Encode ``batch`` (rows of length ``config.input_dim``).

    ``interventions`` is an iterable of :class:`InterventionParams`, at most one
    per block.  Returns ``(features, tape)`` with features of shape
    ``(n, dim)``.
    """
    cfg = encoder.config
    p = encoder.params
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ShapeError(f"batch shape {x.shape} does not match (n, {cfg.input_dim})")
    if positions not in ("all", "cls"):
        raise ValueError(f"positions must be 'all' or 'cls', got {positions!r}")
    by_layer = {}
    for iv in interventions or ():
        if not 0 <= iv.layer < cfg.depth:
            raise ShapeError(f"intervention on block {iv.layer} but encoder depth is {cfg.depth}")
        if iv.dim != cfg.dim:
            raise ShapeError(f"intervention dim {iv.dim} does not match encoder dim {cfg.dim}")
        if iv.rank > cfg.dim:
            raise ShapeError(f"intervention rank {iv.rank} exceeds dim {cfg.dim}")
        if iv.layer in by_layer:
            raise ValueError(f"two interventions on block {iv.layer}")
        by_layer[iv.layer] = iv

    patches = patchify(x, cfg)
    n = x.shape[0]
    emb = patches @ p["embed.w"] + p["embed.b"]
    h = np.concatenate([np.broadcast_to(p["cls"], (n, 1, cfg.dim)), emb], axis=1) + p["pos"]
    tape = Tape(encoder, encoder.version, patches, interventions=by_layer, positions=positions)

    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        a_in, c_ln1 = _ln_fwd(h, p[pre + "ln1.g"], p[pre + "ln1.b"])
        a_out, c_attn = _attn_fwd(a_in, p, pre, cfg.heads)
        h1 = h + a_out
        m_in, c_ln2 = _ln_fwd(h1, p[pre + "ln2.g"], p[pre + "ln2.b"])
        z = m_in @ p[pre + "w1"] + p[pre + "b1"]
        act, th = _gelu(z)
        h2 = h1 + act @ p[pre + "w2"] + p[pre + "b2"]
        edit = None
        if i in by_layer:
            iv = by_layer[i]
            sel = _select(h2, positions)
            u = sel @ (iv.W - iv.R).T + iv.b
            h_out = h2.copy()
            if positions == "all":
                h_out += u @ iv.R
            else:
                h_out[:, :1] += u @ iv.R
            edit = (sel, u)
            h2 = h_out
        tape.blocks.append((c_ln1, c_attn, c_ln2, m_in, (z, th), act, edit))
        h = h2

    feats, c_final = _ln_fwd(h[:, 0], p["norm.g"], p["norm.b"])
    tape.final = c_final
    tape.feature_shape = feats.shape
    return feats, tape


@dataclass
class Gradients:
    # layer -> {"R", "W", "b"}
    interventions: dict
    # name -> array, only when backbone gradients were requested
    backbone: dict | None
    # gradient with respect to the raw input batch
    inputs: np.ndarray


def backward(tape: Tape, grad_features, layers=None, backbone: bool = False) -> Gradients:
    """Reverse-mode pass for the batch recorded in ``tape``.

    ``layers`` selects which interventions report gradients (default: all that
    were applied).  Backbone weight gradients are produced only when
    ``backbone=True``, which is refused for a frozen encoder.
    """
    enc = tape.encoder
    cfg = enc.config
    p = enc.params
    if tape.version != enc.version or tape.num_layers != cfg.depth:
        raise StaleTapeError("tape was recorded against a different encoder state")
    g = np.asarray(grad_features, dtype=np.float64)
    if g.shape != tape.feature_shape:
        raise ShapeError(f"grad_features shape {g.shape} does not match features {tape.feature_shape}")
    if backbone and enc.frozen:
        raise FrozenParameterError("backbone gradients requested for a frozen encoder")
    wanted = set(tape.interventions) if layers is None else set(layers)
    unknown = wanted - set(tape.interventions)
    if unknown:
        raise ValueError(f"no intervention was applied at blocks {sorted(unknown)}")

    grads = {} if backbone else None
    iv_grads = {}
    n = g.shape[0]
    dcls, dg, db = _ln_bwd(g, tape.final, backbone)
    if backbone:
        grads["norm.g"], grads["norm.b"] = dg, db
    dh = np.zeros((n, cfg.tokens, cfg.dim))
    dh[:, 0] = dcls

    for i in reversed(range(cfg.depth)):
        pre = f"blocks.{i}."
        c_ln1, c_attn, c_ln2, m_in, z, act, edit = tape.blocks[i]
        if edit is not None:
            iv = tape.interventions[i]
            sel, u = edit
            gsel = _select(dh, tape.positions)
            du = gsel @ iv.R.T
            if i in wanted:
                sf, uf, gf, duf = (a.reshape(-1, a.shape[-1]) for a in (sel, u, gsel, du))
                dW = duf.T @ sf
                iv_grads[i] = {"R": uf.T @ gf - dW, "W": dW, "b": duf.sum(axis=0)}
            dsel = du @ (iv.W - iv.R)
            if tape.positions == "all":
                dh = dh + dsel
            else:
                dh = dh.copy()
                dh[:, :1] += dsel
        # MLP branch
        dact = dh @ p[pre + "w2"].T
        dz = dact * _gelu_grad(*z)
        dm_in = dz @ p[pre + "w1"].T
        if backbone:
            hd = cfg.hidden
            grads[pre + "w2"] = act.reshape(-1, hd).T @ dh.reshape(-1, cfg.dim)
            grads[pre + "b2"] = dh.sum(axis=(0, 1))
            grads[pre + "w1"] = m_in.reshape(-1, cfg.dim).T @ dz.reshape(-1, hd)
            grads[pre + "b1"] = dz.sum(axis=(0, 1))
        dx, dg, db = _ln_bwd(dm_in, c_ln2, backbone)
        if backbone:
            grads[pre + "ln2.g"], grads[pre + "ln2.b"] = dg, db
        dh = dh + dx
        # attention branch
        da_in = _attn_bwd(dh, c_attn, p, pre, cfg.heads, grads)
        dx, dg, db = _ln_bwd(da_in, c_ln1, backbone)
        if backbone:
            grads[pre + "ln1.g"], grads[pre + "ln1.b"] = dg, db
        dh = dh + dx

    demb = dh[:, 1:]
    dpatches = demb @ p["embed.w"].T
    if backbone:
        grads["pos"] = dh.sum(axis=0)
        grads["cls"] = dh[:, 0].sum(axis=0)
        grads["embed.w"] = tape.patches.reshape(-1, cfg.patch_dim).T @ demb.reshape(-1, cfg.dim)
        grads["embed.b"] = demb.sum(axis=(0, 1))
    return Gradients(iv_grads, grads, unpatchify(dpatches, cfg))


def encode(encoder: FrozenEncoder, inputs, interventions=None, positions="all", chunk=512):
    """Features for a large input matrix, computed in chunks."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.shape[0] == 0:
        return np.zeros((0, encoder.config.dim))
    out = [forward(encoder, x[s : s + chunk], interventions, positions)[0] for s in range(0, x.shape[0], chunk)]
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------- training


def train_backbone(encoder: FrozenEncoder, inputs, labels, num_classes, hyper: TrainHyper, history=None):
    """Train every encoder weight plus a temporary linear head in place.

    Returns the (discarded by callers) head.  ``history``, if given, receives
    the mean training loss of each epoch.
    """
    hyper.validate()
    if encoder.frozen:
        raise FrozenParameterError("cannot train a frozen encoder")
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    head = LinearHead(encoder.config.dim, num_classes, hyper.seed + 1)
    params = dict(encoder.params)
    params.update(head.params)
    no_decay = [k for k in params if k.endswith((".g", ".b")) or k.split(".")[-1].startswith("b")]
    opt = SGD(params, hyper.momentum, hyper.weight_decay, no_decay=no_decay)
    rng = SeededRng(hyper.seed)
    step = 0
    for epoch in range(hyper.epochs):
        lr = lr_at(hyper, epoch)
        total, count = 0.0, 0
        for idx in minibatches(len(y), hyper.batch, rng):
            feats, tape = forward(encoder, x[idx])
            loss, dlogits = cross_entropy(head.forward(feats), y[idx])
            if not np.isfinite(loss):
                raise DivergenceError(step, loss)
            hgrads, dfeats = head.backward(feats, dlogits)
            grads = backward(tape, dfeats, backbone=True).backbone
            grads.update(hgrads)
            clip_grads(grads, hyper.clip_norm)
            opt.step(grads, lr)
            encoder.mark_updated()
            total += loss * len(idx)
            count += len(idx)
            step += 1
        if history is not None:
            history.append(total / count)
    return head


def pretrain(config: EncoderConfig, base_data, hyper: TrainHyper, history=None) -> FrozenEncoder:
    """Train a fresh encoder on ``base_data`` and return it frozen.

    ``base_data`` needs ``inputs``, ``labels`` and ``num_classes`` attributes.
    The temporary classification head is discarded.
    """
    if len(base_data.labels) == 0:
        raise EmptyInputError("pretraining data is empty")
    enc = FrozenEncoder(config)
    train_backbone(enc, base_data.inputs, base_data.labels, base_data.num_classes, hyper, history)
    return enc.freeze()


# ---------------------------------------------------------------- checkpoints


def save_encoder(enc: FrozenEncoder) -> bytes:
    """Serialize to the ``COREENC1`` container.

    Layout: 8-byte magic, uint32-LE header length, UTF-8 JSON header
    ``{"config": ..., "frozen": ...}``, then every parameter as float64-LE in
    :func:`param_shapes` order, row-major.
    """
    header = json.dumps({"config": enc.config.to_dict(), "frozen": enc.frozen}, sort_keys=True).encode("utf-8")
    parts = [ENCODER_MAGIC, struct.pack("<I", len(header)), header]
    for name, _ in param_shapes(enc.config):
        parts.append(np.ascontiguousarray(enc.params[name], dtype="<f8").tobytes())
    return b"".join(parts)


def load_encoder(data: bytes) -> FrozenEncoder:
    data = bytes(data)
    if data[:8] != ENCODER_MAGIC:
        raise CheckpointVersionError(f"expected magic {ENCODER_MAGIC!r}, found {data[:8]!r}")
    if len(data) < 12:
        raise CheckpointTruncatedError("encoder checkpoint truncated in header")
    (n,) = struct.unpack("<I", data[8:12])
    if len(data) < 12 + n:
        raise CheckpointTruncatedError("encoder checkpoint truncated in header")
    header = json.loads(data[12 : 12 + n].decode("utf-8"))
    cfg = EncoderConfig(**header["config"])
    off = 12 + n
    params = {}
    for name, shape in param_shapes(cfg):
        size = int(np.prod(shape)) * 8
        if len(data) < off + size:
            raise CheckpointTruncatedError(f"encoder checkpoint truncated at parameter {name}")
        params[name] = np.frombuffer(data[off : off + size], dtype="<f8").reshape(shape).astype(np.float64)
        off += size
    if off != len(data):
        raise CheckpointTruncatedError(f"{len(data) - off} trailing bytes in encoder checkpoint")
    return FrozenEncoder(cfg, params, frozen=header["frozen"])
