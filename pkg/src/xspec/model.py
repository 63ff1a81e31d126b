"""ViT body-recognition model with additive side-information embeddings.

Input sequence layout, for N patches and ``k_local`` part tokens::

    row 0             cls token
    rows 1..k_local   local part tokens (face / torso / lower body by default)
    remaining N rows  linear projection of each flattened patch

The position table is added to every row, then ``lambda_sie`` times one row
of the SIE table. After a pre-norm encoder the feature is
``[cls ; mean(local)]``, optionally followed by a GeM-pooled patch block.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ParameterError, ShapeError


PIXEL_CENTER = 0.5


@dataclass(frozen=True)
class ModelConfig:
    image_h: int = 64
    image_w: int = 32
    channels: int = 3
    patch: int = 8
    dim: int = 64
    layers: int = 2
    heads: int = 4
    k_local: int = 3
    n_sie: int = 2
    lambda_sie: float = 3.0
    n_classes: int = 8
    gem_enabled: bool = False
    gem_p_init: float = 3.0
    mlp_ratio: int = 4
    ln_eps: float = 1e-6
    gem_eps: float = 1e-6

    def __post_init__(self):
        checks = [
            (self.patch > 0, "patch", "must be positive"),
            (self.image_h > 0 and self.image_h % max(self.patch, 1) == 0, "image_h", f"{self.image_h} not divisible by patch {self.patch}"),
            (self.image_w > 0 and self.image_w % max(self.patch, 1) == 0, "image_w", f"{self.image_w} not divisible by patch {self.patch}"),
            (self.channels > 0, "channels", "must be positive"),
            (self.dim > 0 and self.heads > 0 and self.dim % self.heads == 0, "dim", f"{self.dim} not divisible by heads {self.heads}"),
            (self.layers >= 0, "layers", "must be nonnegative"),
            (self.k_local >= 1, "k_local", "must be at least 1"),
            (self.n_sie >= 1, "n_sie", "must be at least 1"),
            (self.lambda_sie >= 0, "lambda_sie", "must be nonnegative"),
            (self.n_classes >= 1, "n_classes", "must be at least 1"),
            (self.gem_p_init >= 1, "gem_p_init", "must be at least 1"),
            (self.mlp_ratio >= 1, "mlp_ratio", "must be at least 1"),
        ]
        for ok, key, msg in checks:
            if not ok:
                raise ParameterError(f"model.{key}: {msg}")

    @property
    def n_patches(self):
        return (self.image_h // self.patch) * (self.image_w // self.patch)

    @property
    def seq_len(self):
        return self.n_patches + self.k_local + 1

    @property
    def patch_dim(self):
        return self.patch * self.patch * self.channels

    @property
    def feature_dim(self):
        return (3 if self.gem_enabled else 2) * self.dim

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name: f.type for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class ModelParams:
    """Named learnable tensors in a fixed order.

    Linear weights are stored ``(out, in)``. Per-layer names follow
    ``blocks.{i}.{ln1,attn_qkv,attn_proj,ln2,fc1,fc2}.{weight,bias,gain}``.
    """

    def __init__(self, config: ModelConfig, tensors: "OrderedDict[str, Tensor]"):
        self.config = config
        self.tensors = tensors
        expected = config.seq_len
        if self["pos_table"].shape != (expected, config.dim):
            raise ShapeError(f"pos_table has shape {self['pos_table'].shape}, expected ({expected}, {config.dim})")
        if self["sie_table"].shape != (config.n_sie, config.dim):
            raise ShapeError(f"sie_table has shape {self['sie_table'].shape}, expected ({config.n_sie}, {config.dim})")

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def __len__(self):
        return len(self.tensors)

    def names(self):
        return list(self.tensors)

    def copy(self):
        return ModelParams(self.config, OrderedDict(
            (k, Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)) for k, v in self.tensors.items()))

    def num_values(self):
        return sum(t.size for t in self.tensors.values())


def param_shapes(cfg: ModelConfig):
    d, hidden = cfg.dim, cfg.dim * cfg.mlp_ratio
    shapes = OrderedDict()
    shapes["patch_proj.weight"] = (d, cfg.patch_dim)
    shapes["patch_proj.bias"] = (d,)
    shapes["cls_token"] = (d,)
    shapes["local_tokens"] = (cfg.k_local, d)
    shapes["pos_table"] = (cfg.seq_len, d)
    shapes["sie_table"] = (cfg.n_sie, d)
    for i in range(cfg.layers):
        b = f"blocks.{i}."
        shapes[b + "ln1.gain"] = (d,)
        shapes[b + "ln1.bias"] = (d,)
        shapes[b + "attn_qkv.weight"] = (3 * d, d)
        shapes[b + "attn_qkv.bias"] = (3 * d,)
        shapes[b + "attn_proj.weight"] = (d, d)
        shapes[b + "attn_proj.bias"] = (d,)
        shapes[b + "ln2.gain"] = (d,)
        shapes[b + "ln2.bias"] = (d,)
        shapes[b + "fc1.weight"] = (hidden, d)
        shapes[b + "fc1.bias"] = (hidden,)
        shapes[b + "fc2.weight"] = (d, hidden)
        shapes[b + "fc2.bias"] = (d,)
    shapes["final_ln.gain"] = (d,)
    shapes["final_ln.bias"] = (d,)
    if cfg.gem_enabled:
        shapes["gem_p"] = (1,)
    shapes["classifier"] = (cfg.n_classes, cfg.feature_dim)
    return shapes


def module_groups(cfg: ModelConfig):
    """Parameter names per module: ``embed``, ``blocks.i``, ``head``."""
    groups = OrderedDict()
    for name in param_shapes(cfg):
        if name.startswith("blocks."):
            key = ".".join(name.split(".")[:2])
        elif name.startswith(("final_ln.", "gem_p", "classifier")):
            key = "head"
        else:
            key = "embed"
        groups.setdefault(key, []).append(name)
    return groups


def trunc_normal(rng, shape, std=0.02):
    """Normal samples redrawn until they fall within two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_params(cfg: ModelConfig, seed=0) -> ModelParams:
    rng = np.random.default_rng(seed)
    tensors = OrderedDict()
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name in ("cls_token", "local_tokens", "pos_table", "sie_table"):
            value = trunc_normal(rng, shape)
        elif name == "gem_p":
            value = np.full(shape, cfg.gem_p_init)
        elif leaf == "gain":
            value = np.ones(shape)
        elif leaf == "bias":
            value = np.zeros(shape)
        else:  # weight matrices and the classifier: fan-in scaled uniform
            bound = 1.0 / math.sqrt(shape[1])
            value = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(value, requires_grad=True, name=name)
    return ModelParams(cfg, tensors)


# ---------------------------------------------------------------------------
# input assembly
# ---------------------------------------------------------------------------

def patchify(image, patch):
    """Split ``h x w x c`` (or a ``b x h x w x c`` batch) into row-major flattened patches."""
    img = np.asarray(image, dtype=np.float64)
    single = img.ndim == 3
    if single:
        img = img[None]
    if img.ndim != 4:
        raise ShapeError(f"patchify: expected h x w x c image(s), got shape {np.shape(image)}")
    b, h, w, c = img.shape
    if h % patch or w % patch:
        raise ShapeError(f"patchify: image {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    out = img.reshape(b, gh, patch, gw, patch, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, gh * gw, patch * patch * c)
    return out[0] if single else out


def unpatchify(patches, h, w, patch, channels):
    p = np.asarray(patches, dtype=np.float64)
    single = p.ndim == 2
    if single:
        p = p[None]
    b = p.shape[0]
    gh, gw = h // patch, w // patch
    out = p.reshape(b, gh, gw, patch, patch, channels).transpose(0, 1, 3, 2, 4, 5).reshape(b, h, w, channels)
    return out[0] if single else out


def linear(x, weight, bias=None):
    x = ad.as_tensor(x)
    lead = x.shape[:-1]
    if len(lead) > 1:
        # one 2-D GEMM is much faster than numpy's batched loop
        x = ad.reshape(x, (-1, x.shape[-1]))
    y = ad.matmul(x, ad.transpose(weight))
    if bias is not None:
        y = y + bias
    return ad.reshape(y, lead + (y.shape[-1],)) if len(lead) > 1 else y


def assemble_sequence(patches, params: ModelParams):
    """Token matrix before SIE: ``[cls; locals; proj(patches)] + pos_table``.

    ``patches`` is ``N x patch_dim`` or ``B x N x patch_dim``.
    """
    cfg = params.config
    p = np.asarray(patches, dtype=np.float64)
    single = p.ndim == 2
    if single:
        p = p[None]
    if p.shape[1:] != (cfg.n_patches, cfg.patch_dim):
        raise ShapeError(f"assemble_sequence: patches {p.shape[1:]} do not match config ({cfg.n_patches}, {cfg.patch_dim})")
    b = p.shape[0]
    emb = linear(ad.as_tensor(p), params["patch_proj.weight"], params["patch_proj.bias"])
    cls = ad.expand(ad.reshape(params["cls_token"], (1, 1, cfg.dim)), (b, 1, cfg.dim))
    loc = ad.expand(ad.reshape(params["local_tokens"], (1, cfg.k_local, cfg.dim)), (b, cfg.k_local, cfg.dim))
    z = ad.concat([cls, loc, emb], axis=1) + params["pos_table"]
    return z[0] if single else z


def apply_sie(z0, sie_index, params: ModelParams, lambda_sie):
    """Add ``lambda_sie * sie_table[sie_index]`` to every token row.

    ``sie_index`` is an int for a single ``T x D`` sequence or an int array
    for a ``B x T x D`` batch.
    """
    n_sie = params.config.n_sie
    idx = np.asarray(sie_index, dtype=np.int64)
    if ((idx < 0) | (idx >= n_sie)).any():
        raise IndexError(f"sie index {sie_index} out of range for n_sie={n_sie}")
    z0 = ad.as_tensor(z0)
    rows = params["sie_table"][idx]
    if idx.ndim == 0:
        return z0 + ad.scale(rows, lambda_sie)
    rows = ad.reshape(rows, (idx.shape[0], 1, params.config.dim))
    return z0 + ad.scale(rows, lambda_sie)


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

def attention(h, params, prefix, heads):
    single = h.ndim == 2
    if single:
        h = ad.reshape(h, (1,) + h.shape)
    b, t, d = h.shape
    dh = d // heads
    qkv = linear(h, params[prefix + "attn_qkv.weight"], params[prefix + "attn_qkv.bias"])
    qkv = ad.transpose(ad.reshape(qkv, (b, t, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    out = ad.matmul(ad.softmax(scores, axis=-1), v)
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, t, d))
    out = linear(out, params[prefix + "attn_proj.weight"], params[prefix + "attn_proj.bias"])
    return out[0] if single else out


def encoder_block(z, params, i, cfg):
    p = f"blocks.{i}."
    h = ad.layernorm(z, params[p + "ln1.gain"], params[p + "ln1.bias"], cfg.ln_eps)
    z = z + attention(h, params, p, cfg.heads)
    h = ad.layernorm(z, params[p + "ln2.gain"], params[p + "ln2.bias"], cfg.ln_eps)
    h = linear(ad.gelu(linear(h, params[p + "fc1.weight"], params[p + "fc1.bias"])),
               params[p + "fc2.weight"], params[p + "fc2.bias"])
    return z + h


def encode(z0_prime, params: ModelParams):
    cfg = params.config
    z = ad.as_tensor(z0_prime)
    for i in range(cfg.layers):
        z = encoder_block(z, params, i, cfg)
    return ad.layernorm(z, params["final_ln.gain"], params["final_ln.bias"], cfg.ln_eps)


# ---------------------------------------------------------------------------
# feature head
# ---------------------------------------------------------------------------

def gem_pool(patch_tokens, p, eps=1e-6):
    """Generalized mean over the token axis (second to last).

    ``p`` may be a float or a learnable scalar tensor; it must be >= 1.
    """
    pv = float(p.data.reshape(-1)[0]) if isinstance(p, Tensor) else float(p)
    if pv < 1.0:
        raise ParameterError(f"gem_pool: exponent p must be >= 1, got {pv}")
    x = ad.clamp_min(patch_tokens, eps)
    m = ad.mean(ad.power(x, p), axis=-2)
    inv = ad.power(p, -1.0) if isinstance(p, Tensor) else 1.0 / pv
    return ad.power(m, inv)


def compose_feature(tokens, params: ModelParams):
    """``[cls ; mean(local)]`` plus the GeM block when enabled."""
    cfg = params.config
    k = cfg.k_local
    cls = tokens[..., 0, :]
    local = ad.mean(tokens[..., 1:1 + k, :], axis=-2)
    parts = [cls, local]
    if cfg.gem_enabled:
        parts.append(gem_pool(tokens[..., 1 + k:, :], params["gem_p"], cfg.gem_eps))
    return ad.concat(parts, axis=-1)


def forward_batch(images, sie_indices, params: ModelParams):
    """Features ``B x feature_dim`` and logits ``B x n_classes`` for a batch.

    With ``lambda_sie == 0`` the SIE table is never read.
    """
    cfg = params.config
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.shape[1:] != (cfg.image_h, cfg.image_w, cfg.channels):
        raise ShapeError(f"forward: images {imgs.shape[1:]} do not match config "
                         f"({cfg.image_h}, {cfg.image_w}, {cfg.channels})")
    imgs = (imgs - PIXEL_CENTER) / PIXEL_CENTER  # [0, 1] -> [-1, 1]
    z = assemble_sequence(patchify(imgs, cfg.patch), params)
    if cfg.lambda_sie != 0:
        z = apply_sie(z, np.asarray(sie_indices, dtype=np.int64).reshape(len(imgs)), params, cfg.lambda_sie)
    feats = compose_feature(encode(z, params), params)
    logits = ad.matmul(feats, ad.transpose(params["classifier"]))
    return feats, logits


def forward(image, sie_index, params: ModelParams):
    """Single-image forward pass returning ``(feature, logits)`` tensors."""
    feats, logits = forward_batch(np.asarray(image)[None], [sie_index], params)
    return feats[0], logits[0]
