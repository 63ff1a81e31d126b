"""Checkpoint container: text header plus raw little-endian float64 blocks.

Layout::

    xspec-ckpt-v1
    config <key>=<value>          (one line per ModelConfig field)
    meta <key>=<value>            (optional free-form metadata)
    array <name> <d0>x<d1>... <byte offset>
    end
    <concatenated array bytes; offsets are relative to the first byte after "end\\n">

Nothing time-dependent is written, so equal parameters give equal bytes.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import fields
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import CheckpointError
from .model import ModelConfig, ModelParams, param_shapes

VERSION = "xspec-ckpt-v1"


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_config(items):
    kinds = {f.name: f.type for f in fields(ModelConfig)}
    out = {}
    for key, raw in items.items():
        kind = kinds.get(key)
        if kind is None:
            continue
        if kind in ("bool", bool):
            out[key] = raw == "true"
        elif kind in ("int", int):
            out[key] = int(raw)
        else:
            out[key] = float(raw)
    return ModelConfig(**out)


def save_checkpoint(params: ModelParams, path, meta=None):
    path = Path(path)
    lines = [VERSION]
    for key, value in params.config.to_dict().items():
        lines.append(f"config {key}={_fmt(value)}")
    for key, value in (meta or {}).items():
        lines.append(f"meta {key}={value}")
    blobs = []
    offset = 0
    for name, t in params:
        data = np.ascontiguousarray(t.data, dtype="<f8")
        shape = "x".join(str(n) for n in data.shape)
        lines.append(f"array {name} {shape} {offset}")
        blobs.append(data.tobytes())
        offset += data.nbytes
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("ascii")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)
    return path


def load_checkpoint(path, expected: ModelConfig | None = None):
    """Return ``(params, meta)``.

    ``expected`` (if given) must agree with the stored config on every
    shape-determining field, otherwise :class:`CheckpointError` is raised.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    marker = b"\nend\n"
    cut = raw.find(marker)
    if not raw.startswith(VERSION.encode() + b"\n") or cut < 0:
        raise CheckpointError(f"{path}: not an {VERSION} checkpoint")
    body = raw[cut + len(marker):]
    config_items, meta, arrays = {}, {}, []
    for line in raw[:cut].decode("ascii").splitlines()[1:]:
        kind, _, rest = line.partition(" ")
        if kind in ("config", "meta"):
            key, _, value = rest.partition("=")
            (config_items if kind == "config" else meta)[key] = value
        elif kind == "array":
            name, shape, offset = rest.split(" ")
            dims = tuple(int(n) for n in shape.split("x")) if shape else ()
            arrays.append((name, dims, int(offset)))
        else:
            raise CheckpointError(f"{path}: unknown header line {line!r}")
    try:
        cfg = _parse_config(config_items)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad config block: {exc}") from exc
    if expected is not None:
        shape_keys = ("image_h", "image_w", "channels", "patch", "dim", "layers", "heads",
                      "k_local", "n_sie", "n_classes", "gem_enabled", "mlp_ratio")
        bad = [k for k in shape_keys if getattr(cfg, k) != getattr(expected, k)]
        if bad:
            detail = ", ".join(f"{k}: checkpoint {getattr(cfg, k)} vs config {getattr(expected, k)}" for k in bad)
            raise CheckpointError(f"{path}: incompatible with config ({detail})")
        cfg = expected
    want = param_shapes(cfg)
    tensors = OrderedDict()
    for name, dims, offset in arrays:
        if want.get(name) != dims:
            raise CheckpointError(f"{path}: array {name} has shape {dims}, expected {want.get(name)}")
        count = int(np.prod(dims)) if dims else 1
        if offset + 8 * count > len(body):
            raise CheckpointError(f"{path}: array {name} truncated")
        data = np.frombuffer(body, dtype="<f8", count=count, offset=offset).reshape(dims)
        tensors[name] = Tensor(data.astype(np.float64), requires_grad=True, name=name)
    missing = set(want) - set(tensors)
    if missing:
        raise CheckpointError(f"{path}: missing arrays {sorted(missing)}")
    ordered = OrderedDict((k, tensors[k]) for k in want)
    return ModelParams(cfg, ordered), meta
