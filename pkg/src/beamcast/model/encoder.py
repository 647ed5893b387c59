"""Encoder-only attention regressor over beam tokens.

Tokens are the 64 beam rows of the CIR amplitude matrix, each 46 delay
taps wide. Each encoder layer runs multi-head self-attention and a
position-wise FFN with residual connections; a flattened MLP head maps the
final token matrix to per-beam energies.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn


@dataclass
class ModelConfig:
    d_model: int = 46
    seq_len: int = 64
    num_heads: int = 3
    num_layers: int = 3
    ffn_inner: int = 64
    head_hidden: tuple[int, ...] = (64, 32)
    output_dim: int = 64
    head_dim: int | None = None  # per-head width; default ceil(d_model / num_heads)
    batch_size: int = 64
    epochs: int = 2500
    learning_rate: float = 1e-3
    seed: int = 0
    pre_norm: bool = True
    ln_eps: float = 1e-8
    patience: int | None = None
    eval_every: int = 1

    def __post_init__(self):
        self.head_hidden = tuple(int(h) for h in self.head_hidden)
        dims = [self.d_model, self.seq_len, self.num_heads, self.num_layers, self.ffn_inner,
                self.output_dim, self.batch_size, self.epochs, *self.head_hidden]
        if any(d <= 0 for d in dims):
            raise ValueError(f"all model dimensions must be positive: {self}")
        if self.head_dim is None:
            self.head_dim = math.ceil(self.d_model / self.num_heads)
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head_hidden"] = list(self.head_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every learnable tensor, in declaration (and serialisation) order."""
    d, hk = cfg.d_model, cfg.num_heads * cfg.head_dim
    shapes: dict[str, tuple[int, ...]] = {}
    for l in range(cfg.num_layers):
        p = f"layer{l}."
        shapes[p + "ln1.gain"] = (d,)
        shapes[p + "ln1.bias"] = (d,)
        for name in ("q", "k", "v"):
            shapes[p + f"attn.w{name}"] = (d, hk)
            shapes[p + f"attn.b{name}"] = (hk,)
        shapes[p + "attn.wo"] = (hk, d)
        shapes[p + "attn.bo"] = (d,)
        shapes[p + "ln2.gain"] = (d,)
        shapes[p + "ln2.bias"] = (d,)
        shapes[p + "ffn.w1"] = (d, cfg.ffn_inner)
        shapes[p + "ffn.b1"] = (cfg.ffn_inner,)
        shapes[p + "ffn.w2"] = (cfg.ffn_inner, d)
        shapes[p + "ffn.b2"] = (d,)
    widths = [cfg.seq_len * d, *cfg.head_hidden, cfg.output_dim]
    for i in range(len(widths) - 1):
        shapes[f"head.w{i + 1}"] = (widths[i], widths[i + 1])
        shapes[f"head.b{i + 1}"] = (widths[i + 1],)
    return shapes


def parameter_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in parameter_shapes(cfg).values())


class EncoderModel:
    """Parameters plus the fixed input/target scalings fitted on training data."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray] | None = None,
                 input_scale: float = 1.0, target_scale: float = 1.0):
        self.cfg = cfg
        self.input_scale = float(input_scale)
        self.target_scale = float(target_scale)
        self.pe = nn.positional_encoding(cfg.seq_len, cfg.d_model)
        shapes = parameter_shapes(cfg)
        if params is None:
            params = init_parameters(cfg)
        missing = set(shapes) - set(params)
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)}")
        for name, shape in shapes.items():
            if params[name].shape != shape:
                raise ValueError(f"{name} has shape {params[name].shape}, expected {shape}")
        self.params = {name: np.asarray(params[name], dtype=np.float64) for name in shapes}

    def copy(self) -> "EncoderModel":
        return EncoderModel(self.cfg, {k: v.copy() for k, v in self.params.items()},
                            self.input_scale, self.target_scale)

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, dict]:
        return encoder_forward(self, x)

    def predict(self, features: np.ndarray, batch: int = 256) -> np.ndarray:
        """Per-beam energy predictions in target units for ``[N, S, d]`` or ``[S, d]`` features."""
        feats = np.asarray(features, dtype=float)
        single = feats.ndim == 2
        if single:
            feats = feats[None]
        out = [encoder_forward(self, feats[i:i + batch] * self.input_scale, keep_cache=False)[0]
               for i in range(0, len(feats), batch)]
        pred = np.concatenate(out) * self.target_scale
        return pred[0] if single else pred


def init_parameters(cfg: ModelConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "gain":
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape)
    return params


def _check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite activation in {where}")


def _split_heads(t, heads):
    b, s, _ = t.shape
    return t.reshape(b, s, heads, -1).transpose(0, 2, 1, 3)


def _merge_heads(t):
    b, h, s, dh = t.shape
    return t.transpose(0, 2, 1, 3).reshape(b, s, h * dh)


def _attention(p, pre, a, heads, cache):
    # one fused projection for queries, keys and values
    w = np.concatenate([p[pre + "wq"], p[pre + "wk"], p[pre + "wv"]], axis=1)
    bias = np.concatenate([p[pre + "bq"], p[pre + "bk"], p[pre + "bv"]])
    q, k, v = np.split(a @ w + bias, 3, axis=-1)
    q, k, v = (_split_heads(t, heads) for t in (q, k, v))
    ctx, attw = nn.scaled_dot_attention(q, k, v, return_weights=True)
    merged = _merge_heads(ctx)
    out = merged @ p[pre + "wo"] + p[pre + "bo"]
    if cache is not None:
        cache.update(a=a, q=q, k=k, v=v, w=attw, merged=merged, wqkv=w)
    return out


def _attention_backward(p, pre, dout, c, grads):
    flat = lambda t: t.reshape(-1, t.shape[-1])
    grads[pre + "wo"] = flat(c["merged"]).T @ flat(dout)
    grads[pre + "bo"] = flat(dout).sum(axis=0)
    dctx = _split_heads(dout @ p[pre + "wo"].T, c["q"].shape[1])
    dw = dctx @ np.swapaxes(c["v"], -1, -2)
    dv = np.swapaxes(c["w"], -1, -2) @ dctx
    dscores = nn.softmax_backward(c["w"], dw) / math.sqrt(c["q"].shape[-1])
    dq = dscores @ c["k"]
    dk = np.swapaxes(dscores, -1, -2) @ c["q"]
    dm = flat(np.concatenate([_merge_heads(dq), _merge_heads(dk), _merge_heads(dv)], axis=-1))
    dwqkv = flat(c["a"]).T @ dm
    dbqkv = dm.sum(axis=0)
    for name, gw, gb in zip("qkv", np.split(dwqkv, 3, axis=1), np.split(dbqkv, 3)):
        grads[pre + "w" + name] = gw
        grads[pre + "b" + name] = gb
    return (dm @ c["wqkv"].T).reshape(c["a"].shape)


def _ffn(p, pre, a, cache):
    z = a @ p[pre + "w1"] + p[pre + "b1"]
    h = nn.relu(z)
    out = h @ p[pre + "w2"] + p[pre + "b2"]
    if cache is not None:
        cache.update(a=a, z=z, h=h)
    return out


def _ffn_backward(p, pre, dout, c, grads):
    flat = lambda t: t.reshape(-1, t.shape[-1])
    grads[pre + "w2"] = flat(c["h"]).T @ flat(dout)
    grads[pre + "b2"] = flat(dout).sum(axis=0)
    dz = (dout @ p[pre + "w2"].T) * (c["z"] > 0)
    grads[pre + "w1"] = flat(c["a"]).T @ flat(dz)
    grads[pre + "b1"] = flat(dz).sum(axis=0)
    return dz @ p[pre + "w1"].T


def encoder_forward(model: EncoderModel, x: np.ndarray, keep_cache: bool = True):
    """Forward pass on ``[B, S, d]`` (or ``[S, d]``) inputs; returns ``(pred [B, out], cache)``."""
    cfg, p = model.cfg, model.params
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.shape[1:] != (cfg.seq_len, cfg.d_model):
        raise ValueError(f"input shape {x.shape[1:]} != ({cfg.seq_len}, {cfg.d_model})")
    _check_finite(x, "input")
    cache: dict = {"input": x, "layers": []} if keep_cache else None
    h = x + model.pe
    for l in range(cfg.num_layers):
        pre = f"layer{l}."
        lc = {"attn": {}, "ffn": {}} if keep_cache else None
        if cfg.pre_norm:
            a, ln1 = nn.layer_norm(h, p[pre + "ln1.gain"], p[pre + "ln1.bias"], cfg.ln_eps)
            h = h + _attention(p, pre + "attn.", a, cfg.num_heads, lc and lc["attn"])
            _check_finite(h, f"layer {l} attention")
            c, ln2 = nn.layer_norm(h, p[pre + "ln2.gain"], p[pre + "ln2.bias"], cfg.ln_eps)
            h = h + _ffn(p, pre + "ffn.", c, lc and lc["ffn"])
        else:
            r = h + _attention(p, pre + "attn.", h, cfg.num_heads, lc and lc["attn"])
            _check_finite(r, f"layer {l} attention")
            h, ln1 = nn.layer_norm(r, p[pre + "ln1.gain"], p[pre + "ln1.bias"], cfg.ln_eps)
            r = h + _ffn(p, pre + "ffn.", h, lc and lc["ffn"])
            h, ln2 = nn.layer_norm(r, p[pre + "ln2.gain"], p[pre + "ln2.bias"], cfg.ln_eps)
        _check_finite(h, f"layer {l} feed-forward")
        if keep_cache:
            lc["ln1"], lc["ln2"] = ln1, ln2
            cache["layers"].append(lc)
    z = h.reshape(h.shape[0], -1)
    n_head = len(cfg.head_hidden) + 1
    acts = [z]
    for i in range(1, n_head + 1):
        z = z @ p[f"head.w{i}"] + p[f"head.b{i}"]
        if i < n_head:
            z = nn.relu(z)
        acts.append(z)
    _check_finite(z, "regression head")
    if keep_cache:
        cache["head"] = acts
    return (z[0] if single else z), cache


def encoder_backward(model: EncoderModel, cache: dict, dpred: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of the loss wrt every parameter given ``dL/dpred``."""
    if cache is None:
        raise ValueError("backward needs the cache from a forward pass with keep_cache=True")
    cfg, p = model.cfg, model.params
    acts = cache["head"]
    dz = np.asarray(dpred, dtype=np.float64)
    if dz.ndim == 1:
        dz = dz[None]
    if dz.shape != acts[-1].shape:
        raise ValueError(f"loss gradient shape {dz.shape} does not match forward output {acts[-1].shape}")
    grads: dict[str, np.ndarray] = {}
    n_head = len(cfg.head_hidden) + 1
    for i in range(n_head, 0, -1):
        grads[f"head.w{i}"] = acts[i - 1].T @ dz
        grads[f"head.b{i}"] = dz.sum(axis=0)
        dz = dz @ p[f"head.w{i}"].T
        if i > 1:
            dz = dz * (acts[i - 1] > 0)
    dh = dz.reshape(cache["input"].shape)
    for l in range(cfg.num_layers - 1, -1, -1):
        pre = f"layer{l}."
        lc = cache["layers"][l]
        if cfg.pre_norm:
            dc = _ffn_backward(p, pre + "ffn.", dh, lc["ffn"], grads)
            dx, grads[pre + "ln2.gain"], grads[pre + "ln2.bias"] = nn.layer_norm_backward(
                dc, lc["ln2"], p[pre + "ln2.gain"])
            dh = dh + dx
            da = _attention_backward(p, pre + "attn.", dh, lc["attn"], grads)
            dx, grads[pre + "ln1.gain"], grads[pre + "ln1.bias"] = nn.layer_norm_backward(
                da, lc["ln1"], p[pre + "ln1.gain"])
            dh = dh + dx
        else:
            dr, grads[pre + "ln2.gain"], grads[pre + "ln2.bias"] = nn.layer_norm_backward(
                dh, lc["ln2"], p[pre + "ln2.gain"])
            dh = dr + _ffn_backward(p, pre + "ffn.", dr, lc["ffn"], grads)
            dr, grads[pre + "ln1.gain"], grads[pre + "ln1.bias"] = nn.layer_norm_backward(
                dh, lc["ln1"], p[pre + "ln1.gain"])
            dh = dr + _attention_backward(p, pre + "attn.", dr, lc["attn"], grads)
    return {name: grads[name] for name in parameter_shapes(cfg)}
