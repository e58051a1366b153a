"""Trajectory predictors built on :mod:`trajconv.ndmath`.

Every forward maps normalized observations (B, 8, 2), plus optional social
features (B, 8, S), to 12 normalized positions (B, 12, 2).
"""

from __future__ import annotations

import dataclasses
import functools
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import ndmath as nm
from .ndmath import BatchNormState, NdArray
from .social import SocialConfig

FAMILIES = ("conv1d", "conv2d", "lstm", "encdec")

DEFAULT_CONV2D_CHANNELS = ((1, 16), (16, 32), (32, 48), (48, 48), (48, 32), (32, 16), (16, 1))


class ModelBuildError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    family: str = "conv2d"
    kernel_size: int = 5
    positional_embedding: bool = False
    residual: bool = False
    transpose_conv: bool = False
    embed_dim: int = 64
    lstm_hidden: int = 128
    out_hidden: int = 64
    social: SocialConfig = field(default_factory=SocialConfig)
    channels: tuple[tuple[int, int], ...] | None = None
    pre_layers: int = 3
    batchnorm: bool | None = None
    activation: str = "relu"
    symmetric_reduction: bool = False
    tconv_kernel: int = 5
    obs_len: int = 8
    pred_len: int = 12

    def resolved_channels(self) -> tuple[tuple[int, int], ...]:
        if self.channels is not None:
            return tuple(tuple(c) for c in self.channels)
        if self.family == "conv2d":
            return DEFAULT_CONV2D_CHANNELS
        e = self.embed_dim
        n = 6 if self.transpose_conv else 7
        return tuple((e, e) for _ in range(n))

    @property
    def uses_batchnorm(self) -> bool:
        if self.batchnorm is not None:
            return self.batchnorm
        return self.family == "conv2d"

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ModelBuildError(f"unknown model family {self.family!r}")
        if self.family in ("lstm", "encdec"):
            if self.positional_embedding or self.residual or self.transpose_conv:
                raise ModelBuildError("variant flags apply to convolutional families only")
            return
        k = self.kernel_size
        if k < 3 or k % 2 == 0:
            raise ModelBuildError(f"kernel_size must be odd and >= 3, got {k}")
        if self.activation not in ("relu", "none"):
            raise ModelBuildError(f"unknown activation {self.activation!r}")
        ch = self.resolved_channels()
        n_mid = 1 if self.transpose_conv else 2
        if len(ch) < self.pre_layers + n_mid + 1 or self.pre_layers < 0:
            raise ModelBuildError(f"channel schedule of {len(ch)} layers too short for "
                                  f"{self.pre_layers} pre + {n_mid} transition + >=1 post layers")
        for (_, out), (nxt, _) in zip(ch, ch[1:]):
            if out != nxt:
                raise ModelBuildError(f"channel schedule breaks: {out} -> {nxt} in {ch}")
        if self.family == "conv2d":
            if ch[0][0] != 1 or ch[-1][1] != 1:
                raise ModelBuildError(f"conv2d schedule must start and end with 1 channel, got {ch}")
            if self.transpose_conv:
                raise ModelBuildError("transpose_conv variant is defined for conv1d only")
        else:
            if ch[0][0] != self.embed_dim:
                raise ModelBuildError(f"conv1d schedule must start with embed_dim={self.embed_dim} channels")
        if self.residual and self.family == "conv1d":
            for i, (a, b) in enumerate(ch):
                if a != b:
                    raise ModelBuildError(f"residual layer {i} changes channels {a}->{b}")
        if self.transpose_conv and self.obs_len - 1 + self.tconv_kernel != self.pred_len:
            raise ModelBuildError(
                f"transpose conv kernel {self.tconv_kernel} maps {self.obs_len} steps to "
                f"{self.obs_len - 1 + self.tconv_kernel}, not {self.pred_len}")
        if self.residual and self.family == "conv2d":
            raise ModelBuildError("residual variant is defined for conv1d only")
        if not self.transpose_conv and 2 * self.obs_len - 4 != self.pred_len:
            raise ModelBuildError(f"upsample+reduction maps {self.obs_len} to {2 * self.obs_len - 4} steps, "
                                  f"not {self.pred_len}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["channels"] is not None:
            d["channels"] = [list(c) for c in d["channels"]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["social"] = SocialConfig(**d.get("social", {}))
        if d.get("channels") is not None:
            d["channels"] = tuple(tuple(c) for c in d["channels"])
        return cls(**d)


class ParamStore:
    """Ordered trainable parameters plus batch-norm running statistics."""

    def __init__(self):
        self.params: OrderedDict[str, NdArray] = OrderedDict()
        self.buffers: OrderedDict[str, BatchNormState] = OrderedDict()

    def __getitem__(self, name: str) -> NdArray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def add(self, name: str, value: np.ndarray) -> NdArray:
        if name in self.params:
            raise ModelBuildError(f"duplicate parameter name {name!r}")
        arr = NdArray(value, requires_grad=True, dtype=value.dtype)
        self.params[name] = arr
        return arr

    def trainable_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in self.params.items()}

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.params.items()}

    def layers(self) -> OrderedDict[str, list[str]]:
        groups: OrderedDict[str, list[str]] = OrderedDict()
        for name in self.params:
            groups.setdefault(name.rsplit(".", 1)[0], []).append(name)
        return groups

    def copy(self, dtype=None) -> "ParamStore":
        out = ParamStore()
        for n, p in self.params.items():
            out.params[n] = NdArray(p.data.astype(dtype or p.data.dtype, copy=True), requires_grad=True,
                                    dtype=dtype or p.data.dtype)
        for n, s in self.buffers.items():
            b = BatchNormState(len(s.mean), s.momentum, s.eps)
            b.mean, b.var = s.mean.copy(), s.var.copy()
            out.buffers[n] = b
        return out

    def equals(self, other: "ParamStore") -> bool:
        if list(self.params) != list(other.params) or list(self.buffers) != list(other.buffers):
            return False
        same = all(np.array_equal(self.params[n].data, other.params[n].data) for n in self.params)
        return same and all(
            np.array_equal(self.buffers[n].mean, other.buffers[n].mean)
            and np.array_equal(self.buffers[n].var, other.buffers[n].var) for n in self.buffers)


# initialization ----------------------------------------------------------------------

class _Init:
    def __init__(self, store: ParamStore, seed: int):
        self.store = store
        self.rng = np.random.default_rng(seed)

    def uniform(self, name, shape, fan_in):
        bound = np.sqrt(1.0 / fan_in)
        self.store.add(name, self.rng.uniform(-bound, bound, shape).astype(np.float32))

    def zeros(self, name, shape):
        self.store.add(name, np.zeros(shape, dtype=np.float32))

    def ones(self, name, shape):
        self.store.add(name, np.ones(shape, dtype=np.float32))

    def linear(self, prefix, din, dout, bias=True):
        self.uniform(f"{prefix}.weight", (dout, din), din)
        if bias:
            self.zeros(f"{prefix}.bias", (dout,))

    def conv(self, prefix, cin, cout, kshape):
        fan_in = cin * int(np.prod(kshape))
        self.uniform(f"{prefix}.weight", (cout, cin) + tuple(kshape), fan_in)
        self.zeros(f"{prefix}.bias", (cout,))

    def batchnorm(self, prefix, ch):
        self.ones(f"{prefix}.gamma", (ch,))
        self.zeros(f"{prefix}.beta", (ch,))
        self.store.buffers[prefix] = BatchNormState(ch)

    def lstm(self, prefix, din, hidden):
        self.uniform(f"{prefix}.w_ih", (4 * hidden, din), din)
        self.uniform(f"{prefix}.w_hh", (4 * hidden, hidden), hidden)
        self.zeros(f"{prefix}.bias", (4 * hidden,))


def _conv_padding(k: int) -> int:
    return (k - 1) // 2


def _reduction_padding(k: int) -> int:
    # each reduction conv shortens the time axis by exactly 2
    return (k - 3) // 2


def _init_conv(spec: ModelSpec, init: _Init) -> None:
    e, k = spec.embed_dim, spec.kernel_size
    init.linear("embed", 2, e)
    if spec.social.kind != "none":
        init.linear("social_embed", spec.social.size, e)
    if spec.positional_embedding:
        init.uniform("pos_embed.weight", (spec.obs_len, e), e)
    ch = spec.resolved_channels()
    kshape = (k, k) if spec.family == "conv2d" else (k,)
    for i, (cin, cout) in enumerate(ch):
        if spec.transpose_conv and i == spec.pre_layers:
            init.uniform("tconv.weight", (cin, cout, spec.tconv_kernel), cin * spec.tconv_kernel)
            init.zeros("tconv.bias", (cout,))
        else:
            init.conv(f"conv{i}", cin, cout, kshape)
        if spec.uses_batchnorm:
            init.batchnorm(f"bn{i}", cout)
    if spec.family == "conv2d":
        feat = e - (4 if spec.symmetric_reduction else 0)
    else:
        feat = ch[-1][1]
    init.linear("out", feat, 2)


def _init_lstm(spec: ModelSpec, init: _Init, prefix: str = "", social: bool = True, head: bool = True) -> None:
    e, h = spec.embed_dim, spec.lstm_hidden
    init.linear(f"{prefix}embed", 2, e)
    if social and spec.social.kind != "none":
        init.linear(f"{prefix}social_embed", spec.social.size, e)
    init.lstm(f"{prefix}lstm", e, h)
    if head:
        init.linear(f"{prefix}out1", h, spec.out_hidden)
        init.linear(f"{prefix}out2", spec.out_hidden, 2)


# building blocks ------------------------------------------------------------------------

def _fc(params: ParamStore, prefix: str, x: NdArray) -> NdArray:
    return nm.fc_apply(x, params[f"{prefix}.weight"], params.params.get(f"{prefix}.bias"))


def fuse_social(pos_embed: NdArray, social_vec, params: ParamStore, prefix: str = "social_embed") -> NdArray:
    """Embed social features with their own affine layer and add them to the position embedding."""
    social_vec = nm.as_array(social_vec) if not isinstance(social_vec, NdArray) else social_vec
    w = params[f"{prefix}.weight"]
    if social_vec.shape[-1] != w.shape[1]:
        raise nm.DimensionError(f"social features {social_vec.shape} do not conform to {prefix} {w.shape}")
    emb = nm.fc_apply(social_vec, w, params[f"{prefix}.bias"])
    if emb.shape != pos_embed.shape:
        raise nm.DimensionError(f"social embedding {emb.shape} vs position embedding {pos_embed.shape}")
    return nm.add(pos_embed, emb)


def _as_input(x, dtype) -> NdArray:
    if isinstance(x, NdArray):
        return x
    return NdArray(np.asarray(x, dtype=dtype), dtype=dtype)


def _check_inputs(spec: ModelSpec, obs: NdArray, social: NdArray | None) -> None:
    if obs.ndim != 3 or obs.shape[1:] != (spec.obs_len, 2):
        raise nm.DimensionError(f"obs must be (B, {spec.obs_len}, 2), got {obs.shape}")
    if spec.social.kind != "none":
        want = (obs.shape[0], spec.obs_len, spec.social.size)
        if social is None or social.shape != want:
            raise nm.DimensionError(f"social features must be {want}, got {None if social is None else social.shape}")


def _embed_sequence(spec: ModelSpec, params: ParamStore, obs: NdArray, social: NdArray | None) -> NdArray:
    e = _fc(params, "embed", obs)  # (B, T, E)
    if spec.social.kind != "none":
        e = fuse_social(e, social, params)
    if spec.positional_embedding:
        e = nm.add(e, params["pos_embed.weight"])
    return e


def _act(spec: ModelSpec, x: NdArray, last: bool) -> NdArray:
    if last or spec.activation == "none":
        return x
    return nm.relu_apply(x)


def _bn(spec, params, i, x, train):
    if not spec.uses_batchnorm:
        return x
    return nm.batchnorm_apply(x, params[f"bn{i}.gamma"], params[f"bn{i}.beta"], params.buffers[f"bn{i}"],
                              "train" if train else "eval")


def conv2d_forward(spec: ModelSpec, params: ParamStore, obs, social=None, train: bool = False,
                   trace: list | None = None) -> NdArray:
    """2D model: the embedded 64x8 matrix is treated as a one-channel image."""
    dtype = params["embed.weight"].data.dtype
    obs = _as_input(obs, dtype)
    social = None if social is None else _as_input(social, dtype)
    _check_inputs(spec, obs, social)
    B = obs.shape[0]
    k = spec.kernel_size
    p, pr = _conv_padding(k), _reduction_padding(k)
    e = _embed_sequence(spec, params, obs, social)
    x = nm.reshape(nm.transpose(e, (0, 2, 1)), (B, 1, spec.embed_dim, spec.obs_len))
    ch = spec.resolved_channels()
    n = len(ch)
    for i in range(n):
        if i == spec.pre_layers:
            x = nm.upsample2x_time(x)
            if trace is not None:
                trace.append(("upsample", x.shape))
        reducing = spec.pre_layers <= i < spec.pre_layers + 2
        if reducing:
            pad = (pr, pr) if spec.symmetric_reduction else (p, pr)
        else:
            pad = (p, p)
        x = nm.conv2d_apply(x, params[f"conv{i}.weight"], params[f"conv{i}.bias"], pad)
        x = _bn(spec, params, i, x, train)
        x = _act(spec, x, last=i == n - 1)
        if trace is not None:
            trace.append((f"conv{i}", x.shape))
    F, T = x.shape[2], x.shape[3]
    x = nm.transpose(nm.reshape(x, (B, F, T)), (0, 2, 1))
    return _fc(params, "out", x)


def conv1d_forward(spec: ModelSpec, params: ParamStore, obs, social=None, train: bool = False,
                   trace: list | None = None) -> NdArray:
    """1D model: the embedded matrix is treated as E channels of length 8."""
    dtype = params["embed.weight"].data.dtype
    obs = _as_input(obs, dtype)
    social = None if social is None else _as_input(social, dtype)
    _check_inputs(spec, obs, social)
    k = spec.kernel_size
    p, pr = _conv_padding(k), _reduction_padding(k)
    x = nm.transpose(_embed_sequence(spec, params, obs, social), (0, 2, 1))  # (B, E, T)
    ch = spec.resolved_channels()
    n = len(ch)
    for i in range(n):
        last = i == n - 1
        if spec.transpose_conv and i == spec.pre_layers:
            x = nm.transpose_conv1d_apply(x, params["tconv.weight"], params["tconv.bias"], 1, 0)
            x = _act(spec, _bn(spec, params, i, x, train), last)
            if trace is not None:
                trace.append(("tconv", x.shape))
            continue
        if not spec.transpose_conv and i == spec.pre_layers:
            x = nm.upsample2x_time(x)
            if trace is not None:
                trace.append(("upsample", x.shape))
        reducing = not spec.transpose_conv and spec.pre_layers <= i < spec.pre_layers + 2
        y = nm.conv1d_apply(x, params[f"conv{i}.weight"], params[f"conv{i}.bias"], pr if reducing else p)
        y = _act(spec, _bn(spec, params, i, y, train), last)
        if spec.residual:
            skip = x
            if y.shape[-1] != x.shape[-1]:
                trim = (x.shape[-1] - y.shape[-1]) // 2
                skip = nm.getitem(x, (slice(None), slice(None), slice(trim, x.shape[-1] - trim)))
            y = nm.add(skip, y)
        x = y
        if trace is not None:
            trace.append((f"conv{i}", x.shape))
    return _fc(params, "out", nm.transpose(x, (0, 2, 1)))


def _zeros_state(B: int, H: int, dtype) -> tuple[NdArray, NdArray]:
    return NdArray(np.zeros((B, H), dtype=dtype), dtype=dtype), NdArray(np.zeros((B, H), dtype=dtype), dtype=dtype)


def _lstm_cell(params, prefix, x, h, c):
    return nm.lstm_step(x, h, c, params[f"{prefix}lstm.w_ih"], params[f"{prefix}lstm.w_hh"],
                        params[f"{prefix}lstm.bias"])


def _head(params, prefix, h):
    return _fc(params, f"{prefix}out2", _fc(params, f"{prefix}out1", h))


def _step_input(arr: NdArray, t: int) -> NdArray:
    if arr.requires_grad:
        return nm.getitem(arr, (slice(None), t))
    return NdArray(arr.data[:, t], dtype=arr.data.dtype)


def _encode(spec, params, prefix, obs, social, social_prefix):
    dtype = obs.data.dtype
    h, c = _zeros_state(obs.shape[0], spec.lstm_hidden, dtype)
    for t in range(spec.obs_len):
        e = _fc(params, f"{prefix}embed", _step_input(obs, t))
        if spec.social.kind != "none":
            e = fuse_social(e, _step_input(social, t), params, social_prefix)
        h, c = _lstm_cell(params, prefix, e, h, c)
    return h, c


def _decode(spec, params, prefix, h, c, first_pred=None, first_input=None):
    preds = []
    if first_pred is None:
        e = _fc(params, f"{prefix}embed", first_input)
        h, c = _lstm_cell(params, prefix, e, h, c)
        first_pred = _head(params, prefix, h)
    pred = first_pred
    preds.append(pred)
    for _ in range(spec.pred_len - 1):
        e = _fc(params, f"{prefix}embed", pred)
        h, c = _lstm_cell(params, prefix, e, h, c)
        pred = _head(params, prefix, h)
        preds.append(pred)
    return nm.stack(preds, axis=1)


def lstm_forward(spec: ModelSpec, params: ParamStore, obs, social=None, train: bool = False) -> NdArray:
    """Teacher-forced over the observations, then fed its own predictions."""
    dtype = params["embed.weight"].data.dtype
    obs = _as_input(obs, dtype)
    social = None if social is None else _as_input(social, dtype)
    _check_inputs(spec, obs, social)
    h, c = _encode(spec, params, "", obs, social, "social_embed")
    return _decode(spec, params, "", h, c, first_pred=_head(params, "", h))


def encdec_encode(spec: ModelSpec, params: ParamStore, obs, social=None) -> tuple[NdArray, NdArray]:
    dtype = params["enc.embed.weight"].data.dtype
    obs = _as_input(obs, dtype)
    social = None if social is None else _as_input(social, dtype)
    _check_inputs(spec, obs, social)
    return _encode(spec, params, "enc.", obs, social, "enc.social_embed")


def encdec_decode(spec: ModelSpec, params: ParamStore, h: NdArray, c: NdArray, last_obs) -> NdArray:
    """Decoder starts from the encoder state and the last observed position."""
    dtype = params["dec.embed.weight"].data.dtype
    return _decode(spec, params, "dec.", h, c, first_input=_as_input(last_obs, dtype))


def encdec_forward(spec: ModelSpec, params: ParamStore, obs, social=None, train: bool = False) -> NdArray:
    dtype = params["enc.embed.weight"].data.dtype
    obs = _as_input(obs, dtype)
    h, c = encdec_encode(spec, params, obs, social)
    return encdec_decode(spec, params, h, c, _step_input(obs, spec.obs_len - 1))


_FORWARDS = {
    "conv1d": conv1d_forward,
    "conv2d": conv2d_forward,
    "lstm": lstm_forward,
    "encdec": encdec_forward,
}


def init_params(spec: ModelSpec, seed: int = 0) -> ParamStore:
    spec.validate()
    store = ParamStore()
    init = _Init(store, seed)
    if spec.family in ("conv1d", "conv2d"):
        _init_conv(spec, init)
    elif spec.family == "lstm":
        _init_lstm(spec, init)
    else:
        _init_lstm(spec, init, "enc.", social=True, head=False)
        _init_lstm(spec, init, "dec.", social=False, head=True)
    return store


def forward_fn(spec: ModelSpec) -> Callable[..., NdArray]:
    return functools.partial(_FORWARDS[spec.family], spec)


def build_model(spec: ModelSpec, seed: int = 0) -> tuple[ParamStore, Callable[..., NdArray]]:
    """Initialize parameters for ``spec`` and return them with the bound forward.

    The forward is called as ``forward(params, obs, social=None, train=False)``.
    """
    return init_params(spec, seed), forward_fn(spec)


def predict_array(spec: ModelSpec, params: ParamStore, obs: np.ndarray, social: np.ndarray | None = None,
                  batch_size: int = 256) -> np.ndarray:
    """Eval-mode inference without graph recording."""
    fwd = forward_fn(spec)
    out = []
    with nm.no_grad():
        for b0 in range(0, len(obs), batch_size):
            s = None if social is None else social[b0:b0 + batch_size]
            out.append(fwd(params, obs[b0:b0 + batch_size], s, train=False).data)
    if not out:
        return np.zeros((0, spec.pred_len, 2), dtype=np.float32)
    return np.concatenate(out)
