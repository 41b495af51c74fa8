"""The class generator: two convolutional encoders, a learnable weighted
fusion of their hidden vectors, and two fully-connected decoders.

Encoder node:  h = BN(x);  x' = act(Conv_k(Conv_1(h) + R(h)))
    where R is identity, or a 1x1 projection when the channel count changes.
Decoder node:  n = LN(s);  s' = Linear_2(act(Linear_1(n)) + n)
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import BatchNormState, Tensor
from .dsp import idwt_db6
from .errors import DataError


@dataclass(frozen=True)
class GeneratorConfig:
    k: int = 10
    length: int = 1255
    hidden: int = 300
    channels: int = 16
    enc_nodes: int = 6
    dec_nodes: int = 5
    kernel: int = 7
    stride: int = 2
    slope: float = 0.01
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    ln_eps: float = 1e-5

    @property
    def padding(self) -> int:
        return self.kernel // 2

    def encoder_lengths(self) -> list[int]:
        lengths = [self.length]
        for _ in range(self.enc_nodes):
            lengths.append(ag.conv_output_length(lengths[-1], self.kernel, self.stride, self.padding))
        return lengths

    @property
    def flat_features(self) -> int:
        return self.channels * self.encoder_lengths()[-1]

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _uniform(rng: np.random.Generator, shape, fan_in: int, gain: float, dtype) -> np.ndarray:
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class GeneratorParams:
    """All trainable tensors of one generator plus batch-norm running state."""

    BRANCHES = ("ca", "cd")

    def __init__(self, cfg: GeneratorConfig, tensors: dict[str, Tensor], bn: dict[str, BatchNormState]):
        self.cfg = cfg
        self.tensors = tensors
        self.bn = bn

    @classmethod
    def init(cls, cfg: GeneratorConfig, rng: np.random.Generator, dtype=np.float64) -> "GeneratorParams":
        # weights feeding a leaky-ReLU get the He gain sqrt(2); others unit gain
        he = np.sqrt(2.0)
        t: dict[str, np.ndarray] = {}
        bn: dict[str, BatchNormState] = {}
        for br in cls.BRANCHES:
            cin = cfg.k
            for i in range(cfg.enc_nodes):
                p = f"enc_{br}.{i}."
                c = cfg.channels
                t[p + "bn.gamma"] = np.ones(cin, dtype)
                t[p + "bn.beta"] = np.zeros(cin, dtype)
                bn[p + "bn"] = BatchNormState(cin, cfg.bn_momentum, cfg.bn_eps)
                t[p + "conv1.w"] = _uniform(rng, (c, cin, 1), cin, 1.0, dtype)
                t[p + "conv1.b"] = np.zeros(c, dtype)
                if cin != c:
                    t[p + "res.w"] = _uniform(rng, (c, cin, 1), cin, 1.0, dtype)
                t[p + "conv2.w"] = _uniform(rng, (c, c, cfg.kernel), c * cfg.kernel, he, dtype)
                t[p + "conv2.b"] = np.zeros(c, dtype)
                cin = c
            t[f"proj_{br}.w"] = _uniform(rng, (cfg.hidden, cfg.flat_features), cfg.flat_features, 1.0, dtype)
            t[f"proj_{br}.b"] = np.zeros(cfg.hidden, dtype)
        t["omega1"] = np.asarray(0.5, dtype)
        t["omega2"] = np.asarray(0.5, dtype)
        for br in cls.BRANCHES:
            for i in range(cfg.dec_nodes):
                p = f"dec_{br}.{i}."
                out = cfg.length if i == cfg.dec_nodes - 1 else cfg.hidden
                t[p + "lin1.w"] = _uniform(rng, (cfg.hidden, cfg.hidden), cfg.hidden, he, dtype)
                t[p + "lin1.b"] = np.zeros(cfg.hidden, dtype)
                t[p + "lin2.w"] = _uniform(rng, (out, cfg.hidden), cfg.hidden, 1.0, dtype)
                t[p + "lin2.b"] = np.zeros(out, dtype)
        tensors = {name: Tensor(arr, requires_grad=True, name=name) for name, arr in t.items()}
        return cls(cfg, tensors, bn)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def n_parameters(self) -> int:
        return sum(t.numel for t in self.tensors.values())

    @property
    def dtype(self):
        return self.tensors["omega1"].data.dtype

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "GeneratorParams":
        tensors = {n: Tensor(t.data.copy(), requires_grad=True, name=n) for n, t in self.tensors.items()}
        return GeneratorParams(self.cfg, tensors, {n: s.copy() for n, s in self.bn.items()})


def parameter_count(cfg: GeneratorConfig) -> int:
    """Closed-form count of trainable scalars for a configuration."""
    n = 0
    for _ in GeneratorParams.BRANCHES:
        cin = cfg.k
        for _ in range(cfg.enc_nodes):
            c = cfg.channels
            n += 2 * cin + (c * cin + c) + (c * cin if cin != c else 0) + (c * c * cfg.kernel + c)
            cin = c
        n += cfg.hidden * cfg.flat_features + cfg.hidden
        for i in range(cfg.dec_nodes):
            out = cfg.length if i == cfg.dec_nodes - 1 else cfg.hidden
            n += cfg.hidden * cfg.hidden + cfg.hidden + out * cfg.hidden + out
    return n + 2


def _as_input(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def encoder_node(x: Tensor, params: GeneratorParams, prefix: str, training: bool) -> Tensor:
    cfg = params.cfg
    p = params.tensors
    h = ag.batchnorm(x, p[prefix + "bn.gamma"], p[prefix + "bn.beta"], params.bn[prefix + "bn"], training)
    inner = ag.conv1d(h, p[prefix + "conv1.w"], p[prefix + "conv1.b"])
    skip = ag.conv1d(h, p[prefix + "res.w"]) if prefix + "res.w" in p else h
    z = ag.conv1d(ag.add(inner, skip), p[prefix + "conv2.w"], p[prefix + "conv2.b"], cfg.stride, cfg.padding)
    return ag.leaky_relu(z, cfg.slope)


def encoder_forward(s, params: GeneratorParams, branch: str, training: bool = False) -> Tensor:
    """(k, L) or (B, k, L) neighbour coefficients -> (hidden,) or (B, hidden)."""
    cfg = params.cfg
    x = _as_input(s, params.dtype)
    if x.shape[-2:] != (cfg.k, cfg.length):
        raise DataError(f"encoder expects (..., {cfg.k}, {cfg.length}) input, got {x.shape}")
    for i in range(cfg.enc_nodes):
        x = encoder_node(x, params, f"enc_{branch}.{i}.", training)
    flat = (x.shape[0], cfg.flat_features) if x.ndim == 3 else (cfg.flat_features,)
    x = ag.reshape(x, flat)
    return ag.linear(x, params[f"proj_{branch}.w"], params[f"proj_{branch}.b"])


def decoder_node(s: Tensor, params: GeneratorParams, prefix: str) -> Tensor:
    cfg = params.cfg
    p = params.tensors
    n = ag.layernorm(s, cfg.ln_eps)
    h = ag.leaky_relu(ag.linear(n, p[prefix + "lin1.w"], p[prefix + "lin1.b"]), cfg.slope)
    return ag.linear(ag.add(h, n), p[prefix + "lin2.w"], p[prefix + "lin2.b"])


def decoder_forward(hidden: Tensor, params: GeneratorParams, branch: str) -> Tensor:
    cfg = params.cfg
    if hidden.shape[-1] != cfg.hidden:
        raise DataError(f"decoder expects hidden width {cfg.hidden}, got {hidden.shape}")
    s = hidden
    for i in range(cfg.dec_nodes):
        s = decoder_node(s, params, f"dec_{branch}.{i}.")
    return s


@dataclass
class GeneratorOutput:
    g_ca: Tensor
    g_cd: Tensor


def generator_forward(s_ca, s_cd, params: GeneratorParams, training: bool = False) -> GeneratorOutput:
    """Neighbour coefficients -> generated target coefficients (G_cA, G_cD).

    The target electrode's own coefficients are never an input.
    """
    enc_a = encoder_forward(s_ca, params, "ca", training)
    enc_d = encoder_forward(s_cd, params, "cd", training)
    hidden = ag.scale_sum(enc_a, enc_d, params["omega1"], params["omega2"])
    return GeneratorOutput(decoder_forward(hidden, params, "ca"), decoder_forward(hidden, params, "cd"))


def reconstruct_time(out: GeneratorOutput, n: int) -> np.ndarray:
    return idwt_db6(out.g_ca.data, out.g_cd.data, n)


def loss(out: GeneratorOutput, o_ca, o_cd) -> Tensor:
    """MSE(G_cA, O_cA) + MSE(G_cD, O_cD)."""
    dtype = out.g_ca.data.dtype
    la = ag.mse(out.g_ca, Tensor(np.asarray(o_ca, dtype=dtype)))
    ld = ag.mse(out.g_cd, Tensor(np.asarray(o_cd, dtype=dtype)))
    return ag.add(la, ld)
