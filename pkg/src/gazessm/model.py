"""The full classifier: shared input projection, two independent
directional stacks of selective-SSM blocks, per-direction additive
attention pooling, and a normalized linear head.

The backward branch is literally flip -> stack -> flip, with its own
parameters; nothing is shared between directions except the input
projection.
"""
from __future__ import annotations

import json
import struct
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, CorruptionError, NumericError
from .numerics.tensor import (
    Tensor,
    add,
    concat,
    flip,
    layer_norm,
    matmul,
    mul,
    no_grad,
    reshape,
    sigmoid,
    softmax,
    tanh,
    tsum,
)
from .ssm import BlockParams, SsmParams, block_forward

_CKPT_MAGIC = b"GZSM"
_CKPT_VERSION = 1


@dataclass
class ModelConfig:
    input_dim: int = 30
    d_model: int = 128
    d_state: int = 16
    d_conv: int = 4
    expand: int = 2
    layers_per_direction: int = 4
    dropout: float = 0.1
    seed: int = 0

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    def validate(self):
        for name in ("input_dim", "d_model", "d_state", "d_conv", "expand", "layers_per_direction"):
            if getattr(self, name) < 1:
                raise ContractError(f"ModelConfig.{name} must be positive")
        if not (0.0 <= self.dropout < 1.0):
            raise ContractError("ModelConfig.dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "d_model": self.d_model,
            "d_state": self.d_state,
            "d_conv": self.d_conv,
            "expand": self.expand,
            "layers_per_direction": self.layers_per_direction,
            "dropout": self.dropout,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class PoolParams:
    """Additive attention with a learned query vector."""

    w_a: Tensor  # (d_model, d_model)
    b_a: Tensor  # (d_model,)
    query: Tensor  # (d_model, 1)

    def tensors(self, prefix=""):
        return [
            (prefix + "w_a", self.w_a),
            (prefix + "b_a", self.b_a),
            (prefix + "query", self.query),
        ]


@dataclass
class ModelParams:
    """All trainable tensors, in a fixed declared order (see tensors())."""

    config: ModelConfig
    w_in: Tensor  # (input_dim, d_model)
    b_in: Tensor  # (d_model,)
    fwd_blocks: list
    bwd_blocks: list
    attn_fwd: PoolParams
    attn_bwd: PoolParams
    head_ln_gamma: Tensor  # (2*d_model,)
    head_ln_beta: Tensor  # (2*d_model,)
    head_w: Tensor  # (2*d_model, 1)
    head_b: Tensor  # (1,)

    def tensors(self):
        """(name, tensor) pairs in checkpoint order."""
        out = [("w_in", self.w_in), ("b_in", self.b_in)]
        for i, blk in enumerate(self.fwd_blocks):
            out += blk.tensors(f"fwd.{i}.")
        for i, blk in enumerate(self.bwd_blocks):
            out += blk.tensors(f"bwd.{i}.")
        out += self.attn_fwd.tensors("attn_fwd.")
        out += self.attn_bwd.tensors("attn_bwd.")
        out += [
            ("head_ln_gamma", self.head_ln_gamma),
            ("head_ln_beta", self.head_ln_beta),
            ("head_w", self.head_w),
            ("head_b", self.head_b),
        ]
        return out

    def parameter_list(self):
        return [t for _, t in self.tensors()]

    def n_parameters(self) -> int:
        return sum(t.size for t in self.parameter_list())

    def astype(self, dtype) -> "ModelParams":
        """Deep copy with every tensor cast to ``dtype``."""
        mapping = {name: Tensor(t.data.astype(dtype), requires_grad=True) for name, t in self.tensors()}
        return _params_from_mapping(self.config, mapping)

    def copy(self) -> "ModelParams":
        return self.astype(self.w_in.data.dtype)

    def snapshot(self) -> dict:
        """Raw data arrays keyed by name (for best-epoch restore)."""
        return {name: t.data.copy() for name, t in self.tensors()}

    def restore(self, snap: dict):
        for name, t in self.tensors():
            t.data = snap[name].copy()


def _params_from_mapping(config: ModelConfig, m: dict) -> ModelParams:
    def block(prefix):
        return BlockParams(
            ln_gamma=m[prefix + "ln_gamma"],
            ln_beta=m[prefix + "ln_beta"],
            w_sig=m[prefix + "w_sig"],
            w_gate=m[prefix + "w_gate"],
            conv_kernel=m[prefix + "conv_kernel"],
            ssm=SsmParams(
                a_log=m[prefix + "ssm.a_log"],
                skip=m[prefix + "ssm.skip"],
                w_b=m[prefix + "ssm.w_b"],
                w_c=m[prefix + "ssm.w_c"],
                w_dt=m[prefix + "ssm.w_dt"],
                b_dt=m[prefix + "ssm.b_dt"],
            ),
            w_out=m[prefix + "w_out"],
        )

    n_layers = config.layers_per_direction
    return ModelParams(
        config=config,
        w_in=m["w_in"],
        b_in=m["b_in"],
        fwd_blocks=[block(f"fwd.{i}.") for i in range(n_layers)],
        bwd_blocks=[block(f"bwd.{i}.") for i in range(n_layers)],
        attn_fwd=PoolParams(m["attn_fwd.w_a"], m["attn_fwd.b_a"], m["attn_fwd.query"]),
        attn_bwd=PoolParams(m["attn_bwd.w_a"], m["attn_bwd.b_a"], m["attn_bwd.query"]),
        head_ln_gamma=m["head_ln_gamma"],
        head_ln_beta=m["head_ln_beta"],
        head_w=m["head_w"],
        head_b=m["head_b"],
    )


def init_params(cfg: ModelConfig, dtype=np.float32) -> ModelParams:
    """Deterministic initialization from cfg.seed.

    Linear weights are uniform in ±1/sqrt(fan_in).  The diagonal state
    matrix starts at -(1..d_state) per channel (stored as logs) and the
    step-size bias is drawn so softplus of it lands in [1e-3, 0.1].
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    d_in, d_model, d_inner = cfg.input_dim, cfg.d_model, cfg.d_inner
    d_state, d_conv = cfg.d_state, cfg.d_conv

    def lin(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    def make_block():
        a_log = np.tile(np.log(np.arange(1, d_state + 1, dtype=np.float64)), (d_inner, 1))
        dt = np.exp(rng.uniform(np.log(1e-3), np.log(0.1), d_inner))
        b_dt = np.log(np.expm1(dt))  # inverse softplus
        return BlockParams(
            ln_gamma=ones(d_model),
            ln_beta=zeros(d_model),
            w_sig=lin(d_model, (d_model, d_inner)),
            w_gate=lin(d_model, (d_model, d_inner)),
            conv_kernel=lin(d_conv, (d_conv, d_inner)),
            ssm=SsmParams(
                a_log=Tensor(a_log.astype(dtype), requires_grad=True),
                skip=ones(d_inner),
                w_b=lin(d_inner, (d_inner, d_state)),
                w_c=lin(d_inner, (d_inner, d_state)),
                w_dt=lin(d_inner, (d_inner, d_inner)),
                b_dt=Tensor(b_dt.astype(dtype), requires_grad=True),
            ),
            w_out=lin(d_inner, (d_inner, d_model)),
        )

    def make_pool():
        return PoolParams(
            w_a=lin(d_model, (d_model, d_model)),
            b_a=zeros(d_model),
            query=lin(d_model, (d_model, 1)),
        )

    return ModelParams(
        config=cfg,
        w_in=lin(d_in, (d_in, d_model)),
        b_in=zeros(d_model),
        fwd_blocks=[make_block() for _ in range(cfg.layers_per_direction)],
        bwd_blocks=[make_block() for _ in range(cfg.layers_per_direction)],
        attn_fwd=make_pool(),
        attn_bwd=make_pool(),
        head_ln_gamma=ones(2 * d_model),
        head_ln_beta=zeros(2 * d_model),
        head_w=lin(2 * d_model, (2 * d_model, 1)),
        head_b=zeros(1),
    )


@contextmanager
def _stage(name: str):
    """Re-raise numeric failures with the pipeline stage attached."""
    try:
        yield
    except NumericError as e:
        raise NumericError(f"[stage: {name}] {e}") from e


def run_stack(h: Tensor, blocks, dropout_rate, training, rng):
    for blk in blocks:
        h = block_forward(h, blk, dropout_rate=dropout_rate, training=training, rng=rng)
    return h


def branch_forward(
    z: Tensor,
    direction: str,
    params: ModelParams,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """One directional stack on (B, T, input_dim) input.

    forward: project, run the forward blocks.  backward: project, flip
    time, run the backward blocks, flip back.
    """
    if direction not in ("forward", "backward"):
        raise ContractError(f"unknown direction {direction!r}")
    with _stage("input_projection"):
        h0 = add(matmul(z, params.w_in), params.b_in)
    drop = params.config.dropout
    if direction == "forward":
        with _stage("forward_stack"):
            return run_stack(h0, params.fwd_blocks, drop, training, rng)
    with _stage("backward_stack"):
        h = flip(h0, axis=1)
        h = run_stack(h, params.bwd_blocks, drop, training, rng)
        return flip(h, axis=1)


def attn_pool(h: Tensor, pool: PoolParams):
    """Additive attention pooling over time.

    Returns (context (B, D), weights (B, T)); the weights are a softmax,
    so they are nonnegative and sum to one per sequence.
    """
    scores = matmul(tanh(add(matmul(h, pool.w_a), pool.b_a)), pool.query)  # (B, T, 1)
    scores = reshape(scores, scores.shape[:-1])
    alpha = softmax(scores, axis=-1)  # (B, T)
    weighted = mul(h, reshape(alpha, alpha.shape + (1,)))
    context = tsum(weighted, axis=1)  # (B, D)
    return context, alpha


def classify(c_fwd: Tensor, c_bwd: Tensor, params: ModelParams):
    """Normalized linear head on the concatenated context.

    Returns (probability, logit); train on the logit, threshold the
    probability.
    """
    c = concat([c_fwd, c_bwd], axis=-1)  # (B, 2D)
    normed = layer_norm(c, params.head_ln_gamma, params.head_ln_beta)
    logit = add(reshape(matmul(normed, params.head_w), (c.shape[0],)), params.head_b)
    return sigmoid(logit), logit


def forward_batch(
    z: Tensor,
    params: ModelParams,
    training: bool = False,
    rng: np.random.Generator | None = None,
):
    """Full forward pass on a (B, T, input_dim) batch.

    Returns (prob, logit, alpha_fwd, alpha_bwd) tensors.
    """
    h_fwd = branch_forward(z, "forward", params, training, rng)
    h_bwd = branch_forward(z, "backward", params, training, rng)
    with _stage("attention_pool"):
        c_fwd, alpha_fwd = attn_pool(h_fwd, params.attn_fwd)
        c_bwd, alpha_bwd = attn_pool(h_bwd, params.attn_bwd)
    with _stage("classifier_head"):
        prob, logit = classify(c_fwd, c_bwd, params)
    return prob, logit, alpha_fwd, alpha_bwd


def predict_window(z: np.ndarray, params: ModelParams, training: bool = False):
    """Probability and per-direction attention weights for one window.

    ``z`` is a (T, input_dim) array; inference runs with the graph
    disabled.
    """
    zt = Tensor(np.asarray(z, dtype=params.w_in.data.dtype)[None])
    if training:
        prob, _, af, ab = forward_batch(zt, params, training=True)
    else:
        with no_grad():
            prob, _, af, ab = forward_batch(zt, params, training=False)
    return float(prob.data[0]), af.data[0].copy(), ab.data[0].copy()


def predict_probs(windows_z: np.ndarray, params: ModelParams, batch_size: int = 256) -> np.ndarray:
    """Inference probabilities for an (N, T, input_dim) stack of windows."""
    dtype = params.w_in.data.dtype
    out = []
    with no_grad():
        for i in range(0, len(windows_z), batch_size):
            zt = Tensor(np.asarray(windows_z[i : i + batch_size], dtype=dtype))
            prob, _, _, _ = forward_batch(zt, params, training=False)
            out.append(prob.data.copy())
    return np.concatenate(out) if out else np.zeros(0, dtype=np.float64)


# -- checkpoint format ---------------------------------------------------------
#
# magic "GZSM" | uint32 version | uint32 header length | header JSON (utf-8)
# | concatenated little-endian float32 blobs in tensors() order.


def save_checkpoint(params: ModelParams, path):
    names = []
    shapes = []
    blobs = []
    for name, t in params.tensors():
        names.append(name)
        shapes.append(list(t.shape))
        blobs.append(np.ascontiguousarray(t.data.astype("<f4")))
    header = json.dumps(
        {"config": params.config.to_dict(), "tensors": names, "shapes": shapes},
        sort_keys=True,
    ).encode("utf-8")
    payload = b"".join(b.tobytes() for b in blobs)
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<II", _CKPT_VERSION, len(header)))
        f.write(header)
        f.write(payload)


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _CKPT_MAGIC:
        raise CorruptionError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != _CKPT_VERSION:
        raise CorruptionError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    config = ModelConfig.from_dict(header["config"])
    offset = 12 + hlen
    mapping = {}
    for name, shape in zip(header["tensors"], header["shapes"]):
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        blob = raw[offset : offset + nbytes]
        if len(blob) != nbytes:
            raise CorruptionError(f"{path}: truncated blob for tensor {name}")
        arr = np.frombuffer(blob, dtype="<f4").reshape(shape).astype(np.float32)
        mapping[name] = Tensor(arr, requires_grad=True)
        offset += nbytes
    if offset != len(raw):
        raise CorruptionError(f"{path}: {len(raw) - offset} trailing bytes")
    return _params_from_mapping(config, mapping)
