"""Causal transformer over interleaved (state, return-to-go, action) tokens.

With the ``(s, R, a)`` token order the hidden state at the state token of
step t has seen ``s_{<=t}, R_{<t}, a_{<t}`` and predicts the return-to-go;
the hidden state at the RTG token has additionally seen ``R_t`` and predicts
the action. The ``(R, s, a)`` order reproduces the classic decision
transformer, which reads the action off the state token and needs the RTG as
an input.
"""

from __future__ import annotations

import dataclasses
import io
import json
import math
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .auction import A_MAX, EPISODE_STEPS
from .errors import ConfigError, ContractError, LoadError, NumericError, ShapeError
from .numcore import DTYPE, Tensor, ops

ORDER_SRA = "sra"
ORDER_RSA = "rsa"
CHECKPOINT_MAGIC = b"RTGDTCK\x00"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 3
    n_heads: int = 2
    embed_dim: int = 64
    context_steps: int = 20
    state_dim: int = 6
    action_dim: int = 1
    max_timestep: int = EPISODE_STEPS
    quantile_lambda: float = 0.05
    dropout: float = 0.0
    a_max: float = A_MAX
    token_order: str = ORDER_SRA

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "embed_dim", "context_steps", "state_dim", "max_timestep"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.embed_dim % self.n_heads:
            raise ConfigError("embed_dim must be divisible by n_heads")
        if not 0.0 < self.quantile_lambda < 1.0:
            raise ConfigError("quantile_lambda must lie strictly inside (0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.action_dim != 1:
            raise ConfigError("only a single bid coefficient action is supported")
        if self.token_order not in (ORDER_SRA, ORDER_RSA):
            raise ConfigError(f"token_order must be {ORDER_SRA!r} or {ORDER_RSA!r}")
        if not self.a_max > 0:
            raise ConfigError("a_max must be > 0")


@dataclass
class TokenBatch:
    """Model inputs; ``rtgs`` are normalized and ``actions`` are raw coefficients."""

    states: np.ndarray  # (B, K, d_s)
    rtgs: np.ndarray  # (B, K, 1)
    actions: np.ndarray  # (B, K, 1)
    timesteps: np.ndarray  # (B, K) int
    pad_mask: Optional[np.ndarray] = None  # (B, K) bool, True = real

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=DTYPE)
        self.rtgs = np.asarray(self.rtgs, dtype=DTYPE)
        self.actions = np.asarray(self.actions, dtype=DTYPE)
        self.timesteps = np.asarray(self.timesteps, dtype=np.int64)
        if self.rtgs.ndim == 2:
            self.rtgs = self.rtgs[..., None]
        if self.actions.ndim == 2:
            self.actions = self.actions[..., None]
        if self.pad_mask is None:
            self.pad_mask = np.ones(self.timesteps.shape, dtype=bool)
        else:
            self.pad_mask = np.asarray(self.pad_mask, dtype=bool)
        B, K = self.timesteps.shape
        for name, arr, tail in (("states", self.states, None), ("rtgs", self.rtgs, 1), ("actions", self.actions, 1),
                                ("pad_mask", self.pad_mask, None)):
            if arr.shape[:2] != (B, K) or (tail is not None and arr.shape[2:] != (tail,)):
                raise ShapeError(f"{name} dims {arr.shape} and timesteps dims {(B, K)} disagree")

    @property
    def shape(self) -> tuple[int, int]:
        return self.timesteps.shape


@dataclass
class ModelOutput:
    rtg_pred: Optional[Tensor]  # (B, K, 1), normalized RTG units
    action_pred: Tensor  # (B, K, 1), fraction of a_max


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d = config.embed_dim

    def w(name, *dims, std=0.02):
        params[name] = Tensor(rng.normal(0.0, std, size=dims), requires_grad=True, name=name)

    def zeros(name, n):
        params[name] = Tensor(np.zeros(n), requires_grad=True, name=name)

    def ones(name, n):
        params[name] = Tensor(np.ones(n), requires_grad=True, name=name)

    params: dict[str, Tensor] = {}
    w("embed_state.w", config.state_dim, d, std=1.0 / math.sqrt(config.state_dim))
    zeros("embed_state.b", d)
    w("embed_rtg.w", 1, d, std=1.0)
    zeros("embed_rtg.b", d)
    w("embed_action.w", 1, d, std=1.0)
    zeros("embed_action.b", d)
    w("embed_timestep", config.max_timestep, d)
    ones("embed_ln.g", d)
    zeros("embed_ln.b", d)
    resid_std = 0.02 / math.sqrt(2 * config.n_layers)
    for i in range(config.n_layers):
        p = f"block{i}."
        ones(p + "ln1.g", d)
        zeros(p + "ln1.b", d)
        w(p + "attn.qkv.w", d, 3 * d)
        zeros(p + "attn.qkv.b", 3 * d)
        w(p + "attn.proj.w", d, d, std=resid_std)
        zeros(p + "attn.proj.b", d)
        ones(p + "ln2.g", d)
        zeros(p + "ln2.b", d)
        w(p + "mlp.fc.w", d, 4 * d)
        zeros(p + "mlp.fc.b", 4 * d)
        w(p + "mlp.proj.w", 4 * d, d, std=resid_std)
        zeros(p + "mlp.proj.b", d)
    ones("ln_f.g", d)
    zeros("ln_f.b", d)
    if config.token_order == ORDER_SRA:  # the (R, s, a) layout has no RTG head
        w("head_rtg.w", d, 1)
        zeros("head_rtg.b", 1)
    w("head_action.w", d, 1)
    zeros("head_action.b", 1)
    return params


def _linear(x: Tensor, params, name: str) -> Tensor:
    return ops.bias_add(ops.matmul(x, params[name + ".w"]), params[name + ".b"])


def _dropout(x: Tensor, p: float, rng) -> Tensor:
    if p <= 0 or rng is None:
        return x
    keep = (rng.random(x.dims) >= p).astype(DTYPE) / DTYPE(1.0 - p)
    return ops.mul(x, Tensor(keep))


def _check_finite(x: Tensor, where: str) -> None:
    if not np.all(np.isfinite(x.values)):
        raise NumericError(f"non-finite activation in {where}")


def attention_mask(pad_mask: np.ndarray, n_heads: int) -> np.ndarray:
    """(B, H, 3K, 3K) boolean mask: causal and restricted to real key tokens."""
    B, K = pad_mask.shape
    L = 3 * K
    causal = np.tril(np.ones((L, L), dtype=bool))
    keys = np.repeat(pad_mask, 3, axis=1)  # (B, L)
    m = causal[None, :, :] & keys[:, None, :]
    return np.ascontiguousarray(np.broadcast_to(m[:, None], (B, n_heads, L, L)))


def _block(h: Tensor, params, prefix: str, config: ModelConfig, mask: np.ndarray, rng) -> Tensor:
    B, L, d = h.dims
    H = config.n_heads
    hd = d // H
    x = ops.layernorm_lastdim(h, params[prefix + "ln1.g"], params[prefix + "ln1.b"])
    qkv = _linear(x, params, prefix + "attn.qkv")  # (B, L, 3d)
    qkv = ops.transpose(ops.reshape(qkv, (B, L, 3, H, hd)), (2, 0, 3, 1, 4))  # (3, B, H, L, hd)
    q = ops.reshape(ops.slice(qkv, 0, 0, 1), (B, H, L, hd))
    k = ops.reshape(ops.slice(qkv, 0, 1, 2), (B, H, L, hd))
    v = ops.reshape(ops.slice(qkv, 0, 2, 3), (B, H, L, hd))
    scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    att = ops.softmax_lastdim(scores, mask)
    att = _dropout(att, config.dropout, rng)
    y = ops.matmul(att, v)  # (B, H, L, hd)
    y = ops.reshape(ops.transpose(y, (0, 2, 1, 3)), (B, L, d))
    y = _dropout(_linear(y, params, prefix + "attn.proj"), config.dropout, rng)
    h = ops.add(h, y)
    x = ops.layernorm_lastdim(h, params[prefix + "ln2.g"], params[prefix + "ln2.b"])
    x = ops.gelu(_linear(x, params, prefix + "mlp.fc"))
    x = _dropout(_linear(x, params, prefix + "mlp.proj"), config.dropout, rng)
    return ops.add(h, x)


def forward(config: ModelConfig, params: dict[str, Tensor], batch: TokenBatch, rng=None) -> ModelOutput:
    """Run the transformer; pass ``rng`` only when dropout should be active."""
    B, K = batch.shape
    if batch.states.shape[2] != config.state_dim:
        raise ShapeError(f"states dims {batch.states.shape} and state_dim {config.state_dim} disagree")
    if K > config.context_steps:
        raise ShapeError(f"context of {K} steps exceeds context_steps {config.context_steps}")
    if batch.timesteps.size and (batch.timesteps.min() < 0 or batch.timesteps.max() >= config.max_timestep):
        raise ContractError(f"timesteps must lie in [0, {config.max_timestep})")
    d = config.embed_dim

    t_emb = ops.embed_lookup(params["embed_timestep"], batch.timesteps)  # (B, K, d)
    s_emb = ops.add(_linear(Tensor(batch.states), params, "embed_state"), t_emb)
    r_emb = ops.add(_linear(Tensor(batch.rtgs), params, "embed_rtg"), t_emb)
    a_emb = ops.add(_linear(Tensor(batch.actions / DTYPE(config.a_max)), params, "embed_action"), t_emb)
    if config.token_order == ORDER_SRA:
        tokens = (s_emb, r_emb, a_emb)
    else:
        tokens = (r_emb, s_emb, a_emb)
    h = ops.concat([ops.reshape(t, (B, K, 1, d)) for t in tokens], axis=2)
    h = ops.reshape(h, (B, 3 * K, d))
    h = ops.layernorm_lastdim(h, params["embed_ln.g"], params["embed_ln.b"])
    h = _dropout(h, config.dropout, rng)

    mask = attention_mask(batch.pad_mask, config.n_heads)
    for i in range(config.n_layers):
        h = _block(h, params, f"block{i}.", config, mask, rng)
        _check_finite(h, f"block {i}")
    h = ops.layernorm_lastdim(h, params["ln_f.g"], params["ln_f.b"])
    h = ops.reshape(h, (B, K, 3, d))

    if config.token_order == ORDER_SRA:
        at_state = ops.reshape(ops.slice(h, 2, 0, 1), (B, K, d))
        at_rtg = ops.reshape(ops.slice(h, 2, 1, 2), (B, K, d))
        rtg_pred = _linear(at_state, params, "head_rtg")
        action_pred = ops.sigmoid(_linear(at_rtg, params, "head_action"))
    else:
        at_state = ops.reshape(ops.slice(h, 2, 1, 2), (B, K, d))
        rtg_pred = None
        action_pred = ops.sigmoid(_linear(at_state, params, "head_action"))
    _check_finite(action_pred, "action head")
    return ModelOutput(rtg_pred=rtg_pred, action_pred=action_pred)


# losses -------------------------------------------------------------------------------------


def _mask_weights(pad_mask: np.ndarray, dims) -> tuple[Tensor, float]:
    m = np.broadcast_to(np.asarray(pad_mask, dtype=DTYPE)[..., None], dims)
    count = float(m.sum())
    return Tensor(np.ascontiguousarray(m)), max(count, 1.0)


def _as_target(target, dims) -> Tensor:
    arr = target.values if isinstance(target, Tensor) else np.asarray(target, dtype=DTYPE)
    if arr.shape != tuple(dims):
        raise ShapeError(f"prediction dims {tuple(dims)} and target dims {arr.shape} differ")
    return Tensor(arr)


def quantile_loss(lam: float, rtg_pred: Tensor, rtg_target, pad_mask=None) -> Tensor:
    """Masked mean of ``(1 - lam) * relu(R - pred) + lam * relu(pred - R)``.

    Minimized by the (1 - lam) quantile of the targets, so a small ``lam``
    pushes the prediction toward the largest returns seen.
    """
    if not 0.0 < lam < 1.0:
        raise ConfigError(f"quantile lambda must lie strictly inside (0, 1), got {lam}")
    target = _as_target(rtg_target, rtg_pred.dims)
    if pad_mask is None:
        pad_mask = np.ones(rtg_pred.dims[:-1], dtype=bool)
    weights, count = _mask_weights(pad_mask, rtg_pred.dims)
    under = ops.relu(ops.sub(target, rtg_pred))
    over = ops.relu(ops.sub(rtg_pred, target))
    per = ops.add(ops.mul(under, 1.0 - lam), ops.mul(over, lam))
    return ops.mul(ops.sum(ops.mul(per, weights)), 1.0 / count)


def masked_mse(pred: Tensor, target, pad_mask=None) -> Tensor:
    target = _as_target(target, pred.dims)
    if pad_mask is None:
        pad_mask = np.ones(pred.dims[:-1], dtype=bool)
    weights, count = _mask_weights(pad_mask, pred.dims)
    diff = ops.mul(ops.sub(pred, target), weights)
    return ops.mul(ops.sum(ops.mul(diff, diff)), 1.0 / count)


LOSS_MODES = ("rdt", "rhat", "bc", "dt_baseline")


def training_loss(mode: str, output: ModelOutput, batch: TokenBatch, lam: float = 0.05,
                  a_max: float = A_MAX) -> tuple[Tensor, dict[str, float]]:
    """Total loss and its per-term breakdown.

    ``rdt``: MSE on RTG + MSE on action. ``rhat``: quantile loss on RTG + MSE
    on action. ``bc`` and ``dt_baseline``: action MSE only. Actions are
    compared as fractions of ``a_max``; RTGs in normalized units.
    """
    if mode not in LOSS_MODES:
        raise ConfigError(f"unknown training mode {mode!r}")
    action_target = batch.actions / DTYPE(a_max)
    action_term = masked_mse(output.action_pred, action_target, batch.pad_mask)
    parts = {"action": action_term.item()}
    if mode in ("rdt", "rhat"):
        if output.rtg_pred is None:
            raise ConfigError(f"mode {mode!r} needs the (s, R, a) token order")
        if mode == "rdt":
            rtg_term = masked_mse(output.rtg_pred, batch.rtgs, batch.pad_mask)
        else:
            rtg_term = quantile_loss(lam, output.rtg_pred, batch.rtgs, batch.pad_mask)
        parts["rtg"] = rtg_term.item()
        total = ops.add(rtg_term, action_term)
    else:
        total = action_term
    parts["total"] = total.item()
    return total, parts


def toy_config(token_order: str = ORDER_SRA) -> ModelConfig:
    """The smallest useful model: one layer, width 8, three steps of context."""
    return ModelConfig(n_layers=1, n_heads=2, embed_dim=8, context_steps=3, token_order=token_order)


def random_batch(config: ModelConfig, batch_size: int, seed: int, with_padding: bool = True) -> TokenBatch:
    """Synthetic token batch of the model's context length, for checks and tests."""
    rng = np.random.default_rng(seed)
    B, K = batch_size, config.context_steps
    pad = np.ones((B, K), dtype=bool)
    if with_padding and B > 1 and K > 1:
        pad[0, 0] = False
    start = rng.integers(0, config.max_timestep - K + 1, size=B)
    return TokenBatch(
        states=rng.uniform(0, 1, (B, K, config.state_dim)),
        rtgs=rng.uniform(0, 1, (B, K, 1)),
        actions=rng.uniform(0, config.a_max, (B, K, 1)),
        timesteps=start[:, None] + np.arange(K)[None, :],
        pad_mask=pad,
    )


def check_gradients(mode: str, config: Optional[ModelConfig] = None, seed: int = 0, batch_size: int = 2,
                    h: float = 1e-3, tol: float = 1e-3):
    """Finite-difference check of the full training loss of ``mode`` w.r.t. every parameter."""
    from .numcore import grad_check

    order = ORDER_RSA if mode == "dt_baseline" else ORDER_SRA
    config = dataclasses.replace(config or toy_config(), token_order=order)
    params = init_params(config, seed)
    # larger weights than the training init so the check is not dominated by near-zero paths
    rng = np.random.default_rng(seed + 1)
    for p in params.values():
        p.values[...] += rng.normal(0, 0.3, p.dims).astype(DTYPE)
    batch = random_batch(config, batch_size, seed)

    def loss():
        out = forward(config, params, batch)
        return training_loss(mode, out, batch, config.quantile_lambda, config.a_max)[0]

    return grad_check(loss, params, h=h, tol=tol)


# checkpoints --------------------------------------------------------------------------------


@dataclass
class Checkpoint:
    """A trained model: config, parameters, and the RTG normalization constant."""

    config: ModelConfig
    params: dict[str, Tensor]
    rtg_scale: float = 1.0
    mode: str = "rhat"
    meta: dict = dataclasses.field(default_factory=dict)

    def forward(self, batch: TokenBatch, rng=None) -> ModelOutput:
        return forward(self.config, self.params, batch, rng)

    def to_bytes(self) -> bytes:
        names = list(self.params)
        header = {
            "format_version": CHECKPOINT_VERSION,
            "config": dataclasses.asdict(self.config),
            "rtg_scale": self.rtg_scale,
            "mode": self.mode,
            "meta": self.meta,
            "tensors": [{"name": n, "dims": list(self.params[n].dims)} for n in names],
        }
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        buf.write(blob)
        for n in names:
            buf.write(np.ascontiguousarray(self.params[n].values, dtype="<f4").tobytes())
        return buf.getvalue()

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:8] != CHECKPOINT_MAGIC:
            raise LoadError("not a checkpoint file")
        version, n = struct.unpack("<II", data[8:16])
        if version != CHECKPOINT_VERSION:
            raise LoadError(f"checkpoint format version {version} is not {CHECKPOINT_VERSION}")
        header = json.loads(data[16:16 + n])
        offset = 16 + n
        params = {}
        for rec in header["tensors"]:
            dims = tuple(rec["dims"])
            count = int(np.prod(dims))
            raw = data[offset:offset + 4 * count]
            if len(raw) != 4 * count:
                raise LoadError(f"checkpoint truncated inside tensor {rec['name']!r}")
            arr = np.frombuffer(raw, dtype="<f4").astype(DTYPE).reshape(dims)
            params[rec["name"]] = Tensor(arr, requires_grad=True, name=rec["name"])
            offset += 4 * count
        if offset != len(data):
            raise LoadError("trailing bytes after the last tensor")
        return cls(ModelConfig(**header["config"]), params, float(header["rtg_scale"]), header["mode"],
                   header.get("meta", {}))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
