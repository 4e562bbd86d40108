"""Transformer encoder-decoder with 1D deformable attention.

Feature maps are laid out features-first, ``[B, C, T]`` (the batch axis is
optional in the public helpers).  Every function takes the flat parameter
dict produced by :func:`init_params`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .data import NUM_JOINTS, SnippetTensor

Params = dict[str, Parameter]


@dataclass(frozen=True)
class ModelConfig:
    T: int = 100
    N_f: int = 8
    C: int = 256
    L_e: int = 4
    L_d: int = 4
    H: int = 4
    K: int = 4
    N_a: int = 30
    C_cls: int = 20
    ffn_width: int | None = None
    seed: int = 0
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("T", "N_f", "C", "H", "K", "N_a", "C_cls"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be positive")
        if self.L_e < 0 or self.L_d < 0:
            raise ValueError("layer counts must be non-negative")
        if self.C % self.H:
            raise ValueError(f"model width C={self.C} is not divisible by H={self.H}")
        if self.ffn_width is None:
            object.__setattr__(self, "ffn_width", 4 * self.C)

    @property
    def D(self) -> int:
        return NUM_JOINTS * 3 * self.N_f

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RawPredictionSet:
    """Per-query class logits ``[N_a, C_cls+1]`` (last = no action) and
    normalized spans ``[N_a, 2]`` as (start, end), start <= end."""

    class_logits: Tensor
    spans: Tensor
    raw_spans: Tensor | None = None

    @property
    def spans_normalized(self) -> np.ndarray:
        return self.spans.data

    def numpy(self) -> tuple[np.ndarray, np.ndarray]:
        return self.class_logits.data, self.spans.data


# ---------------------------------------------------------------- parameters


def sinusoidal_encoding(C: int, T: int) -> np.ndarray:
    """Fixed ``C x T`` sine/cosine position table."""
    pos = np.arange(T, dtype=np.float64)[None, :]
    i = np.arange(C)[:, None]
    rates = 1.0 / np.power(10000.0, (2 * (i // 2)) / C)
    angles = pos * rates
    return np.where(i % 2 == 0, np.sin(angles), np.cos(angles))


def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_out, fan_in))


def _logit(p: np.ndarray) -> np.ndarray:
    return np.log(p) - np.log1p(-p)


def init_params(cfg: ModelConfig) -> Params:
    rng = np.random.default_rng(cfg.seed)
    params: Params = {}

    def linear(name: str, fan_out: int, fan_in: int):
        params[f"{name}.w"] = Parameter(f"{name}.w", _glorot(rng, fan_out, fan_in))
        params[f"{name}.b"] = Parameter(f"{name}.b", np.zeros((fan_out, 1)))

    def norm(name: str):
        params[f"{name}.g"] = Parameter(f"{name}.g", np.ones((cfg.C, 1)))
        params[f"{name}.b"] = Parameter(f"{name}.b", np.zeros((cfg.C, 1)))

    def deformable(name: str):
        linear(f"{name}.value", cfg.C, cfg.C)
        # offsets start at zero weights with evenly spread biases per head
        spread = np.arange(cfg.K) - (cfg.K - 1) / 2.0
        params[f"{name}.offset.w"] = Parameter(f"{name}.offset.w", np.zeros((cfg.H * cfg.K, cfg.C)))
        params[f"{name}.offset.b"] = Parameter(f"{name}.offset.b", np.tile(spread, cfg.H)[:, None])
        params[f"{name}.attn.w"] = Parameter(f"{name}.attn.w", np.zeros((cfg.H * cfg.K, cfg.C)))
        params[f"{name}.attn.b"] = Parameter(f"{name}.attn.b", np.zeros((cfg.H * cfg.K, 1)))
        linear(f"{name}.out", cfg.C, cfg.C)

    def ffn(name: str):
        linear(f"{name}.fc1", cfg.ffn_width, cfg.C)
        linear(f"{name}.fc2", cfg.C, cfg.ffn_width)

    linear("embed", cfg.C, cfg.D)
    for layer in range(cfg.L_e):
        p = f"enc{layer}"
        deformable(f"{p}.attn")
        norm(f"{p}.norm1")
        ffn(f"{p}.ffn")
        norm(f"{p}.norm2")

    params["query.embed"] = Parameter("query.embed", rng.normal(0.0, 1.0, size=(cfg.C, cfg.N_a)))
    ref = (np.arange(cfg.N_a) + 0.5) / cfg.N_a
    params["query.ref"] = Parameter("query.ref", _logit(ref))
    for layer in range(cfg.L_d):
        p = f"dec{layer}"
        for proj in ("q", "k", "v", "o"):
            linear(f"{p}.self.{proj}", cfg.C, cfg.C)
        norm(f"{p}.norm1")
        deformable(f"{p}.cross")
        norm(f"{p}.norm2")
        ffn(f"{p}.ffn")
        norm(f"{p}.norm3")

    linear("reg.fc1", cfg.C, cfg.C)
    linear("reg.fc2", cfg.C, cfg.C)
    linear("reg.fc3", 2, cfg.C)
    linear("cls", cfg.C_cls + 1, cfg.C)
    return params


def check_params(params: Params, cfg: ModelConfig) -> None:
    """Raise if ``params`` does not have exactly the shapes ``cfg`` implies."""
    expected = init_params(ModelConfig(**{**cfg.to_dict(), "seed": 0}))
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ValueError(f"parameter set mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, p in expected.items():
        if params[name].shape != p.shape:
            raise ValueError(f"parameter {name}: shape {params[name].shape}, expected {p.shape}")


# ---------------------------------------------------------------- layers


def _linear(params: Params, name: str, x) -> Tensor:
    return params[f"{name}.w"] @ x + params[f"{name}.b"]


def _norm(params: Params, name: str, x, eps: float) -> Tensor:
    return ad.layer_norm(x, -2, params[f"{name}.g"], params[f"{name}.b"], eps)


def _ffn(params: Params, name: str, x) -> Tensor:
    return _linear(params, f"{name}.fc2", _linear(params, f"{name}.fc1", x).relu())


def embed_input(snippets, params: Params, cfg: ModelConfig) -> Tensor:
    """Project snippets (``[T, D]`` or ``[B, T, D]``) to ``[B, C, T]`` and add
    the position table."""
    data = snippets.data if isinstance(snippets, SnippetTensor) else np.asarray(snippets, dtype=np.float64)
    if data.ndim == 2:
        data = data[None]
    if data.shape[1:] != (cfg.T, cfg.D):
        raise ValueError(f"snippet batch has shape {data.shape[1:]}, model expects ({cfg.T}, {cfg.D})")
    x = Tensor(np.swapaxes(data, 1, 2))
    return _linear(params, "embed", x) + Tensor(sinusoidal_encoding(cfg.C, cfg.T))


def deformable_attention(z, ref, x, params: Params, name: str, cfg: ModelConfig) -> Tensor:
    """Sparse attention of queries ``z [B, C, Q]`` into ``x [B, C, T]``.

    Each head samples ``K`` fractional positions ``ref + offset`` from the
    value-projected ``x`` and mixes them with softmax weights; offsets and
    weights are linear in the query.  ``ref`` holds one reference position
    per query, shape ``[Q]``.
    """
    H, K = cfg.H, cfg.K
    B, C, Q = z.shape
    T = x.shape[-1]
    ch = C // H
    value = _linear(params, f"{name}.value", x).reshape(x.shape[0], H, ch, T)
    offsets = _linear(params, f"{name}.offset", z).reshape(B, H, K, Q)
    weights = ad.softmax(_linear(params, f"{name}.attn", z).reshape(B, H, K, Q), axis=2)
    positions = (offsets + ad.as_tensor(ref)).reshape(B, H, K * Q)
    sampled = ad.interp_sample(value, positions).reshape(B, H, ch, K, Q)
    mixed = (sampled * weights.reshape(B, H, 1, K, Q)).sum(axis=3)
    return _linear(params, f"{name}.out", mixed.reshape(B, C, Q))


def self_attention(y, params: Params, name: str, cfg: ModelConfig) -> Tensor:
    """Dense multi-head self-attention across the queries of ``y [B, C, N]``."""
    B, C, N = y.shape
    H = cfg.H
    ch = C // H
    q = _linear(params, f"{name}.q", y).reshape(B, H, ch, N)
    k = _linear(params, f"{name}.k", y).reshape(B, H, ch, N)
    v = _linear(params, f"{name}.v", y).reshape(B, H, ch, N)
    scores = ad.scale(q.T @ k, 1.0 / math.sqrt(ch))  # [B, H, N(query), N(key)]
    attn = ad.softmax(scores, axis=-1)
    mixed = v @ attn.T
    return _linear(params, f"{name}.o", mixed.reshape(B, C, N))


def encoder_forward(x, params: Params, cfg: ModelConfig) -> Tensor:
    x = ad.as_tensor(x)
    if x.ndim == 2:
        x = x.reshape(1, *x.shape)
    ref = np.arange(x.shape[-1], dtype=np.float64)
    for layer in range(cfg.L_e):
        p = f"enc{layer}"
        x = _norm(params, f"{p}.norm1", x + deformable_attention(x, ref, x, params, f"{p}.attn", cfg), cfg.ln_eps)
        x = _norm(params, f"{p}.norm2", x + _ffn(params, f"{p}.ffn", x), cfg.ln_eps)
    return x


def reference_points(params: Params, cfg: ModelConfig) -> Tensor:
    """Per-query reference positions in ``(0, T-1)``."""
    return ad.scale(params["query.ref"].sigmoid(), cfg.T - 1)


def decoder_forward(h, params: Params, cfg: ModelConfig) -> Tensor:
    h = ad.as_tensor(h)
    if h.ndim == 2:
        h = h.reshape(1, *h.shape)
    B = h.shape[0]
    y = params["query.embed"].reshape(1, cfg.C, cfg.N_a)
    if cfg.L_d == 0:
        return y + Tensor(np.zeros((B, cfg.C, cfg.N_a)))
    ref = reference_points(params, cfg)
    y = y + Tensor(np.zeros((B, cfg.C, cfg.N_a)))
    for layer in range(cfg.L_d):
        p = f"dec{layer}"
        y = _norm(params, f"{p}.norm1", y + self_attention(y, params, f"{p}.self", cfg), cfg.ln_eps)
        y = _norm(params, f"{p}.norm2", y + deformable_attention(y, ref, h, params, f"{p}.cross", cfg), cfg.ln_eps)
        y = _norm(params, f"{p}.norm3", y + _ffn(params, f"{p}.ffn", y), cfg.ln_eps)
    return y


def predict_heads(y, params: Params, cfg: ModelConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Returns ``(logits [B, N_a, C_cls+1], spans [B, N_a, 2], raw [B, N_a, 2])``.

    ``raw`` is the squashed regression output before ordering; ``spans`` is
    its (min, max) canonical form.
    """
    y = ad.as_tensor(y)
    if y.ndim == 2:
        y = y.reshape(1, *y.shape)
    logits = _linear(params, "cls", y).T
    hidden = _linear(params, "reg.fc2", _linear(params, "reg.fc1", y).relu()).relu()
    raw = _linear(params, "reg.fc3", hidden).sigmoid().T  # [B, N_a, 2]
    a, b = raw[..., 0:1], raw[..., 1:2]
    spans = ad.concat([ad.minimum(a, b), ad.maximum(b, a)], axis=-1)
    return logits, spans, raw


def forward_batch(snippets, params: Params, cfg: ModelConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Batched forward pass over ``[B, T, D]`` snippet data."""
    x = embed_input(snippets, params, cfg)
    return predict_heads(decoder_forward(encoder_forward(x, params, cfg), params, cfg), params, cfg)


def split_batch(logits: Tensor, spans: Tensor, raw: Tensor | None = None) -> list[RawPredictionSet]:
    return [
        RawPredictionSet(logits[b], spans[b], None if raw is None else raw[b])
        for b in range(logits.shape[0])
    ]


def forward(snippets: SnippetTensor, params: Params, cfg: ModelConfig) -> RawPredictionSet:
    """Single-sequence forward pass."""
    logits, spans, raw = forward_batch(snippets, params, cfg)
    return split_batch(logits, spans, raw)[0]


class LocateModel:
    """Config plus parameters, with convenience forward helpers."""

    def __init__(self, cfg: ModelConfig, params: Params | None = None):
        self.cfg = cfg
        self.params = init_params(cfg) if params is None else params
        check_params(self.params, cfg)

    def __call__(self, snippets: SnippetTensor) -> RawPredictionSet:
        return forward(snippets, self.params, self.cfg)

    def forward_batch(self, batch) -> list[RawPredictionSet]:
        return split_batch(*forward_batch(batch, self.params, self.cfg))

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())
