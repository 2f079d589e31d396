"""Toy pre-norm decoder-only transformer.

Parameters live in an immutable :class:`ModelState`; the forward pass is a
pure function of ``(state, tokens)``. Block ``l`` computes::

    a   = Attn(LN1(h))
    k   = act(W_fc @ LN2(a + h) + b_fc)     # the MLP key
    m   = W @ k                              # W is the edited down-projection
    h'  = h + a + m
"""

from __future__ import annotations

import json
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, fields
from types import MappingProxyType
from typing import Callable

import torch
import torch.nn.functional as F

from .errors import ConfigError, InputError, NumericError

FORMAT_VERSION = 1
LN_EPS = 1e-5

ACTIVATIONS: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "gelu": F.gelu,
    "gelu_tanh": lambda x: F.gelu(x, approximate="tanh"),
    "relu": F.relu,
}


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    d_model: int = 128
    d_mlp: int = 512
    n_heads: int = 4
    vocab_size: int = 512
    max_seq_len: int = 128
    activation: str = "gelu"
    seed: int = 0

    def __post_init__(self):
        for name in ("n_layers", "d_model", "d_mlp", "n_heads", "vocab_size", "max_seq_len"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"must be a positive integer, got {value!r}", name)
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}", "d_model")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}; choose from {sorted(ACTIVATIONS)}", "activation")
        if not isinstance(self.seed, int):
            raise ConfigError("must be an integer", "seed")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown fields {sorted(unknown)}")
        return cls(**dict(data))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def block_name(layer: int, name: str) -> str:
    return f"blocks.{layer}.{name}"


def down_proj_name(layer: int) -> str:
    return block_name(layer, "mlp.w_out")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter names and shapes, in serialization order."""
    d, m = cfg.d_model, cfg.d_mlp
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.max_seq_len, d),
    }
    for layer in range(cfg.n_layers):
        shapes[block_name(layer, "ln1.weight")] = (d,)
        shapes[block_name(layer, "ln1.bias")] = (d,)
        for proj in ("wq", "wk", "wv", "wo"):
            shapes[block_name(layer, f"attn.{proj}")] = (d, d)
        shapes[block_name(layer, "ln2.weight")] = (d,)
        shapes[block_name(layer, "ln2.bias")] = (d,)
        shapes[block_name(layer, "mlp.w_fc")] = (m, d)
        shapes[block_name(layer, "mlp.b_fc")] = (m,)
        shapes[down_proj_name(layer)] = (d, m)
    shapes["ln_f.weight"] = (d,)
    shapes["ln_f.bias"] = (d,)
    shapes["unembed"] = (cfg.vocab_size, d)
    return shapes


@dataclass(frozen=True)
class ModelState:
    config: ModelConfig
    params: Mapping[str, torch.Tensor]
    version: int = FORMAT_VERSION

    def __post_init__(self):
        expected = param_shapes(self.config)
        if set(self.params) != set(expected):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise InputError(f"parameter set mismatch; missing={missing[:3]} extra={extra[:3]}")
        for name, shape in expected.items():
            if tuple(self.params[name].shape) != shape:
                raise InputError(f"{name}: shape {tuple(self.params[name].shape)} != {shape}")
        ordered = {name: self.params[name] for name in expected}
        object.__setattr__(self, "params", MappingProxyType(ordered))

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.params[name]

    @property
    def dtype(self) -> torch.dtype:
        return self.params["tok_emb"].dtype

    def down_proj(self, layer: int) -> torch.Tensor:
        return self.params[down_proj_name(layer)]

    def with_params(self, updates: Mapping[str, torch.Tensor]) -> "ModelState":
        new = dict(self.params)
        new.update(updates)
        return ModelState(self.config, new, self.version)

    def to(self, dtype: torch.dtype) -> "ModelState":
        return ModelState(self.config, {k: v.to(dtype) for k, v in self.params.items()}, self.version)

    def all_finite(self) -> bool:
        return all(bool(torch.isfinite(v).all()) for v in self.params.values())


def init_model(cfg: ModelConfig, dtype: torch.dtype = torch.float32) -> ModelState:
    gen = torch.Generator().manual_seed(cfg.seed)
    resid_std = 0.02 / (2 * cfg.n_layers) ** 0.5
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(("ln1.weight", "ln2.weight")) or name == "ln_f.weight":
            t = torch.ones(shape)
        elif name.endswith(("bias", "b_fc")):
            t = torch.zeros(shape)
        elif name.endswith(("attn.wo", "mlp.w_out")):
            t = torch.randn(shape, generator=gen) * resid_std
        else:
            t = torch.randn(shape, generator=gen) * 0.02
        params[name] = t.to(dtype)
    return ModelState(cfg, params)


def param_diff(a: ModelState, b: ModelState) -> dict[str, float]:
    """Max absolute difference per parameter, only for parameters that differ."""
    out = {}
    for name in a.params:
        delta = float((a[name].double() - b[name].double()).abs().max())
        if delta != 0.0 or not torch.equal(a[name], b[name]):
            out[name] = delta
    return out


@dataclass
class LayerActivations:
    """Per-token tensors observed at one block (rows index token positions)."""

    layer: int
    attn_out: torch.Tensor
    resid_in: torch.Tensor
    key: torch.Tensor
    mlp_out: torch.Tensor


def mlp_key(model: ModelState, layer: int, attn_out: torch.Tensor, resid_in: torch.Tensor) -> torch.Tensor:
    """MLP key from an attention output and the residual entering the block."""
    p = model.params
    d = model.config.d_model
    z = F.layer_norm(attn_out + resid_in, (d,), p[block_name(layer, "ln2.weight")], p[block_name(layer, "ln2.bias")], LN_EPS)
    pre = F.linear(z, p[block_name(layer, "mlp.w_fc")], p[block_name(layer, "mlp.b_fc")])
    return ACTIVATIONS[model.config.activation](pre)


def _attention(model: ModelState, layer: int, z: torch.Tensor) -> torch.Tensor:
    p = model.params
    cfg = model.config
    bsz, seq, d = z.shape
    dh = d // cfg.n_heads

    def heads(w: torch.Tensor) -> torch.Tensor:
        return F.linear(z, w).view(bsz, seq, cfg.n_heads, dh).transpose(1, 2)

    q = heads(p[block_name(layer, "attn.wq")])
    k = heads(p[block_name(layer, "attn.wk")])
    v = heads(p[block_name(layer, "attn.wv")])
    y = F.scaled_dot_product_attention(q, k, v, is_causal=True)
    y = y.transpose(1, 2).reshape(bsz, seq, d)
    return F.linear(y, p[block_name(layer, "attn.wo")])


def embed(model: ModelState, ids: torch.Tensor) -> torch.Tensor:
    return model.params["tok_emb"][ids] + model.params["pos_emb"][: ids.shape[1]]


def run_blocks(
    model: ModelState,
    x: torch.Tensor,
    start: int = 0,
    capture: dict[int, LayerActivations] | None = None,
    mlp_override: Mapping[int, tuple[int, torch.Tensor]] | None = None,
) -> torch.Tensor:
    """Run blocks ``start..n_layers-1`` on residual ``x`` and apply the final norm.

    ``mlp_override`` maps a layer to ``(position, vector)`` and substitutes the
    MLP output at that position in every batch row; the vector may require grad.
    Captured activations are taken from batch row 0.
    """
    cfg = model.config
    p = model.params
    d = cfg.d_model
    seq = x.shape[1]
    act = ACTIVATIONS[cfg.activation]
    for layer in range(start, cfg.n_layers):
        z = F.layer_norm(x, (d,), p[block_name(layer, "ln1.weight")], p[block_name(layer, "ln1.bias")], LN_EPS)
        a = _attention(model, layer, z)
        z2 = F.layer_norm(x + a, (d,), p[block_name(layer, "ln2.weight")], p[block_name(layer, "ln2.bias")], LN_EPS)
        key = act(F.linear(z2, p[block_name(layer, "mlp.w_fc")], p[block_name(layer, "mlp.b_fc")]))
        m = F.linear(key, p[down_proj_name(layer)])
        if mlp_override is not None and layer in mlp_override:
            pos, vec = mlp_override[layer]
            mask = torch.zeros(seq, 1, dtype=torch.bool)
            mask[pos] = True
            m = torch.where(mask, vec.to(m.dtype), m)
        if capture is not None and layer in capture:
            capture[layer] = LayerActivations(layer, a[0].detach(), x[0].detach(), key[0].detach(), m[0].detach())
        x = x + a + m
        if not bool(torch.isfinite(x).all()):
            raise NumericError(f"non-finite activation in layer {layer}", layer=layer)
    return F.layer_norm(x, (d,), p["ln_f.weight"], p["ln_f.bias"], LN_EPS)


def hidden_states(
    model: ModelState,
    ids: torch.Tensor,
    capture: dict[int, LayerActivations] | None = None,
    mlp_override: Mapping[int, tuple[int, torch.Tensor]] | None = None,
) -> torch.Tensor:
    """Final-normed residual stream for a (batch, seq) id tensor."""
    return run_blocks(model, embed(model, ids), 0, capture, mlp_override)


def unembed(model: ModelState, h: torch.Tensor) -> torch.Tensor:
    return F.linear(h, model.params["unembed"])


def check_tokens(model: ModelState, tokens: Sequence[int]) -> torch.Tensor:
    if len(tokens) == 0:
        raise InputError("token list is empty")
    ids = torch.as_tensor(list(tokens), dtype=torch.long)
    if int(ids.min()) < 0 or int(ids.max()) >= model.config.vocab_size:
        raise InputError(f"token id out of range [0, {model.config.vocab_size})")
    if len(tokens) > model.config.max_seq_len:
        raise InputError(f"sequence of {len(tokens)} tokens exceeds max_seq_len={model.config.max_seq_len}")
    return ids


def forward(
    model: ModelState,
    tokens: Sequence[int],
    capture_layers: Iterable[int] = (),
) -> tuple[torch.Tensor, list[LayerActivations]]:
    """Final-position logits plus captured activations for ``capture_layers`` (sorted)."""
    ids = check_tokens(model, tokens)[None]
    layers = sorted(set(capture_layers))
    for layer in layers:
        if not 0 <= layer < model.config.n_layers:
            raise InputError(f"capture layer {layer} outside [0, {model.config.n_layers})")
    capture: dict[int, LayerActivations] = dict.fromkeys(layers)  # type: ignore[arg-type]
    with torch.no_grad():
        h = hidden_states(model, ids, capture=capture)
        logits = unembed(model, h[0, -1])
    return logits, [capture[layer] for layer in layers]


def batch_answer_logits(model: ModelState, ids: torch.Tensor, last: torch.Tensor) -> torch.Tensor:
    """Logits at position ``last[b]`` of each right-padded row."""
    h = hidden_states(model, ids)
    picked = h[torch.arange(ids.shape[0]), last]
    return unembed(model, picked)


def replace_layer_weights(base: ModelState, layer: int, new_down_projection: torch.Tensor) -> ModelState:
    """Copy of ``base`` whose down-projection at ``layer`` is ``new_down_projection``."""
    cfg = base.config
    if not 0 <= layer < cfg.n_layers:
        raise InputError(f"layer {layer} outside [0, {cfg.n_layers})")
    w = torch.as_tensor(new_down_projection)
    if tuple(w.shape) != (cfg.d_model, cfg.d_mlp):
        raise InputError(f"down-projection shape {tuple(w.shape)} != {(cfg.d_model, cfg.d_mlp)}")
    return base.with_params({down_proj_name(layer): w.detach().to(base.dtype).clone()})
