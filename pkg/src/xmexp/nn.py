"""Graph layers, MLP blocks and the encoder -> GATv2 -> decoder policy."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import numcore as nc
from .numcore import Tensor

LEAKY_SLOPE = 0.2
SOFTMAX_EPS = 1e-12
BLACKOUT_THRESHOLD = 1e-9
LOG_STD_BOUNDS = (-5.0, 1.0)
LOG_STD_INIT = -0.5

_ACTIVATIONS = {
    "tanh": nc.tanh,
    "relu": nc.relu,
    "identity": lambda x: x,
}


@dataclass(frozen=True)
class Architecture:
    """Layer widths for one task's policy and critic.

    An empty ``encoder`` is the identity encoder.
    """

    obs_dim: int
    encoder: tuple[int, ...]
    encoder_act: str
    gat_dim: int
    gat_act: str
    decoder: tuple[int, ...]
    decoder_act: str
    critic: tuple[int, ...]
    critic_act: str = "tanh"
    action_dim: int = 2

    @property
    def gat_in(self) -> int:
        return self.encoder[-1] if self.encoder else self.obs_dim


ARCHITECTURES: dict[str, Architecture] = {
    "navigation": Architecture(
        obs_dim=6, encoder=(), encoder_act="identity", gat_dim=32, gat_act="tanh",
        decoder=(256, 256), decoder_act="tanh", critic=(32, 32),
    ),
    "passage": Architecture(
        obs_dim=8, encoder=(32, 32, 32, 32), encoder_act="relu", gat_dim=32, gat_act="tanh",
        decoder=(64, 64, 64, 64), decoder_act="relu", critic=(32, 32),
    ),
    "discovery": Architecture(
        obs_dim=5, encoder=(64,), encoder_act="relu", gat_dim=64, gat_act="relu",
        decoder=(64, 64), decoder_act="relu", critic=(128, 128),
    ),
}


@dataclass
class GraphBatch:
    """Node features ``(..., N, d)`` plus edge weights ``(..., N, N)`` in [0, 1]."""

    node_features: Tensor
    edge_weights: np.ndarray | Tensor

    @property
    def weight_values(self) -> np.ndarray:
        w = self.edge_weights
        return w.data if isinstance(w, Tensor) else w

    @classmethod
    def complete(cls, node_features, edge_weights=None) -> "GraphBatch":
        x = nc.as_tensor(node_features)
        n = x.shape[-2]
        if edge_weights is None:
            w = np.ones(x.shape[:-2] + (n, n))
        elif isinstance(edge_weights, Tensor):
            # differentiable weights (mask optimisation) are used as given
            if edge_weights.shape[-2:] != (n, n):
                raise nc.ShapeError(f"edge weights {edge_weights.shape} do not match {n} nodes")
            w = edge_weights
        else:
            w = np.asarray(edge_weights, dtype=np.float64)
            if w.shape[-2:] != (n, n):
                raise nc.ShapeError(f"edge weights {w.shape} do not match {n} nodes")
            w = np.broadcast_to(w, x.shape[:-2] + (n, n))
        return cls(x, w)

    @property
    def num_agents(self) -> int:
        return self.node_features.shape[-2]


@dataclass
class GatOutput:
    embeddings: Tensor
    attention: Tensor
    scores: Tensor


@dataclass
class PolicyHead:
    """Diagonal Gaussian over pre-squash actions; ``log_std`` is shared by all agents."""

    mean: Tensor
    log_std: Tensor


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def param_shapes(arch: Architecture, n_agents: int) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape table; GAT first so cross-task mismatches surface early."""
    shapes: dict[str, tuple[int, ...]] = {
        "gat.att_weight": (2 * arch.gat_in, arch.gat_dim),
        "gat.att_vec": (arch.gat_dim,),
        "gat.phi_weight": (arch.gat_in, arch.gat_dim),
        "gat.phi_bias": (arch.gat_dim,),
    }
    width = arch.obs_dim
    for k, out in enumerate(arch.encoder):
        shapes[f"enc.{k}.weight"] = (width, out)
        shapes[f"enc.{k}.bias"] = (out,)
        width = out
    width = arch.gat_dim
    for k, out in enumerate(arch.decoder):
        shapes[f"dec.{k}.weight"] = (width, out)
        shapes[f"dec.{k}.bias"] = (out,)
        width = out
    shapes["dec.out.weight"] = (width, arch.action_dim)
    shapes["dec.out.bias"] = (arch.action_dim,)
    shapes["log_std"] = (arch.action_dim,)
    width = arch.obs_dim * n_agents
    for k, out in enumerate(arch.critic):
        shapes[f"critic.{k}.weight"] = (width, out)
        shapes[f"critic.{k}.bias"] = (out,)
        width = out
    shapes["critic.out.weight"] = (width, 1)
    shapes["critic.out.bias"] = (1,)
    return shapes


def init_params(arch: Architecture, n_agents: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(arch, n_agents).items():
        if name == "log_std":
            params[name] = np.full(shape, LOG_STD_INIT)
        elif name.startswith("gat.att") or name == "gat.phi_weight":
            fan = shape[0] + (shape[1] if len(shape) > 1 else 1)
            bound = math.sqrt(6.0 / fan)
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif name == "gat.phi_bias":
            params[name] = np.zeros(shape)
        else:
            # torch.nn.Linear default: U(-1/sqrt(fan_in), 1/sqrt(fan_in))
            fan_in = shape[0] if name.endswith("weight") else _fan_in(params, name)
            bound = 1.0 / math.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def _fan_in(params: Mapping[str, np.ndarray], bias_name: str) -> int:
    return params[bias_name[: -len("bias")] + "weight"].shape[0]


def _p(params: Mapping, name: str) -> Tensor:
    return nc.as_tensor(params[name])


def mlp_layers(params: Mapping, prefix: str) -> list[tuple[Tensor, Tensor]]:
    layers = []
    k = 0
    while f"{prefix}.{k}.weight" in params:
        layers.append((_p(params, f"{prefix}.{k}.weight"), _p(params, f"{prefix}.{k}.bias")))
        k += 1
    if f"{prefix}.out.weight" in params:
        layers.append((_p(params, f"{prefix}.out.weight"), _p(params, f"{prefix}.out.bias")))
    return layers


def _linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.shape[-1] != weight.shape[0]:
        raise nc.ShapeError(f"linear: input width {x.shape[-1]} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    flat = x.reshape(-1, x.shape[-1]) if x.ndim != 2 else x
    out = flat @ weight + bias
    return out.reshape(lead + (weight.shape[1],)) if x.ndim != 2 else out


def mlp_forward(
    layers: Sequence[tuple], x, activation: str, final_linear: bool = False
) -> Tensor:
    """Affine then activation per layer; with ``final_linear`` the last layer is affine only."""
    act = _ACTIVATIONS[activation]
    h = nc.as_tensor(x)
    for k, (w, b) in enumerate(layers):
        h = _linear(h, nc.as_tensor(w), nc.as_tensor(b))
        if not (final_linear and k == len(layers) - 1):
            h = act(h)
    return h


# ---------------------------------------------------------------------------
# Graph layers
# ---------------------------------------------------------------------------


def gcn_layer_forward(weight, graph: GraphBatch, bias=None) -> Tensor:
    """Symmetric-normalised graph convolution over binary edges (self-edges included)."""
    w = graph.weight_values
    if not np.all((w == 0) | (w == 1)):
        raise ValueError("gcn layer requires binary edge weights")
    deg = w.sum(axis=-1)
    if np.any(deg == 0):
        raise ValueError("gcn layer: isolated node with zero degree")
    inv = 1.0 / np.sqrt(deg)
    norm = w * inv[..., :, None] * inv[..., None, :]
    h = graph.node_features
    transformed = _linear(h, nc.as_tensor(weight), nc.as_tensor(0.0 if bias is None else bias))
    return nc.matmul(norm, transformed)


def _gat_scores(params: Mapping, h: Tensor) -> Tensor:
    att_w = _p(params, "gat.att_weight")
    d = h.shape[-1]
    if att_w.shape[0] != 2 * d:
        raise nc.ShapeError(f"gatv2: attention weight {att_w.shape} expects width {att_w.shape[0] // 2}, got {d}")
    n = h.shape[-2]
    hid = att_w.shape[1]
    target = _linear(h, att_w[:d], nc.Tensor(np.zeros(hid)))
    source = _linear(h, att_w[d:], nc.Tensor(np.zeros(hid)))
    lead = h.shape[:-2]
    z = target.reshape(lead + (n, 1, hid)) + source.reshape(lead + (1, n, hid))
    z = nc.leaky_relu(z, LEAKY_SLOPE)
    a = _p(params, "gat.att_vec").reshape(hid, 1)
    return (z.reshape(-1, hid) @ a).reshape(lead + (n, n))


def gatv2_scores(params: Mapping, graph: GraphBatch) -> np.ndarray:
    """Raw scores ``a . LeakyReLU(W [h_i || h_j])``; ``-inf`` where the edge weight is 0."""
    e = _gat_scores(params, graph.node_features).data
    return np.where(graph.weight_values > 0, e, -np.inf)


def masked_softmax(scores, weights) -> Tensor:
    """Row softmax with each exponentiated score multiplied by its edge weight.

    Rows whose weighted mass falls below ``BLACKOUT_THRESHOLD`` become all-zero.
    """
    e = nc.as_tensor(scores)
    w = weights if isinstance(weights, Tensor) else np.asarray(weights, dtype=np.float64)
    pos = (w.data if isinstance(w, Tensor) else w) > 0
    row_max = np.max(np.where(pos, e.data, -np.inf), axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    # masked-out entries are pinned to the row max so exp cannot overflow; weight 0 removes them
    shifted = e * pos.astype(np.float64) + (row_max * ~pos - row_max)
    num = nc.exp(shifted) * w
    total = num.sum(axis=-1, keepdims=True)
    live = (total.data >= BLACKOUT_THRESHOLD).astype(np.float64)
    return num / (total + SOFTMAX_EPS) * live


def gatv2_layer_forward(params: Mapping, graph: GraphBatch, activation: str = "tanh") -> GatOutput:
    h = graph.node_features
    scores = _gat_scores(params, h)
    alpha = masked_softmax(scores, graph.edge_weights)
    messages = _linear(h, _p(params, "gat.phi_weight"), _p(params, "gat.phi_bias"))
    agg = nc.matmul(alpha, messages)
    return GatOutput(_ACTIVATIONS[activation](agg), alpha, scores)


# ---------------------------------------------------------------------------
# Policy / critic
# ---------------------------------------------------------------------------


def policy_forward(
    params: Mapping, observations, arch: Architecture, edge_weights=None
) -> tuple[PolicyHead, GatOutput]:
    obs = nc.as_tensor(observations)
    if obs.shape[-1] != arch.obs_dim:
        raise nc.ShapeError(f"policy: observation width {obs.shape[-1]} != {arch.obs_dim}")
    h = mlp_forward(mlp_layers(params, "enc"), obs, arch.encoder_act) if arch.encoder else obs
    gat = gatv2_layer_forward(params, GraphBatch.complete(h, edge_weights), arch.gat_act)
    mean = mlp_forward(mlp_layers(params, "dec"), gat.embeddings, arch.decoder_act, final_linear=True)
    log_std = nc.clamp(_p(params, "log_std"), *LOG_STD_BOUNDS)
    return PolicyHead(mean, log_std), gat


def critic_forward(params: Mapping, observations, arch: Architecture) -> Tensor:
    """Centralised value of the joint observation ``(..., N, d)`` -> ``(...,)``."""
    obs = nc.as_tensor(observations)
    lead = obs.shape[:-2]
    flat = obs.reshape(lead + (obs.shape[-2] * obs.shape[-1],))
    v = mlp_forward(mlp_layers(params, "critic"), flat, arch.critic_act, final_linear=True)
    return v.reshape(lead)


def attention_entropy(alpha):
    """Sum of per-row entropies (nats) with 0 log 0 = 0.

    Arrays give a float (or an array over leading batch axes); tensors give a
    differentiable tensor over the leading batch axes.
    """
    if isinstance(alpha, Tensor):
        if np.any(alpha.data < 0):
            raise ValueError("attention_entropy: negative attention entry")
        safe = nc.clamp(alpha, 1e-300, None)
        return -(alpha * nc.log(safe)).sum(axis=(-2, -1))
    a = np.asarray(alpha, dtype=np.float64)
    if np.any(a < 0):
        raise ValueError("attention_entropy: negative attention entry")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(a > 0, -a * np.log(np.where(a > 0, a, 1.0)), 0.0)
    total = terms.sum(axis=(-2, -1))
    return float(total) if np.ndim(total) == 0 else total


class Policy:
    """One shared parameter set used for every agent, plus its architecture."""

    def __init__(self, params: Mapping[str, np.ndarray], arch: Architecture, meta: Mapping | None = None):
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.arch = arch
        self.meta = dict(meta or {})

    def forward(self, observations, edge_weights=None) -> tuple[PolicyHead, GatOutput]:
        return policy_forward(self.params, observations, self.arch, edge_weights)

    def head(self, observations, edge_weights=None) -> tuple[np.ndarray, np.ndarray]:
        """Numpy ``(mean, log_std)`` for metrics and rollouts."""
        head, _ = self.forward(observations, edge_weights)
        return head.mean.data, head.log_std.data

    def attention(self, observations) -> np.ndarray:
        return self.forward(observations)[1].attention.data

    def act(self, observations) -> np.ndarray:
        """Deterministic action: squashed mean."""
        return np.tanh(self.head(observations)[0])
