"""Q-networks over V x F vehicle observations.

MoPNetwork tokenizes each vehicle row, encodes the token sequence with one
transformer stack per policy, blends the per-policy token sequences with a
routed, zero-gated weight per vehicle, and decodes the blend (plus one
learnable query token) into Q-values over the five meta-actions.

MLPNet is the flatten-everything baseline, and MixActionsNet is the
mix-actions-not-policies baseline whose blend weights are observation- and
vehicle-independent scalars.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor

PARAM_GROUPS = ("theta_d", "theta_r", "theta_p1", "theta_p2", "gate")
PHASES = ("offline_distill", "online_adapt")


@dataclass
class MoPConfig:
    num_policies: int = 2   # N
    top_k: int = 2          # K
    proj_width: int = 32    # F'
    token_width: int = 64   # D
    heads: int = 2
    layers: int = 2         # L, policies and decoder alike
    ffn_width: int = 128
    num_actions: int = 5    # A
    vehicles: int = 15      # V
    features: int = 5       # F

    def __post_init__(self):
        if not 1 <= self.top_k <= self.num_policies:
            raise ValueError(f"need 1 <= K <= N, got K={self.top_k} N={self.num_policies}")
        if self.token_width % self.heads:
            raise ValueError("token_width must be divisible by heads")


def _linear_init(rng, fan_in, fan_out):
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))


class _ParamMixin:
    """Shared parameter bookkeeping for all networks."""

    params: dict[str, Tensor]

    def _add(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def group(self, prefix: str) -> dict[str, Tensor]:
        return {n: t for n, t in self.params.items()
                if n == prefix or n.startswith(prefix + "/")}

    def set_trainable(self, prefix: str, flag: bool) -> None:
        for t in self.group(prefix).values():
            t.requires_grad = flag

    def num_params(self) -> int:
        return sum(t.data.size for t in self.params.values())

    @contextmanager
    def frozen(self):
        """Temporarily disable parameter gradients (used when only input
        gradients are wanted, and for no-grad evaluation)."""
        saved = [(t, t.requires_grad) for t in self.params.values()]
        for t, _ in saved:
            t.requires_grad = False
        try:
            yield
        finally:
            for t, flag in saved:
                t.requires_grad = flag

    def q_values(self, obs: np.ndarray) -> np.ndarray:
        """Gradient-free forward; accepts (V, F) or (B, V, F)."""
        single = obs.ndim == 2
        x = obs[None] if single else obs
        with self.frozen():
            out = self.forward(Tensor(x)).data
        return out[0] if single else out


def _init_encoder(net: _ParamMixin, rng, prefix: str, width: int, heads: int,
                  ffn: int, layers: int) -> None:
    for layer in range(layers):
        p = f"{prefix}/layer{layer}"
        for name in ("wq", "wk", "wv", "wo"):
            net._add(f"{p}/{name}", _linear_init(rng, width, width))
            net._add(f"{p}/{name}_b", np.zeros(width))
        net._add(f"{p}/ln1_g", np.ones(width))
        net._add(f"{p}/ln1_b", np.zeros(width))
        net._add(f"{p}/ln2_g", np.ones(width))
        net._add(f"{p}/ln2_b", np.zeros(width))
        net._add(f"{p}/ffn_w1", _linear_init(rng, width, ffn))
        net._add(f"{p}/ffn_b1", np.zeros(ffn))
        net._add(f"{p}/ffn_w2", _linear_init(rng, ffn, width))
        net._add(f"{p}/ffn_b2", np.zeros(width))
    net._add(f"{prefix}/ln_out_g", np.ones(width))
    net._add(f"{prefix}/ln_out_b", np.zeros(width))


def _encoder_forward(params: dict[str, Tensor], prefix: str, x: Tensor,
                     heads: int, layers: int) -> Tensor:
    """Pre-norm transformer encoder over (B, T, width) tokens; all-to-all
    attention, no positional encoding."""
    b, t, width = x.shape
    dh = width // heads

    def linear(h, name):
        return T.add(T.matmul(h, params[name]), params[f"{name}_b"])

    def split_heads(h):
        return T.swapaxes(T.reshape(h, (b, t, heads, dh)), 1, 2)

    for layer in range(layers):
        p = f"{prefix}/layer{layer}"
        h = T.layer_norm(x, params[f"{p}/ln1_g"], params[f"{p}/ln1_b"])
        q = split_heads(linear(h, f"{p}/wq"))
        k = split_heads(linear(h, f"{p}/wk"))
        v = split_heads(linear(h, f"{p}/wv"))
        att = T.reshape(T.swapaxes(T.attention(q, k, v), 1, 2), (b, t, width))
        x = T.add(x, linear(att, f"{p}/wo"))
        h = T.layer_norm(x, params[f"{p}/ln2_g"], params[f"{p}/ln2_b"])
        h = T.relu(T.add(T.matmul(h, params[f"{p}/ffn_w1"]), params[f"{p}/ffn_b1"]))
        h = T.add(T.matmul(h, params[f"{p}/ffn_w2"]), params[f"{p}/ffn_b2"])
        x = T.add(x, h)
    return T.layer_norm(x, params[f"{prefix}/ln_out_g"], params[f"{prefix}/ln_out_b"])


class MoPNetwork(_ParamMixin):
    kind = "mop"

    def __init__(self, config: MoPConfig | None = None, seed: int = 0):
        self.config = config or MoPConfig()
        cfg = self.config
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}

        for i in range(cfg.num_policies):
            prefix = f"theta_p{i + 1}"
            self._add(f"{prefix}/proj_w", _linear_init(rng, cfg.features, cfg.proj_width))
            self._add(f"{prefix}/proj_b", np.zeros(cfg.proj_width))
            self._add(f"{prefix}/embed_w", _linear_init(rng, cfg.proj_width, cfg.token_width))
            self._add(f"{prefix}/embed_b", np.zeros(cfg.token_width))
            _init_encoder(self, rng, prefix, cfg.token_width, cfg.heads,
                          cfg.ffn_width, cfg.layers)

        self._add("theta_r/w", rng.normal(0.0, 0.01, size=(cfg.features, cfg.num_policies)))
        self._add("theta_r/b", np.zeros(cfg.num_policies))
        self._add("gate", np.zeros(cfg.vehicles))

        self._add("theta_d/extra_token",
                  rng.normal(0.0, 1.0 / math.sqrt(cfg.token_width),
                             size=(1, cfg.token_width)))
        _init_encoder(self, rng, "theta_d", cfg.token_width, cfg.heads,
                      cfg.ffn_width, cfg.layers)
        self._add("theta_d/head_w", _linear_init(rng, cfg.token_width, cfg.num_actions))
        self._add("theta_d/head_b", np.zeros(cfg.num_actions))

    # -- pieces ----------------------------------------------------------

    def rebuild_from(self, values: dict[str, np.ndarray]) -> None:
        for name, t in self.params.items():
            t.data = np.array(values[name], dtype=np.float64)

    def clone(self) -> "MoPNetwork":
        twin = MoPNetwork(self.config)
        twin.rebuild_from({n: t.data for n, t in self.params.items()})
        for t in twin.params.values():
            t.requires_grad = False
        return twin

    def policy_encode(self, obs: Tensor, which: int) -> Tensor:
        """(B, V, F) -> (B, V, D) token sequence for one policy."""
        cfg = self.config
        if obs.shape[-2:] != (cfg.vehicles, cfg.features):
            raise T.ShapeError(f"policy_encode: expected (*, {cfg.vehicles}, "
                               f"{cfg.features}), got {obs.shape}")
        p = f"theta_p{which + 1}"
        x = T.add(T.matmul(obs, self.params[f"{p}/proj_w"]), self.params[f"{p}/proj_b"])
        x = T.add(T.matmul(x, self.params[f"{p}/embed_w"]), self.params[f"{p}/embed_b"])
        return _encoder_forward(self.params, p, x, cfg.heads, cfg.layers)

    def route(self, obs: Tensor) -> Tensor:
        """(B, V, F) -> (B, V, N) gated, row-renormalized policy weights.

        Per vehicle: keep the top-K router logits, softmax them, scale every
        adapter column by that vehicle's gate entry, then renormalize the row.
        A row that gates to zero falls back to the pure first policy.
        """
        cfg = self.config
        logits = T.add(T.matmul(obs, self.params["theta_r/w"]), self.params["theta_r/b"])
        if cfg.top_k < cfg.num_policies:
            keep_idx = np.argpartition(logits.data, -cfg.top_k, axis=-1)[..., -cfg.top_k:]
            keep = np.zeros(logits.shape, dtype=bool)
            np.put_along_axis(keep, keep_idx, True, axis=-1)
            logits = T.add(logits, Tensor(np.where(keep, 0.0, -np.inf)))
        weights = T.softmax(logits, axis=-1)

        gate_col = T.reshape(self.params["gate"], (cfg.vehicles, 1))
        mult = T.concat(
            [Tensor(np.ones((cfg.vehicles, 1)))]
            + [gate_col] * (cfg.num_policies - 1), axis=1)
        gated = T.mul(weights, mult)
        denom = T.reduce_sum(gated, axis=-1, keepdims=True)
        dead = denom.data == 0.0
        safe = T.add(denom, Tensor(dead.astype(np.float64)))
        normalized = T.divide(gated, safe)
        if dead.any():
            onehot0 = np.zeros(normalized.shape)
            onehot0[..., 0] = 1.0
            normalized = T.add(normalized, Tensor(np.where(dead, onehot0, 0.0)))
        return normalized

    def router_weights(self, obs: np.ndarray) -> np.ndarray:
        single = obs.ndim == 2
        x = obs[None] if single else obs
        with self.frozen():
            w = self.route(Tensor(x)).data
        return w[0] if single else w

    def decode(self, mixed: Tensor) -> Tensor:
        """(B, V, D) blended tokens -> (B, A) Q-values via the extra token."""
        cfg = self.config
        b = mixed.shape[0]
        extra = T.broadcast_to(T.reshape(self.params["theta_d/extra_token"],
                                         (1, 1, cfg.token_width)),
                               (b, 1, cfg.token_width))
        tokens = T.concat([extra, mixed], axis=1)
        h = _encoder_forward(self.params, "theta_d", tokens, cfg.heads, cfg.layers)
        first = h[:, 0, :]
        return T.add(T.matmul(first, self.params["theta_d/head_w"]),
                     self.params["theta_d/head_b"])

    def _adapter_is_live(self) -> bool:
        gate = self.params["gate"]
        if gate.requires_grad or np.any(gate.data != 0.0):
            return True
        return any(t.requires_grad for t in self.group("theta_p2").values())

    def forward(self, obs: Tensor, adapter_active: bool | None = None) -> Tensor:
        """(B, V, F) -> (B, A) Q-values.

        When every gate entry is zero and neither the gate nor the adapter
        encoder is trainable, the adapter branch is skipped: its routed
        weight is identically zero, so value and gradients are unchanged.
        """
        cfg = self.config
        if adapter_active is None:
            adapter_active = self._adapter_is_live()
        t_first = self.policy_encode(obs, 0)
        if not adapter_active or cfg.num_policies == 1:
            # single policy: softmax of one logit is 1; inactive adapter:
            # gated rows are exactly (1, 0, ...). Either way the blend is t1.
            mixed = t_first
        else:
            weights = self.route(obs)
            mixed = T.mul(weights[..., 0:1], t_first)
            for i in range(1, cfg.num_policies):
                t_i = self.policy_encode(obs, i)
                mixed = T.add(mixed, T.mul(weights[..., i:i + 1], t_i))
        return self.decode(mixed)


class MLPNet(_ParamMixin):
    """Flatten the observation and apply two ReLU hidden layers of width 256."""

    kind = "mlp"

    def __init__(self, vehicles: int = 15, features: int = 5, num_actions: int = 5,
                 hidden: int = 256, seed: int = 0, group: str = "mlp"):
        self.vehicles = vehicles
        self.features = features
        self.num_actions = num_actions
        self.hidden = hidden
        self._group = group
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        d_in = vehicles * features
        self._add(f"{group}/w1", _linear_init(rng, d_in, hidden))
        self._add(f"{group}/b1", np.zeros(hidden))
        self._add(f"{group}/w2", _linear_init(rng, hidden, hidden))
        self._add(f"{group}/b2", np.zeros(hidden))
        self._add(f"{group}/w3", _linear_init(rng, hidden, num_actions))
        self._add(f"{group}/b3", np.zeros(num_actions))

    def rebuild_from(self, values: dict[str, np.ndarray]) -> None:
        for name, t in self.params.items():
            t.data = np.array(values[name], dtype=np.float64)

    def clone(self) -> "MLPNet":
        twin = MLPNet(self.vehicles, self.features, self.num_actions,
                      self.hidden, group=self._group)
        twin.rebuild_from({n: t.data for n, t in self.params.items()})
        for t in twin.params.values():
            t.requires_grad = False
        return twin

    def forward(self, obs: Tensor) -> Tensor:
        g = self._group
        b = obs.shape[0]
        x = T.reshape(obs, (b, self.vehicles * self.features))
        x = T.relu(T.add(T.matmul(x, self.params[f"{g}/w1"]), self.params[f"{g}/b1"]))
        x = T.relu(T.add(T.matmul(x, self.params[f"{g}/w2"]), self.params[f"{g}/b2"]))
        return T.add(T.matmul(x, self.params[f"{g}/w3"]), self.params[f"{g}/b3"])


class MixActionsNet(_ParamMixin):
    """Blend the Q-outputs of N flat MLPs with softmax-normalized learnable
    scalars. The scalars are shared across vehicles and observations, which
    is exactly the limitation the token-level mixture removes."""

    kind = "mix_actions"

    def __init__(self, num_policies: int = 2, vehicles: int = 15, features: int = 5,
                 num_actions: int = 5, hidden: int = 256, seed: int = 0):
        self.num_policies = num_policies
        self.params: dict[str, Tensor] = {}
        self.members = []
        for i in range(num_policies):
            member = MLPNet(vehicles, features, num_actions, hidden,
                            seed=seed + i, group=f"mlp_{i}")
            self.members.append(member)
            self.params.update(member.params)
        self._add("mix_w", np.zeros(num_policies))

    def forward(self, obs: Tensor) -> Tensor:
        weights = T.softmax(self.params["mix_w"], axis=-1)
        out = None
        for i, member in enumerate(self.members):
            w_i = T.reshape(weights[i:i + 1], (1, 1))
            contrib = T.mul(w_i, member.forward(obs))
            out = contrib if out is None else T.add(out, contrib)
        return out


def apply_freeze(net: MoPNetwork, phase: str) -> dict[str, bool]:
    """Set per-group trainability for a training phase.

    offline_distill: decoder, router and the first (distillation) policy
    train; the adapter encoder and the gate are frozen with the gate pinned
    to zero. online_adapt: the first policy freezes; everything else trains.
    """
    if phase == "offline_distill":
        mask = {"theta_d": True, "theta_r": True, "theta_p1": True,
                "theta_p2": False, "gate": False}
        net.params["gate"].data[:] = 0.0
    elif phase == "online_adapt":
        mask = {"theta_d": True, "theta_r": True, "theta_p1": False,
                "theta_p2": True, "gate": True}
    else:
        raise ValueError(f"unknown phase {phase!r}; expected one of {PHASES}")
    for group, flag in mask.items():
        net.set_trainable(group, flag)
    return mask


def network_meta(net) -> dict:
    """Checkpoint header metadata sufficient to rebuild the network."""
    if isinstance(net, MoPNetwork):
        return {"kind": "mop", "config": asdict(net.config)}
    if isinstance(net, MLPNet):
        return {"kind": "mlp", "config": {"vehicles": net.vehicles,
                                          "features": net.features,
                                          "num_actions": net.num_actions,
                                          "hidden": net.hidden}}
    raise ValueError(f"cannot serialize network of type {type(net).__name__}")


def network_from_meta(meta: dict):
    kind = meta.get("kind")
    if kind == "mop":
        return MoPNetwork(MoPConfig(**meta["config"]))
    if kind == "mlp":
        return MLPNet(**meta["config"])
    raise ValueError(f"unknown network kind {kind!r} in checkpoint")
