"""Policy and value networks built on the autodiff tensor core.

Actors are diagonal Gaussians with a state-independent trainable log-std
and a tanh MLP trunk; the fine-tuning variants prepend a multi-head
self-attention block over entity tokens whose ego-row output is projected
and residual-added to the trunk input.  The attention output projection is
zero-initialized, so an actor that loads pre-trained trunk weights behaves
identically to the pre-trained MLP at initialization.

Critics come in two forms: twin Q-networks over (observation, action) for
conservative offline training, and a single state-value network shared by
all agents during on-policy fine-tuning.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from crosscoord import checkpoint
from crosscoord.spaces import ACTION_DIM, ACTION_RANGE, ROLES, ObsLayout
from crosscoord.tensor import Tape, Tensor, concat

log = logging.getLogger(__name__)

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
LN_2PI = math.log(2.0 * math.pi)
_MASK_OFFSET = -1e30  # exp() underflows to exactly 0.0, so masked slots contribute nothing

DEFAULT_HIDDEN = (128, 128)
DEFAULT_D_MODEL = 64
DEFAULT_N_HEADS = 4
DEFAULT_D_K = 16


class NonFiniteGradient(RuntimeError):
    """A gradient contained NaN or inf; the optimizer refused the update."""


def _init_linear(rng: np.random.Generator, fan_in: int, fan_out: int,
                 zero: bool = False) -> tuple[np.ndarray, np.ndarray]:
    if zero:
        w = np.zeros((fan_in, fan_out))
    else:
        w = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))
    return w, np.zeros(fan_out)


class Mlp:
    """Fully connected tanh network with a linear output layer."""

    def __init__(self, sizes: tuple[int, ...], rng: np.random.Generator,
                 zero_final: bool = False):
        self.sizes = tuple(sizes)
        self.layers: list[tuple[Tensor, Tensor]] = []
        last = len(sizes) - 2
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            w, b = _init_linear(rng, fan_in, fan_out, zero=zero_final and i == last)
            self.layers.append((Tensor.param(w), Tensor.param(b)))

    def forward(self, x: Tensor) -> Tensor:
        for i, (w, b) in enumerate(self.layers):
            x = x.matmul(w).add(b)
            if i < len(self.layers) - 1:
                x = x.tanh()
        return x

    def parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(self.layers):
            out.append((f"{prefix}w{i}", w))
            out.append((f"{prefix}b{i}", b))
        return out


@dataclass
class MhsaParams:
    """Projection matrices for one multi-head self-attention block."""

    w_embed: Tensor            # (feature_dim, d_model)
    w_q: list[Tensor]          # per head, (d_model, d_k)
    w_k: list[Tensor]
    w_v: list[Tensor]
    w_out: Tensor              # (n_heads * d_k, d_model)

    @classmethod
    def create(cls, rng: np.random.Generator, feature_dim: int,
               d_model: int = DEFAULT_D_MODEL, n_heads: int = DEFAULT_N_HEADS,
               d_k: int = DEFAULT_D_K) -> "MhsaParams":
        def mat(a, b):
            return Tensor.param(rng.normal(0.0, 1.0 / math.sqrt(a), size=(a, b)))

        return cls(
            w_embed=mat(feature_dim, d_model),
            w_q=[mat(d_model, d_k) for _ in range(n_heads)],
            w_k=[mat(d_model, d_k) for _ in range(n_heads)],
            w_v=[mat(d_model, d_k) for _ in range(n_heads)],
            w_out=mat(n_heads * d_k, d_model),
        )

    @property
    def n_heads(self) -> int:
        return len(self.w_q)

    @property
    def d_k(self) -> int:
        return self.w_q[0].data.shape[1]

    @property
    def d_model(self) -> int:
        return self.w_embed.data.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.w_embed.data.shape[0]

    def parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = [(f"{prefix}w_embed", self.w_embed)]
        for i in range(self.n_heads):
            out.append((f"{prefix}h{i}/w_q", self.w_q[i]))
            out.append((f"{prefix}h{i}/w_k", self.w_k[i]))
            out.append((f"{prefix}h{i}/w_v", self.w_v[i]))
        out.append((f"{prefix}w_out", self.w_out))
        return out


def mhsa_forward(tokens, valid, params: MhsaParams,
                 return_weights: bool = False):
    """Scaled dot-product self-attention over entity tokens.

    tokens: (n, feature_dim) or (batch, n, feature_dim), numpy or Tensor.
    valid:  matching (n,) or (batch, n) mask in {0, 1}; masked tokens get a
            large negative additive score, so they receive exactly zero
            attention weight and contribute nothing to any valid row.

    Returns (batch, n, d_model) (or (n, d_model) for unbatched input); with
    return_weights=True also returns the detached per-head weights
    (n_heads, batch, n, n).
    """
    t = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    v = np.asarray(valid, dtype=np.float64)
    unbatched = t.data.ndim == 2
    if unbatched:
        t = t.reshape((1,) + t.data.shape)
        v = v[None, :]
    b, n, _ = t.data.shape
    if v.shape != (b, n):
        raise ValueError(f"valid mask shape {v.shape} does not match tokens {(b, n)}")
    if np.any(v.sum(axis=-1) == 0):
        raise ValueError("attention over zero valid tokens is undefined")

    embedded = t.matmul(params.w_embed)                      # (b, n, d_model)
    additive = Tensor((v - 1.0) * -_MASK_OFFSET)             # 0 for valid, -1e30 for masked
    additive = additive.reshape(b, 1, n).expand(b, n, n)
    scale = 1.0 / math.sqrt(params.d_k)

    heads = []
    weights = []
    for i in range(params.n_heads):
        q = embedded.matmul(params.w_q[i])
        k = embedded.matmul(params.w_k[i])
        vv = embedded.matmul(params.w_v[i])
        scores = q.matmul(k.swap_last2()).mul(scale).add(additive)
        attn = scores.softmax(axis=-1)                       # (b, n, n)
        heads.append(attn.matmul(vv))
        if return_weights:
            weights.append(attn.data.copy())
    out = concat(heads, axis=-1).matmul(params.w_out)        # (b, n, d_model)

    if unbatched:
        out = out.reshape(n, params.d_model)
    if return_weights:
        w = np.stack(weights)
        return out, (w[:, 0] if unbatched else w)
    return out


@dataclass
class GaussianActor:
    """Role-conditioned diagonal-Gaussian policy head."""

    layout: ObsLayout
    trunk: Mlp
    log_std: Tensor                      # (ACTION_DIM,), state independent
    norm_mean: np.ndarray                # input standardization, from the corpus
    norm_std: np.ndarray
    role: str = "straight"
    mhsa: MhsaParams | None = None
    attn_proj: Tensor | None = None      # (d_model, obs_dim), zero at creation

    def forward(self, obs: np.ndarray) -> tuple[Tensor, Tensor]:
        """Map raw observations to (mean (B, 2), clamped log-std (2,))."""
        obs = np.asarray(obs, dtype=np.float64)
        flat = obs.ndim == 1
        if flat:
            obs = obs[None, :]
        clean = self.layout.sanitize(obs)
        x = Tensor((clean - self.norm_mean) / self.norm_std)
        if self.mhsa is not None:
            tokens, valid = self.layout.to_tokens(clean)
            attended = mhsa_forward(tokens, valid, self.mhsa)
            ego = attended.narrow(1, 0, 1).reshape(obs.shape[0], self.mhsa.d_model)
            x = x.add(ego.matmul(self.attn_proj))
        mean = self.trunk.forward(x)
        return mean, self.log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)

    def mean_action(self, obs: np.ndarray) -> np.ndarray:
        """Deterministic (pre-clamp) action for a single observation."""
        obs = np.asarray(obs, dtype=np.float64)
        if obs.ndim == 1:
            mean, _ = self.forward(obs[None, :])
            return mean.data[0]
        mean, _ = self.forward(obs)
        return mean.data

    def parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = self.trunk.parameters(prefix=f"{prefix}trunk/")
        out.append((f"{prefix}log_std", self.log_std))
        if self.mhsa is not None:
            out.extend(self.mhsa.parameters(prefix=f"{prefix}mhsa/"))
            out.append((f"{prefix}attn_proj", self.attn_proj))
        return out


def log_prob_and_entropy(mean: Tensor, log_std: Tensor,
                         actions: np.ndarray) -> tuple[Tensor, Tensor]:
    """Diagonal-Gaussian log density of given actions, plus policy entropy.

    Actions are the raw sampled values (clamping to the physical bounds
    happens downstream and does not enter the density).
    """
    if not np.all(np.isfinite(log_std.data)):
        # log-std of -inf is a zero std; the density is undefined there
        raise ValueError("std must be strictly positive (finite log-std)")
    a = Tensor(np.asarray(actions, dtype=np.float64))
    z = a.sub(mean).mul(log_std.neg().exp())                 # (B, 2) * (2,) suffix broadcast
    dim = mean.data.shape[-1]
    quad = z.square().sum(axis=-1).mul(-0.5)
    logp = quad.sub(log_std.sum().add(0.5 * dim * LN_2PI))
    entropy = log_std.sum().add(0.5 * dim * (LN_2PI + 1.0))
    return logp, entropy


@dataclass
class TwinCritic:
    """Two independent Q(o, a) heads; pessimistic targets take their min."""

    q1: Mlp
    q2: Mlp
    layout: ObsLayout = field(default_factory=ObsLayout)

    def forward(self, obs: np.ndarray, action) -> tuple[Tensor, Tensor]:
        """Q values (B,) from both heads; action may be a Tensor to let
        gradients reach an actor that produced it."""
        obs = self.layout.sanitize(np.asarray(obs, dtype=np.float64))
        a = action if isinstance(action, Tensor) else Tensor(np.asarray(action, dtype=np.float64))
        x = concat([Tensor(obs), a], axis=-1)
        b = obs.shape[0]
        return (self.q1.forward(x).reshape(b), self.q2.forward(x).reshape(b))

    def parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return (self.q1.parameters(prefix=f"{prefix}q1/")
                + self.q2.parameters(prefix=f"{prefix}q2/"))


@dataclass
class ValueNet:
    """State-value network, optionally attention-augmented like the actors."""

    layout: ObsLayout
    trunk: Mlp
    mhsa: MhsaParams | None = None
    attn_proj: Tensor | None = None

    def forward(self, obs: np.ndarray) -> Tensor:
        obs = np.asarray(obs, dtype=np.float64)
        if obs.ndim == 1:
            obs = obs[None, :]
        clean = self.layout.sanitize(obs)
        x = Tensor(clean)
        if self.mhsa is not None:
            tokens, valid = self.layout.to_tokens(clean)
            attended = mhsa_forward(tokens, valid, self.mhsa)
            ego = attended.narrow(1, 0, 1).reshape(obs.shape[0], self.mhsa.d_model)
            x = x.add(ego.matmul(self.attn_proj))
        return self.trunk.forward(x).reshape(obs.shape[0])

    def values(self, obs: np.ndarray) -> np.ndarray:
        return self.forward(obs).data

    def parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = self.trunk.parameters(prefix=f"{prefix}trunk/")
        if self.mhsa is not None:
            out.extend(self.mhsa.parameters(prefix=f"{prefix}mhsa/"))
            out.append((f"{prefix}attn_proj", self.attn_proj))
        return out


# -- factories ---------------------------------------------------------------


def _default_log_std() -> np.ndarray:
    # start exploration at 10% of each action range
    return np.log(0.1 * ACTION_RANGE)


def make_offline_actor(layout: ObsLayout, hidden: tuple[int, ...],
                       rng: np.random.Generator, role: str,
                       norm_mean: np.ndarray | None = None,
                       norm_std: np.ndarray | None = None) -> GaussianActor:
    trunk = Mlp((layout.dim, *hidden, ACTION_DIM), rng, zero_final=True)
    return GaussianActor(
        layout=layout, trunk=trunk, log_std=Tensor.param(_default_log_std()),
        norm_mean=np.zeros(layout.dim) if norm_mean is None else np.asarray(norm_mean, dtype=np.float64),
        norm_std=np.ones(layout.dim) if norm_std is None else np.asarray(norm_std, dtype=np.float64),
        role=role)


def make_online_actor(layout: ObsLayout, hidden: tuple[int, ...],
                      rng: np.random.Generator, role: str,
                      d_model: int = DEFAULT_D_MODEL, n_heads: int = DEFAULT_N_HEADS,
                      d_k: int = DEFAULT_D_K,
                      init_from: GaussianActor | None = None) -> GaussianActor:
    """Attention-augmented actor; with init_from, trunk weights, log-std and
    normalization are copied so initial behavior matches the source actor
    exactly (the attention branch projects through a zero matrix)."""
    actor = make_offline_actor(layout, hidden, rng, role)
    actor.mhsa = MhsaParams.create(rng, layout.token_dim, d_model, n_heads, d_k)
    actor.attn_proj = Tensor.param(np.zeros((d_model, layout.dim)))
    if init_from is not None:
        if init_from.trunk.sizes != actor.trunk.sizes:
            raise ValueError(f"trunk sizes {init_from.trunk.sizes} != {actor.trunk.sizes}")
        for (w_dst, b_dst), (w_src, b_src) in zip(actor.trunk.layers, init_from.trunk.layers):
            w_dst.data = w_src.data.copy()
            b_dst.data = b_src.data.copy()
        actor.log_std.data = init_from.log_std.data.copy()
        actor.norm_mean = init_from.norm_mean.copy()
        actor.norm_std = init_from.norm_std.copy()
    return actor


def make_twin_critic(layout: ObsLayout, hidden: tuple[int, ...],
                     rng: np.random.Generator) -> TwinCritic:
    sizes = (layout.dim + ACTION_DIM, *hidden, 1)
    return TwinCritic(q1=Mlp(sizes, rng), q2=Mlp(sizes, rng), layout=layout)


def make_value_net(layout: ObsLayout, hidden: tuple[int, ...],
                   rng: np.random.Generator, d_model: int = DEFAULT_D_MODEL,
                   n_heads: int = DEFAULT_N_HEADS, d_k: int = DEFAULT_D_K,
                   with_attention: bool = True) -> ValueNet:
    net = ValueNet(layout=layout, trunk=Mlp((layout.dim, *hidden, 1), rng))
    if with_attention:
        net.mhsa = MhsaParams.create(rng, layout.token_dim, d_model, n_heads, d_k)
        net.attn_proj = Tensor.param(np.zeros((d_model, layout.dim)))
    return net


def clone_params(net) -> list[np.ndarray]:
    return [p.data.copy() for _, p in net.parameters()]


# -- optimization ------------------------------------------------------------


class Adam:
    """Adam with bias correction; refuses non-finite gradients outright."""

    def __init__(self, params: list[tuple[str, Tensor]], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}
        self.t = {name: 0 for name, _ in self.params}

    def step(self) -> None:
        """Apply one update from accumulated grads; params without a grad
        are skipped.  Raises NonFiniteGradient before touching anything if
        any present gradient is NaN/inf."""
        for name, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                log.warning("non-finite gradient for %s; update skipped", name)
                raise NonFiniteGradient(name)
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            t = self.t[name] + 1
            self.t[name] = t
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def grad_clip(params: list[tuple[str, Tensor]], max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is <= max_norm.

    Returns the pre-clip norm."""
    total = 0.0
    for _, p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for _, p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def soft_update(target_params: list[tuple[str, Tensor]],
                online_params: list[tuple[str, Tensor]], tau: float) -> None:
    """Polyak averaging: target <- tau * online + (1 - tau) * target."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    for (tn, tp), (on, op) in zip(target_params, online_params):
        if tn != on or tp.data.shape != op.data.shape:
            raise ValueError(f"parameter mismatch: {tn}{tp.data.shape} vs {on}{op.data.shape}")
        tp.data = tau * op.data + (1.0 - tau) * tp.data


# -- persistence ---------------------------------------------------------------


def actor_to_file(path, actor: GaussianActor, extra_manifest: dict | None = None) -> None:
    params = {name: p.data for name, p in actor.parameters()}
    params["norm/mean"] = actor.norm_mean
    params["norm/std"] = actor.norm_std
    manifest = {
        "kind": "gaussian_actor",
        "role": actor.role,
        "hidden": list(actor.trunk.sizes[1:-1]),
        "obs_layout": {"n_vehicle_slots": actor.layout.n_vehicle_slots,
                       "n_ped_slots": actor.layout.n_ped_slots},
        "attention": None if actor.mhsa is None else {
            "d_model": actor.mhsa.d_model, "n_heads": actor.mhsa.n_heads,
            "d_k": actor.mhsa.d_k},
    }
    manifest.update(extra_manifest or {})
    checkpoint.save_params(path, params, manifest)


def actor_from_file(path) -> tuple[GaussianActor, dict]:
    params, manifest = checkpoint.load_params(path)
    if manifest.get("kind") != "gaussian_actor":
        raise ValueError(f"{path} is not an actor checkpoint")
    layout = ObsLayout(**manifest["obs_layout"])
    rng = np.random.default_rng(0)  # placeholder init, overwritten below
    att = manifest.get("attention")
    if att is None:
        actor = make_offline_actor(layout, tuple(manifest["hidden"]), rng, manifest["role"])
    else:
        actor = make_online_actor(layout, tuple(manifest["hidden"]), rng, manifest["role"],
                                  d_model=att["d_model"], n_heads=att["n_heads"],
                                  d_k=att["d_k"])
    for name, p in actor.parameters():
        p.data = np.array(params[name])
    actor.norm_mean = np.array(params["norm/mean"])
    actor.norm_std = np.array(params["norm/std"])
    return actor, manifest


def critic_to_file(path, critic: TwinCritic, extra_manifest: dict | None = None) -> None:
    params = {name: p.data for name, p in critic.parameters()}
    manifest = {
        "kind": "twin_critic",
        "hidden": list(critic.q1.sizes[1:-1]),
        "obs_layout": {"n_vehicle_slots": critic.layout.n_vehicle_slots,
                       "n_ped_slots": critic.layout.n_ped_slots},
    }
    manifest.update(extra_manifest or {})
    checkpoint.save_params(path, params, manifest)


def critic_from_file(path) -> tuple[TwinCritic, dict]:
    params, manifest = checkpoint.load_params(path)
    if manifest.get("kind") != "twin_critic":
        raise ValueError(f"{path} is not a twin-critic checkpoint")
    layout = ObsLayout(**manifest["obs_layout"])
    critic = make_twin_critic(layout, tuple(manifest["hidden"]), np.random.default_rng(0))
    for name, p in critic.parameters():
        p.data = np.array(params[name])
    return critic, manifest


def value_net_to_file(path, net: ValueNet, extra_manifest: dict | None = None) -> None:
    params = {name: p.data for name, p in net.parameters()}
    manifest = {
        "kind": "value_net",
        "hidden": list(net.trunk.sizes[1:-1]),
        "obs_layout": {"n_vehicle_slots": net.layout.n_vehicle_slots,
                       "n_ped_slots": net.layout.n_ped_slots},
        "attention": None if net.mhsa is None else {
            "d_model": net.mhsa.d_model, "n_heads": net.mhsa.n_heads, "d_k": net.mhsa.d_k},
    }
    manifest.update(extra_manifest or {})
    checkpoint.save_params(path, params, manifest)


def value_net_from_file(path) -> tuple[ValueNet, dict]:
    params, manifest = checkpoint.load_params(path)
    if manifest.get("kind") != "value_net":
        raise ValueError(f"{path} is not a value-net checkpoint")
    layout = ObsLayout(**manifest["obs_layout"])
    att = manifest.get("attention")
    net = make_value_net(layout, tuple(manifest["hidden"]), np.random.default_rng(0),
                         with_attention=att is not None,
                         **({} if att is None else
                            {"d_model": att["d_model"], "n_heads": att["n_heads"],
                             "d_k": att["d_k"]}))
    for name, p in net.parameters():
        p.data = np.array(params[name])
    return net, manifest
