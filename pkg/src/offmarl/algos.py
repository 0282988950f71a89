"""Offline multi-agent Q-learning algorithms.

Six variants share the same machinery:

* MA-CIQL / MA-CCQL: value heads, squared Bellman loss (independent or
  VDN-summed) plus a conservative penalty
  ``alpha * (logsumexp_a Q(s,a) - Q(s,a_taken))`` that depresses Q-values of
  actions absent from the dataset.
* MA-CIQR / MA-CCQR: quantile heads estimating the lower ``xi`` tail of the
  return distribution at N levels, trained with the asymmetric quantile
  Huber loss over all N x N TD pairs, plus the same penalty applied per
  quantile.
* MA-DQN and MA-QR-DQN are the ``alpha = 0`` (and ``xi = 1``) special cases
  of the independent variants and serve as non-conservative baselines.

Training follows the iterate/gradient-step schedule: targets are frozen
copies refreshed at the start of each of the K outer iterations, and every
gradient step samples one batch shared by all agents.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .dataset import Dataset, sample_batch
from .env import EnvConfig, encode_states
from .errors import ConfigError, DivergenceError
from .nets import (MlpNet, clip_bundles_global_norm, logsumexp_rows,
                   logsumexp_stable, softmax_rows)
from .seeding import STREAM_BATCH, STREAM_NET_INIT, substream

ALGORITHMS = ("MA-DQN", "MA-QR-DQN", "MA-CIQL", "MA-CIQR", "MA-CCQL", "MA-CCQR")
_DISTRIBUTIONAL = frozenset({"MA-QR-DQN", "MA-CIQR", "MA-CCQR"})
_CENTRALIZED = frozenset({"MA-CCQL", "MA-CCQR"})

LR_DEFAULT_VALUE = 1e-4
LR_DEFAULT_DISTRIBUTIONAL = 1e-5


@dataclass(frozen=True)
class TrainerConfig:
    algorithm: str
    alpha: float = 1.0
    xi: float = 1.0
    num_quantiles: int = 32
    gamma: float = 0.99
    lr: float | None = None            # None resolves to the per-family default
    batch_size: int = 128
    iterations: int = 150              # K
    grad_steps_per_iter: int = 500     # G
    seed: int = 0
    hidden_dims: tuple = (256, 256)
    grad_clip: float | None = 10.0     # global-norm divergence guard; None disables

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if not 0.0 < self.xi <= 1.0:
            raise ConfigError(f"xi must lie in (0, 1], got {self.xi}")
        if self.num_quantiles < 1:
            raise ConfigError("num_quantiles must be at least 1")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.batch_size < 1 or self.grad_steps_per_iter < 1 or self.iterations < 0:
            raise ConfigError("batch_size/grad_steps_per_iter must be >= 1, iterations >= 0")
        if self.lr is not None and self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive (or null to disable)")
        if self.algorithm == "MA-DQN" and self.alpha != 0.0:
            raise ConfigError("MA-DQN is the alpha=0 case; set alpha=0 or use MA-CIQL")
        if self.algorithm == "MA-QR-DQN" and (self.alpha != 0.0 or self.xi != 1.0):
            raise ConfigError("MA-QR-DQN is the alpha=0, xi=1 case; use MA-CIQR otherwise")

    @property
    def is_distributional(self) -> bool:
        return self.algorithm in _DISTRIBUTIONAL

    @property
    def is_centralized(self) -> bool:
        return self.algorithm in _CENTRALIZED

    @property
    def resolved_lr(self) -> float:
        if self.lr is not None:
            return self.lr
        return LR_DEFAULT_DISTRIBUTIONAL if self.is_distributional else LR_DEFAULT_VALUE

    @property
    def head_quantiles(self) -> int:
        """Quantile values per action in the head layout (1 for value heads)."""
        return self.num_quantiles if self.is_distributional else 1

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "TrainerConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown trainer config keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "hidden_dims" in kwargs:
            kwargs["hidden_dims"] = tuple(int(v) for v in kwargs["hidden_dims"])
        return cls(**kwargs)


@dataclass
class AgentHeads:
    """One agent's online network and its frozen target copy."""

    online: MlpNet
    target: MlpNet

    def sync_target(self) -> None:
        self.target = self.online.clone()


# -- loss primitives -----------------------------------------------------------


def quantile_midpoints(num_quantiles: int, xi: float) -> np.ndarray:
    """Quantile targets tau_hat_j = (tau_{j-1} + tau_j)/2 with tau_j = xi*j/N.

    Restricting the levels to (0, xi] makes the head cover only the lower
    tail of the return distribution, so the mean of the N estimates is a
    CVaR_xi estimate.
    """
    if num_quantiles < 1:
        raise ConfigError("num_quantiles must be at least 1")
    if not 0.0 < xi <= 1.0:
        raise ConfigError(f"xi must lie in (0, 1], got {xi}")
    taus = xi * np.arange(1, num_quantiles + 1) / num_quantiles
    prev = xi * np.arange(0, num_quantiles) / num_quantiles
    return (prev + taus) / 2.0


def quantile_huber(u, tau):
    """Asymmetric Huber pinball loss |tau - 1{u<0}| * H(u), kappa = 1."""
    u = np.asarray(u, dtype=np.float64)
    weight = np.abs(tau - (u < 0.0))
    au = np.abs(u)
    h = np.where(au <= 1.0, 0.5 * u * u, au - 0.5)
    out = weight * h
    return float(out) if out.ndim == 0 else out


def quantile_huber_grad(u, tau):
    """d/du of quantile_huber: |tau - 1{u<0}| * clip(u, -1, 1)."""
    u = np.asarray(u, dtype=np.float64)
    weight = np.abs(tau - (u < 0.0))
    out = weight * np.clip(u, -1.0, 1.0)
    return float(out) if out.ndim == 0 else out


def cql_penalty(q_row, taken: int) -> float:
    """logsumexp of the action row minus the taken entry; >= 0 always."""
    q_row = np.asarray(q_row, dtype=np.float64)
    if not 0 <= taken < q_row.shape[0]:
        raise ConfigError(f"taken action {taken} out of range for row of {q_row.shape[0]}")
    return logsumexp_stable(q_row) - float(q_row[taken])


def greedy_action(head_output, num_quantiles: int = 1) -> int:
    """Greedy action from one head output; quantile heads use the mean over N.

    Ties break to the lowest action index.
    """
    out = np.asarray(head_output, dtype=np.float64)
    if num_quantiles > 1:
        out = out.reshape(-1, num_quantiles).mean(axis=1)
    return int(np.argmax(out))


def quantile_td_matrix(reward: float, x_enc, x2_enc, action: int,
                       online: MlpNet, target: MlpNet, gamma: float,
                       num_actions: int, num_quantiles: int) -> np.ndarray:
    """N x N TD errors for one transition (reference single-item form).

    Entry (j, j') is ``r + gamma * theta_target_j'(s', a') - theta_j(s, a)``
    with a' the greedy action under the target's quantile means.
    """
    th = online.forward(x_enc).reshape(num_actions, num_quantiles)
    th2 = target.forward(x2_enc).reshape(num_actions, num_quantiles)
    a2 = int(np.argmax(th2.mean(axis=1)))
    y = reward + gamma * th2[a2]                      # (N,) over j'
    return y[None, :] - th[action][:, None]           # (j, j')


def vdn_target(reward: float, x2_enc, target_nets, gamma: float) -> float:
    """Decomposed Bellman target: r + gamma * sum_i max_a Q_target_i(s', a)."""
    total = 0.0
    for net in target_nets:
        total += float(np.max(net.forward(x2_enc)))
    return reward + gamma * total


# -- losses with exact gradients -------------------------------------------------
#
# Each returns (scalar loss, gradient bundle(s) for the online nets). The
# target side is a separate frozen network, so it is gradient-stopped by
# construction.


def _check_finite(loss: float, label: str) -> float:
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite {label} loss")
    return float(loss)


def ma_ciql_loss(x_enc, actions, rewards, x2_enc, online: MlpNet, target: MlpNet,
                 alpha: float, gamma: float):
    """Independent conservative Q-loss for one agent on one batch."""
    n = x_enc.shape[0]
    rows = np.arange(n)
    q2 = target.forward_batch(x2_enc)
    y = rewards + gamma * q2.max(axis=1)
    q, acts = online.forward_batch_cached(x_enc)
    taken_q = q[rows, actions]
    residual = y - taken_q
    loss = 0.5 * float(np.mean(residual ** 2))
    grad = np.zeros_like(q)
    grad[rows, actions] = -residual / n
    if alpha != 0.0:
        lse = logsumexp_rows(q)
        loss += alpha * float(np.mean(lse - taken_q))
        grad += (alpha / n) * softmax_rows(q)
        grad[rows, actions] -= alpha / n
    return _check_finite(loss, "MA-CIQL"), online.backward_batch(x_enc, grad, acts=acts)


def _quantile_lse_softmax(th: np.ndarray):
    """Per-quantile logsumexp/softmax over the action axis of a (B, A, N) array."""
    n, num_actions, num_q = th.shape
    flat = np.ascontiguousarray(th.transpose(0, 2, 1)).reshape(n * num_q, num_actions)
    lse = logsumexp_rows(flat).reshape(n, num_q)
    sm = softmax_rows(flat).reshape(n, num_q, num_actions).transpose(0, 2, 1)
    return lse, sm


def ma_ciqr_loss(x_enc, actions, rewards, x2_enc, online: MlpNet, target: MlpNet,
                 alpha: float, gamma: float, midpoints: np.ndarray, num_actions: int):
    """Independent conservative quantile-regression loss for one agent."""
    n = x_enc.shape[0]
    num_q = midpoints.shape[0]
    rows = np.arange(n)

    th2 = target.forward_batch(x2_enc).reshape(n, num_actions, num_q)
    a2 = np.argmax(th2.mean(axis=2), axis=1)
    y = rewards[:, None] + gamma * th2[rows, a2]          # (B, N) over j'

    th_flat, acts = online.forward_batch_cached(x_enc)
    th = th_flat.reshape(n, num_actions, num_q)
    th_taken = th[rows, actions]                          # (B, N) over j

    delta = y[:, None, :] - th_taken[:, :, None]          # (B, j, j')
    weight = np.abs(midpoints[None, :, None] - (delta < 0.0))
    abs_d = np.abs(delta)
    huber = np.where(abs_d <= 1.0, 0.5 * delta * delta, abs_d - 0.5)
    denom = 2.0 * num_q * num_q
    loss = float((weight * huber).sum(axis=(1, 2)).mean()) / denom

    d_taken = -(weight * np.clip(delta, -1.0, 1.0)).sum(axis=2) / (denom * n)  # (B, j)
    grad3 = np.zeros_like(th)
    grad3[rows, actions] = d_taken

    if alpha != 0.0:
        lse, sm = _quantile_lse_softmax(th)               # (B,N), (B,A,N)
        loss += alpha * float(np.mean((lse - th_taken).sum(axis=1) / num_q))
        grad3 += (alpha / (num_q * n)) * sm
        grad3[rows, actions] -= alpha / (num_q * n)

    grad = grad3.reshape(n, num_actions * num_q)
    return _check_finite(loss, "MA-CIQR"), online.backward_batch(x_enc, grad, acts=acts)


def ma_ccql_loss(x_enc, actions, rewards, x2_enc, heads, alpha: float, gamma: float):
    """Centralized (VDN-decomposed) conservative Q-loss; one bundle per agent."""
    n = x_enc.shape[0]
    rows = np.arange(n)
    y = rewards.astype(np.float64).copy()
    for h in heads:
        y += gamma * h.target.forward_batch(x2_enc).max(axis=1)

    qs, caches, takens = [], [], []
    joint = np.zeros(n)
    for i, h in enumerate(heads):
        q, acts = h.online.forward_batch_cached(x_enc)
        qs.append(q)
        caches.append(acts)
        taken = q[rows, actions[:, i]]
        takens.append(taken)
        joint += taken
    residual = y - joint
    loss = 0.5 * float(np.mean(residual ** 2))

    bundles = []
    for i, h in enumerate(heads):
        grad = np.zeros_like(qs[i])
        grad[rows, actions[:, i]] = -residual / n
        if alpha != 0.0:
            lse = logsumexp_rows(qs[i])
            loss += alpha * float(np.mean(lse - takens[i]))
            grad += (alpha / n) * softmax_rows(qs[i])
            grad[rows, actions[:, i]] -= alpha / n
        bundles.append(h.online.backward_batch(x_enc, grad, acts=caches[i]))
    return _check_finite(loss, "MA-CCQL"), bundles


def ma_ccqr_loss(x_enc, actions, rewards, x2_enc, heads, alpha: float, gamma: float,
                 midpoints: np.ndarray, num_actions: int):
    """Centralized conservative quantile-regression loss on decomposed quantiles."""
    n = x_enc.shape[0]
    num_q = midpoints.shape[0]
    rows = np.arange(n)

    y = np.repeat(rewards[:, None], num_q, axis=1).astype(np.float64)  # (B, N) over j'
    for h in heads:
        th2 = h.target.forward_batch(x2_enc).reshape(n, num_actions, num_q)
        a2 = np.argmax(th2.mean(axis=2), axis=1)
        y += gamma * th2[rows, a2]

    ths, caches, takens = [], [], []
    th_sum = np.zeros((n, num_q))
    for i, h in enumerate(heads):
        th_flat, acts = h.online.forward_batch_cached(x_enc)
        th = th_flat.reshape(n, num_actions, num_q)
        ths.append(th)
        caches.append(acts)
        taken = th[rows, actions[:, i]]
        takens.append(taken)
        th_sum += taken

    delta = y[:, None, :] - th_sum[:, :, None]            # (B, j, j')
    weight = np.abs(midpoints[None, :, None] - (delta < 0.0))
    abs_d = np.abs(delta)
    huber = np.where(abs_d <= 1.0, 0.5 * delta * delta, abs_d - 0.5)
    denom = 2.0 * num_q * num_q
    loss = float((weight * huber).sum(axis=(1, 2)).mean()) / denom
    d_shared = -(weight * np.clip(delta, -1.0, 1.0)).sum(axis=2) / (denom * n)  # (B, j)

    bundles = []
    for i, h in enumerate(heads):
        grad3 = np.zeros_like(ths[i])
        grad3[rows, actions[:, i]] = d_shared
        if alpha != 0.0:
            lse, sm = _quantile_lse_softmax(ths[i])
            loss += alpha * float(np.mean((lse - takens[i]).sum(axis=1) / num_q))
            grad3 += (alpha / (num_q * n)) * sm
            grad3[rows, actions[:, i]] -= alpha / (num_q * n)
        grad = grad3.reshape(n, num_actions * num_q)
        bundles.append(h.online.backward_batch(x_enc, grad, acts=caches[i]))
    return _check_finite(loss, "MA-CCQR"), bundles


# -- training loop ---------------------------------------------------------------


@dataclass
class TrainResult:
    heads: list                 # AgentHeads per agent
    loss_per_step: np.ndarray   # mean loss across agents, one row per gradient step
    eval_trace: list            # (iteration, eval_hook result) when a hook is given


def build_heads(input_dim: int, num_actions: int, trainer: TrainerConfig,
                rng: np.random.Generator, num_agents: int):
    out_dim = num_actions * trainer.head_quantiles
    heads = []
    for _ in range(num_agents):
        online = MlpNet.he_uniform([input_dim, *trainer.hidden_dims, out_dim], rng)
        heads.append(AgentHeads(online=online, target=online.clone()))
    return heads


def fit_offline(ds: Dataset, trainer: TrainerConfig, num_actions: int, *,
                encode=None, initial_heads=None, eval_hook=None) -> TrainResult:
    """Run K iterations of G shared-batch gradient steps on the dataset.

    ``encode`` maps raw state arrays to network inputs (identity when None).
    ``initial_heads`` warm-starts training (networks and Adam state are
    copied, not mutated). Deterministic given ``trainer.seed``; an
    ``eval_hook(iteration, heads)`` observes but never perturbs training.
    """
    if len(ds) == 0:
        raise ConfigError("cannot train on an empty dataset")
    num_agents = ds.actions.shape[1]
    x_all = ds.states if encode is None else encode(ds.states)
    x2_all = ds.next_states if encode is None else encode(ds.next_states)
    x_all = np.ascontiguousarray(x_all, dtype=np.float64)
    x2_all = np.ascontiguousarray(x2_all, dtype=np.float64)

    if initial_heads is not None:
        heads = [AgentHeads(online=h.online.clone(with_adam=True),
                            target=h.online.clone()) for h in initial_heads]
    else:
        rng_init = substream(trainer.seed, STREAM_NET_INIT)
        heads = build_heads(x_all.shape[1], num_actions, trainer, rng_init, num_agents)

    rng_batch = substream(trainer.seed, STREAM_BATCH)
    midpoints = quantile_midpoints(trainer.num_quantiles, trainer.xi) \
        if trainer.is_distributional else None
    alpha, gamma, lr = trainer.alpha, trainer.gamma, trainer.resolved_lr

    losses = []
    eval_trace = []
    for iteration in range(trainer.iterations):
        for h in heads:
            h.sync_target()
        for _ in range(trainer.grad_steps_per_iter):
            idx = rng_batch.integers(0, len(ds), size=trainer.batch_size)
            bx, bx2 = x_all[idx], x2_all[idx]
            ba, br = ds.actions[idx], ds.rewards[idx]
            try:
                if trainer.is_centralized:
                    if trainer.is_distributional:
                        loss, bundles = ma_ccqr_loss(bx, ba, br, bx2, heads, alpha,
                                                     gamma, midpoints, num_actions)
                    else:
                        loss, bundles = ma_ccql_loss(bx, ba, br, bx2, heads, alpha, gamma)
                    if trainer.grad_clip is not None:
                        clip_bundles_global_norm(bundles, trainer.grad_clip)
                    for h, bundle in zip(heads, bundles):
                        h.online.adam_step(bundle, lr)
                    losses.append(loss)
                else:
                    agent_losses = []
                    for i, h in enumerate(heads):
                        if trainer.is_distributional:
                            loss_i, bundle = ma_ciqr_loss(bx, ba[:, i], br, bx2,
                                                          h.online, h.target, alpha,
                                                          gamma, midpoints, num_actions)
                        else:
                            loss_i, bundle = ma_ciql_loss(bx, ba[:, i], br, bx2,
                                                          h.online, h.target, alpha, gamma)
                        if trainer.grad_clip is not None:
                            clip_bundles_global_norm([bundle], trainer.grad_clip)
                        h.online.adam_step(bundle, lr)
                        agent_losses.append(loss_i)
                    losses.append(float(np.mean(agent_losses)))
            except DivergenceError as exc:
                raise DivergenceError(f"{exc} (iteration {iteration})") from exc
        if eval_hook is not None:
            eval_trace.append((iteration, eval_hook(iteration, heads)))
    return TrainResult(heads=heads, loss_per_step=np.array(losses), eval_trace=eval_trace)


def train(ds: Dataset, trainer: TrainerConfig, env_config: EnvConfig, *,
          initial_heads=None, eval_hook=None) -> TrainResult:
    """Offline training against a UAV-environment dataset (hash-checked)."""
    ds.validate_against(env_config)
    return fit_offline(ds, trainer, env_config.num_actions,
                       encode=lambda arr: encode_states(arr, env_config),
                       initial_heads=initial_heads, eval_hook=eval_hook)


def make_greedy_policies(heads, env_config: EnvConfig, trainer: TrainerConfig):
    """Per-agent greedy policies (EnvState -> action index) over trained heads."""
    num_q = trainer.head_quantiles

    def policy_for(head: AgentHeads):
        net = head.online

        def policy(state) -> int:
            enc = encode_states(state.to_vector(), env_config)
            return greedy_action(net.forward(enc), num_q)

        return policy

    return [policy_for(h) for h in heads]
