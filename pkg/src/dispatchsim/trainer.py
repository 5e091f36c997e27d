"""Replay buffer, TD targets, combined loss gradient and the training loop.

Experiences follow the six-tuple layout: state, chosen action, the full
action set it was drawn from, the next state and action set, and the stored
divergence-gradient coefficient of the taken transition. The coefficient is
frozen at experience-creation time; the policy sensitivity factor
``pi * (1 - pi) / tau`` is recomputed from the current online network over the
stored action set on every update, so only the chosen pair's score carries
the penalty gradient.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .domain import ConfigError, ContractViolation, FeatureCodec, Order, virtual_order
from .env import EnvConfig, OrderDispatchEnv
from .klmatch import DispatchFlow, GridDistribution, kl_policy_gradient, smooth
from .policies import GREEDY, BoltzmannPolicy, assign_with_policy, boltzmann_probs, nod_policy
from . import qnet
from .qnet import ArchSpec, NumericalError, OptimizerState, QNetworkParams

TARGET_MODES = ("expectation", "greedy")


@dataclass(frozen=True)
class TrainerConfig:
    gamma: float = 0.95
    learning_rate: float = 1e-4
    temperature: float = 1.0
    kl_weight: float = 0.0  # lambda; 0 disables distribution matching (IL baseline)
    tau_soft: float = 0.01
    batch_size: int = 256
    buffer_capacity: int = 100_000
    warmup: int = 1000
    train_steps_per_env_step: int = 1
    target_mode: str = "expectation"
    smoothing_epsilon: float = 1e-3
    optimizer: str = "adam"
    embed_dim: int = 32
    hidden1: int = 64
    hidden2: int = 32

    def __post_init__(self) -> None:
        if not (0.0 <= self.gamma <= 1.0):
            raise ConfigError("gamma must be in [0, 1]")
        if self.kl_weight < 0:
            raise ConfigError("kl_weight must be nonnegative")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if not (0.0 < self.tau_soft <= 1.0):
            raise ConfigError("tau_soft must be in (0, 1]")
        if self.batch_size < 1 or self.buffer_capacity < self.batch_size:
            raise ConfigError("need buffer_capacity >= batch_size >= 1")
        if self.target_mode not in TARGET_MODES:
            raise ConfigError(f"target_mode must be one of {TARGET_MODES}")
        if self.smoothing_epsilon <= 0:
            raise ConfigError("smoothing_epsilon must be positive")


@dataclass(frozen=True)
class Experience:
    state: np.ndarray
    action: np.ndarray
    action_set: np.ndarray  # (k, action_dim), includes the virtual order
    action_index: int  # row of ``action`` within ``action_set``
    next_state: np.ndarray
    next_action_set: np.ndarray  # (k', action_dim); empty only when terminal
    kl_coeff: float
    reward: float
    terminal: bool

    def __post_init__(self) -> None:
        if not (0 <= self.action_index < self.action_set.shape[0]):
            raise ContractViolation("action_index outside the stored action set")
        if not np.array_equal(self.action, self.action_set[self.action_index]):
            raise ContractViolation("action must be the indexed row of its action set")
        if not self.terminal and self.next_action_set.shape[0] == 0:
            raise ContractViolation("non-terminal experience needs a nonempty next action set")


class ReplayBuffer:
    """Fixed-capacity FIFO ring over experience columns."""

    def __init__(self, capacity: int, obs_dim: int, action_dim: int):
        if capacity < 1:
            raise ConfigError("capacity must be >= 1")
        self.capacity = capacity
        self.S = np.zeros((capacity, obs_dim))
        self.A = np.zeros((capacity, action_dim))
        self.action_index = np.zeros(capacity, dtype=np.int32)
        self.next_S = np.zeros((capacity, obs_dim))
        self.reward = np.zeros(capacity)
        self.kl = np.zeros(capacity)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.action_sets = np.empty(capacity, dtype=object)
        self.next_sets = np.empty(capacity, dtype=object)
        self.size = 0
        self.insertions = 0
        self._pos = 0

    def __len__(self) -> int:
        return self.size

    def add(self, exp: Experience) -> None:
        self.add_raw(
            exp.state,
            exp.action,
            exp.action_set,
            exp.action_index,
            exp.next_state,
            exp.next_action_set,
            exp.kl_coeff,
            exp.reward,
            exp.terminal,
        )

    def add_raw(self, state, action, action_set, action_index, next_state, next_set, kl, reward, terminal) -> None:
        if not terminal and next_set.shape[0] == 0:
            raise ContractViolation("non-terminal experience needs a nonempty next action set")
        i = self._pos
        self.S[i] = state
        self.A[i] = action
        self.action_index[i] = action_index
        self.next_S[i] = next_state
        self.reward[i] = reward
        self.kl[i] = kl
        self.terminal[i] = terminal
        self.action_sets[i] = action_set
        self.next_sets[i] = next_set
        self._pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.insertions += 1

    def get(self, i: int) -> Experience:
        if not (0 <= i < self.size):
            raise IndexError(i)
        return Experience(
            state=self.S[i].copy(),
            action=self.A[i].copy(),
            action_set=self.action_sets[i],
            action_index=int(self.action_index[i]),
            next_state=self.next_S[i].copy(),
            next_action_set=self.next_sets[i],
            kl_coeff=float(self.kl[i]),
            reward=float(self.reward[i]),
            terminal=bool(self.terminal[i]),
        )

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if batch_size > self.size:
            raise ContractViolation(f"buffer holds {self.size} experiences, cannot sample {batch_size}")
        return rng.choice(self.size, size=batch_size, replace=False, shuffle=False)


def sample_batch(buffer: ReplayBuffer, batch_size: int, rng: np.random.Generator) -> Optional[list[Experience]]:
    """Uniform batch without replacement, or None while the buffer is short."""
    if len(buffer) < batch_size:
        return None
    return [buffer.get(int(i)) for i in buffer.sample_indices(batch_size, rng)]


@dataclass(frozen=True)
class TDTarget:
    q_star: float
    residual: float


def compute_target(
    exp: Experience, online: QNetworkParams, target_net: QNetworkParams, cfg: TrainerConfig
) -> TDTarget:
    """Bootstrapped target; the online net weighs next actions, the target net values them."""
    if exp.terminal:
        q_star = exp.reward
    else:
        k = exp.next_action_set.shape[0]
        s_rep = np.repeat(exp.next_state[None, :], k, axis=0)
        q_online = qnet.forward(online, s_rep, exp.next_action_set)
        q_target = qnet.forward(target_net, s_rep, exp.next_action_set)
        if cfg.target_mode == "expectation":
            probs = boltzmann_probs(q_online, cfg.temperature)
            q_star = exp.reward + cfg.gamma * float(probs @ q_target)
        else:
            q_star = exp.reward + cfg.gamma * float(q_target[int(np.argmax(q_online))])
    q_sa = qnet.forward(online, exp.state, exp.action)
    return TDTarget(q_star=float(q_star), residual=abs(float(q_sa) - float(q_star)))


def _segment_starts(lengths: np.ndarray) -> np.ndarray:
    starts = np.zeros(lengths.size, dtype=int)
    np.cumsum(lengths[:-1], out=starts[1:])
    return starts


def _grads_core(
    S: np.ndarray,
    A: np.ndarray,
    action_index: np.ndarray,
    rewards: np.ndarray,
    kls: np.ndarray,
    terminals: np.ndarray,
    action_sets: Sequence[np.ndarray],
    next_S: np.ndarray,
    next_sets: Sequence[np.ndarray],
    online: QNetworkParams,
    target_net: QNetworkParams,
    cfg: TrainerConfig,
) -> tuple[QNetworkParams, float]:
    batch = S.shape[0]
    targets = rewards.astype(float).copy()
    live = np.flatnonzero(~terminals)
    if live.size:
        sets = [next_sets[i] for i in live]
        lens = np.array([s.shape[0] for s in sets])
        if np.any(lens == 0):
            raise ContractViolation("non-terminal experience with empty next action set")
        flat_a = np.concatenate(sets, axis=0)
        flat_s = np.repeat(next_S[live], lens, axis=0)
        q_on = qnet.forward(online, flat_s, flat_a)
        q_tg = qnet.forward(target_net, flat_s, flat_a)
        starts = _segment_starts(lens)
        if cfg.target_mode == "expectation":
            mx = np.maximum.reduceat(q_on, starts)
            w = np.exp((q_on - np.repeat(mx, lens)) / cfg.temperature)
            boot = np.add.reduceat(w * q_tg, starts) / np.add.reduceat(w, starts)
        else:
            boot = np.empty(live.size)
            for i, (s0, ln) in enumerate(zip(starts, lens)):
                boot[i] = q_tg[s0 + int(np.argmax(q_on[s0 : s0 + ln]))]
        targets[live] += cfg.gamma * boot

    if cfg.kl_weight > 0:
        # the (s_t, a_t) rows sit inside the flattened action-set batch, so one
        # forward serves both the penalty factor and the TD residual
        lens2 = np.array([s.shape[0] for s in action_sets])
        flat_a2 = np.concatenate(list(action_sets), axis=0)
        flat_s2 = np.repeat(S, lens2, axis=0)
        q2, trace2 = qnet._forward_trace(online, flat_s2, flat_a2)
        starts2 = _segment_starts(lens2)
        pos = starts2 + action_index
        q_sa = q2[pos]
        trace = tuple(arr[pos] for arr in trace2)
        if not (np.all(np.isfinite(q2)) and np.all(np.isfinite(targets))):
            raise NumericalError("non-finite Q values or targets")
        resid = q_sa - targets
        upstream = (2.0 / batch) * resid
        loss = float(np.mean(resid**2))
        w2 = np.exp((q2 - np.repeat(np.maximum.reduceat(q2, starts2), lens2)) / cfg.temperature)
        z2 = np.add.reduceat(w2, starts2)
        pi_a = w2[pos] / z2
        # both objective terms average over the batch, keeping the penalty
        # weight a per-sample quantity independent of batch size
        upstream = upstream + cfg.kl_weight * kls * pi_a * (1.0 - pi_a) / (cfg.temperature * batch)
        loss += cfg.kl_weight * float(np.mean(kls * pi_a))
    else:
        q_sa, trace = qnet._forward_trace(online, S, A)
        if not (np.all(np.isfinite(q_sa)) and np.all(np.isfinite(targets))):
            raise NumericalError("non-finite Q values or targets")
        resid = q_sa - targets
        upstream = (2.0 / batch) * resid
        loss = float(np.mean(resid**2))

    grads = qnet.backward_from_trace(online, S, A, upstream, trace)
    return grads, loss


def loss_gradients(
    batch: Sequence[Experience], online: QNetworkParams, target_net: QNetworkParams, cfg: TrainerConfig
) -> tuple[QNetworkParams, float]:
    """Parameter gradients of the combined objective over a batch.

    TD part: mean squared residual against ``compute_target``. Matching part:
    kl_weight times the batch mean of the stored coefficient times the
    Boltzmann sensitivity of the taken action, flowing only through
    Q(state, action).
    """
    if not batch:
        raise ContractViolation("empty batch")
    return _grads_core(
        S=np.stack([e.state for e in batch]),
        A=np.stack([e.action for e in batch]),
        action_index=np.array([e.action_index for e in batch]),
        rewards=np.array([e.reward for e in batch]),
        kls=np.array([e.kl_coeff for e in batch]),
        terminals=np.array([e.terminal for e in batch]),
        action_sets=[e.action_set for e in batch],
        next_S=np.stack([e.next_state for e in batch]),
        next_sets=[e.next_action_set for e in batch],
        online=online,
        target_net=target_net,
        cfg=cfg,
    )


@dataclass
class _Pending:
    vehicle: int
    state: np.ndarray
    action: np.ndarray
    action_set: np.ndarray
    action_index: int
    reward: float
    source: int
    dest: int
    arrival: int
    kl_coeff: float = 0.0


@dataclass(frozen=True)
class FlowRecord:
    """Per-step snapshot for auditing stored coefficients."""

    timestep: int
    flow: DispatchFlow
    order_rates: Optional[GridDistribution]
    transitions: tuple[tuple[int, int, float], ...]  # (source, dest, stored kl)


@dataclass(frozen=True)
class EpisodeStats:
    adi: float
    orr: float
    mean_loss: float
    updates: int
    skipped_updates: int


class Trainer:
    """Owns the networks, optimizer and buffer for one training run.

    With ``metrics_path`` set, every training episode appends one CSV record
    (episode, seed, lambda, drift, ADI, ORR, mean loss).
    """

    def __init__(
        self,
        env_cfg: EnvConfig,
        cfg: TrainerConfig,
        seed: int,
        record_flows: bool = False,
        metrics_path=None,
    ):
        if seed < 0:
            raise ConfigError("seed must be nonnegative")
        self.env_cfg = env_cfg
        self.cfg = cfg
        self.seed = seed
        self.metrics_path = metrics_path
        self.codec: FeatureCodec = env_cfg.codec()
        arch = ArchSpec(
            state_dim=self.codec.obs_dim,
            action_dim=self.codec.action_dim,
            embed_dim=cfg.embed_dim,
            hidden1=cfg.hidden1,
            hidden2=cfg.hidden2,
        )
        self.online = qnet.init_params(arch, seed=[seed, 3])
        self.target = self.online.copy()
        self.opt = OptimizerState.for_params(self.online, cfg.learning_rate, cfg.optimizer)
        self.buffer = ReplayBuffer(cfg.buffer_capacity, self.codec.obs_dim, self.codec.action_dim)
        self._sample_rng = np.random.default_rng([seed, 13])
        self.flow_log: list[FlowRecord] | None = [] if record_flows else None

    # -- episode loops ---------------------------------------------------

    def train_episode(self, env: OrderDispatchEnv, episode: int) -> EpisodeStats:
        """One Boltzmann-exploration episode with learning after every step."""
        cfg = self.cfg
        policy = BoltzmannPolicy(cfg.temperature)
        policy_rng = np.random.default_rng([self.seed, 11, episode])
        env.reset(episode, stream=0)
        n_grids = env.topo.n_grids
        pendings: dict[int, _Pending] = {}
        losses: list[float] = []
        updates = skipped = 0
        threshold = max(cfg.warmup, cfg.batch_size)

        for t in range(env.cfg.horizon):
            obs_mat, cand_orders, cand_feats, idle_by_grid = self._step_context(env, pendings, t)
            self._finalize_arrivals(pendings, t, obs_mat, cand_feats, terminal=False)

            assignments: dict[int, Order] = {}
            fresh: list[_Pending] = []
            flow_counts = np.zeros((n_grids, n_grids))
            decision_grids = sorted(idle_by_grid)
            # grids with no real orders force the virtual choice; skip scoring
            scored = [g for g in decision_grids if len(cand_orders[g]) > 1]
            q_by_grid = self._score_grids(scored, obs_mat, cand_feats) if scored else {}
            for g in decision_grids:
                cand = cand_orders[g]
                if len(cand) == 1:
                    stay = cand[0]
                    flow_counts[g, g] += len(idle_by_grid[g])
                    for vid in idle_by_grid[g]:
                        assignments[vid] = stay
                        fresh.append(
                            _Pending(
                                vehicle=vid,
                                state=obs_mat[g],
                                action=cand_feats[g][0],
                                action_set=cand_feats[g],
                                action_index=0,
                                reward=0.0,
                                source=g,
                                dest=g,
                                arrival=t + 1,
                            )
                        )
                    continue
                index_of = {id(o): k for k, o in enumerate(cand)}
                decision = assign_with_policy(q_by_grid[g], cand, idle_by_grid[g], policy, policy_rng)
                for vid, order in decision.assignments:
                    assignments[vid] = order
                    k = index_of[id(order)]
                    flow_counts[g, order.dest] += 1.0
                    fresh.append(
                        _Pending(
                            vehicle=vid,
                            state=obs_mat[g],
                            action=cand_feats[g][k],
                            action_set=cand_feats[g],
                            action_index=k,
                            reward=order.price,
                            source=g,
                            dest=order.dest,
                            arrival=t + (1 if order.virtual else order.duration),
                        )
                    )
            env.step(assignments)
            self._attach_kl(env, flow_counts, fresh, t)
            for p in fresh:
                pendings[p.vehicle] = p

            if len(self.buffer) >= threshold:
                for _ in range(cfg.train_steps_per_env_step):
                    try:
                        losses.append(self._update())
                        updates += 1
                    except NumericalError:
                        skipped += 1

        final_obs = env.encoded_observations(self.codec)
        self._finalize_arrivals(pendings, env.cfg.horizon, final_obs, {}, terminal=True)
        adi, orr = env.metrics()
        mean_loss = float(np.mean(losses)) if losses else 0.0
        stats = EpisodeStats(adi=adi, orr=orr, mean_loss=mean_loss, updates=updates, skipped_updates=skipped)
        if self.metrics_path is not None:
            self._append_metrics(episode, stats)
        return stats

    def _append_metrics(self, episode: int, stats: EpisodeStats) -> None:
        import os

        fresh = not os.path.exists(self.metrics_path) or os.path.getsize(self.metrics_path) == 0
        with open(self.metrics_path, "a") as fh:
            if fresh:
                fh.write("episode,seed,lam,drift,adi,orr,mean_loss\n")
            fh.write(
                f"{episode},{self.seed},{self.cfg.kl_weight!r},{self.env_cfg.drift_step!r},"
                f"{stats.adi!r},{stats.orr!r},{stats.mean_loss!r}\n"
            )

    def eval_episode(self, env: OrderDispatchEnv, episode: int) -> tuple[float, float]:
        """Greedy rollout without learning; uses a held-out episode stream."""
        env.reset(episode, stream=1)
        for _ in range(env.cfg.horizon):
            obs_mat = env.encoded_observations(self.codec)
            idle_by_grid = env.idle_vehicles_by_grid()
            decision_grids = sorted(idle_by_grid)
            cand_orders, cand_feats = self._candidates(env, decision_grids)
            assignments: dict[int, Order] = {}
            scored = [g for g in decision_grids if len(cand_orders[g]) > 1]
            q_by_grid = self._score_grids(scored, obs_mat, cand_feats) if scored else {}
            for g in decision_grids:
                if len(cand_orders[g]) == 1:
                    stay = cand_orders[g][0]
                    for vid in idle_by_grid[g]:
                        assignments[vid] = stay
                    continue
                decision = assign_with_policy(q_by_grid[g], cand_orders[g], idle_by_grid[g], GREEDY)
                assignments.update(dict(decision.assignments))
            env.step(assignments)
        return env.metrics()

    # -- helpers ----------------------------------------------------------

    def _candidates(self, env: OrderDispatchEnv, grids: Sequence[int]):
        live = env.state.live_orders
        src_all, dest_all, price_all, slices = env.order_arrays()
        cand_orders: dict[int, list[Order]] = {}
        total = sum(slices[g][1] - slices[g][0] if g in slices else 0 for g in grids) + len(grids)
        src = np.empty(total, dtype=int)
        dst = np.empty(total, dtype=int)
        price = np.zeros(total)
        dur = np.ones(total, dtype=int)
        lengths = []
        off = 0
        for g in grids:
            cand = list(live.get(g, ()))
            cand.append(virtual_order(g))
            cand_orders[g] = cand
            if g in slices:
                lo, hi = slices[g]
                src[off : off + hi - lo] = src_all[lo:hi]
                dst[off : off + hi - lo] = dest_all[lo:hi]
                price[off : off + hi - lo] = price_all[lo:hi]
                dur[off : off + hi - lo] = env.cfg.order_duration
                off += hi - lo
            src[off] = g
            dst[off] = g
            off += 1
            lengths.append(len(cand))
        feats = self.codec.encode_action_arrays(src, dst, dur, price)
        cand_feats: dict[int, np.ndarray] = {}
        off = 0
        for g, ln in zip(grids, lengths):
            cand_feats[g] = feats[off : off + ln]
            off += ln
        return cand_orders, cand_feats

    def _step_context(self, env: OrderDispatchEnv, pendings: dict[int, _Pending], t: int):
        obs_mat = env.encoded_observations(self.codec)
        idle_by_grid = env.idle_vehicles_by_grid()
        needed = set(idle_by_grid)
        needed.update(p.dest for p in pendings.values() if p.arrival == t)
        cand_orders, cand_feats = self._candidates(env, sorted(needed))
        return obs_mat, cand_orders, cand_feats, idle_by_grid

    def _score_grids(self, grids: Sequence[int], obs_mat: np.ndarray, cand_feats: dict[int, np.ndarray]):
        lens = np.array([cand_feats[g].shape[0] for g in grids])
        s_big = np.repeat(obs_mat[list(grids)], lens, axis=0)
        a_big = np.concatenate([cand_feats[g] for g in grids], axis=0)
        q = qnet.forward(self.online, s_big, a_big)
        out: dict[int, np.ndarray] = {}
        off = 0
        for g, ln in zip(grids, lens):
            out[g] = q[off : off + ln]
            off += ln
        return out

    def _finalize_arrivals(
        self,
        pendings: dict[int, _Pending],
        t: int,
        obs_mat: np.ndarray,
        cand_feats: dict[int, np.ndarray],
        terminal: bool,
    ) -> None:
        empty = np.zeros((0, self.codec.action_dim))
        for vid in sorted(pendings):
            p = pendings[vid]
            if not terminal and p.arrival != t:
                continue
            self.buffer.add_raw(
                p.state,
                p.action,
                p.action_set,
                p.action_index,
                obs_mat[p.dest],
                empty if terminal else cand_feats[p.dest],
                p.kl_coeff,
                p.reward,
                terminal,
            )
            del pendings[vid]

    def _attach_kl(self, env: OrderDispatchEnv, flow_counts: np.ndarray, fresh: list[_Pending], t: int) -> None:
        """Store the divergence-gradient coefficient for each new transition.

        Uses the realized dispatch frequencies as the flow matrix and the
        orders actually generated for the next step as the demand rates; at
        the last step there is no next demand and the coefficient is zero.
        The realized arrival counts are simply the column sums of the dispatch
        count matrix, so the full probability matrix is only materialized when
        flow recording is on.
        """
        if not fresh:
            return
        c = flow_counts.sum(axis=1)
        next_counts = np.zeros(env.topo.n_grids)
        for g, orders in env.state.live_orders.items():
            next_counts[g] = len(orders)
        record_p = None
        if next_counts.sum() > 0:
            record_p = smooth(next_counts, self.cfg.smoothing_epsilon)
            if self.flow_log is None:
                eps = self.cfg.smoothing_epsilon
                arrivals = flow_counts.sum(axis=0) + eps
                total = flow_counts.sum() + eps * arrivals.size
                per_dest = 1.0 / total - record_p.probabilities / arrivals
                for p in fresh:
                    p.kl_coeff = float(c[p.source] * per_dest[p.dest])
            else:
                flow = self._flow_snapshot(c, flow_counts)
                klmat = kl_policy_gradient(flow, record_p, epsilon=self.cfg.smoothing_epsilon)
                for p in fresh:
                    p.kl_coeff = float(klmat[p.source, p.dest])
        if self.flow_log is not None:
            self.flow_log.append(
                FlowRecord(
                    timestep=t,
                    flow=self._flow_snapshot(c, flow_counts),
                    order_rates=record_p,
                    transitions=tuple((p.source, p.dest, p.kl_coeff) for p in fresh),
                )
            )

    @staticmethod
    def _flow_snapshot(c: np.ndarray, flow_counts: np.ndarray) -> DispatchFlow:
        denom = np.where(c > 0, c, 1.0)
        pi = flow_counts / denom[:, None]
        rows_empty = c == 0
        pi[rows_empty, :] = 0.0
        pi[rows_empty, rows_empty] = 1.0
        return DispatchFlow(idle_counts=c, dispatch_probs=pi)

    def _update(self) -> float:
        b = self.buffer
        idx = b.sample_indices(self.cfg.batch_size, self._sample_rng)
        grads, loss = _grads_core(
            S=b.S[idx],
            A=b.A[idx],
            action_index=b.action_index[idx],
            rewards=b.reward[idx],
            kls=b.kl[idx],
            terminals=b.terminal[idx],
            action_sets=[b.action_sets[i] for i in idx],
            next_S=b.next_S[idx],
            next_sets=[b.next_sets[i] for i in idx],
            online=self.online,
            target_net=self.target,
            cfg=self.cfg,
        )
        qnet.apply_update(self.online, self.opt, grads)
        qnet.soft_update(self.target, self.online, self.cfg.tau_soft)
        return loss


def run_nod_episode(env: OrderDispatchEnv, episode: int, seed: int) -> tuple[float, float]:
    """Uniform-random dispatch baseline on the held-out episode stream."""
    rng = np.random.default_rng([seed, 17, episode])
    env.reset(episode, stream=1)
    for _ in range(env.cfg.horizon):
        obs = env.observations()
        idle_by_grid = env.idle_vehicles_by_grid()
        assignments: dict[int, Order] = {}
        live = env.state.live_orders
        for g in sorted(idle_by_grid):
            cand = list(live.get(g, ()))
            cand.append(virtual_order(g))
            decision = nod_policy(obs[g], cand, idle_by_grid[g], rng)
            assignments.update(dict(decision.assignments))
        env.step(assignments)
    return env.metrics()
