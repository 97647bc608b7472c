"""Recurrent actor-critic trained with clipped-surrogate policy gradients.

The network is an LSTM trunk feeding three dense layers, then three
heads: a 3-way trade policy, a 12-way cluster-label predictor (the
auxiliary task), and a scalar value estimate. Training alternates
fixed-length rollouts in the trading simulator with several epochs of
minibatch updates on the collected data.

Exact-replay discipline: every forward pass on the policy path uses the
row-at-a-time dense kernels and the stepwise LSTM, and the rollout
records the LSTM state entering each step. Replaying any contiguous
slice of a rollout therefore reproduces the original logits bit for
bit, which makes the probability ratio exactly 1 on the first pass
after a rollout.
"""

import numpy as np

from .checkpoint import load_container, save_container
from .env import ACTION_VALUES, TradingEnv
from .nn import (
    Adam,
    DenseLayer,
    LSTMLayer,
    NonFiniteValue,
    clip_grad_norm,
    collect_grads,
    collect_params,
    log_softmax,
    softmax,
    zero_grads,
)


class AgentError(Exception):
    pass


class EmptyBuffer(AgentError):
    pass


class LabelOutOfRange(AgentError):
    pass


N_ACTIONS = 3
N_CLUSTERS = 12


class PPOConfig:
    def __init__(
        self,
        clip_epsilon=0.2,
        discount=0.99,
        gae_lambda=0.95,
        aux_loss_weight=0.5,
        value_loss_weight=0.5,
        entropy_coefficient=0.01,
        epochs_per_update=4,
        minibatch_size=32,
        rollout_length=600,
        total_timesteps=1_000_000,
        learning_rate=0.0000879678,
        max_grad_norm=0.5,
        checkpoint_every=50,
    ):
        if not 0 < clip_epsilon < 1:
            raise ValueError("clip_epsilon must be in (0, 1)")
        if not 0 < discount <= 1:
            raise ValueError("discount must be in (0, 1]")
        if not 0 <= gae_lambda <= 1:
            raise ValueError("gae_lambda must be in [0, 1]")
        for name, w in (
            ("aux_loss_weight", aux_loss_weight),
            ("value_loss_weight", value_loss_weight),
            ("entropy_coefficient", entropy_coefficient),
        ):
            if w < 0:
                raise ValueError(f"{name} must be >= 0")
        self.clip_epsilon = clip_epsilon
        self.discount = discount
        self.gae_lambda = gae_lambda
        self.aux_loss_weight = aux_loss_weight
        self.value_loss_weight = value_loss_weight
        self.entropy_coefficient = entropy_coefficient
        self.epochs_per_update = epochs_per_update
        self.minibatch_size = minibatch_size
        self.rollout_length = rollout_length
        self.total_timesteps = total_timesteps
        self.learning_rate = learning_rate
        self.max_grad_norm = max_grad_norm
        self.checkpoint_every = checkpoint_every

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class PolicyNetwork:
    """LSTM(80->128) -> dense 32/64/64 (ReLU) -> policy/aux/value heads.

    The default sizes are the production architecture; tests shrink
    them to keep finite-difference sweeps cheap.
    """

    def __init__(self, input_size=80, hidden_size=128, trunk=(32, 64, 64), rng=None):
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.trunk_sizes = tuple(trunk)
        self.lstm = LSTMLayer(input_size, hidden_size, rng)
        self.fc1 = DenseLayer(hidden_size, trunk[0], "relu", rng)
        self.fc2 = DenseLayer(trunk[0], trunk[1], "relu", rng)
        self.fc3 = DenseLayer(trunk[1], trunk[2], "relu", rng)
        self.policy_head = DenseLayer(trunk[2], N_ACTIONS, "identity", rng)
        self.aux_head = DenseLayer(trunk[2], N_CLUSTERS, "identity", rng)
        self.value_head = DenseLayer(trunk[2], 1, "identity", rng)

    @property
    def layers(self):
        return [
            self.lstm,
            self.fc1,
            self.fc2,
            self.fc3,
            self.policy_head,
            self.aux_head,
            self.value_head,
        ]

    def initial_state(self):
        return self.lstm.initial_state()

    def forward_sequence(self, obs, h0, c0, resets, want_aux=True):
        """Shared trunk plus heads over a (T, 80) slice.

        Returns (policy_logits, aux_logits or None, values, hT, cT).
        Row-at-a-time kernels throughout, so results are independent of
        how the sequence is sliced.
        """
        hs, hT, cT = self.lstm.forward(obs, h0, c0, resets)
        y = self.fc1.forward(hs, rows=True)
        y = self.fc2.forward(y, rows=True)
        y = self.fc3.forward(y, rows=True)
        policy_logits = self.policy_head.forward(y, rows=True)
        aux_logits = self.aux_head.forward(y, rows=True) if want_aux else None
        values = self.value_head.forward(y, rows=True)[:, 0]
        return policy_logits, aux_logits, values, hT, cT

    def backward_sequence(self, d_policy_logits, d_aux_logits, d_values):
        """Accumulates parameter gradients for the last forward_sequence."""
        dy = self.policy_head.backward(d_policy_logits)
        if d_aux_logits is not None:
            dy = dy + self.aux_head.backward(d_aux_logits)
        dy = dy + self.value_head.backward(d_values[:, None])
        dy = self.fc3.backward(dy)
        dy = self.fc2.backward(dy)
        dy = self.fc1.backward(dy)
        self.lstm.backward(dy)

    def act(self, observation, h, c, reset, rng=None, mode="sample"):
        """One-step policy evaluation.

        Returns (action_index, log_prob, value, aux_probs, hT, cT).
        `reset` nonzero discards the incoming recurrent state, marking
        an episode start.
        """
        obs = np.asarray(observation, dtype=np.float64)[None, :]
        resets = np.array([1 if reset else 0], dtype=np.uint8)
        logits, aux_logits, values, hT, cT = self.forward_sequence(
            obs, h, c, resets
        )
        probs = softmax(logits)[0]
        if not np.all(np.isfinite(probs)):
            raise NonFiniteValue("policy probabilities are not finite")
        if mode == "greedy":
            action = int(np.argmax(probs))
        elif mode == "sample":
            u = rng.random()
            cum = 0.0
            action = N_ACTIONS - 1
            for i in range(N_ACTIONS):
                cum += probs[i]
                if u < cum:
                    action = i
                    break
        else:
            raise ValueError(f"unknown act mode {mode!r}")
        log_prob = float(log_softmax(logits)[0, action])
        aux_probs = softmax(aux_logits)[0]
        return action, log_prob, float(values[0]), aux_probs, hT, cT

    def param_blocks(self):
        names = ["lstm.wx", "lstm.wh", "lstm.b"]
        arrays = [self.lstm.wx, self.lstm.wh, self.lstm.b]
        for tag, layer in [
            ("fc1", self.fc1),
            ("fc2", self.fc2),
            ("fc3", self.fc3),
            ("policy", self.policy_head),
            ("aux", self.aux_head),
            ("value", self.value_head),
        ]:
            names += [f"{tag}.w", f"{tag}.b"]
            arrays += [layer.w, layer.b]
        return dict(zip(names, arrays))

    def load_param_blocks(self, blocks):
        for name, target in self.param_blocks().items():
            target[:] = blocks[name]


class RolloutBuffer:
    """Fixed-length per-step records from one collection phase."""

    def __init__(self, length, obs_size=80, hidden_size=128):
        self.length = length
        self.obs = np.zeros((length, obs_size))
        self.actions = np.zeros(length, dtype=np.int64)
        self.log_probs = np.zeros(length)
        self.rewards = np.zeros(length)
        self.values = np.zeros(length)
        self.labels = np.zeros(length, dtype=np.int64)
        self.dones = np.zeros(length, dtype=np.uint8)
        self.resets = np.zeros(length, dtype=np.uint8)
        self.hprev = np.zeros((length, hidden_size))
        self.cprev = np.zeros((length, hidden_size))
        self.pos = 0

    def add(self, obs, action, log_prob, reward, value, label, done, reset, h, c):
        t = self.pos
        self.obs[t] = obs
        self.actions[t] = action
        self.log_probs[t] = log_prob
        self.rewards[t] = reward
        self.values[t] = value
        self.labels[t] = label
        self.dones[t] = done
        self.resets[t] = reset
        self.hprev[t] = h
        self.cprev[t] = c
        self.pos += 1

    @property
    def full(self):
        return self.pos == self.length


def compute_gae(rewards, values, dones, bootstrap_value, discount, gae_lambda):
    """Backward recursion for advantage estimates.

    dones[t] set means the episode ended at step t: no value bootstraps
    across that boundary and the recursion restarts behind it. Returns
    (advantages, return_targets) with targets = advantages + values.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones)
    T = rewards.shape[0]
    if T == 0:
        raise EmptyBuffer("cannot compute advantages over zero steps")
    advantages = np.zeros(T)
    last = 0.0
    for t in range(T - 1, -1, -1):
        nonterminal = 0.0 if dones[t] else 1.0
        next_value = bootstrap_value if t == T - 1 else values[t + 1]
        delta = rewards[t] + discount * next_value * nonterminal - values[t]
        last = delta + discount * gae_lambda * nonterminal * last
        advantages[t] = last
    return advantages, advantages + values


def normalize_advantages(advantages):
    adv = np.asarray(advantages, dtype=np.float64)
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def ppo_clip_objective(log_prob_new, log_prob_old, advantage, clip_epsilon):
    """Per-sample clipped surrogate, min(r A, clip(r) A) with
    r = exp(log_prob_new - log_prob_old). The training loss negates the
    batch mean of this value."""
    lpn = np.asarray(log_prob_new, dtype=np.float64)
    lpo = np.asarray(log_prob_old, dtype=np.float64)
    adv = np.asarray(advantage, dtype=np.float64)
    if not (
        np.all(np.isfinite(lpn)) and np.all(np.isfinite(lpo)) and np.all(np.isfinite(adv))
    ):
        raise NonFiniteValue("clip objective inputs are not finite")
    ratio = np.exp(lpn - lpo)
    clipped = np.clip(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon)
    return np.minimum(ratio * adv, clipped * adv)


def auxiliary_loss(aux_distribution, cluster_labels):
    """Mean negative log-probability assigned to the true cluster."""
    probs = np.atleast_2d(np.asarray(aux_distribution, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(cluster_labels))
    if np.any(labels < 0) or np.any(labels >= probs.shape[1]):
        raise LabelOutOfRange(
            f"labels must lie in [0, {probs.shape[1]}), got "
            f"[{labels.min()}, {labels.max()}]"
        )
    picked = probs[np.arange(labels.shape[0]), labels]
    return float(np.mean(-np.log(picked)))


def value_loss(value_estimates, return_targets):
    est = np.asarray(value_estimates, dtype=np.float64)
    tgt = np.asarray(return_targets, dtype=np.float64)
    if est.shape != tgt.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {tgt.shape}")
    return float(np.mean((est - tgt) ** 2))


class UpdateStats:
    def __init__(self, policy_loss, value_loss, aux_loss, entropy, clip_fraction):
        self.policy_loss = policy_loss
        self.value_loss = value_loss
        self.aux_loss = aux_loss
        self.entropy = entropy
        self.clip_fraction = clip_fraction


def _segment_bounds(total, size):
    return [(s, min(s + size, total)) for s in range(0, total, size)]


def minibatch_pass(
    net, obs, h0, c0, resets, actions, log_probs_old, advantages,
    returns_target, labels, config, backward=True,
):
    """Forward (and optionally backward) one contiguous rollout slice.

    The total loss is
        -clip_objective + value_w * value_mse + aux_w * aux_ce
        - entropy_coef * policy_entropy
    with the auxiliary term skipped entirely when its weight is zero so
    the aux head receives no gradient at all. Returns (total, policy,
    value, aux, entropy, clip_fraction); when `backward` is set the
    layer gradient accumulators hold d(total)/d(params) on return.
    """
    n = obs.shape[0]
    eps = config.clip_epsilon
    use_aux = config.aux_loss_weight > 0.0
    logits, aux_logits, values, _, _ = net.forward_sequence(
        obs, h0, c0, resets, want_aux=use_aux
    )
    log_probs = log_softmax(logits)
    probs = softmax(logits)
    idx = np.arange(n)
    lpn = log_probs[idx, actions]
    obj = ppo_clip_objective(lpn, log_probs_old, advantages, eps)
    policy_loss_val = -float(np.mean(obj))

    ratio = np.exp(lpn - log_probs_old)
    entropy = -np.sum(probs * log_probs, axis=1)
    entropy_val = float(np.mean(entropy))
    v_loss_val = value_loss(values, returns_target)

    if use_aux:
        aux_p = softmax(aux_logits)
        aux_loss_val = auxiliary_loss(aux_p, labels)
    else:
        aux_loss_val = 0.0

    total = (
        policy_loss_val
        + config.value_loss_weight * v_loss_val
        + config.aux_loss_weight * aux_loss_val
        - config.entropy_coefficient * entropy_val
    )
    if not np.isfinite(total):
        raise NonFiniteValue("non-finite minibatch loss")
    clip_fraction = float(np.mean(np.abs(ratio - 1.0) > eps))

    if backward:
        clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps)
        unclipped_active = ratio * advantages <= clipped * advantages
        onehot = np.zeros((n, N_ACTIONS))
        onehot[idx, actions] = 1.0
        # d/dlogits of -mean(min(rA, clip(r)A)); only the unclipped
        # branch carries gradient
        coef = np.where(unclipped_active, ratio * advantages, 0.0) / n
        d_logits = -coef[:, None] * (onehot - probs)
        if config.entropy_coefficient > 0.0:
            d_logits += (
                config.entropy_coefficient
                * probs
                * (log_probs + entropy[:, None])
                / n
            )
        d_values = (
            config.value_loss_weight * 2.0 * (values - returns_target) / n
        )
        if use_aux:
            aux_onehot = np.zeros((n, N_CLUSTERS))
            aux_onehot[idx, labels] = 1.0
            d_aux = config.aux_loss_weight * (aux_p - aux_onehot) / n
        else:
            d_aux = None
        zero_grads(net.layers)
        net.backward_sequence(d_logits, d_aux, d_values)

    return total, policy_loss_val, v_loss_val, aux_loss_val, entropy_val, clip_fraction


def update(net, optimizer, buffer, advantages, returns_target, config, rng):
    """Several epochs of minibatch updates over one rollout.

    Minibatches are contiguous rollout slices replayed from their stored
    LSTM entry state; the slice order is shuffled each epoch. Gradients
    are global-norm clipped before each Adam step.
    """
    if not buffer.full:
        raise EmptyBuffer("rollout buffer is not full")
    grads = collect_grads(net.layers)
    bounds = _segment_bounds(buffer.length, config.minibatch_size)

    sums = np.zeros(4)
    clip_hits = 0.0
    n_batches = 0
    for _ in range(config.epochs_per_update):
        order = rng.permutation(len(bounds))
        for seg in order:
            s, e = bounds[seg]
            _, p_l, v_l, a_l, ent, clip_frac = minibatch_pass(
                net,
                buffer.obs[s:e],
                buffer.hprev[s],
                buffer.cprev[s],
                buffer.resets[s:e],
                buffer.actions[s:e],
                buffer.log_probs[s:e],
                advantages[s:e],
                returns_target[s:e],
                buffer.labels[s:e],
                config,
            )
            clip_grad_norm(grads, config.max_grad_norm)
            optimizer.step(grads)
            sums += (p_l, v_l, a_l, ent)
            clip_hits += clip_frac
            n_batches += 1

    avg = sums / n_batches
    return UpdateStats(avg[0], avg[1], avg[2], avg[3], clip_hits / n_batches)


LOG_HEADER = "timestep,mean_reward,policy_loss,value_loss,aux_loss,entropy,clip_fraction"


def collect_rollout(net, env, labels, buffer, rng, state):
    """Fills the buffer by acting in the environment.

    `state` carries (h, c, need_reset) across rollouts so the recurrent
    state and episode schedule persist. Returns the bootstrap value for
    the step after the final one (0 when that step ended an episode).
    """
    h, c, need_reset = state
    while not buffer.full:
        reset = 1 if need_reset else 0
        if need_reset:
            start = int(rng.integers(0, env.max_start_index() + 1))
            obs = env.reset(start)
            need_reset = False
        else:
            obs = env.windows[env.cursor]
        window_index = env.cursor
        action, log_prob, value, _, hT, cT = net.act(
            obs, h, c, reset, rng, mode="sample"
        )
        result = env.step(ACTION_VALUES[action])
        buffer.add(
            obs, action, log_prob, result.reward, value,
            labels[window_index], result.done, reset, h, c,
        )
        h, c = hT, cT
        if result.done:
            need_reset = True

    if buffer.dones[-1]:
        bootstrap = 0.0
    else:
        _, _, bootstrap, _, _, _ = net.act(
            env.windows[env.cursor], h, c, 0, mode="greedy"
        )
    state[0], state[1], state[2] = h, c, need_reset
    return bootstrap


def train(
    windows,
    returns,
    labels,
    env_config,
    config,
    seed,
    checkpoint_dir=None,
    log_path=None,
):
    """Full training loop: rollouts alternating with updates.

    Runs while another whole rollout still fits into total_timesteps.
    Returns (net, log_rows) where each log row mirrors LOG_HEADER.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != np.asarray(windows).shape[0]:
        raise ValueError("need one cluster label per window")
    windows = np.asarray(windows, dtype=np.float64)
    rng = np.random.default_rng(seed)
    net = PolicyNetwork(input_size=windows.shape[1], rng=rng)
    optimizer = Adam(collect_params(net.layers), config.learning_rate)
    env = TradingEnv(windows, returns, env_config)

    h, c = net.initial_state()
    state = [h, c, True]
    log_rows = []
    steps_done = 0
    n_updates = 0
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        if log_file:
            log_file.write(LOG_HEADER + "\n")
        while steps_done + config.rollout_length <= config.total_timesteps:
            buffer = RolloutBuffer(
                config.rollout_length, net.input_size, net.hidden_size
            )
            bootstrap = collect_rollout(net, env, labels, buffer, rng, state)
            advantages, returns_target = compute_gae(
                buffer.rewards, buffer.values, buffer.dones, bootstrap,
                config.discount, config.gae_lambda,
            )
            norm_adv = normalize_advantages(advantages)
            stats = update(
                net, optimizer, buffer, norm_adv, returns_target, config, rng
            )
            steps_done += config.rollout_length
            n_updates += 1
            row = (
                f"{steps_done},{np.mean(buffer.rewards):.10g},"
                f"{stats.policy_loss:.10g},{stats.value_loss:.10g},"
                f"{stats.aux_loss:.10g},{stats.entropy:.10g},"
                f"{stats.clip_fraction:.10g}"
            )
            log_rows.append(row)
            if log_file:
                log_file.write(row + "\n")
                log_file.flush()
            if checkpoint_dir and n_updates % config.checkpoint_every == 0:
                save_policy(
                    f"{checkpoint_dir}/checkpoint_{steps_done}.bin",
                    net, optimizer, config, seed, steps_done,
                )
        if checkpoint_dir:
            save_policy(
                f"{checkpoint_dir}/final.bin", net, optimizer, config, seed,
                steps_done,
            )
    finally:
        if log_file:
            log_file.close()
    return net, log_rows


def save_policy(path, net, optimizer, config, seed, steps_done):
    blocks = dict(net.param_blocks())
    if optimizer is not None:
        m, v = optimizer.state_arrays()
        names = list(net.param_blocks())
        for name, marr, varr in zip(names, m, v):
            blocks[f"adam.m.{name}"] = marr
            blocks[f"adam.v.{name}"] = varr
        adam_step = optimizer.step_count
    else:
        adam_step = 0
    meta = {
        "kind": "policy",
        "seed": seed,
        "steps_done": steps_done,
        "adam_step": adam_step,
        "input_size": net.input_size,
        "hidden_size": net.hidden_size,
        "trunk": list(net.trunk_sizes),
        "config": config.to_dict() if config else None,
    }
    save_container(path, meta, blocks)


def load_policy(path):
    """Returns (net, meta). Optimizer moments stay in the file; reload
    them with load_optimizer_state when resuming."""
    meta, blocks = load_container(path)
    if meta.get("kind") != "policy":
        raise AgentError(f"{path}: not a policy checkpoint")
    net = PolicyNetwork(
        input_size=meta["input_size"],
        hidden_size=meta["hidden_size"],
        trunk=tuple(meta["trunk"]),
    )
    net.load_param_blocks(blocks)
    return net, meta


def load_optimizer_state(path, net, optimizer):
    meta, blocks = load_container(path)
    names = list(net.param_blocks())
    m = [blocks[f"adam.m.{n}"] for n in names]
    v = [blocks[f"adam.v.{n}"] for n in names]
    optimizer.load_state(m, v, meta["adam_step"])
