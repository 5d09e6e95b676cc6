"""Visual-anchored reward shaping and GRPO on the grounded-lookup task."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .attn_core import AttentionTensor, TokenSegmentation
from .env import END, Episode, GroundedLookupEnv
from .errors import EmptyResponseSpan, GroupTooSmall, InvalidConfig, LengthMismatch, NonFiniteRatio
from .model import Params, backward, decode, forward, log_softmax, make_optimizer
from .vas import per_query_vas

STD_GUARD = 1e-8
RATIO_LIMIT = 30.0


@dataclass(frozen=True)
class RewardWeights:
    lambda_v: float = 0.3
    lambda_f: float = 0.1
    epsilon: float = 1e-6

    def __post_init__(self):
        if min(self.lambda_v, self.lambda_f) < 0 or not self.epsilon > 0:
            raise InvalidConfig(f"invalid reward weights {self}")


@dataclass(frozen=True)
class RewardBreakdown:
    accuracy: int
    visual: float
    format: int
    total: float


@dataclass(frozen=True)
class RLConfig:
    group_size: int = 8
    clip_range: float = 0.2
    kl_coeff: float = 0.01
    lr: float = 1e-3
    steps: int = 200
    seed: int = 0
    weights: RewardWeights = field(default_factory=RewardWeights)
    prompts_per_step: int = 8
    epochs_per_batch: int = 2
    max_new: int = 3
    optimizer: str = "adam"

    def __post_init__(self):
        if self.group_size < 2:
            raise GroupTooSmall("group_size must be at least 2")
        if not 0 < self.clip_range < 1:
            raise InvalidConfig("clip_range must lie in (0, 1)")
        if self.kl_coeff < 0 or self.lr <= 0 or self.steps < 0:
            raise InvalidConfig(f"invalid RL config {self}")
        if self.prompts_per_step < 1 or self.epochs_per_batch < 1 or self.max_new < 1:
            raise InvalidConfig(f"invalid RL config {self}")


@dataclass
class Trajectory:
    episode: Episode
    seg: TokenSegmentation  # response_span covers exactly this response
    response: np.ndarray  # generated ids, length |o|
    logp_old: np.ndarray  # |o|
    logp_ref: np.ndarray  # |o|
    ref_dist: np.ndarray  # |o| x vocab, log-probabilities under the reference policy
    vas: float
    reward: RewardBreakdown
    logp_new: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.response)


@dataclass
class RolloutGroup:
    trajectories: list[Trajectory]
    advantages: np.ndarray

    @property
    def rewards(self) -> np.ndarray:
        return np.array([t.reward.total for t in self.trajectories])


# -- rewards ----------------------------------------------------------------

def visual_reward(attn, seg: TokenSegmentation, correct: bool, epsilon: float = 1e-6, layers=None) -> float:
    """Head-averaged image/system attention ratio over response queries; 0 when incorrect."""
    if not correct:
        return 0.0
    t_idx = seg.response
    if t_idx.size == 0:
        raise EmptyResponseSpan("visual reward needs response tokens")
    w = attn.weights if isinstance(attn, AttentionTensor) else np.asarray(attn)
    if layers is not None:
        w = w[list(layers)]
    head_mean = w.mean(axis=1)  # L x T x T
    rows = head_mean[:, t_idx, :]
    ratio = rows[..., seg.image].sum(-1) / (rows[..., seg.system].sum(-1) + epsilon)
    return float(ratio.mean(axis=0).mean())


def total_reward(accuracy: int, visual: float, fmt: int, weights: RewardWeights = RewardWeights()) -> RewardBreakdown:
    if accuracy not in (0, 1) or fmt not in (0, 1):
        raise ValueError("accuracy and format rewards are binary")
    if visual < 0:
        raise ValueError("visual reward is non-negative")
    visual = float(visual) if accuracy else 0.0
    total = accuracy + weights.lambda_v * visual + weights.lambda_f * fmt
    return RewardBreakdown(int(accuracy), visual, int(fmt), total)


def group_advantages(rewards) -> np.ndarray:
    """(r - mean) / population std; a flat group gets zero advantages."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise GroupTooSmall("a group needs at least two rewards")
    std = r.std()
    if std < STD_GUARD:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def clipped_surrogate(ratio, advantage, clip_range: float):
    ratio = np.asarray(ratio, dtype=np.float64)
    return np.minimum(ratio * advantage, np.clip(ratio, 1 - clip_range, 1 + clip_range) * advantage)


# -- loss -------------------------------------------------------------------

def _pack(groups: list[RolloutGroup], max_new: int):
    trajs = [t for g in groups for t in g.trajectories]
    prompts = np.stack([t.episode.prompt for t in trajs])
    P = prompts.shape[1]
    resp = np.full((len(trajs), max_new), END, dtype=np.int64)
    mask = np.zeros((len(trajs), max_new))
    old = np.zeros((len(trajs), max_new))
    ref = None
    for i, t in enumerate(trajs):
        n = len(t)
        if n > max_new or n < 1:
            raise LengthMismatch(f"trajectory length {n} outside [1, {max_new}]")
        if not (len(t.logp_old) == len(t.logp_ref) == n == len(t.ref_dist)):
            raise LengthMismatch("log-probability arrays must share the response length")
        resp[i, :n] = t.response
        mask[i, :n] = 1.0
        old[i, :n] = t.logp_old
        if ref is None:
            ref = np.zeros((len(trajs), max_new, t.ref_dist.shape[-1]))
        ref[i, :n] = t.ref_dist
    adv = np.concatenate([g.advantages for g in groups])
    # each group weighs 1/n_groups, each trajectory 1/G inside it, each token 1/|o|
    tw = np.concatenate([np.full(len(g.trajectories), 1.0 / (len(groups) * len(g.trajectories))) for g in groups])
    weight = mask * (tw / mask.sum(axis=1))[:, None]
    return trajs, prompts, P, resp, mask, old, ref, adv, weight


def grpo_loss(groups, config: RLConfig, params: Params, return_grad: bool = False):
    """Negated GRPO objective over one or more rollout groups.

    Returns ``(loss, diagnostics)`` or, with ``return_grad``, also the
    parameter gradients.
    """
    if isinstance(groups, RolloutGroup):
        groups = [groups]
    max_new = max(len(t) for g in groups for t in g.trajectories)
    trajs, prompts, P, resp, mask, old, ref, adv, weight = _pack(groups, max_new)
    seq = np.concatenate([prompts, resp], axis=1)
    seg = trajs[0].seg.with_response((P, P + max_new), total_len=P + max_new)
    trace = forward(params, seq, seg)
    logits = trace.logits[:, P - 1: P - 1 + max_new]
    logp_all = log_softmax(logits)
    logp = np.take_along_axis(logp_all, resp[..., None], -1)[..., 0]
    delta = np.where(mask > 0, logp - old, 0.0)
    if np.abs(delta).max() > RATIO_LIMIT:
        i, t = np.unravel_index(np.abs(delta).argmax(), delta.shape)
        raise NonFiniteRatio(f"log-ratio {delta[i, t]:.3g} at trajectory {i} token {t}")
    ratio = np.exp(delta)
    eps = config.clip_range
    A = adv[:, None]
    unclipped = ratio * A
    clipped = np.clip(ratio, 1 - eps, 1 + eps) * A
    surr = np.minimum(unclipped, clipped)
    p = np.exp(logp_all)
    diff = np.where(mask[..., None] > 0, logp_all - ref, 0.0)
    kl = (p * diff).sum(-1)
    objective = float((weight * (surr - config.kl_coeff * kl)).sum())
    diag = {
        "surrogate": float((weight * surr).sum()),
        "kl": float((weight * kl).sum()),
        "mean_ratio": float((ratio * mask).sum() / mask.sum()),
        "clip_fraction": float(((np.abs(ratio - 1) > eps) * mask).sum() / mask.sum()),
    }
    if not return_grad:
        return -objective, diag
    # d surrogate / d logp_token, then through log-softmax; KL through softmax
    g_tok = np.where(unclipped <= clipped, unclipped, 0.0)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, resp[..., None], 1.0, -1)
    d_surr = g_tok[..., None] * (onehot - p)
    d_kl = p * (diff - (p * diff).sum(-1, keepdims=True))
    dJ = weight[..., None] * (d_surr - config.kl_coeff * d_kl)
    dlogits = np.zeros_like(trace.logits)
    dlogits[:, P - 1: P - 1 + max_new] = -dJ
    return -objective, diag, backward(trace, dlogits)


# -- rollouts ---------------------------------------------------------------

def _score(env: GroundedLookupEnv, ep: Episode, response, attn, seg, weights: RewardWeights) -> RewardBreakdown:
    acc = env.accuracy(ep, response)
    fmt = env.format_ok(response)
    vis = visual_reward(attn, seg, bool(acc), weights.epsilon)
    return total_reward(acc, vis, fmt, weights)


def rollout_batch(params: Params, env: GroundedLookupEnv, episodes: list[Episode], G: int, seed: int,
                  weights: RewardWeights = RewardWeights(), ref_params: Params | None = None,
                  max_new: int = 3) -> list[RolloutGroup]:
    """Sample G responses per episode at temperature 1 and score them.

    Trajectory i of episode e draws from ``default_rng([seed, e.index, i])``.
    """
    if G < 2:
        raise GroupTooSmall("group size must be at least 2")
    ref_params = params if ref_params is None else ref_params
    prompts = np.repeat(np.stack([e.prompt for e in episodes]), G, axis=0)
    rngs = [np.random.default_rng([seed, e.index, i]) for e in episodes for i in range(G)]
    prompt_seg = env.segmentation(response_len=0)
    responses, lengths = decode(params, prompts, prompt_seg, max_new, END, rng=rngs)
    P = prompts.shape[1]
    seq = np.concatenate([prompts, responses], axis=1)
    full_seg = prompt_seg.with_response((P, P + max_new), total_len=P + max_new)
    # causal masking makes these rows identical to the generation-time ones
    trace = forward(params, seq, full_seg)
    old_all = log_softmax(trace.logits[:, P - 1: P - 1 + max_new])
    ref_all = old_all if ref_params is params else log_softmax(
        forward(ref_params, seq, full_seg).logits[:, P - 1: P - 1 + max_new])
    groups = []
    for e_i, ep in enumerate(episodes):
        trajs = []
        for i in range(G):
            b = e_i * G + i
            n = int(lengths[b])
            resp = responses[b, :n].copy()
            seg = prompt_seg.with_response((P, P + n), total_len=P + max_new)
            attn = trace.attn[b]
            idx = np.arange(n)
            trajs.append(Trajectory(
                episode=ep,
                seg=seg,
                response=resp,
                logp_old=old_all[b, idx, resp],
                logp_ref=ref_all[b, idx, resp],
                ref_dist=ref_all[b, :n].copy(),
                vas=float(per_query_vas(attn, seg, "response").mean()),
                reward=_score(env, ep, resp, attn, seg, weights),
            ))
        rewards = [t.reward.total for t in trajs]
        groups.append(RolloutGroup(trajs, group_advantages(rewards)))
    return groups


def rollout(params: Params, env: GroundedLookupEnv, G: int, seed: int, weights: RewardWeights = RewardWeights(),
            episode_index: int = 0, ref_params: Params | None = None, max_new: int = 3) -> RolloutGroup:
    return rollout_batch(params, env, [env.episode(episode_index)], G, seed, weights, ref_params, max_new)[0]


def train_rl(config: RLConfig, params: Params, env: GroundedLookupEnv, ref_params: Params | None = None,
             on_step=None):
    """Rollout, advantages, GRPO loss, backward and update, ``config.steps`` times.

    Returns ``(params, history)``. The reference policy defaults to the
    starting parameters and stays frozen.
    """
    ref_params = params.copy() if ref_params is None else ref_params
    opt = make_optimizer(config.optimizer, config.lr)
    history = []
    for step in range(config.steps):
        episodes = env.batch(step * config.prompts_per_step, config.prompts_per_step)
        groups = rollout_batch(params, env, episodes, config.group_size, config.seed + step,
                               config.weights, ref_params, config.max_new)
        trajs = [t for g in groups for t in g.trajectories]
        diag = {}
        for _ in range(config.epochs_per_batch):
            if all(not g.advantages.any() for g in groups) and config.kl_coeff == 0:
                break  # nothing to push on: zero surrogate gradient and no KL term
            _, diag, grads = grpo_loss(groups, config, params, return_grad=True)
            params = opt(params, grads)
        entry = {
            "step": step,
            "mean_reward": float(np.mean([t.reward.total for t in trajs])),
            "mean_accuracy": float(np.mean([t.reward.accuracy for t in trajs])),
            "mean_visual_reward": float(np.mean([t.reward.visual for t in trajs])),
            "mean_vas": float(np.mean([t.vas for t in trajs])),
            "kl": diag.get("kl", 0.0),
        }
        history.append(entry)
        if on_step is not None:
            on_step(entry)
    return params, history


def replace_weights(config: RLConfig, **kw) -> RLConfig:
    return replace(config, weights=replace(config.weights, **kw))


__all__ = [
    "RLConfig",
    "RewardBreakdown",
    "RewardWeights",
    "RolloutGroup",
    "Trajectory",
    "clipped_surrogate",
    "group_advantages",
    "grpo_loss",
    "rollout",
    "rollout_batch",
    "total_reward",
    "train_rl",
    "visual_reward",
]
