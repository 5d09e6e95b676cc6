"""Cold-start training with attention-guided objectives, evaluation, and the staged comparison."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .env import END, GroundedLookupEnv
from .grpo import RLConfig, rollout_batch, train_rl
from .model import ModelConfig, Params, backward, decode, forward, init_params, lm_loss, lm_loss_grad, make_optimizer
from .objectives import (
    LossWeights,
    attention_loss_upstream,
    enhance_img_loss,
    image_attention_mass,
    suppress_sys_loss,
    total_loss,
)
from .vas import vas_model

EVAL_OFFSET = 1_000_000  # evaluation episodes never overlap training indices


def model_config_for(env: GroundedLookupEnv, **kw) -> ModelConfig:
    kw.setdefault("max_seq_len", env.seq_len)
    return ModelConfig(vocab_size=env.vocab_size, image_vocab_size=env.image_vocab_size, **kw)


def supervised_step(params: Params, env: GroundedLookupEnv, episodes, weights: LossWeights,
                    layers=None, query_set="response"):
    """Teacher-forced loss on full episodes; returns (breakdown, grads, log fields)."""
    seg = env.segmentation()
    tokens = np.stack([np.concatenate([e.prompt, e.target]) for e in episodes])
    targets = np.stack([e.target for e in episodes])
    trace = forward(params, tokens, seg)
    lm = lm_loss(trace, targets)
    enh = enhance_img_loss(trace.attn, seg, layers, query_set, weights.epsilon)
    sup = suppress_sys_loss(trace.attn, seg, layers, query_set, weights.epsilon)
    breakdown = total_loss(lm, enh, sup, weights)
    dattn = attention_loss_upstream(trace.attn, seg, layers, query_set, weights) if (weights.alpha or weights.beta) else None
    grads = backward(trace, lm_loss_grad(trace, targets), dattn)
    fields = {
        "mean_image_attention_mass": image_attention_mass(trace.attn, seg, query_set),
        "vas_model": vas_model(trace.attn, seg, query_set),
    }
    return breakdown, grads, fields


def train_supervised(params: Params, env: GroundedLookupEnv, steps: int, weights: LossWeights = LossWeights(),
                     batch_size: int = 32, lr: float = 3e-3, optimizer: str = "adam", layers=None,
                     query_set="response", on_step=None):
    """Returns ``(params, log)``; each log entry is one JSON training line."""
    opt = make_optimizer(optimizer, lr)
    log = []
    for step in range(steps):
        episodes = env.batch(step * batch_size, batch_size)
        b, grads, fields = supervised_step(params, env, episodes, weights, layers, query_set)
        params = opt(params, grads)
        entry = {"step": step, "lm": b.lm, "enhance_img": b.enhance_img, "suppress_sys": b.suppress_sys,
                 "total": b.total, **fields}
        log.append(entry)
        if on_step is not None:
            on_step(entry)
    return params, log


def evaluate(params: Params, env: GroundedLookupEnv, n: int = 200, start: int = EVAL_OFFSET, intervention=None) -> dict:
    """Greedy decoding on held-out episodes; attention statistics over generated response queries."""
    episodes = env.batch(start, n)
    prompts = np.stack([e.prompt for e in episodes])
    pseg = env.segmentation(response_len=0)
    max_new = 3
    responses, lengths = decode(params, prompts, pseg, max_new, END, intervention=intervention)
    P = prompts.shape[1]
    seq = np.concatenate([prompts, responses], axis=1)
    trace = forward(params, seq, pseg.with_response((P, P + max_new), total_len=P + max_new), intervention)
    accs, fmts, vas, mass = [], [], [], []
    for b, ep in enumerate(episodes):
        n_b = int(lengths[b])
        resp = responses[b, :n_b]
        seg = pseg.with_response((P, P + n_b), total_len=P + max_new)
        accs.append(env.accuracy(ep, resp))
        fmts.append(env.format_ok(resp))
        vas.append(vas_model(trace.attn[b], seg, "response"))
        mass.append(image_attention_mass(trace.attn[b], seg, "response"))
    return {
        "accuracy": float(np.mean(accs)),
        "format": float(np.mean(fmts)),
        "vas": float(np.mean(vas)),
        "image_mass": float(np.mean(mass)),
        "query_set_kind": "response",
    }


def evaluate_sampled(params: Params, env: GroundedLookupEnv, n: int = 128, samples: int = 8,
                     start: int = EVAL_OFFSET, seed: int = 12345) -> dict:
    """Expected accuracy and VAS of temperature-1 rollouts on held-out episodes."""
    groups = rollout_batch(params, env, env.batch(start, n), samples, seed)
    trajs = [t for g in groups for t in g.trajectories]
    return {
        "accuracy": float(np.mean([t.reward.accuracy for t in trajs])),
        "format": float(np.mean([t.reward.format for t in trajs])),
        "vas": float(np.mean([t.vas for t in trajs])),
        "query_set_kind": "response",
    }


def experiment_compare(seeds=(0, 1, 2), cold_steps: int = 500, attn_steps: int = 300, rl_steps: int = 100,
                       model_kw: dict | None = None, rl_config: RLConfig | None = None,
                       weights: LossWeights = LossWeights(), eval_n: int = 200, on_row=None) -> list[dict]:
    """LM-only vs LM + attention objectives vs objectives + RL, per seed.

    Every variant starts from the same initialisation and the same LM-only
    cold start of ``cold_steps``; the second variant continues for
    ``attn_steps`` with the attention objectives switched on, the first for
    the same number of steps without them; the third runs GRPO with visual
    reward shaping on top of the second.
    """
    rows = []
    rl_config = rl_config or RLConfig(steps=rl_steps)
    for seed in seeds:
        env = GroundedLookupEnv(seed)
        cfg = model_config_for(env, seed=seed, **(model_kw or {}))
        p0 = init_params(cfg)
        base, _ = train_supervised(p0, env, cold_steps, LossWeights(0.0, 0.0, weights.epsilon))
        lm_only, _ = train_supervised(base, env, attn_steps, LossWeights(0.0, 0.0, weights.epsilon))
        guided, _ = train_supervised(base, env, attn_steps, weights)
        shaped, _ = train_rl(replace(rl_config, seed=seed, steps=rl_steps), guided, env)
        for name, params in (("lm_only", lm_only), ("attention_guided", guided), ("rl_shaped", shaped)):
            ev = evaluate(params, env, eval_n)
            row = {"variant": name, "vas": ev["vas"], "accuracy": ev["accuracy"], "seed": seed}
            rows.append(row)
            if on_row is not None:
                on_row(row)
    return rows
