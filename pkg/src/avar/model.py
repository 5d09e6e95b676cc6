"""Tiny causal transformer over text and image symbols with hand-written backprop.

Every forward pass records the full attention tensor, and ``backward``
accepts an upstream gradient on that tensor as well as on the logits, so
losses defined directly on attention weights train the model exactly.

Architecture per layer (no norms, no dropout)::

    x = x + MHA(x) @ Wo
    x = x + tanh(x @ W1) @ W2        # W1: d x 2d

Initialisation draws every matrix uniformly from [-1/sqrt(d), 1/sqrt(d)]
using numpy's PCG64 generator seeded with ``seed``; parameters are drawn in
``param_shapes`` order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .attn_core import AttentionTensor, TokenSegmentation, softmax_rows, validate_segmentation
from .errors import (
    EmptyResponseSpan,
    FormatError,
    BadMagic,
    InvalidConfig,
    LengthMismatch,
    SequenceTooLong,
    ShapeMismatch,
    StaleTrace,
    SymbolOutOfRange,
)
from .intervention import InterventionConfig, reallocate_rows

CKPT_MAGIC = b"AVARCKP1"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 19
    image_vocab_size: int = 36
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 16
    seed: int = 0

    def __post_init__(self):
        counts = (self.vocab_size, self.image_vocab_size, self.d_model, self.n_layers,
                  self.n_heads, self.max_seq_len)
        if any(int(c) != c or c < 1 for c in counts):
            raise InvalidConfig(f"all counts must be positive integers: {self}")
        if self.d_model % self.n_heads:
            raise InvalidConfig("d_model must be divisible by n_heads")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, int]]]:
    """Fixed traversal order used by init, checkpoints and gradient checks."""
    d = cfg.d_model
    shapes = [
        ("tok_emb", (cfg.vocab_size, d)),
        ("img_emb", (cfg.image_vocab_size, d)),
        ("pos_emb", (cfg.max_seq_len, d)),
    ]
    for l in range(cfg.n_layers):
        shapes += [
            (f"l{l}.wq", (d, d)),
            (f"l{l}.wk", (d, d)),
            (f"l{l}.wv", (d, d)),
            (f"l{l}.wo", (d, d)),
            (f"l{l}.w1", (d, 2 * d)),
            (f"l{l}.w2", (2 * d, d)),
        ]
    shapes.append(("out", (d, cfg.vocab_size)))
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return sum(a * b for _, (a, b) in param_shapes(cfg))


class Params(dict):
    """Ordered name -> float64 array mapping tied to its ModelConfig."""

    def __init__(self, config: ModelConfig, arrays=None):
        super().__init__()
        self.config = config
        for name, shape in param_shapes(config):
            if arrays is not None:
                a = np.asarray(arrays[name], dtype=np.float64)
                if a.shape != shape:
                    raise ShapeMismatch(f"{name}: expected {shape}, got {a.shape}")
                self[name] = a
        if arrays is not None and set(arrays) != set(self):
            raise ShapeMismatch(f"unexpected parameter names {sorted(set(arrays) - set(self))}")

    def copy(self) -> "Params":
        return Params(self.config, {k: v.copy() for k, v in self.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.values()])

    def fingerprint(self) -> bytes:
        h = hashlib.blake2b(digest_size=16)
        for v in self.values():
            h.update(np.ascontiguousarray(v).tobytes())
        return h.digest()

    def zeros_like(self) -> "Params":
        return Params(self.config, {k: np.zeros_like(v) for k, v in self.items()})


def init_params(config: ModelConfig, seed: int | None = None) -> Params:
    seed = config.seed if seed is None else seed
    rng = np.random.Generator(np.random.PCG64(seed))
    bound = 1.0 / np.sqrt(config.d_model)
    arrays = {name: rng.uniform(-bound, bound, size=shape) for name, shape in param_shapes(config)}
    return Params(config, arrays)


@dataclass(eq=False)
class ForwardTrace:
    """Logits, attention and every activation backward needs.

    Batched: ``logits`` is B x T x vocab and ``attn`` is B x L x H x T x T.
    """

    logits: np.ndarray
    attn: np.ndarray
    seg: TokenSegmentation
    tokens: np.ndarray
    params: Params = field(repr=False)
    fingerprint: bytes = field(repr=False)
    cache: list = field(repr=False, default_factory=list)
    final_x: np.ndarray | None = field(repr=False, default=None)
    intervened: bool = False

    @property
    def batch(self) -> int:
        return self.logits.shape[0]

    def attention(self, b: int = 0) -> AttentionTensor:
        return AttentionTensor(self.attn[b], causal=True)


def _embed(params: Params, tokens: np.ndarray, image_mask: np.ndarray) -> np.ndarray:
    text_ids = np.where(image_mask, 0, tokens)
    img_ids = np.where(image_mask, tokens, 0)
    x = np.where(image_mask[..., None], params["img_emb"][img_ids], params["tok_emb"][text_ids])
    return x + params["pos_emb"][: tokens.shape[-1]]


def _check_tokens(cfg: ModelConfig, tokens: np.ndarray, image_mask: np.ndarray) -> None:
    T = tokens.shape[-1]
    if T > cfg.max_seq_len:
        raise SequenceTooLong(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
    if T < 1:
        raise SequenceTooLong("empty sequence")
    img = tokens[:, image_mask]
    txt = tokens[:, ~image_mask]
    if img.size and (img.min() < 0 or img.max() >= cfg.image_vocab_size):
        raise SymbolOutOfRange("image symbol outside image vocabulary")
    if txt.size and (txt.min() < 0 or txt.max() >= cfg.vocab_size):
        raise SymbolOutOfRange("text symbol outside vocabulary")


def forward(params: Params, tokens, seg: TokenSegmentation,
            intervention: InterventionConfig | None = None) -> ForwardTrace:
    """Causal forward pass over one sequence (T,) or a batch (B, T) sharing ``seg``."""
    cfg = params.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None]
    B, T = tokens.shape
    if seg.total_len != T:
        raise LengthMismatch(f"segmentation covers {seg.total_len} tokens, got {T}")
    validate_segmentation(seg)
    image_mask = np.zeros(T, dtype=bool)
    image_mask[seg.image] = True
    _check_tokens(cfg, tokens, image_mask)

    H, dh = cfg.n_heads, cfg.head_dim
    scale = 1.0 / np.sqrt(dh)
    x = _embed(params, tokens, image_mask)
    cache, attns = [], []
    for l in range(cfg.n_layers):
        p = lambda n: params[f"l{l}.{n}"]  # noqa: E731
        q = (x @ p("wq")).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        k = (x @ p("wk")).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        v = (x @ p("wv")).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        A = softmax_rows(q @ k.transpose(0, 1, 3, 2) * scale, causal=True)
        if intervention is not None and intervention.selects(l):
            A = reallocate_rows(A, seg, intervention.gamma, intervention.mode, causal=True)
        o = (A @ v).transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
        x1 = x + o @ p("wo")
        g = np.tanh(x1 @ p("w1"))
        x2 = x1 + g @ p("w2")
        cache.append((x, q, k, v, A, o, x1, g))
        attns.append(A)
        x = x2
    logits = x @ params["out"]
    return ForwardTrace(
        logits=logits,
        attn=np.stack(attns, axis=1),
        seg=seg,
        tokens=tokens,
        params=params,
        fingerprint=params.fingerprint(),
        cache=cache,
        final_x=x,
        intervened=intervention is not None and intervention.gamma != 1,
    )


def backward(trace: ForwardTrace, dlogits=None, dattn=None) -> Params:
    """Reverse-mode gradients of a scalar given dL/dlogits and dL/dattention."""
    params = trace.params
    if params.fingerprint() != trace.fingerprint:
        raise StaleTrace("parameters changed since this trace was recorded")
    if trace.intervened:
        raise StaleTrace("traces recorded under an intervention are not differentiable")
    cfg = params.config
    B, T = trace.tokens.shape
    H, dh = cfg.n_heads, cfg.head_dim
    scale = 1.0 / np.sqrt(dh)
    grads = params.zeros_like()
    if dlogits is None:
        dlogits = np.zeros_like(trace.logits)
    dlogits = np.asarray(dlogits, dtype=np.float64).reshape(trace.logits.shape)
    if dattn is not None:
        dattn = np.asarray(dattn, dtype=np.float64).reshape(trace.attn.shape)

    flat = lambda a: a.reshape(-1, a.shape[-1])  # noqa: E731
    grads["out"] = flat(trace.final_x).T @ flat(dlogits)
    dx = dlogits @ params["out"].T
    for l in reversed(range(cfg.n_layers)):
        x, q, k, v, A, o, x1, g = trace.cache[l]
        p = lambda n: params[f"l{l}.{n}"]  # noqa: E731
        dg = dx @ p("w2").T
        grads[f"l{l}.w2"] = flat(g).T @ flat(dx)
        du = dg * (1.0 - g * g)
        grads[f"l{l}.w1"] = flat(x1).T @ flat(du)
        dx1 = dx + du @ p("w1").T
        grads[f"l{l}.wo"] = flat(o).T @ flat(dx1)
        do = (dx1 @ p("wo").T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        dA = do @ v.transpose(0, 1, 3, 2)
        if dattn is not None:
            dA = dA + dattn[:, l]
        dv = A.transpose(0, 1, 3, 2) @ do
        # softmax Jacobian per row: diag(p) - p p^T
        ds = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        merge = lambda a: a.transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)  # noqa: E731
        dq, dk, dv = merge(dq), merge(dk), merge(dv)
        grads[f"l{l}.wq"] = flat(x).T @ flat(dq)
        grads[f"l{l}.wk"] = flat(x).T @ flat(dk)
        grads[f"l{l}.wv"] = flat(x).T @ flat(dv)
        dx = dx1 + dq @ p("wq").T + dk @ p("wk").T + dv @ p("wv").T

    image_mask = np.zeros(T, dtype=bool)
    image_mask[trace.seg.image] = True
    grads["pos_emb"][:T] = dx.sum(axis=0)
    tok = trace.tokens
    np.add.at(grads["tok_emb"], tok[:, ~image_mask].ravel(), dx[:, ~image_mask].reshape(-1, cfg.d_model))
    np.add.at(grads["img_emb"], tok[:, image_mask].ravel(), dx[:, image_mask].reshape(-1, cfg.d_model))
    return grads


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def _response_positions(seg: TokenSegmentation) -> np.ndarray:
    r0, r1 = seg.response_span
    if r1 <= r0:
        raise EmptyResponseSpan("language-model loss needs a non-empty response span")
    if r0 < 1:
        raise EmptyResponseSpan("response cannot start at position 0")
    return np.arange(r0 - 1, r1 - 1)


def _lm_parts(trace: ForwardTrace, targets, mask):
    pos = _response_positions(trace.seg)
    targets = np.asarray(targets, dtype=np.int64).reshape(trace.batch, -1)
    if targets.shape[1] != pos.size:
        raise LengthMismatch(f"{targets.shape[1]} targets for a response span of {pos.size}")
    w = np.ones(targets.shape) if mask is None else np.asarray(mask, dtype=np.float64).reshape(targets.shape)
    logp = log_softmax(trace.logits[:, pos])
    return pos, targets, w, logp


def lm_loss(trace: ForwardTrace, targets, mask=None) -> float:
    """Mean next-token NLL of ``targets`` over the response span (and batch)."""
    _, targets, w, logp = _lm_parts(trace, targets, mask)
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    return float((nll * w).sum() / w.sum())


def lm_loss_grad(trace: ForwardTrace, targets, mask=None) -> np.ndarray:
    pos, targets, w, logp = _lm_parts(trace, targets, mask)
    d = np.exp(logp)
    np.put_along_axis(d, targets[..., None], np.take_along_axis(d, targets[..., None], -1) - 1.0, -1)
    d *= (w / w.sum())[..., None]
    out = np.zeros_like(trace.logits)
    out[:, pos] = d
    return out


def finite_diff_grad(loss_fn, params: Params, h: float = 1e-5) -> Params:
    """Central differences for every coordinate of every parameter."""
    if not h > 0:
        raise ValueError("h must be positive")
    grads = params.zeros_like()
    for name, arr in params.items():
        g = grads[name]
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            fp = loss_fn(params)
            arr[idx] = orig - h
            fm = loss_fn(params)
            arr[idx] = orig
            g[idx] = (fp - fm) / (2 * h)
    return grads


def sgd_step(params: Params, grads, lr: float) -> Params:
    if not lr > 0:
        raise ValueError("lr must be positive")
    out = {}
    for name, v in params.items():
        g = np.asarray(grads[name])
        if g.shape != v.shape:
            raise ShapeMismatch(f"{name}: gradient {g.shape} vs parameter {v.shape}")
        out[name] = v - lr * g
    return Params(params.config, out)


class Adam:
    """Adam state kept outside the parameters; ``step`` returns new Params."""

    def __init__(self, lr: float = 1e-2, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = self.v = None
        self.t = 0

    def step(self, params: Params, grads) -> Params:
        if self.m is None:
            self.m = {k: np.zeros_like(v) for k, v in params.items()}
            self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t += 1
        b1, b2 = self.betas
        out = {}
        for k, p in params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            out[k] = p - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return Params(params.config, out)


def make_optimizer(name: str, lr: float):
    if name == "sgd":
        return lambda p, g: sgd_step(p, g, lr)
    if name == "adam":
        return Adam(lr).step
    raise InvalidConfig(f"unknown optimizer {name!r}")


# -- decoding ---------------------------------------------------------------

def decode(params: Params, prompts, seg: TokenSegmentation, max_new: int, end_id: int,
           rng=None, intervention: InterventionConfig | None = None):
    """Greedy (``rng`` None) or temperature-1 sampled decoding, full re-forward per token.

    ``rng`` is one Generator for the batch or a list with one per row.

    ``seg`` describes the prompt; returns ``(responses, lengths)`` where
    responses is B x max_new padded with ``end_id`` after each sequence ends.
    """
    prompts = np.asarray(prompts, dtype=np.int64)
    if prompts.ndim == 1:
        prompts = prompts[None]
    B, P = prompts.shape
    seq = prompts
    done = np.zeros(B, dtype=bool)
    lengths = np.zeros(B, dtype=np.int64)
    out = np.full((B, max_new), end_id, dtype=np.int64)
    for t in range(max_new):
        step_seg = seg.with_response((P, P + t), total_len=P + t)
        trace = forward(params, seq, step_seg, intervention)
        logits = trace.logits[:, -1]
        if rng is None:
            nxt = logits.argmax(axis=-1)
        else:
            probs = np.exp(log_softmax(logits))
            u = rng.random(B) if isinstance(rng, np.random.Generator) else np.array([r.random() for r in rng])
            nxt = np.minimum((probs.cumsum(axis=-1) < u[:, None]).sum(axis=-1), logits.shape[-1] - 1)
        nxt = np.where(done, end_id, nxt)
        out[:, t] = nxt
        lengths += ~done
        done |= nxt == end_id
        seq = np.concatenate([seq, nxt[:, None]], axis=1)
        if done.all():
            break
    return out, lengths


# -- checkpoints ------------------------------------------------------------

def write_checkpoint(params: Params, step: int = 0, extra: dict | None = None) -> bytes:
    """Magic, u32 header length, JSON header, then float64 LE payload in param_shapes order."""
    header = {"config": asdict(params.config), "seed": params.config.seed, "step": int(step)}
    if extra:
        header["extra"] = extra
    head = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in params.values())
    return CKPT_MAGIC + struct.pack("<I", len(head)) + head + payload


def read_checkpoint(data: bytes) -> tuple[Params, dict]:
    if data[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise BadMagic("not an avar checkpoint")
    off = len(CKPT_MAGIC)
    if len(data) < off + 4:
        raise LengthMismatch("truncated checkpoint")
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    try:
        header = json.loads(data[off: off + n].decode("utf-8"))
        cfg = ModelConfig(**header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"bad checkpoint header: {exc}") from exc
    off += n
    shapes = param_shapes(cfg)
    need = 8 * sum(a * b for _, (a, b) in shapes)
    if len(data) - off != need:
        raise LengthMismatch(f"payload is {len(data) - off} bytes, expected {need}")
    arrays = {}
    for name, shape in shapes:
        size = shape[0] * shape[1]
        arrays[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    return Params(cfg, arrays), header


def save_checkpoint(path, params: Params, step: int = 0, extra: dict | None = None) -> None:
    with open(path, "wb") as f:
        f.write(write_checkpoint(params, step, extra))


def load_checkpoint(path) -> tuple[Params, dict]:
    with open(path, "rb") as f:
        return read_checkpoint(f.read())
