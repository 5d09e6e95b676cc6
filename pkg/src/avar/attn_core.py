"""Token segmentation, attention tensors, stable softmax and the ATND dump format."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AllMasked,
    BadMagic,
    CausalViolation,
    HeaderParseError,
    LengthMismatch,
    NegativeEntry,
    OutOfRange,
    OverlapError,
    RowSumError,
    ShapeMismatch,
    ValidationError,
)

Span = tuple[int, int]

MAGIC = b"ATNDUMP1"
DUMP_VERSION = 1
DEFAULT_ROW_TOL = 1e-5


def _span(s) -> Span:
    a, b = s
    return int(a), int(b)


@dataclass(frozen=True)
class TokenSegmentation:
    """Half-open index spans for system, image, user and response tokens."""

    total_len: int
    system_span: Span
    image_spans: tuple[Span, ...] = ()
    user_spans: tuple[Span, ...] = ()
    response_span: Span = (0, 0)

    def __post_init__(self):
        object.__setattr__(self, "system_span", _span(self.system_span))
        object.__setattr__(self, "image_spans", tuple(_span(s) for s in self.image_spans))
        object.__setattr__(self, "user_spans", tuple(_span(s) for s in self.user_spans))
        if self.response_span is None:
            object.__setattr__(self, "response_span", (self.total_len, self.total_len))
        object.__setattr__(self, "response_span", _span(self.response_span))

    @staticmethod
    def _expand(spans) -> np.ndarray:
        idx = [np.arange(a, b) for a, b in spans]
        return np.concatenate(idx).astype(np.intp) if idx else np.zeros(0, np.intp)

    @property
    def system(self) -> np.ndarray:
        return self._expand([self.system_span])

    @property
    def image(self) -> np.ndarray:
        return self._expand(self.image_spans)

    @property
    def user(self) -> np.ndarray:
        return self._expand(self.user_spans)

    @property
    def response(self) -> np.ndarray:
        return self._expand([self.response_span])

    def query_set(self, kind: str) -> np.ndarray:
        if kind == "user":
            return self.user
        if kind == "response":
            return self.response
        raise ValueError(f"unknown query set kind {kind!r}")

    def with_response(self, span: Span, total_len: int | None = None) -> "TokenSegmentation":
        return TokenSegmentation(
            total_len=self.total_len if total_len is None else total_len,
            system_span=self.system_span,
            image_spans=self.image_spans,
            user_spans=self.user_spans,
            response_span=span,
        )

    def to_json(self) -> dict:
        return {
            "system": list(self.system_span),
            "image": [list(s) for s in self.image_spans],
            "user": [list(s) for s in self.user_spans],
            "response": list(self.response_span),
        }

    @classmethod
    def from_json(cls, total_len: int, spans: dict) -> "TokenSegmentation":
        return cls(
            total_len=total_len,
            system_span=spans["system"],
            image_spans=spans.get("image", []),
            user_spans=spans.get("user", []),
            response_span=spans.get("response", (total_len, total_len)),
        )


def validate_segmentation(seg: TokenSegmentation) -> TokenSegmentation:
    """Raise on the first violated segmentation invariant, else return ``seg``."""
    T = seg.total_len
    if T < 0:
        raise OutOfRange(f"negative total_len {T}")
    named = [("system", seg.system_span)]
    named += [("image", s) for s in seg.image_spans]
    named += [("user", s) for s in seg.user_spans]
    named.append(("response", seg.response_span))
    for name, (a, b) in named:
        if a < 0 or b < a or b > T:
            raise OutOfRange(f"{name} span [{a}, {b}) outside [0, {T})")
    # empty spans cannot overlap anything
    nonempty = sorted((a, b, name) for name, (a, b) in named if b > a)
    for (a1, b1, n1), (a2, b2, n2) in zip(nonempty, nonempty[1:]):
        if a2 < b1:
            raise OverlapError(f"{n1} span [{a1}, {b1}) overlaps {n2} span [{a2}, {b2})")
    return seg


@dataclass(frozen=True, eq=False)
class AttentionTensor:
    """Dense attention record, ``weights[layer, head, query, key]``."""

    weights: np.ndarray
    causal: bool = True
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.asarray(self.weights)
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ShapeMismatch(f"attention must be L x H x T x T, got {w.shape}")
        object.__setattr__(self, "weights", w)

    @property
    def layers(self) -> int:
        return self.weights.shape[0]

    @property
    def heads(self) -> int:
        return self.weights.shape[1]

    @property
    def seq_len(self) -> int:
        return self.weights.shape[2]


def validate_attention(A: AttentionTensor, row_tol: float = DEFAULT_ROW_TOL) -> AttentionTensor:
    if not row_tol > 0:
        raise ValueError("row_tol must be positive")
    w = A.weights
    neg = np.argwhere(~(w >= 0))
    if len(neg):
        l, h, q, k = (int(x) for x in neg[0])
        raise NegativeEntry(l, h, q, k, float(w[l, h, q, k]))
    if A.causal:
        upper = np.triu(np.ones(w.shape[-2:], dtype=bool), k=1)
        bad = np.argwhere((w != 0) & upper)
        if len(bad):
            l, h, q, k = (int(x) for x in bad[0])
            raise CausalViolation(l, h, q, k, float(w[l, h, q, k]))
    sums = w.sum(axis=-1, dtype=np.float64)
    bad = np.argwhere(np.abs(sums - 1.0) > row_tol)
    if len(bad):
        l, h, q = (int(x) for x in bad[0])
        raise RowSumError(l, h, q, float(sums[l, h, q]))
    return A


def causal_mask(T: int) -> np.ndarray:
    """Boolean mask, True where key k is admissible for query q (k <= q)."""
    return np.tril(np.ones((T, T), dtype=bool))


def softmax_rows(scores: np.ndarray, causal: bool = True) -> np.ndarray:
    """Max-subtracted softmax over the last axis; leading axes are batch axes."""
    s = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    if causal:
        T = s.shape[-1]
        if s.shape[-2] != T:
            raise ShapeMismatch("causal softmax needs square score matrices")
        if T == 0:
            raise AllMasked("no admissible keys")
        s = np.where(causal_mask(T), s, -np.inf)
    m = s.max(axis=-1, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=-1, keepdims=True)


def attention_from_scores(scores: np.ndarray, causal: bool = True) -> AttentionTensor:
    return AttentionTensor(softmax_rows(scores, causal), causal=causal)


# -- ATND dump --------------------------------------------------------------

def _header_bytes(A: AttentionTensor, seg: TokenSegmentation, sample_id: str | None) -> bytes:
    header = {
        "version": DUMP_VERSION,
        "seq_len": A.seq_len,
        "layers": A.layers,
        "heads": A.heads,
        "causal": bool(A.causal),
        "dtype": "f32",
        "spans": seg.to_json(),
    }
    if sample_id is not None:
        header["sample_id"] = sample_id
    return json.dumps(header, separators=(",", ":")).encode("utf-8")


def write_dump(A: AttentionTensor, seg: TokenSegmentation, sample_id: str | None = None) -> bytes:
    if seg.total_len != A.seq_len:
        raise LengthMismatch(f"segmentation length {seg.total_len} != seq_len {A.seq_len}")
    validate_segmentation(seg)
    if sample_id is None:
        sample_id = A.meta.get("sample_id")
    head = _header_bytes(A, seg, sample_id)
    payload = np.ascontiguousarray(A.weights, dtype="<f4").tobytes()
    return MAGIC + struct.pack("<I", len(head)) + head + payload


def read_dump(data: bytes, row_tol: float = DEFAULT_ROW_TOL) -> tuple[AttentionTensor, TokenSegmentation]:
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise BadMagic("input does not start with ATNDUMP1")
    off = len(MAGIC)
    if len(data) < off + 4:
        raise LengthMismatch("truncated before header length")
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    if len(data) < off + n:
        raise LengthMismatch(f"header declares {n} bytes, only {len(data) - off} present")
    try:
        header = json.loads(data[off: off + n].decode("utf-8"))
        if header.get("version") != DUMP_VERSION or header.get("dtype") != "f32":
            raise HeaderParseError(f"unsupported version/dtype in {header!r}")
        T, L, H = (int(header[k]) for k in ("seq_len", "layers", "heads"))
        causal = header["causal"]
        if not isinstance(causal, bool):
            raise HeaderParseError("causal must be a boolean")
        seg = TokenSegmentation.from_json(T, header["spans"])
    except HeaderParseError:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise HeaderParseError(f"bad header: {exc}") from exc
    if min(T, L, H) < 1:
        raise HeaderParseError("dimensions must be positive")
    off += n
    expected = L * H * T * T * 4
    if len(data) - off != expected:
        raise LengthMismatch(f"payload is {len(data) - off} bytes, header implies {expected}")
    w = np.frombuffer(data, dtype="<f4", offset=off).reshape(L, H, T, T).astype(np.float64)
    meta = {"sample_id": header["sample_id"]} if "sample_id" in header else {}
    A = AttentionTensor(w, causal=causal, meta=meta)
    validate_segmentation(seg)
    validate_attention(A, row_tol)
    return A, seg


def load_dump(path) -> tuple[AttentionTensor, TokenSegmentation]:
    with open(path, "rb") as f:
        return read_dump(f.read())


def save_dump(path, A: AttentionTensor, seg: TokenSegmentation, sample_id: str | None = None) -> None:
    with open(path, "wb") as f:
        f.write(write_dump(A, seg, sample_id))


__all__ = [
    "AttentionTensor",
    "TokenSegmentation",
    "ValidationError",
    "attention_from_scores",
    "causal_mask",
    "load_dump",
    "read_dump",
    "save_dump",
    "softmax_rows",
    "validate_attention",
    "validate_segmentation",
    "write_dump",
]
