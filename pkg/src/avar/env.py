"""Grounded-lookup task: the answer lives only in the image span.

Layout of every episode (positions are fixed, so one segmentation serves a
whole batch)::

    system  : SYS0 SYS1 SYS2 <distractor value>
    image   : K pair symbols, each encoding (key, value)
    user    : QRY <key>
    response: ANS <value> END
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attn_core import TokenSegmentation

PAD, SYS0, SYS1, SYS2, QRY, ANS, END = range(7)
N_SPECIAL = 7


@dataclass(frozen=True)
class Episode:
    index: int
    prompt: np.ndarray  # prompt token ids, image positions hold image-symbol ids
    target: np.ndarray  # ANS value END
    keys: np.ndarray
    values: np.ndarray
    query_key: int
    answer: int  # value index
    distractor: int  # value index


class GroundedLookupEnv:
    """Seeded generator and scorer of grounded-lookup episodes."""

    def __init__(self, seed: int = 0, n_keys: int = 6, n_values: int = 6, n_pairs: int = 4):
        if n_pairs > n_keys:
            raise ValueError("n_pairs cannot exceed the key alphabet")
        if n_values < 2:
            raise ValueError("need at least two values to plant a distractor")
        self.seed = seed
        self.n_keys = n_keys
        self.n_values = n_values
        self.n_pairs = n_pairs

    # vocabulary
    @property
    def vocab_size(self) -> int:
        return N_SPECIAL + self.n_keys + self.n_values

    @property
    def image_vocab_size(self) -> int:
        return self.n_keys * self.n_values

    def key_token(self, k: int) -> int:
        return N_SPECIAL + k

    def value_token(self, v: int) -> int:
        return N_SPECIAL + self.n_keys + v

    def token_value(self, tok: int) -> int | None:
        v = int(tok) - N_SPECIAL - self.n_keys
        return v if 0 <= v < self.n_values else None

    def pair_symbol(self, k: int, v: int) -> int:
        return k * self.n_values + v

    # layout
    @property
    def prompt_len(self) -> int:
        return 4 + self.n_pairs + 2

    @property
    def seq_len(self) -> int:
        return self.prompt_len + 3

    def segmentation(self, response_len: int = 3) -> TokenSegmentation:
        p = self.prompt_len
        return TokenSegmentation(
            total_len=p + response_len,
            system_span=(0, 4),
            image_spans=((4, 4 + self.n_pairs),),
            user_spans=((4 + self.n_pairs, p),),
            response_span=(p, p + response_len),
        )

    def episode(self, index: int) -> Episode:
        rng = np.random.default_rng([self.seed, index])
        keys = rng.choice(self.n_keys, size=self.n_pairs, replace=False)
        values = rng.integers(self.n_values, size=self.n_pairs)
        j = int(rng.integers(self.n_pairs))
        answer = int(values[j])
        distractor = int(rng.integers(self.n_values - 1))
        if distractor >= answer:
            distractor += 1
        prompt = np.array(
            [SYS0, SYS1, SYS2, self.value_token(distractor)]
            + [self.pair_symbol(int(k), int(v)) for k, v in zip(keys, values)]
            + [QRY, self.key_token(int(keys[j]))],
            dtype=np.int64,
        )
        target = np.array([ANS, self.value_token(answer), END], dtype=np.int64)
        return Episode(index, prompt, target, keys, values, int(keys[j]), answer, distractor)

    def batch(self, start: int, size: int) -> list[Episode]:
        return [self.episode(i) for i in range(start, start + size)]

    # scoring
    def answer_of(self, response) -> int | None:
        for tok in response:
            v = self.token_value(tok)
            if v is not None:
                return v
        return None

    def accuracy(self, ep: Episode, response) -> int:
        return int(self.answer_of(response) == ep.answer)

    def format_ok(self, response) -> int:
        r = [int(t) for t in response]
        return int(len(r) == 3 and r[0] == ANS and self.token_value(r[1]) is not None and r[2] == END)

    def oracle_response(self, ep: Episode) -> np.ndarray:
        """What an agent reading the image table would answer."""
        j = int(np.flatnonzero(ep.keys == ep.query_key)[0])
        return np.array([ANS, self.value_token(int(ep.values[j])), END])

    def distractor_response(self, ep: Episode) -> np.ndarray:
        return np.array([ANS, self.value_token(ep.distractor), END])


def grounded_lookup_env(seed: int = 0, **kw) -> GroundedLookupEnv:
    return GroundedLookupEnv(seed, **kw)
