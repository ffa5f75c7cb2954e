"""Greedy decoding: full recompute vs. memory-cached, their cross-check, rotation policy."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .attention import attend_heads
from .decoder import (
    DecoderConfig,
    DecoderParams,
    build_decoder,
    classify,
    decode_train,
    embed_tokens,
    ffn,
)
from . import decoder as _dec
from .tensor import Tensor

SOS_ID, EOS_ID = 1, 2


@dataclass
class DecodeResult:
    tokens: list  # emitted ids, ending with EOS unless the length limit was hit
    log_probs: list  # log-probability of each emitted token
    logits: np.ndarray  # steps x vocab
    rotation: int = 0  # degrees clockwise applied to the input before decoding

    @property
    def score(self) -> float:
        """Length-normalised mean log-probability."""
        return float(np.mean(self.log_probs)) if self.log_probs else float("-inf")

    @property
    def total_log_prob(self) -> float:
        return float(np.sum(self.log_probs))


@dataclass
class DecodeCache:
    """Per-block cross-attention projections plus growing self-attention key/value memories."""

    cross_k: list
    cross_v: list
    keys: list  # per block, (max_len x d) buffer; first `length` rows are filled
    values: list
    length: int = 0

    def memory_lengths(self) -> list[int]:
        return [self.length] * len(self.keys)


def _pick(logits: np.ndarray, eos_id: int, suppress_eos: bool) -> tuple[int, float]:
    z = logits - logits.max()
    logp = z - np.log(np.exp(z).sum())
    choice = logp.copy()
    if suppress_eos:
        choice[eos_id] = -np.inf
    tok = int(np.argmax(choice))  # first maximum -> lowest id on ties
    return tok, float(logp[tok])


def _limit(params: DecoderParams, max_len: Optional[int]) -> int:
    limit = params.cfg.max_len if max_len is None else max_len
    if not 1 <= limit <= params.cfg.max_len:
        raise ValueError(f"decode length {limit} outside [1, {params.cfg.max_len}]")
    return limit


def greedy_naive(memory: Tensor, params: DecoderParams, max_len: Optional[int] = None,
                 suppress_eos: bool = False, sos_id: int = SOS_ID, eos_id: int = EOS_ID) -> DecodeResult:
    """Re-run the full teacher-forced decoder on the growing prefix at every step."""
    limit = _limit(params, max_len)
    prefix = [sos_id]
    out, logps, rows = [], [], []
    for _ in range(limit):
        last = decode_train(memory, prefix, params).data[-1]
        tok, lp = _pick(last, eos_id, suppress_eos)
        rows.append(last)
        out.append(tok)
        logps.append(lp)
        if tok == eos_id:
            break
        prefix.append(tok)
    return DecodeResult(out, logps, np.array(rows))


def start_cache(memory: Tensor, params: DecoderParams, max_len: int) -> DecodeCache:
    cross_k, cross_v = [], []
    for block in params.blocks:
        k, v = _dec.project_memory(memory, block)
        cross_k.append(k)
        cross_v.append(v)
    d = params.cfg.d_model
    keys = [np.empty((max_len, d)) for _ in params.blocks]
    values = [np.empty((max_len, d)) for _ in params.blocks]
    return DecodeCache(cross_k, cross_v, keys, values)


def cached_step(token: int, cache: DecodeCache, params: DecoderParams) -> np.ndarray:
    """Advance one position with a single query vector; returns that position's logits."""
    cfg = params.cfg
    t = cache.length
    x = embed_tokens([token], params, offset=t)  # 1 x d
    for b, block in enumerate(params.blocks):
        sa_p = block.self_attn
        cache.keys[b][t] = T.matmul(x, sa_p.wk).data[0]
        cache.values[b][t] = T.matmul(x, sa_p.wv).data[0]
        keys = Tensor(cache.keys[b][:t + 1])
        values = Tensor(cache.values[b][:t + 1])
        # no mask: keys for later positions do not exist yet
        sa = attend_heads(T.matmul(x, sa_p.wq), keys, values, sa_p, None, cfg.attn_scale)
        x = T.layer_norm(T.add(x, sa), block.ln1_g, block.ln1_b, cfg.eps)
        ca_p = block.cross_attn
        ca = attend_heads(T.matmul(x, ca_p.wq), cache.cross_k[b], cache.cross_v[b], ca_p,
                          None, cfg.attn_scale)
        x = T.layer_norm(T.add(x, ca), block.ln2_g, block.ln2_b, cfg.eps)
        x = T.layer_norm(T.add(x, ffn(x, block.ffn)), block.ln3_g, block.ln3_b, cfg.eps)
    cache.length = t + 1
    return classify(x, params).data[0]


def greedy_cached(memory: Tensor, params: DecoderParams, max_len: Optional[int] = None,
                  suppress_eos: bool = False, sos_id: int = SOS_ID, eos_id: int = EOS_ID,
                  on_step: Optional[Callable[[DecodeCache], None]] = None) -> DecodeResult:
    """Incremental greedy decoding that reuses cached keys/values and memory projections."""
    limit = _limit(params, max_len)
    cache = start_cache(memory, params, limit)
    tok = sos_id
    out, logps, rows = [], [], []
    for _ in range(limit):
        logits = cached_step(tok, cache, params)
        if on_step is not None:
            on_step(cache)
        tok, lp = _pick(logits, eos_id, suppress_eos)
        rows.append(logits)
        out.append(tok)
        logps.append(lp)
        if tok == eos_id:
            break
    return DecodeResult(out, logps, np.array(rows))


# ---------------------------------------------------------------------------
# equivalence check


@dataclass
class TrialResult:
    trial: int
    seed: int
    blocks: int
    heads: int
    d_model: int
    steps_naive: int
    steps_cached: int
    tokens_equal: bool
    max_logit_dev: float

    @property
    def ok(self) -> bool:
        return self.tokens_equal and self.max_logit_dev <= EQUIV_TOL


@dataclass
class EquivalenceReport:
    trials: list = field(default_factory=list)

    @property
    def mismatches(self) -> list:
        return [t for t in self.trials if not t.ok]

    @property
    def ok(self) -> bool:
        return bool(self.trials) and not self.mismatches

    @property
    def max_deviation(self) -> float:
        return max((t.max_logit_dev for t in self.trials), default=0.0)


EQUIV_TOL = 1e-9


def random_decoder_case(seed: int, blocks=(1, 2, 3), heads=(1, 2, 4, 8)):
    """A random (config, params, memory, max_len, suppress_eos) tuple for one trial."""
    rng = np.random.default_rng(seed)
    h = int(rng.choice(heads))
    d = int(h * rng.choice([4, 8])) if h >= 4 else int(rng.choice([8, 16, 32]))
    d = max(d, 8)
    cfg = DecoderConfig(d_model=d, heads=h, blocks=int(rng.choice(blocks)),
                        d_ff=int(rng.choice([16, 32, 64])), dropout=0.0,
                        max_len=int(rng.integers(4, 17)), vocab_size=int(rng.integers(8, 67)))
    params = build_decoder(cfg, seed=int(rng.integers(2**31)))
    # vary how soon EOS wins so both stopping rules are exercised
    params.out_b.data[EOS_ID] += float(rng.choice([0.0, 0.0, 0.3, 0.6]))
    length = int(rng.integers(1, 41))
    memory = Tensor(rng.normal(size=(length, d)))
    suppress = bool(rng.random() < 0.25)
    return cfg, params, memory, cfg.max_len, suppress


def compare_paths(memory: Tensor, params: DecoderParams, max_len: Optional[int] = None,
                  suppress_eos: bool = False, cached_fn=None) -> tuple[bool, float, int, int]:
    cached_fn = cached_fn or greedy_cached
    naive = greedy_naive(memory, params, max_len, suppress_eos)
    fast = cached_fn(memory, params, max_len, suppress_eos)
    same = naive.tokens == fast.tokens
    n = min(len(naive.logits), len(fast.logits))
    dev = float(np.max(np.abs(naive.logits[:n] - fast.logits[:n]))) if n else 0.0
    return same, dev, len(naive.tokens), len(fast.tokens)


def verify_equivalence(trials: int = 100, seed: int = 0, blocks=(1, 2, 3), heads=(1, 2, 4, 8),
                       cached_fn=None) -> EquivalenceReport:
    if trials < 1:
        raise ValueError("need at least one trial")
    report = EquivalenceReport()
    seeds = np.random.SeedSequence(seed).generate_state(trials)
    for i, s in enumerate(seeds):
        cfg, params, memory, max_len, suppress = random_decoder_case(int(s), blocks, heads)
        same, dev, n1, n2 = compare_paths(memory, params, max_len, suppress, cached_fn)
        report.trials.append(TrialResult(i, int(s), cfg.blocks, cfg.heads, cfg.d_model,
                                          n1, n2, same, dev))
    return report


# ---------------------------------------------------------------------------
# rotation policy


def recognize_with_rotation(image: np.ndarray, decode: Callable[[np.ndarray], DecodeResult]) -> DecodeResult:
    """Decode ``image``; when it is taller than wide also decode both 90-degree rotations.

    ``decode`` maps a raw grayscale image to a :class:`DecodeResult`. The
    candidate with the highest mean log-probability wins (first on ties).
    """
    image = np.asarray(image)
    h, w = image.shape
    if h <= w:
        return decode(image)
    best = None
    for degrees, k in ((0, 0), (90, -1), (-90, 1)):
        res = decode(np.rot90(image, k))
        res.rotation = degrees
        if best is None or res.score > best.score:
            best = res
    return best
