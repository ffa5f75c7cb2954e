import numpy as np
import pytest

from master_str import decoder as dec
from master_str.decoder import DecoderConfig, build_decoder
from master_str.inference import (
    EOS_ID,
    DecodeResult,
    greedy_cached,
    greedy_naive,
    random_decoder_case,
    recognize_with_rotation,
    verify_equivalence,
)
from master_str.tensor import Tensor
from master_str.vocab import build_vocab, decode_tokens


def micro(**kw):
    base = dict(d_model=16, heads=2, blocks=2, d_ff=32, dropout=0.0, max_len=12, vocab_size=14)
    base.update(kw)
    return DecoderConfig(**base)


def test_forced_eos_at_first_step():
    p = build_decoder(micro(), 0)
    p.out_b.data[EOS_ID] = 1e3
    mem = Tensor(np.random.default_rng(0).normal(size=(5, 16)))
    for fn in (greedy_naive, greedy_cached):
        res = fn(mem, p)
        assert res.tokens == [EOS_ID]
        assert decode_tokens(res.tokens, build_vocab("0123456789")) == ""


def test_truncation_emits_exactly_t_tokens():
    p = build_decoder(micro(max_len=7), 1)
    mem = Tensor(np.random.default_rng(1).normal(size=(5, 16)))
    a = greedy_naive(mem, p, suppress_eos=True)
    b = greedy_cached(mem, p, suppress_eos=True)
    assert len(a.tokens) == len(b.tokens) == 7
    assert EOS_ID not in a.tokens
    assert a.tokens == b.tokens


def test_single_image_contract_independent_of_batch():
    from master_str.model import ModelConfig, build_model
    from master_str.training import recognize
    model = build_model(ModelConfig.micro(), 0)
    imgs = np.random.default_rng(2).random((3, 1, 48, 160))
    alone = recognize(model, imgs[1:2])
    together = recognize(model, imgs, batch_size=3)
    assert together[1] == alone[0]


def test_cached_matches_naive_tokens_and_logits():
    for seed in range(10):
        cfg, p, mem, t, sup = random_decoder_case(seed)
        a = greedy_naive(mem, p, t, sup)
        b = greedy_cached(mem, p, t, sup)
        assert a.tokens == b.tokens
        assert np.max(np.abs(a.logits - b.logits)) <= 1e-9


def test_cache_lengths_track_steps():
    p = build_decoder(micro(), 3)
    mem = Tensor(np.random.default_rng(3).normal(size=(4, 16)))
    seen = []
    greedy_cached(mem, p, 6, suppress_eos=True, on_step=lambda c: seen.append(c.memory_lengths()))
    assert seen == [[k, k] for k in range(1, 7)]


def test_memory_projected_once_per_block(monkeypatch):
    calls = []
    original = dec.project_memory

    def counting(memory, block):
        calls.append(id(block))
        return original(memory, block)

    monkeypatch.setattr(dec, "project_memory", counting)
    p = build_decoder(micro(blocks=3), 4)
    mem = Tensor(np.random.default_rng(4).normal(size=(6, 16)))
    greedy_cached(mem, p, 8, suppress_eos=True)
    assert len(calls) == 3
    calls.clear()
    greedy_naive(mem, p, 8, suppress_eos=True)
    assert len(calls) == 3 * 8


def test_equivalence_report_and_determinism():
    a = verify_equivalence(30, seed=7, heads=(1, 2, 4))
    b = verify_equivalence(30, seed=7, heads=(1, 2, 4))
    assert a.ok and not a.mismatches
    assert [(t.seed, t.max_logit_dev, t.steps_naive) for t in a.trials] == \
           [(t.seed, t.max_logit_dev, t.steps_naive) for t in b.trials]
    assert {t.blocks for t in a.trials} == {1, 2, 3}


def test_equivalence_catches_a_faulty_cache():
    def faulty(memory, params, max_len=None, suppress_eos=False):
        return greedy_cached(Tensor(memory.data + 1e-6), params, max_len, suppress_eos)
    report = verify_equivalence(5, seed=0, cached_fn=faulty)
    assert not report.ok
    assert report.max_deviation > 1e-9


def test_decode_length_bounds():
    p = build_decoder(micro(max_len=4), 0)
    with pytest.raises(ValueError):
        greedy_cached(Tensor(np.zeros((2, 16))), p, 5)


class FakeDecoder:
    def __init__(self, scores):
        self.scores = list(scores)
        self.calls = []

    def __call__(self, image):
        self.calls.append(image.shape)
        s = self.scores[len(self.calls) - 1]
        return DecodeResult([5, EOS_ID], [s, s], np.zeros((2, 3)))


@pytest.mark.parametrize("shape", [(10, 40), (20, 20)])
def test_rotation_gate_not_triggered(shape):
    fake = FakeDecoder([-0.1])
    res = recognize_with_rotation(np.zeros(shape), fake)
    assert len(fake.calls) == 1 and res.rotation == 0


def test_tall_image_tries_three_and_keeps_best():
    fake = FakeDecoder([-0.2, -0.5, -0.9])
    res = recognize_with_rotation(np.zeros((40, 10)), fake)
    assert fake.calls == [(40, 10), (10, 40), (10, 40)]
    assert res.rotation == 0 and res.score == pytest.approx(-0.2)

    fake = FakeDecoder([-0.9, -0.5, -0.2])
    assert recognize_with_rotation(np.zeros((40, 10)), fake).rotation == -90


def test_rotation_direction():
    img = np.zeros((3, 2))
    img[0, 0] = 1.0  # top-left
    seen = []

    def grab(x):
        seen.append(x)
        return DecodeResult([EOS_ID], [0.0], np.zeros((1, 3)))
    recognize_with_rotation(img, grab)
    assert seen[1][0, -1] == 1.0  # clockwise: top-left -> top-right
    assert seen[2][-1, 0] == 1.0  # counter-clockwise: top-left -> bottom-left
