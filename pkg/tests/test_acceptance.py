"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line."""

import csv
import io
import time

import numpy as np
import pytest

from master_str import cli
from master_str.context import init_magc, magc_block, pool_weights, magc_scale
from master_str.decoder import build_decoder, decode_train
from master_str.inference import verify_equivalence
from master_str.model import ModelConfig, build_model
from master_str.tensor import Tensor
from master_str.toy import ToyRunConfig, run_toy
from master_str.training import TrainConfig, TrainState, dump_checkpoint, parse_checkpoint, train_epoch
from master_str.data import generate_corpus
from master_str.verification import GRAD_TOL, gradcheck_suite, shape_conformance
from master_str.vocab import build_vocab, decode_tokens, encode_text


@pytest.fixture
def report(capsys):
    def emit(name: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, f"{name}: {detail}"
    return emit


def test_cache_equivalence(report):
    t0 = time.perf_counter()
    rep = verify_equivalence(120, seed=0, blocks=(1, 2, 3), heads=(1, 2, 4, 8))
    secs = time.perf_counter() - t0
    spans = {t.blocks for t in rep.trials} == {1, 2, 3} and {t.heads for t in rep.trials} == {1, 2, 4, 8}
    ok = rep.ok and spans and rep.max_deviation <= 1e-9 and secs < 120
    report("cache equivalence", ok,
           f"{len(rep.trials) - len(rep.mismatches)}/{len(rep.trials)} identical, "
           f"max logit dev {rep.max_deviation:.1e}, {secs:.1f}s")


def test_speedup_direction(report, tmp_path, capsys):
    out = tmp_path / "bench.csv"
    assert cli.main(["bench", "--lengths", "25", "--trials", "20", "--seed", "0", "--csv", str(out)]) == 0
    capsys.readouterr()
    (r,) = csv.DictReader(io.StringIO(out.read_text()))
    naive, cached = float(r["naive_mean_ms"]), float(r["cached_mean_ms"])
    shape = (int(r["d_model"]), int(r["blocks"]), int(r["length"]), int(r["trials"]))
    ok = shape == (256, 3, 25, 20) and cached <= naive / 1.5
    report("speedup direction", ok,
           f"length 25: naive {naive:.1f} ms, cached {cached:.1f} ms, x{naive / cached:.2f} (need >= 1.5)")


def test_gradient_correctness(report):
    t0 = time.perf_counter()
    errs = gradcheck_suite(seed=0)
    secs = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    ok = len(errs) == 8 and errs[worst] < GRAD_TOL and secs < 300
    report("gradient correctness", ok, f"max rel err {errs[worst]:.1e} ({worst}) over {len(errs)} components, {secs:.1f}s")


def test_shape_conformance(report):
    sr = shape_conformance(seed=0)
    got = dict((n, g[1:]) for n, _, g in sr.rows)
    outs = [got["conv1_x.pool"], got["conv2_x.pool"], got["conv3_x.pool"], got["conv4_x.conv"], got["conv5_x.conv"]]
    ok = sr.ok and outs == [(24, 80), (12, 40), (6, 40), (6, 40), (6, 40)] and sr.final == (512, 6, 40)
    report("shape conformance", ok, f"stage outputs {outs}, final {sr.final}")


def test_causality(report):
    cfg = ModelConfig.micro().decoder
    worst = 0.0
    for seed in range(3):
        rng = np.random.default_rng(seed)
        p = build_decoder(cfg, seed)
        mem = Tensor(rng.normal(size=(240, cfg.d_model)))
        toks = rng.integers(0, cfg.vocab_size, size=13)
        base = decode_train(mem, toks, p).data
        for j in range(1, 13):
            alt = toks.copy()
            alt[j] = (alt[j] + 1 + rng.integers(0, cfg.vocab_size - 1)) % cfg.vocab_size
            worst = max(worst, float(np.max(np.abs(decode_train(mem, alt, p).data[:j] - base[:j]))))
    report("causality", worst <= 1e-9, f"max change of logits at i < j over 3 micro models: {worst:.1e}")


def test_magc_properties(report):
    rng = np.random.default_rng(0)
    sums = perm = 0.0
    for heads in (1, 2, 4, 8):
        p = init_magc(16, heads, 4, rng)
        x = rng.normal(size=(16, 3, 5))
        alpha = pool_weights(Tensor(x[None]), p.wk, magc_scale(p)).data
        sums = max(sums, float(np.max(np.abs(alpha.sum(axis=-1) - 1))))
        order = rng.permutation(15)
        px = x.reshape(16, 15)[:, order].reshape(16, 3, 5)
        moved = magc_block(Tensor(x), p).data.reshape(16, 15)[:, order].reshape(16, 3, 5)
        perm = max(perm, float(np.max(np.abs(magc_block(Tensor(px), p).data - moved))))
    off = init_magc(16, 0, 4, rng)
    x = rng.normal(size=(16, 3, 5))
    ident = np.array_equal(magc_block(Tensor(x), off).data, x)
    ok = sums <= 1e-9 and perm <= 1e-9 and ident
    report("MAGC properties", ok, f"weight-sum err {sums:.1e}, permutation err {perm:.1e}, h=0 identity {ident}")


@pytest.mark.slow
def test_toy_end_to_end(report):
    cfg = ToyRunConfig()
    enc, dec = cfg.model.encoder, cfg.model.decoder
    assert enc.channels == tuple(c // 8 for c in (64, 128, 256, 512, 512, 512))
    assert (dec.d_model, dec.heads, dec.blocks, enc.magc_heads) == (128, 4, 2, 4)
    assert (cfg.train_size, cfg.test_size, cfg.min_len, cfg.max_len) == (2000, 200, 3, 8)
    res = run_toy(cfg)
    ok = res.test_accuracy >= 0.9 and res.seconds <= 1200
    report("toy end-to-end", ok,
           f"held-out exact-sequence accuracy {res.test_accuracy:.3f} after {res.epochs} epochs "
           f"in {res.seconds:.0f}s (need >= 0.90 within 1200s)")


def test_vocabulary_contract(report):
    v = build_vocab()
    strings = ["", "A1", "Hello42", "0123456789", "zZ9"]
    round_trip = all(decode_tokens(encode_text(s, v), v) == s for s in strings)
    ids = all(v.id_of(v.symbol_of(i)) == i for i in range(len(v)))
    report("vocabulary contract", len(v) == 66 and round_trip and ids,
           f"size {len(v)}, text round-trip {round_trip}, id round-trip {ids}")


def test_checkpoint_round_trip(report):
    from conftest import tiny_config
    corpus = generate_corpus(8, 2, 4, "0123456789", seed=3)

    def fresh():
        return TrainState(build_model(tiny_config(), 0), TrainConfig(lr=1e-3, batch_size=4, seed=1))
    straight = fresh()
    want = [train_epoch(straight, corpus) for _ in range(2)]
    first = fresh()
    train_epoch(first, corpus)
    blob = dump_checkpoint(first)
    loaded = parse_checkpoint(blob)
    identical = dump_checkpoint(loaded) == blob
    got = train_epoch(loaded, corpus)
    same = (got.loss, got.token_acc, got.seq_acc) == (want[1].loss, want[1].token_acc, want[1].seq_acc)
    report("checkpoint round-trip", identical and same,
           f"save-load-save identical {identical}, resumed epoch metrics identical {same}")
