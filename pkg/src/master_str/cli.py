"""Command line: ``master-str synth|train|recognize|verify|bench``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 verification failure.
Seeds default to ``$MASTER_SEED`` (else 0) when not given explicitly.

Config files are flat ``key=value`` lines; lines starting with ``#`` are comments. Model
keys: preset (micro|full), channels, res_blocks, magc_heads, ratio,
out_channels, height, width, d_model, heads, blocks, d_ff, dropout, max_len,
vocab_size, attn_scale, charset. Training keys: lr, batch_size, epochs,
beta1, beta2, adam_eps, seed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import statistics
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import (
    RenderStyle,
    generate_corpus,
    load_image,
    load_manifest,
    preprocess,
    save_image,
    write_manifest,
)
from .decoder import DecoderConfig, build_decoder
from .errors import ConfigurationError, FormatError
from .inference import greedy_cached, greedy_naive, recognize_with_rotation, verify_equivalence
from .model import MasterModel, ModelConfig, build_model
from .tensor import Tensor
from .training import (
    TrainConfig,
    TrainState,
    load_checkpoint,
    save_checkpoint,
    sequence_accuracy,
    train_epoch,
)
from .verification import GRAD_TOL, gradcheck_suite, shape_conformance
from .vocab import decode_tokens

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3
MIN_BENCH_TRIALS, BENCH_WARMUP = 20, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def default_seed(seed: Optional[int]) -> int:
    if seed is not None:
        return seed
    env = os.environ.get("MASTER_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError as exc:
        raise UsageError(f"MASTER_SEED must be an integer, got {env!r}") from exc


def read_kv(path) -> dict:
    """Parse ``key=value`` lines; blank lines and lines starting with ``#`` are skipped."""
    kv = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not raw.strip() or raw.lstrip().startswith("#"):
            continue
        key, sep, val = raw.partition("=")
        if not sep:
            raise ConfigurationError(f"{path}:{n}: expected key=value, got {raw!r}")
        kv[key.strip()] = val.strip()
    return kv


_TRAIN_KEYS = {"lr", "batch_size", "epochs", "beta1", "beta2", "adam_eps", "seed"}
PRESETS = {"micro": ModelConfig.micro, "full": ModelConfig.full}


def parse_config(kv: dict) -> tuple[ModelConfig, TrainConfig]:
    kv = dict(kv)
    preset = kv.pop("preset", "micro")
    if preset not in PRESETS:
        raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    train_kv = {k: kv.pop(k) for k in list(kv) if k in _TRAIN_KEYS}
    model_cfg = ModelConfig.from_kv(kv, PRESETS[preset]())
    model_cfg.validate()
    train_cfg = TrainConfig.from_kv(train_kv)
    train_cfg.validate()
    return model_cfg, train_cfg


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    seed = default_seed(args.seed)
    if args.count < 1 or not 1 <= args.min_len <= args.max_len:
        raise UsageError("need count >= 1 and 1 <= min-len <= max-len")
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        samples = generate_corpus(args.count, args.min_len, args.max_len, args.charset, seed,
                                  RenderStyle(noise=args.noise))
        rows = []
        for i, s in enumerate(samples):
            name = f"img_{i:06d}.pgm"
            save_image(out / name, s.image)
            rows.append((name, s.text))
        write_manifest(out / "manifest.tsv", rows)
    except OSError as exc:
        print(f"error: cannot write corpus under {out}: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(f"wrote {len(rows)} images and {out / 'manifest.tsv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    samples = load_manifest(args.manifest)
    if not samples:
        raise FormatError(f"manifest {args.manifest} has no rows")
    if args.resume:
        state = load_checkpoint(args.resume)
    else:
        model_cfg, train_cfg = parse_config(read_kv(args.config) if args.config else {})
        if args.seed is not None or "MASTER_SEED" in os.environ:
            train_cfg.seed = default_seed(args.seed)
        state = TrainState(model=build_model(model_cfg, train_cfg.seed), train_cfg=train_cfg)
    epochs = state.train_cfg.epochs if args.epochs is None else args.epochs
    out = Path(args.out)
    print("epoch\tloss\ttoken_acc\tseq_acc\tseconds")
    if epochs == 0:
        save_checkpoint(out, state)
    for _ in range(epochs):
        m = train_epoch(state, samples)
        print(f"{m.epoch}\t{m.loss:.6f}\t{m.token_acc:.4f}\t{m.seq_acc:.4f}\t{m.seconds:.1f}", flush=True)
        save_checkpoint(out, state)
    eval_samples = load_manifest(args.eval) if args.eval else samples
    acc = sequence_accuracy(state.model, eval_samples)
    print(f"final_seq_acc\t{acc:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# recognize


def image_decoder(model: MasterModel):
    def decode(image: np.ndarray):
        memory = model.memory(Tensor(preprocess(image)))
        return greedy_cached(memory, model.decoder)
    return decode


def cmd_recognize(args) -> int:
    if not args.images:
        raise UsageError("recognize needs at least one image path")
    model = load_checkpoint(args.checkpoint).model
    decode = image_decoder(model)
    failed = 0
    for path in args.images:
        try:
            image = load_image(path)
        except (OSError, FormatError) as exc:
            print(f"{path}\tERROR\t{exc}", file=sys.stderr)
            failed += 1
            continue
        res = recognize_with_rotation(image, decode) if args.rotate else decode(image)
        print(f"{path}\t{decode_tokens(res.tokens, model.vocab)}\t{res.score:.6f}")
    return EXIT_DATA if failed else EXIT_OK


# ---------------------------------------------------------------------------
# verify


def _faulty_cached(memory, params, max_len=None, suppress_eos=False):
    # negative control: the cached path sees a slightly shifted memory
    return greedy_cached(Tensor(memory.data + 1e-6), params, max_len, suppress_eos)


def run_verify(trials: int, seed: int, inject_fault: bool = False, shapes: bool = True) -> dict:
    report = verify_equivalence(trials, seed, cached_fn=_faulty_cached if inject_fault else None)
    grads = gradcheck_suite(seed)
    summary = {
        "equivalence": {"passed": len(report.trials) - len(report.mismatches), "trials": len(report.trials),
                        "max_logit_deviation": report.max_deviation,
                        "failing_seeds": [t.seed for t in report.mismatches]},
        "gradcheck": {"max_rel_err": max(grads.values()), "per_component": grads, "tolerance": GRAD_TOL},
    }
    ok = report.ok and max(grads.values()) < GRAD_TOL
    if shapes:
        sr = shape_conformance(seed=seed)
        summary["shapes"] = {"conformant": sr.ok, "final": list(sr.final),
                             "rows": {n: list(g) for n, _, g in sr.rows}}
        ok = ok and sr.ok and sr.final == (512, 6, 40)
    summary["ok"] = ok
    return summary


def cmd_verify(args) -> int:
    seed = default_seed(args.seed)
    summary = run_verify(args.trials, seed, args.inject_fault, not args.skip_shapes)
    eq, gc = summary["equivalence"], summary["gradcheck"]
    line = (f"equivalence: {eq['passed']}/{eq['trials']}, "
            f"gradcheck max rel err {gc['max_rel_err']:.1e} {'<' if gc['max_rel_err'] < GRAD_TOL else '>='} 1e-4")
    if "shapes" in summary:
        line += ", shapes: " + ("backbone conformant" if summary["shapes"]["conformant"] else "NONCONFORMANT")
    print(line, file=sys.stderr)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK if summary["ok"] else EXIT_VERIFY


# ---------------------------------------------------------------------------
# bench


@dataclass
class BenchRow:
    length: int
    d_model: int
    blocks: int
    naive_mean_ms: float
    naive_std_ms: float
    cached_mean_ms: float
    cached_std_ms: float
    trials: int

    @property
    def speedup(self) -> float:
        return self.naive_mean_ms / self.cached_mean_ms


BENCH_DEFAULT = DecoderConfig(d_model=256, heads=8, blocks=3, d_ff=1024, dropout=0.0, max_len=50)


def _timed(fn, trials: int, warmup: int) -> list[float]:
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(trials):
        t0 = time.perf_counter()
        fn()
        out.append((time.perf_counter() - t0) * 1e3)
    return out


def run_bench(cfg: DecoderConfig, lengths: Sequence[int], trials: int, seed: int = 0,
              warmup: int = BENCH_WARMUP, memory_hw: tuple = (6, 40)) -> list[BenchRow]:
    """Time both greedy paths at each forced output length (EOS suppressed)."""
    if trials < MIN_BENCH_TRIALS:
        raise UsageError(f"bench needs at least {MIN_BENCH_TRIALS} timed trials, got {trials}")
    if warmup < BENCH_WARMUP:
        raise UsageError(f"bench needs at least {BENCH_WARMUP} warmup trials")
    if max(lengths) > cfg.max_len:
        raise UsageError(f"length {max(lengths)} exceeds max_len {cfg.max_len}")
    params = build_decoder(cfg, seed)
    rng = np.random.default_rng(seed)
    memory = Tensor(rng.normal(size=(memory_hw[0] * memory_hw[1], cfg.d_model)))
    rows = []
    for n in lengths:
        naive = _timed(lambda: greedy_naive(memory, params, n, suppress_eos=True), trials, warmup)
        cached = _timed(lambda: greedy_cached(memory, params, n, suppress_eos=True), trials, warmup)
        rows.append(BenchRow(n, cfg.d_model, cfg.blocks, statistics.mean(naive), statistics.stdev(naive),
                             statistics.mean(cached), statistics.stdev(cached), trials))
    return rows


_BENCH_COLS = ("length", "d_model", "blocks", "naive_mean_ms", "naive_std_ms",
               "cached_mean_ms", "cached_std_ms", "speedup", "trials")


def _row_values(r: BenchRow) -> list:
    return [r.length, r.d_model, r.blocks, f"{r.naive_mean_ms:.3f}", f"{r.naive_std_ms:.3f}",
            f"{r.cached_mean_ms:.3f}", f"{r.cached_std_ms:.3f}", f"{r.speedup:.2f}", r.trials]


def format_table(rows: Sequence[BenchRow]) -> str:
    cells = [list(_BENCH_COLS)] + [[str(v) for v in _row_values(r)] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(_BENCH_COLS))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells)


def format_csv(rows: Sequence[BenchRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_BENCH_COLS)
    for r in rows:
        w.writerow(_row_values(r))
    return buf.getvalue()


def bench_config(spec: Optional[str]) -> DecoderConfig:
    if spec is None:
        return BENCH_DEFAULT
    kv = read_kv(spec)
    cfg = DecoderConfig(**{**BENCH_DEFAULT.__dict__})
    ints = {"d_model", "heads", "blocks", "d_ff", "max_len", "vocab_size"}
    for k, v in kv.items():
        if k in ints:
            setattr(cfg, k, int(v))
        elif k == "attn_scale":
            cfg.attn_scale = v
        elif k != "dropout":
            raise ConfigurationError(f"unknown bench config key {k!r}")
    cfg.validate()
    return cfg


def cmd_bench(args) -> int:
    try:
        lengths = [int(v) for v in args.lengths.split(",") if v]
    except ValueError as exc:
        raise UsageError(f"bad --lengths {args.lengths!r}") from exc
    if not lengths or min(lengths) < 1:
        raise UsageError("--lengths must list positive integers")
    rows = run_bench(bench_config(args.config), lengths, args.trials, default_seed(args.seed), args.warmup)
    print(format_table(rows))
    text = format_csv(rows)
    if args.csv:
        Path(args.csv).write_text(text)
    else:
        print()
        print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="master-str", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic PGM corpus and manifest.tsv")
    s.add_argument("out_dir")
    s.add_argument("--count", type=int, default=2000)
    s.add_argument("--min-len", type=int, default=3)
    s.add_argument("--max-len", type=int, default=8)
    s.add_argument("--charset", default="0123456789")
    s.add_argument("--noise", type=float, default=RenderStyle.noise)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train on a manifest; prints per-epoch TSV metrics")
    t.add_argument("manifest")
    t.add_argument("--config", help="flat key=value config file")
    t.add_argument("--out", required=True, help="checkpoint path, rewritten after every epoch")
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", help="continue from this checkpoint")
    t.add_argument("--eval", help="manifest for the final greedy sequence accuracy")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("recognize", help="transcribe PGM images: path<TAB>text<TAB>score")
    r.add_argument("checkpoint")
    r.add_argument("images", nargs="*")
    r.add_argument("--rotate", action="store_true", help="also try 90-degree rotations of tall images")
    r.set_defaults(func=cmd_recognize)

    v = sub.add_parser("verify", help="cache equivalence, gradient checks, shape conformance")
    v.add_argument("--trials", type=int, default=100)
    v.add_argument("--seed", type=int)
    v.add_argument("--inject-fault", action="store_true", help="negative control; must fail")
    v.add_argument("--skip-shapes", action="store_true", help="skip the full-width encoder pass")
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", help="naive vs cached greedy decode latency")
    b.add_argument("--config", help="key=value decoder config (default d_model=256, N=3, H=8)")
    b.add_argument("--lengths", default="5,10,25")
    b.add_argument("--trials", type=int, default=MIN_BENCH_TRIALS)
    b.add_argument("--warmup", type=int, default=BENCH_WARMUP)
    b.add_argument("--csv", help="write CSV here instead of stdout")
    b.add_argument("--seed", type=int)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ConfigurationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
