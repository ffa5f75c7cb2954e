"""Desk-scale end-to-end run: synthetic digit strings -> micro model -> held-out accuracy."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from .data import generate_corpus
from .model import ModelConfig, build_model
from .training import EpochMetrics, TrainConfig, TrainState, sequence_accuracy, train_epoch

log = logging.getLogger(__name__)


@dataclass
class ToyRunConfig:
    train_size: int = 2000
    test_size: int = 200
    min_len: int = 3
    max_len: int = 8
    charset: str = "0123456789"
    data_seed: int = 0
    test_seed: int = 1
    model_seed: int = 0
    max_epochs: int = 8
    time_budget: float = 1200.0  # seconds, data generation included
    target_accuracy: float = 0.9
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=5e-4, batch_size=8))
    model: ModelConfig = field(default_factory=ModelConfig.micro)


@dataclass
class ToyRunResult:
    history: list  # (EpochMetrics, held-out sequence accuracy)
    test_accuracy: float
    seconds: float

    @property
    def epochs(self) -> int:
        return len(self.history)


def run_toy(cfg: ToyRunConfig = ToyRunConfig(),
            report: Optional[Callable[[EpochMetrics, float], None]] = None) -> ToyRunResult:
    """Train until the held-out accuracy reaches the target, epochs run out, or the budget would be exceeded."""
    t0 = time.perf_counter()
    train = generate_corpus(cfg.train_size, cfg.min_len, cfg.max_len, cfg.charset, cfg.data_seed)
    test = generate_corpus(cfg.test_size, cfg.min_len, cfg.max_len, cfg.charset, cfg.test_seed)
    state = TrainState(model=build_model(cfg.model, cfg.model_seed), train_cfg=cfg.train)
    history = []
    acc = 0.0
    for _ in range(cfg.max_epochs):
        metrics = train_epoch(state, train)
        acc = sequence_accuracy(state.model, test)
        history.append((metrics, acc))
        if report is not None:
            report(metrics, acc)
        log.info("epoch %d loss %.4f tok %.3f held-out seq %.3f (%.0fs)",
                 metrics.epoch, metrics.loss, metrics.token_acc, acc, metrics.seconds)
        elapsed = time.perf_counter() - t0
        if acc >= cfg.target_accuracy:
            break
        # stop if another epoch would not fit in the budget
        if elapsed + elapsed / len(history) > cfg.time_budget:
            break
    return ToyRunResult(history, acc, time.perf_counter() - t0)
