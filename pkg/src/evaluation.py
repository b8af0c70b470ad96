"""Contains the selectors, the budget sweep, the analytic cost model
and the forward-time bench
"""

import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from attrs import asdict, field, frozen

from settings import (
    BENCH_BATCH,
    BENCH_REPEATS,
    BENCH_TOKENS,
    FEATURE_DIM,
    SEED,
    SWEEP_BUDGETS,
)
from .difftopk import HardMask, budget_to_k, diff_topk_forward, hard_topk, soft_hard_gap
from .errors import ConfigError
from .pipeline import (
    FrozenBackbone,
    accuracy,
    forward_infer,
    forward_train,
    full_token_accuracy,
    infer_from_mask,
    init_backbone,
)
from .scorer import ScorerParams, init_scorer, score, scorer_flop_count
from .synth_data import TokenBatch, oracle_mask
from .tensor import Tensor, no_grad
from .utils import Selector, substream

logger = logging.getLogger(__name__)

EVAL_CHUNK = 256
TIMING_FIELDS = ("forward_ms",)


@frozen
class SweepRow:
    selector: str
    budget: float
    accuracy: float
    retention: float
    signal_recall: float
    signal_precision: float
    tokens_kept: float
    flops: int
    scorer_flops: int
    soft_hard_gap: Optional[float] = None
    logit_gap: Optional[float] = None
    forward_ms: float = 0.0

    def to_dict(self, timing: bool = False) -> dict:
        data = asdict(self)
        if not timing:
            for name in TIMING_FIELDS:
                data.pop(name)
        return data


def _cell(value) -> str:
    if value is None:
        return ""
    # repr keeps every float digit
    return repr(value) if isinstance(value, float) else str(value)


@frozen
class SweepReport:
    """One row per (selector, budget). Wall-clock columns are only
    written on request, so reports of the same run compare equal byte for byte"""

    rows: list[SweepRow]
    full_accuracy: float
    config: dict = field(factory=dict)

    def row(self, selector: Selector, budget: float) -> SweepRow:
        for row in self.rows:
            if row.selector == selector.value and row.budget == budget:
                return row
        raise KeyError(f"no row for {selector.value} at budget {budget}")

    def to_csv(self, path, timing: bool = False):
        records = [row.to_dict(timing) for row in self.rows]
        columns = [attribute.name for attribute in SweepRow.__attrs_attrs__]
        if not timing:
            columns = [name for name in columns if name not in TIMING_FIELDS]

        with open(path, "w", newline="", encoding="utf-8") as file:
            writer = csv.DictWriter(file, fieldnames=columns)
            writer.writeheader()
            for record in records:
                writer.writerow({key: _cell(value) for key, value in record.items()})

    def to_json(self, path, timing: bool = False):
        data = {
            "full_accuracy": self.full_accuracy,
            "config": self.config,
            "rows": [row.to_dict(timing) for row in self.rows],
        }
        text = json.dumps(data, indent=2, sort_keys=True) + "\n"
        Path(path).write_text(text, encoding="utf-8")


def flop_count(n_kept: int, input_dim: int, backbone: FrozenBackbone) -> int:
    """Flops of the downstream consumer on one sequence of n_kept tokens:
    the pooling product 2 * n_kept * D plus the MLP 2 * (D * H + H * C)

    Args:
        n_kept (int): tokens reaching the backbone
        input_dim (int): D
        backbone (FrozenBackbone): supplies H and C

    Returns:
        int: exact matmul flops, as counted by count_flops
    """
    hidden, classes = backbone.hidden_dim, backbone.num_classes
    return 2 * int(n_kept) * input_dim + 2 * (input_dim * hidden + hidden * classes)


def selection_quality(
    hard: HardMask, batch: TokenBatch
) -> tuple[np.ndarray, np.ndarray]:
    """Per-row signal recall, normalized by min(m, k), and precision"""
    hits = (hard.mask * batch.signal_mask).sum(axis=1)
    planted = batch.signal_idx.shape[1]
    return hits / np.minimum(planted, hard.k), hits / hard.k


def _budget_key(budget: float) -> int:
    return int(round(budget * 1_000_000))


def select(
    selector: Selector,
    batch: TokenBatch,
    budget: float,
    scorer: Optional[ScorerParams] = None,
    rng: Optional[np.random.Generator] = None,
) -> HardMask:
    """Hard selection of one batch by any selector

    Raises:
        ConfigError: learned selector without a scorer, random without a generator
    """
    k = budget_to_k(batch.valid_len, budget)

    if selector is Selector.ORACLE:
        return oracle_mask(batch, budget)

    if selector is Selector.NORM:
        return hard_topk(np.linalg.norm(batch.features, axis=2), k, batch.valid_len)

    if selector is Selector.RANDOM:
        if rng is None:
            raise ConfigError("the random selector needs a generator")
        return hard_topk(rng.random(batch.features.shape[:2]), k, batch.valid_len)

    if scorer is None:
        raise ConfigError("the learned selector needs a trained scorer")

    with no_grad():
        scores = score(batch.tokens(), scorer, batch.valid_len)
        return hard_topk(scores, k, batch.valid_len)


def evaluate(
    selector: Selector,
    budget: float,
    dataset: TokenBatch,
    backbone: FrozenBackbone,
    scorer: Optional[ScorerParams] = None,
    seed: int = SEED,
    full_accuracy: Optional[float] = None,
) -> SweepRow:
    """Scores one selector at one budget through the inference path.

    Args:
        selector (Selector): learned, random, norm or oracle
        budget (float): retention budget in (0, 1)
        dataset (TokenBatch): the evaluation split
        backbone (FrozenBackbone): the frozen backbone
        scorer (ScorerParams, optional): required by the learned selector
        seed (int, optional): seeds the random selector through the "eval" stream
        full_accuracy (float, optional): reused instead of recomputed when given

    Raises:
        ConfigError: the learned selector has no scorer
        BudgetError: the budget is outside (0, 1)

    Returns:
        SweepRow: the metrics
    """
    if selector is Selector.LEARNED and scorer is None:
        raise ConfigError("the learned selector needs a trained scorer")

    if full_accuracy is None:
        full_accuracy = full_token_accuracy(dataset, backbone)

    rng = None
    if selector is Selector.RANDOM:
        rng = substream(seed, "eval", _budget_key(budget))
    recall, precision, kept, correct = [], [], [], 0.0
    gaps, logit_gaps = [], []
    elapsed = 0.0

    for part in dataset.batches(EVAL_CHUNK):
        start = time.perf_counter()
        if selector is Selector.LEARNED:
            output = forward_infer(part, scorer, backbone, budget)
            hard, logits = output.hard, output.logits
        else:
            hard = select(selector, part, budget, scorer, rng)
            logits = infer_from_mask(part, hard, backbone)
        elapsed += time.perf_counter() - start

        correct += accuracy(logits, part.labels) * len(part)
        row_recall, row_precision = selection_quality(hard, part)
        recall.append(row_recall)
        precision.append(row_precision)
        kept.append(hard.k)

        if selector is Selector.LEARNED:
            with no_grad():
                trained = forward_train(part, scorer, backbone, budget)
            soft = trained.selection.soft_mask
            gap = soft_hard_gap(soft, trained.hard, part.valid_len)
            gaps.append(gap * len(part))
            drift = np.abs(trained.logits.data - logits.data).mean()
            logit_gaps.append(drift * len(part))

    kept = np.concatenate(kept) if kept else np.zeros(0, dtype=np.int64)
    size = max(len(dataset), 1)
    acc = correct / size
    dim = dataset.feature_dim
    scorer_flops = 0
    if selector is Selector.LEARNED:
        scorer_flops = sum(
            scorer_flop_count(int(n), dim, scorer.proj_dim) for n in dataset.valid_len
        )

    row = SweepRow(
        selector=selector.value,
        budget=budget,
        accuracy=acc,
        retention=acc / full_accuracy if full_accuracy > 0 else float("nan"),
        signal_recall=float(np.concatenate(recall).mean()) if recall else 0.0,
        signal_precision=float(np.concatenate(precision).mean()) if precision else 0.0,
        tokens_kept=float(kept.mean()) if kept.size else 0.0,
        flops=sum(flop_count(k, dim, backbone) for k in kept),
        scorer_flops=scorer_flops,
        soft_hard_gap=float(sum(gaps) / size) if gaps else None,
        logit_gap=float(sum(logit_gaps) / size) if logit_gaps else None,
        forward_ms=1000.0 * elapsed,
    )

    logger.debug(
        "%s at budget %.2f: accuracy %.4f recall %.4f",
        row.selector,
        budget,
        acc,
        row.signal_recall,
    )
    return row


def budget_sweep(
    scorer: Optional[ScorerParams],
    dataset: TokenBatch,
    backbone: FrozenBackbone,
    budgets: Sequence[float] = SWEEP_BUDGETS,
    selectors: Sequence[Selector] = tuple(Selector),
    seed: int = SEED,
    workers: int = 1,
    config: Optional[dict] = None,
) -> SweepReport:
    """Evaluates one trained scorer, and the baselines, at every budget.

    Cells are independent and may run on a thread pool; the row order
    is always selectors x budgets regardless of workers.

    Raises:
        ConfigError: the learned selector is requested without a scorer
    """
    if Selector.LEARNED in selectors and scorer is None:
        raise ConfigError("the learned selector needs a trained scorer")

    # every budget is validated before the first cell runs
    for budget in budgets:
        budget_to_k(2, budget)

    full = full_token_accuracy(dataset, backbone)
    cells = [(selector, budget) for selector in selectors for budget in budgets]

    def run(cell):
        selector, budget = cell
        return evaluate(selector, budget, dataset, backbone, scorer, seed, full)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run, cells))
    else:
        rows = [run(cell) for cell in cells]

    logger.info("sweep of %d cells done, full-token accuracy %.4f", len(rows), full)
    return SweepReport(rows, full, config or {})


@frozen
class BenchReport:
    budget: float
    n_tokens: int
    k: int
    full_ms: float
    full_iqr_ms: float
    pruned_ms: float
    pruned_iqr_ms: float
    scorer_ms: float
    speedup: float
    flop_ratio: float
    token_flop_ratio: float

    def to_dict(self) -> dict:
        return asdict(self)


def _timed(fn, repeats: int) -> tuple[float, float]:
    samples = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        samples.append(1000.0 * (time.perf_counter() - start))

    low, high = np.percentile(samples, [25, 75])
    return float(np.median(samples)), float(high - low)


def bench_forward(
    budget: float,
    n_tokens: int = BENCH_TOKENS,
    repeats: int = BENCH_REPEATS,
    batch_size: int = BENCH_BATCH,
    feature_dim: int = FEATURE_DIM,
    backbone: Optional[FrozenBackbone] = None,
    seed: int = SEED,
) -> BenchReport:
    """Times the downstream consumer on every token against the gathered
    k tokens. Scoring time is measured apart.

    Args:
        budget (float): the retention budget
        n_tokens (int, optional): sequence length, every token valid
        repeats (int, optional): timed repetitions, at least 10
        batch_size (int, optional): sequences per forward
        feature_dim (int, optional): D when no backbone is given
        backbone (FrozenBackbone, optional): defaults to a random frozen one
        seed (int, optional): the "bench" stream seed

    Raises:
        ConfigError: fewer than 10 repeats

    Returns:
        BenchReport: medians, IQRs and the analytic ratios
    """
    if repeats < 10:
        raise ConfigError(f"bench needs at least 10 repeats, got {repeats}")

    if backbone is None:
        rng = substream(seed, "bench", 1)
        backbone = init_backbone(feature_dim, 4, 32, seed)
        backbone = FrozenBackbone(
            backbone.w1,
            backbone.b1,
            rng.normal(size=backbone.w2.shape),
            backbone.b2,
            frozen=True,
        )

    dim = backbone.input_dim
    rng = substream(seed, "bench")
    features = rng.normal(size=(batch_size, n_tokens, dim))
    valid_len = np.full(batch_size, n_tokens, dtype=np.int64)
    batch = TokenBatch(
        features,
        valid_len,
        np.zeros(batch_size, dtype=np.int64),
        np.zeros((batch_size, 1), dtype=np.int64),
    )

    scorer = init_scorer(dim, max(dim // 2, 1), seed)
    k = budget_to_k(valid_len, budget)

    def scoring():
        with no_grad():
            return score(Tensor(features), scorer, valid_len)

    hard = hard_topk(scoring(), k, valid_len)
    everything = HardMask(np.ones((batch_size, n_tokens)), valid_len.copy())

    full_ms, full_iqr = _timed(
        lambda: infer_from_mask(batch, everything, backbone), repeats
    )
    pruned_ms, pruned_iqr = _timed(
        lambda: infer_from_mask(batch, hard, backbone), repeats
    )
    scorer_ms, _ = _timed(scoring, repeats)

    kept = int(k[0])
    report = BenchReport(
        budget=budget,
        n_tokens=n_tokens,
        k=kept,
        full_ms=full_ms,
        full_iqr_ms=full_iqr,
        pruned_ms=pruned_ms,
        pruned_iqr_ms=pruned_iqr,
        scorer_ms=scorer_ms,
        speedup=full_ms / pruned_ms if pruned_ms > 0 else float("inf"),
        flop_ratio=flop_count(kept, dim, backbone)
        / flop_count(n_tokens, dim, backbone),
        token_flop_ratio=kept / n_tokens,
    )

    logger.info(
        "bench at budget %.2f: %.1fx speedup over %d tokens",
        budget,
        report.speedup,
        n_tokens,
    )
    return report


def dump_scores(scorer: ScorerParams, batch: TokenBatch, path, budget: float):
    """Writes one CSV line per valid token: seq_id, token_index, score,
    soft_mask, hard_selected, is_signal

    Raises:
        OSError: the path is not writable
    """
    with no_grad():
        scores = score(batch.tokens(), scorer, batch.valid_len)
        k = budget_to_k(batch.valid_len, budget)
        soft = diff_topk_forward(scores, k, batch.valid_len).soft_mask.data
        hard = hard_topk(scores, k, batch.valid_len).mask

    signal = batch.signal_mask
    with open(path, "w", newline="", encoding="utf-8") as file:
        writer = csv.writer(file)
        writer.writerow(
            [
                "seq_id",
                "token_index",
                "score",
                "soft_mask",
                "hard_selected",
                "is_signal",
            ]
        )

        for row in range(len(batch)):
            for token in range(int(batch.valid_len[row])):
                writer.writerow(
                    [
                        row,
                        token,
                        repr(float(scores.data[row, token])),
                        repr(float(soft[row, token])),
                        int(hard[row, token]),
                        int(signal[row, token]),
                    ]
                )
