"""Accuracy reports, corruption-robustness sweeps, and apply-time benchmarks.

evaluate() scores a frozen model on a split with any prompt variant (or no
prompt at all).  corruption_eval() sweeps the five corruption families over
severities 1..5, each cell seeded from its own derived stream so a sweep is
reproducible in isolation.  bench_timing() measures prompt application and
model forward wall time with warmup excluded and reports medians; only the
ratio between variants is a portable claim, never the absolute numbers.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .augment import CORRUPTION_KINDS, CorruptionSpec, corrupt
from .data import Dataset
from .errors import (
    ClassMismatch,
    ConfigError,
    CountMismatch,
    EmptyKinds,
    EmptySplit,
    ShapeMismatch,
)
from .model import FrozenModel, model_forward
from .pipeline import (
    DEFAULT_EVP_SCALE,
    VARIANTS,
    BaselineConfig,
    PreparedPrompt,
    PromptParams,
    init_params,
    prepare_baseline,
    prepare_prompt,
)
from .rng import RngStream

__all__ = [
    "SEVERITIES",
    "EvalReport",
    "CorruptionReport",
    "TimingReport",
    "evaluate",
    "corruption_eval",
    "bench_timing",
    "default_bench_params",
    "eval_csv",
    "corruption_csv",
    "timing_csv",
    "format_eval",
    "format_corruption",
    "format_timing",
]

SEVERITIES = (1, 2, 3, 4, 5)

_EVAL_BATCH = 256


@dataclass(frozen=True)
class EvalReport:
    """Split accuracy, overall and by class.

    counts[c] samples of class c contributed; the count-weighted mean of
    per_class reproduces overall (classes absent from the split carry
    accuracy 0.0 and weight 0).
    """

    overall: float
    per_class: tuple[float, ...]
    counts: tuple[int, ...]
    n: int


@dataclass(frozen=True)
class CorruptionReport:
    """Accuracy per (kind, severity) cell.

    mean is sum(cells) / len(cells) over kinds in matrix order, severities
    ascending; recomputing that expression from the cells reproduces it
    exactly.
    """

    matrix: dict[str, dict[int, float]]
    mean: float

    def cells(self) -> list[float]:
        return [self.matrix[k][s] for k in self.matrix for s in sorted(self.matrix[k])]


@dataclass(frozen=True)
class TimingReport:
    """Wall-clock medians for one variant; relative = prompt_s / model_s."""

    variant: str
    prompt_s: float
    model_s: float
    relative: float
    batch: int
    reps: int
    prompt_min_s: float
    model_min_s: float


def _resolve_prompt(variant, params, mask_mode: str) -> PreparedPrompt | None:
    if variant in (None, "none"):
        if params is not None:
            raise ConfigError("zero-shot evaluation takes no prompt parameters")
        return None
    if variant == "acavp":
        if not isinstance(params, PromptParams):
            raise ConfigError(f"acavp evaluation needs PromptParams, got {type(params).__name__}")
        return prepare_prompt(params, mask_mode)
    if variant in ("vp", "evp", "autovp"):
        if not isinstance(params, BaselineConfig):
            raise ConfigError(f"{variant} evaluation needs BaselineConfig, got {type(params).__name__}")
        if params.variant != variant:
            raise ConfigError(f"variant {variant!r} does not match params variant {params.variant!r}")
        return prepare_baseline(params)
    raise ConfigError(f"unknown prompt variant {variant!r}")


def _prompt_of(params, mask_mode: str) -> PreparedPrompt | None:
    """Dispatch on the parameter object itself; None means zero-shot."""
    if params is None:
        return None
    if isinstance(params, PromptParams):
        return prepare_prompt(params, mask_mode)
    if isinstance(params, BaselineConfig):
        return prepare_baseline(params)
    raise ConfigError(
        f"params must be PromptParams, BaselineConfig, or None, got {type(params).__name__}"
    )


def _split_arrays(dataset_split) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(dataset_split, Dataset):
        return dataset_split.images, dataset_split.labels
    x, y = dataset_split
    x = np.asarray(x)
    y = np.asarray(y)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeMismatch(f"split images must be (N, 3, H, W), got {x.shape}")
    if y.shape != (x.shape[0],):
        raise CountMismatch(f"{x.shape[0]} images but label shape {y.shape}")
    return x, y


def _score(
    model: FrozenModel,
    prep: PreparedPrompt | None,
    x: np.ndarray,
    y: np.ndarray,
    batch: int,
) -> EvalReport:
    k = model.num_classes
    correct = np.zeros(k, dtype=np.int64)
    counts = np.zeros(k, dtype=np.int64)
    n = x.shape[0]
    for s in range(0, n, batch):
        xb = x[s : s + batch]
        yb = y[s : s + batch]
        if prep is not None:
            xb = prep.apply(xb)
        logits, _ = model_forward(xb, model)
        pred = logits.argmax(axis=1)
        np.add.at(counts, yb, 1)
        hits = yb[pred == yb]
        np.add.at(correct, hits, 1)
    per_class = tuple(
        float(correct[c]) / counts[c] if counts[c] else 0.0 for c in range(k)
    )
    return EvalReport(
        overall=float(correct.sum()) / n,
        per_class=per_class,
        counts=tuple(int(c) for c in counts),
        n=int(n),
    )


def evaluate(
    model: FrozenModel,
    prompt_variant,
    params,
    dataset_split,
    *,
    mask_mode: str = "geometric",
    batch: int = _EVAL_BATCH,
) -> EvalReport:
    """Argmax accuracy over a split with the prompt applied.

    prompt_variant None (or "none") scores the frozen model zero-shot.  The
    result is deterministic and order-independent: only integer hit counts
    are accumulated, so permuting the split cannot move any total.
    """
    if batch < 1:
        raise ConfigError(f"batch must be >= 1, got {batch}")
    prep = _resolve_prompt(prompt_variant, params, mask_mode)
    x, y = _split_arrays(dataset_split)
    if x.shape[0] == 0:
        raise EmptySplit("cannot evaluate an empty split")
    if y.min() < 0 or y.max() >= model.num_classes:
        raise ClassMismatch(
            f"labels span [{y.min()}, {y.max()}] but the model has {model.num_classes} classes"
        )
    return _score(model, prep, x, y, batch)


def corruption_eval(
    model: FrozenModel,
    params,
    clean_test: Dataset,
    kinds=CORRUPTION_KINDS,
    rng: RngStream | None = None,
    *,
    mask_mode: str = "geometric",
    batch: int = _EVAL_BATCH,
) -> CorruptionReport:
    """Accuracy under every (kind, severity) corruption of the test images.

    Each cell corrupts the full set with streams derived from
    rng.child(f"{kind}/{severity}").indexed(i), so any single cell can be
    reproduced without running the rest of the sweep.  params may be
    PromptParams, a BaselineConfig, or None for zero-shot.
    """
    kinds = tuple(kinds)
    if not kinds:
        raise EmptyKinds("corruption sweep needs at least one kind")
    if len(set(kinds)) != len(kinds):
        raise ConfigError(f"duplicate corruption kinds in {kinds}")
    if rng is None:
        raise ConfigError("corruption_eval needs an RngStream")
    if batch < 1:
        raise ConfigError(f"batch must be >= 1, got {batch}")
    prep = _prompt_of(params, mask_mode)
    x, y = _split_arrays(clean_test)
    if x.shape[0] == 0:
        raise EmptySplit("cannot sweep corruptions over an empty test set")
    if y.min() < 0 or y.max() >= model.num_classes:
        raise ClassMismatch(
            f"labels span [{y.min()}, {y.max()}] but the model has {model.num_classes} classes"
        )
    matrix: dict[str, dict[int, float]] = {}
    for kind in kinds:
        row: dict[int, float] = {}
        for sev in SEVERITIES:
            spec = CorruptionSpec(kind, sev)
            stream = rng.child(f"{kind}/{sev}")
            cx = np.stack(
                [corrupt(x[i], spec, stream.indexed(i)) for i in range(x.shape[0])]
            )
            row[sev] = _score(model, prep, cx, y, batch).overall
        matrix[kind] = row
    cells = [matrix[k][s] for k in matrix for s in sorted(matrix[k])]
    return CorruptionReport(matrix=matrix, mean=sum(cells) / len(cells))


def default_bench_params(h: int, w: int) -> dict:
    """One parameter point per variant, sized for an h x w canvas."""
    zero = np.zeros((3, h, w), dtype=np.float32)
    pad = min(28, (min(h, w) - 1) // 2)
    return {
        "vp": BaselineConfig("vp", zero.copy(), pad=pad),
        "evp": BaselineConfig("evp", zero.copy(), scale=DEFAULT_EVP_SCALE),
        "autovp": BaselineConfig("autovp", zero.copy()),
        "acavp": init_params(h, w),
    }


def _med_min(fn, reps: int, warmup: int) -> tuple[float, float]:
    for _ in range(warmup):
        fn()
    ts = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    ts.sort()
    return float(np.median(ts)), float(ts[0])


def bench_timing(
    params_by_variant: dict,
    model: FrozenModel,
    h: int,
    w: int,
    batch: int = 1,
    reps: int = 20,
    *,
    warmup: int = 3,
    seed: int = 0,
) -> dict[str, TimingReport]:
    """Median wall time of prompt application vs model forward, per variant.

    Preparation (warp geometry, squashed fields) and input generation happen
    outside the timed regions; the harness is a plain sequential loop so no
    worker scheduling pollutes the numbers.  reps below 5 are refused: a
    median of fewer repetitions is noise.
    """
    if reps < 5:
        raise ConfigError(f"reps must be >= 5, got {reps}")
    if batch < 1:
        raise ConfigError(f"batch must be >= 1, got {batch}")
    if not params_by_variant:
        raise ConfigError("bench_timing needs at least one variant")
    preps = {}
    for variant, params in params_by_variant.items():
        if variant not in VARIANTS:
            raise ConfigError(f"unknown prompt variant {variant!r}")
        preps[variant] = _prompt_of(params, "geometric")
    x = (
        RngStream(seed)
        .child("bench")
        .generator()
        .random((batch, 3, h, w), dtype=np.float32)
    )
    reports: dict[str, TimingReport] = {}
    for variant, prep in preps.items():
        prompted = prep.apply(x)
        p_med, p_min = _med_min(lambda: prep.apply(x), reps, warmup)
        m_med, m_min = _med_min(lambda: model_forward(prompted, model), reps, warmup)
        reports[variant] = TimingReport(
            variant=variant,
            prompt_s=p_med,
            model_s=m_med,
            relative=p_med / m_med,
            batch=batch,
            reps=reps,
            prompt_min_s=p_min,
            model_min_s=m_min,
        )
    return reports


def eval_csv(report: EvalReport) -> str:
    """Rows `class,accuracy,count`; the first row is the overall figure."""
    lines = ["class,accuracy,count"]
    lines.append(f"overall,{report.overall:.6g},{report.n}")
    for c, (acc, cnt) in enumerate(zip(report.per_class, report.counts)):
        lines.append(f"{c},{acc:.6g},{cnt}")
    return "\n".join(lines) + "\n"


def corruption_csv(report: CorruptionReport) -> str:
    lines = ["kind,severity,accuracy"]
    for kind in report.matrix:
        for sev in sorted(report.matrix[kind]):
            lines.append(f"{kind},{sev},{report.matrix[kind][sev]:.6g}")
    return "\n".join(lines) + "\n"


def timing_csv(reports: dict[str, TimingReport]) -> str:
    lines = ["variant,prompt_s,model_s,relative"]
    for variant, r in reports.items():
        lines.append(f"{variant},{r.prompt_s:.6g},{r.model_s:.6g},{r.relative:.6g}")
    return "\n".join(lines) + "\n"


def format_eval(report: EvalReport) -> str:
    parts = [f"accuracy {report.overall:.4f} over {report.n} samples"]
    for c, (acc, cnt) in enumerate(zip(report.per_class, report.counts)):
        parts.append(f"  class {c}: {acc:.4f} ({cnt} samples)")
    return "\n".join(parts)


def format_corruption(report: CorruptionReport) -> str:
    parts = [f"mean corrupted accuracy {report.mean:.4f}"]
    for kind, row in report.matrix.items():
        cells = " ".join(f"{row[s]:.4f}" for s in sorted(row))
        parts.append(f"  {kind}: {cells}")
    return "\n".join(parts)


def format_timing(reports: dict[str, TimingReport]) -> str:
    parts = ["variant    prompt_ms   model_ms   relative"]
    for v, r in reports.items():
        parts.append(
            f"{v:<10} {r.prompt_s * 1e3:>9.4f} {r.model_s * 1e3:>10.4f} {r.relative:>10.4f}"
        )
    return "\n".join(parts)
