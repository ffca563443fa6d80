"""Layer similarity traces, intrinsic accuracy, SOP/NSP cross-evaluation, throughput."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import model as M
from .data import Batch, TrainingInstance, iter_batches
from .optim import LambConfig, OptimizerState, lamb_step
from .tensor import no_grad

log = logging.getLogger(__name__)

TRACE_HEADER = ("layer", "l2_distance", "cos_degrees")


@dataclass
class LayerTraceRow:
    layer: int
    l2_distance: float
    cos_degrees: float
    skipped_tokens: int = 0


def io_similarity(x_in: np.ndarray, x_out: np.ndarray) -> tuple[float, float, int]:
    """Mean L2 distance and mean angle in degrees between paired row vectors.

    Rows where either vector has zero norm are left out of the angle mean and
    counted in the third return value.
    """
    x_in = np.asarray(x_in, dtype=np.float64).reshape(-1, x_in.shape[-1])
    x_out = np.asarray(x_out, dtype=np.float64).reshape(-1, x_out.shape[-1])
    l2 = np.linalg.norm(x_out - x_in, axis=1)
    n_in = np.linalg.norm(x_in, axis=1)
    n_out = np.linalg.norm(x_out, axis=1)
    ok = (n_in > 0) & (n_out > 0)
    cos = np.einsum("ij,ij->i", x_in[ok], x_out[ok]) / (n_in[ok] * n_out[ok])
    deg = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
    mean_deg = float(deg.mean()) if deg.size else 0.0
    return float(l2.mean()) if l2.size else 0.0, mean_deg, int((~ok).sum())


def layer_io_similarity(params: M.ParameterStore, cfg: M.ModelConfig | None, batch: Batch) -> list[LayerTraceRow]:
    """One row per layer: mean over non-padding tokens of ||out - in|| and angle(in, out)."""
    with no_grad():
        out = M.forward(params, cfg, batch, training=False, trace=True)
    keep = np.asarray(batch.padding_mask, dtype=bool)
    rows = []
    for i, (xi, xo) in enumerate(zip(out.layer_inputs, out.layer_outputs)):
        l2, deg, skipped = io_similarity(xi.data[keep], xo.data[keep])
        if skipped:
            log.warning("layer %d: skipped %d zero-norm token vectors", i, skipped)
        rows.append(LayerTraceRow(i, l2, deg, skipped))
    return rows


def trace_to_csv(rows: Sequence[LayerTraceRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for r in rows:
        w.writerow([r.layer, repr(r.l2_distance), repr(r.cos_degrees)])
    return buf.getvalue()


@dataclass
class EvalReport:
    mlm_accuracy: float | None = None
    sp_accuracy: float | None = None
    mlm_count: int = 0
    sp_count: int = 0
    nsp_accuracy: float | None = None
    sop_accuracy: float | None = None
    nsp_count: int = 0
    sop_count: int = 0
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        """Fields of the tasks that were scored; a count is dropped with its missing accuracy."""
        d = asdict(self)
        for task in ("mlm", "sp", "nsp", "sop"):
            if d[f"{task}_accuracy"] is None:
                del d[f"{task}_accuracy"], d[f"{task}_count"]
        return d


def _predict(params, cfg, instances: Sequence[TrainingInstance], batch_size: int, max_len: int):
    """Yield (batch, mlm argmax (B,S), sp argmax (B,) or None) over the stream."""
    with no_grad():
        for batch in iter_batches(list(instances), batch_size, max_len):
            out = M.forward(params, cfg, batch, training=False)
            mlm = out.mlm_logits.data.argmax(axis=-1)
            sp = out.sp_logits.data.argmax(axis=-1) if out.sp_logits is not None else None
            yield batch, mlm, sp


def intrinsic_eval(
    params: M.ParameterStore,
    cfg: M.ModelConfig | None,
    instances: Sequence[TrainingInstance],
    batch_size: int = 32,
    max_len: int | None = None,
) -> EvalReport:
    if not instances:
        raise ValueError("intrinsic_eval needs a non-empty instance stream")
    cfg = M.validate_config(cfg or params.config)
    max_len = max_len or cfg.max_positions
    mlm_hit = mlm_n = sp_hit = sp_n = 0
    for batch, mlm, sp in _predict(params, cfg, instances, batch_size, max_len):
        scored = batch.mlm_targets >= 0
        mlm_hit += int((mlm[scored] == batch.mlm_targets[scored]).sum())
        mlm_n += int(scored.sum())
        if sp is not None and batch.sp_labels is not None:
            sp_hit += int((sp == batch.sp_labels).sum())
            sp_n += len(sp)
    return EvalReport(
        mlm_accuracy=mlm_hit / mlm_n if mlm_n else None,
        sp_accuracy=sp_hit / sp_n if sp_n else None,
        mlm_count=mlm_n,
        sp_count=sp_n,
    )


def cross_objective_eval(
    params: M.ParameterStore,
    cfg: M.ModelConfig | None,
    nsp_set: Sequence[TrainingInstance],
    sop_set: Sequence[TrainingInstance],
    batch_size: int = 32,
    max_len: int | None = None,
) -> EvalReport:
    """Score one sentence-pair head on an NSP-style and an SOP-style set side by side."""
    cfg = M.validate_config(cfg or params.config)
    if not cfg.uses_sentence_pair:
        raise ValueError("model has no sentence-pair head (objective mlm_only)")
    report = EvalReport()
    for name, data in (("nsp", nsp_set), ("sop", sop_set)):
        if not data:
            raise ValueError(f"{name} evaluation set is empty")
        pos = sum(1 for i in data if i.sp_label == 0) / len(data)
        if not 0.4 <= pos <= 0.6:
            report.warnings.append(f"{name} set label balance {pos:.3f} positive is outside 40/60")
        r = intrinsic_eval(params, cfg, data, batch_size, max_len)
        setattr(report, f"{name}_accuracy", r.sp_accuracy)
        setattr(report, f"{name}_count", r.sp_count)
    return report


def measure_throughput(
    params: M.ParameterStore,
    cfg: M.ModelConfig | None,
    batch_size: int,
    seq_len: int,
    steps: int = 5,
    seed: int = 0,
) -> dict:
    """Examples per second over forward + backward + LAMB step; the first step is discarded."""
    if steps < 3:
        raise ValueError("measure_throughput needs at least 3 steps (the first is warmup)")
    cfg = M.validate_config(cfg or params.config)
    rng = np.random.default_rng(seed)
    ids = rng.integers(5, cfg.vocab_size, size=(batch_size, seq_len))
    ids[:, 0] = 2
    targets = np.where(rng.random((batch_size, seq_len)) < 0.15, ids, -100)
    labels = rng.integers(0, 2, size=batch_size) if cfg.uses_sentence_pair else None
    batch = Batch(ids, np.zeros_like(ids), np.ones_like(ids, dtype=bool), targets, [], labels)
    arrays = params.arrays()
    state = OptimizerState.create(arrays, LambConfig())
    timings = []
    for _ in range(steps):
        t0 = time.perf_counter()
        params.zero_grad()
        out = M.forward(params, cfg, batch, training=True, rng=rng)
        loss, _, _ = M.pretraining_loss(out, batch)
        loss.backward()
        lamb_step(arrays, params.grads(), state, 1e-4)
        timings.append(time.perf_counter() - t0)
    elapsed = sum(timings[1:])
    scalars = M.count_parameters(cfg).total
    itemsize = next(iter(arrays.values())).dtype.itemsize
    return {
        "examples_per_sec": batch_size * (steps - 1) / elapsed,
        "seconds_per_step": elapsed / (steps - 1),
        "parameters": scalars,
        "param_bytes": scalars * itemsize,
        "batch_size": batch_size,
        "seq_len": seq_len,
        "timed_steps": steps - 1,
    }


def parameter_memory_ratio(cfg_a: M.ModelConfig, cfg_b: M.ModelConfig, bytes_per_scalar: int = 4) -> float:
    """Parameter-memory ratio a / b (independent of scalar width)."""
    return (M.count_parameters(cfg_a).total * bytes_per_scalar) / (M.count_parameters(cfg_b).total * bytes_per_scalar)
