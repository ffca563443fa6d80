"""Run configuration and the toy pretraining loop behind ``albert-lab pretrain``."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import checkpoint as ckpt
from . import model as M
from .data import (
    Document,
    InstanceSampler,
    MaskingConfig,
    Vocabulary,
    apply_masking,
    build_vocabulary,
    corpus_lines,
    generate_instances,
    pack_batch,
    read_documents,
)
from .diagnostics import intrinsic_eval
from .optim import LambConfig, NonFiniteGradientError, OptimizerState, Schedule, lamb_step, lr_at_step
from .tensor import NonFiniteError

log = logging.getLogger(__name__)

LOSS_HEADER = ("step", "lr", "loss", "mlm_loss", "sp_loss")
_DTYPES = {"float64": np.float64, "float32": np.float32}


class RunConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, last_checkpoint: Path | None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass
class RunConfig:
    model: M.ModelConfig = field(default_factory=M.ModelConfig)
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    lr: float = 0.00176
    warmup_steps: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.01
    clip_lo: float = 0.0
    clip_hi: float = 10.0
    exclude_norm_and_bias: bool = False
    batch_size: int = 16
    max_steps: int = 2000
    max_len: int = 512
    short_prob: float = 0.1
    eval_every: int = 0
    eval_instances: int = 512
    checkpoint_every: int = 0
    corpus: str = ""
    eval_corpus: str | None = None
    output_dir: str = "runs/default"
    seed: int = 0
    precision: str = "float64"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["masking"]["replace_probs"] = list(self.masking.replace_probs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise RunConfigError(f"unknown run config fields: {sorted(unknown)}")
        model = M.ModelConfig.from_dict(d.pop("model", {}))
        masking = MaskingConfig(**d.pop("masking", {}))
        return cls(model=model, masking=masking, **d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise RunConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise RunConfigError(f"config {path} is not valid JSON: {exc.msg} (line {exc.lineno})") from None
        return cls.from_dict(raw)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def lamb(self) -> LambConfig:
        return LambConfig(self.beta1, self.beta2, self.eps, self.weight_decay, self.clip_lo, self.clip_hi,
                          self.exclude_norm_and_bias)

    def schedule(self) -> Schedule:
        return Schedule(self.lr, min(self.warmup_steps, self.max_steps), self.max_steps)

    def dtype(self):
        try:
            return _DTYPES[self.precision]
        except KeyError:
            raise RunConfigError(f"precision must be one of {sorted(_DTYPES)}, got {self.precision!r}") from None

    def validate(self) -> None:
        M.validate_config(self.model)
        self.dtype()
        if self.batch_size < 1 or self.max_steps < 1:
            raise RunConfigError("batch_size and max_steps must be positive")
        if self.max_len > self.model.max_positions:
            raise RunConfigError(f"max_len {self.max_len} exceeds model max_positions {self.model.max_positions}")
        if not self.corpus:
            raise RunConfigError("run config has no corpus path")
        if not Path(self.corpus).is_file():
            raise RunConfigError(f"corpus {self.corpus} does not exist")
        if self.eval_corpus and not Path(self.eval_corpus).is_file():
            raise RunConfigError(f"eval corpus {self.eval_corpus} does not exist")


# -- checkpoint helpers ---------------------------------------------------

def checkpoint_meta(cfg: M.ModelConfig, vocab: Vocabulary, step: int, run: RunConfig | None = None) -> dict:
    meta = {
        "format": "albert-lab",
        "model": M.validate_config(cfg).to_dict(),
        "vocab": vocab.to_json(),
        "step": step,
    }
    if run is not None:
        meta["run"] = run.to_dict()
        meta["config_digest"] = run.digest()
    return meta


def save_model(path, params: M.ParameterStore, vocab: Vocabulary, step: int = 0,
               run: RunConfig | None = None, state: OptimizerState | None = None) -> Path:
    tensors = dict(params.arrays())
    if state is not None:
        tensors.update(state.to_arrays())
    return ckpt.save_checkpoint(path, tensors, checkpoint_meta(params.config, vocab, step, run))


def load_model(path) -> tuple[M.ParameterStore, Vocabulary, dict, OptimizerState | None]:
    tensors, meta = ckpt.load_checkpoint(path)
    if "model" not in meta or "vocab" not in meta:
        raise ckpt.CheckpointError(f"{ckpt.sidecar_path(path)} lacks model config or vocabulary")
    cfg = M.ModelConfig.from_dict(meta["model"])
    model_arrays = {k: v for k, v in tensors.items() if not k.startswith("optim.")}
    params = M.ParameterStore.from_arrays(cfg, model_arrays)
    state = None
    if any(k.startswith("optim.") for k in tensors):
        run = meta.get("run")
        lamb = RunConfig.from_dict(run).lamb() if run else None
        state = OptimizerState.from_arrays(tensors, lamb)
    return params, Vocabulary.from_json(meta["vocab"]), meta, state


# -- data stream ----------------------------------------------------------

def load_corpus(run: RunConfig, vocab: Vocabulary | None = None) -> tuple[Vocabulary, list[Document]]:
    if vocab is None:
        vocab = build_vocabulary(corpus_lines(run.corpus), run.model.vocab_size)
    if len(vocab) > run.model.vocab_size:
        raise RunConfigError(f"vocabulary has {len(vocab)} entries but model vocab_size is {run.model.vocab_size}")
    docs = list(read_documents(run.corpus, vocab))
    if not docs:
        raise RunConfigError(f"corpus {run.corpus} is empty")
    return vocab, docs


def batch_stream(run: RunConfig, docs: list[Document], vocab_size: int, rng: np.random.Generator) -> Iterator:
    sampler = InstanceSampler(docs, run.model.objective, run.max_len, run.short_prob)
    while True:
        insts = [apply_masking(sampler.sample(rng), run.masking, vocab_size, rng) for _ in range(run.batch_size)]
        yield pack_batch(insts, run.max_len)


def _prefetch(source: Iterator, depth: int) -> Iterator:
    """Move batch generation to one worker thread; a single producer keeps the order fixed."""
    q: queue.Queue = queue.Queue(maxsize=depth)
    stop = threading.Event()

    def work():
        for item in source:
            while not stop.is_set():
                try:
                    q.put(item, timeout=0.1)
                    break
                except queue.Full:
                    continue
            if stop.is_set():
                return

    worker = threading.Thread(target=work, daemon=True)
    worker.start()
    try:
        while True:
            yield q.get()
    finally:
        stop.set()


def worker_threads() -> int:
    raw = os.environ.get("ALBERT_LAB_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise RunConfigError(f"ALBERT_LAB_THREADS must be an integer, got {raw!r}") from None


# -- loop -----------------------------------------------------------------

@dataclass
class TrainResult:
    output_dir: Path
    checkpoint: Path
    losses: list[dict]
    evals: list[dict]


def pretrain(run: RunConfig, warm_start: str | None = None) -> TrainResult:
    """Train from scratch (or from a warm-start checkpoint) and write logs and checkpoints."""
    run.validate()
    dtype = run.dtype()
    out_dir = Path(run.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(run.seed).spawn(3)
    data_rng, dropout_rng = np.random.default_rng(seeds[0]), np.random.default_rng(seeds[1])

    if warm_start:
        source, vocab, _, _ = load_model(warm_start)
        params = M.warm_start_expand(source, run.model)
        if params.data_dtype != dtype:
            params = M.ParameterStore.from_arrays(params.config, params.arrays(), dtype=dtype)
        vocab, docs = load_corpus(run, vocab)
    else:
        vocab, docs = load_corpus(run)
        params = M.build_model(run.model, seed=run.seed, dtype=dtype)
    cfg = params.config

    eval_set = None
    if run.eval_every and run.eval_corpus:
        eval_docs = list(read_documents(run.eval_corpus, vocab))
        eval_set = generate_instances(eval_docs, cfg.objective, run.eval_instances, run.max_len, run.masking,
                                      len(vocab), seed=int(seeds[2].generate_state(1)[0]), short_prob=0.0)

    arrays = params.arrays()
    state = OptimizerState.create(arrays, run.lamb())
    schedule = run.schedule()
    batches = batch_stream(run, docs, len(vocab), data_rng)
    if worker_threads() > 1:
        batches = _prefetch(batches, depth=8)

    losses, evals = [], []
    last_good: Path | None = None
    final = out_dir / "checkpoint.albt"
    loss_file = open(out_dir / "loss.csv", "w", newline="", encoding="utf-8")
    writer = csv.writer(loss_file, lineterminator="\n")
    writer.writerow(LOSS_HEADER)
    try:
        for step in range(run.max_steps):
            batch = next(batches)
            lr = lr_at_step(schedule, step + 1)
            try:
                params.zero_grad()
                out = M.forward(params, cfg, batch, training=True, rng=dropout_rng)
                total, mlm, sp = M.pretraining_loss(out, batch)
                total.backward()
                lamb_step(arrays, params.grads(), state, lr)
            except (NonFiniteError, NonFiniteGradientError) as exc:
                raise TrainingAborted(f"non-finite value at step {step}: {exc}", last_good) from None
            row = {"step": step, "lr": lr, "loss": total.item(), "mlm_loss": mlm.item(),
                   "sp_loss": sp.item() if sp is not None else ""}
            losses.append(row)
            writer.writerow([row[k] for k in LOSS_HEADER])
            done = step + 1
            if eval_set is not None and done % run.eval_every == 0:
                rep = intrinsic_eval(params, cfg, eval_set, batch_size=64, max_len=run.max_len)
                evals.append({"step": done, **rep.to_dict()})
                log.info("step %d eval %s", done, rep.to_dict())
            if run.checkpoint_every and done % run.checkpoint_every == 0 and done < run.max_steps:
                last_good = save_model(out_dir / f"checkpoint_step{done}.albt", params, vocab, done, run, state)
    finally:
        loss_file.close()
        if hasattr(batches, "close"):
            batches.close()

    save_model(final, params, vocab, run.max_steps, run, state)
    if evals:
        (out_dir / "eval.json").write_text(json.dumps(evals, indent=2) + "\n", encoding="utf-8")
    return TrainResult(out_dir, final, losses, evals)


def final_loss(losses: list[dict], key: str = "mlm_loss", window: int = 100) -> float:
    """Mean of the last ``window`` logged values (single batches are noisy)."""
    vals = [r[key] for r in losses[-window:] if r[key] != ""]
    return float(np.mean(vals)) if vals else math.nan
