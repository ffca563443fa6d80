"""Acceptance suite: one test per criterion, each printing a PASS/FAIL verdict line.

The verdict lines are collected into the "acceptance criteria" section of the
pytest terminal summary.  Every criterion also has a wall-clock budget, which
is part of its verdict.
"""

import dataclasses
import json
import math
import time
from collections import Counter

import numpy as np
import pytest

from albert_lab import cli
from albert_lab import data as D
from albert_lab import model as M
from albert_lab.diagnostics import cross_objective_eval, intrinsic_eval
from albert_lab.optim import LambConfig, OptimizerState, lamb_step
from albert_lab.presets import get_preset
from albert_lab.synthetic import template_corpus, topic_order_corpus
from albert_lab.training import RunConfig, final_loss, load_model, pretrain, save_model

from conftest import ACCEPTANCE_LINES
from gradcheck import numerical_grad, rel_error


class Verdict:
    def __init__(self, number: int, title: str, budget_s: float):
        self.number, self.title, self.budget = number, title, budget_s
        self.start = time.perf_counter()

    def finish(self, ok: bool, detail: str) -> None:
        elapsed = time.perf_counter() - self.start
        in_time = elapsed < self.budget
        passed = ok and in_time
        timing = f"{elapsed:.1f}s of {self.budget:g}s" + ("" if in_time else " (over budget)")
        line = f"{'PASS' if passed else 'FAIL'} C{self.number} {self.title}: {detail} [{timing}]"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert passed, line


def params_json(capsys, *argv) -> dict:
    assert cli.main(["params", *argv, "--json"]) == 0
    return json.loads(capsys.readouterr().out)


# -- C1 -------------------------------------------------------------------

# Published totals in millions, transcribed from the configuration tables
# (the head-count excerpt, the main model table, the embedding-size sweep and
# the sharing-strategy sweep).
PUBLISHED_M = [
    ("excerpt", "bert-base", 110), ("excerpt", "bert-large", 340), ("excerpt", "bert-xlarge", 1370),
    ("excerpt", "albert-base", 12), ("excerpt", "albert-large", 18), ("excerpt", "albert-xlarge", 59),
    ("excerpt", "albert-xxlarge", 233),
    ("main", "bert-base", 108), ("main", "bert-large", 334), ("main", "albert-base", 12),
    ("main", "albert-large", 18), ("main", "albert-xlarge", 60), ("main", "albert-xxlarge", 235),
    ("embedding", "albert-base-e64-notshared", 87), ("embedding", "albert-base-e128-notshared", 89),
    ("embedding", "albert-base-e256-notshared", 93), ("embedding", "albert-base-e768-notshared", 108),
    ("embedding", "albert-base-e64-shared", 10), ("embedding", "albert-base-e128-shared", 12),
    ("embedding", "albert-base-e256-shared", 16), ("embedding", "albert-base-e768-shared", 31),
    ("sharing", "albert-base-e768-shared", 31), ("sharing", "albert-base-e768-shared-attention", 83),
    ("sharing", "albert-base-e768-shared-ffn", 57), ("sharing", "albert-base-e768-notshared", 108),
    ("sharing", "albert-base-e128-shared", 12), ("sharing", "albert-base-e128-shared-attention", 64),
    ("sharing", "albert-base-e128-shared-ffn", 38), ("sharing", "albert-base-e128-notshared", 89),
]

# Architectures as published: (L, H, E, A, V).
ARCHITECTURES = {
    "bert-base": (12, 768, 768, 12, 30000), "bert-large": (24, 1024, 1024, 16, 30000),
    "bert-xlarge": (24, 2048, 2048, 32, 30000), "albert-base": (12, 768, 128, 12, 30000),
    "albert-large": (24, 1024, 128, 16, 30000), "albert-xlarge": (24, 2048, 128, 32, 30000),
    "albert-xxlarge": (12, 4096, 128, 64, 30000),
}


def test_c1_parameter_counts(capsys):
    v = Verdict(1, "parameter-count reproduction", 1.0)
    for name, arch in ARCHITECTURES.items():
        c = M.validate_config(get_preset(name))
        assert (c.num_layers, c.hidden_size, c.embedding_size, c.num_heads, c.vocab_size) == arch, name
    worst, misses = 0.0, []
    for table, preset, millions in PUBLISHED_M:
        dev = params_json(capsys, "--preset", preset)["total"] / (millions * 1e6) - 1.0
        worst = max(worst, abs(dev))
        if abs(dev) > 0.08:
            misses.append(f"{table}/{preset} {dev:+.1%}")
    v.finish(not misses, f"{len(PUBLISHED_M)} published counts, worst |dev| {worst:.1%} (limit 8%)"
             + (f"; misses: {', '.join(misses)}" if misses else ""))


# -- C2 -------------------------------------------------------------------

def test_c2_eighteen_fold_reduction(capsys):
    v = Verdict(2, "BERT-large / ALBERT-large parameter ratio", 1.0)
    ratio = params_json(capsys, "--compare", "bert-large", "albert-large")["ratio_a_over_b"]
    v.finish(17 <= ratio <= 19, f"ratio {ratio:.2f} (want [17, 19])")


# -- C3 -------------------------------------------------------------------

def test_c3_gradient_check():
    v = Verdict(3, "finite-difference gradient check", 120.0)
    cfg = M.ModelConfig(num_layers=2, hidden_size=16, embedding_size=8, num_heads=2, vocab_size=37,
                        max_positions=16, dropout_p=0.1, objective="mlm_sop")
    store = M.build_model(cfg, seed=1)
    # move off the 0.02-std init so no gradient is vanishingly small next to finite-difference noise
    noise = np.random.default_rng(3)
    for _, t in store.items():
        t.data += noise.normal(0.0, 0.3, t.shape)
    rng = np.random.default_rng(0)
    b, s = 2, 12
    ids = rng.integers(D.NUM_SPECIAL, 37, (b, s))
    ids[:, 0] = D.CLS
    ids[1, 9:] = D.PAD
    pad = ids != D.PAD
    targets = np.where(rng.random((b, s)) < 0.3, rng.integers(D.NUM_SPECIAL, 37, (b, s)), -100)
    targets[~pad] = -100
    segs = np.repeat((np.arange(s) > 5).astype(np.int64)[None], b, axis=0)
    batch = D.Batch(ids, segs, pad, targets, [], np.array([0, 1]))

    def loss():
        out = M.forward(store, cfg, batch, training=True, rng=np.random.default_rng(5))
        return M.pretraining_loss(out, batch)[0]

    store.zero_grad()
    loss().backward()
    analytic = {k: t.grad.copy() for k, t in store.items()}
    errors = {k: rel_error(numerical_grad(lambda: loss().item(), t.data, h=1e-5), analytic[k])
              for k, t in store.items()}
    worst = max(errors, key=errors.get)
    v.finish(errors[worst] < 1e-4,
             f"{len(errors)} tensors, max relative error {errors[worst]:.2e} in {worst} (limit 1e-4)")


# -- C4 -------------------------------------------------------------------

def test_c4_sharing_equivalence():
    v = Verdict(4, "shared vs unrolled equivalence", 60.0)
    shared_cfg = M.ModelConfig(num_layers=4, hidden_size=16, embedding_size=8, num_heads=2, vocab_size=37,
                               max_positions=16, dropout_p=0.1, sharing_strategy="all")
    shared = M.build_model(shared_cfg, seed=7)
    unrolled = M.warm_start_expand(shared, dataclasses.replace(shared_cfg, sharing_strategy="none"))
    rng = np.random.default_rng(2)
    ids = rng.integers(D.NUM_SPECIAL, 37, (3, 10))
    ids[:, 0] = D.CLS
    ids[2, 7:] = D.PAD
    targets = np.where(rng.random((3, 10)) < 0.3, ids, -100)
    targets[ids == D.PAD] = -100
    batch = D.Batch(ids, np.zeros_like(ids), ids != D.PAD, targets, [], np.array([0, 1, 1]))

    outs = []
    for store in (shared, unrolled):
        store.zero_grad()
        out = M.forward(store, None, batch, training=True, rng=np.random.default_rng(11))
        M.pretraining_loss(out, batch)[0].backward()
        outs.append(out)
    fwd = max(np.abs(a.data - b.data).max() for a, b in
              ((outs[0].mlm_logits, outs[1].mlm_logits), (outs[0].sp_logits, outs[1].sp_logits),
               (outs[0].final_hidden, outs[1].final_hidden)))
    grad = 0.0
    for path, t in shared.items():
        if path.startswith("group0."):
            leaf = path[len("group0."):]
            summed = sum(unrolled[f"group{i}.{leaf}"].grad for i in range(4))
        else:
            summed = unrolled[path].grad
        grad = max(grad, float(np.abs(t.grad - summed).max()))
    v.finish(fwd <= 1e-12 and grad <= 1e-8,
             f"forward max diff {fwd:.1e} (limit 1e-12), gradient max diff {grad:.1e} (limit 1e-8)")


# -- C5 -------------------------------------------------------------------

def random_documents(n_docs, rng, vocab=200, max_seg=40):
    return [D.Document([rng.integers(D.NUM_SPECIAL, vocab, size=int(rng.integers(1, max_seg))).tolist()
                        for _ in range(int(rng.integers(2, 7)))], i) for i in range(n_docs)]


def test_c5_masking_distribution():
    v = Verdict(5, "n-gram masking distribution", 30.0)
    mc = D.MaskingConfig(max_ngram=3)
    rng = np.random.default_rng(0)
    counts = Counter(D.sample_span_length(mc, rng) for _ in range(20000))
    target = {1: 6 / 11, 2: 3 / 11, 3: 2 / 11}
    dev = max(abs(counts[n] / 20000 - p) for n, p in target.items())

    docs = random_documents(300, rng)
    insts = D.generate_instances(docs, "mlm_sop", 10000, 64, mc, 200, seed=1, short_prob=0.1)
    bad = 0
    for inst in insts:
        usable = sum(t >= D.NUM_SPECIAL for t in D._unmasked_tokens(inst))
        frac = len(inst.masked_positions) / usable
        bad += not (mc.mask_budget_fraction <= frac <= mc.mask_budget_fraction + mc.max_ngram / usable)
    v.finish(dev < 0.02 and bad == 0,
             f"max |p_hat - p| {dev:.4f} (limit 0.02); masked-fraction bound violated in {bad} of 10000")


# -- C6 -------------------------------------------------------------------

def truncate_longer_first(a, b, budget):
    a, b = list(a), list(b)
    while len(a) + len(b) > budget:
        (a if len(a) >= len(b) else b).pop()
    return a, b


def check_pair(inst, docs):
    """Independent re-derivation of the pair contract; returns a problem string or None."""
    ids = D._unmasked_tokens(inst)
    if ids[0] != D.CLS or ids.count(D.SEP) != 2 or ids[-1] != D.SEP:
        return "layout"
    cut = ids.index(D.SEP)
    a, b = ids[1:cut], ids[cut + 1:-1]
    if inst.segment_ids != [0] * (cut + 1) + [1] * (len(ids) - cut - 1):
        return "segment ids"
    (da, sa), (db, sb) = inst.source
    if inst.sp_label == 0:
        if da != db or sb != sa + 1:
            return "positive not consecutive"
        if docs[da].segments[sa][:len(a)] != a or docs[db].segments[sb][:len(b)] != b:
            return "positive content"
    elif inst.objective == "mlm_sop":
        if da != db or sa != sb + 1:
            return "negative not a swap"
        first, second = truncate_longer_first(docs[db].segments[sb], docs[da].segments[sa], len(a) + len(b))
        if Counter(a + b) != Counter(first + second) or (a, b) != (second, first):
            return "swap multiset"
    elif da == db:
        return "NSP negative from same document"
    return None


def test_c6_pair_construction():
    v = Verdict(6, "sentence-pair construction invariants", 30.0)
    docs = random_documents(200, np.random.default_rng(4))
    problems, balance = Counter(), {}
    for objective, seed in (("mlm_sop", 2), ("mlm_nsp", 3)):
        insts = D.generate_instances(docs, objective, 10000, 48, D.MaskingConfig(), 200, seed=seed)
        balance[objective] = sum(i.sp_label == 0 for i in insts) / len(insts)
        for inst in insts:
            p = check_pair(inst, docs)
            if p:
                problems[p] += 1
            problems.update(D.validate_instance(inst, 48, docs))
        for start in range(0, len(insts), 64):
            chunk = insts[start:start + 64]
            batch = D.pack_batch(chunk, 48)
            for r, inst in enumerate(chunk):
                n = len(inst)
                row_ok = (batch.padding_mask[r].sum() == n and batch.padding_mask[r, :n].all()
                          and (batch.token_ids[r, n:] == D.PAD).all()
                          and batch.token_ids[r, :n].tolist() == inst.token_ids
                          and batch.mlm_targets[r, inst.masked_positions].tolist() == inst.masked_targets
                          and (batch.mlm_targets[r] >= 0).sum() == len(inst.masked_positions)
                          and batch.sp_labels[r] == inst.sp_label)
                if not row_ok:
                    problems["packing"] += 1
    balanced = all(abs(f - 0.5) <= 0.02 for f in balance.values())
    detail = (f"20000 instances, {sum(problems.values())} violations; positive fraction "
              f"SOP {balance['mlm_sop']:.3f}, NSP {balance['mlm_nsp']:.3f} (want 0.5 +/- 0.02)")
    if problems:
        detail += f"; {dict(problems.most_common(3))}"
    v.finish(not problems and balanced, detail)


# -- C7 -------------------------------------------------------------------

@pytest.mark.slow
def test_c7_toy_pretraining(tmp_path):
    v = Verdict(7, "toy pretraining sanity", 300.0)
    (tmp_path / "train.txt").write_text(template_corpus(n_docs=300, seed=0))
    (tmp_path / "heldout.txt").write_text(template_corpus(n_docs=50, seed=1))
    run = RunConfig.from_dict({
        "model": {"num_layers": 2, "hidden_size": 32, "num_heads": 2, "embedding_size": 16, "vocab_size": 64,
                  "max_positions": 32, "sharing_strategy": "all", "dropout_p": 0.0, "objective": "mlm_sop"},
        "lr": 0.01, "warmup_steps": 100, "batch_size": 16, "max_steps": 2000, "max_len": 32, "seed": 0,
        "corpus": str(tmp_path / "train.txt"), "output_dir": str(tmp_path / "run"),
    })
    res = pretrain(run)
    initial = res.losses[0]["mlm_loss"]
    final = final_loss(res.losses, "mlm_loss", window=100)
    params, vocab, _, _ = load_model(res.checkpoint)
    docs = list(D.read_documents(tmp_path / "heldout.txt", vocab))
    held = D.generate_instances(docs, "mlm_sop", 1000, 32, D.MaskingConfig(), len(vocab), seed=9, short_prob=0.0)
    acc = intrinsic_eval(params, None, held).mlm_accuracy
    chance = 1.0 / len(vocab)
    v.finish(final < 0.6 * initial and acc > 5 * chance,
             f"V={len(vocab)}, step-0 MLM loss {initial:.3f} (ln V {math.log(len(vocab)):.3f}), final "
             f"(mean of last 100 steps) {final:.3f} = {final / initial:.2f}x (limit 0.6x); held-out MLM accuracy "
             f"{acc:.3f} = {acc / chance:.1f}x chance (limit 5x)")


# -- C8 -------------------------------------------------------------------

@pytest.mark.slow
def test_c8_sop_vs_nsp_cross_evaluation(tmp_path):
    v = Verdict(8, "SOP/NSP cross-evaluation pattern (qualitative)", 900.0)
    (tmp_path / "train.txt").write_text(topic_order_corpus(seed=0))
    (tmp_path / "eval.txt").write_text(topic_order_corpus(seed=1))
    scores = {}
    for objective in ("mlm_nsp", "mlm_sop"):
        run = RunConfig.from_dict({
            "model": {"num_layers": 2, "hidden_size": 32, "num_heads": 4, "embedding_size": 16, "vocab_size": 200,
                      "max_positions": 16, "dropout_p": 0.0, "objective": objective},
            "lr": 0.01, "warmup_steps": 100, "batch_size": 16, "max_steps": 6000, "max_len": 16,
            "short_prob": 0.0, "seed": 0,
            "corpus": str(tmp_path / "train.txt"), "output_dir": str(tmp_path / objective),
        })
        params, vocab, _, _ = load_model(pretrain(run).checkpoint)
        docs = list(D.read_documents(tmp_path / "eval.txt", vocab))
        nsp = D.generate_instances(docs, "mlm_nsp", 1000, 16, D.MaskingConfig(), len(vocab), seed=5, short_prob=0.0)
        sop = D.generate_instances(docs, "mlm_sop", 1000, 16, D.MaskingConfig(), len(vocab), seed=6, short_prob=0.0)
        rep = cross_objective_eval(params, None, nsp, sop)
        scores[objective] = (rep.nsp_accuracy, rep.sop_accuracy)
    (n_nsp, n_sop), (s_nsp, s_sop) = scores["mlm_nsp"], scores["mlm_sop"]
    ok = n_nsp >= 0.90 and n_sop <= 0.60 and s_sop >= 0.75 and s_nsp >= 0.60
    v.finish(ok, f"NSP-trained: NSP {n_nsp:.3f} (>= 0.90), SOP {n_sop:.3f} (<= 0.60); "
                 f"SOP-trained: SOP {s_sop:.3f} (>= 0.75), NSP {s_nsp:.3f} (>= 0.60)")


# -- C9 -------------------------------------------------------------------

def test_c9_probe_well_formed(tmp_path, capsys):
    v = Verdict(9, "probe well-formedness", 30.0)
    (tmp_path / "corpus.txt").write_text(template_corpus(n_docs=20, seed=2))
    vocab = D.build_vocabulary(D.corpus_lines(tmp_path / "corpus.txt"), 64)
    run = RunConfig(max_len=32, corpus=str(tmp_path / "corpus.txt"))
    failures, checked = [], 0
    for layers, strategy, group in ((24, "all", 1), (4, "grouped", 2), (3, "none", 1), (2, "ffn_only", 1)):
        cfg = M.ModelConfig(num_layers=layers, hidden_size=16, num_heads=2, embedding_size=8, vocab_size=64,
                            max_positions=32, sharing_strategy=strategy, group_size=group)
        run.model = cfg
        path = save_model(tmp_path / f"{strategy}{layers}.albt", M.build_model(cfg, seed=layers), vocab, 0, run)
        outputs = []
        for _ in range(2):
            code = cli.main(["probe", "--checkpoint", str(path), "--corpus", str(tmp_path / "corpus.txt")])
            outputs.append((code, capsys.readouterr().out))
        rows = [line.split(",") for line in outputs[0][1].splitlines()]
        body = [(float(r[1]), float(r[2])) for r in rows[1:]]
        ok = (outputs[0][0] == 0 and outputs[0] == outputs[1] and rows[0] == ["layer", "l2_distance", "cos_degrees"]
              and len(body) == layers
              and all(math.isfinite(l2) and l2 >= 0 and 0 <= deg <= 180 for l2, deg in body))
        checked += 1
        if not ok:
            failures.append(f"{strategy} L={layers}")
    v.finish(not failures, f"{checked} checkpoints (L=24/4/3/2), rows == L, finite, identical on rerun"
             + (f"; failed: {failures}" if failures else ""))


# -- C10 ------------------------------------------------------------------

def test_c10_determinism(tmp_path):
    v = Verdict(10, "bitwise determinism", 60.0)
    (tmp_path / "corpus.txt").write_text(template_corpus(n_docs=40, seed=3))
    blobs = []
    for name in ("a", "b"):
        run = RunConfig.from_dict({
            "model": {"num_layers": 2, "hidden_size": 16, "num_heads": 2, "embedding_size": 8, "vocab_size": 64,
                      "max_positions": 32, "dropout_p": 0.1},
            "lr": 0.01, "warmup_steps": 3, "batch_size": 4, "max_steps": 10, "max_len": 32, "seed": 42,
            "corpus": str(tmp_path / "corpus.txt"), "output_dir": str(tmp_path / name),
        })
        res = pretrain(run)
        blobs.append((res.checkpoint.read_bytes(), (res.output_dir / "loss.csv").read_bytes()))
    same = blobs[0] == blobs[1]
    v.finish(same, f"10-step checkpoints {'identical' if same else 'differ'} ({len(blobs[0][0])} bytes)")


# -- C11 ------------------------------------------------------------------

def test_c11_lamb_unit_behaviour():
    v = Verdict(11, "LAMB unit behaviour", 10.0)
    # fixpoint: zero gradient and zero decay leave the weights alone
    w0 = np.random.default_rng(0).normal(size=(4, 3))
    params = {"w": w0.copy()}
    state = OptimizerState.create(params, LambConfig(weight_decay=0.0))
    lamb_step(params, {"w": np.zeros((4, 3))}, state, 0.1)
    fixpoint = np.array_equal(params["w"], w0) and state.step == 1

    # hand trace, w = 1, g = 1, lr 0.1, step 1:
    #   m = 0.1, v = 0.001, m_hat = 1, v_hat = 1, u = 1 / (1 + 1e-6)
    #   r = |w| / |u| = 1 + 1e-6, w' = 1 - 0.1 * r * u = 0.9
    m = (1 - 0.9) * 1.0
    vv = (1 - 0.999) * 1.0
    u = (m / (1 - 0.9)) / (math.sqrt(vv / (1 - 0.999)) + 1e-6)
    oracle = 1.0 - 0.1 * (1.0 / abs(u)) * u
    params = {"w": np.array([1.0])}
    lamb_step(params, {"w": np.array([1.0])}, OptimizerState.create(params, LambConfig(weight_decay=0.0)), 0.1)
    trace_err = abs(params["w"][0] - oracle)

    # scale-direction: scaling weights and every gradient by c leaves the step direction unchanged
    # (m_hat / sqrt(v_hat) is scale free only without eps and decay, which add c-dependent terms)
    rng = np.random.default_rng(1)
    base, grads = rng.normal(size=(6, 5)), [rng.normal(size=(6, 5)) for _ in range(3)]
    directions = []
    for c in (1.0, 0.01, 250.0):
        params = {"w": c * base}
        state = OptimizerState.create(params, LambConfig(weight_decay=0.0, eps=0.0))
        for g in grads:
            before = params["w"].copy()
            lamb_step(params, {"w": c * g}, state, 0.01)
        step = params["w"] - before
        directions.append(step / np.linalg.norm(step))
    direction_err = max(float(np.abs(d - directions[0]).max()) for d in directions[1:])
    v.finish(fixpoint and trace_err <= 1e-12 and direction_err <= 1e-12,
             f"fixpoint {'holds' if fixpoint else 'broken'}; scalar trace error {trace_err:.1e} (limit 1e-12); "
             f"direction error under scaling {direction_err:.1e}")
