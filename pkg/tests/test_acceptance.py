"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
"""
import json
import time

import numpy as np
import pytest

from conftest import tiny_config
from dualgate.analysis import RoutingLog, TrendRegime, chi_square_independence, classify_regime, mk_test, routing_crosstab
from dualgate.cli import main
from dualgate.data import SyntheticSpec, chrono_split, make_synthetic, make_windows, stack_windows
from dualgate.mmoe import (ExpertFFN, GateParams, MmoeParams, gate, mmoe_forward, smoe_forward, tmoe_forward,
                           vanilla_moe_forward)
from dualgate.model import ModelConfig, as_tensors, forward_rows, init_params
from dualgate.numerics import Tape, Tensor, backward, grad_check, mean, square
from dualgate.textenc import EmbeddingFormatError, EmbeddingStore, TextSource, read_embeddings, write_embeddings
from dualgate.train import (CheckpointFormatError, OptimizerState, TrainConfig, adam_step, clip_by_global_norm,
                            evaluate, load_checkpoint, loss_and_grads, save_checkpoint, train_loop)


# ---------------------------------------------------------------- 1. gradients

def test_gradient_suite(acceptance_report):
    start = time.perf_counter()
    cfg = tiny_config()
    worst, n_checked = 0.0, 0
    for seed in range(3):
        rng = np.random.default_rng(seed)
        params = init_params(tiny_config(seed=seed))
        x_rows = rng.normal(size=(3, cfg.lookback))
        y_rows = rng.normal(size=(3, cfg.horizon))
        hbar = rng.normal(size=(3, cfg.text_dim))
        _, decisions, _ = forward_rows(x_rows, hbar, as_tensors(params), cfg)
        fixed = [{b: d.selected for b, d in dec.items()} for dec in decisions]

        def loss_value():
            pred, _, _ = forward_rows(x_rows, hbar, as_tensors(params), cfg, fixed)
            return float(np.mean((pred.data - y_rows) ** 2))

        T = as_tensors(params, requires_grad=True)
        with Tape() as tape:
            pred, _, _ = forward_rows(x_rows, hbar, T, cfg, fixed)
            loss = mean(square(pred - y_rows))
        g = backward(tape, loss)
        analytic = {k: g.get(T[k], np.zeros_like(v)) for k, v in params.items()}
        results = grad_check(loss_value, params, analytic, n_coords=120, rng=seed)
        n_checked += len(results)
        worst = max(worst, max(r[4] for r in results))
    elapsed = time.perf_counter() - start
    passed = worst <= 1e-4 and n_checked >= 300 and elapsed < 60
    acceptance_report("1 gradient suite", passed,
                      f"{n_checked} coords over 3 seeds, max rel err {worst:.2e} (tol 1e-4), {elapsed:.1f}s (< 60s)")
    assert passed


# ---------------------------------------------------------------- 2. MoE identities

def _experts(rng, m, d):
    f = 2 * d
    return [ExpertFFN(Tensor(rng.normal(size=(d, f))), Tensor(rng.normal(size=f)),
                      Tensor(rng.normal(size=(f, d))), Tensor(rng.normal(size=d))) for _ in range(m)]


def _ffn(e, h):
    z = h @ e.W1.data + e.b1.data
    return 0.5 * z * (1 + np.tanh(np.sqrt(2 / np.pi) * (z + 0.044715 * z ** 3))) @ e.W2.data + e.b2.data


def _softmax(v):
    e = np.exp(v - v.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def test_moe_identities(acceptance_report):
    rng = np.random.default_rng(2024)
    worst = {"a": 0.0, "b": 0.0, "c": 0.0}
    for _ in range(1000):
        R, N, D, Dt = (int(v) for v in rng.integers(1, 4, size=4))
        m_t, m_s = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        tokens, hbar = rng.normal(size=(R, N, D)), rng.normal(size=(R, Dt))
        te, se = _experts(rng, m_t, D), _experts(rng, m_s, D)
        Wt, Ws = GateParams(Tensor(rng.normal(size=(m_t, Dt)))), GateParams(Tensor(rng.normal(size=(m_s, N * D))))
        k_t, k_s = int(rng.integers(1, m_t + 1)), int(rng.integers(1, m_s + 1))
        out, _ = mmoe_forward(Tensor(tokens), hbar, MmoeParams(te, se, Wt, Ws, k_t, k_s))
        t, _ = tmoe_forward(Tensor(tokens), hbar, te, Wt, k_t)
        s, _ = smoe_forward(Tensor(tokens), se, Ws, k_s)
        worst["a"] = max(worst["a"], np.max(np.abs(out.data - (t.data + s.data))))

        dense_t, _ = tmoe_forward(Tensor(tokens), hbar, te, Wt, m_t)
        dense_s, _ = smoe_forward(Tensor(tokens), se, Ws, m_s)
        Wv = GateParams(Tensor(rng.normal(size=(m_t, D))))
        dense_v, _ = vanilla_moe_forward(Tensor(tokens), te, Wv, m_t)
        oracle_t, oracle_s, oracle_v = (np.zeros_like(tokens) for _ in range(3))
        pt, ps = _softmax(hbar @ Wt.W.data.T), _softmax(tokens.reshape(R, -1) @ Ws.W.data.T)
        pv = _softmax(tokens @ Wv.W.data.T)
        for r in range(R):
            for i, e in enumerate(te):
                oracle_t[r] += pt[r, i] * _ffn(e, tokens[r])
                oracle_v[r] += pv[r, :, i:i + 1] * _ffn(e, tokens[r])
            for i, e in enumerate(se):
                oracle_s[r] += ps[r, i] * _ffn(e, tokens[r])
        worst["b"] = max(worst["b"], np.max(np.abs(dense_t.data - oracle_t)), np.max(np.abs(dense_s.data - oracle_s)),
                         np.max(np.abs(dense_v.data - oracle_v)))

        one_t, one_s = te[:1], se[:1]
        gt, gs = GateParams(Tensor(Wt.W.data[:1])), GateParams(Tensor(Ws.W.data[:1]))
        single, _ = mmoe_forward(Tensor(tokens), hbar, MmoeParams(one_t, one_s, gt, gs, 1, 1))
        v1, _ = vanilla_moe_forward(Tensor(tokens), one_t, GateParams(Tensor(Wv.W.data[:1])), 1)
        worst["c"] = max(worst["c"], np.max(np.abs(single.data - (_ffn(one_t[0], tokens) + _ffn(one_s[0], tokens)))),
                         np.max(np.abs(v1.data - _ffn(one_t[0], tokens))))
    passed = all(v <= 1e-12 for v in worst.values())
    acceptance_report("2 MoE identities", passed,
                      "1000 trials, max abs diff (a) {a:.1e} (b) {b:.1e} (c) {c:.1e} (tol 1e-12)".format(**worst))
    assert passed


# ---------------------------------------------------------------- 3. gate invariants

def test_gate_invariants(acceptance_report):
    rng = np.random.default_rng(7)
    failures = []
    worst_sum = 0.0
    for _ in range(1000):
        m, d = int(rng.integers(1, 9)), int(rng.integers(1, 6))
        k = int(rng.integers(1, m + 1))
        W, x = rng.normal(size=(m, d)) * 3, rng.normal(size=d)
        dec = gate(x, GateParams(Tensor(W)), k)
        worst_sum = max(worst_sum, abs(dec.scores.sum() - 1.0))
        c = float(rng.normal() * 20)
        shifted = gate(np.append(x, 1.0), GateParams(Tensor(np.hstack([W, np.full((m, 1), c)]))), k)
        if not (np.allclose(shifted.scores, dec.scores, rtol=0, atol=1e-12) and
                np.array_equal(shifted.selected, dec.selected)):
            failures.append("shift")
    tie = gate(np.ones(3), GateParams(Tensor(np.zeros((4, 3)))), 2)
    if list(tie.selected) != [0, 1] or not np.allclose(tie.scores, 0.25):
        failures.append("tie-break")
    # the text gate decides once per sample; every token gets that sample's experts
    tokens, hbar = rng.normal(size=(4, 6, 3)), rng.normal(size=(4, 5))
    experts = _experts(rng, 3, 3)
    out, dec = tmoe_forward(Tensor(tokens), hbar, experts, GateParams(Tensor(rng.normal(size=(3, 5)))), 1)
    for r in range(4):
        e, w = experts[dec.selected[r, 0]], dec.weights[r, 0]
        if not np.allclose(out.data[r], w * _ffn(e, tokens[r]), rtol=1e-12, atol=1e-12):
            failures.append("shared gate")
    passed = worst_sum <= 1e-12 and not failures
    acceptance_report("3 gate invariants", passed,
                      f"simplex max |sum-1| {worst_sum:.1e}, shift/tie/shared-gate failures: {failures or 'none'}")
    assert passed


# ---------------------------------------------------------------- 4. Mann-Kendall

def test_mann_kendall_oracle(acceptance_report):
    rng = np.random.default_rng(11)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(2, 51))
        x = rng.integers(0, 5, size=n).astype(float) if rng.random() < 0.3 else rng.normal(size=n)
        brute = sum(int(np.sign(x[j] - x[i])) for i in range(n) for j in range(i + 1, n))
        mismatches += mk_test(x).s_stat != brute
    z123 = mk_test([1.0, 2.0, 3.0]).z
    z555 = mk_test([5.0, 5.0, 5.0]).z
    bounds = (classify_regime(-1.0), classify_regime(0.0), classify_regime(1.0))
    bounds_ok = bounds == (TrendRegime.WEAK_DOWN, TrendRegime.WEAK_UP, TrendRegime.STRONG_UP)
    passed = mismatches == 0 and abs(z123 - 1.0445) <= 1e-3 and z555 == 0.0 and bounds_ok
    acceptance_report("4 Mann-Kendall oracle", passed,
                      f"S mismatches {mismatches}/1000, Z[1,2,3]={z123:.5f}, Z[5,5,5]={z555}, "
                      f"boundaries {[b.label for b in bounds]}")
    assert passed


# ---------------------------------------------------------------- 5. overfit

def test_single_batch_overfit(acceptance_report):
    cfg = tiny_config()
    data = make_synthetic(SyntheticSpec(n_steps=200, text_dim=cfg.text_dim))
    ws = stack_windows(make_windows(data.series, cfg.lookback, cfg.horizon, stride=4))
    idx = np.searchsorted(data.series.timestamps, ws.end_ts)
    x, y, h = ws.x_in[:16], ws.x_out[:16], data.embeddings[idx][:16]
    params = init_params(cfg)
    tc = TrainConfig(lr=1e-3)
    state = OptimizerState.zeros_like(params)
    loss = np.inf
    for step in range(1, 2001):
        loss, grads = loss_and_grads(params, x, y, h, cfg)
        if loss < 1e-3:
            break
        clip_by_global_norm(grads, tc.clip_norm)
        adam_step(params, grads, state, tc)
    passed = loss < 1e-3
    acceptance_report("5 single-batch overfit", passed, f"loss {loss:.2e} after {state.t} Adam steps (lr 1e-3)")
    assert passed


# ---------------------------------------------------------------- 6 and 7. synthetic benchmark

BENCH_MODEL = dict(lookback=32, horizon=8, patch_len=8)


def _benchmark():
    data = make_synthetic(SyntheticSpec(seed=0, alpha=2.0, text_noise_sigma=0.1, noise_sigma=0.05))
    ws = stack_windows(make_windows(data.series, 32, 8))
    text = TextSource.from_store(EmbeddingStore(data.series.timestamps, data.embeddings))
    return ws, chrono_split(ws), text


@pytest.fixture(scope="module")
def benchmark():
    return _benchmark()


@pytest.mark.slow
def test_causal_text_benefit(benchmark, acceptance_report):
    start = time.perf_counter()
    ws, (tr, va, te), text = benchmark
    scores = {"none": [], "no_tmoe": []}
    for seed in range(3):
        for ablation in scores:
            cfg = ModelConfig(**BENCH_MODEL, ablation=ablation, seed=seed)
            ckpt, _ = train_loop(cfg, TrainConfig(lr=1e-3, max_epochs=10, seed=seed), tr, va, text)
            scores[ablation].append(evaluate(ckpt, te, text)["mse"])
    full, ablated = float(np.median(scores["none"])), float(np.median(scores["no_tmoe"]))
    ratio = full / ablated
    elapsed = time.perf_counter() - start
    passed = len(ws) >= 2000 and ratio <= 0.7 and elapsed <= 600
    acceptance_report("6 causal-text benefit", passed,
                      f"{len(ws)} windows, median test MSE full {full:.4f} vs no_tmoe {ablated:.4f}, "
                      f"ratio {ratio:.3f} (<= 0.7), {elapsed:.0f}s (<= 600s)")
    assert passed


@pytest.mark.slow
def test_trend_routing_specialization(benchmark, acceptance_report):
    _, (tr, va, te), text = benchmark
    regimes = np.array([[int(mk_test(w[:, c]).regime) for c in range(w.shape[1])] for w in te.x_in])
    outcomes = []
    for seed in range(3):
        cfg = ModelConfig(**BENCH_MODEL, n_series_experts=4, k_series=1, seed=seed)
        ckpt, _ = train_loop(cfg, TrainConfig(lr=1e-3, max_epochs=10, seed=seed), tr, va, text)
        routing = RoutingLog()
        evaluate(ckpt, te, text, log=routing)
        table = routing_crosstab(routing, regimes, "series", 0)
        stat, dof = chi_square_independence(table)
        outcomes.append((stat, dof, table))
    n_clear = sum(stat > dof for stat, dof, _ in outcomes)
    passed = n_clear >= 2
    detail = ", ".join(f"seed {s}: chi2 {st:.1f} on {d} dof" for s, (st, d, _) in enumerate(outcomes))
    acceptance_report("7 trend-routing specialization", passed, f"{detail}; {n_clear}/3 exceed dof (need 2)")
    assert passed


# ---------------------------------------------------------------- 8. determinism

def test_cli_determinism(tmp_path, acceptance_report):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "seed": 3,
        "model": {"lookback": 16, "horizon": 4, "patch_len": 4, "d_model": 8, "k_series": 1, "text_dim": 8},
        "train": {"lr": 1e-3, "max_epochs": 2},
        "synthetic": {"n_steps": 300, "text_dim": 8},
    }))
    trees = []
    for rep in ("a", "b"):
        root = tmp_path / rep
        data, runs = root / "data", root / "runs"
        common = ["--config", str(cfg), "--data", str(data), "--out", str(runs)]
        codes = [main(["make-synthetic", "--config", str(cfg), "--out", str(data)]),
                 main(["embed-text", "--config", str(cfg), "--data", str(data), "--out", str(root / "stub"),
                       "--backend", "stub"]),
                 main(["train", *common]), main(["eval", *common]), main(["forecast", *common]),
                 main(["routing-report", *common]),
                 main(["mk-test", "--input", str(data / "series.csv"), "--column", "v1", "--out", str(root / "mk")])]
        assert codes == [0] * len(codes)
        trees.append({str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()})
    differing = sorted(k for k in trees[0] if trees[0][k] != trees[1].get(k))
    passed = trees[0].keys() == trees[1].keys() and not differing
    acceptance_report("8 determinism", passed,
                      f"{len(trees[0])} output files across 7 commands, differing: {differing or 'none'}")
    assert passed


# ---------------------------------------------------------------- 9. formats

def test_format_round_trips(tmp_path, monkeypatch, acceptance_report):
    problems = []
    cfg = ModelConfig()
    params = init_params(cfg)
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, params, cfg)
    loaded, cfg2 = load_checkpoint(a)
    save_checkpoint(b, loaded, cfg2)
    if a.read_bytes() != b.read_bytes() or cfg2 != cfg:
        problems.append("checkpoint bytes")
    if any(not np.array_equal(loaded[k], params[k].astype(np.float32).astype(np.float64)) for k in params):
        problems.append("checkpoint values")

    rng = np.random.default_rng(0)
    records = [(int(t), rng.normal(size=16).astype(np.float32)) for t in np.cumsum(rng.integers(1, 100, 200))]
    e1, e2 = tmp_path / "a.bin", tmp_path / "b.bin"
    write_embeddings(e1, records)
    store = read_embeddings(e1)
    write_embeddings(e2, zip(store.timestamps, store.vectors))
    if e1.read_bytes() != e2.read_bytes():
        problems.append("embedding bytes")
    if store.vectors.astype(np.float32).tobytes() != np.stack([v for _, v in records]).tobytes():
        problems.append("embedding values")

    # corrupt the magic and make sure neither reader decodes any payload
    decoded = []
    real = np.frombuffer
    monkeypatch.setattr(np, "frombuffer", lambda *args, **kw: decoded.append(1) or real(*args, **kw))
    for path, reader, err in ((a, load_checkpoint, CheckpointFormatError), (e1, read_embeddings, EmbeddingFormatError)):
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        try:
            reader(path)
            problems.append(f"{path.name} accepted")
        except err:
            pass
    if decoded:
        problems.append("payload decoded before rejection")
    passed = not problems
    acceptance_report("9 format round trips", passed,
                      f"checkpoint and embedding files bit-exact, bad magic rejected; problems: {problems or 'none'}")
    assert passed
