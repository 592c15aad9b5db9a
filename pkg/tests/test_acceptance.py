"""Acceptance criteria, each at its stated sample counts, tolerances and time limits.

Every test prints one ``PASS``/``FAIL`` line; the lines are repeated in the
terminal summary under "acceptance criteria".
"""

import itertools
import time

import numpy as np
import pytest

from _util import add_noise, seeded_config
from rsym.analysis import equivalence_check, interpolate_losses, param_distance
from rsym.cli import main as cli_main
from rsym.fusion import FusionMethod, fuse, regmean_solve
from rsym.matching import MatchOptions, match_attention_head, match_model, qk_scale, vo_scale
from rsym.model import (
    TransformerConfig,
    accuracy,
    fd_gradient,
    flatten,
    forward,
    gen_synthetic,
    loss,
    models_equal,
    n_params,
    random_model,
    random_tokens,
)
from rsym.numerics import hungarian_max
from rsym.persistence import load_model, save_model
from rsym.symmetry import apply_model_symmetry, random_symmetry

pytestmark = pytest.mark.acceptance

DESK = TransformerConfig(n_layers=2, n_heads=2, d_model=8, d_head=4, d_ff=16, vocab_size=16, n_classes=3, seq_len=6)
ABLATIONS = {
    "no-ffn": MatchOptions(enable_ffn=False),
    "no-attn": MatchOptions(enable_attn=False),
    "no-rescale": MatchOptions(enable_rescale=False),
}


def orthogonal_grid_2d(n_angles):
    th = np.linspace(0.0, 2 * np.pi, n_angles, endpoint=False)
    c, s = np.cos(th), np.sin(th)
    rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
    ref = np.stack([np.stack([c, s], -1), np.stack([s, -c], -1)], -2)
    return np.concatenate([rot, ref])


def rotated_objective(rs, pairs_left, pairs_right):
    """``sum ||R^T W1 - W2||^2`` over left-acting pairs and ``||W1 R - W2||^2`` over right-acting pairs, per R."""
    total = np.zeros(len(rs))
    for w1, w2 in pairs_left:
        total += np.sum((np.einsum("kji,jd->kid", rs, w1) - w2) ** 2, axis=(1, 2))
    for w1, w2 in pairs_right:
        total += np.sum((np.einsum("dj,kji->kdi", w1, rs) - w2) ** 2, axis=(1, 2))
    return total


def head_rotation_objectives(src, anchor, rs):
    qk = rotated_objective(
        rs,
        [(src.wq, anchor.wq), (src.wk, anchor.wk)],
        [(src.bq[None], anchor.bq[None]), (src.bk[None], anchor.bk[None])],
    )
    vo = rotated_objective(rs, [(src.wv, anchor.wv)], [(src.bv[None], anchor.bv[None]), (src.wo, anchor.wo)])
    return qk, vo


def scale_objective(a, x1, x2, y1, y2):
    a = np.atleast_1d(a)[:, None]
    x = sum(np.sum((a * u.ravel() - v.ravel()) ** 2, axis=1) for u, v in zip(x1, x2))
    y = sum(np.sum((w.ravel() / a - z.ravel()) ** 2, axis=1) for w, z in zip(y1, y2))
    return x + y


# barriers that differ by rounding noise only count as ties
TIE = 1e-12


def barrier(a, b, data, n_points=11):
    return interpolate_losses(a, b, data, n_points).barrier


def test_c01_symmetry_equivalence(acceptance_log):
    start = time.perf_counter()
    worst = 0.0
    for m_seed in range(20):
        cfg = seeded_config(1000 + m_seed, max_layers=3, max_heads=4, max_d_model=32)
        model = random_model(cfg, m_seed)
        for t_seed in range(20):
            t = random_symmetry(cfg, 10_000 * m_seed + t_seed)
            rep = equivalence_check(model, apply_model_symmetry(model, t), n_inputs=100, seed=t_seed)
            worst = max(worst, rep.max_abs_logit_diff)
    elapsed = time.perf_counter() - start
    ok = worst < 1e-9 and elapsed < 30
    acceptance_log("C1 symmetry equivalence", ok, f"max logit diff {worst:.2e} (< 1e-9) over 400 pairs, {elapsed:.1f}s (< 30s)")
    assert ok


def test_c02_procrustes_optimality(acceptance_log):
    cfg = TransformerConfig(n_layers=1, n_heads=2, d_model=4, d_head=2, d_ff=4, vocab_size=5, n_classes=2, seq_len=3)
    rs = orthogonal_grid_2d(40_000)
    start = time.perf_counter()
    worst = -np.inf
    for seed in range(50):
        src = random_model(cfg, 2 * seed).blocks[0].attn.heads[seed % 2]
        anchor = random_model(cfg, 2 * seed + 1).blocks[0].attn.heads[seed % 2]
        r_qk, r_vo, _ = match_attention_head(src, anchor)
        grid_qk, grid_vo = head_rotation_objectives(src, anchor, rs)
        got_qk, _ = head_rotation_objectives(src, anchor, r_qk[None])
        _, got_vo = head_rotation_objectives(src, anchor, r_vo[None])
        worst = max(worst, got_qk[0] - grid_qk.min(), got_vo[0] - grid_vo.min())
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-6 and elapsed < 10
    acceptance_log(
        "C2 Procrustes optimality", ok,
        f"closed form minus grid minimum at most {worst:.2e} (<= 1e-6) on 50 pairs x 80000 candidates, {elapsed:.1f}s (< 10s)",
    )
    assert ok


def test_c03_lap_optimality(acceptance_log):
    rng = np.random.default_rng(3)
    perms = {n: np.array(list(itertools.permutations(range(n)))) for n in range(1, 8)}
    start = time.perf_counter()
    mismatches, worst = 0, 0.0
    for _ in range(100):
        n = int(rng.integers(1, 8))
        cost = rng.standard_normal((n, n))
        best = cost[np.arange(n), perms[n]].sum(axis=1).max()
        got = cost[np.arange(n), hungarian_max(cost)].sum()
        gap = abs(best - got)
        worst = max(worst, gap)
        mismatches += gap > 1e-12
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 10
    acceptance_log("C3 LAP optimality", ok, f"{100 - mismatches}/100 equal exhaustive optimum (max gap {worst:.1e}), {elapsed:.1f}s (< 10s)")
    assert ok


def test_c04_rescaling_optimality(acceptance_log):
    grid = np.logspace(-1, 1, 5000)
    start = time.perf_counter()
    worst, identity_ok = -np.inf, True
    for seed in range(50):
        src = random_model(DESK, 2 * seed).blocks[seed % 2].attn.heads[seed % 2]
        anchor = random_model(DESK, 2 * seed + 1).blocks[seed % 2].attn.heads[seed % 2]
        cases = [
            (qk_scale(src, anchor)[0], (src.wq, src.bq), (anchor.wq, anchor.bq), (src.wk, src.bk), (anchor.wk, anchor.bk)),
            (vo_scale(src, anchor)[0], (src.wv, src.bv), (anchor.wv, anchor.bv), (src.wo,), (anchor.wo,)),
        ]
        for a, x1, x2, y1, y2 in cases:
            worst = max(worst, scale_objective(a, x1, x2, y1, y2)[0] - scale_objective(grid, x1, x2, y1, y2).min())
        identity_ok &= qk_scale(src, src)[0] == 1.0 and vo_scale(src, src)[0] == 1.0
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-6 and identity_ok and elapsed < 10
    acceptance_log(
        "C4 rescaling optimality", ok,
        f"selected minus grid minimum at most {worst:.2e} (<= 1e-6) on 50 pairs; a = 1 on identical pairs: {identity_ok}; {elapsed:.1f}s",
    )
    assert ok


def test_c05_planted_recovery(acceptance_log):
    worst_rel, improved = 0.0, 0
    for seed in range(20):
        anchor = random_model(DESK, seed)
        t = random_symmetry(DESK, 500 + seed)
        src = apply_model_symmetry(anchor, t)
        matched, _ = match_model(src, anchor)
        worst_rel = max(worst_rel, param_distance(matched, anchor) / param_distance(src, anchor))
        noisy = add_noise(src, 0.01, 900 + seed)
        matched, _ = match_model(noisy, anchor)
        improved += param_distance(matched, anchor) < param_distance(noisy, anchor)
    ok = worst_rel < 1e-6 and improved >= 19
    acceptance_log(
        "C5 planted recovery", ok,
        f"noise 0: worst relative distance {worst_rel:.2e} (< 1e-6); noise 0.01: improved on {improved}/20 (>= 19)",
    )
    assert ok


def test_c06_distance_monotonicity(acceptance_log):
    violations, worst = 0, -np.inf
    for seed in range(50):
        src, anchor = random_model(DESK, 2 * seed), random_model(DESK, 2 * seed + 1)
        before = param_distance(src, anchor)
        for flags in itertools.product([False, True], repeat=3):
            matched, _ = match_model(src, anchor, MatchOptions(*flags))
            excess = param_distance(matched, anchor) - before
            worst = max(worst, excess)
            violations += excess > 1e-9
    ok = violations == 0
    acceptance_log("C6 distance monotonicity", ok, f"{violations} violations in 400 runs; largest increase {worst:.2e} (<= 1e-9)")
    assert ok


def test_c07_loss_barrier(acceptance_log):
    not_worse = {0.0: 0, 0.01: 0}
    max_after_zero = 0.0
    beats_ablation = {0.0: 0, 0.01: 0}
    for seed in range(20):
        a = random_model(DESK, seed)
        data = gen_synthetic(DESK, a, 64, 100 + seed)
        t = random_symmetry(DESK, 200 + seed)
        for sigma in (0.0, 0.01):
            b = apply_model_symmetry(a, t)
            if sigma:
                b = add_noise(b, sigma, 300 + seed)
            before = barrier(a, b, data)
            full, _ = match_model(b, a)
            after = barrier(a, full, data)
            not_worse[sigma] += after <= before + TIE
            if sigma == 0.0:
                max_after_zero = max(max_after_zero, after)
            ablated = [barrier(a, match_model(b, a, opts)[0], data) for opts in ABLATIONS.values()]
            beats_ablation[sigma] += all(after <= x + TIE for x in ablated)
    ok = (
        min(not_worse.values()) >= 18
        and max_after_zero < 1e-9
        and min(beats_ablation.values()) >= 15
    )
    acceptance_log(
        "C7 loss barrier", ok,
        f"after <= before on {not_worse[0.0]}/20 (noise 0) and {not_worse[0.01]}/20 (noise 0.01) (>= 18); "
        f"max barrier after at noise 0 {max_after_zero:.1e} (< 1e-9); complete <= every single ablation on "
        f"{beats_ablation[0.0]}/20 and {beats_ablation[0.01]}/20 (>= 15)",
    )
    assert ok


def test_c08_fusion_plug_in(acceptance_log):
    wins, acc_wins, worst_param, worst_loss = 0, 0, 0.0, 0.0
    for seed in range(20):
        a = random_model(DESK, seed)
        heldout = gen_synthetic(DESK, a, 128, 700 + seed)
        ta = apply_model_symmetry(a, random_symmetry(DESK, 800 + seed))
        noisy = add_noise(ta, 0.01, 900 + seed)
        plain, _ = fuse([a, noisy])
        matched, _ = fuse([a, noisy], match_first=True)
        wins += loss(matched, heldout) <= loss(plain, heldout)
        acc_wins += accuracy(matched, heldout) >= accuracy(plain, heldout)
        exact, _ = fuse([a, ta], match_first=True)
        worst_param = max(worst_param, float(np.max(np.abs(flatten(exact) - flatten(a)))))
        worst_loss = max(worst_loss, abs(loss(exact, heldout) - loss(a, heldout)))
    ok = wins >= 18 and worst_param < 1e-6 and worst_loss < 1e-9
    acceptance_log(
        "C8 fusion plug-in", ok,
        f"matched fusion loss <= plain on {wins}/20 (>= 18); noise 0: max parameter error {worst_param:.1e} (< 1e-6), "
        f"loss error {worst_loss:.1e} (< 1e-9); for reference, matched accuracy >= plain on {acc_wins}/20",
    )
    assert ok


def test_c09_fusion_exactness(acceptance_log):
    cfg = TransformerConfig(n_layers=1, n_heads=2, d_model=4, d_head=2, d_ff=6, vocab_size=7, n_classes=3, seq_len=4)
    worst = {}
    for kind in ("simple", "fisher", "regmean"):
        worst[kind] = 0.0
        for seed in range(3):
            m = random_model(cfg, seed)
            d = gen_synthetic(cfg, m, 16, seed)
            merged, _ = fuse([m, m, m], [d, d, d], FusionMethod(kind, fisher_items=8 if kind == "fisher" else None))
            worst[kind] = max(worst[kind], float(np.max(np.abs(flatten(merged) - flatten(m)))))
    oracle_gap = 0.0
    rng = np.random.default_rng(9)
    for _ in range(20):
        xs = [rng.standard_normal((int(rng.integers(6, 20)), 4)) for _ in range(2)]
        ws = [rng.standard_normal((4, 4)) for _ in range(2)]
        got = regmean_solve([x.T @ x for x in xs], ws, ridge=0.0, off_diag=1.0)
        stacked = np.linalg.lstsq(np.vstack(xs), np.vstack([x @ w.T for x, w in zip(xs, ws)]), rcond=None)[0].T
        oracle_gap = max(oracle_gap, float(np.max(np.abs(got - stacked))))
    ok = max(worst.values()) < 1e-8 and oracle_gap < 1e-8
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    acceptance_log("C9 fusion exactness", ok, f"identical inputs: {detail} (< 1e-8); RegMean vs least squares {oracle_gap:.1e} (< 1e-8)")
    assert ok


def test_c10_fd_gradient(acceptance_log):
    cfg = TransformerConfig(n_layers=1, n_heads=2, d_model=4, d_head=2, d_ff=6, vocab_size=7, n_classes=3, seq_len=4)
    bias = slice(n_params(cfg) - cfg.n_classes, n_params(cfg))
    worst = 0.0
    for seed in range(20):
        model = random_model(cfg, seed)
        tokens = random_tokens(cfg, 1, seed)[0]
        label = seed % cfg.n_classes
        g = fd_gradient(model, (tokens, label))[bias]
        logits = forward(model, tokens)
        p = np.exp(logits - logits.max())
        p /= p.sum()
        p[label] -= 1.0
        worst = max(worst, float(np.max(np.abs(g - p))))
    ok = worst < 1e-5
    acceptance_log("C10 finite-difference gradient", ok, f"max error vs softmax minus one-hot {worst:.2e} (< 1e-5) on 20 items")
    assert ok


def test_c11_determinism_roundtrip(acceptance_log, tmp_path):
    cfg_json = '{"n_layers": 2, "n_heads": 2, "d_model": 8, "d_head": 4, "d_ff": 12, "vocab_size": 12, "n_classes": 3, "seq_len": 5}'

    def pipeline(root, parallel):
        root.mkdir()
        w = root / "w"
        codes = [
            cli_main(["gen", "--config", cfg_json, "--seed", "11", "--noise", "0.01", "--n-models", "2",
                      "--n-items", "32", "--n-heldout", "32", "--out", str(w)]),
            cli_main(["match", "--src", str(w / "end_0.rsym"), "--anchor", str(w / "base.rsym"),
                      "--out", str(root / "m.rsym"), "--report", str(root / "m.json"), "--parallel", str(parallel)]),
            cli_main(["fuse", "--models", f"{w / 'base.rsym'},{w / 'end_0.rsym'},{w / 'end_1.rsym'}",
                      "--method", "regmean", "--match", "--data", ",".join([str(w / "data.rsds")] * 3),
                      "--out", str(root / "f.rsym"), "--report", str(root / "f.json"), "--parallel", str(parallel)]),
            cli_main(["interpolate", "--a", str(w / "base.rsym"), "--b", str(root / "m.rsym"),
                      "--data", str(w / "heldout.rsds"), "--points", "7", "--out", str(root / "c.csv")]),
        ]
        files = {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
        return codes, files

    c1, run1 = pipeline(tmp_path / "r1", 1)
    c2, run2 = pipeline(tmp_path / "r2", 1)
    c3, run3 = pipeline(tmp_path / "r3", 3)
    reruns_equal = run1 == run2
    parallel_equal = run1 == run3
    exact = True
    for seed in range(5):
        m = random_model(DESK, seed)
        save_model(m, tmp_path / f"rt{seed}.rsym")
        back = load_model(tmp_path / f"rt{seed}.rsym")
        exact &= models_equal(m, back) and flatten(back).tobytes() == flatten(m).tobytes()
    ok = c1 == c2 == c3 == [0, 0, 0, 0] and reruns_equal and parallel_equal and exact
    acceptance_log(
        "C11 determinism and round-trip", ok,
        f"{len(run1)} pipeline files byte-identical on rerun: {reruns_equal}, with --parallel 3: {parallel_equal}; "
        f"checkpoint round-trip bit-exact: {exact}",
    )
    assert ok


def test_c12_complexity(acceptance_log):
    cfg = TransformerConfig(n_layers=4, n_heads=4, d_model=64, d_head=16, d_ff=256, vocab_size=32, n_classes=4, seq_len=8)
    src, anchor = random_model(cfg, 1), random_model(cfg, 2)
    start = time.perf_counter()
    matched, rep = match_model(src, anchor, MatchOptions(parallel_degree=1))
    elapsed = time.perf_counter() - start
    ok = elapsed < 5.0 and rep.distance_after <= rep.distance_before
    acceptance_log("C12 complexity", ok, f"L=4 H=4 d_model=64 d_ff=256 full match in {elapsed:.2f}s (< 5s) single-threaded")
    assert ok
