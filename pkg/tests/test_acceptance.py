"""Acceptance suite: the package's top-level guarantees.

One test per guarantee; each prints a single PASS/FAIL line with the
measured quantity (visible with -s, or in the report on failure), and
the assert carries the same message.
"""

import time

import numpy as np

from helpers_planted import (brute_force_assignment, brute_force_layer_mapping,
                             five_factor_oracle, hsic1_reference,
                             orthonormal_cols, permuted_head_model,
                             random_grams)
from loragraft.cka import hsic1, minibatch_cka
from loragraft.headmap import (head_interactions, head_similarity, hungarian,
                               identity_assignment, match_heads)
from loragraft.layermap import LayerMapping, dp_layer_mapping
from loragraft.linalg import truncated_svd
from loragraft.tensorio import MODULES, AdapterBundle, ModelSpec, ModelWeights
from loragraft.toyforge import SCENARIO_KINDS, capture_pair, gen_scenario
from loragraft.transfer import TransferMatrices, VocabAlignment, hidden_transform
from loragraft.transplant import (MappingPlan, TransplantConfig,
                                  attention_at_query_granularity, build_plan,
                                  transform_head_update, transplant_adapter)
from helpers_planted import expected_attention_delta, expected_mlp_delta


def report(name: str, ok: bool, detail: str) -> None:
    print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    assert ok, f"{name}: {detail}"


def test_cka_self_similarity_invariance_and_rebatching():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)

    worst_self = 0.0
    for _ in range(20):
        X = [rng.standard_normal((16, 12)) for _ in range(6)]
        worst_self = max(worst_self, abs(minibatch_cka(X, X) - 1.0))

    worst_inv = 0.0
    for _ in range(20):
        X = [rng.standard_normal((16, 12)) for _ in range(6)]
        M = rng.standard_normal((12, 12))
        Y = [x @ M + 0.3 * rng.standard_normal((16, 12)) for x in X]
        base = minibatch_cka(X, Y)
        Q = orthonormal_cols(rng, 12, 12)
        moved = minibatch_cka([2.5 * x for x in X], [y @ Q for y in Y])
        worst_inv = max(worst_inv, abs(moved - base))

    n, width = 240, 16
    Xf = rng.standard_normal((n, width))
    Yf = Xf @ rng.standard_normal((width, width)) + 0.5 * rng.standard_normal((n, width))
    full = minibatch_cka([Xf], [Yf])
    estimates = []
    for _ in range(50):
        order = rng.permutation(n)
        xs = [Xf[order[b * 24:(b + 1) * 24]] for b in range(10)]
        ys = [Yf[order[b * 24:(b + 1) * 24]] for b in range(10)]
        estimates.append(minibatch_cka(xs, ys))
    rebatch_gap = abs(float(np.mean(estimates)) - full)

    elapsed = time.perf_counter() - t0
    ok = worst_self <= 1e-10 and worst_inv <= 1e-8 and rebatch_gap <= 0.02 and elapsed < 5.0
    report("cka correctness", ok,
           f"self dev {worst_self:.2e} (<=1e-10), invariance dev {worst_inv:.2e} "
           f"(<=1e-8), rebatch gap {rebatch_gap:.4f} (<=0.02), {elapsed:.2f}s (<5s)")


def test_hsic_matches_independent_transcription():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(4, 65))
        K, L = random_grams(rng, n)
        a = hsic1(K, L)
        b = hsic1_reference(K, L)
        worst = max(worst, abs(a - b) / max(1.0, abs(a), abs(b)))
    report("hsic transcription", worst <= 1e-12,
           f"max rel err {worst:.2e} over 100 gram pairs, n in [4, 64] (<=1e-12)")


def test_layer_mapping_matches_exhaustive_search():
    rng = np.random.default_rng(2)
    mismatches = 0
    bound_violations = 0
    for _ in range(500):
        l_src = int(rng.integers(1, 7))
        l_tgt = int(rng.integers(l_src, 10))
        gap = l_tgt - l_src
        delta = int(rng.integers(gap, l_tgt + 1))
        S = rng.uniform(size=(l_src, l_tgt))
        got = dp_layer_mapping(S, delta)
        want_total, _ = brute_force_layer_mapping(S, delta)
        if got.total_score != want_total:
            mismatches += 1
        js = [j for _, j in got.pairs]
        if any(b <= a for a, b in zip(js, js[1:])) or \
           any(not (i <= j <= i + delta) for i, j in got.pairs):
            bound_violations += 1
    ok = mismatches == 0 and bound_violations == 0
    report("layer mapping optimality", ok,
           f"{mismatches} optimum mismatches, {bound_violations} bound violations "
           f"over 500 random matrices (want 0/0, exact)")


def test_assignment_matches_brute_force():
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(200):
        m = int(rng.integers(1, 8))
        n = int(rng.integers(1, 8))
        C = rng.uniform(-1.0, 1.0, size=(m, n))
        got = hungarian(C)
        want_total, _ = brute_force_assignment(C)
        if got.sim_total != want_total or len(got.pairs) != min(m, n):
            mismatches += 1
    report("assignment optimality", mismatches == 0,
           f"{mismatches} mismatches vs brute force over 200 matrices, "
           f"m,n <= 7 incl. rectangular (want 0, exact)")


def test_head_permutation_recovery():
    hits = 0
    for seed in range(100):
        H = 2 + seed % 11
        old, new, perm = permuted_head_model(seed, n_heads=H)
        old_int = head_interactions(*attention_at_query_granularity(old, 0), H)
        new_int = head_interactions(*attention_at_query_granularity(new, 0), H)
        got = match_heads(head_similarity(old_int, new_int))
        hits += got.pairs == tuple((h, perm[h]) for h in range(H))
    report("head permutation recovery", hits == 100,
           f"{hits}/100 seeds recovered exactly, H in [2, 12] (need 100)")


def test_hidden_map_recovery():
    rng = np.random.default_rng(4)
    E_o = rng.standard_normal((200, 24))
    align = VocabAlignment(pairs=tuple((i, i) for i in range(200)), shared_count=200)

    R = orthonormal_cols(rng, 24, 24)
    err_r = float(np.linalg.norm(hidden_transform(E_o, E_o @ R, align) - R))

    G = rng.standard_normal((24, 36))
    err_g = float(np.linalg.norm(hidden_transform(E_o, E_o @ G, align) - G))

    ok = err_r <= 1e-6 and err_g <= 1e-6
    report("hidden map recovery", ok,
           f"orthogonal ||W_h - R||_F {err_r:.2e}, rectangular ||W_h - G||_F "
           f"{err_g:.2e} (<=1e-6 each)")


def test_head_update_transform_fidelity():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        d_o, d_n, hd_o, hd_n = 8, 12, 4, 4
        dW = rng.standard_normal((d_o, hd_o))
        W_o = rng.standard_normal((d_o, hd_o))
        W_h = rng.standard_normal((d_o, d_n))
        W_n = rng.standard_normal((d_n, hd_n))
        got = transform_head_update(dW, W_o, W_h, W_n)
        want = five_factor_oracle(dW, W_o, W_h, W_n)
        worst = max(worst, float(np.abs(got - want).max() / max(1.0, np.abs(want).max())))

    d, hd = 16, 4
    W = orthonormal_cols(rng, d, hd)
    dW = rng.standard_normal((d, hd))
    identity_dev = float(np.abs(transform_head_update(dW, W, None, W) - dW).max())

    ok = worst <= 1e-12 and identity_dev <= 1e-10
    report("head update transform fidelity", ok,
           f"max rel err vs dense five-factor oracle {worst:.2e} (<=1e-12), "
           f"identity-orthonormal dev {identity_dev:.2e} (<=1e-10)")


def test_svd_refactorization_error_and_rank():
    rng = np.random.default_rng(6)
    worst_rel = 0.0
    rank_ok = True
    for rows, cols in ((40, 24), (24, 40), (57, 31)):
        M = rng.standard_normal((rows, cols))
        sv = np.linalg.svd(M, compute_uv=False)
        for r in (1, 4, 8, min(rows, cols)):
            pair = truncated_svd(M, r)
            err = float(np.linalg.norm(M - pair.B @ pair.A))
            tail = float(np.sqrt(np.sum(sv[r:] ** 2)))
            worst_rel = max(worst_rel, abs(err - tail) / float(np.linalg.norm(M)))
            if np.linalg.matrix_rank(pair.B @ pair.A, tol=1e-10) > r:
                rank_ok = False
    ok = worst_rel <= 1e-8 and rank_ok
    report("svd refactorization", ok,
           f"max |error - tail energy| / ||M||_F = {worst_rel:.2e} (<=1e-8), "
           f"rank bound {'held' if rank_ok else 'VIOLATED'} (exact)")


def test_end_to_end_toy_transplant():
    t0 = time.perf_counter()
    worst_delta = 0.0
    for kind in SCENARIO_KINDS:
        old, new, adapter, sc = gen_scenario(kind, seed=3)
        acts_old, acts_new = capture_pair(old, new, sc)
        plan = build_plan(old, new, adapter, acts_old, acts_new,
                          vocab_old=list(sc.vocab_old), vocab_new=list(sc.vocab_new))
        assert plan.layer_mapping.pairs == sc.truth.layer_pairs, \
            f"{kind}: layer pairs {plan.layer_mapping.pairs} != {sc.truth.layer_pairs}"
        perm = sc.truth.head_permutation
        want_pairs = tuple((h, perm[h]) for h in range(old.spec.n_heads))
        for pair, assignment in plan.head_assignments.items():
            assert assignment.pairs == want_pairs, \
                f"{kind}: heads {assignment.pairs} != {want_pairs} at {pair}"
        out = transplant_adapter(old, new, adapter, plan)
        T = (np.asarray(sc.truth.w_h) if sc.truth.w_h is not None
             else np.eye(old.spec.hidden_size))
        for i, j in sc.truth.layer_pairs:
            for module in MODULES:
                dW = adapter.delta(i, module)
                if module in ("q", "k", "v", "o"):
                    want = expected_attention_delta(dW, module, old, new, perm, T)
                else:
                    want = expected_mlp_delta(dW, module, old, new, T)
                dev = float(np.abs(out.delta(j, module) - want).max())
                worst_delta = max(worst_delta, dev)
                assert dev <= 1e-6, f"{kind}: layers.{j}.{module} dev {dev:.2e}"
    elapsed = time.perf_counter() - t0
    ok = elapsed < 60.0
    report("end-to-end toy transplant", ok,
           f"all {len(SCENARIO_KINDS)} kinds: layer pairs exact, head perms exact, "
           f"worst delta dev {worst_delta:.2e} (<=1e-6), suite {elapsed:.1f}s (<60s)")


def test_operation_count_scaling():
    rng = np.random.default_rng(7)

    def layermap_ops(l_src: int, delta: int) -> float:
        S = rng.uniform(size=(l_src, l_src + delta))
        return float(dp_layer_mapping(S, delta).ops)

    l_ratios = []
    prev = layermap_ops(8, 4)
    for l in (16, 32):
        cur = layermap_ops(l, 4)
        l_ratios.append(cur / prev)
        prev = cur

    d_ratios = []
    prev = layermap_ops(6, 4)
    for d in (8, 16):
        cur = layermap_ops(6, d)
        d_ratios.append(cur / prev)
        prev = cur

    n_ratios = []
    prev = float(np.mean([hungarian(rng.uniform(size=(8, 8))).ops for _ in range(10)]))
    for n in (16, 32):
        cur = float(np.mean([hungarian(rng.uniform(size=(n, n))).ops for _ in range(10)]))
        n_ratios.append(cur / prev)
        prev = cur

    # doubling targets with a 2x constant either side: linear in depth,
    # quadratic in the shift bound, cubic in head count
    ok = (all(1.0 <= r <= 4.0 for r in l_ratios)
          and all(2.0 <= r <= 8.0 for r in d_ratios)
          and all(4.0 <= r <= 16.0 for r in n_ratios))
    report("operation count scaling", ok,
           f"layermap depth-doubling ratios {[f'{r:.2f}' for r in l_ratios]} in [1,4], "
           f"shift-doubling {[f'{r:.2f}' for r in d_ratios]} in [2,8], "
           f"assignment size-doubling {[f'{r:.2f}' for r in n_ratios]} in [4,16]")


def test_large_shape_transplant():
    """Realistic upgrade shapes: 52 -> 40 layers, 24 -> 36 heads,
    1536 -> 2304 hidden, distinct vocab sizes. Only the mapped pair's
    weights are materialized; filler layers are broadcast zeros."""
    so = ModelSpec(name="big-old", vocab_size=73448, hidden_size=1536,
                   intermediate_size=3840, n_layers=52, n_heads=24,
                   n_kv_heads=24, head_dim=64)
    sn = ModelSpec(name="big-new", vocab_size=122753, hidden_size=2304,
                   intermediate_size=5760, n_layers=40, n_heads=36,
                   n_kv_heads=36, head_dim=64)
    rng = np.random.default_rng(8)

    def filler(spec: ModelSpec) -> dict:
        return {m: np.broadcast_to(np.zeros(1), spec.module_shape(m)) for m in MODULES}

    old_layers = [filler(so) for _ in range(so.n_layers)]
    new_layers = [filler(sn) for _ in range(sn.n_layers)]
    old_layers[5] = dict(old_layers[5])
    old_layers[5]["q"] = rng.standard_normal((1536, 1536)) / np.sqrt(1536)
    new_layers[39] = dict(new_layers[39])
    new_layers[39]["q"] = rng.standard_normal((2304, 2304)) / np.sqrt(2304)
    old = ModelWeights(spec=so, embedding=np.broadcast_to(np.zeros(1), (73448, 1536)),
                       layers=old_layers)
    new = ModelWeights(spec=sn, embedding=np.broadcast_to(np.zeros(1), (122753, 2304)),
                       layers=new_layers)

    r = 16
    adapter = AdapterBundle(rank=r, alpha=32.0, entries={
        (5, "q"): (0.02 * rng.standard_normal((r, 1536)),
                   0.02 * rng.standard_normal((1536, r))),
        (30, "q"): (0.02 * rng.standard_normal((r, 1536)),
                    0.02 * rng.standard_normal((1536, r))),
    })
    W_h = orthonormal_cols(rng, 2304, 1536).T
    plan = MappingPlan(
        layer_mapping=LayerMapping(pairs=((5, 39),), total_score=0.0, delta=39),
        head_assignments={(5, 39): identity_assignment(24, 36)},
        transfer=TransferMatrices(W_h=W_h),
        config=TransplantConfig(rank=r, alpha=32.0))

    t0 = time.perf_counter()
    out = transplant_adapter(old, new, adapter, plan)
    elapsed = time.perf_counter() - t0

    A, B = out.entries[(39, "q")]
    ok = (set(out.entries) == {(39, "q")}
          and A.shape == (r, 2304) and B.shape == (2304, r)
          and max(layer for layer, _ in out.entries) < sn.n_layers
          and out.delta(39, "q").shape == (2304, 2304))
    report("large shape transplant", ok,
           f"entries {sorted(out.entries)} (mapped pair only, 40-layer index "
           f"space), A{A.shape} B{B.shape}, {elapsed:.1f}s")
