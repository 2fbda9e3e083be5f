"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``[criterion N] PASS|FAIL ...`` line (also shown
without ``-s``). The mechanism and robustness criteria share one set of
trained models; together they take several minutes on one CPU core.
"""

import time

import numpy as np
import pytest

from exotst import numerics as nx
from exotst.attention import AttentionStore, multi_head_cross_attention
from exotst.checkpoint import load_checkpoint, save_checkpoint
from exotst.dataset import RawSeries, split_and_standardize, split_lengths
from exotst.embedding import num_patches, patchify_batch
from exotst.experiments import (
    ROBUSTNESS_HEADER,
    mechanism,
    prepare,
    robustness,
    robustness_table,
    tiny_config,
)
from exotst.fusion import fuse_once, init_fusion_layer
from exotst.model import WindowBatch, forward, init_model, loss
from exotst.training import EarlyStopping, train
from oracles import central_difference, naive_attention, patch_walker, relative_error


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'} {detail}")
        return ok
    return emit


# --- 1. gradient integrity ---------------------------------------------------------

_OPS = [
    (lambda a, b: nx.mul(a, b), 2), (lambda a, b: nx.div(a, nx.add(nx.square(b), 1.0)), 2),
    (lambda a: nx.exp(a), 1), (lambda a: nx.sqrt(nx.add(nx.square(a), 0.5)), 1),
    (lambda a: nx.softmax(a, axis=-1), 1), (lambda a: nx.mean(a, axis=0), 1),
    (lambda a, b: nx.matmul(a, nx.transpose(b)), 2), (lambda a: nx.relu(nx.add(nx.square(a), 0.1)), 1),
]


def _op_error(fn, arrays):
    params = [nx.parameter(a) for a in arrays]
    w = np.random.default_rng(1).normal(size=fn(*[nx.tensor(a) for a in arrays]).shape)

    def scalar():
        return nx.sum(nx.mul(fn(*params), w))

    nx.backward(scalar())

    def f():
        with nx.no_grad():
            return scalar().item()
    return max(relative_error(p.grad, central_difference(f, p.data)) for p in params)


def test_criterion_1_gradient_integrity(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    op_worst = max(_op_error(fn, [rng.normal(size=(3, 4)) for _ in range(k)]) for fn, k in _OPS)

    cfg = tiny_config()      # L=16 f=4 P=4 S=2 D=8 H=2 d_ff=8, one layer each, M=2
    model = init_model(cfg)
    B = 3
    batch = WindowBatch(rng.normal(size=(B, 16)), rng.normal(size=(B, 2, 16)),
                        rng.normal(size=(B, 2, 4)), rng.normal(size=(B, 4)))

    # training mode so batch-norm batch statistics are differentiated too;
    # running statistics are updated by each call but never read in this mode
    def f():
        with nx.no_grad():
            return loss(model.predict(batch, training=True), batch.y_future).item()

    nx.backward(loss(model.predict(batch, training=True), batch.y_future))
    worst, worst_name, checked = 0.0, None, 0
    for name, p in model.parameters().items():
        err = relative_error(p.grad, central_difference(f, p.data, h=1e-5))
        checked += p.size
        if err > worst:
            worst, worst_name = err, name
    seconds = time.perf_counter() - t0
    ok = worst < 1e-3 and op_worst < 1e-4 and seconds < 60 and checked == model.parameter_count()
    report(1, ok, f"model rel err {worst:.2e} ({worst_name}), per-op {op_worst:.2e}, "
                  f"{checked} params, {seconds:.1f}s")
    assert ok


# --- 2. patch oracle -----------------------------------------------------------------

def test_criterion_2_patch_oracle(report):
    rng = np.random.default_rng(2024)
    bad = 0
    for _ in range(500):
        I = int(rng.integers(1, 513))
        P = int(rng.integers(1, I + 1))
        S = int(rng.integers(1, P + 1))
        x = rng.normal(size=I)
        got = patchify_batch(x, P, S)
        want = np.array(patch_walker(x.tolist(), P, S))
        if not (got.shape == want.shape and num_patches(I, P, S) == len(want) and np.array_equal(got, want)):
            bad += 1
    report(2, bad == 0, f"{500 - bad}/500 (I, P, S) triples match the sliding-window oracle")
    assert bad == 0


# --- 3. attention ------------------------------------------------------------------------

def test_criterion_3_attention(report):
    from exotst.attention import init_attention
    rng = np.random.default_rng(3)
    worst, row_dev = 0.0, 0.0
    for i in range(100):
        D = int(rng.integers(1, 9))
        p = init_attention(nx.make_rng(i), D, 1)
        q, c = rng.normal(size=(int(rng.integers(1, 6)), D)), rng.normal(size=(int(rng.integers(1, 8)), D))
        out, w = multi_head_cross_attention(q, c, p)
        ref, maps = naive_attention(q, c, p.wq.data, p.wk.data, p.wv.data, p.wo.data)
        worst = max(worst, np.max(np.abs(out.data - ref)), np.max(np.abs(w.data[0] - maps[0])))
        row_dev = max(row_dev, np.max(np.abs(w.data.sum(-1) - 1)))

    cfg = tiny_config(n_exogenous=3)
    store = AttentionStore()
    forward(init_model(cfg), prepare(length=600, drivers=3, horizon=4).test[0], store=store)
    for m in store.maps.values():
        row_dev = max(row_dev, float(np.max(np.abs(m.sum(-1) - 1))))
    fusion_q = {store.maps[k].shape[-2] for k in store.keys() if k.startswith("fusion")}

    layer = init_fusion_layer(nx.make_rng(0), 8, 2)
    counts = []
    for n in (8, 16, 32, 64):
        e = nx.tensor(rng.normal(size=(n, 8)))
        with nx.count_multiplies() as c:
            fuse_once(e, e, layer)
        counts.append(c.count)
    slopes = np.diff(counts) / np.diff([8, 16, 32, 64])
    linear = bool(np.allclose(slopes, slopes[0]))
    ok = worst < 1e-12 and row_dev < 1e-9 and fusion_q == {1} and linear
    report(3, ok, f"oracle err {worst:.1e}, row-sum dev {row_dev:.1e}, fusion query lengths {sorted(fusion_q)}, "
                  f"multiplies {counts} (slope {slopes[0]:g}/token)")
    assert ok


# --- 4/5. mechanism and robustness -------------------------------------------------------

@pytest.fixture(scope="module")
def mechanism_run():
    data = prepare(length=3000, drivers=4, data_seed=7, regime="driver-dominant", lookback=16, horizon=30)
    t0 = time.perf_counter()
    result = mechanism(data, seeds=(0, 1, 2))
    return data, result, time.perf_counter() - t0


def test_criterion_4_mechanism(report, mechanism_run):
    _, result, seconds = mechanism_run
    vs_ablated, vs_linear = result.ratios()
    per_seed = "; ".join(f"seed {r.seed}: {r.exotst_mse:.3f}/{r.ablated_mse:.3f}/{r.linear_mse:.3f}"
                         for r in result.rows)
    ok = vs_ablated <= 0.5 and vs_linear <= 0.5
    report(4, ok, f"mean MSE exotst {result.mean('exotst_mse'):.4f}, ablated {result.mean('ablated_mse'):.4f}, "
                  f"linear {result.mean('linear_mse'):.4f}; ratios {vs_ablated:.3f} / {vs_linear:.3f} "
                  f"(<= 0.5); {seconds:.0f}s for 3 seeds (expected < 600s) [{per_seed}]")
    assert ok


def _monotone(rows):
    by = {(r.mask_fraction, r.noise_sigma): r.mse for r in rows}
    chains = [[(0.0, 0.0), (0.0, 0.8), (0.0, 1.2)]]
    chains += [[(m, s) for m in (0.0, 0.4, 0.8)] for s in (0.8, 1.2)]
    chains += [[(m, 0.8), (m, 1.2)] for m in (0.4, 0.8)]
    broken = [c for c in chains if any(by[a] > by[b] for a, b in zip(c, c[1:]))]
    return broken


def test_criterion_5_robustness(report, mechanism_run):
    data, result, _ = mechanism_run
    lines, broken = [], []
    for seed, model in zip((0, 1, 2), result.models):
        rows = robustness(model, data.test, seed=seed, k=50)
        table = robustness_table(rows)
        assert table.splitlines()[0] == ",".join(ROBUSTNESS_HEADER) and len(table.splitlines()) == 8
        bad = _monotone(rows)
        broken += bad
        lines.append(f"seed {seed}: " + " ".join(f"({r.mask_fraction:g},{r.noise_sigma:g})={r.mse:.3f}"
                                                 for r in rows))
    ok = not broken
    report(5, ok, "MSE non-decreasing in mask and sigma per seed" + ("" if ok else f"; broken {broken}")
           + "\n    " + "\n    ".join(lines))
    assert ok


# --- 6. overfit ---------------------------------------------------------------------------------

def test_criterion_6_overfit(report):
    data = prepare(length=600, drivers=2, horizon=4)
    window = [data.train[0]]
    cfg = tiny_config(max_epochs=500, patience=500, learning_rate=1e-4, batch_size=1)
    model = init_model(cfg)
    r = train(model, window, window, cfg)
    final = r.train_losses[-1]
    report(6, final < 1e-3, f"one-window train MSE {r.train_losses[0]:.3f} -> {final:.2e} in {len(r.train_losses)} "
                            f"epochs ({r.seconds:.1f}s)")
    assert final < 1e-3


# --- 7. determinism and persistence ---------------------------------------------------------------

def test_criterion_7_determinism_and_persistence(report, tmp_path):
    data = prepare(length=600, drivers=2, horizon=4)
    cfg = tiny_config(max_epochs=3, patience=3, learning_rate=1e-3)
    runs = []
    for _ in range(2):
        m = init_model(cfg)
        runs.append((m, train(m, data.train, data.val, cfg)))
    same = (runs[0][1].train_losses == runs[1][1].train_losses
            and runs[0][1].val_losses == runs[1][1].val_losses)

    model = runs[0][0]
    save_checkpoint(model, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt", expected=cfg)
    save_checkpoint(back, tmp_path / "b.ckpt")
    identical = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    rel = 0.0
    for w in data.test:
        y0, y1 = forward(model, w).y_hat, forward(back, w).y_hat
        # relative to the window's forecast scale; pointwise ratios blow up where y crosses 0
        rel = max(rel, float(np.max(np.abs(y1 - y0)) / np.max(np.abs(y0))))
    ok = same and identical and rel <= 1e-5
    report(7, ok, f"loss trajectories identical={same}, save-load-save byte-identical={identical}, "
                  f"reload rel diff {rel:.1e} over {len(data.test)} windows")
    assert ok


# --- 8. protocol ----------------------------------------------------------------------------------------

def _stops_at(values, patience):
    s = EarlyStopping(patience)
    for v in values:
        s.update(v)
        if s.should_stop:
            break
    return s.epoch, s.best_epoch


def test_criterion_8_protocol(report):
    splits_ok = all(split_lengths(T) == (int(np.floor(0.7 * T + 1e-9)), T // 10, T - int(np.floor(0.7 * T + 1e-9)) - T // 10)
                    for T in range(10, 5000))
    splits_ok &= split_lengths(1000) == (700, 100, 200) and split_lengths(10) == (7, 1, 2)

    rng = np.random.default_rng(8)
    T = 1000
    trend = np.linspace(0, 5, T)
    series = RawSeries([str(t) for t in range(T)], trend + rng.normal(size=T),
                       (trend + rng.normal(size=(2, T))), ["y", "x1", "x2"])
    sp = split_and_standardize(series, 16, 4)
    train_stats = abs(sp.train.y.mean()) < 1e-10 and abs(sp.train.y.std() - 1) < 1e-10
    mu = series.endogenous[:700].mean()
    uses_train = sp.stats.mean[0] == pytest.approx(mu, abs=1e-12)
    shifted = abs(sp.val.y.mean()) > 0.5 and abs(sp.test.y.mean()) > 0.5

    cases = {((1.0, 2.0, 3.0, 4.0), 1): (2, 1), ((3.0, 2.0, 2.5, 2.0, 1.0), 2): (4, 2),
             ((1.0,) * 12, 10): (11, 1), ((5, 4, 3, 2, 1, 0.5), 3): (6, 6),
             ((2.0, 1.0, 1.0, 1.0, 1.0, 0.9), 3): (5, 2)}
    stopping = all(_stops_at(v, p) == want for (v, p), want in cases.items())
    ok = splits_ok and train_stats and uses_train and shifted and stopping
    report(8, ok, f"7:1:2 floors={splits_ok}, train-only stats={train_stats and uses_train} "
                  f"(val mean {sp.val.y.mean():.2f}, test mean {sp.test.y.mean():.2f}), patience rule={stopping}")
    assert ok
