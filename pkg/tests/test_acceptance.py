"""One test per acceptance criterion; each prints a PASS/FAIL line."""

import itertools
import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dstanet import attention as at
from dstanet import bench
from dstanet import datapipe as dp
from dstanet import tensorkit as tk
from dstanet.checkpoint import Checkpoint
from dstanet.network import DSTANet, LayerSpec, NetworkConfig, default_config
from dstanet.trainer import (TrainConfig, evaluate, fuse_scores, lr_at_epoch, make_checkpoint,
                             net_from_checkpoint, train)
from gradutil import leaf, max_fd_error, projected_loss
from test_attention import loop_logits
from test_tensorkit import OP_CASES

T = tk.Tensor

# criterion 7 and 8 setup: two layers of width 16 and 32, two heads, N=10, T=32
SMALL_LAYERS = (16, 32)
SMALL_HEADS = 2
SMALL_FRAMES = 32
SYNTH_FRAMES = 40
SAMPLE_FRAMES = 38  # ceil(32 * 150 / 128), the default sample-to-crop ratio
SMALL_SCORE_NORM = "softmax"


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, detail
    return emit


# ---------------------------------------------------------------- 1


def _attention_cases():
    cases = {}
    for s in at.STRATEGIES:
        cases[f"attention_logits_{s}"] = (
            lambda q, k, s=s: at.attention_logits(q, k, s), [(4, 3, 2), (4, 3, 2)])
    cases["apply_sgr"] = (lambda s, g: at.apply_sgr(s, g, 0.7), [(4, 4), (4, 4)])
    cases["add_decoupled_pe"] = (lambda x: at.add_decoupled_pe(x, at.TEMPORAL), [(2, 4, 3, 4)])
    cases["activation_tanh"] = (lambda x: tk.activation(x, "tanh"), [(3, 4)])
    cases["cross_entropy"] = (lambda z: tk.cross_entropy(z, [0, 2, 1, 2]), [(4, 3)])
    return cases


def test_criterion_1_gradient_soundness(report):
    start = time.perf_counter()
    worst, worst_name = 0.0, ""
    cases = {**OP_CASES, **_attention_cases()}
    for i, (name, (fn, shapes)) in enumerate(sorted(cases.items())):
        rng = np.random.default_rng(100 + i)
        tensors = [leaf(rng, s) for s in shapes]
        out = fn(*[T(t.data) for t in tensors])
        outs = out if isinstance(out, list) else [out]
        if name == "cross_entropy":
            loss = fn
        else:
            loss = projected_loss(fn, [rng.uniform(-1, 1, o.shape) for o in outs])
        skip = None
        if name == "leaky_relu":
            skip = lambda ti, c, ts=tensors: abs(ts[ti].data[c]) < 1e-4  # noqa: E731
        err, checked = max_fd_error(loss, tensors, rng, count=10, skip=skip)
        assert checked >= min(10, tensors[0].size)
        if err > worst:
            worst, worst_name = err, name

    cfg = NetworkConfig(5, 6, 4, 3, [LayerSpec(c_out=4, heads=2), LayerSpec(c_out=6, heads=2)])
    net = DSTANet(cfg, 0)
    rng = np.random.default_rng(1)
    for p in net.parameters():
        # move off zero init so every path carries gradient
        p.data = p.data + rng.uniform(-0.3, 0.3, p.shape)
    x = T(rng.uniform(-1, 1, (2, 5, 6, 4)))
    labels = [0, 2]
    params = net.parameters()
    net_err, checked = max_fd_error(lambda *ps: tk.cross_entropy(net.forward(x), labels),
                                    params, rng, count=10)
    assert checked == sum(min(10, p.size) for p in params)
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-5 and net_err <= 1e-5 and elapsed < 60
    report(1, ok, f"{len(cases)} ops worst rel err {worst:.2e} ({worst_name}), 2-layer net "
                  f"{net_err:.2e} over {len(params)} tensors, {elapsed:.1f}s")


# ---------------------------------------------------------------- 2


def test_criterion_2_strategy_oracles(report):
    worst = 0.0
    exact_single = True
    for n, t, ce in itertools.product((2, 3, 5), (1, 2, 4), (1, 4)):
        rng = np.random.default_rng(n * 100 + t * 10 + ce)
        q, k = rng.standard_normal((n, t, ce)), rng.standard_normal((n, t, ce))
        for strategy, axis in itertools.product(at.STRATEGIES, at.AXES):
            oracle = loop_logits(q, k, strategy, axis)
            raw = at.attention_logits(T(q), T(k), strategy, axis, scale_logits=False,
                                      average_frames=False).data
            f = t if axis == at.SPATIAL else n
            factor = {"a": 1.0, "b": 1.0 / f ** 2, "c": 1.0 / f}[strategy] / math.sqrt(ce)
            scaled = at.attention_logits(T(q), T(k), strategy, axis).data
            worst = max(worst, np.abs(raw - oracle).max(), np.abs(scaled - oracle * factor).max())
        if t == 1:
            a = at.attention_logits(T(q), T(k), "a").data[0]
            for s in ("b", "c"):
                exact_single &= np.array_equal(a, at.attention_logits(T(q), T(k), s).data)
    ok = worst <= 1e-12 and exact_single
    report(2, ok, f"18 grid points x 3 strategies x 2 axes, max |impl - loop| {worst:.1e}; "
                  f"T=1 coincide exactly: {exact_single}")


# ---------------------------------------------------------------- 3


def test_criterion_3_complexity(report):
    start = time.perf_counter()
    mismatches = [(s, n, t, c)
                  for n, t, c in itertools.product((2, 3, 5), (1, 2, 4), (1, 4))
                  for s in bench.BENCH_STRATEGIES
                  if bench.count_multiply_adds(s, n, t, c) != at.flop_estimate(s, n, t, c)]
    ratio = at.flop_estimate("flat", 25, 128, 64) / at.flop_estimate("c", 25, 128, 64)
    rows = bench.bench_rows("c", 25, 128, 64, repeat=7, seed=0)
    speedup = rows[0]["time_ratio"]
    elapsed = time.perf_counter() - start
    ok = (not mismatches and ratio == 10240000 / 489600 and round(ratio, 1) == 20.9
          and speedup >= 5 and elapsed < 120)
    report(3, ok, f"counts exact on grid ({len(mismatches)} mismatches); analytic flat/c "
                  f"{ratio:.3f}; measured speedup {speedup:.1f}x; {elapsed:.1f}s")


# ---------------------------------------------------------------- 4


def test_criterion_4_position_codes(report):
    n, t, c = 25, 128, 64
    spatial = at.decoupled_pe(n, t, c, at.SPATIAL)
    temporal = at.decoupled_pe(n, t, c, at.TEMPORAL)
    codes = np.concatenate([spatial.reshape(-1, c), temporal.reshape(-1, c)], axis=1)
    gap = np.inf
    for i in range(len(codes) - 1):
        gap = min(gap, np.abs(codes[i + 1:] - codes[i]).max(axis=1).min())
    frame_inv = all(np.array_equal(spatial[:, j], spatial[:, 0]) for j in range(t))
    joint_inv = all(np.array_equal(temporal[i], temporal[0]) for i in range(n))
    ok = len(codes) == 3200 and gap > 0 and frame_inv and joint_inv
    report(4, ok, f"{len(codes)} codes, min pairwise Linf gap {gap:.3e}; spatial frame-invariant "
                  f"{frame_inv}, temporal joint-invariant {joint_inv}")


# ---------------------------------------------------------------- 5


def _spatial_module(seed, **kw):
    cfg = at.AttentionConfig(at.SPATIAL, "c", heads=2, c_in=4, c_e=2, c_out=4, **kw)
    return at.AttentionModule(cfg, 5, np.random.default_rng(seed))


def test_criterion_5_sgr_contract(report):
    rng = np.random.default_rng(5)
    x = T(rng.standard_normal((2, 5, 6, 4)))
    expect = _spatial_module(1, use_sgr=False)(x).data
    alpha_zero = _spatial_module(1, use_sgr=True, alpha=0.0)
    alpha_zero.global_map.data = rng.standard_normal((5, 5))
    g_zero = _spatial_module(1, use_sgr=True, alpha=0.8)
    bit_exact = (np.array_equal(alpha_zero(x).data, expect)
                 and np.array_equal(g_zero(x).data, expect))

    net = DSTANet(default_config(num_frames=16), 0)
    n = net.config.num_joints
    temporal_params = [p for _, tm in net.blocks for p in tm.parameters()]
    no_temporal_map = not any(p.shape == (n, n) or "global_map" in p.name
                              for p in temporal_params)
    spatial_maps = [p for sm, _ in net.blocks for p in sm.parameters() if "global_map" in p.name]

    module = _spatial_module(2, use_sgr=True, alpha=0.6)
    module(x)
    plain = [s.copy() for s in module.last_scores]
    g = rng.standard_normal((5, 5))
    module.global_map.data = g
    module(x)
    additive = all(np.array_equal(w, p + 0.6 * g) for w, p in zip(module.last_scores, plain))
    ok = bit_exact and no_temporal_map and len(spatial_maps) == 8 and additive
    report(5, ok, f"alpha=0 / G=0 bit-exact {bit_exact}; temporal N x N params absent "
                  f"{no_temporal_map}; {len(spatial_maps)} spatial maps; scores + alpha G exact "
                  f"{additive}")


# ---------------------------------------------------------------- 6


@settings(max_examples=1000, deadline=None, derandomize=True)
@given(st.integers(2, 400), st.integers(1, 399), st.integers(1, 3))
def _stride_padding_cases(t, stride, joints):
    stride = min(stride, t - 1)
    raw = dp.decouple_temporal(np.zeros((t, joints, 3)), stride)
    assert raw.shape == (joints, t - stride, 3)
    padded = dp.pad_edge(raw, t)
    assert padded.shape == (joints, t, 3)
    assert np.array_equal(padded[:, t - stride:], np.repeat(raw[:, -1:], stride, axis=1))


def test_criterion_6_data_decoupling(report):
    rng = np.random.default_rng(6)
    frames = rng.integers(-512, 512, size=(12, 10, 3)) / 64.0
    joints, bones, _ = dp.hand_skeleton(10)
    translation_ok = all(
        np.array_equal(dp.decouple_spatial(frames + shift, bones),
                       dp.decouple_spatial(frames, bones))
        for shift in rng.integers(-64, 64, size=(20, 3)) / 8.0)

    x0 = rng.integers(-64, 64, size=(1, 10, 3)) / 16.0
    v = rng.integers(-64, 64, size=(1, 10, 3)) / 16.0
    seq = dp.SkeletonSequence(joints, bones, x0 + v * np.arange(32)[:, None, None], 0, "cv")
    streams = dp.build_streams(seq, fast_stride=1, slow_stride=2)
    velocity_ok = all(
        np.array_equal(s, np.broadcast_to((v * stride).transpose(1, 0, 2), s.shape))
        for s, stride in ((streams.fast_temporal, 1), (streams.slow_temporal, 2)))

    _stride_padding_cases()
    ok = translation_ok and velocity_ok
    report(6, ok, f"spatial translation-invariant {translation_ok}; constant velocity gives "
                  f"v*stride {velocity_ok}; 1000 stride/padding cases pass")


# ---------------------------------------------------------------- 7


def small_net_config(num_classes=4):
    layers = [LayerSpec(c_out=c, heads=SMALL_HEADS) for c in SMALL_LAYERS]
    return NetworkConfig(10, SMALL_FRAMES, 3, num_classes, layers, score_norm=SMALL_SCORE_NORM)


def small_train_config(stream="st", seed=0):
    # lr 0.01 with the standard drops at 1/2 and 3/4 of the run
    return TrainConfig(epochs=200, batch_size=32, base_lr=0.01, lr_drop_epochs=(100, 150),
                       momentum=0.9, weight_decay=0.0005, seed=seed, stream=stream,
                       sample_frames=SAMPLE_FRAMES, crop_frames=SMALL_FRAMES)


def test_criterion_7_scaled_training(report):
    seqs, _, _ = dp.synth_dataset(4, 50, num_joints=10, num_frames=SYNTH_FRAMES, noise=0.05,
                                  seed=0)
    runs = []
    for _ in range(2):
        start = time.perf_counter()
        net = DSTANet(small_net_config(), seed=0)
        result = train(net, seqs, small_train_config())
        runs.append((result, time.perf_counter() - start))
    (a, ta), (b, tb) = runs
    accs = [e.train_acc for e in a.history]
    first = next((e.epoch for e in a.history if e.train_acc >= 0.95), None)
    identical = a.checkpoint.to_bytes() == b.checkpoint.to_bytes() and a.history == b.history
    ok = first is not None and accs[-1] >= 0.95 and identical and max(ta, tb) < 600
    report(7, ok, f"{len(seqs)} samples; train acc first >= 95% at epoch {first}, final "
                  f"{accs[-1]:.3f}; runs bit-identical {identical}; {ta:.0f}s / {tb:.0f}s")


# ---------------------------------------------------------------- 8


def test_criterion_8_fusion_complementarity(report):
    seqs, splits, names = dp.synth_dataset(4, 50, num_joints=10, num_frames=SYNTH_FRAMES,
                                           noise=0.05, seed=1)
    train_set = [s for s, sp in zip(seqs, splits) if sp == "train"]
    test_set = [s for s, sp in zip(seqs, splits) if sp == "test"]
    n_pose, _ = dp.class_layout(4)
    tables, per_class, acc = {}, {}, {}
    for tag in dp.STREAMS:
        cfg = small_train_config(stream=tag)
        net = DSTANet(small_net_config(), seed=0)
        train(net, train_set, cfg)
        res = evaluate(net, test_set, cfg)
        tables[tag], acc[tag] = res.table, res.accuracy
        per_class[tag] = res.table.per_class_accuracy(4)
    fused = fuse_scores(list(tables.values())).accuracy
    pose = {t: per_class[t][:n_pose].mean() for t in dp.STREAMS}
    traj = {t: per_class[t][n_pose:].mean() for t in dp.STREAMS}
    spatial_wins_pose = all(pose["s"] > pose[t] for t in ("ft", "sl"))
    temporal_wins_traj = all(traj[t] > traj["s"] for t in ("ft", "sl"))
    best = max(acc.values())
    ok = spatial_wins_pose and temporal_wins_traj and fused >= best - 0.01
    detail = "; ".join(f"{t} acc {acc[t]:.3f} pose {pose[t]:.2f} traj {traj[t]:.2f}"
                       for t in dp.STREAMS)
    report(8, ok, f"{detail}; fused {fused:.3f} vs best single {best:.3f}")


# ---------------------------------------------------------------- 9


def test_criterion_9_protocol(report):
    cfg = TrainConfig()
    lrs = {e: lr_at_epoch(cfg, e) for e in (0, 59, 60, 89, 90, 119)}
    schedule_ok = (lrs[0] == 0.1 and lrs[59] == 0.1 and lrs[60] == 0.1 / 10
                   and lrs[89] == 0.1 / 10 and lrs[90] == 0.1 / 100 and lrs[119] == 0.1 / 100
                   and cfg.epochs == 120)
    try:
        lr_at_epoch(cfg, 120)
        ends = False
    except ValueError:
        ends = True
    net_cfg = default_config()
    net_cfg.validate()
    arch_ok = ([l.c_out for l in net_cfg.layers] == [64, 64, 128, 128, 256, 256, 256, 256]
               and all(l.heads == 3 for l in net_cfg.layers))
    ok = schedule_ok and ends and arch_ok
    report(9, ok, f"lr {lrs[0]}/{lrs[60]}/{lrs[90]} at 0/60/90, ends at 120 {ends}; "
                  f"default net 8 blocks x 3 heads {arch_ok}")


# ---------------------------------------------------------------- 10


def test_criterion_10_serialization(report, tmp_path):
    seqs, _, _ = dp.synth_dataset(4, 3, num_joints=10, num_frames=SYNTH_FRAMES, seed=2)
    dp.save_skeleton_file(seqs[0], tmp_path / "a.json")
    dp.save_skeleton_file(dp.load_skeleton_file(tmp_path / "a.json"), tmp_path / "b.json")
    skel_ok = (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    net = DSTANet(small_net_config(), seed=3)
    cfg = small_train_config()
    cfg.epochs, cfg.lr_drop_epochs = 2, ()
    train(net, seqs, cfg)
    make_checkpoint(net, cfg).save(tmp_path / "m.ckpt")
    loaded = Checkpoint.load(tmp_path / "m.ckpt")
    loaded.save(tmp_path / "m2.ckpt")
    ckpt_ok = (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()

    replay, replay_cfg = net_from_checkpoint(loaded)
    mem = evaluate(net, seqs, cfg).table
    disk = evaluate(replay, seqs, replay_cfg).table
    diff = np.abs(mem.probs - disk.probs).max()
    ok = skel_ok and ckpt_ok and mem.ids == disk.ids and diff <= 1e-6
    report(10, ok, f"skeleton bytes equal {skel_ok}; checkpoint bytes equal {ckpt_ok}; "
                   f"max probability gap after reload {diff:.1e}")
