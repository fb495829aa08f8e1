"""The release gate: ten checks, one line of verdict each.

Everything here goes through public entry points (config, model, train,
CLI) at reduced scale; tolerances are fixed and the benchmark recipe is
pinned so reruns are byte-for-byte comparable.
"""

import itertools
import time

import numpy as np
import pytest

import conftest
from vepe.attention import AttentionConfig, DeformableAttention
from vepe.checkpoint import load_module, save_module
from vepe.cli import main, write_manifest
from vepe.config import RunConfig
from vepe.gradcheck import run_suite
from vepe.losses import hungarian_match, instance_consistency_loss
from vepe.metrics import runtime_probe
from vepe.model import VepeModel
from vepe.synth import generate_clip, save_clip, split_config
from vepe.temporal import STPD
from vepe.tensor import Tensor, no_grad, tape
from vepe.train import evaluate, tracking_agreement, train


def check(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {detail}"
    conftest.record_criterion(line)
    print(line)
    assert ok, line


# ------------------------------------------------------------- criterion 1

def test_criterion_1_gradient_suite():
    t0 = time.monotonic()
    results = run_suite(seed=0)
    elapsed = time.monotonic() - t0
    failed = [r.name for r in results if not r.passed]
    names = {r.name for r in results}
    composed = {"stpe_block", "stdme_block", "stpd_block"}
    ok = not failed and composed <= names and elapsed < 300.0
    check(1, ok, f"{len(results) - len(failed)}/{len(results)} checks, "
                 f"{elapsed:.1f}s (budget 300s)"
                 + (f", failed: {failed}" if failed else ""))


# ------------------------------------------------------------- criterion 2

def _random_attention(rng, frames):
    heads = int(rng.choice([1, 2, 4]))
    cfg = AttentionConfig(
        d_model=heads * int(rng.choice([4, 8])),
        heads=heads,
        levels=int(rng.integers(1, 4)),
        points=int(rng.integers(1, 5)),
        frames=frames,
        ffn_width=16)
    att = DeformableAttention(rng, cfg, frames=frames)
    att.offset_head.weight.data = 0.3 * rng.standard_normal(
        att.offset_head.weight.shape)
    att.weight_head.weight.data = rng.standard_normal(
        att.weight_head.weight.shape)
    return att, cfg


def _random_memories(rng, cfg, frames):
    side = int(rng.integers(3, 7))
    shapes = []
    for _ in range(cfg.levels):
        shapes.append((side, side))
        side = max(1, side // 2)
    mems = [[Tensor(rng.standard_normal((h, w, cfg.d_model)))
             for h, w in shapes] for _ in range(frames)]
    return mems, shapes


def test_criterion_2_temporal_sampling_invariants():
    rng = np.random.default_rng(2024)
    worst_sum = 0.0
    worst_eq = 0.0
    for _ in range(100):
        frames = int(rng.integers(1, 4))
        att, cfg = _random_attention(rng, frames)
        nq = int(rng.integers(1, 7))
        q = Tensor(rng.standard_normal((nq, cfg.d_model)))
        w = att.sampling_weights(q)
        worst_sum = max(worst_sum, float(np.abs(w.sum(axis=-1) - 1.0).max()))

        att1, cfg1 = _random_attention(rng, 1)
        mems, shapes = _random_memories(rng, cfg1, 1)
        refs = Tensor(rng.uniform(0, 1, size=(nq, 2)))
        q1 = Tensor(rng.standard_normal((nq, cfg1.d_model)))
        with no_grad():
            single = att1(q1, mems, shapes, refs)
            multi = att1(q1, mems, shapes, refs, force_general=True)
        worst_eq = max(worst_eq, float(np.abs(single.data - multi.data).max()))
    tape().clear()
    ok = worst_sum < 1e-12 and worst_eq < 1e-12
    check(2, ok, f"100 configs: max |sum-1| {worst_sum:.2e}, "
                 f"max single-frame gap {worst_eq:.2e} (tol 1e-12)")


# ------------------------------------------------------------- criterion 3

def _brute_force_min_cost(cost: np.ndarray) -> float:
    P, G = cost.shape
    k = min(P, G)
    best = np.inf
    if P >= G:
        for rows in itertools.permutations(range(P), k):
            best = min(best, sum(cost[r, c] for c, r in enumerate(rows)))
    else:
        for cols in itertools.permutations(range(G), k):
            best = min(best, sum(cost[r, c] for r, c in enumerate(cols)))
    return float(best)


def test_criterion_3_matching_oracle():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(500):
        P = int(rng.integers(1, 9))
        G = int(rng.integers(1, 9))
        cost = rng.uniform(-5.0, 5.0, size=(P, G))
        got = hungarian_match(cost).total_cost
        worst = max(worst, abs(got - _brute_force_min_cost(cost)))
    ok = worst < 1e-12
    check(3, ok, f"500 matrices up to 8x8: max |cost gap| {worst:.2e}")


# ------------------------------------------------------------- criterion 4

def test_criterion_4_refinement_fixed_point():
    rng = np.random.default_rng(11)
    cfg = AttentionConfig(d_model=32, heads=2, levels=2, points=2,
                          frames=1, ffn_width=64)
    stpd = STPD(rng, cfg, n_joints=15, layers=3)
    maps = [Tensor(rng.standard_normal((8, 8, 32))),
            Tensor(rng.standard_normal((4, 4, 32)))]
    shapes = [(8, 8), (4, 4)]
    queries = Tensor(rng.standard_normal((6, 32)))
    kps = Tensor(rng.uniform(0.02, 0.98, size=(6, 15, 2)))
    with no_grad():
        _, per_layer, _ = stpd(queries, maps, shapes, kps)
    tape().clear()
    exact = [bool(np.array_equal(layer.data, kps.data))
             for layer in per_layer]
    ok = len(per_layer) == 3 and all(exact)
    check(4, ok, f"zero-init heads: layers exact = {exact}")


# ------------------------------------------------------------- criterion 5

def _cosine_dist(a, b):
    return 1.0 - a @ b / (np.linalg.norm(a) * np.linalg.norm(b))


def test_criterion_5_consistency_loss_properties():
    rng = np.random.default_rng(13)
    checked = 0
    zero_cases = pos_cases = 0
    worst_scale = 0.0
    ok = True
    while checked < 1000:
        n = int(rng.integers(4, 10))
        margin = float(rng.uniform(0.05, 0.6))
        if checked % 4 == 0:
            # two tight opposite clusters: anchor/positive nearly parallel,
            # negative nearly antiparallel, so every hinge lands at zero
            center = rng.standard_normal(6)
            half = n // 2
            emb = np.concatenate([
                center + 0.01 * rng.standard_normal((half, 6)),
                -center + 0.01 * rng.standard_normal((n - half, 6))])
            emb = Tensor(emb)
            trips = [(int(rng.integers(half)),
                      int(rng.integers(half)),
                      half + int(rng.integers(n - half)))
                     for _ in range(5)]
            trips = [t for t in trips if t[0] != t[1]] or [(0, 1, half)]
        else:
            emb = Tensor(rng.standard_normal((n, 6)))
            trips = [tuple(rng.choice(n, size=3, replace=False))
                     for _ in range(5)]
        loss = instance_consistency_loss(emb, trips, margin).item()
        hinges = [max(0.0, _cosine_dist(emb.data[a], emb.data[p])
                      - _cosine_dist(emb.data[a], emb.data[ng]) + margin)
                  for a, p, ng in trips]
        ok = ok and loss >= 0.0
        if max(hinges) == 0.0:
            ok = ok and loss == 0.0
            zero_cases += 1
        else:
            ok = ok and loss > 0.0
            ok = ok and abs(loss - np.mean(hinges)) < 1e-9
            pos_cases += 1

        scaled = emb.data.copy()
        row = int(rng.integers(n))
        scaled[row] *= float(np.exp(rng.uniform(-2, 2)))
        loss2 = instance_consistency_loss(Tensor(scaled), trips,
                                          margin).item()
        worst_scale = max(worst_scale, abs(loss - loss2))
        checked += len(trips)
    tape().clear()
    ok = ok and worst_scale < 1e-12 and zero_cases > 0 and pos_cases > 0
    check(5, ok, f"{checked} triplets ({zero_cases} all-satisfied sets, "
                 f"{pos_cases} violated): max scale drift {worst_scale:.2e}")


# --------------------------------------------- criteria 6/7/9 shared recipe
#
# Reduced-scale recipe: 48px frames, 40 queries, 2-3 persons. Training data
# mixes all four splits; the benchmark holds out 200 fresh degraded clips.

BENCH = dict(image_size=48, n_queries=40, persons=(2, 3), seed=11)
SPATIAL_EPOCHS = 60
TEMPORAL_EPOCHS = 36
TRACK_EPOCHS = 10
TRAIN_PER_SPLIT = 28
BENCH_COUNTS = {"occlusion": 67, "blur": 67, "fast": 66}
BENCH_SEEDS = {"occlusion": 5000, "blur": 6000, "fast": 7000}


def _gen_split(split, count, seed0):
    sc = split_config(RunConfig(**BENCH).synth_config(), split)
    return [generate_clip(sc, seed=seed0 + i) for i in range(count)]


@pytest.fixture(scope="session")
def benchmark(tmp_path_factory):
    t0 = time.monotonic()
    root = tmp_path_factory.mktemp("bench")
    train_clips = (_gen_split("clean", TRAIN_PER_SPLIT, 1000)
                   + _gen_split("occlusion", TRAIN_PER_SPLIT, 2000)
                   + _gen_split("blur", TRAIN_PER_SPLIT, 3000)
                   + _gen_split("fast", TRAIN_PER_SPLIT, 4000))
    bench_clips = []
    for split, count in BENCH_COUNTS.items():
        bench_clips += _gen_split(split, count, BENCH_SEEDS[split])

    cfg_sp = RunConfig(**BENCH, epochs=SPATIAL_EPOCHS)
    spatial = VepeModel(cfg_sp)
    train(spatial, train_clips, cfg_sp, "spatial")
    sp_ckpt = root / "spatial.ckpt"
    save_module(sp_ckpt, spatial)
    base_report, _ = evaluate(spatial, bench_clips, cfg_sp, "spatial", 0.1)

    scores = {"baseline": base_report.mean_ap}
    variants = {"full": {},
                "stpe_only": {"use_stdme": False, "use_stpd": False}}
    full_model = full_cfg = None
    for name, overrides in variants.items():
        cfg_t = RunConfig(**BENCH, epochs=TEMPORAL_EPOCHS, **overrides)
        model = VepeModel(cfg_t)
        load_module(sp_ckpt, model)
        train(model, train_clips, cfg_t, "temporal")
        report, _ = evaluate(model, bench_clips, cfg_t, "temporal", 0.1)
        scores[name] = report.mean_ap
        if name == "full":
            full_model, full_cfg = model, cfg_t
            save_module(root / "full.ckpt", model)

    # a small on-disk slice of the benchmark for the CLI sweep
    sweep_dir = root / "sweep-data"
    sweep_dir.mkdir()
    names = []
    for clip in bench_clips[:5] + bench_clips[67:72] + bench_clips[134:139]:
        name = f"{clip.clip_id}.clip"
        save_clip(clip, sweep_dir / name)
        names.append(name)
    write_manifest(sweep_dir, "bench", len(names), full_cfg, names)
    (root / "full-config.json").write_text(full_cfg.to_json())

    return {"scores": scores, "root": root, "sp_ckpt": sp_ckpt,
            "elapsed": time.monotonic() - t0}


def test_criterion_6_directional_ablation(benchmark):
    s = benchmark["scores"]
    gap = (s["full"] - s["baseline"]) * 100.0
    hours = benchmark["elapsed"] / 3600.0
    ok = (s["full"] > s["stpe_only"] > s["baseline"]
          and gap >= 3.0 and hours <= 2.0)
    check(6, ok, f"mAP full {100 * s['full']:.1f} > stpe-only "
                 f"{100 * s['stpe_only']:.1f} > baseline "
                 f"{100 * s['baseline']:.1f}; gap {gap:.1f} AP (need >= 3); "
                 f"{hours:.2f}h (budget 2h)")


def test_criterion_7_threshold_sweep_shape(benchmark, capfd):
    root = benchmark["root"]
    args = ["sweep-threshold", "--data", str(root / "sweep-data"),
            "--ckpt", str(root / "full.ckpt"),
            "--config", str(root / "full-config.json"),
            "--thresholds", "0.1,0.2,0.3,0.4,0.5"]
    code = main(args)
    out = capfd.readouterr().out.splitlines()
    header_ok = out[0] == "threshold mAP retained"
    rows = {float(r.split()[0]): float(r.split()[1]) for r in out[1:6]}
    interior = max(rows[t] for t in (0.2, 0.3, 0.4))
    extremes = max(rows[0.1], rows[0.5])
    ok = code == 0 and header_ok and interior >= extremes - 1.0
    check(7, ok, f"best interior {interior:.1f} AP vs extremes "
                 f"{extremes:.1f} AP (allowed slack 1.0); "
                 f"rows {sorted(rows)}")


# ------------------------------------------------------------- criterion 8

def test_criterion_8_runtime_independent_of_instances():
    cfg = RunConfig(image_size=48, n_queries=16, d_model=32, heads=2,
                    points=2, ffn_width=64, enc_layers=1, dec_layers=1,
                    stpe_layers=1, stdme_layers=1, stpd_layers=2,
                    seed=0)
    model = VepeModel(cfg)

    def make_input(count):
        c = RunConfig(**{**BENCH, "n_queries": 16, "persons": (count, count)})
        return generate_clip(c.synth_config(), seed=123 + count)

    def forward(clip):
        with no_grad():
            model.forward_clip(clip.frames, 1)
        tape().clear()

    table = runtime_probe(make_input, forward, [2, 12], repeats=7)
    times = dict(table.rows)
    ratio = times[12] / times[2]
    ok = ratio < 1.2
    check(8, ok, f"median forward 2p {1000 * times[2]:.0f}ms, "
                 f"12p {1000 * times[12]:.0f}ms, ratio {ratio:.3f} (< 1.2)")


# ------------------------------------------------------------- criterion 9

def test_criterion_9_instance_tracking(benchmark):
    cfg = RunConfig(image_size=48, n_queries=40, persons=(2, 2), seed=11,
                    epochs=TRACK_EPOCHS)
    clips = [generate_clip(cfg.synth_config(), seed=9000 + i)
             for i in range(20)]
    model = VepeModel(cfg)
    load_module(benchmark["sp_ckpt"], model)
    train(model, clips, cfg, "temporal")
    rate = tracking_agreement(model, clips, cfg)
    ok = rate >= 0.9
    check(9, ok, f"argmax link agreement {100 * rate:.1f}% "
                 f"on 2-person split (need >= 90%)")


# ------------------------------------------------------------ criterion 10

def test_criterion_10_reproducibility(tmp_path):
    tiny = ["--image-size", "32", "--n-queries", "8", "--d-model", "16",
            "--heads", "2", "--points", "2", "--ffn-width", "32",
            "--enc-layers", "1", "--dec-layers", "1", "--stpe-layers", "1",
            "--stdme-layers", "1", "--stpd-layers", "2", "--min-keep", "3",
            "--persons", "2,2", "--epochs", "2", "--batch-size", "4"]
    digests = []
    for run in ("a", "b"):
        data = tmp_path / run / "data"
        out = tmp_path / run / "out"
        report = tmp_path / run / "report.txt"
        assert main(["generate", "--out", str(data), "--count", "3"]
                    + tiny) == 0
        assert main(["train", "--data", str(data), "--out", str(out),
                     "--mode", "spatial"] + tiny) == 0
        assert main(["eval", "--data", str(data), "--ckpt",
                     str(out / "model.ckpt"), "--mode", "spatial",
                     "--report", str(report)] + tiny) == 0
        digests.append(((out / "model.ckpt").read_bytes(),
                        (out / "train.log").read_bytes(),
                        report.read_bytes()))
    same = [digests[0][i] == digests[1][i] for i in range(3)]
    ok = all(same)
    check(10, ok, "checkpoint/log/report byte-identical across seeded "
                  f"reruns = {same}")
