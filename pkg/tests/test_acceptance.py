"""One test per acceptance criterion; the terminal summary prints a PASS/FAIL line for each."""

import math
import time

import numpy as np
import pytest

from shrinksv import tensor as T
from shrinksv.amsoftmax import AmSoftmax, grad_am_softmax_check
from shrinksv.audio_io import Trial, Waveform, write_trial_list
from shrinksv.augment import RirFilter, apply_rir, mix_at_snr, scaled_noise
from shrinksv.cli import main
from shrinksv.shrinkage import (ModelConfig, PoolingHead, RsbuCw, SpeakerNet, Trunk, TrunkConfig, asp_pool,
                                rsbu_forward, sap_pool, soft_threshold)
from shrinksv.synthetic import all_pairs_trials, make_corpus, speaker_recipes, write_corpus
from shrinksv.tensor import BatchNorm, Tensor, grad_check
from shrinksv.trainer import TrainConfig, lr_at_epoch, train
from shrinksv.verification import (ScoreSet, compute_eer, compute_min_dcf, detection_cost, embed_crops, fuse,
                                   minmax_normalize, normalize_and_fuse, pair_score, read_scores)


def leaf(a):
    return Tensor(a, requires_grad=True)


def busy_block(rng, in_ch, out_ch, stride):
    b = RsbuCw(in_ch, out_ch, stride, rng)
    for bn in [m for m in b.modules() if isinstance(m, BatchNorm)]:
        bn.gamma.data[:] = rng.uniform(0.5, 1.5, bn.gamma.shape)
        bn.beta.data[:] = rng.uniform(-0.2, 0.2, bn.beta.shape)
    return b


def test_gradcheck_suite():
    """1. finite-difference gradcheck of every layer, an RSBU-CW block, SAP/ASP and AM-Softmax < 1e-4 in < 60 s"""
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    errors = {}
    errors["linear"] = grad_check(T.linear, [leaf(rng.standard_normal((3, 5))), leaf(rng.standard_normal((4, 5))),
                                             leaf(rng.standard_normal(4))])
    for stride, k, pad in [(1, 3, 1), (2, 3, 1), (2, 1, 0)]:
        errors[f"conv{k}x{k}/s{stride}"] = grad_check(
            lambda x, w: T.conv2d(x, w, stride, pad),
            [leaf(rng.standard_normal((2, 3, 6, 5))), leaf(rng.standard_normal((4, 3, k, k)))])
    away = rng.uniform(0.1, 1, (4, 5)) * rng.choice([-1, 1], (4, 5))
    errors["relu"] = grad_check(T.relu, [leaf(away)])
    errors["abs"] = grad_check(T.abs_op, [leaf(away)])
    errors["sigmoid"] = grad_check(T.sigmoid, [leaf(rng.standard_normal((3, 4)))])
    x4 = rng.standard_normal((2, 3, 4, 5))
    errors["mean"] = grad_check(lambda x: T.mean(x, 3), [leaf(x4)])
    errors["gap"] = grad_check(T.global_avg_pool, [leaf(x4)])
    errors["reshape"] = grad_check(lambda x: T.reshape(x, (2, 60)), [leaf(x4)])
    errors["transpose"] = grad_check(lambda x: T.transpose(x, (0, 2, 1, 3)), [leaf(x4)])
    errors["add"] = grad_check(lambda a, b: a + b, [leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal(4))])
    errors["mul"] = grad_check(lambda a, b: a * b, [leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((3, 1)))])
    for training in (True, False):
        bn = BatchNorm(3).train(training)
        bn.running_var[:] = rng.uniform(0.5, 2, 3)
        bn.gamma.data[:] = rng.standard_normal(3)
        errors[f"batch_norm/{training}"] = grad_check(
            lambda x, g, b: T.batch_norm(x, g, b, bn.running_mean, bn.running_var, training),
            [leaf(rng.standard_normal((2, 3, 4, 4))), bn.gamma, bn.beta])
    xs = rng.uniform(0.2, 2, (2, 3, 4, 4)) * rng.choice([-1, 1], (2, 3, 4, 4))
    errors["soft_threshold"] = grad_check(soft_threshold, [leaf(xs), leaf(rng.uniform(0.01, 0.1, (2, 3)))])
    for stride, out_ch in [(1, 3), (2, 4)]:
        b = busy_block(rng, 3, out_ch, stride)
        errors[f"rsbu/s{stride}"] = grad_check(lambda x, *_: rsbu_forward(b, x),
                                               [leaf(rng.standard_normal((2, 3, 6, 6)))] + list(b.parameters().values()),
                                               eps=1e-6)
    for mode, pool in [("SAP", sap_pool), ("ASP", asp_pool)]:
        head = PoolingHead(mode, 6, rng, attention_dim=5)
        head.att_bias.data[:] = rng.standard_normal(5)
        errors[mode] = grad_check(lambda x, *_: pool(x, head),
                                  [leaf(rng.standard_normal((2, 5, 6))), head.att_weight, head.att_bias, head.context])
    errors["am_softmax"] = max(grad_am_softmax_check(seed=s) for s in range(3))
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    assert errors[worst] < 1e-4, (worst, errors[worst])
    assert elapsed < 60, elapsed


def test_soft_threshold_algebra():
    """2. soft-threshold branch table, oddness, dead zone, shrinkage and tau = 0 identity on a 10^4 grid, exact"""
    xs = np.linspace(-5, 5, 100)
    taus = np.linspace(0, 4, 100)
    x, tau = np.meshgrid(xs, taus, indexing="ij")
    f = lambda v, t: soft_threshold(Tensor(v[None]), Tensor(t[None])).data[0]
    out = np.array([f(x[:, j], np.asarray(taus[j])) for j in range(100)]).T
    expected = np.where(x > tau, x - tau, np.where(x < -tau, x + tau, 0.0))
    assert np.array_equal(out, expected)
    neg = np.array([f(-x[:, j], np.asarray(taus[j])) for j in range(100)]).T
    assert np.array_equal(neg, -out)
    assert np.all(out[np.abs(x) <= tau] == 0)
    assert np.all(np.abs(out) <= np.abs(x))
    assert np.array_equal(f(xs, np.asarray(0.0)), xs)


def test_shrinkage_reduction():
    """3. zeroed threshold sub-network makes rsbu_forward equal a plain residual block bit-for-bit (f64)"""
    rng = np.random.default_rng(3)
    for stride, in_ch, out_ch in [(1, 4, 4), (2, 4, 8)]:
        for training in (True, False):
            b = busy_block(rng, in_ch, out_ch, stride).train(training)
            b.fc2.weight.data[:] = 0.0
            b.fc2.bias.data[:] = -1e6  # sigmoid underflows to exactly 0
            x = Tensor(rng.standard_normal((3, in_ch, 10, 8)))
            r = b.bn2(b.conv2(T.relu(b.bn1(b.conv1(x)))))
            plain = T.relu(T.add(r, b.shortcut(x)))
            assert np.array_equal(rsbu_forward(b, x).data, plain.data)


def test_shape_trace_h_config():
    """4. H-config stage shapes for L = 200: 200x64x32, 100x32x64, 50x16x128, 25x8x256, flatten 25x2048"""
    rng = np.random.default_rng(4)
    trunk = Trunk(TrunkConfig.preset("H"), rng).eval()
    trace = []
    with T.no_grad():
        frames = trunk(Tensor(rng.standard_normal((1, 1, 200, 64))), trace)
    assert trace[1:] == [(200, 64, 32), (100, 32, 64), (50, 16, 128), (25, 8, 256)]
    assert frames.shape == (1, 25, 2048)


def test_parameter_counts():
    """5. parameter counts Q ~ 1.4M and H ~ 8.0M within 20%"""
    rng = np.random.default_rng(5)
    for variant, target in [("Q", 1.4e6), ("H", 8.0e6)]:
        for pooling in ("SAP", "ASP"):
            n = SpeakerNet(ModelConfig.preset(variant, pooling), rng).num_parameters()
            assert abs(n - target) <= 0.2 * target, (variant, pooling, n)


def brute_force(scores, labels, p=0.05):
    n_t, n_n = sum(labels), len(labels) - sum(labels)
    pts = []
    for th in sorted(set(scores)) + [math.inf]:
        miss = sum(1 for s, l in zip(scores, labels) if l and s < th) / n_t
        fa = sum(1 for s, l in zip(scores, labels) if not l and s >= th) / n_n
        pts.append((miss, fa))
    k = next(i for i, (m, f) in enumerate(pts) if m >= f)
    if pts[k][0] == pts[k][1]:
        eer = pts[k][0]
    else:
        (m0, f0), (m1, f1) = pts[k - 1], pts[k]
        t = (f0 - m0) / ((f0 - m0) - (f1 - m1))
        eer = m0 + t * (m1 - m0)
    return eer, min(1.0 * m * p + 1.0 * f * (1 - p) for m, f in pts)


def test_metric_oracle_equivalence():
    """6. EER/minDCF equal a brute-force threshold sweep on 100 random sets; DCF spot values 0.05, 0.95, 0.195"""
    rng = np.random.default_rng(6)
    for k in range(100):
        n = int(rng.integers(2, 201))
        labels = rng.random(n) < 0.3
        labels[:2] = [True, False]
        scores = rng.standard_normal(n) + labels
        if k % 2:
            scores = np.round(scores, 1)
        eer, dcf = brute_force(scores.tolist(), labels.tolist())
        assert compute_eer(scores, labels)[0] == eer
        assert compute_min_dcf(scores, labels)[0] == dcf
    assert detection_cost(1.0, 0.0) == 0.05
    assert detection_cost(0.0, 1.0) == 0.95
    assert detection_cost(0.1, 0.2) == 0.1 * 0.05 + 0.2 * 0.95
    assert abs(detection_cost(0.1, 0.2) - 0.195) < 1e-16


def test_rank_invariance():
    """7. EER and minDCF unchanged to 1e-12 under 20 random strictly increasing transforms"""
    rng = np.random.default_rng(7)
    for _ in range(20):
        n = int(rng.integers(10, 150))
        labels = rng.random(n) < 0.4
        labels[:2] = [True, False]
        scores = rng.uniform(-1, 1, n) + 0.5 * labels
        a, c, p = rng.uniform(0.5, 3), rng.uniform(-2, 2), rng.choice([1.0, 3.0, 5.0])
        g = a * np.sign(scores) * np.abs(scores) ** p + c + rng.uniform(0, 1) * np.tanh(scores)
        assert abs(compute_eer(g, labels)[0] - compute_eer(scores, labels)[0]) <= 1e-12
        assert abs(compute_min_dcf(g, labels)[0] - compute_min_dcf(scores, labels)[0]) <= 1e-12


def test_snr_fidelity():
    """8. mix_at_snr hits the requested SNR within 1e-9 dB on 100 cases; unit-impulse RIR is an exact identity"""
    rng = np.random.default_rng(8)
    for _ in range(100):
        n = int(rng.integers(100, 5000))
        s = Waveform(rng.standard_normal(n) * rng.uniform(0.01, 1))
        noise = Waveform(rng.standard_normal(int(rng.integers(50, 6000))))
        snr = rng.uniform(-5, 30)
        added = mix_at_snr(s, noise, snr).samples - s.samples
        measured = 10 * np.log10(np.mean(s.samples ** 2) / np.mean(scaled_noise(s, noise, snr) ** 2))
        assert abs(measured - snr) < 1e-9
        assert np.allclose(added, scaled_noise(s, noise, snr), rtol=0, atol=1e-12)
        assert np.array_equal(apply_rir(s, RirFilter(np.array([1.0]))).samples, s.samples)
        assert np.array_equal(apply_rir(s, RirFilter(np.array([1.0, 0.0, 0.0]))).samples, s.samples)


def _smoke_run():
    recipes = speaker_recipes(8, seed=2020)
    train_set = make_corpus(recipes, 4, 40000, seed=1)
    rng = np.random.default_rng(9)
    model = SpeakerNet(ModelConfig.preset("Q", "SAP", stage_channels=(8, 8, 16, 16),
                                          blocks_per_stage=(1, 1, 1, 1)), rng)
    loss = AmSoftmax(512, 8, rng)
    result = train(TrainConfig(batch_size=16, epochs=30, seed=9), model, loss, train_set)
    return model, result


@pytest.mark.slow
def test_end_to_end_smoke():
    """9. 8 synthetic speakers, tiny trunk, 30 epochs: train acc >= 0.95, trial EER <= 10%, < 10 min, rerun identical"""
    start = time.perf_counter()
    model, result = _smoke_run()
    assert result.history[-1][4] >= 0.95
    held_out = make_corpus(speaker_recipes(8, seed=2020), 3, 64000, seed=2)
    crops = [embed_crops(model, w) for w, _ in held_out]
    labels = [k for _, k in held_out]
    trials = all_pairs_trials(list(range(len(held_out))), labels)
    scores = np.array([pair_score(crops[t.enroll_utt], crops[t.test_utt]) for t in trials])
    eer, _ = compute_eer(scores, np.array([t.is_target for t in trials]))
    print(f"final acc {result.history[-1][4]:.3f}, held-out EER {100 * eer:.2f}% over {len(trials)} trials")
    assert eer <= 0.10
    model2, again = _smoke_run()
    assert again.history == result.history
    for (name, p), (_, q) in zip(model.named_parameters(), model2.named_parameters()):
        assert np.array_equal(p.data, q.data), name
    assert time.perf_counter() - start < 600


def test_lr_schedule():
    """10. lr_at_epoch equals 0.001 * 0.9^floor(e/2) for e in [0, 200]; epoch 0 gives 0.001"""
    cfg = TrainConfig()
    assert lr_at_epoch(cfg, 0) == 0.001
    for e in range(201):
        assert lr_at_epoch(cfg, e) == 0.001 * 0.9 ** (e // 2)


def test_scoring_protocol(tmp_path):
    """11. pair_score equals the 100-term loop oracle < 1e-12; self-trial scores 1.0 +- 1e-6 through the CLI"""
    rng = np.random.default_rng(11)
    for _ in range(5):
        e, t = rng.standard_normal((10, 512)), rng.standard_normal((10, 512))
        total = sum(float(a @ b) / math.sqrt(float(a @ a) * float(b @ b)) for a in e for b in t)
        assert abs(pair_score(e, t) - total / 100) < 1e-12
    root = tmp_path / "wavs"
    rel = write_corpus(root, make_corpus(speaker_recipes(2, seed=3), 2, 16000, seed=3))
    cfg = tmp_path / "train.cfg"
    cfg.write_text(f"dataset={root}\noutput={tmp_path / 'run'}\nchannels=8,8,16,16\nblocks=1,1,1,1\n"
                   "epochs=1\nbatch_size=4\ncrop_len=8000\n")
    assert main(["train", "--config", str(cfg)]) == 0
    write_trial_list(tmp_path / "trials.txt", [Trial(True, rel[0], rel[0]), Trial(False, rel[0], rel[2])])
    assert main(["score", "--checkpoint", str(tmp_path / "run" / "epoch_000.ckpt"),
                 "--trials", str(tmp_path / "trials.txt"), "--wav-root", str(root),
                 "--output", str(tmp_path / "scores.txt")]) == 0
    assert abs(read_scores(tmp_path / "scores.txt").scores[0] - 1.0) <= 1e-6


def test_fusion():
    """12. fusion defaults to 0.3/0.7 after min-max normalisation; convexity and fixed points exact"""
    ones, zeros = ScoreSet.from_arrays(np.ones(5)), ScoreSet.from_arrays(np.zeros(5))
    assert np.array_equal(fuse(ones, zeros).scores, np.full(5, 0.3))
    rng = np.random.default_rng(12)
    raw_a, raw_b = ScoreSet.from_arrays(rng.normal(3, 2, 50)), ScoreSet.from_arrays(rng.normal(-1, 0.1, 50))
    na, nb = minmax_normalize(raw_a), minmax_normalize(raw_b)
    fused = normalize_and_fuse(raw_a, raw_b)
    assert np.array_equal(fused.scores, fuse(na, nb, 0.3, 0.7).scores)
    assert np.all(fused.scores >= np.minimum(na.scores, nb.scores))
    assert np.all(fused.scores <= np.maximum(na.scores, nb.scores))
    assert np.array_equal(normalize_and_fuse(raw_a, raw_a).scores, na.scores)
    assert np.array_equal(fuse(na, nb, 1.0, 0.0).scores, na.scores)
    assert np.array_equal(fuse(na, nb, 0.0, 1.0).scores, nb.scores)
