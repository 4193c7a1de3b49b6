"""Acceptance criteria, one test per criterion.

Every test records a one-line PASS/FAIL verdict that the terminal summary
prints (see ``conftest.py``).  Benchmarks are read from ``$LDC_DATA_DIR``,
falling back to ``data/`` in the repository or next to it.  A missing dataset
makes the criteria that need it fail; they are never skipped.
"""
import os
import time
from pathlib import Path

import numpy as np
import pytest

from ldcvsa import nn
from ldcvsa.cli import main as cli_main
from ldcvsa.dataio import load_dataset
from ldcvsa.deploy import (cdc_estimate, fold_bn, folded_bits, load_packed, memory_bits,
                           memory_footprint, pack_model, save_packed)
from ldcvsa.teacher import train_teacher
from ldcvsa.trainer import QATConfig, TrainConfig, train_ldc

import test_core
import test_nn

REPO = Path(__file__).resolve().parents[1]
ISOLET_DIMS = {"N": 617, "D": 64, "D_v": 16, "M": 256, "K": 26}


def data_root() -> Path:
    if os.environ.get("LDC_DATA_DIR"):
        return Path(os.environ["LDC_DATA_DIR"])
    for cand in (REPO / "data", REPO.parent / "data"):
        if cand.is_dir():
            return cand
    return REPO / "data"


def verdict(record_property, ok: bool, detail: str) -> None:
    record_property("acceptance", f"{'PASS' if ok else 'FAIL'}  {detail}")
    print(detail)
    assert ok, detail


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0


# --------------------------------------------------------------------------
# shared training runs (each at most once per session)
# --------------------------------------------------------------------------


@pytest.fixture(scope="session")
def fmnist():
    return load_dataset("fashionmnist", root=data_root())


@pytest.fixture(scope="session")
def isolet():
    return load_dataset("isolet", root=data_root())


def _fm_run(fmnist, on_epoch_end=None, **overrides):
    train, test = fmnist
    cfg = TrainConfig(**{"dim": 64, "loss_kind": "ce", **overrides})
    (model, report), secs = timed(train_ldc, cfg, train, test, eval_every=cfg.epochs,
                                  on_epoch_end=on_epoch_end)
    return {"model": model, "report": report, "seconds": secs}


@pytest.fixture(scope="session")
def fm_vanilla(fmnist):
    return _fm_run(fmnist, normalizer="none")


@pytest.fixture(scope="session")
def fm_bn(fmnist):
    trace = []

    def record(epoch, model):
        trace.append((epoch, model.F.frozen.copy(), model.F.values >= 0,
                      model.C.frozen.copy(), model.C.values >= 0))
    run = _fm_run(fmnist, on_epoch_end=record, normalizer="batch")
    run["trace"] = trace
    return run


@pytest.fixture(scope="session")
def fm_smoothed(fmnist):
    return _fm_run(fmnist, normalizer="batch", label_smoothing=0.5)


def _teacher_kd(train, test):
    (teacher, history), t_secs = timed(train_teacher, train, test=test)
    cfg = TrainConfig(dim=64, normalizer="batch", loss_kind="kd_kl", temperature=4.0)
    (model, report), secs = timed(train_ldc, cfg, train, test, teacher=teacher.logits(train.features),
                                  eval_every=cfg.epochs)
    return {"teacher_accuracy": history[-1]["test_accuracy"], "teacher_seconds": t_secs,
            "model": model, "report": report, "seconds": secs}


@pytest.fixture(scope="session")
def fm_kd(fmnist):
    return _teacher_kd(*fmnist)


@pytest.fixture(scope="session")
def isolet_kd(isolet):
    return _teacher_kd(*isolet)


def _packed_mismatches(model, test, tmp_path, tag):
    path = tmp_path / f"{tag}.ldcv"
    save_packed(pack_model(model), path)
    packed = load_packed(path).predict(test.features)
    return int(np.sum(packed != model.predict(test.features))), len(test)


# --------------------------------------------------------------------------
# criteria
# --------------------------------------------------------------------------


class TestAcceptance:
    def test_criterion_01_fold_soundness(self, record_property):
        t0 = time.perf_counter()
        rng = np.random.default_rng(2024)
        checked = bad = negative = 0
        for N in (29, 617, 784):
            y = np.arange(-N, N + 1)[:, None]
            for _ in range(200):
                D = 8
                bn = nn.BatchNorm.create(D)
                bn.running_mean = rng.normal(0, N / 4, D)
                bn.running_var = rng.uniform(0, N, D) ** 2 * rng.uniform(0, 1, D)
                bn.w = rng.normal(0, 1, D)
                bn.b = rng.normal(0, 1, D) * rng.choice([0.1, 10.0, 1000.0], D)
                alpha = rng.uniform(0.01, 1.0, D)
                real = nn.bn_eval(alpha * y, bn.running_mean, bn.running_var, bn.w, bn.b, bn.eps) >= 0
                folded = folded_bits(y, *fold_bn(bn, alpha, N))
                bad += int(np.sum(real != folded))
                checked += real.size
                negative += int(np.sum(bn.w < 0))
        secs = time.perf_counter() - t0
        verdict(record_property, bad == 0 and negative > 0 and secs < 10,
                f"fold soundness: {bad} mismatches in {checked} (y, d) pairs "
                f"({negative} negative-scale columns), {secs:.1f} s (< 10 s)")

    def test_criterion_02_gradient_fidelity(self, record_property):
        t0 = time.perf_counter()
        checks = [("linear", lambda: test_nn.TestLinear().test_gradients_match_finite_differences())]
        for seed in range(3):
            checks.append((f"batchnorm[{seed}]", lambda s=seed:
                           test_nn.TestBatchNorm().test_gradients_match_finite_differences(s)))
        checks.append(("ce", lambda: test_nn.TestSoftmaxCE().test_gradient_matches_finite_differences()))
        for T in (0.5, 4.0, 20.0):
            checks.append((f"kd_kl[T={T}]", lambda T=T:
                           test_nn.TestDistillationLosses().test_kd_matches_finite_differences(T)))
            checks.append((f"js[T={T}]", lambda T=T:
                           test_nn.TestDistillationLosses().test_js_matches_finite_differences(T)))
        for norm, seed in test_core.TestBackward.CASES:
            if norm in ("none", "batch"):
                checks.append((f"ldc[{norm},{seed}]", lambda n=norm, s=seed: test_core._check_surrogate(n, s)))
        failed = []
        for name, check in checks:
            try:
                check()
            except AssertionError as exc:
                failed.append(f"{name}: {exc}")
        secs = time.perf_counter() - t0
        verdict(record_property, not failed and secs < 30,
                f"gradient fidelity: {len(checks) - len(failed)}/{len(checks)} finite-difference "
                f"checks at step 1e-4 within rel. err 1e-4, {secs:.1f} s (< 30 s)"
                + (f"; failed {failed}" if failed else ""))

    def test_criterion_03_packed_oracle(self, record_property, request, fm_bn, fm_vanilla, fmnist,
                                        tmp_path):
        parts, ok = [], True
        test = fmnist[1]
        for tag, run in (("fashionmnist-bn", fm_bn), ("fashionmnist-plain", fm_vanilla)):
            bad, n = _packed_mismatches(run["model"], test, tmp_path, tag)
            ok &= bad == 0
            parts.append(f"{tag} {bad}/{n} mismatches")
        try:
            run = request.getfixturevalue("isolet_kd")
            bad, n = _packed_mismatches(run["model"], request.getfixturevalue("isolet")[1], tmp_path, "isolet")
            ok &= bad == 0
            parts.append(f"isolet {bad}/{n} mismatches")
        except (FileNotFoundError, ValueError) as exc:
            ok = False
            parts.append(f"isolet not evaluated ({exc})")
        verdict(record_property, ok, "packed inference oracle: " + "; ".join(parts))

    def test_criterion_04_isolet_accuracy(self, record_property, isolet_kd):
        acc = isolet_kd["report"].final["accuracy"]
        t_acc = isolet_kd["teacher_accuracy"]
        secs = isolet_kd["seconds"]
        verdict(record_property, acc >= 0.86 and t_acc >= 0.94 and secs <= 900,
                f"isolet LDC+BN+KD D=64: accuracy {100 * acc:.2f}% (>= 86.0), teacher "
                f"{100 * t_acc:.2f}% (>= 94), training {secs:.0f} s (<= 900 s)")

    def test_criterion_05_bn_ablation(self, record_property, fm_vanilla, fm_bn):
        a0 = 100 * fm_vanilla["report"].final["accuracy"]
        a1 = 100 * fm_bn["report"].final["accuracy"]
        secs = max(fm_vanilla["seconds"], fm_bn["seconds"])
        ok = 82.0 <= a0 <= 85.5 and 84.0 <= a1 <= 87.5 and a1 - a0 >= 0.8 and secs <= 2700
        verdict(record_property, ok,
                f"fashionmnist D=64 CE: vanilla {a0:.2f}% (in [82.0, 85.5]), BN {a1:.2f}% "
                f"(in [84.0, 87.5]), gap {a1 - a0:.2f} pts (>= 0.8), slowest run {secs:.0f} s (<= 2700 s)")

    def test_criterion_06_confidence_ordering(self, record_property, request, fm_kd):
        final = fm_kd["report"].final
        ht, hf = final["entropy_correct"], final["entropy_wrong"]
        ok = ht <= 0.10 and hf >= 0.15
        parts = [f"fashionmnist KD T=4: H_T {ht:.4f} (<= 0.10), H_F {hf:.4f} (>= 0.15), "
                 f"accuracy {100 * final['accuracy']:.2f}%, teacher {100 * fm_kd['teacher_accuracy']:.2f}%"]
        try:
            iso = request.getfixturevalue("isolet_kd")["report"].final
            ok &= iso["entropy_correct"] < iso["entropy_wrong"]
            parts.append(f"isolet H_T {iso['entropy_correct']:.4f} < H_F {iso['entropy_wrong']:.4f}")
        except (FileNotFoundError, ValueError) as exc:
            ok = False
            parts.append(f"isolet not evaluated ({exc})")
        verdict(record_property, ok, "confidence ordering: " + "; ".join(parts))

    def test_criterion_07_qat(self, record_property, fm_bn, fmnist):
        trace = fm_bn["trace"]
        start = TrainConfig().qat.start_epoch
        fracs = [float(fz.mean()) for _, fz, _, _, _ in trace]
        monotone = all(b >= a for a, b in zip(fracs[start - 1:], fracs[start:]))
        flips = unfrozen = 0
        f_mask, f_sign, c_mask, c_sign = trace[0][1], trace[0][2], trace[0][3], trace[0][4]
        for _, fz, fs, cz, cs in trace[1:]:
            flips += int(np.sum(fs[f_mask] != f_sign[f_mask])) + int(np.sum(cs[c_mask] != c_sign[c_mask]))
            unfrozen += int(np.sum(f_mask & ~fz)) + int(np.sum(c_mask & ~cz))
            f_sign = np.where(f_mask, f_sign, fs)
            c_sign = np.where(c_mask, c_sign, cs)
            f_mask, c_mask = fz, cz
        train, test = fmnist
        cfg = TrainConfig(dim=64, normalizer="batch", epochs=start + 3,
                          qat=QATConfig(threshold=1.0))
        _, report = train_ldc(cfg, train.subset(10000), eval_every=cfg.epochs)
        never = all(r["frozen_F"] == 0 and r["frozen_C"] == 0 for r in report.epochs)
        verdict(record_property, monotone and flips == unfrozen == 0 and never and fracs[-1] > 0,
                f"QAT: frozen fraction non-decreasing after epoch {start} ({fracs[start - 1]:.4f} -> "
                f"{fracs[-1]:.4f}), {flips} sign changes and {unfrozen} releases among frozen entries, f_th=1.0 froze "
                f"{'nothing' if never else 'something'} over {cfg.epochs} epochs")

    def test_criterion_08_memory(self, record_property):
        plain = memory_footprint(ISOLET_DIMS, False)
        folded = memory_footprint(ISOLET_DIMS, True)
        bits = memory_bits(ISOLET_DIMS, True)
        overhead = (bits["threshold"] + bits["flags"]) / sum(bits.values())
        ok = (abs(plain / 5.27 - 1) <= 0.10 and abs(folded / 5.35 - 1) <= 0.10
              and 0.005 <= overhead <= 0.03)
        verdict(record_property, ok,
                f"memory isolet D=64: plain {plain:.3f} KB (5.27 +/- 10%), folded {folded:.3f} KB "
                f"(5.35 +/- 10%), threshold overhead {100 * overhead:.2f}% (in [0.5, 3])")

    def test_criterion_09_cdc(self, record_property, fm_bn, fm_vanilla):
        values = [cdc_estimate({**ISOLET_DIMS, "D": D}) for D in (64, 256, 512)]
        folded, plain = cdc_estimate(pack_model(fm_bn["model"])), cdc_estimate(pack_model(fm_vanilla["model"]))
        ok = values[0] < values[1] < values[2] and folded == plain
        verdict(record_property, ok,
                f"CDC: {values} for D=64/256/512 (strictly increasing); fashionmnist BN-folded "
                f"{folded} == plain {plain}")

    def test_criterion_10_label_smoothing(self, record_property, fm_bn, fm_smoothed):
        a0 = 100 * fm_bn["report"].final["accuracy"]
        a5 = 100 * fm_smoothed["report"].final["accuracy"]
        verdict(record_property, a0 - a5 >= 1.0,
                f"label smoothing fashionmnist D=64: no smoothing {a0:.2f}% vs f=0.5 {a5:.2f}% "
                f"(gap {a0 - a5:.2f} >= 1.0)")

    def test_criterion_11_determinism(self, record_property, tmp_path, fmnist):
        args = ["train", "--dataset", "fashionmnist", "--data-dir", str(data_root()), "--dim", "64",
                "--norm", "batch", "--train-subset", "5000", "--epochs", "3", "--seed", "7"]
        outs = []
        for k in range(2):
            out = tmp_path / f"run{k}"
            assert cli_main([*args, "--out", str(out)]) == 0
            assert cli_main(["export", "--checkpoint", str(out / "model.npz"), "--out", str(out)]) == 0
            outs.append(out)
        names = ["model.npz", "report.json", "epochs.csv", "model.ldcv", "hardware.json"]
        same = [n for n in names if (outs[0] / n).read_bytes() == (outs[1] / n).read_bytes()]
        verdict(record_property, len(same) == len(names),
                f"determinism: {len(same)}/{len(names)} output files byte-identical across two "
                f"seeded runs ({', '.join(names)})")
