"""Acceptance gate: one test per criterion, each printing a PASS/FAIL/SKIP line.

Criteria 5, 8 and the trained-model half of 7 need the CIFAR-10 binary archive.
Point ``SCS_CIFAR10_DIR`` at it to run them; trained models are cached under
``SCS_ACCEPTANCE_CACHE`` (default: a pytest temporary directory) so the three
criteria share one training sweep. Run standalone with
``python tests/test_acceptance.py``.
"""

import csv
import os
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import pytest

from sharpcos import analysis as A
from sharpcos import functional as F
from sharpcos.cli import main as cli_main
from sharpcos.data import TEMPLATE_1D, AugmentationConfig, Dataset, load_cifar10, subset
from sharpcos.models import LayerVariantConfig, build_model
from sharpcos.tensor import no_grad
from sharpcos.train import (TELEMETRY_HEADER, TrainConfig, evaluate, read_telemetry,
                            restore_model, train)

from conftest import ACCEPTANCE_LINES, make_dataset

CIFAR_DIR = os.environ.get("SCS_CIFAR10_DIR", "")
NO_CIFAR = ("CIFAR-10 binary archive not available; set SCS_CIFAR10_DIR to the directory "
            "holding data_batch_*.bin and test_batch.bin")
SEEDS = (0, 1, 2)
DESK = dict(arch_family="rohrer_100k", pooling="maxpool", normalization="none")
DESK_VARIANTS = {          # label -> (layer kind, activation)
    "conv_relu": ("conv", "relu"),
    "scs_none": ("scs", "none"),
    "conv_none": ("conv", "none"),
    "cossim_relu": ("cossim", "relu"),
    "cossim_none": ("cossim", "none"),
}


def verdict(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n} {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def skipped(n: int, title: str, reason: str) -> None:
    line = f"[SKIP] criterion {n} {title}: {reason}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    pytest.skip(reason)


# -- 1 ------------------------------------------------------------------------------
def test_criterion_1_gradient_audit():
    t0 = time.process_time()
    report = A.gradcheck_suite(instances=20, seed=0)
    elapsed = time.process_time() - t0
    worst = max(report.worst(t) for t in report.errors)
    for line in report.lines():
        print("   ", line)
    verdict(1, "gradient audit", report.passed and len(report.errors) == 10 and elapsed < 120,
            f"10 ops x 20 instances, worst rel err {worst:.2e} (< 1e-4), {elapsed:.1f} s CPU (< 120)")


# -- 2 ------------------------------------------------------------------------------
def direct_conv(x, w):
    n, _, h, wd = x.shape
    o, _, kh, kw = w.shape
    out = np.zeros((n, o, h - kh + 1, wd - kw + 1))
    for r in range(out.shape[2]):
        for s in range(out.shape[3]):
            out[:, :, r, s] = np.einsum("nchw,ochw->no", x[:, :, r:r + kh, s:s + kw], w)
    return out


def test_criterion_2_reduction_identities():
    rng = np.random.default_rng(2)
    worst = {"scs=cossim": 0.0, "sdp=conv": 0.0, "maxabs=max": 0.0, "conv=direct": 0.0}
    for _ in range(50):
        c, o, k = rng.integers(1, 5), rng.integers(1, 6), int(rng.choice([1, 2, 3]))
        x = rng.normal(size=(2, c, 7, 7)) * rng.uniform(0.1, 10)
        w = rng.normal(size=(o, c, k, k))
        worst["scs=cossim"] = max(worst["scs=cossim"], np.max(np.abs(
            F.scs2d(x, w, 1.0, 0.0).data - F.cossim2d(x, w, 0.0).data)))
        worst["sdp=conv"] = max(worst["sdp=conv"], np.max(np.abs(
            F.sdp2d(x, w, 1.0).data - F.conv2d(x, w).data)))
        worst["maxabs=max"] = max(worst["maxabs=max"], np.max(np.abs(
            F.maxabspool2d(np.abs(x)).data - F.maxpool2d(np.abs(x)).data)))
        worst["conv=direct"] = max(worst["conv=direct"], np.max(np.abs(
            F.conv2d(x, w).data - direct_conv(x, w))))
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(2, "reduction identities", all(v <= 1e-12 for v in worst.values()),
            f"max abs diff over 50 draws: {detail} (<= 1e-12)")


# -- 3 ------------------------------------------------------------------------------
def test_criterion_3_bounded_and_scale_invariant():
    rng = np.random.default_rng(3)
    max_abs, max_shift = 0.0, 0.0
    for _ in range(1000):
        c, k = int(rng.integers(1, 4)), int(rng.choice([1, 3]))
        patch = rng.normal(size=(1, c, k, k)) * 10.0 ** rng.uniform(-6, 3)
        kernel = rng.normal(size=(2, c, k, k)) * 10.0 ** rng.uniform(-3, 3)
        p, q = rng.uniform(0.1, 5.0, size=2), float(rng.choice([0.0, 10.0 ** rng.uniform(-8, 0)]))
        base = F.scs2d(patch, kernel, p, q).data
        max_abs = max(max_abs, np.max(np.abs(base)))
        for cscale in (0.1, 10.0):
            shift = np.max(np.abs(F.scs2d(patch, cscale * kernel, p, q).data - base))
            max_shift = max(max_shift, shift)
    verdict(3, "boundedness and kernel-scale invariance", max_abs <= 1.0 and max_shift < 1e-9,
            f"1000 draws: max |scs| {max_abs:.6f} (<= 1), max change under c in {{0.1, 10}} "
            f"{max_shift:.1e} (< 1e-9)")


# -- 4 ------------------------------------------------------------------------------
def test_criterion_4_detector_demo():
    offset = 21
    sig = np.zeros(64)
    sig[offset:offset + 8] = TEMPLATE_1D
    scs = A.detector_response_1d(TEMPLATE_1D, sig, "scs")
    conv = A.detector_response_1d(TEMPLATE_1D, sig, "conv")
    scs10 = A.detector_response_1d(TEMPLATE_1D, 10 * sig, "scs")
    conv10 = A.detector_response_1d(TEMPLATE_1D, 10 * sig, "conv")
    peak_ok = int(np.argmax(scs)) == offset and abs(scs[offset] - 1.0) <= 1e-6
    conv_ok = abs(conv10[offset] - 10 * conv[offset]) <= 1e-9
    scs_ok = abs(scs10[offset] - scs[offset]) < 1e-6
    verdict(4, "1-D detector demo", peak_ok and conv_ok and scs_ok,
            f"scs argmax {int(np.argmax(scs))} (true {offset}), peak {scs[offset]:.9f}; "
            f"conv x10 ratio {conv10[offset] / conv[offset]:.12f}; "
            f"scs change {abs(scs10[offset] - scs[offset]):.1e}")


# -- desk-scale sweep shared by 5, 7 and 8 ----------------------------------------------
def _train_cell(label: str, kind: str, act: str, seed: int, root: str, train_ds, test_ds):
    out = Path(root) / f"{label}-s{seed}"
    if (out / "final.ckpt").exists():
        return
    model, desc = build_model(LayerVariantConfig(kind, act, seed=seed, **DESK))
    if out.exists():
        for f in out.iterdir():
            f.unlink()
    train(model, train_ds, test_ds, TrainConfig(epochs=30, batch_size=128, seed=seed),
          desc, out)


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    if not CIFAR_DIR:
        return None
    train_full, test_full = load_cifar10(CIFAR_DIR)
    train_ds = subset(train_full, 4000, stratified=True, seed=0)
    test_ds = subset(test_full, 1000, stratified=True, seed=0)
    root = Path(os.environ.get("SCS_ACCEPTANCE_CACHE") or tmp_path_factory.mktemp("desk"))
    jobs = [(label, kind, act, seed) for label, (kind, act) in DESK_VARIANTS.items()
            for seed in SEEDS]
    with ProcessPoolExecutor(max_workers=os.cpu_count() or 1) as pool:
        for fut in [pool.submit(_train_cell, *job, str(root), train_ds, test_ds) for job in jobs]:
            fut.result()
    return {"root": root, "test": test_ds}


def _final(desk, label, seed):
    model, _, _ = restore_model(desk["root"] / f"{label}-s{seed}" / "final.ckpt")
    model.eval()
    return model


def _median_acc(desk, label) -> float:
    accs = []
    for seed in SEEDS:
        rows = read_telemetry(desk["root"] / f"{label}-s{seed}" / "telemetry.csv")
        accs.append(float(rows[-1]["test_acc"]))
    return float(np.median(accs))


# -- 5 ------------------------------------------------------------------------------
def test_criterion_5_desk_scale_direction(desk):
    if desk is None:
        skipped(5, "desk-scale directional accuracy", NO_CIFAR)
    acc = {label: _median_acc(desk, label) for label in DESK_VARIANTS}
    a = abs(acc["scs_none"] - acc["conv_relu"]) <= 0.05 and min(acc["scs_none"],
                                                                 acc["conv_relu"]) >= 0.45
    b = acc["conv_relu"] - acc["conv_none"] >= 0.05
    c = acc["cossim_relu"] - acc["cossim_none"] >= 0.05
    verdict(5, "desk-scale directional accuracy", a and b and c,
            "3-seed medians " + ", ".join(f"{k}={v:.4f}" for k, v in acc.items())
            + f"; (a) {'ok' if a else 'no'} (b) {'ok' if b else 'no'} (c) {'ok' if c else 'no'}")


# -- 6 ------------------------------------------------------------------------------
def test_criterion_6_overfit_oracle():
    rng = np.random.default_rng(6)
    fixed = Dataset(rng.random((32, 3, 32, 32)), np.arange(32) % 10)
    cfg = TrainConfig(epochs=200, batch_size=32, augment=AugmentationConfig(False),
                      stop_at_train_acc=1.0)
    reached = {}
    for kind in ("conv", "cossim", "scs", "sdp"):
        for act in ("relu", "none"):
            model, _ = build_model(LayerVariantConfig(kind, act, arch_family="rohrer_small"))
            res = train(model, fixed, fixed, cfg)
            reached[f"{kind}/{act}"] = (res.records[-1].train_acc, len(res.records))
    ok = all(acc == 1.0 for acc, _ in reached.values())
    verdict(6, "overfit oracle", ok, "32 random images, epochs to train acc 1.0: " + ", ".join(
        f"{k} {n if a == 1.0 else f'never (acc {a:.3f})'}" for k, (a, n) in reached.items()))


# -- 7 ------------------------------------------------------------------------------
def test_criterion_7_pgd_contract(desk):
    # contract part: exact clean accuracy at eps=0 and the projection constraints
    model, _ = build_model(LayerVariantConfig("scs", "none", normalization="batchnorm"))
    data = make_dataset(40, 7)
    train(model, data, data, TrainConfig(epochs=2, batch_size=20))
    model.eval()
    with no_grad():
        clean = float(np.mean(np.argmax(model(data.images).data, 1) == data.labels))
    zero = A.robustness_sweep(model, data, A.AttackConfig([0.0]), batch_size=13)[0][1]
    worst_ball, worst_box = 0.0, 0.0
    for eps in A.default_epsilons():
        adv = A.pgd_attack(model, data.images, data.labels, eps)
        worst_ball = max(worst_ball, np.max(np.abs(adv - data.images)) - eps)
        worst_box = max(worst_box, max(-adv.min(), adv.max() - 1.0))
    contract = zero == clean and worst_ball <= 1e-12 and worst_box <= 1e-12
    detail = (f"eps=0 acc {zero:.4f} vs clean {clean:.4f}; ball excess {worst_ball:.1e}, "
              f"box excess {max(worst_box, 0.0):.1e}")
    if desk is None:
        if not contract:
            verdict(7, "PGD contract", False, detail)
        skipped(7, "PGD contract", f"contract part passed ({detail}); trained-model part: {NO_CIFAR}")
    cfg = A.AttackConfig([0.001, 0.030])
    ends = {}
    for label in ("conv_relu", "scs_none"):
        curve = A.robustness_sweep(_final(desk, label, 0), desk["test"], cfg, n_eval=1000)
        ends[label] = (curve[0][1], curve[1][1])
    trained_ok = all(hi < lo for lo, hi in ends.values())
    verdict(7, "PGD contract", contract and trained_ok, detail + "; acc@0.001 -> acc@0.030: "
            + ", ".join(f"{k} {lo:.4f} -> {hi:.4f}" for k, (lo, hi) in ends.items()))


# -- 8 ------------------------------------------------------------------------------
def test_criterion_8_saliency_sparsity(desk):
    if desk is None:
        skipped(8, "saliency sparsity direction", NO_CIFAR)
    test = desk["test"]
    med = {"scs_none": [], "conv_relu": []}
    for seed in SEEDS:
        models = {k: _final(desk, k, seed) for k in med}
        with no_grad():
            right = np.ones(len(test), bool)
            for m in models.values():
                right &= np.argmax(m(test.images).data, 1) == test.labels
        chosen = np.flatnonzero(right)[:50]
        for k, m in models.items():
            med[k].append(np.median([A.sparsity_index(A.saliency_map(m, test.images[i],
                                                                     int(test.labels[i])))
                                     for i in chosen]))
    scs, conv = float(np.median(med["scs_none"])), float(np.median(med["conv_relu"]))
    verdict(8, "saliency sparsity direction", scs > conv,
            f"(stochastic) 3-seed median Gini scs {scs:.4f} vs conv {conv:.4f}")


# -- 9 ------------------------------------------------------------------------------
def expected_columns(model) -> list[str]:
    cols = list(TELEMETRY_HEADER)
    for name, m in model.telemetry_layers():
        cols += [f"{name}.w_norm", f"{name}.g_norm"]
        if getattr(m, "kind", "") in ("scs", "sdp"):
            cols += [f"{name}.p[{k}]" for k in range(m.out_channels)]
        if getattr(m, "kind", "") in ("scs", "cossim"):
            cols.append(f"{name}.q")
    return cols


def test_criterion_9_telemetry_completeness(cifar_dir, tmp_path):
    problems = []
    kinds = ("conv", "cossim", "scs", "sdp")
    code = cli_main(["train", "--data-dir", str(cifar_dir), "--out", str(tmp_path),
                     "--override", "model.arch_family=rohrer_small",
                     "--override", "grid.layer_kind=[conv, cossim, scs, sdp]",
                     "--override", "grid.activation=[none]",
                     "--override", "grid.normalization=[batchnorm]",
                     "--override", "data.train_size=40", "--override", "data.test_size=20",
                     "--override", "train.epochs=2", "--override", "train.batch_size=20"])
    for kind in kinds:
        cfg = LayerVariantConfig(kind, "none", normalization="batchnorm",
                                 arch_family="rohrer_small")
        path = tmp_path / cfg.name / "telemetry.csv"
        raw = path.read_bytes()
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header, rows = next(reader), list(reader)
        if header != expected_columns(build_model(cfg)[0]):
            problems.append(f"{kind}: header mismatch")
        if [r[0] for r in rows] != ["1", "2"]:
            problems.append(f"{kind}: not one row per epoch")
        for r in rows:
            try:
                vals = [float(v) for v in r]
            except ValueError:
                problems.append(f"{kind}: empty or non-numeric field")
                break
            if not np.all(np.isfinite(vals)) or vals[5] <= 0 or vals[6] <= 0:
                problems.append(f"{kind}: non-finite value or missing wall time")
        if b"\r" in raw or not raw.endswith(b"\n"):
            problems.append(f"{kind}: line endings")
    verdict(9, "telemetry completeness", code == 0 and not problems,
            "4 layer kinds x 2 epochs, header = schema incl. every p[k] and q column"
            if not problems else "; ".join(problems))


# -- 10 ------------------------------------------------------------------------------
def test_criterion_10_determinism(cifar_dir, tmp_path):
    base = ["--data-dir", str(cifar_dir), "--override", "model.arch_family=rohrer_small",
            "--override", "grid.layer_kind=[conv, scs, sdp]", "--override", "grid.activation=[relu]",
            "--override", "data.train_size=60", "--override", "data.test_size=30",
            "--override", "train.epochs=2", "--override", "train.batch_size=16", "--seed", "11"]
    for run in ("a", "b"):
        assert cli_main(["train", "--out", str(tmp_path / "nt" / run),
                         "--override", "train.record_times=false", *base]) == 0
        assert cli_main(["train", "--out", str(tmp_path / "t" / run), *base]) == 0
    exact, masked, ckpts = [], [], []
    for cell in sorted(p.name for p in (tmp_path / "nt" / "a").iterdir() if p.is_dir()):
        a, b = (tmp_path / "nt" / r / cell for r in "ab")
        exact.append((a / "telemetry.csv").read_bytes() == (b / "telemetry.csv").read_bytes())
        ckpts.append((a / "final.ckpt").read_bytes() == (b / "final.ckpt").read_bytes())
        ta, tb = (read_telemetry(tmp_path / "t" / r / cell / "telemetry.csv") for r in "ab")
        strip = lambda rows: [{k: v for k, v in r.items()  # noqa: E731
                               if k not in ("train_time_s", "eval_time_s")} for r in rows]
        masked.append(strip(ta) == strip(tb))
    ok = len(exact) == 3 and all(exact) and all(ckpts) and all(masked)
    verdict(10, "determinism", ok,
            f"{sum(exact)}/3 telemetry CSVs byte-identical with wall-clock columns zeroed, "
            f"{sum(ckpts)}/3 final checkpoints identical, {sum(masked)}/3 identical apart from "
            f"wall-clock columns with timing on")


def test_desk_models_evaluate(desk):
    """Sanity: cached desk models load and score above chance (only with data)."""
    if desk is None:
        pytest.skip(NO_CIFAR)
    _, acc = evaluate(_final(desk, "conv_relu", 0), desk["test"])
    assert acc > 0.2


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-rs", "-p", "no:cacheprovider"]))
