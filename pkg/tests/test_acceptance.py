"""Acceptance criteria 1-10.

Each test records a PASS/FAIL line that is printed in the pytest summary.
Criteria 7 and 8 read the toy-recipe sweeps from ``acceptance_runs/``
(override with ATTNLAB_ACCEPTANCE_DIR); missing runs are trained here,
which takes hours on a single CPU. ``run_acceptance_sweeps.sh`` produces
the same directories ahead of time.
"""
import csv
import io
import json
import math
import os
import statistics
import time
import xml.etree.ElementTree as ET
from pathlib import Path

import pytest
import torch

from attnlab import checkpoint as ckio
from attnlab.activations import ActivationKind, softplus
from attnlab.attention import (
    AttentionSpec,
    Mechanism,
    attention_entropy,
    attention_max_gap,
    build_struct_matrices,
    generalized_attention,
    reweight,
    run_attention,
    softmax_attention,
)
from attnlab.cli import GRADCHECK_MECHANISMS, gradcheck_mechanism, main as cli_main
from attnlab.errors import NumericError
from attnlab.evalsuite import constant_predictor, generate_passkey, oracle_predictor, passkey_accuracy
from attnlab.model import ModelConfig, init
from attnlab.numcore import DTYPE
from attnlab.training import REPORT_HEADER, ExperimentReport

from conftest import ACCEPTANCE_LINES

ROOT = Path(__file__).resolve().parents[1]
RUNS = Path(os.environ.get("ATTNLAB_ACCEPTANCE_DIR", ROOT / "acceptance_runs"))
SEEDS = (0, 1, 2)
LN256 = math.log(256)
# Full-scale (124M parameters, train length 1K) validation losses at 1K and 8K,
# printed for orientation only; toy runs are not expected to match them.
REFERENCE = {"softmax": (3.1911, 6.2823), "lssar p=15": (3.1905, 3.3171)}


def record(n, ok, detail):
    ACCEPTANCE_LINES[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    assert ok, detail


def _gen(seed):
    return torch.Generator().manual_seed(seed)


def _all_specs():
    specs = [AttentionSpec.parse(s) for s in
             ("softmax", "softmax:mode=inverse", "softmax:mode=recentred", "softmax:mode=recentred_l1",
              "lssa", "lssar:p=1", "lssar:p=3", "lssar:p=15", "lssar:p=50", "lssar:p=100", "softmax:p=15")]
    for phi in ActivationKind:
        for l1 in ("true", "false"):
            specs.append(AttentionSpec.parse(f"generalized:phi={phi.value},l1={l1}"))
    for bias in ("neglogl", "neglogn", "none"):
        for l1 in ("true", "false"):
            specs.append(AttentionSpec.parse(f"sigmoid:bias={bias},l1={l1}"))
    return specs


def _is_normalized(spec):
    if spec.mechanism in (Mechanism.GENERALIZED, Mechanism.SIGMOID):
        return spec.l1_normalize or spec.reweight_p is not None
    return spec.softmax_mode is None or spec.softmax_mode.value == "recentred_l1"


def test_criterion_01_decomposition():
    t0 = time.perf_counter()
    gen = _gen(1)
    worst = 0.0
    spec = AttentionSpec(Mechanism.GENERALIZED, phi=ActivationKind.EXP, l1_normalize=True)
    for _ in range(100):
        L = int(torch.randint(1, 65, (1,), generator=gen))
        d = int(torch.randint(1, 33, (1,), generator=gen))
        Q, K, V = (torch.randn(L, d, generator=gen, dtype=DTYPE) for _ in range(3))
        A, out = generalized_attention(Q, K, V, spec)
        A0, out0 = softmax_attention(Q, K, V)
        worst = max(worst, (A - A0).abs().max().item(), (out - out0).abs().max().item())
    dt = time.perf_counter() - t0
    record(1, worst <= 1e-8 and dt < 10, f"max |diff| {worst:.2e} (tol 1e-8) over 100 instances in {dt:.1f}s")


def test_criterion_02_stochastic_and_causal():
    t0 = time.perf_counter()
    specs = _all_specs()
    gen = _gen(2)
    worst_sum, worst_upper, degenerate = 0.0, 0.0, 0
    for _ in range(100):
        L = int(torch.randint(1, 49, (1,), generator=gen))
        d = int(torch.randint(2, 17, (1,), generator=gen))
        Q, K, V = (torch.randn(L, d, generator=gen, dtype=DTYPE) for _ in range(3))
        for spec in specs:
            A, _ = run_attention(Q, K, V, spec)
            worst_upper = max(worst_upper, A.triu(1).abs().max().item() if L > 1 else 0.0)
            if _is_normalized(spec):
                s = A.abs().sum(-1)
                live = s > 0
                degenerate += int((~live).sum())
                worst_sum = max(worst_sum, (s[live] - 1).abs().max().item() if live.any() else 0.0)
    dt = time.perf_counter() - t0
    ok = worst_sum <= 1e-9 and worst_upper == 0.0 and dt < 30
    record(2, ok, f"{len(specs)} mechanisms x 100 instances: max |row sum - 1| {worst_sum:.2e}, "
                  f"max |upper| {worst_upper:.1e}, {degenerate} all-zero rows skipped, {dt:.1f}s")


def _random_rows(n, seed, margin=None):
    """Rows of softmax(2 * N(0, 1)) over L ~ U{4..64}, placed as the last row of an L x L score matrix.

    With ``margin`` only rows whose runner-up is at most (1 - margin) x the
    maximum are kept.
    """
    gen = _gen(seed)
    rows = []
    while len(rows) < n:
        L = int(torch.randint(4, 65, (1,), generator=gen))
        row = torch.softmax(2 * torch.randn(L, generator=gen, dtype=DTYPE), -1)
        top = row.topk(2).values
        if top[1] == top[0] or (margin is not None and top[1] > (1 - margin) * top[0]):
            continue
        rows.append(row)
    return rows


def _reweight_row(row, p):
    L = len(row)
    A = torch.zeros(L, L, dtype=DTYPE)
    A[-1] = row
    return reweight(A, p, build_struct_matrices(L, 0))[-1:]


def test_criterion_03_sharpening():
    t0 = time.perf_counter()
    ps = (1, 3, 15, 50, 100)
    fails, nonmono, min_max, min_gap = 0, 0, 1.0, 1.0
    for row in _random_rows(1000, 3, margin=0.1):
        gaps = [attention_max_gap(_reweight_row(row, p)).item() for p in ps]
        top = _reweight_row(row, 100).max().item()
        min_max, min_gap = min(min_max, top), min(min_gap, gaps[-1])
        fails += top < 0.999 or gaps[-1] < 0.998
        nonmono += any(b < a for a, b in zip(gaps, gaps[1:]))
    # Same check when "unique" only means no exact tie: reported, not asserted.
    strict = sum(_reweight_row(r, 100).max().item() < 0.999 for r in _random_rows(1000, 3))
    dt = time.perf_counter() - t0
    ok = fails == 0 and nonmono == 0 and dt < 30
    record(3, ok, f"1000 rows (runner-up <= 0.9 x max): min max {min_max:.6f}, min gap {min_gap:.6f}, "
                  f"{nonmono} non-monotone; exact-tie-free rows below 0.999: {strict}/1000; {dt:.1f}s")


def test_criterion_04_escort_entropy():
    ps = (1, 1.5, 3, 7, 15, 50, 100)
    worst = -math.inf
    for row in _random_rows(1000, 4):
        ents = [attention_entropy(_reweight_row(row, p)).item() for p in ps]
        worst = max(worst, max(b - a for a, b in zip(ents, ents[1:])))
    record(4, worst <= 1e-9, f"largest entropy increase across p on 1000 rows: {worst:.2e} (tol 1e-9)")


def test_criterion_05_gradients():
    t0 = time.perf_counter()
    parts, ok = [], True
    for name in GRADCHECK_MECHANISMS:
        rep = gradcheck_mechanism(AttentionSpec.parse(name), h=1e-5)
        ok &= rep.max_rel_diff < 1e-3
        parts.append(f"{AttentionSpec.parse(name).display_name}={rep.max_rel_diff:.1e}")
    dt = time.perf_counter() - t0
    record(5, ok and dt < 300, f"max rel diff (tol 1e-3): {', '.join(parts)}; {dt:.1f}s")


def test_criterion_06_stability():
    gen = _gen(6)
    Q, K, V = (torch.randn(32, 16, generator=gen, dtype=DTYPE) for _ in range(3))
    Q = (Q * 1e3 * 4 / (Q @ K.T).abs().max()).requires_grad_()  # scaled logits peak at 1e3
    K = K.clone().requires_grad_()
    finite = True
    for spec in ("lssa", "lssar:p=15", "generalized:phi=softplus,p=15"):
        Q.grad = K.grad = None
        _, out = run_attention(Q, K, V, AttentionSpec.parse(spec))
        out.square().sum().backward()
        finite &= bool(torch.isfinite(out).all() and torch.isfinite(Q.grad).all() and torch.isfinite(K.grad).all())
    sp = softplus(torch.tensor([1000.0], dtype=DTYPE)).item()
    try:
        run_attention(Q.detach(), K.detach(), V, AttentionSpec.parse("generalized:phi=exp"))
        raised = "no error"
    except NumericError as exc:
        raised = f"NumericError(magnitude={exc.magnitude:.0f})"
    ok = finite and abs(sp - 1000) <= 1e-9 and raised.startswith("NumericError")
    record(6, ok, f"softplus-branch grads finite: {finite}; softplus(1000)-1000 = {sp - 1000:.1e}; exp path: {raised}")


# ---- toy-recipe sweeps ---------------------------------------------------------

def _ensure_sweep(name, config, seed):
    out = RUNS / name
    if not (out / "report.csv").exists():
        code = cli_main(["sweep", str(ROOT / "configs" / config), "--out", str(out), "--force",
                         "--set", f"model.seed={seed}", "--set", f"training.seed={seed}"])
        assert code in (0, 3), f"sweep {name} exited {code}"
    report = ExperimentReport.from_csv((out / "report.csv").read_text())
    report.final_train_loss = json.loads((out / "final_train_loss.json").read_text())
    diag = out / "diagnostics.txt"
    report.diagnostics = diag.read_text().splitlines() if diag.exists() else []
    return report


def _delta(report, mech, p):
    return report.lookup(mech, p, 2048).val_loss - report.lookup(mech, p, 128).val_loss


@pytest.fixture(scope="module")
def seed_reports():
    return [_ensure_sweep(f"seed{s}", "acceptance.yaml", s) for s in SEEDS]


@pytest.mark.slow
def test_criterion_07_extrapolation(seed_reports):
    d_soft = [_delta(r, "softmax", None) for r in seed_reports]
    d_lssar = [_delta(r, "lssar", 15.0) for r in seed_reports]
    train_losses = [v for r in seed_reports for v in r.final_train_loss.values()]
    hours = sum(row.wall_time_s for r in seed_reports for row in r.rows) / 3600
    med_s, med_l = statistics.median(d_soft), statistics.median(d_lssar)
    learned = len(train_losses) == 2 * len(SEEDS) and all(v < 0.75 * LN256 for v in train_losses)
    ok = med_l < med_s and learned
    record(7, ok, f"median delta softmax {med_s:+.4f}, lssar p=15 {med_l:+.4f} "
                  f"(per seed {['%+.3f' % x for x in d_soft]} vs {['%+.3f' % x for x in d_lssar]}); "
                  f"max final train loss {max(train_losses):.3f} (< {0.75 * LN256:.3f}); {hours:.2f} h; "
                  f"full-scale reference 1K->8K: {REFERENCE}")


@pytest.mark.slow
def test_criterion_08_p_sweep(seed_reports):
    rep = _ensure_sweep("pvalues", "acceptance_p.yaml", 0)
    lssar15 = _delta(seed_reports[0], "lssar", 15.0)
    soft = [rep.lookup("softmax", 15.0, L).val_loss for L in (128, 2048)]
    aborted = any(math.isnan(v) for v in soft)
    soft_ok = aborted or (soft[1] - soft[0]) > lssar15
    finite = all(math.isfinite(r.val_loss) for r in rep.rows if r.mechanism == "lssar")
    finite &= all(math.isfinite(r.val_loss) for r in seed_reports[0].rows if r.mechanism == "lssar")
    soft_txt = "aborted: " + rep.diagnostics[0] if aborted else f"delta {soft[1] - soft[0]:+.4f}"
    record(8, soft_ok and finite, f"softmax p=15 {soft_txt} vs lssar p=15 delta {lssar15:+.4f}; "
                                  f"lssar p in (15, 50, 100) finite: {finite}")


# ---- harness and artifacts -------------------------------------------------------

def test_criterion_09_passkey_harness():
    from scipy import stats

    oracle = passkey_accuracy(lambda L: oracle_predictor(), [128, 256, 512, 1024, 2048], trials=100)
    const = passkey_accuracy(lambda L: constant_predictor(), [512], trials=100)
    replay = all(generate_passkey(L, s) == generate_passkey(L, s) for L in (128, 2048) for s in range(20))
    room = 2048 - len(b"The pass key is 12345. Remember it. ") - len(b"What is the pass key? The pass key is ")
    counts = [0] * 10
    for s in range(1000):
        start = generate_passkey(2048, s).key_span[0] - len(b"The pass key is ")
        counts[min(9, start * 10 // (room + 1))] += 1
    pval = stats.chisquare(counts).pvalue
    ok = all(r.accuracy == 1.0 for r in oracle) and const[0].correct == 0 and replay and pval > 0.01
    record(9, ok, f"oracle {[r.accuracy for r in oracle]}, constant '0' {const[0].correct}/100, "
                  f"replay-exact {replay}, chi-square p={pval:.3f}")


def test_criterion_10_artifacts(tmp_path):
    base = ["sweep", str(ROOT / "configs" / "smoke.yaml"), "--set", "training.steps=3",
            "--set", "sweep.eval_lens=[32, 64]"]
    assert cli_main([*base, "--out", str(tmp_path / "a")]) == 0
    assert cli_main([*base, "--out", str(tmp_path / "b")]) == 0
    text = (tmp_path / "a" / "report.csv").read_text()
    header_ok = text.split("\n", 1)[0] == "mechanism,p,eval_len,val_loss,mean_entropy,mean_max_gap,wall_time_s"
    header_ok &= text.split("\n", 1)[0].split(",") == REPORT_HEADER
    try:
        for f in ("report_loss_vs_length.svg", "report_entropy_vs_length.svg"):
            ET.parse(tmp_path / "a" / f)
        svg_ok = True
    except ET.ParseError:
        svg_ok = False
    ck = init(ModelConfig(n_layers=2, d_model=32, n_heads=4, attention=AttentionSpec.parse("lssar:p=15"), seed=5))
    ckio.save(ck, tmp_path / "m.bin")
    back = ckio.load(tmp_path / "m.bin")
    bits_ok = all(torch.equal(back.params[k], ck.params[k]) for k in ck.params) and back.config == ck.config
    # wall_time_s is measured time, so reproducibility is judged on the other columns.
    strip = lambda p: [r[:6] for r in csv.reader(io.StringIO(p.read_text()))]
    same = strip(tmp_path / "a" / "report.csv") == strip(tmp_path / "b" / "report.csv")
    record(10, header_ok and svg_ok and bits_ok and same,
           f"header {header_ok}, svg well-formed {svg_ok}, checkpoint bit-exact {bits_ok}, "
           f"seeded CSVs identical {same}")
