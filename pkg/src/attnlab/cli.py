"""Command-line entry point: ``attnlab {train,eval,sweep,passkey,probe,gradcheck,make-corpus}``.

Exit codes: 0 success, 2 configuration or input error, 3 runtime or training
failure, 4 verification failure.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional

import torch

from . import __version__, checkpoint, config as cfgmod, corpus as corpusmod, plotting
from .attention import AttentionSpec
from .errors import CheckpointError, ConfigError, InputError, NumericError, TrainingAborted
from .model import ModelConfig, init, loss as ce_loss
from .numcore import grad_check_params
from .training import ExperimentReport, ReportRow, evaluate, lr_at, sweep, train

log = logging.getLogger("attnlab")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 2, 3, 4
MANIFEST = "run_manifest.json"

GRADCHECK_MECHANISMS = [
    "softmax",
    "generalized:phi=softplus",
    "sigmoid:bias=neglogl,l1=false",
    "sigmoid:bias=neglogn,l1=false",
    "sigmoid:bias=neglogn,l1=true",
    "lssa",
    "lssar:p=3",
    "lssar:p=15",
]


def _write_text(path: Path, text: str) -> None:
    checkpoint.atomic_write_bytes(path, text.encode("utf-8"))


def _prepare_out(out: Path, force: bool) -> Path:
    out = Path(out)
    if (out / MANIFEST).exists() and not force:
        raise ConfigError(f"output directory {out} already holds a run; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, resolved: dict, seeds: dict, artifacts: dict) -> None:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": resolved,
        "seeds": seeds,
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "version": __version__,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    _write_text(out / MANIFEST, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_config(args) -> dict:
    cfg = cfgmod.load(args.config) if args.config else {}
    return cfgmod.apply_overrides(cfg, args.set)


def _resolve_corpus(cfg: dict, out: Path) -> dict:
    """Materialize a synthetic corpus when the config asks for one instead of a path."""
    training = dict(cfg.get("training") or {})
    synth = cfg.get("corpus") or {}
    if not training.get("corpus_path") and synth.get("synthetic_bytes"):
        path = out / "corpus.txt"
        corpusmod.write(path, int(synth["synthetic_bytes"]), int(synth.get("synthetic_seed", 0)))
        training["corpus_path"] = str(path)
        cfg = dict(cfg, training=training)
    return cfg


def _out_dir(args, cfg: dict, default: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path((cfg.get("output") or {}).get("dir", default))


def _progress(label: str, every: int = 100):
    def on_step(step, value):
        if step % every == 0:
            log.info("%s step %d loss %.4f", label, step, value)
    return on_step


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg, "runs/train")
    mcfg = cfgmod.model_config(cfg)
    # Validate before touching the output directory.
    if not (cfg.get("training") or {}).get("corpus_path") and not (cfg.get("corpus") or {}).get("synthetic_bytes"):
        raise ConfigError("training.corpus_path is required")
    cfgmod.train_config(cfg, require_corpus=False)
    out = _prepare_out(out, args.force)
    cfg = _resolve_corpus(cfg, out)
    tcfg = cfgmod.train_config(cfg)
    artifacts = {"checkpoint": out / "checkpoint.bin", "loss_history": out / "loss_history.csv",
                 "manifest": out / MANIFEST}
    resolved = {"model": mcfg.to_dict(), "training": tcfg.to_dict()}
    _write_manifest(out, "train", resolved, {"model": mcfg.seed, "training": tcfg.seed}, artifacts)
    try:
        ckpt, history = train(mcfg, tcfg, on_step=_progress(mcfg.attention.display_name))
    except TrainingAborted as exc:
        _write_text(out / "diagnostics.txt", str(exc) + "\n")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    checkpoint.save(ckpt, artifacts["checkpoint"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss", "lr"])
    for i, v in enumerate(history):
        w.writerow([i, repr(v), repr(lr_at(i, tcfg))])
    _write_text(artifacts["loss_history"], buf.getvalue())
    print(f"trained {mcfg.attention.display_name}: final loss {history[-1]:.4f} -> {artifacts['checkpoint']}")
    return EXIT_OK


def _report_outputs(report: ExperimentReport, out: Path, stem: str, formats) -> List[Path]:
    csv_path = out / f"{stem}.csv"
    _write_text(csv_path, report.to_csv())
    paths = [csv_path]
    paths += plotting.plot_report(report, out / f"{stem}_loss_vs_length", formats=formats)
    paths += plotting.plot_report(report, out / f"{stem}_entropy_vs_length", metric="mean_entropy", formats=formats)
    if report.diagnostics:
        _write_text(out / "diagnostics.txt", "\n".join(report.diagnostics) + "\n")
    return paths


def cmd_eval(args) -> int:
    ckpt = checkpoint.load(args.checkpoint)
    out = _prepare_out(Path(args.out or "runs/eval"), args.force)
    artifacts = {"report": out / "eval.csv", "figure": out / "eval_loss_vs_length.svg", "manifest": out / MANIFEST}
    _write_manifest(out, "eval", {"checkpoint": str(args.checkpoint), "corpus": str(args.corpus),
                                  "lengths": args.lengths, "max_batches": args.max_batches},
                    {"model": ckpt.config.seed}, artifacts)
    spec = ckpt.config.attention
    report = ExperimentReport()
    for L in sorted(set(args.lengths)):
        t0 = time.perf_counter()
        try:
            res = evaluate(ckpt, L, args.corpus, max_batches=args.max_batches)
        except ArithmeticError as exc:
            report.diagnostics.append(f"eval at {L}: {exc}")
            res = None
        dt = time.perf_counter() - t0
        nan = float("nan")
        report.add(ReportRow(spec.label, spec.reweight_p, L, res.val_loss if res else nan,
                             res.mean_entropy if res else nan, res.mean_max_gap if res else nan, dt))
    _report_outputs(report, out, "eval", args.formats)
    sys.stdout.write(report.to_csv())
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg, "runs/sweep")
    mcfg = cfgmod.model_config(cfg)
    sw = cfg.get("sweep") or {}
    specs = cfgmod.parse_mechanisms(sw.get("mechanisms"), sw.get("p_values"))
    lens = cfgmod.int_list(cfg, "sweep.eval_lens")
    if any(L < 2 for L in lens):
        raise ConfigError("sweep.eval_lens entries must be >= 2")
    if not (cfg.get("training") or {}).get("corpus_path") and not (cfg.get("corpus") or {}).get("synthetic_bytes"):
        raise ConfigError("training.corpus_path is required")
    cfgmod.train_config(cfg, require_corpus=False)
    out = _prepare_out(out, args.force)
    cfg = _resolve_corpus(cfg, out)
    tcfg = cfgmod.train_config(cfg)
    max_batches = int(sw.get("max_batches", 8))
    artifacts = {"report": out / "report.csv", "figure": out / "report_loss_vs_length.svg",
                 "manifest": out / MANIFEST}
    resolved = {"model": mcfg.to_dict(), "training": tcfg.to_dict(),
                "sweep": {"mechanisms": [s.to_string() for s in specs], "eval_lens": sorted(set(lens)),
                          "max_batches": max_batches}}
    _write_manifest(out, "sweep", resolved, {"model": mcfg.seed, "training": tcfg.seed}, artifacts)
    report = sweep(mcfg, tcfg, specs, lens, max_batches=max_batches, jobs=args.jobs,
                   on_row=lambda r: log.info("%s p=%s L=%d val_loss=%.4f", r.mechanism, r.p, r.eval_len, r.val_loss))
    _report_outputs(report, out, "report", args.formats)
    _write_text(out / "final_train_loss.json", json.dumps(report.final_train_loss, indent=2, sort_keys=True) + "\n")
    sys.stdout.write(report.to_csv())
    ok = any(r.val_loss == r.val_loss for r in report.rows)
    if not ok:
        print("error: every sweep cell failed", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def passkey_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["ctx_len", "trials", "correct", "accuracy"])
    for r in results:
        w.writerow([r.ctx_len, r.trials, r.correct, repr(r.accuracy)])
    return buf.getvalue()


def cmd_passkey(args) -> int:
    from .evalsuite import passkey_accuracy

    ckpt = checkpoint.load(args.checkpoint)
    out = _prepare_out(Path(args.out or "runs/passkey"), args.force)
    seed = cfgmod.default_seed() if args.seed is None else args.seed
    artifacts = {"accuracy": out / "passkey.csv", "figure": out / "passkey.svg", "manifest": out / MANIFEST}
    _write_manifest(out, "passkey", {"checkpoint": str(args.checkpoint), "lengths": args.lengths,
                                     "trials": args.trials}, {"passkey": seed}, artifacts)
    results = passkey_accuracy(ckpt, args.lengths, trials=args.trials, seed=seed, jobs=args.jobs)
    _write_text(artifacts["accuracy"], passkey_csv(results))
    plotting.plot_passkey([{"ctx_len": r.ctx_len, "accuracy": r.accuracy} for r in results], out / "passkey",
                          formats=args.formats)
    diags = [d for r in results for d in r.diagnostics]
    if diags:
        _write_text(out / "diagnostics.txt", "\n".join(diags) + "\n")
    sys.stdout.write(passkey_csv(results))
    return EXIT_OK


def cmd_probe(args) -> int:
    from .evalsuite import smoothing_probe

    out = _prepare_out(Path(args.out or "runs/probe"), args.force)
    seed = cfgmod.default_seed() if args.seed is None else args.seed
    specs = [AttentionSpec.parse(m) for m in (args.mechanism or ["softmax", "lssa", "lssar:p=15"])]
    artifacts = {"probe": out / "probe.csv", "manifest": out / MANIFEST}
    _write_manifest(out, "probe", {"mechanisms": [s.to_string() for s in specs], "d": args.d, "lens": args.lens,
                                   "samples": args.samples}, {"probe": seed}, artifacts)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mechanism", "p", "length", "mean_entropy", "mean_max_gap"])
    series = {}
    for spec in specs:
        rows = smoothing_probe(spec, args.d, args.lens, samples=args.samples, seed=seed)
        for L, ent, gap in rows:
            w.writerow([spec.label, "" if spec.reweight_p is None else repr(spec.reweight_p), L, repr(ent), repr(gap)])
        series[spec.display_name] = ([r[0] for r in rows], [r[1] for r in rows])
    _write_text(artifacts["probe"], buf.getvalue())
    plotting.line_chart(series, out / "probe_entropy", "sequence length", "last-row attention entropy (nats)",
                        formats=args.formats)
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def micro_config(spec: AttentionSpec, args=None) -> ModelConfig:
    g = (lambda k, d: getattr(args, k, d) if args is not None else d)
    return ModelConfig(vocab_size=g("vocab", 11), n_layers=g("layers", 1), d_model=g("d_model", 8),
                       n_heads=g("heads", 2), train_len=g("length", 6), attention=spec, seed=g("seed", 0) or 0)


def gradcheck_mechanism(spec: AttentionSpec, h: float = 1e-5, args=None):
    cfg = micro_config(spec, args)
    module = init(cfg).new_module()
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    toks = torch.randint(0, cfg.vocab_size, (cfg.train_len + 1,), generator=gen)
    return grad_check_params(lambda: ce_loss(module(toks[:-1]), toks[1:]), list(module.parameters()), h=h)


def cmd_gradcheck(args) -> int:
    names = args.mechanism or GRADCHECK_MECHANISMS
    failed = []
    print(f"{'mechanism':34s} {'params':>7s} {'max_abs_diff':>13s} {'max_rel_diff':>13s}  status")
    for name in names:
        spec = AttentionSpec.parse(name)
        try:
            rep = gradcheck_mechanism(spec, args.h, args)
        except NumericError as exc:
            print(f"{spec.display_name:34s} {'-':>7s} {'-':>13s} {'-':>13s}  FAIL ({exc})")
            failed.append(spec.display_name)
            continue
        ok = rep.max_rel_diff < args.tol
        print(f"{spec.display_name:34s} {rep.param_count:7d} {rep.max_abs_diff:13.3e} {rep.max_rel_diff:13.3e}  "
              f"{'pass' if ok else 'FAIL'}")
        if not ok:
            failed.append(spec.display_name)
    if failed:
        print("gradient check failed for: " + ", ".join(failed), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_make_corpus(args) -> int:
    seed = cfgmod.default_seed() if args.seed is None else args.seed
    path = corpusmod.write(args.path, args.bytes, seed)
    print(f"wrote {args.bytes} bytes to {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attnlab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--version", action="version", version=f"attnlab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("config", nargs="?", help="YAML run configuration")
            sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                            help="dotted-path override, e.g. training.lr=1e-3 (repeatable)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--force", action="store_true", help="overwrite an existing run directory")
        sp.add_argument("--format", dest="formats", action="append", choices=["svg", "png", "pdf"],
                        help="figure format(s), default svg")

    sp = sub.add_parser("train", help="train one model")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint at several lengths")
    common(sp, config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--lengths", type=int, nargs="+", required=True)
    sp.add_argument("--max-batches", type=int, default=8)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="train and evaluate a mechanism x length grid")
    common(sp)
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("passkey", help="passkey retrieval accuracy")
    common(sp, config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--lengths", type=int, nargs="+", required=True)
    sp.add_argument("--trials", type=int, default=100)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_passkey)

    sp = sub.add_parser("probe", help="attention smoothing on random inputs")
    common(sp, config=False)
    sp.add_argument("--mechanism", action="append", help="mechanism spec, e.g. lssar:p=15 (repeatable)")
    sp.add_argument("--d", type=int, default=64)
    sp.add_argument("--lens", type=int, nargs="+", default=[128, 256, 512, 1024, 2048])
    sp.add_argument("--samples", type=int, default=16)
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(func=cmd_probe)

    sp = sub.add_parser("gradcheck", help="finite-difference check of full-model gradients")
    sp.add_argument("--mechanism", action="append", help="mechanism spec (repeatable); default: all")
    sp.add_argument("--h", type=float, default=1e-5)
    sp.add_argument("--tol", type=float, default=1e-3)
    sp.add_argument("--layers", type=int, default=1)
    sp.add_argument("--d-model", type=int, default=8)
    sp.add_argument("--heads", type=int, default=2)
    sp.add_argument("--length", type=int, default=6)
    sp.add_argument("--vocab", type=int, default=11)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("make-corpus", help="write the synthetic corpus")
    sp.add_argument("path")
    sp.add_argument("--bytes", type=int, default=2_000_000)
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(func=cmd_make_corpus)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    if getattr(args, "formats", None) is None and hasattr(args, "formats"):
        args.formats = ["svg"]
    try:
        return args.func(args)
    except (ConfigError, InputError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAborted, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
