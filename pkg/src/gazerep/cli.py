"""``gazerep`` command line: synth, train, eval, finetune, probe, rf.

Progress goes to stderr; results go to files under ``--out``. Exit codes:
0 success, 2 usage or configuration error, 3 I/O error, 4 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

from threadpoolctl import threadpool_limits

from .attnmodel.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .attnmodel.config import ConfigError, load_config, probe_extents, receptive_field
from .attnmodel.network import (attention_forward, build_network, dilate_for_attention,
                                undilate_for_classification)
from .dataio.dataset import DatasetError, load_dataset
from .dataio.preprocess import temporal_subsample
from .dataio.synth import SHAPES, SynthConfig, expected_class_counts, synth_generate
from .evaluation.attention import (Geometry, eval_frames, evaluate_attention, gaze_baseline_from,
                                   saliency_baseline_from, write_report)
from .evaluation.probe import ProbeConfig, ProbeError, probe_sweep
from .gazetarget import write_salf
from .numcore.tensor import NonFiniteError, no_grad
from .runs import (attention_splits, class_counts, describe_split, labeled_splits, resolve_run_config,
                   write_run_config)
from .trainer import TrainingDiverged, class_report, finetune_classifier, for_random_init, train_attention

log = logging.getLogger("gazerep")

EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 2, 3, 4


class UsageError(Exception):
    pass


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _progress(rec) -> None:
    extra = f" val {rec.val_loss:.4f}" if rec.val_loss is not None else ""
    if rec.val_metric is not None:
        extra += f" f1 {rec.val_metric:.3f}"
    print(f"epoch {rec.epoch:3d}  lr {rec.lr:.3g}  train {rec.train_loss:.4f}{extra}  ({rec.seconds:.1f}s)",
          file=sys.stderr, flush=True)


# -- synth -------------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = _out_dir(args)
    base = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"--config: not valid JSON: {exc}") from exc
    over = {"seed": args.seed, "n_scans": args.scans, "frames": args.frames, "height": args.height,
            "width": args.width, "gaze_sigma": args.gaze_sigma}
    if args.classes is not None:
        names = tuple(c.strip() for c in args.classes.split(",") if c.strip())
        bad = [c for c in names if c not in SHAPES]
        if bad or len(names) < 2:
            raise UsageError(f"--classes: expected at least two of {', '.join(SHAPES)}; got {args.classes!r}")
        over["classes"] = names
    merged = {**base, **{k: v for k, v in over.items() if v is not None}}
    if "classes" in merged:
        merged["classes"] = tuple(merged["classes"])
    try:
        cfg = SynthConfig(**merged)
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"synth config: {exc}") from exc
    synth_generate(cfg, out)
    ds = load_dataset(out)
    counts = class_counts(ds.records, ds.classes)
    assert counts == expected_class_counts(cfg)
    print(f"wrote {len(ds)} frames from {cfg.n_scans} scans to {out}")
    for c, n in counts.items():
        print(f"  {c:12s} {n:6d} labeled frames")
    return 0


# -- train -------------------------------------------------------------------------------

def _overrides(args) -> dict:
    return {"lr": getattr(args, "lr", None), "epochs": getattr(args, "epochs", None),
            "samples_per_epoch": getattr(args, "samples_per_epoch", None),
            "epochs_decay": getattr(args, "decay_epochs", None), "seed": args.seed,
            "freeze_backbone": True if getattr(args, "freeze", False) else None,
            "train_per_class": getattr(args, "per_class", None)}


def cmd_train(args) -> int:
    rc = resolve_run_config(args.config, args.task, _overrides(args))
    out = _out_dir(args)
    write_run_config(rc, out)
    ds = load_dataset(args.data)
    tr, va = attention_splits(ds, rc)
    log.info(describe_split("train", tr))
    log.info(describe_split("val", va))
    cfg = rc.train_config()
    net = dilate_for_attention(build_network(rc.network_config(), seed=rc.seed))
    net, tlog = train_attention(net, tr, va, cfg, log_path=out / "log.jsonl", progress=_progress)
    meta = {"task": cfg.task, "train": cfg.to_json(), "best_epoch": tlog.best_epoch}
    save_checkpoint(net, out / "model.gazm", meta)
    geom = Geometry.of(net)
    if cfg.task == "saliency":
        baseline = saliency_baseline_from(tr, geom, cfg.sigma)
        write_salf(out / "baseline.salf", baseline, preview=False)
    else:
        baseline = gaze_baseline_from(tr)
        _dump({"point": [float(v) for v in baseline]}, out / "baseline.json")
    report = {"model": evaluate_attention(net, va, cfg.task, geom, cfg.sigma),
              "static_baseline": evaluate_attention(baseline, va, cfg.task, geom, cfg.sigma)}
    _dump(report, out / "val_report.json")
    print(f"saved {out / 'model.gazm'} (best epoch {tlog.best_epoch})")
    return 0


# -- eval --------------------------------------------------------------------------------

def cmd_eval(args) -> int:
    out = _out_dir(args)
    ds = load_dataset(args.data)
    if args.model:
        net, meta = load_checkpoint(args.model)
        if net.mode != "attention":
            raise UsageError("--model must be an attention-mode checkpoint")
        task = args.task or meta.get("task", "saliency")
        sigma = meta.get("train", {}).get("sigma", 8.0) if args.sigma is None else args.sigma
        geom, predictor = Geometry.of(net), net
    else:
        if args.baseline != "static" or not args.baseline_data:
            raise UsageError("either --model or --baseline static with --baseline-data is required")
        rc = resolve_run_config(args.config, args.task or "saliency", {"seed": args.seed})
        task = args.task or "saliency"
        sigma = rc.train_config().sigma if args.sigma is None else args.sigma
        net = dilate_for_attention(build_network(rc.network_config(), seed=rc.seed))
        geom, net = Geometry.of(net), None
        ref = load_dataset(args.baseline_data)
        predictor = (saliency_baseline_from(ref, geom, sigma) if task == "saliency" else gaze_baseline_from(ref))
    if args.stride:
        ds = ds.subset(temporal_subsample(ds.records, args.stride))
    ds = ds.subset([r for r in ds.records if r.gaze])
    report = evaluate_attention(predictor, ds, task, geom, sigma)
    write_report(report, out / "report.json")
    if args.dump_saliency:
        if task != "saliency":
            raise UsageError("--dump-saliency applies to the saliency task")
        sal_dir = out / "saliency"
        sal_dir.mkdir(exist_ok=True)
        for raw, m in eval_frames(ds, geom):
            if net is None:
                S = predictor
            else:
                with no_grad():
                    S = attention_forward(net, m.image[None].astype(net.dtype))[1].data[0]
            write_salf(sal_dir / f"{raw.scan}_{raw.frame:05d}.salf", S)
    print(json.dumps(report["metrics"], sort_keys=True))
    return 0


# -- finetune / probe ----------------------------------------------------------------------

def _init_network(spec: str, rc, n_classes: int):
    """('random' | checkpoint path) -> classification-mode network with a fresh classifier."""
    if spec == "random":
        return build_network(rc.network_config(), seed=rc.seed, n_classes=n_classes), True
    net, _ = load_checkpoint(spec)
    if net.mode == "attention":
        log.info("undilating attention checkpoint %s for classification", spec)
        print(f"undilating attention-mode checkpoint {spec}", file=sys.stderr)
        net = undilate_for_classification(net)
    net.attach_classifier(n_classes, seed=rc.seed)
    return net, False


def cmd_finetune(args) -> int:
    rc = resolve_run_config(args.config, "classify", _overrides(args))
    ds = load_dataset(args.data)
    if len({r.label for r in ds.records if r.label is not None}) < 2:
        raise UsageError("--data needs labeled frames from at least two classes")
    out = _out_dir(args)
    net, random_init = _init_network(args.init, rc, len(ds.classes))
    if random_init and args.lr is None:
        rc.train = for_random_init(rc.train_config()).to_json()
        rc.train.pop("seed")
    write_run_config(rc, out)
    tr, va, te = labeled_splits(ds, rc)
    for name, d in (("train", tr), ("val", va), ("test", te)):
        log.info(describe_split(name, d))
    cfg = rc.train_config()
    net, tlog = finetune_classifier(net, tr, va, cfg, log_path=out / "log.jsonl", progress=_progress)
    save_checkpoint(net, out / "model.gazm", {"task": "classify", "train": cfg.to_json(),
                                              "init": args.init, "best_epoch": tlog.best_epoch})
    rep = class_report(net, te)
    _dump(rep.to_json(), out / "test_report.json")
    print(f"test macro F1 {rep.macro_f1:.4f} (precision {rep.macro_precision:.4f}, recall {rep.macro_recall:.4f})")
    return 0


def cmd_probe(args) -> int:
    rc = resolve_run_config(args.config, "classify", {"seed": args.seed})
    ds = load_dataset(args.data)
    out = _out_dir(args)
    if args.model == "random":
        net = build_network(rc.network_config(), seed=rc.seed)
    else:
        net, _ = load_checkpoint(args.model)
        if net.mode == "attention":
            net = undilate_for_classification(net)
    names = list(net.stages)
    layers = names if args.layers in (None, "all") else [s.strip() for s in args.layers.split(",")]
    bad = [n for n in layers if n not in names]
    if bad:
        raise UsageError(f"--layers: unknown probe point(s) {', '.join(bad)}; valid: {', '.join(names)}")
    pcfg = ProbeConfig(layers=layers, **{k: v for k, v in rc.probe.items() if k != "layers"})
    write_run_config(rc, out)
    tr, va, te = labeled_splits(ds, rc)
    results = probe_sweep(net, tr, va, te, pcfg)
    _dump([r.to_json() for r in results], out / "probe.json")
    for r in results:
        print(f"{r.layer:10s} l2 {r.l2:.3g}  test macro F1 {r.test.macro_f1:.4f}")
    return 0


# -- rf ------------------------------------------------------------------------------------

def _fmt(ext) -> str:
    return f"{ext[0]}x{ext[1]}"


def rf_table(cfg) -> list[dict]:
    cls, att = receptive_field(cfg, "classification"), receptive_field(cfg, "attention")
    rows = []
    for name in cls:
        c, a = cls[name], att[name]
        scale = _fmt(c.extent) if c.extent == a.extent else f"{_fmt(c.extent)} ({_fmt(a.extent)})"
        rows.append({"stage": name, "scale": scale, "classification": _fmt(c.extent),
                     "attention": _fmt(a.extent), "rf_classification": c.size, "rf_attention": a.size,
                     "stride_classification": c.stride, "stride_attention": a.stride})
    return rows


def cmd_rf(args) -> int:
    source = args.config or "resnext-half"
    cfg = load_config(source)
    if args.n_dilate is not None:
        cfg = cfg.with_(n_dilate=args.n_dilate)
        cfg.validate()
    rows = rf_table(cfg)
    head = f"{'stage':10s} {'scale':>20s} {'classification':>15s} {'attention':>10s} {'RF':>9s} {'stride':>9s}"
    print(head)
    for r in rows:
        rf = f"{r['rf_classification']}/{r['rf_attention']}"
        st = f"{r['stride_classification']}/{r['stride_attention']}"
        print(f"{r['stage']:10s} {r['scale']:>20s} {r['classification']:>15s} {r['attention']:>10s} {rf:>9s} {st:>9s}")
    if args.out:
        out = _out_dir(args)
        _dump({"config": cfg.to_json(), "rows": rows}, out / "rf.json")
    return 0


# -- entry point -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (default from config, else 0)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--config", help="preset name (mini, paper, paper-saliency, ...) or JSON file")
    common.add_argument("--threads", type=int, default=None, help="BLAS thread limit")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gazerep", description="Gaze-supervised representation learning at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="render a synthetic scan dataset")
    s.add_argument("--scans", type=int)
    s.add_argument("--frames", type=int)
    s.add_argument("--height", type=int)
    s.add_argument("--width", type=int)
    s.add_argument("--classes", help=f"comma-separated subset of {','.join(SHAPES)}")
    s.add_argument("--gaze-sigma", type=float)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="pre-train an attention model")
    t.add_argument("--task", choices=("saliency", "gaze"), required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--lr", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--decay-epochs", type=int, nargs="*")
    t.add_argument("--samples-per-epoch", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="score a model or static baseline")
    e.add_argument("--model")
    e.add_argument("--baseline", choices=("static",))
    e.add_argument("--baseline-data", help="dataset the static baseline is computed from")
    e.add_argument("--data", required=True)
    e.add_argument("--task", choices=("saliency", "gaze"))
    e.add_argument("--sigma", type=float)
    e.add_argument("--stride", type=int, default=None, help="temporal subsampling of the evaluated frames")
    e.add_argument("--dump-saliency", action="store_true")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("finetune", parents=[common], help="fine-tune a classifier")
    f.add_argument("--init", required=True, help="'random' or an attention/classification checkpoint")
    f.add_argument("--data", required=True)
    f.add_argument("--lr", type=float)
    f.add_argument("--epochs", type=int)
    f.add_argument("--decay-epochs", type=int, nargs="*")
    f.add_argument("--samples-per-epoch", type=int)
    f.add_argument("--per-class", type=int, help="cap on labeled training frames per class")
    f.add_argument("--freeze", action="store_true", help="train the classification head only")
    f.set_defaults(func=cmd_finetune)

    q = sub.add_parser("probe", parents=[common], help="softmax-regression probes on frozen features")
    q.add_argument("--model", required=True, help="checkpoint or 'random'")
    q.add_argument("--data", required=True)
    q.add_argument("--layers", default="all")
    q.set_defaults(func=cmd_probe)

    r = sub.add_parser("rf", parents=[common], help="receptive-field and scale table")
    r.add_argument("--n-dilate", type=int)
    r.add_argument("--mode", choices=("both",), default="both")
    r.set_defaults(func=cmd_rf)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    limit = threadpool_limits(limits=args.threads) if args.threads else nullcontext()
    try:
        with limit:
            return args.func(args)
    except (UsageError, ConfigError, ProbeError) as exc:
        print(f"gazerep {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, NonFiniteError) as exc:
        print(f"gazerep {args.command}: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, CheckpointError, OSError) as exc:
        print(f"gazerep {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"gazerep {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
