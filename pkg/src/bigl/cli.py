"""Command-line workflow: phantom data, two-stage training, evaluation and comparison tables.

Exit codes: 0 success, 2 usage or validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

import torch

from . import __version__
from .data import PhantomSpec, generate_phantom, load_cases, make_slice_stream, split_cases
from .domain import Domain, LabelScheme, TrainConfig
from .errors import (BiGLError, CheckpointError, IngestError, InsufficientCases,
                     LabelSchemeViolation)
from .metrics import (METRICS, MetricsReport, evaluate_split, format_mean_std, load_records,
                      regions_for, save_overlays, self_test_split)
from .trainer import (latest_epoch, load_generators, load_segnet, source_only_baseline, subseed,
                      train_stage1, train_stage2)

log = logging.getLogger("bigl")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
MANIFEST = "manifest.json"
SPLITS = ("train", "val", "test")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------- run manifest


def code_hash() -> str:
    """Content hash over the package sources, git-blob style."""
    h = hashlib.sha1()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        data = path.read_bytes()
        h.update(f"{path.name} blob {len(data)}\0".encode())
        h.update(data)
    return h.hexdigest()


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def load_manifest(run_dir):
    path = Path(run_dir) / MANIFEST
    if path.exists():
        return json.loads(path.read_text())
    return {"run_id": Path(run_dir).name, "stages": {}}


def update_manifest(run_dir, stage, **entry):
    run_dir = Path(run_dir)
    man = load_manifest(run_dir)
    man["code_hash"] = code_hash()
    man["bigl_version"] = __version__
    man.setdefault("stages", {})[stage] = {**man["stages"].get(stage, {}), **entry}
    _atomic_write(run_dir / MANIFEST, json.dumps(man, indent=2, default=str))
    return man


class stage_status:
    """Record a stage as running, then complete or failed, in the run manifest."""

    def __init__(self, run_dir, stage, cfg):
        self.run_dir, self.stage, self.cfg = Path(run_dir), stage, cfg
        self.entry = {}

    def __enter__(self):
        update_manifest(self.run_dir, self.stage, status="running", config=self.cfg.to_dict(),
                        started=time.time())
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            update_manifest(self.run_dir, self.stage, status="complete", finished=time.time(),
                            **self.entry)
        else:
            update_manifest(self.run_dir, self.stage, status="failed", finished=time.time(),
                            error=f"{exc_type.__name__}: {exc}")
        return False


def _fresh_log(path, resume):
    if not resume and path.exists():
        path.unlink()
    return path


def _rel(run_dir, paths):
    return {k: os.path.relpath(v, run_dir) for k, v in paths.items()}


# --------------------------------------------------------------------------- config


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(args) -> TrainConfig:
    """Built-in defaults, overlaid by the config file, overlaid by command-line flags."""
    values, origin = {}, {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {path} not found")
        try:
            file_values = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
        values.update(file_values)
        origin.update({k: "file" for k in file_values})
    flags = {"seed": "seed", "epochs": "epochs", "syn_epochs": "syn_epochs",
             "batch_size": "batch_size", "width": "seg_width"}
    for attr, key in flags.items():
        v = getattr(args, attr, None)
        if v is not None:
            values[key] = v
            origin[key] = "flag"
    for item in getattr(args, "set", None) or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        values[key] = _parse_value(raw)
        origin[key] = "flag"
    try:
        cfg = TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    for f in dataclasses.fields(TrainConfig):
        log.info("config %s = %r (%s)", f.name, getattr(cfg, f.name), origin.get(f.name, "default"))
    return cfg


def device() -> str:
    return os.environ.get("BIGL_DEVICE", "cpu")


# --------------------------------------------------------------------------- data


def _data_splits(args, seed):
    root = Path(args.data)
    if not root.is_dir():
        raise UsageError(f"data directory {root} does not exist")
    cases = load_cases(root, args.scheme, (args.source_mod, args.target_mod))
    return split_cases(cases, seed=subseed(seed, "data:split"))


def _streams(cfg, split, args, labeled_target=False):
    src = make_slice_stream(split, args.source_mod, True, subseed(cfg.seed, "shuffle:source"),
                            cfg.image_size, Domain.SOURCE, args.scheme)
    tgt = make_slice_stream(split, args.target_mod, labeled_target, subseed(cfg.seed, "shuffle:target"),
                            cfg.image_size, Domain.TARGET, args.scheme)
    return src, tgt


# --------------------------------------------------------------------------- commands


def cmd_phantom(args):
    try:
        # lesion radii scale with the grid; the defaults are tuned for 64 x 64
        radius = tuple(r * args.size / 64 for r in PhantomSpec.lesion_radius)
        spec = PhantomSpec(image_size=args.size, n_cases=args.cases, slices_per_case=args.slices,
                           noise=args.noise, gamma=args.gamma, seed=args.seed, lesion_radius=radius)
    except ValueError as exc:
        raise UsageError(f"invalid phantom spec: {exc}") from None
    ids = generate_phantom(spec, args.out)
    log.info("wrote %d phantom cases to %s", len(ids), args.out)
    return EXIT_OK


def cmd_train_syn(args):
    cfg = resolve_config(args)
    train, _, _ = _data_splits(args, cfg.seed)
    src, tgt = _streams(cfg, train, args)
    out = Path(args.out)
    log_path = _fresh_log(out / "logs" / "stage1.jsonl", args.resume)
    with stage_status(out, "stage1", cfg) as status:
        result = train_stage1(cfg, src, tgt, out_dir=out, resume=args.resume, device=device(),
                              log_path=log_path)
        paths = dict(result.checkpoints)
        if log_path.exists():
            paths["log"] = log_path
        status.entry = {"paths": _rel(out, paths), "epochs_run": result.epochs_run}
    return EXIT_OK


def cmd_train_uda(args):
    cfg = resolve_config(args)
    train, val, _ = _data_splits(args, cfg.seed)
    src, tgt = _streams(cfg, train, args)
    out = Path(args.out)
    gens = None
    if not args.source_only:
        stage1 = Path(args.stage1) if args.stage1 else out / "stage1"
        if latest_epoch(stage1, ("g_s2t", "g_t2s")) is None:
            raise UsageError(f"no stage-1 generator checkpoints under {stage1}; run train-syn first "
                             "or pass --source-only")
        gens = load_generators(stage1, device())
    validate = None
    if val:
        val_stream = make_slice_stream(val, args.source_mod, True, 0, cfg.image_size, Domain.SOURCE,
                                       args.scheme)
        first = regions_for(args.scheme)[0].name
        if len(val_stream):
            validate = lambda net: evaluate_split(net, val_stream, args.scheme).summary()[first]["dsc_mean"]
    stage = "source_only" if args.source_only else "stage2"
    other = "stage2" if args.source_only else "source_only"
    if other in load_manifest(out).get("stages", {}):
        raise UsageError(f"{out} already holds a {other} run; use a separate --out directory")
    log_path = _fresh_log(out / "logs" / f"{stage}.jsonl", args.resume)
    common = dict(out_dir=out, resume=args.resume, device=device(), log_path=log_path,
                  validate=validate)
    with stage_status(out, stage, cfg) as status:
        if args.source_only:
            result = source_only_baseline(cfg, src, **common)
        else:
            result = train_stage2(cfg, src, tgt, gens, **common)
        paths = dict(result.checkpoints)
        best = out / "stage2" / "segnet_best.ckpt"
        if best.exists():
            paths["segnet_best"] = best
        if log_path.exists():
            paths["log"] = log_path
        status.entry = {"paths": _rel(out, paths), "history": result.history,
                        "best_epoch": result.best_epoch}
    return EXIT_OK


def _filter_regions(report: MetricsReport, names):
    if not names:
        return report
    wanted = [n.strip() for n in names.split(",") if n.strip()]
    unknown = [n for n in wanted if n not in report.regions]
    if unknown:
        raise UsageError(f"unknown region(s) {unknown}; available {list(report.regions)}")
    rows = [r for r in report.rows if r["region"] in wanted]
    undefined = [u for u in report.undefined_cases if u["region"] in wanted]
    return MetricsReport(tuple(wanted), rows, undefined, report.method)


def cmd_eval(args):
    root = Path(args.data)
    if not root.is_dir():
        raise UsageError(f"data directory {root} does not exist")
    modality = args.modality
    cases = load_cases(root, args.scheme, (modality,))
    splits = dict(zip(SPLITS, split_cases(cases, seed=subseed(args.seed, "data:split"))))
    split = splits[args.split] if args.split != "all" else cases
    if not split:
        raise UsageError(f"split {args.split!r} is empty")
    out = Path(args.out)
    domain = Domain.SOURCE if args.role == "source" else Domain.TARGET
    if args.self_test:
        stream = make_slice_stream(split, modality, True, 0, tuple(args.image_size), domain, args.scheme)
        report = self_test_split(stream, args.scheme)
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint unless --self-test is given")
        net = load_segnet(args.checkpoint, device())
        stream = make_slice_stream(split, modality, True, 0, net.image_size, domain, args.scheme)
        ck = Path(args.checkpoint).resolve()
        # checkpoints live in <run>/<stage>/; the run name is the natural row label
        method = args.method or (ck.parent.parent.name if ck.parent.name == "stage2" else ck.stem)
        report = evaluate_split(net, stream, args.scheme, method)
        if args.overlays:
            save_overlays(net, stream, out / "overlays", args.scheme)
    report = _filter_regions(report, args.regions)
    report.write(out)
    sys.stdout.write(report.table(latex=args.latex))
    return EXIT_OK


def _find_eval(path: Path):
    for cand in (path, path / "eval"):
        if (cand / "summary.json").exists():
            return cand
    raise UsageError(f"{path} holds no evaluation (summary.json) output")


def comparison_table(reports, latex=False):
    """Method x region table per metric; the best entry of each column is marked."""
    regions = reports[0].regions
    lines = []
    for metric in METRICS:
        better = max if metric == "dsc" else min
        summaries = [r.summary() for r in reports]
        best = {}
        for region in regions:
            vals = [s[region][f"{metric}_mean"] for s in summaries]
            defined = [v for v in vals if v == v]
            best[region] = better(defined) if defined else None
        label = {"dsc": "DSC (%)", "hd95": "HD95 (mm)", "asd": "ASD (mm)"}[metric]
        header = [label] + list(regions)
        rows = []
        for rep, summ in zip(reports, summaries):
            cells = [rep.method or "?"]
            for region in regions:
                m, s = summ[region][f"{metric}_mean"], summ[region][f"{metric}_std"]
                cell = format_mean_std(m, s, latex)
                if best[region] is not None and m == best[region] and len(reports) > 1:
                    cell = f"\\textbf{{{cell}}}" if latex else f"{cell} *"
                cells.append(cell)
            rows.append(cells)
        if latex:
            lines.append(" & ".join(header) + " \\\\")
            lines += [" & ".join(r) + " \\\\" for r in rows]
        else:
            widths = [max(len(x) for x in col) for col in zip(header, *rows)]
            fmt = "  ".join(f"{{:<{w}}}" for w in widths)
            lines.append(fmt.format(*header))
            lines += [fmt.format(*r) for r in rows]
        lines.append("")
    if not latex and len(reports) > 1:
        lines.append("* best in column")
    return "\n".join(lines).rstrip("\n") + "\n"


def cmd_report(args):
    if not args.runs:
        raise UsageError("report needs at least one evaluation directory")
    reports = [load_records(_find_eval(Path(p))) for p in args.runs]
    for p, r in zip(args.runs[1:], reports[1:]):
        if r.regions != reports[0].regions:
            raise UsageError(f"region mismatch: {args.runs[0]} has {list(reports[0].regions)}, "
                             f"{p} has {list(r.regions)}")
    for p, r in zip(args.runs, reports):
        if not r.method:
            r.method = Path(p).name
    text = comparison_table(reports, args.latex)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.txt").write_text(comparison_table(reports))
        (out / "comparison.tex").write_text(comparison_table(reports, latex=True))
    sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def _add_data_args(p):
    p.add_argument("--data", required=True, help="dataset root (one folder per case)")
    p.add_argument("--scheme", default="brats", choices=[s.value for s in LabelScheme])
    p.add_argument("--source-mod", default="modA", help="labeled source modality file stem")
    p.add_argument("--target-mod", default="modB", help="unlabeled target modality file stem")


def _add_train_args(p):
    _add_data_args(p)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--syn-epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--width", type=int, help="SegNet base width")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field")
    p.add_argument("--resume", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="bigl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write a synthetic two-domain lesion dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--cases", type=int, default=30)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--slices", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--gamma", type=float, default=1.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train-syn", help="stage 1: train the cross-modality translators")
    _add_train_args(p)
    p.set_defaults(func=cmd_train_syn)

    p = sub.add_parser("train-uda", help="stage 2: segmentation with global-to-local alignment")
    _add_train_args(p)
    p.add_argument("--stage1", help="stage-1 checkpoint directory (default: <out>/stage1)")
    p.add_argument("--source-only", action="store_true", help="train the source-only baseline")
    p.set_defaults(func=cmd_train_uda)

    p = sub.add_parser("eval", help="per-case DSC / HD95 / ASD on one split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--modality", default="modB")
    p.add_argument("--role", default="target", choices=("source", "target"))
    p.add_argument("--split", default="test", choices=SPLITS + ("all",))
    p.add_argument("--seed", type=int, default=0, help="run seed (selects the same split as training)")
    p.add_argument("--scheme", default="brats", choices=[s.value for s in LabelScheme])
    p.add_argument("--regions", help="comma-separated subset, e.g. WT,TC")
    p.add_argument("--image-size", type=int, nargs=2, default=(64, 64), help="used by --self-test")
    p.add_argument("--method", help="row label in reports")
    p.add_argument("--out", required=True)
    p.add_argument("--self-test", action="store_true", help="score ground truth against itself")
    p.add_argument("--overlays", action="store_true", help="write PNG overlays per case")
    p.add_argument("--latex", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="side-by-side table over evaluation directories")
    p.add_argument("runs", nargs="*")
    p.add_argument("--out")
    p.add_argument("--latex", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(int(os.environ.get("BIGL_THREADS", "1")))
    try:
        return args.func(args)
    except (UsageError, IngestError, InsufficientCases, LabelSchemeViolation) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except CheckpointError as exc:
        log.error("checkpoint failure: %s", exc)
        return EXIT_RUNTIME
    except BiGLError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME
    except Exception:
        log.exception("unexpected failure")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
