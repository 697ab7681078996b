"""Command-line pipeline: each stage reads and writes files under ``--workdir``.

Exit codes: 0 success, 1 verification mismatch, 2 input error,
3 data-degeneracy error, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import glob
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits


from . import data as D
from . import distill as DD
from . import evaluation as E
from . import model as M
from . import selection as S
from .config import ConfigError, PipelineConfig, load_config

log = logging.getLogger("omnifer")

EXIT_OK, EXIT_MISMATCH, EXIT_INPUT, EXIT_DEGENERATE, EXIT_DIVERGED = 0, 1, 2, 3, 4
PROV_SUFFIX = ".prov.json"


class InputError(Exception):
    pass


class Degenerate(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


_ACTIVE: list["Stage"] = []


class Stage:
    """Resolves paths against the workdir and records provenance for one run."""

    def __init__(self, args, cfg: PipelineConfig, name: str):
        self.workdir = Path(args.workdir)
        self.cfg = cfg
        self.name = name
        self.hash = cfg.hash()
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, dict] = {}
        _ACTIVE.append(self)
        log.info("%s: config hash %s", name, self.hash)

    def path(self, rel) -> Path:
        return self.workdir / rel

    def need(self, rel, what: str) -> Path:
        if not rel:
            raise InputError(f"no {what} path given")
        p = self.path(rel)
        if not p.is_file():
            raise InputError(f"{what} not found: {p}")
        self.inputs[str(rel)] = sha256(p)
        return p

    def wrote(self, rel, volatile: bool = False):
        self.outputs[str(rel)] = {"sha256": sha256(self.path(rel)), "volatile": volatile}

    def discard(self) -> None:
        """Remove files this run produced; append-only logs are left alone."""
        for rel, meta in self.outputs.items():
            if not meta["volatile"]:
                self.path(rel).unlink(missing_ok=True)

    def finish(self, primary_rel) -> None:
        prov = {"stage": self.name, "config_hash": self.hash, "config": self.cfg.to_dict(),
                "inputs": dict(sorted(self.inputs.items())),
                "outputs": dict(sorted(self.outputs.items()))}
        target = self.path(str(primary_rel) + PROV_SUFFIX)
        target.write_text(json.dumps(prov, indent=2, sort_keys=True) + "\n")


def write_trace(path: Path, values, config_hash: str, header: str) -> None:
    lines = [f"# {header} config_hash={config_hash}"]
    lines += [f"{i}\t{v:.9e}" for i, v in enumerate(values)]
    path.write_text("\n".join(lines) + "\n")


def read_trace(path) -> list[float]:
    return [float(line.split("\t")[1]) for line in Path(path).read_text().splitlines()
            if line and not line.startswith("#")]


def _labeled(path: Path) -> D.LabeledDataset:
    ds = D.load_dataset(path)
    if not isinstance(ds, D.LabeledDataset):
        raise InputError(f"{path} is not a labeled dataset")
    return ds


def _pool(path: Path) -> D.UnlabeledPool:
    ds = D.load_dataset(path)
    if isinstance(ds, D.LabeledDataset):
        # a labeled file can serve as a pool; its labels are ignored
        return D.UnlabeledPool(ds.images, name=ds.name)
    return ds


def _check_arch(cfg: PipelineConfig, ds) -> None:
    if tuple(ds.image_shape) != cfg.architecture.input_shape:
        raise InputError(f"dataset image shape {ds.image_shape} does not match architecture "
                         f"input_shape {cfg.architecture.input_shape}")
    if isinstance(ds, D.LabeledDataset) and ds.num_classes != cfg.architecture.num_classes:
        raise InputError(f"dataset has {ds.num_classes} classes, architecture {cfg.architecture.num_classes}")


def _train(cfg: PipelineConfig, data: D.LabeledDataset) -> M.TrainResult:
    params = M.init_params(cfg.architecture, cfg.train.seed)
    return M.train_classifier(params, data, cfg.train)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args, cfg):
    st = Stage(args, cfg, "synth")
    spec_path = st.need(args.spec, "synthetic spec")
    spec = D.SyntheticSpec.from_text(spec_path.read_text())
    draw = D.make_synthetic(spec)
    prefix = args.prefix
    outs = {"anchor": draw.anchor, "test": draw.test, "pool": draw.pool, "shifted": draw.shifted_test}
    first = None
    for name, ds in outs.items():
        if ds is None:
            continue
        rel = f"{prefix}{name}.odim"
        st.path(rel).parent.mkdir(parents=True, exist_ok=True)
        D.save_dataset(ds, st.path(rel))
        st.wrote(rel)
        first = first or rel
        print(f"{name}: {len(ds)} images -> {rel}")
    st.finish(first)
    return EXIT_OK


def cmd_train_primitive(args, cfg):
    st = Stage(args, cfg, "train-primitive")
    anchor = _labeled(st.need(cfg.paths.get("anchor"), "anchor dataset"))
    _check_arch(cfg, anchor)
    result = _train(cfg, anchor)
    out = cfg.paths["checkpoint"]
    M.save_checkpoint(result.params, st.path(out), st.hash)
    st.wrote(out)
    trace = out + ".loss.txt"
    write_trace(st.path(trace), result.losses, st.hash, "epoch\tmean_train_loss")
    st.wrote(trace)
    st.finish(out)
    print(f"trained {cfg.train.epochs} epochs, final loss {result.losses[-1] if result.losses else float('nan'):.4f}")
    return EXIT_OK


def cmd_select(args, cfg):
    st = Stage(args, cfg, "select")
    params, _ = M.load_checkpoint(st.need(cfg.paths["checkpoint"], "checkpoint"))
    anchor = _labeled(st.need(cfg.paths.get("anchor"), "anchor dataset"))
    pool = _pool(st.need(cfg.paths.get("pool"), "unlabeled pool"))
    _check_arch(cfg, anchor)
    _check_arch(cfg, pool)
    try:
        centers = S.compute_centroids(M.forward_features(params, anchor.images), anchor.labels,
                                      anchor.num_classes)
    except S.EmptyClass as exc:
        raise Degenerate(f"anchor class {exc.k} is empty; cannot form its centroid") from exc
    aux = S.assign_pseudo_labels(pool, params, centers, cfg.selection)
    if len(aux) == 0:
        log.warning("no pool sample passed the margin delta=%g; manifest is empty", cfg.selection.delta)
    out = cfg.paths["manifest"]
    S.write_manifest(aux, st.path(out), st.hash)
    st.wrote(out)
    if len(aux):
        report = S.selection_report(aux)
    else:
        report = {"total": 0, "counts": [0] * anchor.num_classes, "distance": {}, "sorted_ids": {}}
    report["config_hash"] = st.hash
    rep = out + ".report.json"
    st.path(rep).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    st.wrote(rep)
    st.finish(out)
    print(f"selected {len(aux)} of {len(pool)} pool samples; per class {report['counts']}")
    return EXIT_OK


def _aux(st: Stage, cfg: PipelineConfig) -> S.AuxiliaryDataset:
    manifest = st.need(cfg.paths["manifest"], "selection manifest")
    pool = _pool(st.need(cfg.paths.get("pool"), "unlabeled pool"))
    _check_arch(cfg, pool)
    return S.aux_from_manifest(manifest, pool, cfg.architecture.num_classes)


def snapshot_name(out: str, iteration: int) -> str:
    stem = out[:-5] if out.endswith(".odds") else out
    return f"{stem}.snap-{iteration:06d}.odds"


def cmd_distill(args, cfg):
    st = Stage(args, cfg, "distill")
    aux = _aux(st, cfg)
    if len(aux) == 0:
        raise Degenerate("the selection manifest is empty; nothing to distill")
    dcfg = cfg.distill
    start = None
    if args.resume:
        start = DD.load_distilled(st.need(args.resume, "snapshot"))
        log.info("resuming from iteration %d", start.iteration)
    out = cfg.paths["distilled"]

    def on_snapshot(snap):
        rel = snapshot_name(out, snap.iteration)
        DD.save_distilled(snap, st.path(rel))
        st.wrote(rel)

    try:
        result = DD.distill(aux.images, aux.pseudo_labels, cfg.architecture, dcfg, start=start,
                            config_hash=st.hash, on_snapshot=on_snapshot)
    except DD.MissingClassError as exc:
        raise Degenerate(str(exc)) from exc
    DD.save_distilled(result.distilled, st.path(out))
    st.wrote(out)
    trace = out + ".loss.txt"
    first = start.iteration if start else 0
    lines = [f"# iteration\tmean_outer_loss config_hash={st.hash}"]
    lines += [f"{first + i}\t{v:.9e}" for i, v in enumerate(result.losses)]
    st.path(trace).write_text("\n".join(lines) + "\n")
    st.wrote(trace)
    st.finish(out)
    print(f"distilled {result.distilled.n} images over {len(result.losses)} iterations, "
          f"eta={result.distilled.eta:.4g}, {len(result.snapshots)} snapshots")
    return EXIT_OK


def cmd_train_final(args, cfg):
    if (args.distilled is None) == (args.vas is None):
        raise InputError("train-final needs exactly one auxiliary source: --distilled or --vas")
    st = Stage(args, cfg, "train-final")
    anchor = _labeled(st.need(cfg.paths.get("anchor"), "anchor dataset"))
    _check_arch(cfg, anchor)
    if args.distilled is not None:
        ds = DD.load_distilled(st.need(cfg.paths["distilled"], "distilled set"))
        extra = E.distilled_as_dataset(ds, anchor.num_classes)
        source = "das"
    else:
        extra = _aux(st, cfg).to_labeled()
        source = "vas"
    train = D.concat(anchor, extra, f"anchor+{source}") if len(extra) else anchor
    test = _labeled(st.need(cfg.paths.get("test"), "test dataset"))
    result = _train(cfg, train)
    out = cfg.paths["final_checkpoint"]
    M.save_checkpoint(result.params, st.path(out), st.hash)
    st.wrote(out)
    report = E.evaluate(result.params, test).to_dict()
    report.pop("seconds")
    report.update(config_hash=st.hash, source=source, train_size=len(train))
    rep = out + ".report.json"
    st.path(rep).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    st.wrote(rep)
    write_trace(st.path(out + ".loss.txt"), result.losses, st.hash, "epoch\tmean_train_loss")
    st.wrote(out + ".loss.txt")
    st.finish(out)
    print(f"{source}: trained on {len(train)} samples, test accuracy {report['accuracy']:.4f}")
    return EXIT_OK


def cmd_eval(args, cfg):
    st = Stage(args, cfg, "eval")
    params, _ = M.load_checkpoint(st.need(args.checkpoint or cfg.paths["final_checkpoint"], "checkpoint"))
    ds = _labeled(st.need(args.dataset or cfg.paths.get("test"), "evaluation dataset"))
    report = E.evaluate(params, ds)
    out = cfg.paths["records"]
    E.append_records(st.path(out), [{"condition": args.condition, "seed": cfg.train.seed,
                                     "epoch": cfg.train.epochs, "split": args.split,
                                     "accuracy": report.accuracy, "seconds": report.seconds}])
    st.wrote(out, volatile=True)
    st.finish(out + ".eval")
    print(json.dumps({k: v for k, v in report.to_dict().items() if k != "per_class_accuracy"}))
    return EXIT_OK


def cmd_compare(args, cfg):
    st = Stage(args, cfg, "compare")
    anchor = _labeled(st.need(cfg.paths.get("anchor"), "anchor dataset"))
    test = _labeled(st.need(cfg.paths.get("test"), "test dataset"))
    _check_arch(cfg, anchor)
    vas = _aux(st, cfg).to_labeled()
    das = DD.load_distilled(st.need(cfg.paths["distilled"], "distilled set"))
    seeds = [int(s) for s in args.seeds.split(",")]
    try:
        cmp = E.compare_conditions(anchor, vas if len(vas) else None, das, cfg.architecture,
                                   cfg.train, seeds, test)
    except E.ConditionFailed as exc:
        raise InputError(str(exc)) from exc
    out = cfg.paths["records"]
    E.append_records(st.path(out), cmp.rows)
    st.wrote(out, volatile=True)
    st.finish(out + ".compare")
    for cond, s in cmp.summary.items():
        print(f"{cond:9s} acc {s['mean']:.4f} +- {s['sd']:.4f}  "
              f"{s['seconds_per_epoch'] * 1e3:.2f} ms/epoch  n={s['size']}")
    return EXIT_OK


def cmd_probe(args, cfg):
    st = Stage(args, cfg, "probe")
    files = []
    for pattern in args.snapshots:
        matches = sorted(glob.glob(str(st.path(pattern))))
        if not matches:
            raise InputError(f"no snapshot matches {pattern}")
        files.extend(matches)
    snaps = [DD.load_distilled(st.need(os.path.relpath(f, st.workdir), "snapshot")) for f in files]
    probe_cfg = replace(cfg.train, flip_prob=0.0) if args.no_flip else cfg.train
    try:
        result = E.pattern_probe(snaps, cfg.architecture, probe_cfg, split_seed=cfg.seed)
    except ValueError as exc:
        raise Degenerate(str(exc)) from exc
    out = cfg.paths["records"]
    E.append_records(st.path(out), [{"condition": "probe", "seed": cfg.train.seed, "epoch": e + 1,
                                     "split": "test", "accuracy": a, "seconds": None}
                                    for e, a in enumerate(result.curve)])
    st.wrote(out, volatile=True)
    if args.plot:
        st.path(args.plot).write_text(E.plot_columns(result.curve))
        st.wrote(args.plot)
    st.finish(out + ".probe")
    print(f"probe: {len(snaps)} snapshots, split {result.n_train}/{result.n_test}, "
          f"final held-out accuracy {result.curve[-1] if result.curve else float('nan'):.4f}")
    return EXIT_OK


def _embedded_hash(path: Path) -> str | None:
    name = path.name
    try:
        if name.endswith(".odmp"):
            return M.load_checkpoint(path)[1]
        if name.endswith(".odds"):
            return DD.load_distilled(path).config_hash
        if name.endswith(".json"):
            return json.loads(path.read_text()).get("config_hash")
        if name.endswith((".tsv", ".txt")):
            first = path.read_text().splitlines()[0]
            for tok in first.split():
                if tok.startswith("config_hash="):
                    return tok.split("=", 1)[1]
    except Exception:
        return None
    return None


def _strip_volatile(path: Path) -> list:
    rows = []
    for line in path.read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            rec.pop("seconds", None)
            rows.append(rec)
    return rows


def cmd_verify(args, cfg):
    root = Path(args.workdir)
    provs = sorted(root.rglob("*" + PROV_SUFFIX))
    if not provs:
        raise InputError(f"no provenance records under {root}")
    problems = []
    latest: dict[str, tuple[str, dict]] = {}
    for prov_path in provs:
        prov = json.loads(prov_path.read_text())
        for rel, digest in prov["inputs"].items():
            if (root / rel).is_file() and rel in latest:
                pass  # an input may legitimately have been regenerated by a later stage
        for rel, meta in prov["outputs"].items():
            latest[rel] = (prov["config_hash"], meta)
            p = root / rel
            if not p.is_file():
                problems.append(f"{rel}: missing (recorded by {prov['stage']})")
                continue
            if not meta.get("volatile") and sha256(p) != meta["sha256"]:
                problems.append(f"{rel}: content changed since {prov['stage']} wrote it")
            embedded = _embedded_hash(p)
            if embedded is not None and embedded != prov["config_hash"]:
                problems.append(f"{rel}: embeds config hash {embedded}, provenance says {prov['config_hash']}")
    # every recorded input must match the output hash of the stage that produced it
    for prov_path in provs:
        prov = json.loads(prov_path.read_text())
        for rel, digest in prov["inputs"].items():
            if rel in latest and not latest[rel][1].get("volatile") and latest[rel][1]["sha256"] != digest:
                problems.append(f"{rel}: {prov['stage']} consumed a different version than the one on disk")
    if args.against:
        other = Path(args.against)
        for rel, (_, meta) in sorted(latest.items()):
            a, b = root / rel, other / rel
            if not b.is_file():
                problems.append(f"{rel}: missing in {other}")
            elif meta.get("volatile"):
                if _strip_volatile(a) != _strip_volatile(b):
                    problems.append(f"{rel}: records differ (timing fields ignored)")
            elif a.read_bytes() != b.read_bytes():
                problems.append(f"{rel}: differs from {other / rel}")
    for p in problems:
        print("MISMATCH", p)
    print(f"verified {len(latest)} artifacts from {len(provs)} stage runs: "
          f"{'OK' if not problems else f'{len(problems)} problem(s)'}")
    return EXIT_OK if not problems else EXIT_MISMATCH


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", default=".", help="all relative paths resolve here")
    common.add_argument("--config", help="INI config file (relative to workdir)")
    common.add_argument("--threads", type=int, default=int(os.environ.get("OD_THREADS", "1")))
    common.add_argument("--seed", type=int, help="global seed override")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="omnifer", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate synthetic ODIM datasets")
    s.add_argument("--spec", required=True)
    s.add_argument("--prefix", default="data/")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train-primitive", parents=[common], help="train on anchor data only")
    s.add_argument("--anchor")
    s.add_argument("--out", dest="checkpoint")
    _train_flags(s)
    s.set_defaults(func=cmd_train_primitive)

    s = sub.add_parser("select", parents=[common], help="pseudo-label the pool by centroid margin")
    s.add_argument("--checkpoint")
    s.add_argument("--anchor")
    s.add_argument("--pool")
    s.add_argument("--delta", type=float)
    s.add_argument("--cap", type=int, dest="per_class_cap")
    s.add_argument("--out", dest="manifest")
    s.set_defaults(func=cmd_select)

    s = sub.add_parser("distill", parents=[common], help="distill the selected samples")
    s.add_argument("--aux", dest="manifest", help="selection manifest")
    s.add_argument("--pool", help="pool the manifest indexes into")
    s.add_argument("--arch", help="config file whose [architecture] section to use")
    s.add_argument("--n", type=int)
    s.add_argument("--eta0", type=float)
    s.add_argument("--alpha", type=float)
    s.add_argument("--batch", type=int, dest="batch_size")
    s.add_argument("--iters", type=int)
    s.add_argument("--weight-draws", type=int, dest="weight_draws")
    s.add_argument("--inner-steps", type=int, dest="inner_steps")
    s.add_argument("--snapshot-every", type=int, dest="snapshot_every")
    s.add_argument("--resume", help="snapshot to resume from")
    s.add_argument("--out", dest="distilled")
    s.set_defaults(func=cmd_distill)

    s = sub.add_parser("train-final", parents=[common], help="train on anchor plus one auxiliary source")
    s.add_argument("--anchor")
    s.add_argument("--test")
    src = s.add_argument_group("auxiliary source (exactly one)")
    src.add_argument("--distilled", nargs="?", const="", default=None, help="distilled set (DAS)")
    src.add_argument("--vas", "--manifest", nargs="?", const="", default=None, help="selection manifest (VAS)")
    s.add_argument("--pool")
    s.add_argument("--out", dest="final_checkpoint")
    _train_flags(s)
    s.set_defaults(func=cmd_train_final)

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    s.add_argument("--checkpoint")
    s.add_argument("--dataset")
    s.add_argument("--condition", default="eval")
    s.add_argument("--split", default="test")
    s.add_argument("--records")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("compare", parents=[common], help="baseline vs VAS vs DAS over seeds")
    s.add_argument("--anchor")
    s.add_argument("--test")
    s.add_argument("--aux", dest="manifest")
    s.add_argument("--pool")
    s.add_argument("--distilled")
    s.add_argument("--seeds", default="0,1,2")
    s.add_argument("--records")
    _train_flags(s)
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("probe", parents=[common], help="classifier probe on distillation snapshots")
    s.add_argument("snapshots", nargs="+", help="snapshot files or glob patterns")
    s.add_argument("--records")
    s.add_argument("--plot", help="write (epoch, accuracy) columns here")
    s.add_argument("--no-flip", action="store_true")
    _train_flags(s)
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("verify", parents=[common], help="check artifact hashes and provenance")
    s.add_argument("--against", help="second workdir whose artifacts must be byte-identical")
    s.set_defaults(func=cmd_verify)
    return p


# argparse dest -> (config section, key)
_OVERRIDES = {
    **{k: ("paths", k) for k in ("anchor", "pool", "test", "checkpoint", "manifest", "distilled",
                                 "final_checkpoint", "records")},
    "delta": ("selection", "delta"),
    "per_class_cap": ("selection", "per_class_cap"),
    **{k: ("distill", k) for k in ("n", "eta0", "alpha", "batch_size", "iters", "weight_draws",
                                   "inner_steps", "snapshot_every")},
    "epochs": ("train", "epochs"),
    "learning_rate": ("train", "learning_rate"),
    "train_batch_size": ("train", "batch_size"),
}


def _train_flags(parser) -> None:
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--learning-rate", type=float, dest="learning_rate")
    parser.add_argument("--batch-size", type=int, dest="train_batch_size")


def resolve_config(args) -> PipelineConfig:
    overrides: dict[str, dict] = {}
    for dest, (section, key) in _OVERRIDES.items():
        value = getattr(args, dest, None)
        if value not in (None, ""):
            overrides.setdefault(section, {})[key] = value
    if args.seed is not None:
        overrides["global"] = {"seed": args.seed}
    # train-final --distilled PATH / --vas PATH name the aux file directly
    if getattr(args, "distilled", None) and args.command == "train-final":
        overrides.setdefault("paths", {})["distilled"] = args.distilled
    if getattr(args, "vas", None) and args.command == "train-final":
        overrides.setdefault("paths", {})["manifest"] = args.vas
    workdir = Path(args.workdir)
    cfg_path = workdir / args.config if args.config else None
    cfg = load_config(cfg_path, overrides)
    if getattr(args, "arch", None):
        cfg.architecture = load_config(workdir / args.arch).architecture
    return cfg


def _main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _ACTIVE.clear()
    if args.threads < 1:
        raise InputError("--threads must be >= 1")
    try:
        cfg = resolve_config(args)
        # BLAS thread count changes reduction order; 1 keeps outputs bit-identical
        with threadpool_limits(limits=args.threads):
            return args.func(args, cfg)
    except BaseException:
        for st in _ACTIVE:
            st.discard()
        raise
    finally:
        _ACTIVE.clear()


def main(argv=None) -> int:
    try:
        return _main(argv)
    except (InputError, ConfigError, D.DatasetFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Degenerate as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except DD.DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        # malformed files and out-of-range settings surface as ValueError
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
