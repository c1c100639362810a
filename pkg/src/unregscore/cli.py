"""``unregscore`` command line: generate, train, score, eval, heatmap, sweep.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.  Logs go to stderr; results only to files.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import itertools
import json
import logging
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data, evaluation, experiment, gmm, vae
from .config import ExperimentConfig, load_config, parse_config
from .errors import ConfigError, DataError, NumericalError, ShapeError, UnregScoreError
from .scoring import read_scores_csv, write_scores_csv

log = logging.getLogger("unregscore")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


@dataclass
class RunManifest:
    """What a command did: inputs, outputs and how long it took."""

    command: str
    config_hash: str
    seed: int | None
    versions: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    started_at: str = ""

    def write(self, out_dir: Path) -> Path:
        path = out_dir / f"run_{self.command}.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("unregscore", "numpy", "scipy"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = "unknown"
    return out


class _Parser(argparse.ArgumentParser):
    # usage errors share exit code 1 with configuration errors
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _write_rows(path: Path, rows: Sequence[dict]) -> None:
    if not rows:
        raise DataError(f"nothing to write to {path}")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def _manifest_path(p: str | Path, default_name: str) -> Path:
    """Accept either a manifest CSV or a directory containing ``default_name``."""
    p = Path(p)
    return p / default_name if p.is_dir() else p


def _resolve_config(args) -> ExperimentConfig:
    return load_config(args.config, args.seed)


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    out = Path(args.out or cfg.eval.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from None
    return out


def _manifest(args, cfg: ExperimentConfig) -> RunManifest:
    return RunManifest(
        command=args.command,
        config_hash=cfg.digest(),
        seed=cfg.training.seed,
        versions=_versions(),
        started_at=time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    )


def load_checkpoint(path: str | Path) -> experiment.FittedModel:
    """Load a VAE/AE checkpoint or a GMM checkpoint, telling them apart by magic bytes."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint {path} does not exist")
    with open(path, "rb") as fh:
        magic = fh.read(8)
    if magic == gmm._MAGIC:
        model, pca = gmm.load_gmm(path)
        if pca is None:
            raise DataError(f"{path}: GMM checkpoint has no PCA model")
        return model, pca
    return vae.load_model(path)


def _check_kind(cfg: ExperimentConfig, model) -> None:
    kind = experiment.model_kind(model)
    if kind != cfg.model.kind:
        raise ConfigError(f"checkpoint holds a {kind} model but the config asks for {cfg.model.kind}")


# -- commands --------------------------------------------------------------


def cmd_generate(args) -> tuple[RunManifest, Path]:
    cfg = _resolve_config(args)
    if cfg.dataset.source != "synthetic":
        raise ConfigError("generate needs [dataset] source = synthetic")
    out = _out_dir(args, cfg)
    man = _manifest(args, cfg)
    t0 = time.perf_counter()
    split = experiment.load_split(cfg)
    train_csv = data.save_images(out, "train", split.train)
    test_csv = data.save_images(out, "test", split.test)
    descriptor = {
        "seed": cfg.dataset.synth.seed,
        "image_size": cfg.dataset.synth.image_size,
        "rho_train": cfg.dataset.rho_train,
        "erase_size": cfg.dataset.erase_size,
        "n_train": len(split.train),
        "n_train_anomalous": sum(im.label for im in split.train),
        "n_test": len(split.test),
        "n_test_anomalous": sum(im.label for im in split.test),
    }
    (out / "split.json").write_text(json.dumps(descriptor, indent=2, sort_keys=True) + "\n")
    man.timings["generate_s"] = time.perf_counter() - t0
    man.artifacts = {"train_manifest": str(train_csv), "test_manifest": str(test_csv), "split": str(out / "split.json")}
    man.metrics = descriptor
    log.info("wrote %d train and %d test images to %s", len(split.train), len(split.test), out)
    return man, out


def _train_images(args, cfg: ExperimentConfig) -> list[data.LabeledImage]:
    if args.data:
        return data.load_directory(_manifest_path(args.data, "train.csv"))
    return experiment.load_split(cfg).train


def cmd_train(args) -> tuple[RunManifest, Path]:
    cfg = _resolve_config(args)
    out = _out_dir(args, cfg)
    man = _manifest(args, cfg)
    t0 = time.perf_counter()
    images = _train_images(args, cfg)
    man.timings["load_s"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    model, trace = experiment.fit(cfg, images)
    man.timings["train_s"] = time.perf_counter() - t0
    if cfg.model.kind == "gmm":
        ckpt = out / "gmm.bin"
        gmm.save_gmm(ckpt, *model)
        man.artifacts["sidecar"] = None
    else:
        ckpt = out / "model.bin"
        man.artifacts["sidecar"] = str(vae.save_model(ckpt, model))
    trace_csv = out / "trace.csv"
    _write_rows(trace_csv, trace)
    man.artifacts.update({"checkpoint": str(ckpt), "trace": str(trace_csv)})
    last = trace[-1]
    man.metrics = {k: v for k, v in last.items() if k not in ("epoch", "iteration")}
    man.metrics["n_train"] = len(images)
    log.info("saved %s", ckpt)
    return man, out


def cmd_score(args) -> tuple[RunManifest, Path]:
    cfg = _resolve_config(args)
    out = _out_dir(args, cfg)
    man = _manifest(args, cfg)
    model = load_checkpoint(args.checkpoint)
    _check_kind(cfg, model)
    if args.data:
        images = data.load_directory(_manifest_path(args.data, "test.csv"))
        ids = [im.name for im in images]
    else:
        images = experiment.load_split(cfg).test
        ids = [str(i) for i in range(len(images))]
    stride = args.stride or cfg.eval.stride
    t0 = time.perf_counter()
    rows = experiment.score_images(model, images, stride, ids)
    man.timings["score_s"] = time.perf_counter() - t0
    scores_csv = out / "scores.csv"
    write_scores_csv(scores_csv, rows)
    man.artifacts = {"checkpoint": str(args.checkpoint), "scores": str(scores_csv)}
    man.metrics = {"n_samples": len(images), "n_patches": len(rows)}
    log.info("scored %d patches from %d images", len(rows), len(images))
    return man, out


def cmd_eval(args) -> tuple[RunManifest, Path]:
    cfg = _resolve_config(args)
    out = _out_dir(args, cfg)
    man = _manifest(args, cfg)
    if not args.scores:
        raise ConfigError("eval needs --scores")
    cols = read_scores_csv(args.scores)
    kinds = [args.kind] if args.kind else list(cfg.eval.kinds)
    samples = experiment.aggregate(cols, kinds)
    curves = experiment.aucs(samples)
    metrics_rows = [{"kind": k, "auc": curves[k].auc, "n_samples": len(samples.ids)} for k in kinds]
    _write_rows(out / "metrics.csv", metrics_rows)
    evaluation.write_roc_csv(out / "roc.csv", curves)
    (out / "roc.gp").write_text(evaluation.gnuplot_roc_script(out / "roc.csv", kinds))
    stats = {k: evaluation.cluster_boxstats(samples.scores[k], samples.labels, samples.clusters) for k in kinds}
    centered = {
        k: evaluation.cluster_boxstats(samples.scores[k], samples.labels, samples.clusters, center="median") for k in kinds
    }
    evaluation.write_cluster_stats_csv(out / "cluster_stats.csv", stats)
    evaluation.write_cluster_stats_csv(out / "cluster_stats_centered.csv", centered)
    man.artifacts = {
        "scores": str(args.scores),
        "metrics": str(out / "metrics.csv"),
        "roc": str(out / "roc.csv"),
        "cluster_stats": str(out / "cluster_stats.csv"),
    }
    man.metrics = {f"auc_{k}": curves[k].auc for k in kinds}
    for k in kinds:
        log.info("AUC(%s) = %.4f", k, curves[k].auc)
    return man, out


def cmd_heatmap(args) -> tuple[RunManifest, Path]:
    cfg = _resolve_config(args)
    out = _out_dir(args, cfg)
    man = _manifest(args, cfg)
    if not args.image:
        raise ConfigError("heatmap needs --image")
    model = load_checkpoint(args.checkpoint)
    kind = args.kind or "M"
    stride = args.stride or cfg.eval.heatmap_stride
    pixels = data.read_image(args.image)
    hm = experiment.heatmap(model, pixels, kind, stride)
    stem = Path(args.image).stem
    pgm = out / f"{stem}_{kind}_heatmap.pgm"
    data.write_image(pgm, 1.0 - hm.normalized)
    table = out / f"{stem}_{kind}_heatmap.csv"
    with open(table, "w", newline="") as fh:
        fh.write(f"# kind={kind} raw_min={float(hm.raw.min())!r} raw_max={float(hm.raw.max())!r} patch={hm.grid.size} stride={stride}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "raw", "normalized"])
        for (r, c), v in np.ndenumerate(hm.raw):
            w.writerow([r, c, repr(float(v)), repr(float(hm.normalized[r, c]))])
    man.artifacts = {"checkpoint": str(args.checkpoint), "image": str(args.image), "heatmap": str(pgm), "table": str(table)}
    man.metrics = {"raw_min": float(hm.raw.min()), "raw_max": float(hm.raw.max()), "argmax_cell": list(hm.argmax_cell)}
    return man, out


def _parse_grid(items: Sequence[str]) -> list[tuple[str, str, list[str]]]:
    grid = []
    for item in items:
        key, sep, values = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or not values:
            raise ConfigError(f"--grid expects section.key=v1,v2,..., got {item!r}")
        grid.append((section, name, [v.strip() for v in values.split(",") if v.strip()]))
    return grid


def cmd_sweep(args) -> tuple[RunManifest, Path]:
    base = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    base_dir = Path(".")
    if args.config:
        if not Path(args.config).exists():
            raise ConfigError(f"config file {args.config} does not exist")
        base.read(args.config)
        base_dir = Path(args.config).parent
    cfg0 = parse_config(base, seed=args.seed, base_dir=base_dir)
    out = _out_dir(args, cfg0)
    man = _manifest(args, cfg0)
    grid = _parse_grid(args.grid or ["model.n_z=1,2,5,10,20"])
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg0.training.seed]
    rows = []
    t0 = time.perf_counter()
    for combo in itertools.product(*(vals for _, _, vals in grid)):
        cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        cp.read_dict(base)
        for (section, name, _), value in zip(grid, combo):
            if not cp.has_section(section):
                cp.add_section(section)
            cp[section][name] = value
        for seed in seeds:
            cfg = parse_config(cp, seed=seed, base_dir=base_dir)
            res = experiment.run_benchmark(cfg)
            row = {f"{s}.{n}": v for (s, n, _), v in zip(grid, combo)}
            row["seed"] = seed
            row.update({f"auc_{k}": res["auc"][k] for k in cfg.eval.kinds})
            rows.append(row)
            log.info("sweep %s", row)
    _write_rows(out / "sweep.csv", rows)
    # median over seeds for each grid point
    summary = []
    keys = [f"{s}.{n}" for s, n, _ in grid]
    for combo in itertools.product(*(vals for _, _, vals in grid)):
        sel = [r for r in rows if all(r[k] == v for k, v in zip(keys, combo))]
        entry = dict(zip(keys, combo))
        for k in cfg0.eval.kinds:
            entry[f"median_auc_{k}"] = float(np.median([r[f"auc_{k}"] for r in sel]))
        summary.append(entry)
    _write_rows(out / "sweep_summary.csv", summary)
    man.timings["sweep_s"] = time.perf_counter() - t0
    man.artifacts = {"sweep": str(out / "sweep.csv"), "summary": str(out / "sweep_summary.csv")}
    man.metrics = {"runs": len(rows)}
    return man, out


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "score": cmd_score,
    "eval": cmd_eval,
    "heatmap": cmd_heatmap,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="unregscore", description="Unregularized anomaly scores for VAEs and GMMs.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="INI experiment config")
        sp.add_argument("--seed", type=int, help="overrides [training] seed")
        sp.add_argument("--out", help="output directory (default [eval] out_dir)")

    sp = sub.add_parser("generate", help="write the synthetic benchmark as PGM files")
    common(sp)
    sp = sub.add_parser("train", help="fit a VAE, AE or GMM")
    common(sp)
    sp.add_argument("--data", help="train manifest or a directory holding train.csv")
    sp = sub.add_parser("score", help="per-patch (D, A, M, L) scores")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", help="test manifest or a directory holding test.csv")
    sp.add_argument("--stride", type=int, help="patch stride")
    sp = sub.add_parser("eval", help="AUCs, ROC curves and per-cluster statistics")
    common(sp)
    sp.add_argument("--scores", required=True)
    sp.add_argument("--kind", choices=["L", "D", "A", "M"])
    sp = sub.add_parser("heatmap", help="sliding-window score map of one image")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True, help="PGM image")
    sp.add_argument("--kind", choices=["L", "D", "A", "M"], default="M")
    sp.add_argument("--stride", type=int, help="patch stride (default [eval] heatmap_stride)")
    sp = sub.add_parser("sweep", help="benchmark AUCs over a hyperparameter grid")
    common(sp)
    sp.add_argument("--grid", action="append", help="section.key=v1,v2,... (repeatable; default model.n_z=1,2,5,10,20)")
    sp.add_argument("--seeds", help="comma-separated seeds (default: the config seed)")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    t0 = time.perf_counter()
    try:
        man, out = COMMANDS[args.command](args)
        man.timings["total_s"] = time.perf_counter() - t0
        man.write(out)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (DataError, ShapeError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except NumericalError as exc:
        log.error("%s", exc)
        return EXIT_NUMERICAL
    except UnregScoreError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
