"""``aerodetect`` command line.

Settings resolve as flags > environment (AERODETECT_CACHE, AERODETECT_DEVICE) >
``--config`` JSON file > built-in defaults. Logs go to stderr, data goes to the
``--out`` files (written atomically), stdout only carries short summaries.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field

from . import __version__
from .ae_backends import BUILTIN_DESCRIPTORS, DEFAULT_POOL, REGISTRY_VERSION, build_pool, load_descriptors

logger = logging.getLogger("aerodetect")

DEFAULTS = {
    "cache_dir": None,
    "aes": list(DEFAULT_POOL),
    "metric": "lpips-vgg16-l2",
    "fpr": 0.05,
    "device": "cpu",
    "seed": 0,
    "workers": 1,
}
ENV = {"cache_dir": "AERODETECT_CACHE", "device": "AERODETECT_DEVICE"}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    cache_dir: str | None = None
    aes: list[str] = field(default_factory=lambda: list(DEFAULT_POOL))
    metric: str = "lpips-vgg16-l2"
    fpr: float = 0.05
    device: str = "cpu"
    seed: int = 0
    workers: int = 1
    descriptors: list = field(default_factory=list)


def resolve_config(args: argparse.Namespace, environ=os.environ) -> RunConfig:
    values = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        unknown = set(file_cfg) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        values.update(file_cfg)
    for key, var in ENV.items():
        if environ.get(var):
            values[key] = environ[var]
    for key in DEFAULTS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    if isinstance(values["aes"], str):
        values["aes"] = [a for a in values["aes"].split(",") if a]
    cfg = RunConfig(**values)
    if getattr(args, "ae_config", None):
        try:
            cfg.descriptors = load_descriptors(args.ae_config)
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise UsageError(f"bad autoencoder descriptor file {args.ae_config}: {exc}") from exc
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    from .distances import REGISTRY

    if cfg.metric not in REGISTRY:
        raise UsageError(f"unknown metric {cfg.metric!r}; see `aerodetect metrics list`")
    known = set(BUILTIN_DESCRIPTORS) | {d.ae_id for d in cfg.descriptors}
    bad = [a for a in cfg.aes if a not in known]
    if bad or not cfg.aes:
        raise UsageError(f"unknown autoencoder(s) {', '.join(bad) or '(empty pool)'}; known: {', '.join(sorted(known))}")
    if not 0.0 < float(cfg.fpr) < 1.0:
        raise UsageError("--fpr must lie in (0, 1)")
    if int(cfg.workers) < 1:
        raise UsageError("--workers must be >= 1")


def _pool(cfg: RunConfig):
    return build_pool(cfg.aes, cfg.descriptors, device=cfg.device)


# -- subcommands ---------------------------------------------------------------


def cmd_metrics(args, cfg):
    from .distances import REGISTRY
    from .distances.backbones import provenance

    for mid, spec in REGISTRY.items():
        extra = f"  backbone={spec.backbone} ({provenance(spec.backbone)})" if spec.backbone else ""
        print(f"{mid}  map={'yes' if spec.has_map else 'no'}{extra}")
    return 0


def cmd_detect(args, cfg):
    from .data_io import load_manifest, persist_scores
    from .detector import decide, score_manifest

    manifest = load_manifest(args.manifest)
    result = score_manifest(manifest, _pool(cfg), cfg.metric, cfg.cache_dir, workers=cfg.workers, device=cfg.device)
    persist_scores(result.records, args.out)
    msg = result.summary()
    if args.threshold is not None:
        decisions = [decide(s, args.threshold) for s in result.scores]
        if args.decisions_out:
            from .data_io import atomic_write_text

            lines = [
                json.dumps(
                    {
                        "path": d.score.path,
                        "content_hash": d.score.content_hash,
                        "min_value": d.score.min_value,
                        "argmin_ae": d.score.argmin_ae,
                        "threshold": d.threshold,
                        "is_generated": d.is_generated,
                    }
                )
                for d in decisions
            ]
            atomic_write_text(args.decisions_out, "".join(line + "\n" for line in lines))
        msg += f"; {sum(d.is_generated for d in decisions)} flagged as generated at threshold {args.threshold:g}"
    print(msg)
    return 0


def cmd_attribute(args, cfg):
    from .data_io import load_scores, write_json
    from .detector import attribute, attribute_by_dataset, scores_from_records

    scores = scores_from_records(load_scores(args.scores), args.aes.split(",") if args.aes else None)
    out = {"overall": attribute(scores), "per_dataset": attribute_by_dataset(scores), "n_images": len(scores)}
    write_json(args.out, out)
    print(" ".join(f"{k}={v:.3f}" for k, v in out["overall"].items()))
    return 0


def cmd_evaluate(args, cfg):
    from .data_io import load_scores
    from .detector import labeled_values, scores_from_records
    from .evaluation import build_report, to_labeled

    records = load_scores(args.scores)
    scores = scores_from_records(records)
    metrics = sorted({s.metric_id for s in scores})
    if len(metrics) != 1:
        raise ValueError(f"score file must hold exactly one metric, found {metrics}")
    meta = {
        "metric_id": metrics[0],
        "ae_pool": sorted(set().union(*(s.per_ae for s in scores))),
        "statistic": "min over pool" if args.ae is None else f"error of {args.ae}",
    }
    report = build_report(to_labeled(labeled_values(scores, args.ae)), fpr_level=cfg.fpr, bins=args.bins, metadata=meta)
    report.save(args.out)
    if args.plot_dir:
        from .plotting import plot_report

        plot_report(report, args.plot_dir)
    for ds, r in report.per_dataset.items():
        print(f"{ds}: AP={r.ap:.4f} TPR@{cfg.fpr:g}FPR={r.tpr_at_fpr:.4f}")
    return 0


def cmd_perturb(args, cfg):
    from .data_io import load_image, save_image
    from .perturbations import PerturbationSpec, perturb

    spec = PerturbationSpec(args.kind, args.strength, cfg.seed)
    save_image(perturb(spec, load_image(args.input)), args.out)
    return 0


def cmd_sweep(args, cfg):
    from .data_io import load_manifest, write_json
    from .perturbations import default_grid, load_grid, robustness_sweep

    grid = load_grid(args.grid) if args.grid else default_grid(cfg.seed)
    out = robustness_sweep(load_manifest(args.manifest), _pool(cfg), cfg.metric, grid, cfg.fpr, cfg.cache_dir, cfg.workers, cfg.device)
    write_json(args.out, out)
    for row in out["rows"]:
        print(f"{row['kind']}={row['strength']:g}: mean AP={row['ap']['mean']:.4f}")
    return 0


def _single_backend(args, cfg):
    from .ae_backends import builtin_descriptor, make_backend

    known = {d.ae_id: d for d in cfg.descriptors}
    if args.ae not in known and args.ae not in BUILTIN_DESCRIPTORS:
        raise UsageError(f"unknown autoencoder {args.ae!r}")
    return make_backend(known.get(args.ae) or builtin_descriptor(args.ae), device=cfg.device)


def cmd_localize(args, cfg):
    from .analysis import localization_heatmap
    from .data_io import load_image, prepare_for_ae

    hm = localization_heatmap(_single_backend(args, cfg), cfg.metric, prepare_for_ae(load_image(args.input)), cfg.cache_dir, cfg.device)
    hm.save_png(args.out_map)
    hm.save_raw(args.out_raw)
    lo, hi = hm.normalization
    print(f"{hm.metric_id} via {hm.ae_id}: mean={hm.value:.6g} map range [{lo:.4g}, {hi:.4g}] (PNG scaled per image)")
    return 0


def cmd_complexity(args, cfg):
    from .analysis import complexity_scatter
    from .data_io import atomic_write_text, load_manifest, write_json

    points, summary = complexity_scatter(
        load_manifest(args.manifest), _pool(cfg), cfg.metric, cfg.cache_dir, args.patch_size, args.stride, cfg.device
    )
    lines = [
        json.dumps(
            {"path": p.path, "row": p.row, "col": p.col, "complexity": p.complexity, "error": p.error, "label": p.label.value, "dataset": p.dataset}
        )
        for p in points
    ]
    atomic_write_text(args.out, "".join(line + "\n" for line in lines))
    if args.summary:
        write_json(args.summary, summary)
    if args.plot:
        from .plotting import plot_complexity

        plot_complexity(points, args.plot)
    print(f"{summary['n_points']} patches; spearman " + " ".join(f"{k}={v:.3f}" for k, v in summary["spearman"].items()))
    return 0


def cmd_deep(args, cfg):
    from .analysis import deep_reconstruct, load_denoiser
    from .data_io import load_image, prepare_for_ae, save_image

    backend = _single_backend(args, cfg)
    denoiser = None
    if args.t > 0:
        denoiser = load_denoiser(args.ae, args.denoiser, device=cfg.device, guidance_scale=args.guidance)
    img = prepare_for_ae(load_image(args.input))
    save_image(deep_reconstruct(backend, denoiser, img, args.t, args.total, args.prompt), args.out)
    return 0


def cmd_reconstruct(args, cfg):
    from .ae_backends import reconstruct_cached
    from .data_io import load_image, prepare_for_ae, save_image

    img = prepare_for_ae(load_image(args.input))
    save_image(reconstruct_cached(_single_backend(args, cfg), img, cfg.cache_dir), args.out)
    return 0


# -- parser --------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("run configuration")
    g.add_argument("--config", help="JSON file with default settings")
    g.add_argument("--cache", dest="cache_dir", help="cache directory (env AERODETECT_CACHE)")
    g.add_argument("--device", help="cpu, cuda, cuda:N or auto (env AERODETECT_DEVICE)")
    g.add_argument("--seed", type=int)
    g.add_argument("--workers", type=int, help="parallel image decoding (default 1)")
    g.add_argument("--ae-config", help="JSON file with extra autoencoder descriptors")
    g.add_argument("-v", "--verbose", action="count", default=0)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="aerodetect", description=__doc__.splitlines()[0])
    parser.add_argument(
        "--version", action="version", version=f"aerodetect {__version__} (autoencoder registry {REGISTRY_VERSION}, lpips weights v0.1)"
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, func, help_):
        p = sub.add_parser(name, parents=[common], help=help_, description=help_)
        p.set_defaults(func=func)
        return p

    def pool_args(p, metric=True):
        p.add_argument("--aes", help="comma-separated autoencoder pool (default sd1,sd2,kd2.1)")
        if metric:
            p.add_argument("--metric", help="distance id (default lpips-vgg16-l2)")

    p = add("metrics", cmd_metrics, "list registered distance metrics")
    p.add_argument("action", nargs="?", choices=["list"], default="list")

    p = add("detect", cmd_detect, "score a manifest against an autoencoder pool")
    p.add_argument("--manifest", required=True)
    pool_args(p)
    p.add_argument("--threshold", type=float, help="flag images whose minimum error is <= T")
    p.add_argument("--decisions-out", help="JSONL file for threshold decisions")
    p.add_argument("--out", required=True)

    p = add("attribute", cmd_attribute, "fraction of images attributed to each autoencoder")
    p.add_argument("--scores", required=True)
    p.add_argument("--aes", help="restrict attribution to these autoencoders")
    p.add_argument("--out", required=True)

    p = add("evaluate", cmd_evaluate, "AP and TPR at a fixed FPR per dataset")
    p.add_argument("--scores", required=True)
    p.add_argument("--fpr", type=float)
    p.add_argument("--ae", help="evaluate one autoencoder's error instead of the pool minimum")
    p.add_argument("--bins", type=int, default=40)
    p.add_argument("--plot-dir")
    p.add_argument("--out", required=True)

    p = add("perturb", cmd_perturb, "apply one perturbation to an image")
    p.add_argument("--kind", required=True, choices=["jpeg", "crop", "blur", "noise"])
    p.add_argument("--strength", required=True, type=float)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)

    p = add("sweep", cmd_sweep, "re-score a manifest under a grid of perturbations")
    p.add_argument("--manifest", required=True)
    p.add_argument("--grid", help="JSON perturbation grid (default: five strengths per kind)")
    pool_args(p)
    p.add_argument("--fpr", type=float)
    p.add_argument("--out", required=True)

    p = add("localize", cmd_localize, "spatial reconstruction-error heatmap")
    p.add_argument("--ae", required=True)
    p.add_argument("--metric")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out-map", required=True, help="PNG, min-max scaled per image")
    p.add_argument("--out-raw", required=True, help="lossless JSON raster")

    p = add("complexity", cmd_complexity, "patch complexity against reconstruction error")
    p.add_argument("--manifest", required=True)
    pool_args(p)
    p.add_argument("--patch-size", type=int, default=128)
    p.add_argument("--stride", type=int, default=64)
    p.add_argument("--summary", help="JSON file for the rank correlations")
    p.add_argument("--plot")
    p.add_argument("--out", required=True)

    p = add("deep", cmd_deep, "reconstruct through t DDIM inversion and denoising steps")
    p.add_argument("--ae", required=True)
    p.add_argument("--t", type=int, required=True)
    p.add_argument("--total", type=int, default=50)
    p.add_argument("--prompt", default="")
    p.add_argument("--denoiser", help="diffusers pipeline folder or hub id (default: matching the autoencoder)")
    p.add_argument("--guidance", type=float, default=1.0, help="classifier-free guidance scale (1 = off)")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)

    p = add("reconstruct", cmd_reconstruct, "write an autoencoder round trip of an image")
    p.add_argument("--ae", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    return parser


def _setup_logging(verbosity: int) -> None:
    level = logging.WARNING - 10 * min(verbosity, 2)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s level=%(levelname)s logger=%(name)s msg=%(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level)
    logging.captureWarnings(True)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _setup_logging(args.verbose)
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"aerodetect: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # every other failure is a runtime error
        logger.debug("traceback", exc_info=True)
        print(f"aerodetect: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
