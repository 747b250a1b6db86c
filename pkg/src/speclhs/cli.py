"""Command-line driver: ``speclhs {cluster,select-k,sample,report,run,demo}``.

Every stage reads the same JSON config; command-line flags override fields
of it. Outputs never contain timestamps, so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import coverage, plotting
from .clhs import AnnealingSchedule, vanilla_clhs
from .errors import (
    ConfigError,
    MismatchedContext,
    MissingClusterModel,
    MissingDesign,
    SamplingError,
)
from .ingest import (
    FeatureMatrix,
    MaskRule,
    build_feature_matrix,
    load_stack,
    normalize,
    read_table,
)
from .spectral import ClusterModel, KernelConfig, cluster, write_cluster_raster
from .stratified import spectral_clhs
from .validity import select_k

log = logging.getLogger("speclhs")


@dataclass
class RunConfig:
    paths: list
    seed: int
    n: int
    input_format: str = "geotiff"
    band_names: Optional[list] = None
    mask: list = field(default_factory=list)
    normalization: str = "zscore"
    kernel: KernelConfig = field(default_factory=KernelConfig)
    k: Union[int, str] = "auto"
    k_range: tuple = (2, 15)
    weights: tuple = (1.0, 1.0, 1.0)
    schedule: AnnealingSchedule = field(default_factory=AnnealingSchedule)
    output_dir: Path = Path("out")
    threads: int = 1
    score_space: str = "embedding"
    coverage_covariate: Optional[str] = None

    def validate(self):
        if self.n < 1:
            raise ConfigError("n must be at least 1")
        if self.k == "auto":
            if len(self.k_range) != 2 or self.k_range[0] > self.k_range[1]:
                raise ConfigError("k_range must be [k_min, k_max] with k_min <= k_max")
        elif not isinstance(self.k, int) or self.k < 2:
            raise ConfigError("k must be an integer >= 2 or \"auto\"")
        if self.input_format not in ("geotiff", "csv"):
            raise ConfigError(f"unknown input format {self.input_format!r}")
        if not self.paths:
            raise ConfigError("no input paths")

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        base = path.parent.resolve()
        if "seed" not in raw:
            raise ConfigError("config must set a seed")
        inp = raw.get("input", {})
        try:
            cfg = cls(
                paths=[str((base / p).resolve()) for p in inp.get("paths", [])],
                band_names=inp.get("band_names"),
                input_format=inp.get("format", "geotiff"),
                seed=int(raw["seed"]),
                n=int(raw.get("n", 0)),
                mask=[MaskRule.from_dict(m) for m in raw.get("mask", [])],
                normalization=raw.get("normalization", "zscore"),
                kernel=KernelConfig.from_dict(raw.get("kernel", {})),
                k=raw.get("k", "auto"),
                k_range=tuple(raw.get("k_range", (2, 15))),
                weights=tuple(float(w) for w in raw.get("weights", (1.0, 1.0, 1.0))),
                schedule=AnnealingSchedule.from_dict(raw.get("schedule", {})),
                output_dir=(base / raw.get("output_dir", "out")).resolve(),
                threads=int(raw.get("threads", 1)),
                score_space=raw.get("score_space", "embedding"),
                coverage_covariate=raw.get("coverage_covariate"),
            )
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cfg

    def to_dict(self) -> dict:
        """Effective config; output_dir is "." because the file lives there."""
        return {
            "input": {"format": self.input_format, "paths": list(self.paths),
                      "band_names": self.band_names},
            "mask": [
                {"band": m.band, "rule": m.kind,
                 "lo": None if m.lo == -np.inf else m.lo,
                 "hi": None if m.hi == np.inf else m.hi}
                for m in self.mask
            ],
            "normalization": self.normalization,
            "kernel": self.kernel.to_dict(),
            "k": self.k,
            "k_range": list(self.k_range),
            "n": self.n,
            "weights": list(self.weights),
            "schedule": self.schedule.to_dict(),
            "seed": self.seed,
            "output_dir": ".",
            "threads": self.threads,
            "score_space": self.score_space,
            "coverage_covariate": self.coverage_covariate,
        }


# --------------------------------------------------------------------------
# helpers


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1) + "\n", encoding="utf-8")


def load_features(cfg: RunConfig):
    """``(raw, normalized, params)`` feature matrices for the configured inputs."""
    if cfg.input_format == "csv":
        if len(cfg.paths) != 1:
            raise ConfigError("csv input takes exactly one path")
        stack = read_table(cfg.paths[0])
    else:
        stack = load_stack(cfg.paths, cfg.band_names)
    raw = build_feature_matrix(stack, cfg.mask)
    norm, params = normalize(raw, cfg.normalization)
    return raw, norm, params


def _load_model(out: Path, features: FeatureMatrix) -> ClusterModel:
    path = out / "cluster_model.json"
    if not path.exists():
        raise MissingClusterModel(f"{path} not found; run the cluster stage first")
    model = ClusterModel.from_dict(json.loads(path.read_text(encoding="utf-8")))
    if len(model.labels) != features.n:
        raise MismatchedContext(
            f"cluster model has {len(model.labels)} labels for {features.n} cells")
    return model


def _load_design(out: Path, mode: str) -> dict:
    path = out / f"design_{mode}.json"
    if not path.exists():
        raise MissingDesign(f"{path} not found; run `sample --mode {mode}` first")
    return json.loads(path.read_text(encoding="utf-8"))


def _write_common(cfg: RunConfig, params) -> None:
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    _dump(cfg.output_dir / "effective_config.json", cfg.to_dict())
    _dump(cfg.output_dir / "normalization.json", params.to_dict())


def _write_validity(out: Path, report) -> None:
    (out / "validity.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "validity.csv").write_text(report.to_csv(), encoding="utf-8", newline="")
    plotting.validity_curves(report, out / "validity.png")


# --------------------------------------------------------------------------
# stages


def cmd_select_k(cfg: RunConfig):
    raw, feats, params = load_features(cfg)
    _write_common(cfg, params)
    report = select_k(feats, range(cfg.k_range[0], cfg.k_range[1] + 1), cfg.kernel,
                      cfg.seed, cfg.score_space, cfg.threads)
    _write_validity(cfg.output_dir, report)
    log.info("best K = %d", report.best_k)
    return report


def cmd_cluster(cfg: RunConfig) -> ClusterModel:
    raw, feats, params = load_features(cfg)
    _write_common(cfg, params)
    k = cfg.k
    if k == "auto":
        k = cmd_select_k(cfg).best_k
    model = cluster(feats, int(k), cfg.kernel, cfg.seed)
    out = cfg.output_dir
    (out / "cluster_model.json").write_text(model.to_json() + "\n", encoding="utf-8")
    write_cluster_raster(model, feats, out / "clusters.tif")
    plotting.cluster_sizes(model.labels, model.K, out / "cluster_sizes.png")
    log.info("clustered %d cells into %d zones: %s", feats.n, model.K, model.sizes.tolist())
    return model


def _design_rows(raw: FeatureMatrix, indices, labels):
    x, y = raw.xy()
    for i in indices:
        r, c = raw.cell_index[i]
        yield i, int(r), int(c), float(x[i]), float(y[i]), (None if labels is None else int(labels[i]))


def _write_design(out: Path, mode: str, raw: FeatureMatrix, indices, labels, payload: dict,
                  traces: dict) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["index", "row", "col", "X", "Y", "cluster", *raw.covariate_names])
    features = []
    for i, r, c, x, y, k in _design_rows(raw, indices, labels):
        w.writerow([i, r, c, repr(x), repr(y), "" if k is None else k,
                    *(repr(float(v)) for v in raw.values[i])])
        features.append({
            "type": "Feature",
            "geometry": {"type": "Point", "coordinates": [x, y]},
            "properties": {"index": int(i), "row": r, "col": c, "cluster": k, "design": mode},
        })
    (out / f"design_{mode}.csv").write_text(buf.getvalue(), encoding="utf-8", newline="")
    _dump(out / f"design_{mode}.geojson", {"type": "FeatureCollection", "features": features})
    _dump(out / f"design_{mode}.json", payload)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["cluster", "iteration", "temperature", "objective", "best"])
    for name, tr in traces.items():
        for it, t, cur, best in tr:
            w.writerow([name, int(it), repr(float(t)), repr(float(cur)), repr(float(best))])
    (out / f"trace_{mode}.csv").write_text(buf.getvalue(), encoding="utf-8", newline="")


def cmd_sample(cfg: RunConfig, mode: str):
    raw, feats, params = load_features(cfg)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    if mode == "spectral":
        model = _load_model(out, feats)
        design = spectral_clhs(feats, model, cfg.n, cfg.schedule, cfg.weights, cfg.seed,
                               threads=cfg.threads)
        indices = design.merged_indices
        labels = model.labels
        payload = {"mode": mode, "n": cfg.n, "seed": cfg.seed, **design.to_dict()}
        traces = {k: d.trace for k, d in design.per_cluster.items()}
    elif mode == "vanilla":
        path = out / "cluster_model.json"
        labels = _load_model(out, feats).labels if path.exists() else None
        design = vanilla_clhs(feats, cfg.n, cfg.schedule, cfg.weights, cfg.seed)
        indices = design.selected
        payload = {"mode": mode, "n": cfg.n, "seed": cfg.seed,
                   "objective": design.objective, "merged_indices": [int(i) for i in indices],
                   "terms": design.to_dict()["terms"]}
        traces = {"all": design.trace}
    else:
        raise ConfigError(f"unknown sampling mode {mode!r}")
    _write_design(out, mode, raw, indices, labels, payload, traces)
    plotting.trace_plot(traces, out / f"trace_{mode}.png")
    log.info("%s design: %d samples", mode, len(indices))
    return design


def cmd_report(cfg: RunConfig) -> dict:
    raw, feats, params = load_features(cfg)
    out = cfg.output_dir
    model = _load_model(out, feats)
    designs = {m: np.asarray(_load_design(out, m)["merged_indices"], dtype=np.int64)
               for m in ("vanilla", "spectral")}
    summaries = {m: coverage.summarize(idx, model.labels, feats, model.K, m)
                 for m, idx in designs.items()}
    for m, s in summaries.items():
        (out / f"coverage_{m}.json").write_text(s.to_json() + "\n", encoding="utf-8")
    table = coverage.compare(summaries["vanilla"], summaries["spectral"])
    (out / "comparison.csv").write_text(table.to_csv(), encoding="utf-8", newline="")
    _dump(out / "comparison.json", table.to_dict())
    proj = coverage.pca(feats, min(2, feats.d))
    coverage.emit_scatter(proj, model.labels, designs["spectral"], out / "pca_scatter.svg")
    for m, idx in designs.items():
        coverage.emit_cluster_map(model.labels, feats, idx, out / f"cluster_map_{m}.svg",
                                  title=f"Zones and {m} cLHS samples")
    plotting.pca_scatter(proj, model.labels, designs["spectral"], out / "pca_scatter.png")
    plotting.sample_maps(feats, model.labels,
                         {"vanilla cLHS": designs["vanilla"], "spectral cLHS": designs["spectral"]},
                         out / "sample_maps.png")
    col = 0
    if cfg.coverage_covariate in raw.covariate_names:
        col = raw.covariate_names.index(cfg.coverage_covariate)
    plotting.covariate_coverage(raw, designs["spectral"], col, out / "covariate_coverage.png")
    for m, s in summaries.items():
        log.info("%s: clusters covered %.2f", m, s.clusters_covered_fraction)
    return summaries


# --------------------------------------------------------------------------
# argument parsing


def _k_arg(value: str):
    return value if value == "auto" else int(value)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="speclhs", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, type=Path)
        sp.add_argument("--output-dir", type=Path)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int)
        return sp

    def k_range(sp):
        sp.add_argument("--k-min", type=int)
        sp.add_argument("--k-max", type=int)
        return sp

    sp = k_range(common(sub.add_parser("cluster", help="partition cells into zones")))
    sp.add_argument("--k", type=_k_arg)
    k_range(common(sub.add_parser("select-k", help="score a range of zone counts")))
    sp = common(sub.add_parser("sample", help="select sampling sites"))
    sp.add_argument("--mode", choices=("spectral", "vanilla"), default="spectral")
    sp.add_argument("--n", type=int)
    common(sub.add_parser("report", help="compare vanilla and spectral designs"))
    sp = k_range(common(sub.add_parser("run", help="cluster, sample both ways, report")))
    sp.add_argument("--k", type=_k_arg)
    sp.add_argument("--n", type=int)
    sp = sub.add_parser("demo", help="write synthetic demo rasters and a config")
    sp.add_argument("directory", type=Path)
    return p


def _apply_flags(cfg: RunConfig, args) -> RunConfig:
    updates = {}
    if getattr(args, "output_dir", None) is not None:
        updates["output_dir"] = args.output_dir.resolve()
    for name in ("seed", "threads", "n"):
        if getattr(args, name, None) is not None:
            updates[name] = getattr(args, name)
    if getattr(args, "k", None) is not None:
        updates["k"] = args.k
    k_min = getattr(args, "k_min", None)
    k_max = getattr(args, "k_max", None)
    if k_min is not None or k_max is not None:
        updates["k_range"] = (k_min or cfg.k_range[0], k_max or cfg.k_range[1])
    cfg = replace(cfg, **updates)
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "demo":
            from .demo import write_demo

            print(write_demo(args.directory))
            return 0
        cfg = _apply_flags(RunConfig.load(args.config), args)
        if args.command == "cluster":
            cmd_cluster(cfg)
        elif args.command == "select-k":
            cmd_select_k(cfg)
        elif args.command == "sample":
            cmd_sample(cfg, args.mode)
        elif args.command == "report":
            cmd_report(cfg)
        elif args.command == "run":
            cmd_cluster(cfg)
            cmd_sample(cfg, "vanilla")
            cmd_sample(cfg, "spectral")
            cmd_report(cfg)
    except SamplingError as exc:
        print(f"error[{exc.tag}]: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
