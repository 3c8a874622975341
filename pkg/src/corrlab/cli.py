"""Command-line entry point.

    corrlab {generate|train|eval|ablate|gradcheck} --config FILE [--seed S]
            [--paper-scale] [section.key=value ...]

Exit status: 0 success, 1 usage or configuration error, 2 numeric failure,
3 I/O failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import yaml

from .autodiff import NonFiniteError
from .evaluation import (aggregate, evaluate_method, network_predictor, prf, ransac_predictor,
                         write_report)
from .gradsuite import run_gradient_suite
from .network import CorrespondenceNet, NetworkConfig, Trainer, TrainingDiverged
from .synthgen import (DatasetFormatError, SceneConfig, ScenePair, derive_labels, generate_scenes,
                       outlier_fraction, read_dataset, write_dataset)

__all__ = ["RunConfig", "ABLATION_ROWS", "SPLIT_SEED_STRIDE", "split_config", "train_model",
           "validation_f", "ablation_config", "main"]

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

# scene seeds of split i start at root + i * stride, so splits never share a scene
SPLIT_SEED_STRIDE = 1_000_000
SPLITS = ("train", "val", "test")

ABLATION_ROWS: list[tuple[str, dict]] = [
    ("Baseline", dict(use_iter=False, use_cga=False, use_csmgc=False)),
    ("+CGA", dict(use_iter=False, use_cga=True, use_csmgc=False)),
    ("+Iter", dict(use_iter=True, use_cga=False, use_csmgc=False)),
    ("+Iter+CGA", dict(use_iter=True, use_cga=True, use_csmgc=False)),
    ("+Iter+CSMGC", dict(use_iter=True, use_cga=False, use_csmgc=True)),
    ("Full", dict(use_iter=True, use_cga=True, use_csmgc=True)),
]


class UsageError(ValueError):
    pass


@dataclass
class Paths:
    dataset_dir: str = "data"
    checkpoint: str = "model.npz"
    train_log: str = "train.log"
    report: str = "report.csv"
    ablation: str = "ablation.csv"


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    network: NetworkConfig = field(default_factory=lambda: NetworkConfig(dtype="float32"))
    paths: Paths = field(default_factory=Paths)
    seed: int = 0
    iterations: int = 2000
    eval_interval: int = 250
    n_train: int = 500
    n_val: int = 20
    n_test: int = 50
    ransac_iterations: int = 1000
    ransac_threshold: float = 1e-4
    gradcheck_seeds: int = 20
    gradcheck_coords: int = 60

    def effective(self) -> "RunConfig":
        """Route the root seed into every component."""
        return dataclasses.replace(
            self,
            scene=dataclasses.replace(self.scene, seed=self.seed),
            network=dataclasses.replace(self.network, seed=self.seed,
                                        label_threshold=self.scene.label_threshold),
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scene"]["depth_range"] = list(self.scene.depth_range)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        try:
            scene = SceneConfig(**data.pop("scene", {}) or {})
            network = NetworkConfig.from_dict(data.pop("network", {}) or {}) \
                if "network" in data else NetworkConfig(dtype="float32")
            paths = Paths(**data.pop("paths", {}) or {})
            return cls(scene=scene, network=network, paths=paths, **data)
        except TypeError as exc:
            raise UsageError(str(exc)) from exc

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _apply_override(data: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise UsageError(f"override must look like key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    value = yaml.safe_load(raw)
    node = data
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise UsageError(f"cannot override into non-section {key!r}")
    node[parts[-1]] = value


def paper_scale_overrides() -> dict:
    return {"scene": {"n_correspondences": 2000}, "network": {"d": 128, "oa_clusters": 500}}


def load_run_config(path: str | None, overrides: Sequence[str] = (), seed: int | None = None,
                    paper_scale: bool = False) -> RunConfig:
    data: dict = {}
    if path is not None:
        with open(path) as fh:
            loaded = yaml.safe_load(fh)
        if loaded is not None and not isinstance(loaded, dict):
            raise UsageError("config file must hold a mapping")
        data = loaded or {}
    base = RunConfig.from_dict(data).to_dict()
    if paper_scale:
        for section, values in paper_scale_overrides().items():
            base[section].update(values)
    for ov in overrides:
        _apply_override(base, ov)
    if seed is not None:
        base["seed"] = seed
    try:
        return RunConfig.from_dict(base).effective()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


# ---------------------------------------------------------------------------
# building blocks shared by the commands and the acceptance suite


def split_config(cfg: RunConfig, split: str) -> SceneConfig:
    return dataclasses.replace(cfg.scene, seed=cfg.seed + SPLITS.index(split) * SPLIT_SEED_STRIDE)


def split_sizes(cfg: RunConfig) -> dict[str, int]:
    return {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}


def dataset_path(cfg: RunConfig, split: str) -> Path:
    return Path(cfg.paths.dataset_dir) / f"{split}.jsonl"


def generate_splits(cfg: RunConfig) -> dict[str, list[ScenePair]]:
    sizes = split_sizes(cfg)
    return {s: generate_scenes(split_config(cfg, s), sizes[s]) for s in SPLITS}


def validation_f(net: CorrespondenceNet, scenes: Sequence[ScenePair], label_threshold: float) -> float:
    fs = []
    for sc in scenes:
        labels = derive_labels(sc.correspondences, sc.essential_gt, label_threshold)
        pred = net.predict(sc.correspondences)["inliers"]
        fs.append(prf(pred, labels).f_score)
    return float(np.mean(fs))


def train_model(cfg: RunConfig, train: Sequence[ScenePair], val: Sequence[ScenePair],
                network: NetworkConfig | None = None,
                log: Callable[[str], None] | None = None) -> tuple[CorrespondenceNet, float]:
    """Train for ``cfg.iterations`` steps; return the best-validation model and its F-score.

    Scenes are drawn uniformly with a generator seeded from the root seed.
    Validation runs every ``eval_interval`` steps and after the last step.
    """
    net = CorrespondenceNet(network or cfg.network)
    trainer = Trainer(net)
    rng = np.random.default_rng([cfg.seed, 1])
    emit = log or (lambda line: None)
    emit(f"# train seed={cfg.seed} gamma={net.config.gamma!r} iterations={cfg.iterations} "
         f"network={json.dumps(net.config.to_dict(), sort_keys=True)}")
    best_f, best_state = -1.0, net.store.state_dict()
    for it in range(cfg.iterations):
        rec = trainer.train_step(train[int(rng.integers(len(train)))])
        emit(rec.to_log())
        if (it + 1) % cfg.eval_interval == 0 or it + 1 == cfg.iterations:
            f = validation_f(net, val, net.config.label_threshold)
            improved = f > best_f
            if improved:
                best_f, best_state = f, net.store.state_dict()
            emit(f"eval step={it + 1} val_f={f!r} best={int(improved)}")
    net.store.load_state_dict(best_state)
    return net, best_f


def ablation_config(base: NetworkConfig, flags: dict) -> NetworkConfig:
    return dataclasses.replace(base, **flags)


def evaluate_against_ransac(cfg: RunConfig, net: CorrespondenceNet, test: Sequence[ScenePair]):
    thr = cfg.scene.label_threshold
    return {
        "network": evaluate_method(test, "network", network_predictor(net), thr),
        "ransac": evaluate_method(test, "ransac",
                                  ransac_predictor(cfg.ransac_iterations, cfg.ransac_threshold,
                                                   cfg.seed), thr),
    }


# ---------------------------------------------------------------------------
# commands


def _read_split(cfg: RunConfig, split: str) -> list[ScenePair]:
    path = dataset_path(cfg, split)
    return read_dataset(path)


def cmd_generate(cfg: RunConfig, out=print) -> int:
    Path(cfg.paths.dataset_dir).mkdir(parents=True, exist_ok=True)
    for split, scenes in generate_splits(cfg).items():
        path = dataset_path(cfg, split)
        write_dataset(scenes, path)
        ratio = outlier_fraction(scenes) if scenes else float("nan")
        out(f"split={split} scenes={len(scenes)} outlier_ratio={ratio:.4f} path={path}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, out=print) -> int:
    train, val = _read_split(cfg, "train"), _read_split(cfg, "val")
    if not train or not val:
        raise UsageError("train and val splits must be non-empty")
    Path(cfg.paths.train_log).parent.mkdir(parents=True, exist_ok=True)
    with open(cfg.paths.train_log, "w") as fh:
        def log(line):
            fh.write(line + "\n")
            if line.startswith(("#", "eval")):
                out(line)
        net, best_f = train_model(cfg, train, val, log=log)
    net.save(cfg.paths.checkpoint)
    out(f"checkpoint={cfg.paths.checkpoint} best_val_f={best_f:.4f}")
    return EXIT_OK


def _format_row(name: str, a: dict) -> str:
    return (f"{name:<12} P={a['precision']:.4f} R={a['recall']:.4f} F={a['f_score']:.4f} "
            f"mAP5={a['map5']:.4f} mAP20={a['map20']:.4f} AUC5={a['auc5']:.4f} "
            f"AUC20={a['auc20']:.4f}")


def cmd_eval(cfg: RunConfig, out=print) -> int:
    test = _read_split(cfg, "test")
    if not test:
        raise UsageError("test split is empty")
    try:
        net = CorrespondenceNet.load(cfg.paths.checkpoint, cfg.network)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    groups = evaluate_against_ransac(cfg, net, test)
    aggs = write_report(cfg.paths.report, groups)
    for name, a in aggs.items():
        out(_format_row(name, a))
    out(f"report={cfg.paths.report}")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, out=print) -> int:
    train, val, test = (_read_split(cfg, s) for s in SPLITS)
    rows = []
    for name, flags in ABLATION_ROWS:
        net, _ = train_model(cfg, train, val, ablation_config(cfg.network, flags))
        a = aggregate(evaluate_method(test, name, network_predictor(net),
                                      cfg.scene.label_threshold))
        rows.append((name, flags, a))
        out(_format_row(name, a))
    Path(cfg.paths.ablation).parent.mkdir(parents=True, exist_ok=True)
    with open(cfg.paths.ablation, "w") as fh:
        fh.write("config,iter,cga,csmgc,precision,recall,f_score,map5,map20,auc5,auc20\n")
        for name, flags, a in rows:
            fh.write(",".join([name, *(str(int(flags[k])) for k in ("use_iter", "use_cga",
                                                                      "use_csmgc"))]
                              + [repr(a[k]) for k in ("precision", "recall", "f_score", "map5",
                                                      "map20", "auc5", "auc20")]) + "\n")
    out(f"table={cfg.paths.ablation}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, out=print) -> int:
    results = run_gradient_suite(cfg.gradcheck_seeds, cfg.seed, cfg.gradcheck_coords, report=out)
    ok = all(r.passed for r in results)
    out(f"gradcheck {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"corrlab: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="corrlab", description="Two-view correspondence classification toolkit.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="YAML or JSON run configuration")
    p.add_argument("--seed", type=int, help="root seed (overrides the config file)")
    p.add_argument("--paper-scale", action="store_true",
                   help="N=2000, d=128, 500 clusters")
    p.add_argument("--dump-config", action="store_true",
                   help="print the effective configuration before running")
    p.add_argument("overrides", nargs="*", help="section.key=value overrides")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_intermixed_args(argv)
    try:
        cfg = load_run_config(args.config, args.overrides, args.seed, args.paper_scale)
        if args.dump_config:
            print(cfg.dumps())
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"corrlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, NonFiniteError, FloatingPointError) as exc:
        print(f"corrlab: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DatasetFormatError) as exc:
        print(f"corrlab: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except yaml.YAMLError as exc:
        print(f"corrlab: error: bad config file: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
