"""Command-line entry point.

Every command resolves its settings as flags > ``--config`` JSON file >
defaults, writes the resolved settings to ``<out>/config.json`` and then its
own artifacts (model.bin, epochs.tsv, metrics.json, attributions.tsv,
oracle.tsv, curves.tsv, timing.tsv, ablation.tsv).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .data import DatasetManifest, Prepared
from .io import load_model, save_model
from .metrics import (
    auc_weighted_ovr,
    benchmark_timing,
    explanation_fidelity,
    inclusion_exclusion_curve,
    predicted_class,
)
from .network import NetworkSpec
from .shapley import ValueFunction, model_game, unbiased_kernelshap
from .training import TrainConfig, explain, format_epoch_log, train

logger = logging.getLogger("viashap")

COMMANDS = ("train", "predict", "explain", "oracle", "eval-fidelity", "curves", "benchmark", "ablate")
BACKBONE_FLAGS = {"kan-spline": "kan_spline", "kan-rbf": "kan_rbf", "mlp": "mlp", "mlp-matched": "mlp_matched"}
COMMAND_HELP = {
    "train": "fit a model and write model.bin, epochs.tsv and metrics.json",
    "predict": "write per-row predictions",
    "explain": "write per-row attributions (n x d)",
    "oracle": "estimate ground-truth Shapley values with unbiased KernelSHAP",
    "eval-fidelity": "compare attributions with oracle estimates",
    "curves": "inclusion/exclusion accuracy curves",
    "benchmark": "time amortized explanations against the oracle",
    "ablate": "retrain over a grid of one setting",
}
VALUE_FN_FLAGS = {"baseline": "baseline_removal", "marginal": "marginal_expectation"}
SWEEPS = {
    "beta": [0.1, 1.0, 10.0, 100.0],
    "coalitions": [1, 2, 4, 8, 16, 32, 64, 128],
    "link": ["auto", "none"],
    "efficiency": ["on", "off"],
}


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str = "train"
    data: str | None = None
    out: str = "run"
    model: str | None = None
    backbone: str = "kan-spline"
    hidden: list[int] = field(default_factory=lambda: [64, 128, 64])
    beta: float = 10.0
    coalitions: int = 32
    link: str = "auto"
    relaxed: bool = False
    efficiency: str = "on"
    value_fn: str = "baseline"
    seed: int = 0
    threads: int = 1
    batch_size: int = 256
    max_epochs: int = 300
    patience: int = 10
    lr: float = 1e-3
    shapley_loss_outputs: str = "all"
    oversample_minority: bool = True
    split: str = "test"
    rows: int | None = None
    oracle_tolerance: float = 0.01
    oracle_max_samples: int = 1_000_000
    oracle_batch: int = 512
    fractions: list[float] = field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0])
    instances: int = 1000
    oracle_rows: int | None = 20
    repeats: int = 5
    sweep: str | None = None

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise UsageError(f"unknown command {self.command!r}; expected one of {COMMANDS}")
        if self.backbone not in BACKBONE_FLAGS:
            raise UsageError(f"unknown backbone {self.backbone!r}; expected one of {sorted(BACKBONE_FLAGS)}")
        if self.link not in ("auto", "none"):
            raise UsageError("link must be 'auto' or 'none'")
        if self.efficiency not in ("on", "off"):
            raise UsageError("efficiency must be 'on' or 'off'")
        if self.value_fn not in VALUE_FN_FLAGS:
            raise UsageError(f"value_fn must be one of {sorted(VALUE_FN_FLAGS)}")
        if self.split not in ("train", "valid", "test"):
            raise UsageError("split must be train, valid or test")
        if self.command == "ablate" and self.sweep not in SWEEPS:
            raise UsageError(f"ablate needs --sweep, one of {sorted(SWEEPS)}")
        if self.threads < 1:
            raise UsageError("threads must be at least 1")

    def model_path(self) -> str:
        return self.model or os.path.join(self.out, "model.bin")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


_FIELD_TYPES = {f.name: f for f in fields(RunConfig)}


def _check_type(key: str, value):
    default = RunConfig()
    ref = getattr(default, key)
    ok = {
        bool: lambda v: isinstance(v, bool),
        int: lambda v: isinstance(v, int) and not isinstance(v, bool),
        float: lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
        str: lambda v: isinstance(v, str),
        list: lambda v: isinstance(v, list),
    }
    if value is None:
        if ref is None or key in ("data", "model", "rows", "oracle_rows", "sweep"):
            return value
        raise UsageError(f"config key {key!r} may not be null")
    if ref is None:
        kinds = {"data": str, "model": str, "sweep": str, "rows": int, "oracle_rows": int}
        check = ok[kinds[key]]
    else:
        check = ok[type(ref)]
    if not check(value):
        raise UsageError(f"config key {key!r} has wrong type {type(value).__name__}")
    return float(value) if isinstance(ref, float) else value


def load_config_file(path: str) -> dict:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    if not text.strip():
        return {}
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(d, dict):
        raise UsageError(f"{path}: top level must be a JSON object")
    unknown = sorted(set(d) - set(_FIELD_TYPES) - {"command"})
    if unknown:
        raise UsageError(f"unknown config keys {unknown}; valid keys: {sorted(_FIELD_TYPES)}")
    return {k: _check_type(k, v) for k, v in d.items() if k != "command"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="viashap", description="Self-explaining Shapley-value networks.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        p = sub.add_parser(name, help=COMMAND_HELP[name])
        p.add_argument("--config")
        p.add_argument("--data")
        p.add_argument("--out")
        p.add_argument("--model")
        p.add_argument("--backbone", choices=sorted(BACKBONE_FLAGS))
        p.add_argument("--beta", type=float)
        p.add_argument("--coalitions", type=int)
        p.add_argument("--link", choices=["auto", "none"])
        p.add_argument("--relaxed", action="store_const", const=True)
        p.add_argument("--efficiency", choices=["on", "off"])
        p.add_argument("--value-fn", dest="value_fn", choices=sorted(VALUE_FN_FLAGS))
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--max-epochs", dest="max_epochs", type=int)
        p.add_argument("--split", choices=["train", "valid", "test"])
        p.add_argument("--rows", type=int)
        p.add_argument("--oracle-tolerance", dest="oracle_tolerance", type=float)
        p.add_argument("--oracle-max-samples", dest="oracle_max_samples", type=int)
        p.add_argument("--instances", type=int)
        if name == "ablate":
            p.add_argument("--sweep", choices=sorted(SWEEPS), required=True)
    return parser


def parse_config(argv: list[str]) -> RunConfig:
    args = vars(build_parser().parse_args(argv))
    values = asdict(RunConfig())
    if args.get("config"):
        values.update(load_config_file(args["config"]))
    for key, val in args.items():
        if key != "config" and val is not None:
            values[key] = val
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


# -- helpers ------------------------------------------------------------------


def _prepared(cfg: RunConfig) -> Prepared:
    if not cfg.data:
        raise UsageError("--data (a dataset manifest) is required for this command")
    return DatasetManifest.load(cfg.data).prepare()


def _train_config(cfg: RunConfig, task: str) -> TrainConfig:
    return TrainConfig(
        beta=cfg.beta,
        coalitions=cfg.coalitions,
        value_fn=VALUE_FN_FLAGS[cfg.value_fn],
        link="identity" if cfg.link == "none" else "auto",
        relaxed=cfg.relaxed,
        efficiency=cfg.efficiency == "on",
        task=task,
        batch_size=cfg.batch_size,
        max_epochs=cfg.max_epochs,
        patience=cfg.patience,
        seed=cfg.seed,
        oversample_minority=cfg.oversample_minority,
        shapley_loss_outputs=cfg.shapley_loss_outputs,
        lr=cfg.lr,
    )


def _write(path: str, text: str) -> None:
    with open(path, "w") as fh:
        fh.write(text)


def _write_json(path: str, obj) -> None:
    _write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _split(prep: Prepared, name: str):
    return {"train": prep.train, "valid": prep.valid, "test": prep.test}[name]


def _rows(x: np.ndarray, cfg: RunConfig) -> np.ndarray:
    return x if cfg.rows is None else x[: cfg.rows]


def _fit(cfg: RunConfig, prep: Prepared):
    tcfg = _train_config(cfg, prep.schema.task)
    spec = NetworkSpec(
        BACKBONE_FLAGS[cfg.backbone],
        prep.schema.n_features,
        prep.schema.n_outputs,
        hidden=tuple(cfg.hidden),
        link=tcfg.resolved_link(),
        relaxed=cfg.relaxed,
        feature_names=prep.schema.feature_names,
        output_labels=prep.schema.classes if prep.schema.n_outputs > 1 else prep.schema.classes[-1:],
    )
    return train(prep.train.x, prep.train.y, prep.valid.x, prep.valid.y, spec, tcfg), tcfg


def _score(net, x, y) -> float:
    logits = net.logits(x)
    return auc_weighted_ovr(logits if logits.shape[1] > 1 else logits[:, 0], y)


def _oracle(net, x, vf: ValueFunction, cfg: RunConfig):
    cols = predicted_class(net.logits(x))

    def one(i):
        game = model_game(net, x[i], vf, output=int(cols[i]))
        return unbiased_kernelshap(
            game, x.shape[1], batch=cfg.oracle_batch, tolerance=cfg.oracle_tolerance,
            max_samples=cfg.oracle_max_samples, seed=cfg.seed + i,
        )

    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            return list(pool.map(one, range(len(x)))), cols
    return [one(i) for i in range(len(x))], cols


def _loaded(cfg: RunConfig):
    path = cfg.model_path()
    if not os.path.exists(path):
        raise FileNotFoundError(f"model file {path} not found; run `train` first or pass --model")
    loaded = load_model(path)
    vf = ValueFunction.from_dict(loaded.extra["value_function"]) if "value_function" in loaded.extra else \
        ValueFunction.baseline_removal(loaded.net.n_features)
    return loaded, vf


def _efficiency(loaded) -> bool:
    return bool(loaded.extra.get("train_config", {}).get("efficiency", True))


# -- commands -----------------------------------------------------------------


def cmd_train(cfg: RunConfig) -> None:
    prep = _prepared(cfg)
    result, tcfg = _fit(cfg, prep)
    net = result.net
    extra = {
        "train_config": tcfg.to_dict(),
        "value_function": result.value_function.to_dict(),
        "schema": prep.schema.to_dict(),
    }
    save_model(os.path.join(cfg.out, "model.bin"), net, prep.preprocessor, extra)
    _write(os.path.join(cfg.out, "epochs.tsv"), format_epoch_log(result.logs))
    fwd = net.forward(prep.test.x)
    gap = float(np.max(np.abs(fwd.logits - fwd.phi.sum(axis=1) - net.delta[0])))
    metrics = {
        "best_epoch": result.best_epoch,
        "epochs_run": len(result.logs),
        "local_accuracy_max_gap": gap,
        "param_count": net.param_count(),
    }
    if prep.schema.task != "regression":
        metrics["valid_auc"] = _score(net, prep.valid.x, prep.valid.y)
        metrics["test_auc"] = _score(net, prep.test.x, prep.test.y)
    else:
        metrics["test_mse"] = float(np.mean((fwd.prediction[:, 0] - prep.test.y) ** 2))
    _write_json(os.path.join(cfg.out, "metrics.json"), metrics)


def cmd_predict(cfg: RunConfig) -> None:
    loaded, _ = _loaded(cfg)
    x = _rows(_split(_prepared(cfg), cfg.split).x, cfg)
    pred = loaded.net.predict(x)
    labels = loaded.net.spec.output_labels or [str(j) for j in range(pred.shape[1])]
    lines = ["\t".join(["row"] + [f"pred:{lab}" for lab in labels])]
    lines += ["\t".join([str(i)] + [repr(float(v)) for v in row]) for i, row in enumerate(pred)]
    _write(os.path.join(cfg.out, "predictions.tsv"), "\n".join(lines) + "\n")


def cmd_explain(cfg: RunConfig) -> None:
    loaded, vf = _loaded(cfg)
    net = loaded.net
    x = _rows(_split(_prepared(cfg), cfg.split).x, cfg)
    phi = explain(net, x, vf, _efficiency(loaded))
    names = net.spec.feature_names or [f"x{i}" for i in range(net.n_features)]
    outs = net.spec.output_labels or [str(j) for j in range(net.n_outputs)]
    cols = [f"{f}:{o}" for f in names for o in outs]
    lines = ["\t".join(["row"] + cols)]
    lines += ["\t".join([str(i)] + [repr(float(v)) for v in p.ravel()]) for i, p in enumerate(phi)]
    _write(os.path.join(cfg.out, "attributions.tsv"), "\n".join(lines) + "\n")


def _write_oracle(path, estimates, cols, names) -> None:
    lines = ["\t".join(["row", "feature", "output", "estimate", "std_error", "samples", "converged"])]
    for i, est in enumerate(estimates):
        for f, name in enumerate(names):
            lines.append("\t".join([str(i), name, str(int(cols[i])), repr(float(est.values[f])),
                                    repr(float(est.std_errors[f])), str(est.samples), str(int(est.converged))]))
    _write(path, "\n".join(lines) + "\n")


def cmd_oracle(cfg: RunConfig) -> None:
    loaded, vf = _loaded(cfg)
    net = loaded.net
    x = _rows(_split(_prepared(cfg), cfg.split).x, cfg)
    estimates, cols = _oracle(net, x, vf, cfg)
    names = net.spec.feature_names or [f"x{i}" for i in range(net.n_features)]
    _write_oracle(os.path.join(cfg.out, "oracle.tsv"), estimates, cols, names)


def cmd_eval_fidelity(cfg: RunConfig) -> None:
    loaded, vf = _loaded(cfg)
    net = loaded.net
    x = _rows(_split(_prepared(cfg), cfg.split).x, cfg)
    estimates, cols = _oracle(net, x, vf, cfg)
    names = net.spec.feature_names or [f"x{i}" for i in range(net.n_features)]
    _write_oracle(os.path.join(cfg.out, "oracle.tsv"), estimates, cols, names)
    report = explanation_fidelity(explain(net, x, vf, _efficiency(loaded)), estimates, cols)
    _write_json(os.path.join(cfg.out, "metrics.json"), {"fidelity": report.summary(), "instances": len(x)})


def cmd_curves(cfg: RunConfig) -> None:
    loaded, vf = _loaded(cfg)
    part = _split(_prepared(cfg), cfg.split)
    x, y = _rows(part.x, cfg), _rows(part.y, cfg)
    phi = explain(loaded.net, x, vf, _efficiency(loaded))
    curves = inclusion_exclusion_curve(loaded.net, x, y, cfg.fractions, vf, phi=phi)
    lines = ["fraction\tinclusion\texclusion"]
    lines += [f"{f!r}\t{a!r}\t{b!r}" for f, a, b in zip(curves.fractions.tolist(), curves.inclusion.tolist(),
                                                         curves.exclusion.tolist())]
    _write(os.path.join(cfg.out, "curves.tsv"), "\n".join(lines) + "\n")


def cmd_benchmark(cfg: RunConfig) -> None:
    loaded, vf = _loaded(cfg)
    net = loaded.net
    prep = _prepared(cfg)
    pool = np.concatenate([prep.test.x, prep.valid.x, prep.train.x])
    x = pool[np.arange(cfg.instances) % len(pool)]
    cols = predicted_class(net.logits(x))
    index = {id(row): i for i, row in enumerate(x)}

    def oracle_fn(row):
        i = index.get(id(row), 0)
        game = model_game(net, row, vf, output=int(cols[i]))
        return unbiased_kernelshap(game, net.n_features, batch=cfg.oracle_batch, tolerance=cfg.oracle_tolerance,
                                   max_samples=cfg.oracle_max_samples, seed=cfg.seed)

    t = benchmark_timing(net, x, oracle_fn, oracle_rows=cfg.oracle_rows, repeats=cfg.repeats)
    lines = ["method\tinstances\ttotal_seconds\tper_instance_seconds",
             f"amortized\t{t.instances}\t{t.amortized_total!r}\t{t.amortized_per_instance!r}",
             f"unbiased_kernelshap\t{t.instances}\t{t.oracle_total!r}\t{t.oracle_per_instance!r}"]
    _write(os.path.join(cfg.out, "timing.tsv"), "\n".join(lines) + "\n")
    _write_json(os.path.join(cfg.out, "metrics.json"), {"speedup": t.speedup, "oracle_rows_timed": cfg.oracle_rows})


def cmd_ablate(cfg: RunConfig) -> None:
    prep = _prepared(cfg)
    x = _rows(prep.test.x, cfg)
    rows = []
    for value in SWEEPS[cfg.sweep]:
        cell = RunConfig(**{**asdict(cfg), cfg.sweep: value})
        result, _ = _fit(cell, prep)
        net = result.net
        estimates, cols = _oracle(net, x, result.value_function, cell)
        rep = explanation_fidelity(explain(net, x, result.value_function, cell.efficiency == "on"), estimates, cols)
        row = {"sweep": cfg.sweep, "value": value, "best_epoch": result.best_epoch,
               "cosine": rep.cosine.mean, "spearman": rep.spearman.mean, "r2": rep.r2.mean,
               "dropped": rep.dropped}
        if prep.schema.task != "regression":
            row["test_auc"] = _score(net, prep.test.x, prep.test.y)
        rows.append(row)
        logger.info("ablation %s=%s done", cfg.sweep, value)
    keys = list(rows[0])
    lines = ["\t".join(keys)] + ["\t".join(repr(r[k]) if isinstance(r[k], float) else str(r[k]) for k in keys) for r in rows]
    _write(os.path.join(cfg.out, "ablation.tsv"), "\n".join(lines) + "\n")
    _write_json(os.path.join(cfg.out, "metrics.json"), {"ablation": rows})


HANDLERS = {
    "train": cmd_train,
    "predict": cmd_predict,
    "explain": cmd_explain,
    "oracle": cmd_oracle,
    "eval-fidelity": cmd_eval_fidelity,
    "curves": cmd_curves,
    "benchmark": cmd_benchmark,
    "ablate": cmd_ablate,
}


def run(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg = parse_config(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0) if exc.code != 0 else 0
    except UsageError as exc:
        print(f"viashap: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        os.makedirs(cfg.out, exist_ok=True)
        _write(os.path.join(cfg.out, "config.json"), cfg.to_json())
        HANDLERS[cfg.command](cfg)
    except (UsageError, ValueError, FileNotFoundError, FloatingPointError) as exc:
        print(f"viashap: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())
