"""Command-line entry point: ``hlmg <subcommand> [flags]``.

Settings come from an optional flat ``key = value`` config file and are
overridden by flags. The resolved settings and the build version are
written to ``run_config.json`` in every output directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from . import datasets as D
from .graphs import Task
from .model import ConfigMismatch, ModelConfig, ModelParams, load_checkpoint, loss, model_preset, save_checkpoint
from .text import SequenceTooLong
from .training import (
    DESK_RECIPES,
    TrainConfig,
    TrainingDiverged,
    bench_csv,
    complexity_benchmark,
    evaluate,
    robustness_eval,
    train,
    train_preset,
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2  # argparse's own code for unknown flags
EXIT_MISSING_FILE = 3
EXIT_CONFIG = 4  # bad config file or config/checkpoint mismatch
EXIT_DATA = 5
EXIT_DIVERGED = 6
EXIT_CHECK_FAILED = 7


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code = code
        self.kind = kind


def build_version() -> str:
    """``git describe``-style version, or the package version outside a checkout."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# ---------------------------------------------------------------------------
# config resolution

_FIELDS = {
    "model": {f.name for f in dataclasses.fields(ModelConfig)} - {"vocab_size", "num_classes"},
    "train": {f.name for f in dataclasses.fields(TrainConfig)},
    "task": {"num_classes", "size", "max_nodes"},
    "gen": {f.name for f in dataclasses.fields(D.GenConfig)} - {"max_nodes"},
}
_OTHER = {"task", "preset", "model_preset", "seed", "dialect", "data", "checkpoint", "split", "out",
          "num_permutations", "method", "nodes", "tokens_per_node", "repeats", "time_budget", "samples",
          "sparsity", "random_seeds", "layer_policy", "quiet"}


def _coerce(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    if "," in text:
        return tuple(_coerce(t.strip()) for t in text.split(",") if t.strip())
    return text


def read_config(path: str | Path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    p = Path(path)
    if not p.exists():
        raise CliError(EXIT_MISSING_FILE, "missing_file", f"config file {p} not found")
    known = set().union(*_FIELDS.values()) | _OTHER
    out = {}
    for n, raw in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(EXIT_CONFIG, "config", f"{p}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise CliError(EXIT_CONFIG, "config", f"{p}:{n}: unknown key {key!r}")
        out[key] = _coerce(value)
    return out


def resolve(args: argparse.Namespace) -> dict:
    cfg = read_config(args.config) if args.config else {}
    for key, value in vars(args).items():
        if key in ("config", "command", "func") or value is None:
            continue
        cfg[key] = value
    cfg.setdefault("preset", "desk")
    cfg.setdefault("seed", 0)
    if cfg.get("pooling") in ("mean", "concat"):
        cfg["pooling"] = {"mean": "mean_alpha", "concat": "concatenate"}[cfg["pooling"]]
    return cfg


def _pick(cfg: dict, group: str) -> dict:
    return {k: v for k, v in cfg.items() if k in _FIELDS[group]}


def _write_run_config(out: Path, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    record = {"command": cfg.get("command"), "config": {k: v for k, v in sorted(cfg.items()) if k != "command"},
              "version": build_version()}
    (out / "run_config.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg.get("out") or f"runs/{cfg['command']}")
    _write_run_config(out, cfg)
    return out


def _need_file(path) -> Path:
    if path is None:
        raise CliError(EXIT_USAGE, "usage", "a required file argument is missing")
    p = Path(path)
    if not p.exists():
        raise CliError(EXIT_MISSING_FILE, "missing_file", f"{p} not found")
    return p


def _task_spec(cfg: dict) -> D.TaskSpec:
    if not cfg.get("task"):
        raise CliError(EXIT_USAGE, "usage", "--task is required")
    return D.TaskSpec.preset(cfg["task"], cfg["preset"], **_pick(cfg, "task"))


def _dataset(cfg: dict) -> D.Dataset:
    if cfg.get("data"):
        return D.load(_need_file(cfg["data"]))
    spec = _task_spec(cfg)
    gen = D.GenConfig(max_nodes=spec.max_nodes, **_pick(cfg, "gen"))
    return D.build_dataset(spec, gen, seed=int(cfg["seed"]))


def _recipe(cfg: dict, d: D.Dataset, group: str) -> dict:
    """Per-task desk recipe overrides, used only with the desk model preset."""
    if cfg["preset"] != "desk" or (cfg.get("model_preset") or "desk") != "desk":
        return {}
    return dict(DESK_RECIPES[d.task.task][group])


def _model_config(cfg: dict, d: D.Dataset) -> ModelConfig:
    preset = cfg.get("model_preset") or ("paper_reasoning" if cfg["preset"] == "paper" else "desk")
    over = {**_recipe(cfg, d, "model"), **_pick(cfg, "model")}
    if "alpha_init" not in over and cfg.get("alpha_init") is not None:
        over["alpha_init"] = cfg["alpha_init"]
    return model_preset(preset, len(d.vocabulary), d.task.num_classes, **over)


def _load_params(cfg: dict, d: D.Dataset | None = None) -> ModelParams:
    path = _need_file(cfg.get("checkpoint"))
    params, _ = load_checkpoint(path)
    if d is not None and params.config.num_classes != d.task.num_classes:
        raise ConfigMismatch(f"checkpoint has {params.config.num_classes} classes, dataset {d.task.num_classes}")
    return params


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen(cfg: dict) -> dict:
    d = _dataset({**cfg, "data": None})
    out = _out_dir(cfg)
    path = out / "dataset.jsonl"
    D.save(d, path)
    return {"dataset": str(path), "vocabulary": str(D.vocab_path_for(path)), "examples": len(d.examples)}


def cmd_train(cfg: dict) -> dict:
    d = _dataset(cfg)
    mc = _model_config(cfg, d)
    tc = train_preset(cfg["preset"], **{**_recipe(cfg, d, "train"), **_pick(cfg, "train"), "seed": int(cfg["seed"])})
    out = _out_dir(cfg)
    log = (lambda s: print(s, file=sys.stderr)) if not cfg.get("quiet") else None
    params, report = train(d, mc, tc, time_budget=cfg.get("time_budget"), log=log)
    save_checkpoint(out / "model.ckpt", params, {"task": d.task.task.value, "train": tc.to_dict()})
    report.write(out)
    return {"checkpoint": str(out / "model.ckpt"), "best_val_accuracy": report.best_val_accuracy,
            "test_accuracy": report.test_accuracy}


def cmd_eval(cfg: dict) -> dict:
    d = _dataset(cfg)
    params = _load_params(cfg, d)
    split = cfg.get("split") or "test"
    acc = evaluate(d.samples(split), params)
    out = _out_dir(cfg)
    result = {"split": split, "accuracy": acc, "samples": len(d.samples(split))}
    (out / "accuracy.json").write_text(json.dumps(result, indent=2) + "\n")
    return result


def cmd_robustness(cfg: dict) -> dict:
    d = _dataset(cfg)
    params = _load_params(cfg, d)
    rep = robustness_eval(d, params, int(cfg.get("num_permutations") or 10), int(cfg["seed"]),
                          split=cfg.get("split") or "test")
    out = _out_dir(cfg)
    (out / "robustness.json").write_text(json.dumps(rep.to_json(), indent=2) + "\n")
    return rep.to_json()


def cmd_interpret(cfg: dict) -> dict:
    from . import interpret as I

    d = _dataset(cfg)
    params = _load_params(cfg, d)
    examples = d.split(cfg.get("split") or "test")
    limit = cfg.get("samples")
    if limit:
        examples = examples[: int(limit)]
    examples = [e for e in examples if e.gt_nodes]
    if not examples:
        raise CliError(EXIT_DATA, "data", "no examples with ground-truth node sets")
    method = cfg.get("method") or "query_attention"

    def explain(ex):
        if method == "query_attention":
            return I.query_attention_importance(ex.sample, params, cfg.get("layer_policy") or "last")
        if method in ("saliency", "input_x_gradient"):
            return I.gradient_importance(ex.sample, params, method)
        if method == "oracle":
            return I.oracle_importance(ex)
        raise CliError(EXIT_USAGE, "usage", f"unknown method {method!r}")

    out = _out_dir(cfg)
    results = {e.id: explain(e) for e in examples}
    curves = [(e.id, I.recall_at_k(results[e.id], e.gt_nodes)) for e in examples]
    (out / "recall.csv").write_text(I.recall_csv(curves))
    grid = cfg.get("sparsity") or (0.0, 0.2, 0.4, 0.6, 0.8)
    if not isinstance(grid, tuple):
        grid = (grid,)
    fid = I.fidelity(examples, d, params, lambda e: results[e.id], grid)
    (out / "fidelity.csv").write_text(fid.to_csv())
    curve = I.layerwise_attention_curve([e.sample for e in examples], params)
    (out / "layers.csv").write_text(curve.to_csv())
    mean_r2 = float(np.mean([c[min(1, len(c) - 1)] for _, c in curves]))
    return {"method": method, "samples": len(examples), "mean_recall_at_2": mean_r2,
            "fidelity": dict(zip(map(str, fid.sparsity), fid.fidelity)), "notes": fid.notes}


def cmd_bench(cfg: dict) -> dict:
    spec_cfg = model_preset(cfg.get("model_preset") or "desk", 16, 2, **_pick(cfg, "model"))
    nodes = cfg.get("nodes") or (16, 32, 64, 128)
    if not isinstance(nodes, tuple):
        nodes = (nodes,)
    rows = complexity_benchmark(spec_cfg, [int(n) for n in nodes], int(cfg.get("tokens_per_node") or 16),
                                int(cfg.get("repeats") or 5), int(cfg["seed"]))
    out = _out_dir(cfg)
    (out / "bench.csv").write_text(bench_csv(rows))
    return {"rows": [dataclasses.asdict(r) for r in rows]}


def cmd_grad_check(cfg: dict) -> dict:
    spec = D.TaskSpec.preset(cfg.get("task") or "edge_existence", "desk", size=int(cfg.get("size") or 50))
    d = D.build_dataset(spec, seed=int(cfg["seed"]))
    mc = model_preset("tiny", len(d.vocabulary), d.task.num_classes, dtype="float64")
    params = ModelParams.init(mc, seed=int(cfg["seed"]), std=0.5)
    samples = d.samples("train")[: int(cfg.get("samples") or 20)]
    rep = ad.grad_check(lambda: loss(samples, params), params.tensors, max_coords=20, seed=int(cfg["seed"]))
    out = _out_dir(cfg)
    result = {"passed": bool(rep.passed), "max_rel_error": float(rep.max_rel_error), "tol": rep.tol,
              "checked": rep.checked, "per_param": {k: float(v) for k, v in rep.per_param.items()}}
    (out / "grad_check.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    if not rep.passed:
        raise CliError(EXIT_CHECK_FAILED, "grad_check_failed", f"max relative error {rep.max_rel_error:.3g}")
    return {k: result[k] for k in ("passed", "max_rel_error", "checked")}


COMMANDS = {
    "gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "robustness": cmd_robustness,
    "interpret": cmd_interpret, "bench": cmd_bench, "grad-check": cmd_grad_check,
}


class _Parser(argparse.ArgumentParser):
    """argparse with a one-line JSON diagnostic instead of the usage dump."""

    def error(self, message):
        _diagnose("usage", f"{self.prog}: {message}")
        self.exit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="hlmg", description="Hierarchical graph language model toolkit")
    ap.add_argument("--version", action="version", version=f"hlmg {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    tasks = [t.value for t in Task]
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--task", choices=tasks)
        p.add_argument("--preset", choices=["desk", "paper"])
        p.add_argument("--seed", type=int)
        p.add_argument("--dialect", choices=["cgdl", "adjlist", "edges"])
        p.add_argument("--pooling", choices=["mean", "concat"])
        p.add_argument("--alpha-init", type=float)
        p.add_argument("--out", help="output directory")
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--checkpoint", help="model checkpoint file")
        p.add_argument("--data", help="dataset JSONL written by `gen`")
        if name == "train":
            p.add_argument("--epochs", type=int)
            p.add_argument("--lr", type=float)
            p.add_argument("--time-budget", type=float, help="seconds; stop when another epoch would not fit")
            p.add_argument("--quiet", action="store_true", default=None)
        if name in ("eval", "robustness", "interpret"):
            p.add_argument("--split", choices=list(D.SPLITS))
        if name == "robustness":
            p.add_argument("--num-permutations", type=int)
        if name == "interpret":
            p.add_argument("--method", choices=["query_attention", "saliency", "input_x_gradient", "oracle"])
            p.add_argument("--samples", type=int, help="limit to the first N examples")
        if name == "bench":
            p.add_argument("--nodes", type=int, nargs="+")
            p.add_argument("--tokens-per-node", type=int)
            p.add_argument("--repeats", type=int)
        if name == "grad-check":
            p.add_argument("--samples", type=int)
    return ap


def _diagnose(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)  # exits with 2 on unknown flags
    try:
        cfg = resolve(args)
        cfg["command"] = args.command
        if isinstance(cfg.get("nodes"), list):
            cfg["nodes"] = tuple(cfg["nodes"])
        result = COMMANDS[args.command](cfg)
    except CliError as e:
        _diagnose(e.kind, str(e))
        return e.code
    except FileNotFoundError as e:
        _diagnose("missing_file", str(e))
        return EXIT_MISSING_FILE
    except ConfigMismatch as e:
        _diagnose("config_mismatch", str(e))
        return EXIT_CONFIG
    except (D.DatasetError, SequenceTooLong) as e:
        _diagnose("data", str(e))
        return EXIT_DATA
    except TrainingDiverged as e:
        _diagnose("diverged", str(e))
        return EXIT_DIVERGED
    except (KeyError, ValueError, TypeError) as e:
        _diagnose("config", str(e))
        return EXIT_CONFIG
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
