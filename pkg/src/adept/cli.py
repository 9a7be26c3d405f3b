"""Experiment harness: ``adept {init-model,train,calibrate,eval,ablate,bench}``.

Every command reads one YAML config (schema in ``docs/config.md``), writes
into ``--out`` and emits ``report.json``. The report holds only values that
are a function of the config and seed, so reruns are byte-identical; wall
clock timestamps go to ``report.meta.json`` next to it.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import math
import sys
import time
from contextlib import nullcontext
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .cost_model import (
    ParamKind,
    count_parameters,
    late_exit_scenario,
    kv_synth_flops,
    layer_flops,
    vanilla_prefill_ledger,
)
from .errors import (
    AdeptError,
    CheckpointError,
    ConfigError,
    DataError,
    EmptyInput,
    NoTrainingSignal,
    NumericalError,
    TooShort,
    Unreachable,
    ZeroState,
)
from .exit_policy import ExitPolicyConfig, PolicyKind, calibrate_threshold
from .hsm import HSMWeights, count_hsm_parameters, init_hsm
from .model import Model, ModelConfig, init_model, vanilla_prefill
from .runtime import ClassifierHead, Mode, evaluate_classifier, evaluate_lm, state_alignment
from .training import LossKind, TrainConfig, fit_classifier_head, train_hsm, train_hsm_classifier, write_history_csv

log = logging.getLogger("adept")

REPORT_SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "model": {
        "checkpoint": None,
        "n_layers": 4,
        "d_hidden": 64,
        "d_qkv": 64,
        "n_heads": 8,
        "vocab_size": 256,
        "max_seq": 128,
        "ffn_mult": 4,
    },
    "hsm": {"checkpoint": None, "variant": "conv", "activation": "gelu"},
    "classifier": {"pooling": "mean", "n_classes": None},
    "policy": {
        "kind": "inertia_global",
        "delta": 0.95,
        "min_exit_layer": 2,
        "patience_t": 3,
        "entropy_threshold": 1.0,
    },
    "corpus": {
        "train": None,
        "val": None,
        "test": None,
        "format": "text",
        "seq_len": 64,
        "max_train": None,
        "max_val": None,
        "max_test": None,
    },
    "train": {
        "delta_train": None,
        "target_reduction": 0.20,
        "epochs": 4,
        "batch_size": 16,
        "lr_init": 1e-3,
        "weight_decay": 0.01,
        "sim_loss_weight": 3.0,
    },
    "calibrate": {"targets": [0.05, 0.10, 0.20], "tol": 0.01},
    "eval": {"delta_grid": [], "target_reduction": None, "baseline": True},
    "ablate": {
        "which": ["all_at_once", "local_metric", "global_metric", "both_metrics"],
        "target_reduction": 0.10,
    },
    "bench": {
        "scenario": {"n_layers": 48, "d_hidden": 1600, "d_qkv": 1600, "vocab_size": 50257,
                     "seq_len": 1024, "exit_layer": 38},
        "param_dims": [768, 1600],
        "toy_seq_len": 16,
    },
}

ABLATIONS = {
    "all_at_once": PolicyKind.ALL_AT_ONCE,
    "local_metric": PolicyKind.INERTIA_LOCAL,
    "global_metric": PolicyKind.INERTIA_GLOBAL,
    "both_metrics": PolicyKind.INERTIA_BOTH,
}


# --------------------------------------------------------------------------
# config
# --------------------------------------------------------------------------


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise ConfigError(f"unknown config key {where}{k}")
        if isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{where}{k} must be a mapping")
            out[k] = _merge(out[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def load_config(path: str | Path | None, seed: int | None = None) -> dict:
    """Defaults overlaid with the YAML file; relative paths resolve against the file."""
    raw: dict = {}
    base_dir = Path.cwd()
    if path is not None:
        p = Path(path)
        try:
            raw = yaml.safe_load(p.read_text()) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config {p}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"config {p} is not valid YAML: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
        base_dir = p.resolve().parent
    cfg = _merge(DEFAULTS, raw)
    if seed is not None:
        cfg["seed"] = int(seed)
    for section, keys in (("model", ("checkpoint",)), ("hsm", ("checkpoint",)), ("corpus", ("train", "val", "test"))):
        for k in keys:
            v = cfg[section][k]
            if v is not None:
                q = Path(v)
                cfg[section][k] = str(q if q.is_absolute() else (base_dir / q).resolve())
    return cfg


def config_digest(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def policy_from(cfg: dict) -> ExitPolicyConfig:
    try:
        return ExitPolicyConfig(**cfg["policy"])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad policy section: {e}") from e


def model_from(cfg: dict) -> Model:
    mc = cfg["model"]
    if mc["checkpoint"]:
        ck = _load(mc["checkpoint"])
        if ck.model is None:
            raise ConfigError(f"{mc['checkpoint']} holds no model")
        return ck.model
    try:
        config = ModelConfig(**{k: int(v) for k, v in mc.items() if k != "checkpoint"})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad model section: {e}") from e
    return init_model(config, cfg["seed"])


def hsm_from(cfg: dict, model: Model, required: bool = False) -> HSMWeights:
    hc = cfg["hsm"]
    if hc["checkpoint"]:
        ck = _load(hc["checkpoint"])
        if ck.hsm is None:
            raise ConfigError(f"{hc['checkpoint']} holds no HSM")
        if ck.hsm.d_hidden != model.config.d_hidden:
            raise ConfigError("HSM width does not match the model")
        return ck.hsm
    if required:
        raise ConfigError("hsm.checkpoint is required for this command")
    try:
        return init_hsm(model.config.d_hidden, cfg["seed"] + 1, hc["variant"], hc["activation"])
    except ValueError as e:
        raise ConfigError(f"bad hsm section: {e}") from e


def _load(path: str):
    if not Path(path).exists():
        raise ConfigError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except CheckpointError as e:
        raise ConfigError(f"cannot load {path}: {e}") from e


def read_corpus(path: str | None, seq_len: int, max_seqs: int | None, max_seq: int, what: str) -> list[list[int]]:
    """Byte-tokenize a UTF-8 text file into consecutive non-overlapping chunks."""
    if path is None:
        raise ConfigError(f"corpus.{what} is not set")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"corpus.{what} not found: {p}")
    data = p.read_bytes()
    try:
        data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise DataError(f"{p} is not UTF-8: {e}") from e
    if not 2 <= seq_len <= max_seq:
        raise ConfigError(f"corpus.seq_len must lie in [2, {max_seq}]")
    seqs = [list(data[i : i + seq_len]) for i in range(0, len(data) - seq_len + 1, seq_len)]
    if max_seqs is not None:
        seqs = seqs[: int(max_seqs)]
    if not seqs:
        raise DataError(f"{p} is shorter than one sequence of {seq_len} bytes")
    return seqs


def read_labelled(path: str | None, seq_len: int, max_seqs: int | None, what: str) -> list[tuple[list[int], int]]:
    """``text<TAB>label`` lines; text is byte-tokenized and cut to ``seq_len`` bytes."""
    if path is None:
        raise ConfigError(f"corpus.{what} is not set")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"corpus.{what} not found: {p}")
    try:
        lines = p.read_text(encoding="utf-8").splitlines()
    except UnicodeDecodeError as e:
        raise DataError(f"{p} is not UTF-8: {e}") from e
    out = []
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        text, sep, label = line.rpartition("\t")
        ids = list(text.encode("utf-8"))[:seq_len]
        if not sep or not ids:
            raise DataError(f"{p}:{n}: expected 'text<TAB>label'")
        try:
            y = int(label)
        except ValueError as e:
            raise DataError(f"{p}:{n}: label {label!r} is not an integer") from e
        if y < 0:
            raise DataError(f"{p}:{n}: negative label")
        out.append((ids, y))
    if max_seqs is not None:
        out = out[: int(max_seqs)]
    if not out:
        raise DataError(f"{p} holds no labelled lines")
    return out


def task_of(cfg: dict) -> Mode:
    fmt = cfg["corpus"]["format"]
    if fmt == "text":
        return Mode.LM
    if fmt == "tsv":
        return Mode.CLASSIFY
    raise ConfigError(f"corpus.format must be 'text' or 'tsv', got {fmt!r}")


def corpora(cfg: dict, model: Model, *which: str) -> list[list]:
    c = cfg["corpus"]
    seq_len = int(c["seq_len"])
    if task_of(cfg) is Mode.CLASSIFY:
        if not 1 <= seq_len <= model.config.max_seq:
            raise ConfigError(f"corpus.seq_len must lie in [1, {model.config.max_seq}]")
        return [read_labelled(c[w], seq_len, c[f"max_{w}"], w) for w in which]
    return [read_corpus(c[w], seq_len, c[f"max_{w}"], model.config.max_seq, w) for w in which]


def head_for(cfg: dict, model: Model) -> ClassifierHead:
    """The classifier stored with the HSM, else one fitted on the training split."""
    path = cfg["hsm"]["checkpoint"]
    if path:
        ck = _load(path)
        if ck.head is not None:
            if ck.head.w.shape[0] != model.config.d_hidden:
                raise ConfigError("classifier width does not match the model")
            return ck.head
    (train,) = corpora(cfg, model, "train")
    cc = cfg["classifier"]
    try:
        return fit_classifier_head(model, train, cc["n_classes"], cc["pooling"])
    except ValueError as e:
        raise ConfigError(f"bad classifier section: {e}") from e


def _evaluate(model, hsm, policy, data, head) -> dict:
    if head is None:
        row = evaluate_lm(model, hsm, policy, data).as_dict()
    else:
        row = evaluate_classifier(model, hsm, policy, data, head).as_dict()
    return {"delta": policy.delta, **row}


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


def _clean(x: Any) -> Any:
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


def write_report(out: Path, command: str, cfg: dict, metrics: dict, started: float) -> Path:
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "tool_version": __version__,
        "command": command,
        "config_digest": config_digest(cfg),
        "seed": cfg["seed"],
        "config": cfg,
        "metrics": metrics,
    }
    path = out / "report.json"
    path.write_text(json.dumps(_clean(report), indent=2, sort_keys=True) + "\n")
    meta = {
        "started_unix": started,
        "finished_unix": time.time(),
        "report": path.name,
    }
    (out / "report.meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    return path


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for r in rows:
            wr.writerow([repr(v) if isinstance(v, float) else v for v in r])


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_init_model(cfg: dict, out: Path) -> dict:
    model = model_from(cfg)
    save_checkpoint(out / "model.adpt", model=model)
    return {
        "model": model.config.as_dict(),
        "parameters": model.n_parameters(),
        "checkpoint": "model.adpt",
    }


def _calibrate(model, hsm, corpus, target, tol, policy, mode=Mode.LM) -> dict:
    if mode is Mode.CLASSIFY:
        corpus = [ids for ids, _ in corpus]
    try:
        res = calibrate_threshold(model, hsm, corpus, target, tol, policy=policy, mode=mode)
    except Unreachable as e:
        return {"target": target, "status": "unreachable", "delta": None,
                "achieved": None, "max_achievable": e.max_achievable}
    return {
        "target": target,
        "status": "ok" if res.within_tol else "outside_tolerance",
        "delta": res.delta,
        "achieved": res.achieved,
        "probes": len(res.probes),
    }


def cmd_train(cfg: dict, out: Path) -> dict:
    model = model_from(cfg)
    hsm0 = hsm_from(cfg, model)
    policy = policy_from(cfg)
    mode = task_of(cfg)
    train, val = corpora(cfg, model, "train", "val")
    head = head_for(cfg, model) if mode is Mode.CLASSIFY else None
    tc = cfg["train"]
    delta = tc["delta_train"]
    calib = None
    if delta is None:
        calib = _calibrate(model, hsm0, val, float(tc["target_reduction"]), 0.01, policy, mode)
        if calib["delta"] is None:
            raise DataError(f"cannot calibrate a training threshold: {calib}")
        delta = calib["delta"]
    try:
        config = TrainConfig(
            delta_train=float(delta),
            epochs=int(tc["epochs"]),
            batch_size=int(tc["batch_size"]),
            lr_init=float(tc["lr_init"]),
            weight_decay=float(tc["weight_decay"]),
            loss_kind=LossKind.SIM_BCE if head is not None else LossKind.LM_CE,
            sim_loss_weight=float(tc["sim_loss_weight"]),
            seed=cfg["seed"],
        )
    except ValueError as e:
        raise ConfigError(f"bad train section: {e}") from e
    if head is None:
        res = train_hsm(model, hsm0, train, policy, config, val)
    else:
        res = train_hsm_classifier(model, hsm0, train, policy, head, config)
    save_checkpoint(out / "hsm.adpt", hsm=res.hsm, head=head)
    write_history_csv(res.history, out / "history.csv")
    last = res.history[-1]
    return {
        "task": mode.value,
        "delta_train": float(delta),
        "calibration": calib,
        "initial_loss": res.initial_loss,
        "final_train_loss": last.train_loss,
        "final_val_loss": last.val_loss,
        "final_lr": last.lr,
        "history": [vars(h) for h in res.history],
        "checkpoint": "hsm.adpt",
    }


def cmd_calibrate(cfg: dict, out: Path) -> dict:
    model = model_from(cfg)
    hsm = hsm_from(cfg, model)
    mode = task_of(cfg)
    (val,) = corpora(cfg, model, "val")
    policy = policy_from(cfg)
    cc = cfg["calibrate"]
    rows, warnings = [], []
    for t in cc["targets"]:
        try:
            r = _calibrate(model, hsm, val, float(t), float(cc["tol"]), policy, mode)
        except ValueError as e:
            raise ConfigError(f"bad calibration target {t!r}: {e}") from e
        if r["status"] != "ok":
            warnings.append(f"target {t}: {r['status']}")
            log.warning("target %s: %s", t, r["status"])
        rows.append(r)
    write_csv(out / "calibration.csv", ["target", "delta", "achieved", "status"],
              [[r["target"], r["delta"], r["achieved"], r["status"]] for r in rows])
    return {"task": mode.value, "rows": rows, "warnings": warnings}


def cmd_eval(cfg: dict, out: Path) -> dict:
    model = model_from(cfg)
    hsm = hsm_from(cfg, model)
    policy = policy_from(cfg)
    mode = task_of(cfg)
    ec = cfg["eval"]
    target = ec["target_reduction"]
    names = ["test"] + (["val"] if target is not None else [])
    sets = corpora(cfg, model, *names)
    test = sets[0]
    head = head_for(cfg, model) if mode is Mode.CLASSIFY else None
    score = "accuracy" if head is not None else "perplexity"
    metrics: dict[str, Any] = {"task": mode.value, "score": score}
    metrics["vanilla"] = _evaluate(model, None, ExitPolicyConfig(PolicyKind.NONE), test, head)

    if target is not None:
        cal = _calibrate(model, hsm, sets[1], float(target), 0.01, policy, mode)
        metrics["calibration"] = cal
        if cal["delta"] is not None:
            policy = policy.with_delta(cal["delta"])
    metrics["run"] = _evaluate(model, hsm, policy, test, head)
    if head is None:
        m, r, n = state_alignment(model, hsm, policy, test)
        metrics["alignment"] = {"mapped_cosine": m, "raw_cosine": r, "n_exited": n}

    if ec["baseline"]:
        base_policy = policy
        if target is not None:
            cal = _calibrate(model, None, sets[1], float(target), 0.01, policy, mode)
            metrics["truncation_calibration"] = cal
            if cal["delta"] is not None:
                base_policy = policy.with_delta(cal["delta"])
        metrics["truncation"] = _evaluate(model, None, base_policy, test, head)

    grid = [float(d) for d in ec["delta_grid"]]
    if grid:
        rows = [_evaluate(model, hsm, policy.with_delta(d), test, head) for d in grid]
        metrics["sweep"] = [{k: row[k] for k in ("delta", score, "reduction")} for row in rows]
        by_delta = [row["reduction"] for _, row in sorted(zip(grid, rows), key=lambda t: t[0])]
        metrics["sweep_monotone"] = all(a >= b for a, b in zip(by_delta, by_delta[1:]))
        write_csv(out / "sweep.csv", ["delta", score, "reduction"],
                  [[row["delta"], row[score], row["reduction"]] for row in rows])
    return metrics


def cmd_ablate(cfg: dict, out: Path) -> dict:
    model = model_from(cfg)
    hsm = hsm_from(cfg, model)
    mode = task_of(cfg)
    val, test = corpora(cfg, model, "val", "test")
    head = head_for(cfg, model) if mode is Mode.CLASSIFY else None
    score = "accuracy" if head is not None else "perplexity"
    base = policy_from(cfg)
    ac = cfg["ablate"]
    target = float(ac["target_reduction"])
    rows = []
    for name in ac["which"]:
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        pol = ExitPolicyConfig(ABLATIONS[name], base.delta, base.min_exit_layer)
        cal = _calibrate(model, hsm, val, target, 0.01, pol, mode)
        if cal["delta"] is not None:
            pol = pol.with_delta(cal["delta"])
        rows.append({"which": name, "calibration": cal, **_evaluate(model, hsm, pol, test, head)})
    by = {r["which"]: r[score] for r in rows}
    comparisons = {}
    if "all_at_once" in by and "global_metric" in by:
        g, a = by["global_metric"], by["all_at_once"]
        comparisons["token_level_not_worse_than_all_at_once"] = g <= a if head is None else g >= a
    if "global_metric" in by and "both_metrics" in by:
        g, b = by["global_metric"], by["both_metrics"]
        comparisons["global_vs_both_relative_gap"] = abs(g - b) / g if g else None
    write_csv(out / "ablation.csv", ["which", "delta", score, "reduction"],
              [[r["which"], r["delta"], r[score], r["reduction"]] for r in rows])
    return {"task": mode.value, "score": score, "rows": rows, "comparisons": comparisons}


def cmd_bench(cfg: dict, out: Path) -> dict:
    bc = cfg["bench"]
    sc = bc["scenario"]
    big = ModelConfig(sc["n_layers"], sc["d_hidden"], sc["d_qkv"], 1, sc["vocab_size"], sc["seq_len"])
    scen = late_exit_scenario(big, int(sc["seq_len"]), int(sc["exit_layer"]))
    scenario = {
        **scen,
        "kv_share_of_layer_at_last_position": kv_synth_flops(big)
        / sum(layer_flops(big, sc["seq_len"], sc["seq_len"] - 1).values()),
        "reference_pair": [0.181, 0.197],
        "reference_gap": 0.016,
        "gap_deviation": scen["gap"] - 0.016,
        "gap_within_1pp": abs(scen["gap"] - 0.016) <= 0.01,
    }
    params = []
    for d in bc["param_dims"]:
        c = ModelConfig(sc["n_layers"], int(d), int(d), 1, sc["vocab_size"], sc["seq_len"])
        params.append({
            "d_hidden": int(d),
            "hsm": count_hsm_parameters(int(d)),
            "per_layer_heads": count_parameters(ParamKind.PER_LAYER_HEADS, c),
        })
    model = model_from(cfg)
    n = int(bc["toy_seq_len"])
    ids = (np.arange(n) * 7 + cfg["seed"]) % model.config.vocab_size
    inst = vanilla_prefill(model, ids.tolist()).ledger
    closed = vanilla_prefill_ledger(model.config, n)
    toy = {
        "seq_len": n,
        "instrumented": inst.to_dict(),
        "closed_form": closed.to_dict(),
        "exact_match": inst.to_dict() == closed.to_dict(),
        "base_parameters": count_parameters(ParamKind.BASE, model.config),
    }
    write_csv(out / "params.csv", ["d_hidden", "hsm", "per_layer_heads"],
              [[p["d_hidden"], p["hsm"], p["per_layer_heads"]] for p in params])
    return {"scenario": scenario, "parameters": params, "toy": toy}


COMMANDS = {
    "init-model": cmd_init_model,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adept", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, default=None, help="YAML experiment config")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out", type=Path, default=Path("runs") / name, help="output directory")
        sp.add_argument("--threads", type=int, default=None, help="BLAS thread limit")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def _exit_code(e: BaseException) -> int:
    if isinstance(e, (ConfigError, CheckpointError)):
        return EXIT_CONFIG
    if isinstance(e, (DataError, EmptyInput, TooShort, NoTrainingSignal)):
        return EXIT_DATA
    if isinstance(e, (NumericalError, ZeroState, FloatingPointError)):
        return EXIT_NUMERICAL
    return 1


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    started = time.time()
    try:
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(args.config, args.seed)
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        if args.threads:
            from threadpoolctl import threadpool_limits

            limiter = threadpool_limits(limits=args.threads)
        else:
            limiter = nullcontext()
        with limiter, np.errstate(over="raise", invalid="raise", divide="ignore", under="ignore"):
            metrics = COMMANDS[args.command](cfg, out)
        path = write_report(out, args.command, cfg, metrics, started)
    except AdeptError as e:
        print(f"adept {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return _exit_code(e)
    except FloatingPointError as e:
        print(f"adept {args.command}: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
