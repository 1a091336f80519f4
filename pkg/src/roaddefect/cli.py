"""Command-line entry points: generate-data, train, eval, cka.

Every subcommand takes ``--config`` (JSON file), ``--seed`` and ``--out``;
flags override the matching config keys. Logs go to stderr as one JSON
object per line. Exit codes: 0 success, 2 config, 3 shape, 4 numeric,
5 domain, 6 parse, 7 compatibility, 1 anything else.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .errors import ConfigError, RoadDefectError

log = logging.getLogger("roaddefect")


class JsonLineFormatter(logging.Formatter):
    def format(self, record):
        msg = record.getMessage()
        try:
            payload = json.loads(msg)
            if not isinstance(payload, dict):
                payload = {"message": payload}
        except json.JSONDecodeError:
            payload = {"message": msg}
        entry = {"level": record.levelname.lower(), "logger": record.name}
        entry.update(payload)
        return json.dumps(entry, sort_keys=True)


def _setup_logging(level=logging.INFO):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    root = logging.getLogger("roaddefect")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False


def _event(name, **fields):
    log.info(json.dumps({"event": name, **fields}, default=str))


def _read_json(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno}: {e.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return data


def _train_config(args):
    from .train import TrainConfig

    raw = _read_json(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
        scene = raw.setdefault("data", {}).setdefault("scene", {})
        scene["seed"] = args.seed
    return TrainConfig.from_dict(raw)


def _pick(raw: dict, key: str, override, allowed: set):
    bad = set(raw) - allowed
    if bad:
        raise ConfigError(f"unknown config field(s): {sorted(bad)}")
    value = override if override is not None else raw.get(key)
    if value is None:
        raise ConfigError(f"{key}: required (config key or command-line flag)")
    return value


# -- subcommands -------------------------------------------------------------

def cmd_generate_data(args) -> dict:
    from .data import generate_dataset, write_dataset

    cfg = _train_config(args)
    count = args.count if args.count is not None else cfg.train_count + cfg.eval_count
    if count < 1:
        raise ConfigError("count: must be positive")
    records = generate_dataset(cfg.scene, count)
    write_dataset(records, args.out, cfg.scene)
    n_inst = sum(len(r.instances) for r in records)
    return {"images": count, "instances": n_inst, "path": str(args.out)}


def cmd_train(args) -> dict:
    from .train import run_train

    cfg = _train_config(args)
    if args.data is not None:
        cfg = cfg.replace(dataset=args.data)
    if args.epochs is not None:
        cfg = cfg.replace(epochs=args.epochs)
    res = run_train(cfg, args.out)
    last = res["history"][-1]
    return {"final": str(res["final"]), "best": str(res["best"]), "epochs": cfg.epochs,
            "final_loss": last["loss"]}


EVAL_KEYS = {"checkpoint", "dataset", "iou_threshold", "score_threshold", "mask_threshold"}


def cmd_eval(args) -> dict:
    from .checkpoint import load_model
    from .data import read_dataset
    from .evaluate import evaluate_model
    from .train import configure_determinism

    configure_determinism()
    raw = _read_json(args.config)
    ckpt = _pick(raw, "checkpoint", args.checkpoint, EVAL_KEYS)
    data = _pick(raw, "dataset", args.data, EVAL_KEYS)
    kw = {k: float(raw[k]) for k in ("iou_threshold", "score_threshold", "mask_threshold")
          if k in raw}
    model, _ = load_model(ckpt)
    records = read_dataset(data)
    report = evaluate_model(model, records, **kw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.txt").write_text(report.to_text())
    return {"map_mask": report.map_mask, "map_box": report.map_box, "aiu": report.aiu,
            "ods": report.ods, "ois": report.ois, "images": len(records)}


CKA_KEYS = {"checkpoint_a", "checkpoint_b", "dataset", "layers", "max_examples"}


def cmd_cka(args) -> dict:
    from .checkpoint import load_model
    from .cka import MAX_EXAMPLES
    from .data import read_dataset
    from .checkpoint import save_tensors
    from .experiments import layer_activations, render_similarity, similarity
    from .train import configure_determinism

    configure_determinism()
    raw = _read_json(args.config)
    a = _pick(raw, "checkpoint_a", args.a, CKA_KEYS)
    b = _pick(raw, "checkpoint_b", args.b, CKA_KEYS)
    data = _pick(raw, "dataset", args.data, CKA_KEYS)
    model_a, _ = load_model(a)
    model_b, _ = load_model(b)
    records = read_dataset(data)[:int(raw.get("max_examples", MAX_EXAMPLES))]
    layers = raw.get("layers") or model_a.layer_names()
    sim = similarity(model_a, model_b, records, layers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"layers": layers, "matrix": sim.tolist(), "mean": float(sim.mean()),
               "examples": len(records)}
    (out / "similarity.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    render_similarity(sim, out / "similarity.pgm")
    if args.dump_activations:
        for tag, model, path in (("a", model_a, a), ("b", model_b, b)):
            acts = layer_activations(model, records, layers)
            save_tensors(out / f"activations_{tag}.rdt", acts,
                         {"kind": "activations", "checkpoint": str(path)})
    return {"mean": summary["mean"], "layers": len(layers), "path": str(out / "similarity.json")}


COMMANDS = {"generate-data": cmd_generate_data, "train": cmd_train, "eval": cmd_eval,
            "cka": cmd_cka}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="roaddefect", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", required=True, help="output directory")
        if name == "generate-data":
            p.add_argument("--count", type=int, help="number of images (default train+eval counts)")
        elif name == "train":
            p.add_argument("--data", help="dataset directory (generated there if missing)")
            p.add_argument("--epochs", type=int)
        elif name == "eval":
            p.add_argument("--checkpoint")
            p.add_argument("--data")
        elif name == "cka":
            p.add_argument("--a", help="first checkpoint")
            p.add_argument("--b", help="second checkpoint")
            p.add_argument("--data")
            p.add_argument("--dump-activations", action="store_true",
                           help="also write per-layer activation matrices")
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    t0 = time.time()
    _event("start", command=args.command, seed=args.seed)
    try:
        result = COMMANDS[args.command](args)
    except RoadDefectError as e:
        log.error(json.dumps({"event": "failed", "category": e.category, "error": str(e)}))
        return e.exit_code
    except Exception as e:  # noqa: BLE001 - last-resort category
        log.error(json.dumps({"event": "failed", "category": "internal",
                              "error": f"{type(e).__name__}: {e}"}))
        return 1
    _event("done", command=args.command, seconds=round(time.time() - t0, 3), **result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
