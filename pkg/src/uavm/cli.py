"""``uavm`` command line: generate data, train, probe, infer and sweep.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric failure.

An experiment config is a JSON object::

    {"model": {...}, "train": {...}, "data": {...}, "probes": [...], "seeds": [0, 1, 2]}

``data`` is either a synthetic spec (the :class:`SynthSpec` fields) or
``{"train_archive": PATH, "eval_archive": PATH}``.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint as ckpt
from . import data as synth
from . import probes
from .errors import ConfigError, DataError, NumericError, NumericInputError, ShapeError
from .model import AUDIO, VIDEO, UAVM, ModelConfig, count_parameters
from .trainer import TrainConfig, evaluate, run_training

DEFAULT_SEEDS = (0, 1, 2)
MODE_ALIASES = {"unified": "unified", "independent": "independent", "cross": "cross_modal_attention"}
PROBES = ("modality", "retrieval", "attention_mae", "heatmap", "embeddings")
EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: dict = field(default_factory=dict)
    probes: list = field(default_factory=list)
    seeds: list = field(default_factory=lambda: list(DEFAULT_SEEDS))
    out: Optional[str] = None

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        train.pop("seed")
        return {
            "model": self.model.to_dict(),
            "train": train,
            "data": self.data,
            "probes": list(self.probes),
            "seeds": list(self.seeds),
            "out": self.out,
            "format_versions": {"checkpoint": ckpt.FORMAT_VERSION, "uavf": synth.FORMAT_VERSION},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        d.pop("format_versions", None)
        unknown = set(d) - {"model", "train", "data", "probes", "seeds", "out"}
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
        train = dict(d.get("train", {}))
        train.pop("seed", None)
        exp = cls(
            model=ModelConfig.from_dict(d.get("model", {})),
            train=TrainConfig.from_dict(train),
            data=dict(d.get("data", {})),
            probes=list(d.get("probes", [])),
            seeds=[int(s) for s in d.get("seeds", DEFAULT_SEEDS)],
            out=d.get("out"),
        )
        for p in exp.probes:
            if p not in PROBES:
                raise ConfigError(f"unknown probe {p!r}; choose from {PROBES}")
        if not exp.seeds:
            raise ConfigError("seeds must not be empty")
        return exp


# ---------------------------------------------------------------------------
# helpers


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _parse_assignments(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"expected KEY=VALUE, got {item!r}")
        out[key.strip()] = _parse_value(value)
    return out


def _parse_sweep(text: str):
    key, sep, values = text.partition("=")
    if not sep or not values:
        raise UsageError(f"--sweep expects KEY=V1,V2,..., got {text!r}")
    return key.strip(), [_parse_value(v) for v in values.split(",")]


def _parse_k(text: str) -> list:
    try:
        ks = [int(k) for k in text.split(",")]
    except ValueError:
        raise UsageError(f"--k expects comma-separated integers, got {text!r}") from None
    if any(k < 1 for k in ks):
        raise UsageError("--k values must be >= 1")
    return ks


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _load_data(spec: dict):
    if "train_archive" in spec:
        train = synth.load_features(spec["train_archive"])
        ev = synth.load_features(spec["eval_archive"]) if spec.get("eval_archive") else None
        return train, ev
    s = synth.SynthSpec(**spec)
    s.validate()
    return synth.generate(s, "train"), synth.generate(s, "eval")


def _apply_mode(model: ModelConfig, mode: Optional[str]) -> ModelConfig:
    if mode is None:
        return model
    d = model.to_dict()
    d["mode"] = MODE_ALIASES[mode]
    if d["mode"] == "independent" and d["num_shared_layers"]:
        # same depth, every layer modality-specific
        d["num_modal_layers"] += d["num_shared_layers"]
        d["num_shared_layers"] = 0
    return ModelConfig.from_dict(d)


def _apply_override(exp: ExperimentConfig, key: str, value) -> ExperimentConfig:
    model, train = exp.model.to_dict(), exp.train.to_dict()
    train.pop("seed")
    if key == "num_shared_layers":
        total = model["total_layers"] or model["num_modal_layers"] + model["num_shared_layers"]
        if not 0 <= int(value) <= total:
            raise ConfigError(f"num_shared_layers={value} outside [0, {total}]")
        model["num_shared_layers"] = int(value)
        model["num_modal_layers"] = total - int(value)
    elif key in model:
        model[key] = value
    elif key in train:
        train[key] = value
    else:
        raise ConfigError(f"cannot sweep {key!r}: not a model or train config field")
    return ExperimentConfig(ModelConfig.from_dict(model), TrainConfig.from_dict(train), exp.data, exp.probes, exp.seeds, exp.out)


def _mean_std(values) -> tuple:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0


# ---------------------------------------------------------------------------
# probe runner shared by `probe` and `train`


def _layers(model: UAVM, layer) -> list:
    if layer in (None, "all"):
        return list(range(model.config.depth + 1))
    try:
        li = int(layer)
    except ValueError:
        raise UsageError(f"--layer expects an integer or 'all', got {layer!r}") from None
    return [li]


def run_probe(model: UAVM, dataset, name: str, out_dir: Path, seed: int = 0, layer="all", k_list=(1, 5, 10)) -> probes.ProbeReport:
    """Run one named probe, write its JSON report (plus CSV where relevant)."""
    settings: dict = {"num_samples": len(dataset)}
    if name == "modality":
        layers = _layers(model, layer)
        reps = probes.layer_representations(model, dataset, layers)
        results = {str(li): probes.fit_modality_probe(reps[AUDIO][li], reps[VIDEO][li], seed)[0] for li in layers}
        settings.update(layers=layers, l2=1e-4, iterations=500, split_seed=seed)
    elif name == "retrieval":
        layers = _layers(model, layer)
        reps = probes.layer_representations(model, dataset, layers)
        results = {}
        for li in layers:
            rk = probes.recall_at_k(reps[AUDIO][li], reps[VIDEO][li], k_list)
            results[str(li)] = {
                "audio_to_video": {str(k): a2v for k, (a2v, _) in rk.items()},
                "video_to_audio": {str(k): v2a for k, (_, v2a) in rk.items()},
            }
        settings.update(layers=layers, k=list(k_list), chance_at_1=1.0 / len(dataset))
    elif name == "attention_mae":
        results = {"mae": probes.attention_mae_dataset(model, dataset)}
        settings.update(layer=model.config.depth)
    elif name == "heatmap":
        li = None if layer in (None, "all") else _layers(model, layer)[0]
        items = [(s.sample_id, probes.temporal_attention_heatmap(model, s, li)) for s in dataset.samples]
        csv_path = probes.write_heatmaps_csv(items, out_dir / "heatmap.csv")
        results = {"csv": csv_path.name, "num_heads": model.config.num_heads}
        settings.update(layer=model.config.depth if li is None else li)
    elif name == "embeddings":
        layers = _layers(model, layer)
        csv_path = probes.export_embeddings(model, dataset, layers, out_dir / "embeddings.csv")
        results = {"csv": csv_path.name}
        settings.update(layers=layers)
    else:
        raise UsageError(f"unknown probe {name!r}; choose from {PROBES}")
    report = probes.ProbeReport(name, results, int(seed), model.checkpoint_id(), settings)
    report.write_json(out_dir / f"probe_{name}.json")
    return report


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    spec_d = json.loads(Path(args.config).read_text()) if args.config else {}
    spec_d.update(_parse_assignments(args.set))
    if args.seed:
        spec_d["seed"] = args.seed[-1]
    try:
        spec = synth.SynthSpec(**spec_d)
    except TypeError as e:
        raise ConfigError(f"invalid synthetic spec: {e}") from None
    spec.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "spec.json", spec.to_dict())
    train, ev = synth.generate(spec, "train"), synth.generate(spec, "eval")
    synth.save_features(train, out / "train.uavf")
    synth.save_features(ev, out / "eval.uavf")
    synth.write_manifest([train, ev], out / "manifest.csv")
    print(f"wrote {len(train)} train and {len(ev)} eval samples to {out}")
    return 0


def _train_one(exp: ExperimentConfig, run_dir: Path, train, ev) -> dict:
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_json(run_dir / "experiment.json", exp.to_dict())
    per_seed = []
    for seed in exp.seeds:
        seed_dir = run_dir / f"seed{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        tc = TrainConfig.from_dict({**exp.train.to_dict(), "seed": seed})
        model = UAVM.create(exp.model, seed)
        _, log = run_training(model.params, exp.model, tc, train)
        ckpt.save_checkpoint(model, seed_dir / "checkpoint.uavc")
        log.write_csv(seed_dir / "trainlog.csv")
        log.write_json(seed_dir / "trainlog.json")
        metrics = {"seed": seed, "checkpoint_id": model.checkpoint_id()}
        if ev is not None and len(ev):
            metrics.update({k: v for k, v in evaluate(model.params, exp.model, ev).items() if v is not None})
            for name in exp.probes:
                run_probe(model, ev, name, seed_dir, seed)
        metrics["parameters"] = count_parameters(model.params)["total"]
        _write_json(seed_dir / "metrics.json", metrics)
        per_seed.append(metrics)
    keys = [k for k, v in per_seed[0].items() if k not in ("seed", "checkpoint_id") and isinstance(v, (int, float))]
    summary = {}
    for k in keys:
        mean, std = _mean_std([m[k] for m in per_seed])
        summary[k] = {"mean": mean, "std": std, "n": len(per_seed)}
    with (run_dir / "summary.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "mean", "std", "n"] + [f"seed{s}" for s in exp.seeds])
        for k in keys:
            w.writerow([k, repr(summary[k]["mean"]), repr(summary[k]["std"]), len(per_seed)] + [repr(float(m[k])) for m in per_seed])
    _write_json(run_dir / "summary.json", {"seeds": list(exp.seeds), "metrics": summary})
    return summary


def cmd_train(args) -> int:
    exp = ExperimentConfig.from_dict(json.loads(Path(args.config).read_text()))
    if args.seed:
        exp.seeds = list(args.seed)
    if args.mode:
        exp.model = _apply_mode(exp.model, args.mode)
    if args.probe:
        exp.probes = [args.probe]
    out = Path(args.out or exp.out or "runs")
    exp.out = str(out)
    out.mkdir(parents=True, exist_ok=True)
    train, ev = _load_data(exp.data)
    if not args.sweep:
        summary = _train_one(exp, out, train, ev)
        print(json.dumps(summary, sort_keys=True))
        return 0
    key, values = _parse_sweep(args.sweep)
    points = [(v, _apply_override(exp, key, v)) for v in values]  # validate every point first
    rows = []
    for value, point in points:
        summary = _train_one(point, out / f"{key}={value}", train, ev)
        for metric, s in summary.items():
            rows.append([key, value, metric, repr(s["mean"]), repr(s["std"]), s["n"]])
    with (out / "sweep_summary.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["key", "value", "metric", "mean", "std", "n"])
        w.writerows(rows)
    print(f"swept {key} over {values}; summary in {out / 'sweep_summary.csv'}")
    return 0


def cmd_probe(args) -> int:
    if not args.probe:
        raise UsageError("--probe is required")
    model = ckpt.load_checkpoint(args.checkpoint)
    ds = synth.load_features(args.data, model.config.feature_dim, model.config.seq_len)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed[-1] if args.seed else 0
    report = run_probe(model, ds, args.probe, out, seed, args.layer, _parse_k(args.k))
    print(json.dumps(report.results, sort_keys=True))
    return 0


def cmd_infer(args) -> int:
    if args.drop_audio and args.drop_video:
        raise UsageError("at least one modality must be kept; both --drop-audio and --drop-video were given")
    model = ckpt.load_checkpoint(args.checkpoint)
    ds = synth.load_features(args.sample, model.config.feature_dim, model.config.seq_len)
    samples = ds.samples
    if args.sample_id:
        samples = [s for s in samples if s.sample_id == args.sample_id]
        if not samples:
            raise DataError(f"sample id {args.sample_id!r} not found in {args.sample}")
    inputs = [m for m, dropped in ((AUDIO, args.drop_audio), (VIDEO, args.drop_video)) if not dropped]
    preds = []
    for s in samples:
        a = None if args.drop_audio else s.audio
        v = None if args.drop_video else s.video
        logits = model.infer(a, v)
        preds.append({"sample_id": s.sample_id, "logits": [float(x) for x in logits], "predicted": int(np.argmax(logits))})
    result = {"checkpoint_id": model.checkpoint_id(), "inputs": inputs, "fusion": model.config.fusion, "predictions": preds}
    text = json.dumps(result, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="uavm", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic train/eval archive pair")
    g.add_argument("--config", help="JSON file with synthetic spec fields")
    g.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one spec field")
    g.add_argument("--seed", type=int, action="append")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one config over seeds, or a sweep")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, action="append")
    t.add_argument("--out")
    t.add_argument("--mode", choices=sorted(MODE_ALIASES))
    t.add_argument("--sweep", metavar="KEY=V1,V2,...")
    t.add_argument("--probe", choices=PROBES)
    t.set_defaults(func=cmd_train)

    p = sub.add_parser("probe", help="run a representation probe on a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="UAVF archive to probe on")
    p.add_argument("--probe", choices=PROBES)
    p.add_argument("--layer", default="all")
    p.add_argument("--k", default="1,5,10")
    p.add_argument("--seed", type=int, action="append")
    p.add_argument("--out")
    p.set_defaults(func=cmd_probe)

    i = sub.add_parser("infer", help="predict from a checkpoint, optionally dropping a modality")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--sample", required=True, help="UAVF archive with the samples")
    i.add_argument("--sample-id")
    i.add_argument("--drop-audio", action="store_true")
    i.add_argument("--drop-video", action="store_true")
    i.add_argument("--out")
    i.set_defaults(func=cmd_infer)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (NumericError, NumericInputError) as e:
        print(f"uavm: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as e:
        print(f"uavm: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ShapeError, OSError) as e:
        print(f"uavm: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except json.JSONDecodeError as e:
        print(f"uavm: config error: invalid JSON: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
