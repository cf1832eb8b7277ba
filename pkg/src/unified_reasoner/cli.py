"""Command-line entry point: ``unified-reasoner <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import yaml

from .codec import Vocab, max_target_len
from .model import DecoderConfig, EncoderConfig, ModelConfig, SlotConfig, UnifiedModel
from .worldgen.acre import AcreConfig
from .worldgen.cater import CaterConfig

log = logging.getLogger("unified_reasoner")

DATA_KINDS = ("cater", "acre")
EXT = ".urd"


class UsageError(Exception):
    pass


def default_config() -> Dict[str, Any]:
    from .probe import ProbeConfig
    from .trainer.loop import TrainConfig

    cater = asdict(CaterConfig())
    cater["size_table"] = list(cater["size_table"])
    acre = asdict(AcreConfig())
    for k in ("objects_per_episode", "objects_per_panel", "type_freqs"):
        acre[k] = list(acre[k])
    enc = asdict(EncoderConfig())
    enc["conv_channels"] = list(enc["conv_channels"])
    enc["conv_strides"] = list(enc["conv_strides"])
    probe = asdict(ProbeConfig())
    return {
        "seed": 0,
        "data": {"dir": "data", "counts": {"cater": {"train": 1000, "val": 100, "test": 200},
                                           "acre": {"train": 2000, "val": 200, "test": 500}}},
        "worldgen": {"cater": cater, "acre": acre},
        "model": {"encoder": enc, "slots": asdict(SlotConfig()),
                  "decoder": {k: v for k, v in asdict(DecoderConfig()).items() if k != "vocab_size"},
                  "max_frames": 8, "max_objects": 6},
        "train": {**{k: v for k, v in asdict(TrainConfig()).items()
                     if k not in ("seed", "grid", "num_slots", "backbone")},
                  "schedule": {"kind": "single-switch", "pretrain_task": "detect_all", "main_task": "cater",
                               "pretrain_steps": 2000, "interval": 100, "pretrain_domain": None}},
        "probe": {k: v for k, v in probe.items() if k not in ("seed", "checkpoint")},
        "eval": {"split": "test", "limit": 0, "per_sample": 2},
    }


# ----------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------
def merge(base: Dict[str, Any], update: Dict[str, Any], path: str = "") -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for k, v in (update or {}).items():
        key = f"{path}{k}"
        if k not in out:
            raise UsageError(f"unknown config key {key!r}")
        if isinstance(out[k], dict) and k != "counts":
            if not isinstance(v, dict):
                raise UsageError(f"config key {key!r} must be a section")
            out[k] = merge(out[k], v, key + ".")
        else:
            out[k] = v
    return out


def apply_override(cfg: Dict[str, Any], dotted: str) -> None:
    if "=" not in dotted:
        raise UsageError(f"override {dotted!r} is not key=value")
    key, raw = dotted.split("=", 1)
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node, dict) or p not in node:
            raise UsageError(f"unknown config key {key!r}")
        node = node[p]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise UsageError(f"unknown config key {key!r}")
    node[parts[-1]] = yaml.safe_load(raw)


def resolve_config(args: argparse.Namespace) -> Dict[str, Any]:
    cfg = default_config()
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                loaded = yaml.safe_load(fh) or {}
        except OSError as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from e
        if not isinstance(loaded, dict):
            raise UsageError(f"config {args.config} must be a mapping")
        loaded.pop("command", None)  # present in resolved snapshots
        cfg = merge(cfg, loaded)
    for o in getattr(args, "set", None) or []:
        apply_override(cfg, o)
    flag_map = {"seed": ("seed",), "schedule": ("train", "schedule", "kind"),
                "pretrain_task": ("train", "schedule", "pretrain_task"),
                "main_task": ("train", "schedule", "main_task"),
                "backbone": ("model", "encoder", "backbone"), "slots": ("model", "slots", "num_slots"),
                "threshold": ("probe", "threshold"), "data": ("data", "dir")}
    for flag, path in flag_map.items():
        v = getattr(args, flag, None)
        if v is not None:
            node = cfg
            for p in path[:-1]:
                node = node[p]
            node[path[-1]] = v
    return cfg


def write_snapshot(cfg: Dict[str, Any], out: Path, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "resolved_config.yaml", "w") as fh:
        yaml.safe_dump({"command": command, **cfg}, fh, sort_keys=True)


def build_vocab(cfg: Dict[str, Any]) -> Vocab:
    k = cfg["worldgen"]["cater"]["grid"]
    return Vocab(num_cells=k * k)


def build_model_config(cfg: Dict[str, Any], vocab: Vocab) -> ModelConfig:
    m = cfg["model"]
    try:
        enc = dict(m["encoder"])
        enc["conv_channels"] = tuple(enc["conv_channels"])
        enc["conv_strides"] = tuple(enc["conv_strides"])
        enc["image_size"] = cfg["worldgen"]["cater"]["image_size"]
        dec = DecoderConfig(**m["decoder"], vocab_size=vocab.size)
        mc = ModelConfig(encoder=EncoderConfig(**enc), slots=SlotConfig(**m["slots"]), decoder=dec,
                         max_frames=m["max_frames"], max_objects=m["max_objects"])
    except TypeError as e:
        raise UsageError(f"bad model config: {e}") from e
    frames_needed = max(cfg["train"]["frames_per_sample"], cfg["worldgen"]["acre"]["contexts"] + 1)
    if mc.max_frames < frames_needed:
        mc.max_frames = frames_needed
    mc.decoder.max_len = max(mc.decoder.max_len, max_target_len(mc.max_objects) + 1)
    mc.validate()
    return mc


def build_train_config(cfg: Dict[str, Any]):
    from .trainer.loop import TrainConfig

    t = {k: v for k, v in cfg["train"].items() if k != "schedule"}
    return TrainConfig(**t, seed=cfg["seed"], grid=cfg["worldgen"]["cater"]["grid"],
                       num_slots=cfg["model"]["slots"]["num_slots"],
                       backbone=cfg["model"]["encoder"]["backbone"])


def cater_config(cfg) -> CaterConfig:
    d = dict(cfg["worldgen"]["cater"])
    d["size_table"] = tuple(d["size_table"])
    return CaterConfig(**d)


def acre_config(cfg) -> AcreConfig:
    d = dict(cfg["worldgen"]["acre"])
    for k in ("objects_per_episode", "objects_per_panel", "type_freqs"):
        d[k] = tuple(d[k])
    return AcreConfig(**d)


def dataset_path(data_dir: Path, kind: str, split: str) -> Path:
    return Path(data_dir) / f"{kind}_{split}{EXT}"


def load_split(data_dir: Path, kind: str, split: str, required: bool = True) -> List:
    from .worldgen.records import read_dataset

    p = dataset_path(data_dir, kind, split)
    if not p.exists():
        if required:
            raise FileNotFoundError(f"missing dataset {p} (run gen-data first)")
        return []
    return read_dataset(p)[1]


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------
def cmd_gen_data(args, cfg) -> int:
    from .worldgen.acre import config_dict as acre_dict
    from .worldgen.cater import config_dict as cater_dict
    from .worldgen.records import SPLITS, generate, png_dump, split_seeds, write_dataset

    out = Path(args.out or cfg["data"]["dir"])
    targets = [dataset_path(out, k, s) for k in DATA_KINDS for s in SPLITS]
    if args.format == "png-dump":
        targets = [out / "png"]
    clash = [p for p in targets if p.exists()]
    if clash and not args.force:
        raise UsageError(f"{clash[0]} exists; pass --force to overwrite")
    write_snapshot(cfg, out, "gen-data")
    configs = {"cater": cater_config(cfg), "acre": acre_config(cfg)}
    dicts = {"cater": cater_dict(configs["cater"]), "acre": acre_dict(configs["acre"])}
    summary = {}
    for kind in DATA_KINDS:
        for split in SPLITS:
            n = int(cfg["data"]["counts"][kind][split])
            seeds = split_seeds(cfg["seed"], split, n)
            samples = generate(kind, seeds, configs[kind])
            if args.format == "png-dump":
                png_dump(out / "png" / f"{kind}_{split}", samples)
            else:
                header = {"kind": kind, "split": split, "seed": cfg["seed"], "config": dicts[kind],
                          "seed_range": [seeds[0], seeds[-1]] if seeds else []}
                write_dataset(dataset_path(out, kind, split), samples, header)
            summary[f"{kind}_{split}"] = n
    print(json.dumps({"command": "gen-data", "out": str(out), "counts": summary}, sort_keys=True))
    return 0


def _schedule(cfg):
    from .trainer.schedule import build_schedule

    s = cfg["train"]["schedule"]
    return build_schedule(s["kind"], s["main_task"], s.get("pretrain_task"),
                          int(s.get("pretrain_steps", 0)), int(s.get("interval", 100)),
                          pretrain_domain=s.get("pretrain_domain"))


def _final_metrics(model, task, samples, vocab, cfg) -> Dict[str, float]:
    from .trainer.evaluate import evaluate_task

    return evaluate_task(model, task, samples, vocab, cfg["train"]["frames_per_sample"],
                         model.cfg.max_objects)


def cmd_train(args, cfg) -> int:
    from .trainer.loop import train
    from .trainer.tasks import make_task

    out = Path(args.out or "run")
    if (out / "checkpoint.urt").exists() and not (args.force or args.resume):
        raise UsageError(f"{out / 'checkpoint.urt'} exists; pass --force or --resume")
    schedule = _schedule(cfg)
    tcfg = build_train_config(cfg)
    vocab = build_vocab(cfg)
    mcfg = build_model_config(cfg, vocab)
    data_dir = Path(cfg["data"]["dir"])
    domains = {t.domain for t in schedule.tasks}
    train_sets = {d: load_split(data_dir, d, "train") for d in domains}
    val_sets = {d: load_split(data_dir, d, "val", required=False) for d in domains}
    write_snapshot(cfg, out, "train")
    if args.force and not args.resume:
        (out / "metrics.jsonl").unlink(missing_ok=True)
    model = UnifiedModel(mcfg, seed=cfg["seed"])
    evaluator = lambda m, t, s: _final_metrics(m, t, s, vocab, cfg)  # noqa: E731
    resume = out / "checkpoint.urt" if args.resume else None
    result = train(tcfg, schedule, model, train_sets, vocab, out_dir=out, val_sets=val_sets,
                   resume=resume, evaluator=evaluator)
    main = make_task(cfg["train"]["schedule"]["main_task"])
    test = load_split(data_dir, main.domain, "test", required=False)
    limit = int(cfg["eval"]["limit"]) or len(test)
    metrics = _final_metrics(result.model, main, test[:limit], vocab, cfg) if test else {}
    for k, v in metrics.items():
        result.log.append(result.step, main.name, f"test/{k}", v)
    print(json.dumps({"command": "train", "out": str(out), "steps": result.step,
                      "task_steps": result.task_steps, "test": {main.name: metrics}}, sort_keys=True))
    return 0


def _load_checked(path: Path, cfg) -> tuple:
    from .trainer.loop import load_checkpoint

    model, _, meta = load_checkpoint(path)
    vocab = Vocab.from_layout(meta["vocab"])
    if vocab.layout() != build_vocab(cfg).layout():
        raise UsageError(f"checkpoint {path} vocabulary does not match the config (grid size?)")
    if model.cfg.encoder.image_size != cfg["worldgen"]["cater"]["image_size"]:
        raise UsageError(f"checkpoint {path} expects {model.cfg.encoder.image_size}px images")
    return model, vocab, meta


def cmd_eval(args, cfg) -> int:
    from .trainer.evaluate import evaluate_acre, evaluate_cater, evaluate_detection, evaluate_task
    from .trainer.schedule import Schedule
    from .trainer.tasks import make_task

    model, vocab, meta = _load_checked(Path(args.checkpoint), cfg)
    split = cfg["eval"]["split"]
    names = args.tasks or sorted({t.name for t in Schedule.from_dict(meta["schedule"]).tasks})
    data_dir = Path(cfg["data"]["dir"])
    n_frames = cfg["train"]["frames_per_sample"]
    report: Dict[str, Any] = {}
    for name in names:
        task = make_task(name)
        samples = load_split(data_dir, task.domain, split)
        if cfg["eval"]["limit"]:
            samples = samples[: int(cfg["eval"]["limit"])]
        if name == "cater":
            r = evaluate_cater(model, samples, vocab, n_frames, model.cfg.max_objects)
            chance = 1.0 / vocab.num_cells
            report[name] = {"accuracy": r.accuracy, "invalid": r.invalid, "n": r.n, "chance": chance,
                            "near_chance": r.accuracy <= 2 * chance}
        elif name == "acre":
            r = evaluate_acre(model, samples, vocab, model.cfg.max_objects)
            report[name] = {"accuracy": r.accuracy, "invalid": r.invalid, "n": r.n,
                            "per_type": r.per_type, "per_type_n": r.per_type_n}
        elif name in ("detect_all", "detect_visible"):
            r = evaluate_detection(model, task, samples, vocab, int(cfg["eval"]["per_sample"]),
                                   model.cfg.max_objects)
            report[name] = {"ap50": r.ap50, "per_class": r.per_class, "flag": r.flag}
        else:
            report[name] = evaluate_task(model, task, samples, vocab, n_frames, model.cfg.max_objects)
    line = json.dumps({"command": "eval", "checkpoint": str(args.checkpoint), "split": split,
                       "metrics": report}, sort_keys=True)
    print(line)
    if args.out:
        out = Path(args.out)
        write_snapshot(cfg, out, "eval")
        (out / "eval.json").write_text(line + "\n")
    return 0


def _probe_config(cfg, checkpoint: str):
    from .probe import ProbeConfig

    p = dict(cfg["probe"])
    if p.get("slot_subsets") is not None:
        p["slot_subsets"] = [list(s) for s in p["slot_subsets"]]
    return ProbeConfig(**p, seed=cfg["seed"], checkpoint=checkpoint)


def cmd_probe(args, cfg) -> int:
    from .probe import probe_report, train_probe

    model, vocab, _ = _load_checked(Path(args.checkpoint), cfg)
    if args.slots is not None and args.slots != model.cfg.slots.num_slots:
        raise UsageError(f"--slots {args.slots} but checkpoint has {model.cfg.slots.num_slots} slots")
    out = Path(args.out or "probe")
    if (out / "probe.urt").exists() and not args.force:
        raise UsageError(f"{out / 'probe.urt'} exists; pass --force to overwrite")
    pcfg = _probe_config(cfg, str(args.checkpoint))
    data_dir = Path(cfg["data"]["dir"])
    train_set = load_split(data_dir, "cater", "train")
    eval_set = load_split(data_dir, "cater", cfg["eval"]["split"])
    if cfg["eval"]["limit"]:
        eval_set = eval_set[: int(cfg["eval"]["limit"])]
    write_snapshot(cfg, out, "probe")
    probe = train_probe(pcfg, model, train_set, vocab)
    probe.save(out / "probe.urt", vocab)
    summary: Dict[str, Any] = {"command": "probe", "out": str(out), "final_loss": probe.losses[-1]}
    if pcfg.task == "snitch":
        from .probe import snitch_probe_accuracy

        summary["snitch"] = snitch_probe_accuracy(probe, model, eval_set, vocab, int(cfg["eval"]["per_sample"]))
    else:
        rep = probe_report(probe, model, eval_set, vocab, pcfg.threshold, int(cfg["eval"]["per_sample"]))
        rep.write(out / "report.json")
        summary.update(coverage=rep.coverage, tp_by_object=rep.tp_by_object)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_viz(args, cfg) -> int:
    from .probe import Probe, emit_visualization, probe_report
    from .trainer.tasks import eval_items

    model, vocab, _ = _load_checked(Path(args.checkpoint), cfg)
    probe = Probe.load(args.probe)
    if probe.config.task == "snitch":
        raise UsageError("viz expects a detection probe")
    data_dir = Path(cfg["data"]["dir"])
    samples = load_split(data_dir, "cater", cfg["eval"]["split"])[: args.samples]
    rep = probe_report(probe, model, samples, vocab, cfg["probe"]["threshold"], 1)
    out = Path(args.out or "viz")
    write_snapshot(cfg, out, "viz")
    items = eval_items(samples, "frame", 0, 1)
    written = []
    for (i, idx), fr in zip(items, rep.frames):
        d = out / f"sample_{fr['sample']}_frame_{fr['frame']}"
        written += emit_visualization(samples[i].frames[idx[0]], fr["slots"], d,
                                      report={"ground_truth": fr["ground_truth"],
                                              "threshold": rep.threshold})
    print(json.dumps({"command": "viz", "out": str(out), "files": len(written), "coverage": rep.coverage}))
    return 0


def cmd_grad_check(args, cfg) -> int:
    from .autograd.gradcheck import model_grad_check, run_all

    reports = run_all(tolerance=args.tolerance, cases=args.cases, seed=cfg["seed"])
    reports.append(model_grad_check(seed=cfg["seed"]))
    for r in reports:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<24} max_rel_err={r.worst:.3e}")
    ok = all(r.passed for r in reports)
    print(json.dumps({"command": "grad-check", "passed": ok, "ops": len(reports)}))
    return 0 if ok else 2


# ----------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config with per-module sections")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--data", help="dataset directory (overrides data.dir)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="unified-reasoner", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="generate mini-CATER / mini-ACRE splits")
    g.add_argument("--format", choices=("records", "png-dump"), default="records")

    t = sub.add_parser("train", parents=[common], help="train a model under a multi-task schedule")
    t.add_argument("--schedule", choices=("joint", "alternating", "single-switch", "none"))
    t.add_argument("--pretrain-task", dest="pretrain_task")
    t.add_argument("--main-task", dest="main_task")
    t.add_argument("--backbone", choices=("conv-stem", "linear-patch"))
    t.add_argument("--slots", type=int)
    t.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.urt")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--tasks", nargs="+")

    pr = sub.add_parser("probe", parents=[common], help="train a slot probe on a frozen encoder")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--slots", type=int)
    pr.add_argument("--threshold", type=float)

    v = sub.add_parser("viz", parents=[common], help="per-slot overlays from a trained probe")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--probe", required=True)
    v.add_argument("--samples", type=int, default=4)
    v.add_argument("--threshold", type=float)

    gc = sub.add_parser("grad-check", parents=[common], help="finite-difference checks of every op")
    gc.add_argument("--tolerance", type=float, default=1e-4)
    gc.add_argument("--cases", type=int, default=10)
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "probe": cmd_probe,
            "viz": cmd_viz, "grad-check": cmd_grad_check}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure: report and exit 2
        log.debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
