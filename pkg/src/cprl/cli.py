"""Command-line entry point: ``cprl {generate,train,attack,sweep,landscape,dump,config}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import List, Optional

import numpy as np

from . import data as datamod
from .attacks import AttackSpec, attack_batched, run_attack
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .metrics import activation_dump, evaluate, landscape, landscape_range
from .models import QualityNet
from .report import OutputError, RunDir, tag_rows, write_csv, write_json, write_matrix
from .training import Trainer

EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_CHECKPOINT = 3
EXIT_OUTPUT = 4
EXIT_DATA = 5

CURVE_FIELDS = ("epoch", "split", "srcc", "plcc", "mse", "loss", "phase_counts")
SWEEP_FIELDS = ("epsilon", "srcc", "plcc", "mse")

log = logging.getLogger("cprl")


# -- shared plumbing ---------------------------------------------------------------

def _parse_grid(text: str) -> List[float]:
    """Comma-separated budgets; a trailing ``/255`` on an item scales it."""
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if item.endswith("/255"):
            out.append(float(item[:-4]) / 255.0)
        else:
            out.append(float(item))
    return out


def _parse_eps(text: str) -> float:
    return _parse_grid(text)[0]


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    seed = args.seed
    return cfg.override(
        train__seed=seed,
        output__root=args.out,
        model__kind=args.model,
        attack__family={"reflect": "score_reflection"}.get(args.attack, args.attack),
        attack__epsilon=args.epsilon,
        cprl__bias=args.b,
        cprl__tau=args.tau,
        train__pns=False if args.no_pns else None,
        analysis__epsilon_grid=args.epsilon_grid,
        train__epochs=args.epochs,
        data__source=args.data,
        data__split_file=args.split,
    )


def load_dataset(cfg: RunConfig) -> datamod.Dataset:
    d = cfg.data
    if d.source:
        return datamod.ingest(d.source, size=d.size)
    return datamod.generate(d.scenes, d.levels, seed=d.seed, size=d.size, label_noise=d.label_noise)


def split_dataset(cfg: RunConfig, dataset: datamod.Dataset):
    if cfg.data.split_file:
        spec = datamod.load_split(cfg.data.split_file)
    else:
        if len(dataset.scenes) < 5:
            raise datamod.DataError(f"need at least 5 scenes to split, got {len(dataset.scenes)}")
        spec = datamod.split_scenes(dataset.scene_ids, cfg.data.split_seed)
    train, test = datamod.apply_split(dataset, spec)
    return spec, train, test


def build_model(cfg: RunConfig, in_channels: int) -> QualityNet:
    return QualityNet(in_channels, cfg.cprl, cprl=cfg.model.kind == "cprl", seed=cfg.train.seed,
                      widths=tuple(cfg.model.widths))


def load_model(cfg: RunConfig, path: Optional[str], in_channels: int) -> QualityNet:
    if not path:
        raise CheckpointError("this command needs --checkpoint")
    if not os.path.isfile(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    model = build_model(cfg, in_channels)
    model.load_state_dict(load_checkpoint(path))
    return model


def base_report(cmd: str, cfg: RunConfig, model: Optional[QualityNet] = None) -> dict:
    rep = {"command": cmd, "config": cfg.to_dict(), "config_hash": cfg.hash(), "seed": cfg.train.seed}
    if model is not None:
        rep["architecture"] = model.architecture
    return rep


def _attack_spec(cfg: RunConfig, epsilon: Optional[float] = None) -> dict:
    a = cfg.attack
    kw = dict(step_size=a.step_size, steps=a.steps, random_start=a.random_start, seed=a.seed)
    if epsilon is not None:
        kw["epsilon"] = epsilon
    return kw


# -- commands ------------------------------------------------------------------------

def cmd_generate(cfg: RunConfig, run: RunDir, args) -> dict:
    ds = load_dataset(cfg)
    datamod.export(ds, run.file("dataset"))
    spec, train, test = split_dataset(cfg, ds)
    datamod.save_split(spec, run.file("split.json"))
    rep = base_report("generate", cfg)
    rep.update(samples=len(ds), train_samples=len(train), test_samples=len(test),
               train_scenes=spec["train"], test_scenes=spec["test"])
    return rep


def cmd_train(cfg: RunConfig, run: RunDir, args) -> dict:
    ds = load_dataset(cfg)
    spec, train, test = split_dataset(cfg, ds)
    datamod.save_split(spec, run.file("split.json"))
    model = build_model(cfg, ds.images.shape[1])
    save_checkpoint(run.file("init.ckpt"), model.state_dict())
    trainer = Trainer(model, cfg.train)
    curve = trainer.fit(train.images, train.labels, (test.images, test.labels),
                        checkpoint_path=run.file("best.ckpt"))
    save_checkpoint(run.file("final.ckpt"), model.state_dict())
    if not os.path.exists(run.file("best.ckpt")):
        # no epoch ran, so the initial parameters are the best seen
        save_checkpoint(run.file("best.ckpt"), model.state_dict())
    h = cfg.hash()
    write_csv(run.file("curve.csv"), CURVE_FIELDS, curve)
    rep = base_report("train", cfg, model)
    rep["notes"] = {"grad_clip_global_norm": cfg.train.grad_clip, "lr_schedule": "constant",
                    "phase_schedule": list(cfg.train.schedule) if model.cprl and cfg.train.pns else ["None"]}
    rep["rows"] = tag_rows([
        {"split": "train", "attack": "none", "epsilon": 0.0, **evaluate(model.predict(train.images), train.labels)},
        {"split": "test", "attack": "none", "epsilon": 0.0, **evaluate(model.predict(test.images), test.labels)},
    ], h)
    rep["curve"] = tag_rows(curve, h)
    return rep


def _test_model(cfg: RunConfig, args):
    ds = load_dataset(cfg)
    _, _, test = split_dataset(cfg, ds)
    model = load_model(cfg, args.checkpoint, ds.images.shape[1])
    return model, test


def cmd_attack(cfg: RunConfig, run: RunDir, args) -> dict:
    model, test = _test_model(cfg, args)
    spec = AttackSpec(family=cfg.attack.family, epsilon=cfg.attack.epsilon, **_attack_spec(cfg))
    x_adv = attack_batched(model, test.images, test.labels, spec, cfg.analysis.batch_size)
    clean = model.predict(test.images)
    adv = model.predict(x_adv)
    rep = base_report("attack", cfg, model)
    rep["attack"] = {"family": spec.family, "epsilon": spec.epsilon, "alpha": spec.alpha, "steps": spec.steps,
                     "random_start": spec.random_start}
    rep["linf"] = float(np.max(np.abs(x_adv - test.images)))
    rep["rows"] = tag_rows([
        {"split": "test", "attack": "none", "epsilon": 0.0, **evaluate(clean, test.labels)},
        {"split": "test", "attack": spec.family, "epsilon": spec.epsilon, **evaluate(adv, test.labels)},
    ], cfg.hash())
    write_csv(run.file("scores.csv"), ("index", "label", "clean", "adversarial"),
              [{"index": i, "label": float(test.labels[i]), "clean": float(clean[i]), "adversarial": float(adv[i])}
               for i in range(len(test))])
    return rep


def cmd_sweep(cfg: RunConfig, run: RunDir, args) -> dict:
    from .attacks import attack_sweep

    model, test = _test_model(cfg, args)
    rows = attack_sweep(model, test.images, test.labels, cfg.attack.family, cfg.analysis.epsilon_grid,
                        cfg.analysis.batch_size, **_attack_spec(cfg))
    write_csv(run.file("sweep.csv"), SWEEP_FIELDS, rows)
    rep = base_report("sweep", cfg, model)
    rep["rows"] = tag_rows(rows, cfg.hash(), split="test", attack=cfg.attack.family)
    return rep


def cmd_landscape(cfg: RunConfig, run: RunDir, args) -> dict:
    model, test = _test_model(cfg, args)
    a = cfg.analysis
    n = min(a.n_images, len(test))
    entries = []
    axes = None
    for i in range(n):
        res = landscape(model, test.images[i], test.labels[i], extent=a.landscape_extent,
                        resolution=a.landscape_resolution, seed=a.landscape_seed + i)
        write_matrix(run.file(f"landscape_{i:03d}.csv"), res["grid"])
        axes = {"u": res["u"], "v": res["v"], "unit": "pixel (1/255)",
                "u_direction": "fgsm sign gradient", "v_direction": "seeded random +-1",
                "rows": "u", "columns": "v"}
        entries.append({"image": i, "range": landscape_range(res["grid"]),
                        "center": float(res["grid"][a.landscape_resolution // 2, a.landscape_resolution // 2])})
    write_json(run.file("landscape_axes.json"), axes or {})
    rep = base_report("landscape", cfg, model)
    rep["rows"] = tag_rows(entries, cfg.hash())
    rep["median_range"] = float(np.median([e["range"] for e in entries])) if entries else None
    return rep


def cmd_dump(cfg: RunConfig, run: RunDir, args) -> dict:
    model, test = _test_model(cfg, args)
    n = min(cfg.analysis.n_images, len(test))
    spec = AttackSpec(family=cfg.attack.family, epsilon=cfg.attack.epsilon, **_attack_spec(cfg))
    x = test.images[:n]
    x_adv = run_attack(model, x, test.labels[:n], spec).x_adv
    pairs = activation_dump(model, x, x_adv, stage=cfg.analysis.dump_stage)
    write_csv(run.file("activations.csv"), ("rank", "channel", "clean", "adversarial"), pairs)
    rep = base_report("dump", cfg, model)
    rep["rows"] = tag_rows(pairs, cfg.hash())
    return rep


def cmd_config(cfg: RunConfig, run, args) -> dict:
    return cfg.to_dict()


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "attack": cmd_attack,
    "sweep": cmd_sweep,
    "landscape": cmd_landscape,
    "dump": cmd_dump,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="training/initialization seed")
    common.add_argument("--out", help="output root (default: $CPRL_OUT or ./runs)")
    common.add_argument("--run-name", help="run directory name (default: <timestamp>-<config hash>)")
    common.add_argument("--model", choices=("baseline", "cprl"))
    common.add_argument("--attack", choices=("fgsm", "pgd", "reflect"))
    common.add_argument("--epsilon", type=_parse_eps, help="l-inf budget, e.g. 0.0039 or 1/255")
    common.add_argument("--b", type=float, help="channel-mask bias")
    common.add_argument("--tau", type=float, help="soft-rank temperature")
    common.add_argument("--no-pns", action="store_true", help="mask-only ablation (no PNS min-max)")
    common.add_argument("--epsilon-grid", type=_parse_grid, help="comma-separated budgets for sweep")
    common.add_argument("--epochs", type=int)
    common.add_argument("--data", help="dataset directory to ingest instead of generating")
    common.add_argument("--split", help="saved split JSON to reuse")
    common.add_argument("--checkpoint", help="model checkpoint for attack/sweep/landscape/dump")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cprl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in list(COMMANDS) + ["config"]:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "config":
            print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
            return 0
        with RunDir(cfg.output_root(), cfg.hash(), args.run_name) as run:
            report = COMMANDS[args.command](cfg, run, args)
            write_json(run.file("report.json"), report)
        print(run.path)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except OutputError as exc:
        print(f"output error: {exc}", file=sys.stderr)
        return EXIT_OUTPUT
    except datamod.DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
