"""``cadnet`` command line: synth, train, eval, recover, export, ablate."""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import DatasetError, load_dataset, make_toy_dataset, read_png, save_dataset, write_png
from .metrics import EvalReport, evaluate, export_embeddings, recover
from .trainer import ABLATIONS, TrainConfig, train, write_telemetry

log = logging.getLogger("cadnet")

ABLATION_ROWS = ("full", "no_adv_DI", "no_adv_DF", "no_rec", "no_cls", "f_only", "g_only")
ABLATION_COLUMNS = ("variant", "SSIM", "PSNR", "Rank-1")


class ConfigError(ValueError):
    pass


def _parse_rates(text: str) -> tuple[int, ...]:
    try:
        rates = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"rates must be comma-separated integers, got {text!r}") from None
    if not rates or min(rates) < 1:
        raise argparse.ArgumentTypeError(f"rates must be positive integers, got {text!r}")
    return rates


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 32x16, got {text!r}") from None
    return h, w


# ---------------------------------------------------------------------------
# run config


@dataclass
class RunConfig:
    train: TrainConfig
    data_dir: Path
    out_dir: Path | None = None
    eval_rates: tuple[int, ...] = (2, 3, 4, 8)
    eval_trials: int = 10


def _convert(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            return configparser.ConfigParser.BOOLEAN_STATES[raw.strip().lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace("x", ",").split(",") if v.strip())
    except (KeyError, ValueError):
        raise ConfigError(f"invalid value for {key}: {raw!r}") from None
    return raw


def load_run_config(path: Path | str) -> RunConfig:
    """INI file with ``[data]``, ``[train]``, optional ``[eval]`` and ``[output]`` sections.

    Every ``[train]`` key is a :class:`TrainConfig` field; relative paths are
    resolved against the config file's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    allowed = {"data": {"dir"}, "train": None, "eval": {"rates", "trials"}, "output": {"dir"}}
    for section in parser.sections():
        if section not in allowed:
            raise ConfigError(f"{path}: unknown section [{section}]")
        keys = allowed[section]
        for key in parser[section]:
            if keys is not None and key not in keys:
                raise ConfigError(f"{path}: unknown key {section}.{key}")

    defaults = TrainConfig()
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    values = {}
    if parser.has_section("train"):
        for key, raw in parser["train"].items():
            if key not in fields:
                raise ConfigError(f"{path}: unknown key train.{key}")
            values[key] = _convert(f"train.{key}", raw, getattr(defaults, key))
    try:
        cfg = TrainConfig(**values)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None

    if not parser.has_option("data", "dir"):
        raise ConfigError(f"{path}: missing required key data.dir")
    base = path.parent

    def resolve(p: str) -> Path:
        p = Path(p)
        return p if p.is_absolute() else base / p

    run = RunConfig(train=cfg, data_dir=resolve(parser["data"]["dir"]))
    if parser.has_option("output", "dir"):
        run.out_dir = resolve(parser["output"]["dir"])
    if parser.has_section("eval"):
        sec = parser["eval"]
        if "rates" in sec:
            try:
                run.eval_rates = _parse_rates(sec["rates"])
            except argparse.ArgumentTypeError as exc:
                raise ConfigError(f"{path}: eval.rates: {exc}") from None
        if "trials" in sec:
            run.eval_trials = _convert("eval.trials", sec["trials"], 0)
            if run.eval_trials < 1:
                raise ConfigError(f"{path}: eval.trials must be >= 1")
    return run


def _prepare_out(out: Path | None, force: bool) -> Path:
    if out is None:
        raise ConfigError("no output directory: pass --out or set output.dir")
    if out.exists() and not out.is_dir():
        raise ConfigError(f"output path {out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    if args.ids < 2:
        raise DatasetError("--ids must be at least 2 (batch-hard triplets need two identities)")
    out = _prepare_out(args.out, args.force)
    ds = make_toy_dataset(args.ids, args.per_id, hw=args.size, seed=args.seed)
    save_dataset(ds, out)
    print(f"train {len(ds.train)}  query {len(ds.queries)}  gallery {len(ds.gallery)}  identities {ds.num_identities}")
    return 0


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    out = _prepare_out(args.out or run.out_dir, args.force)
    dataset = load_dataset(run.data_dir)
    trainer = None
    if args.resume is not None:
        trainer = load_checkpoint(args.resume, run.train)
    trainer, rows = train(dataset, run.train, trainer=trainer)
    ckpt = save_checkpoint(trainer, out / "model.cadnet")
    write_telemetry(out / "telemetry.csv", rows)
    print(f"trained to epoch {trainer.epoch}; checkpoint {ckpt}")
    return 0


def cmd_eval(args) -> int:
    trainer = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    report = evaluate(trainer.model, dataset, rates=args.rates, trials=args.trials, seed=args.seed)
    text = report.to_json()
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text + "\n")
    print(f"rank1 {report.rank1:.3f}  rank5 {report.rank5:.3f}  rank10 {report.rank10:.3f}")
    print(f"ssim {report.ssim_mean:.3f}  psnr {report.psnr_mean:.2f}")
    for r, e in sorted(report.per_rate.items()):
        tag = "" if r in trainer.config.rates else "  (unseen)"
        print(f"r={r}: rank1 {e['rank1']:.3f}  ssim {e['ssim']:.3f}  psnr {e['psnr']:.2f}{tag}")
    return 0


def cmd_recover(args) -> int:
    trainer = load_checkpoint(args.ckpt)
    pixels = read_png(args.input)
    want = tuple(trainer.config.image_size)
    if pixels.shape[:2] != want:
        raise DatasetError(f"{args.input}: image is {pixels.shape[1]}x{pixels.shape[0]}, model expects {want[1]}x{want[0]}")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_png(args.out, recover(trainer.model, pixels)[0])
    return 0


def cmd_export(args) -> int:
    trainer = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    images = {"all": [*ds.train, *ds.queries, *ds.gallery], "test": [*ds.queries, *ds.gallery], "train": ds.train}
    args.out.parent.mkdir(parents=True, exist_ok=True)
    n = export_embeddings(trainer.model, images[args.split], args.out)
    print(f"wrote {n} rows to {args.out}")
    return 0


def run_ablation(run: RunConfig, out: Path) -> list[tuple[str, EvalReport]]:
    dataset = load_dataset(run.data_dir)
    results = []
    for variant in ABLATION_ROWS:
        cfg = run.train.ablated(variant)
        log.info("ablation %s", variant)
        trainer, rows = train(dataset, cfg)
        write_telemetry(out / f"telemetry_{variant}.csv", rows)
        save_checkpoint(trainer, out / f"{variant}.cadnet")
        report = evaluate(trainer.model, dataset, rates=run.eval_rates, trials=run.eval_trials, seed=cfg.seed)
        (out / f"eval_{variant}.json").write_text(report.to_json() + "\n")
        results.append((variant, report))
    return results


def cmd_ablate(args) -> int:
    run = load_run_config(args.config)
    out = _prepare_out(args.out or run.out_dir, args.force)
    results = run_ablation(run, out)
    with (out / "ablation.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_COLUMNS)
        for variant, rep in results:
            w.writerow([variant, f"{rep.ssim_mean:.4f}", f"{rep.psnr_mean:.3f}", f"{rep.rank1:.4f}"])
    print(f"{'variant':<10} {'SSIM':>7} {'PSNR':>7} {'Rank-1':>7}")
    for variant, rep in results:
        print(f"{variant:<10} {rep.ssim_mean:7.3f} {rep.psnr_mean:7.2f} {rep.rank1:7.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cadnet", description="Cross-resolution person re-identification toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch telemetry")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic multi-resolution dataset")
    p.add_argument("--ids", type=int, required=True, help="train identities (the same number again for test)")
    p.add_argument("--per-id", type=int, required=True)
    p.add_argument("--size", type=_parse_size, default=(32, 16), help="HxW, default 32x16")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--out", type=Path)
    p.add_argument("--resume", type=Path, help="continue from a checkpoint")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="cross-resolution retrieval and recovery quality")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--rates", type=_parse_rates, default=(2, 3, 4, 8))
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, help="write the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("recover", help="write G(E(x)) for one image")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("export", help="dump w and u embeddings as CSV")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--split", choices=("all", "test", "train"), default="all")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("ablate", help=f"train and evaluate full plus {', '.join(ABLATIONS)}")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--out", type=Path)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "trials", 1) < 1:
        print("error: --trials must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, DatasetError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
