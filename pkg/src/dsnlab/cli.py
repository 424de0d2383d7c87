"""Command-line experiment runner.

    dsnlab run --config exp.cfg [--out DIR] [--seed-override N] [--quiet]
    dsnlab table --out DIR
    dsnlab dump-recon --config exp.cfg [--out DIR] [--n 8] [--zero-private]
    dsnlab gradcheck
    dsnlab gen-data --config exp.cfg --out DIR [--limit N]

Exit status: 0 success, 2 config error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import math
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import data as D
from . import layers as Ly
from . import tensor as T
from .model import SIMILARITIES, VARIANTS, DsnModel, decode_partial
from .trainer import NumericalError, TrainConfig, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
REQUIRED = ("scenario", "variant")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str
    variant: str
    similarity: str = "dann"
    recon: str = "si_mse"
    alpha: float = 0.05
    beta: float = 0.05
    gamma: float = 0.25
    xi: float = 0.125
    warmup_steps: int = 500
    lr: float = 0.01
    momentum: float = 0.9
    decay_factor: float = 0.9
    decay_interval: int = 1000
    batch_size: int = 32
    steps: int = 3000
    eval_interval: int = 500
    n_train: int = 5000
    n_eval: int = 1000
    seed: int = 0
    label: str = ""
    output_dir: str = "runs"

    def canonical(self) -> str:
        """Sorted key=value lines; output_dir names a location, not an experiment."""
        items = sorted((f.name, getattr(self, f.name)) for f in fields(self) if f.name != "output_dir")
        return "".join(f"{k}={_fmt(v)}\n" for k, v in items)

    @property
    def run_id(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def train_config(self) -> TrainConfig:
        keep = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in keep})


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def _convert(key: str, raw: str, typ):
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError
            return v
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {typ.__name__}") from None
    return raw


_TYPES = {"str": str, "int": int, "float": float}


def parse_config(text: str) -> ExperimentConfig:
    """Strict key=value parser: unknown, duplicate or missing keys are errors."""
    schema = {f.name: _TYPES[f.type] for f in fields(ExperimentConfig)}
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line, f"line {lineno} is not key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in schema:
            raise ConfigError(key, "unknown key")
        if key in values:
            raise ConfigError(key, "given twice")
        values[key] = _convert(key, raw, schema[key])
    for key in REQUIRED:
        if key not in values:
            raise ConfigError(key, "required key missing")
    return validate(ExperimentConfig(**values), explicit=set(values))


def validate(cfg: ExperimentConfig, explicit: set[str] = frozenset()) -> ExperimentConfig:
    if cfg.scenario not in D.SCENARIOS:
        raise ConfigError("scenario", f"{cfg.scenario!r} not in {D.SCENARIOS}")
    if cfg.variant not in VARIANTS:
        raise ConfigError("variant", f"{cfg.variant!r} not in {VARIANTS}")
    if cfg.similarity not in SIMILARITIES[:3]:
        raise ConfigError("similarity", f"{cfg.similarity!r} not in {SIMILARITIES[:3]}")
    if "similarity" in explicit and cfg.variant != "dsn":
        raise ConfigError("similarity", f"only meaningful for variant dsn, not {cfg.variant}")
    if cfg.recon not in ("si_mse", "mse"):
        raise ConfigError("recon", f"{cfg.recon!r} not in ('si_mse', 'mse')")
    for key in ("alpha", "beta", "gamma", "xi", "warmup_steps"):
        if getattr(cfg, key) < 0:
            raise ConfigError(key, "must be nonnegative")
    for key in ("lr", "decay_factor", "decay_interval", "batch_size", "steps", "eval_interval",
                "n_train", "n_eval"):
        if getattr(cfg, key) <= 0:
            raise ConfigError(key, "must be positive")
    if not 0 <= cfg.momentum < 1:
        raise ConfigError("momentum", "must lie in [0, 1)")
    if cfg.batch_size > cfg.n_train:
        raise ConfigError("batch_size", f"exceeds n_train={cfg.n_train}")
    if cfg.seed < 0:
        raise ConfigError("seed", "must be nonnegative")
    return cfg


def load_config(path: str | Path, seed_override: int | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError("--config", str(err)) from None
    cfg = parse_config(text)
    if seed_override is not None:
        cfg = validate(dataclasses.replace(cfg, seed=seed_override))
    return cfg


# results ------------------------------------------------------------------

RESULT_FIELDS = ("scenario", "variant", "similarity", "label", "seed", "steps", "tgt_acc", "src_acc",
                 "angle_err", "run_id")


def _row_similarity(cfg: ExperimentConfig) -> str:
    return cfg.similarity if cfg.variant == "dsn" else ""


def write_result(path: Path, cfg: ExperimentConfig, final) -> None:
    row = [cfg.scenario, cfg.variant, _row_similarity(cfg), cfg.label, str(cfg.seed), str(cfg.steps),
           repr(final.tgt_acc), repr(final.src_acc),
           "" if math.isnan(final.angle_err) else repr(final.angle_err), cfg.run_id]
    path.write_text(",".join(RESULT_FIELDS) + "\n" + ",".join(row) + "\n")


def read_results_file(path: str | Path) -> list[dict]:
    return list(csv.DictReader(io.StringIO(Path(path).read_text())))


def read_results(out_dir: str | Path) -> list[dict]:
    rows = []
    for p in sorted(Path(out_dir).glob("*/result.csv")):
        rows.extend(read_results_file(p))
    return rows


@dataclass
class TableRow:
    scenario: str
    variant: str
    similarity: str
    label: str
    n: int
    acc_mean: float
    acc_min: float
    acc_max: float
    angle_mean: float = math.nan
    angle_min: float = math.nan
    angle_max: float = math.nan


def aggregate(rows: list[dict]) -> list[TableRow]:
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["scenario"], r["variant"], r["similarity"], r["label"]), []).append(r)
    out = []
    for key in sorted(groups):
        rs = groups[key]
        acc = [float(r["tgt_acc"]) for r in rs]
        row = TableRow(*key, n=len(rs), acc_mean=sum(acc) / len(acc), acc_min=min(acc), acc_max=max(acc))
        ang = [float(r["angle_err"]) for r in rs if r["angle_err"]]
        if ang:
            row.angle_mean, row.angle_min, row.angle_max = sum(ang) / len(ang), min(ang), max(ang)
        out.append(row)
    return out


def render_table(table: list[TableRow]) -> tuple[str, str]:
    """Plain-text and comma-separated renderings."""
    head = ("scenario", "variant", "similarity", "label", "seeds", "tgt_acc", "spread", "angle_err", "spread")
    text_rows, csv_rows = [], [",".join(("scenario", "variant", "similarity", "label", "seeds", "tgt_acc_mean",
                                         "tgt_acc_min", "tgt_acc_max", "angle_mean", "angle_min",
                                         "angle_max"))]
    for r in table:
        has_angle = not math.isnan(r.angle_mean)
        text_rows.append((r.scenario, r.variant, r.similarity or "-", r.label or "-", str(r.n),
                          f"{100 * r.acc_mean:.2f}%", f"{100 * r.acc_min:.2f}-{100 * r.acc_max:.2f}",
                          f"{r.angle_mean:.2f}" if has_angle else "",
                          f"{r.angle_min:.2f}-{r.angle_max:.2f}" if has_angle else ""))
        nums = [r.acc_mean, r.acc_min, r.acc_max]
        nums += [r.angle_mean, r.angle_min, r.angle_max] if has_angle else []
        cells = [r.scenario, r.variant, r.similarity, r.label, str(r.n)] + [repr(v) for v in nums]
        csv_rows.append(",".join(cells + [""] * (11 - len(cells))))
    widths = [max(len(h), *(len(row[i]) for row in text_rows)) if text_rows else len(h)
              for i, h in enumerate(head)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(head, widths))]
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in text_rows]
    return "\n".join(line.rstrip() for line in lines) + "\n", "\n".join(csv_rows) + "\n"


# reconstruction grids ------------------------------------------------------

def recon_grid(model: DsnModel, images: np.ndarray, domain: int) -> np.ndarray:
    """Rows of [original | combined | shared-only | private-only] as uint8."""
    with T.no_grad():
        cols = [images] + [decode_partial(model, images, domain, mode).data
                           for mode in ("combined", "shared_only", "private_only")]
    tiles = [D.to_bytes(c) for c in cols]
    return np.concatenate([np.concatenate(list(t), axis=0) for t in tiles], axis=1)


def load_model(cfg: ExperimentConfig, checkpoint: Path) -> DsnModel:
    model = DsnModel(cfg.scenario, cfg.variant, cfg.similarity, seed=cfg.seed)
    try:
        model.params.load(Ly.load_checkpoint(checkpoint))
    except (KeyError, T.ShapeError, ValueError) as err:
        raise ConfigError("checkpoint", f"incompatible with {cfg.scenario}/{cfg.variant}: {err}") from None
    return model


# subcommands --------------------------------------------------------------

def _say(args, msg: str) -> None:
    if not args.quiet:
        print(msg)


def _out_dir(args, cfg: ExperimentConfig | None = None) -> Path:
    if args.out:
        return Path(args.out)
    return Path(cfg.output_dir if cfg else "runs")


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.seed_override)
    run_dir = _out_dir(args, cfg) / cfg.run_id
    if (run_dir / "result.csv").exists() and (run_dir / "config.txt").read_text() == cfg.canonical():
        _say(args, f"{cfg.run_id}: already complete, skipping")
        return EXIT_OK
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(cfg.canonical())

    def report(rec):
        if not math.isnan(rec.tgt_acc):
            _say(args, f"step {rec.step + 1}: task {rec.l_task:.4f} src {rec.src_acc:.3f} tgt {rec.tgt_acc:.3f}")

    try:
        result = train(cfg.train_config(), metrics_path=run_dir / "metrics.csv", on_record=report)
    except NumericalError as err:
        print(f"numerical failure at step {err.step}: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    Ly.save_checkpoint(run_dir / "checkpoint", result.model.params.snapshot())
    write_result(run_dir / "result.csv", cfg, result.final)
    _say(args, f"{cfg.run_id}: target accuracy {result.final.tgt_acc:.4f}")
    return EXIT_OK


def cmd_table(args) -> int:
    out = _out_dir(args)
    rows = read_results(out)
    if not rows:
        print(f"no completed runs under {out}", file=sys.stderr)
        return EXIT_CONFIG
    text, table_csv = render_table(aggregate(rows))
    (out / "results.csv").write_text(table_csv)
    (out / "results.txt").write_text(text)
    _say(args, text.rstrip())
    return EXIT_OK


def cmd_dump_recon(args) -> int:
    cfg = load_config(args.config, args.seed_override)
    run_dir = _out_dir(args, cfg) / cfg.run_id
    ckpt = Path(args.checkpoint) if args.checkpoint else run_dir / "checkpoint"
    if cfg.variant != "dsn":
        raise ConfigError("variant", "reconstructions need the dsn variant")
    model = load_model(cfg, ckpt)
    if args.zero_private:
        for t in model.params.tensors(["private_source", "private_target"]):
            t.data[...] = 0.0
    spec = D.default_spec(cfg.scenario, n_train=cfg.n_train, n_eval=cfg.n_eval, seed=cfg.seed)
    pair = D.generate(spec)
    if pair.source_eval.images.ndim != 4:
        raise ConfigError("scenario", f"{cfg.scenario} has no images to reconstruct")
    dest = run_dir / ("recon_zero_private" if args.zero_private else "recon")
    dest.mkdir(parents=True, exist_ok=True)
    for name, ds in (("source", pair.source_eval), ("target", pair.target_eval)):
        grid = recon_grid(model, ds.images[:args.n], ds.domain)
        D.write_pnm(dest / f"{name}.ppm", grid)
    _say(args, f"wrote {dest}/source.ppm and target.ppm")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite
    rep = run_suite()
    for line in rep.lines():
        print(line)
    _say(args, f"{'passed' if rep.ok else 'FAILED'} in {rep.seconds:.1f}s")
    return EXIT_OK if rep.ok else EXIT_NUMERIC


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, args.seed_override)
    spec = D.default_spec(cfg.scenario, n_train=cfg.n_train, n_eval=cfg.n_eval, seed=cfg.seed)
    out = _out_dir(args, cfg)
    D.dump_dataset(D.generate(spec), out, limit=args.limit)
    _say(args, f"wrote {cfg.scenario} seed {cfg.seed} to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--quiet", action="store_true")
    common.add_argument("--seed-override", type=int, default=None)
    p = argparse.ArgumentParser(prog="dsnlab", description="Domain Separation Network experiments")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", parents=[common])
    r.add_argument("--config", required=True)
    sub.add_parser("table", parents=[common])
    d = sub.add_parser("dump-recon", parents=[common])
    d.add_argument("--config", required=True)
    d.add_argument("--checkpoint")
    d.add_argument("--n", type=int, default=8)
    d.add_argument("--zero-private", action="store_true")
    sub.add_parser("gradcheck", parents=[common])
    g = sub.add_parser("gen-data", parents=[common])
    g.add_argument("--config", required=True)
    g.add_argument("--limit", type=int, default=None)
    return p


COMMANDS = {"run": cmd_run, "table": cmd_table, "dump-recon": cmd_dump_recon,
            "gradcheck": cmd_gradcheck, "gen-data": cmd_gen_data}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
