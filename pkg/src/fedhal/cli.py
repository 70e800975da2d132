"""Command-line experiment runner.

Every experiment is described by one JSON file::

    {
      "data":     {... SyntheticConfig fields ...},
      "training": {... RoundConfig fields ...},
      "seeds":    [0, 1, 2, 3, 4],
      "variants": ["fedavg", "fh", "fh+dm", "fh+fm", "dfh"],
      "output_dir": "fedhal-out",
      "sweep":    {"param": "lambda", "values": [2, 3, 4, 5, 6]}
    }

All sections are optional and unknown keys are rejected.  Outputs are staged
in a scratch directory and only moved into place once a command succeeds.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import re
import shutil
import sys
import tempfile
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from types import UnionType

import numpy as np

from fedhal.data import SyntheticConfig, decode_dataset, encode_dataset, generate_domains, retrieval_split
from fedhal.errors import ConfigError, FedHalError, ParseError
from fedhal.federation import METRIC_COLUMNS, VARIANTS, RoundConfig, evaluate_target, run_federated
from fedhal.model import decode_checkpoint, encode_checkpoint

log = logging.getLogger("fedhal")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
SWEEP_PARAMS = ("lambda", "alpha")
# Attribute columns of the ablation table, in table order.
ABLATION_ATTRIBUTES = {
    "fedavg": (0, 0, 0, 0),
    "fh": (1, 0, 0, 0),
    "fh+dm": (1, 1, 0, 0),
    "fh+fm": (1, 0, 1, 0),
    "dfh": (1, 0, 0, 1),
}
ABLATION_COLUMNS = ("no", "variant", "FH", "DM", "FM", "DH", "seeds",
                    "mAP_mean", "mAP_std", "rank1_mean", "rank1_std")
RUN_COLUMNS = ("variant", "seed", "target_mAP", "target_rank1", "final_local_loss")
SWEEP_COLUMNS = ("param", "value", "seed", "target_mAP", "target_rank1")


@dataclass
class ExperimentConfig:
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    training: RoundConfig = field(default_factory=RoundConfig)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    variants: list[str] = field(default_factory=lambda: list(VARIANTS))
    output_dir: str = "fedhal-out"
    sweep_param: str | None = None
    sweep_values: list = field(default_factory=list)

    def to_json(self) -> str:
        doc = {
            "data": asdict(self.data),
            "training": asdict(self.training),
            "seeds": list(self.seeds),
            "variants": list(self.variants),
            "output_dir": self.output_dir,
        }
        if self.sweep_param is not None:
            doc["sweep"] = {"param": self.sweep_param, "values": self.sweep_values}
        return json.dumps(doc, indent=2, sort_keys=False) + "\n"


# --- config parsing ------------------------------------------------------------------


def _where(text: str, path: str) -> str:
    # Walk the dotted path so a key that appears in several sections is
    # located inside the right one.
    pos, line = 0, None
    for part in path.split("."):
        m = re.compile(r'"%s"\s*:' % re.escape(part)).search(text, pos)
        if m is None:
            break
        pos, line = m.end(), text.count("\n", 0, m.start()) + 1
    return f"{path} (line {line})" if line is not None else path


def _coerce(value, hint, where: str):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, UnionType):
        args = typing.get_args(hint)
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], where)
    if origin in (tuple, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {type(value).__name__}")
        (item,) = {a for a in typing.get_args(hint) if a is not Ellipsis} or {object}
        items = [_coerce(v, item, f"{where}[{i}]") for i, v in enumerate(value)]
        return tuple(items) if origin is tuple else items
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _build_section(cls, raw, section: str, text: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{_where(text, section)}: expected an object")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{_where(text, f'{section}.{unknown[0]}')}: unknown key {unknown[0]!r}")
    kwargs = {k: _coerce(v, hints[k], _where(text, f"{section}.{k}")) for k, v in raw.items()}
    return cls(**kwargs)


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate an experiment config; raises ``ConfigError`` with a location."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    top = {"data", "training", "seeds", "variants", "output_dir", "sweep"}
    unknown = sorted(set(doc) - top)
    if unknown:
        raise ConfigError(f"{_where(text, unknown[0])}: unknown key {unknown[0]!r}")

    cfg = ExperimentConfig()
    if "data" in doc:
        cfg.data = _build_section(SyntheticConfig, doc["data"], "data", text)
    if "training" in doc:
        cfg.training = _build_section(RoundConfig, doc["training"], "training", text)
    if "seeds" in doc:
        cfg.seeds = _coerce(doc["seeds"], list[int], _where(text, "seeds"))
        if not cfg.seeds or any(s < 0 for s in cfg.seeds):
            raise ConfigError(f"{_where(text, 'seeds')}: need a non-empty list of non-negative seeds")
    if "variants" in doc:
        cfg.variants = _coerce(doc["variants"], list[str], _where(text, "variants"))
        bad = [v for v in cfg.variants if v not in VARIANTS]
        if bad or not cfg.variants:
            raise ConfigError(f"{_where(text, 'variants')}: variants must be a non-empty subset of {VARIANTS}")
    if "output_dir" in doc:
        cfg.output_dir = _coerce(doc["output_dir"], str, _where(text, "output_dir"))
    if "sweep" in doc:
        sweep = doc["sweep"]
        if not isinstance(sweep, dict) or set(sweep) - {"param", "values"}:
            raise ConfigError(f"{_where(text, 'sweep')}: expected an object with keys 'param' and 'values'")
        cfg.sweep_param = sweep.get("param")
        cfg.sweep_values = sweep.get("values", [])
        if not isinstance(cfg.sweep_values, list):
            raise ConfigError(f"{_where(text, 'sweep.values')}: expected a list")

    for section, check in (("training", lambda: cfg.training.validate(cfg.data.num_domains)),
                           ("data", lambda: cfg.data.validate(cfg.training.K))):
        try:
            check()
        except ConfigError as exc:
            raise ConfigError(f"{_where(text, section)}: {exc}") from None
    if cfg.training.P > cfg.data.ids_per_domain:
        raise ConfigError(
            f"{_where(text, 'training.P')}: P={cfg.training.P} exceeds data.ids_per_domain={cfg.data.ids_per_domain}"
        )
    return cfg


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def parse_sweep_values(param: str, values) -> list:
    """Normalise sweep values: floats for ``lambda``, positive vectors for ``alpha``.

    On the command line alpha vectors are separated by ``;`` and their
    entries by ``,`` (``"1,1,1;2,1,1"``).
    """
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"sweep parameter must be one of {SWEEP_PARAMS}, got {param!r}")
    if isinstance(values, str):
        values = [v for v in values.split(";" if param == "alpha" else ",") if v.strip()]
        if param == "alpha":
            values = [[x for x in v.split(",")] for v in values]
    if not values:
        raise ConfigError("sweep needs at least one value")
    try:
        if param == "lambda":
            out = [float(v) for v in values]
            if any(not v >= 0 for v in out):
                raise ConfigError("lambda values must be non-negative")
        else:
            out = [tuple(float(x) for x in v) for v in values]
            if any(not all(x > 0 for x in v) for v in out):
                raise ConfigError("alpha entries must be positive")
    except (TypeError, ValueError):
        raise ConfigError(f"cannot parse {param} sweep values {values!r}") from None
    return out


# --- experiments -------------------------------------------------------------------------


def _world(cfg: ExperimentConfig):
    return generate_domains(cfg.data, cfg.training.K)


def _final(run) -> dict:
    return run.metrics[-1]


def ablation_results(cfg: ExperimentConfig) -> tuple[list[dict], list[dict]]:
    """Run every variant over every seed on one generated world.

    Returns the per-run rows and the summary rows (mean and population std
    over seeds, in ablation-table order).
    """
    sources, _, split = _world(cfg)
    runs = []
    for variant in cfg.variants:
        for seed in cfg.seeds:
            run = run_federated(sources, replace(cfg.training, variant=variant, seed=seed), split)
            last = _final(run)
            runs.append({"variant": variant, "seed": seed, "target_mAP": last["target_mAP"],
                         "target_rank1": last["target_rank1"], "final_local_loss": last["mean_local_loss"]})
            log.info("%-7s seed %d  mAP %.2f  rank-1 %.2f", variant, seed, last["target_mAP"], last["target_rank1"])
    summary = []
    for no, variant in enumerate(v for v in VARIANTS if v in cfg.variants):
        rows = [r for r in runs if r["variant"] == variant]
        mAP = np.array([r["target_mAP"] for r in rows])
        r1 = np.array([r["target_rank1"] for r in rows])
        fh, dm, fm, dh = ABLATION_ATTRIBUTES[variant]
        summary.append({
            "no": VARIANTS.index(variant) + 1, "variant": variant, "FH": fh, "DM": dm, "FM": fm, "DH": dh,
            "seeds": len(rows), "mAP_mean": float(mAP.mean()), "mAP_std": float(mAP.std()),
            "rank1_mean": float(r1.mean()), "rank1_std": float(r1.std()),
        })
    return runs, summary


def sweep_results(cfg: ExperimentConfig, param: str, values) -> list[dict]:
    """One row per (value, seed) with the final target metrics of a run using that value."""
    values = parse_sweep_values(param, values)
    sources, _, split = _world(cfg)
    rows = []
    for value in values:
        if param == "lambda":
            training = replace(cfg.training, lam=value)
        else:
            if len(value) != len(sources):
                raise ConfigError(f"alpha {value} has {len(value)} entries for {len(sources)} clients")
            training = replace(cfg.training, alpha=value)
        for seed in cfg.seeds:
            last = _final(run_federated(sources, replace(training, seed=seed), split))
            label = ",".join(repr(x) for x in value) if param == "alpha" else repr(value)
            rows.append({"param": param, "value": label, "seed": seed,
                         "target_mAP": last["target_mAP"], "target_rank1": last["target_rank1"]})
            log.info("%s=%s seed %d  mAP %.2f", param, label, seed, last["target_mAP"])
    return rows


# --- output handling ----------------------------------------------------------------------


def csv_text(rows: list[dict], columns) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row[k] for k in columns})
    return buf.getvalue()


def write_outputs(out_dir: str | os.PathLike, files: dict[str, bytes | str]) -> list[Path]:
    """Write all ``files`` into ``out_dir`` or none of them.

    Contents are staged in a scratch directory next to the targets and
    renamed into place; on any failure the staged files are removed.
    """
    out = Path(out_dir)
    created = not out.exists()
    out.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=".staging-", dir=out))
    placed: list[Path] = []
    try:
        for name, content in files.items():
            data = content.encode("utf-8") if isinstance(content, str) else content
            (staging / name).write_bytes(data)
        for name in files:
            os.replace(staging / name, out / name)
            placed.append(out / name)
    except BaseException:
        for p in placed:
            p.unlink(missing_ok=True)
        if created:
            shutil.rmtree(out, ignore_errors=True)
        raise
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    return placed


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seeds = [args.seed]
    if getattr(args, "out", None) is not None:
        cfg.output_dir = args.out
    return cfg


# --- subcommands -----------------------------------------------------------------------------


def cmd_run(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    sources, _, split = _world(cfg)
    training = replace(cfg.training, seed=cfg.seeds[0])
    run = run_federated(sources, training, split)
    resolved = replace(cfg, training=training, seeds=[training.seed])
    write_outputs(cfg.output_dir, {
        "metrics.csv": csv_text(run.metrics, METRIC_COLUMNS),
        "checkpoint.fdfh": encode_checkpoint(run.global_params),
        "config.json": resolved.to_json(),
    })
    last = _final(run)
    print(f"{training.variant} seed {training.seed}: target mAP {last['target_mAP']:.2f}  "
          f"rank-1 {last['target_rank1']:.2f}  -> {cfg.output_dir}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    runs, summary = ablation_results(cfg)
    write_outputs(cfg.output_dir, {
        "ablation.csv": csv_text(summary, ABLATION_COLUMNS),
        "runs.csv": csv_text(runs, RUN_COLUMNS),
        "config.json": cfg.to_json(),
    })
    print(f"{'No.':>3}  {'variant':<7} FH DM FM DH   mAP            rank-1")
    for row in summary:
        print(f"{row['no']:>3}  {row['variant']:<7} {row['FH']:>2} {row['DM']:>2} {row['FM']:>2} {row['DH']:>2}   "
              f"{row['mAP_mean']:5.2f} ± {row['mAP_std']:4.2f}   {row['rank1_mean']:5.2f} ± {row['rank1_std']:4.2f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    param = args.param or cfg.sweep_param
    if param is None:
        raise ConfigError("no sweep parameter given (use --param or the config's sweep.param)")
    if param == "lam":
        param = "lambda"
    values = args.values if args.values is not None else cfg.sweep_values
    values = parse_sweep_values(param, values)
    cfg.sweep_param, cfg.sweep_values = param, [list(v) if isinstance(v, tuple) else v for v in values]
    rows = sweep_results(cfg, param, values)
    write_outputs(cfg.output_dir, {"sweep.csv": csv_text(rows, SWEEP_COLUMNS), "config.json": cfg.to_json()})
    for label in dict.fromkeys(r["value"] for r in rows):
        vals = [r["target_mAP"] for r in rows if r["value"] == label]
        print(f"{param}={label}: mAP {np.mean(vals):.2f} ± {np.std(vals):.2f} over {len(vals)} seeds")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    sources, target, _ = _world(cfg)
    files = {f"source_{ds.domain_id}.fdat": encode_dataset(ds) for ds in sources}
    files["target.fdat"] = encode_dataset(target)
    files["config.json"] = cfg.to_json()
    write_outputs(cfg.output_dir, files)
    print(f"wrote {len(sources)} source domains and 1 target domain to {cfg.output_dir}")
    return EXIT_OK


def cmd_eval_checkpoint(args) -> int:
    if args.data is None and args.config is None:
        raise ConfigError("eval-checkpoint needs --data or --config")
    try:
        params = decode_checkpoint(Path(args.checkpoint).read_bytes())
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {args.checkpoint}: {exc}") from None
    if args.data is not None:
        try:
            split = retrieval_split(decode_dataset(Path(args.data).read_bytes()))
        except OSError as exc:
            raise ConfigError(f"cannot read dataset {args.data}: {exc}") from None
    else:
        _, _, split = _world(load_config(args.config))
    mAP, rank1 = evaluate_target(params, split)
    print(f"target mAP {mAP:.2f}  rank-1 {rank1:.2f}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on usage errors; route them to the
    # config-error code instead so 2 always means a runtime failure.
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedhal", description="Federated domain-generalisation experiments with feature hallucination.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="log progress (-vv for debug)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, help="override the config's seed list with one seed")
        p.add_argument("--out", help="override the output directory")
        return p

    with_common(sub.add_parser("run", help="train one variant and write metrics, checkpoint and config"))
    with_common(sub.add_parser("ablate", help="compare all variants across seeds"))
    sweep = with_common(sub.add_parser("sweep", help="vary lambda or alpha across seeds"))
    sweep.add_argument("--param", choices=("lambda", "lam", "alpha"))
    sweep.add_argument("--values", help="comma-separated values; alpha vectors separated by ';'")
    with_common(sub.add_parser("gen-data", help="write the synthetic domains as FDAT files"))
    ev = sub.add_parser("eval-checkpoint", help="score a checkpoint on a target domain")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", help="target domain FDAT file")
    ev.add_argument("--config", help="regenerate the target domain from this config instead")
    return parser


COMMANDS = {
    "run": cmd_run,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "gen-data": cmd_gen_data,
    "eval-checkpoint": cmd_eval_checkpoint,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FedHalError, OSError, FloatingPointError, ValueError) as exc:
        kind = "parse error" if isinstance(exc, ParseError) else "error"
        print(f"{kind}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
