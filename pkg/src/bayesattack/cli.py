"""Command line: ``bayesattack <command> [--config FILE] [--section.key VALUE ...]``.

Every config key can be given as a flag and overrides the file. The output
root comes from ``out``, else ``$BAYESATTACK_OUT``, else ``./runs``. Stage
commands (``train`` through ``evaluate``) work on one seed, ``--seed`` or the
first of ``seeds``, and read what the earlier stages wrote.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as dat
from . import harness as hn
from . import posterior as post
from . import zoo
from .config import VARIANTS, ConfigError, ExperimentConfig, load_config
from .numcore import RngStream

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3
log = logging.getLogger("bayesattack")


def parse_overrides(tokens: list[str]) -> dict[str, str]:
    """``--a.b=v`` or ``--a.b v`` tokens to a key/value map."""
    out: dict[str, str] = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise ConfigError(f"unexpected argument {tok!r}")
        if "=" in tok:
            key, value = tok[2:].split("=", 1)
        elif i + 1 < len(tokens):
            key, value = tok[2:], tokens[i + 1]
            i += 1
        else:
            raise ConfigError(f"flag {tok} needs a value")
        out[key] = value
        i += 1
    return out


class Workspace:
    """Paths of one seed's artifacts under the output root."""

    def __init__(self, cfg: ExperimentConfig, seed: int) -> None:
        self.cfg, self.seed = cfg, seed
        self.dir = cfg.out_dir() / f"seed{seed}"

    def model(self, name: str) -> Path:
        return self.dir / "models" / f"{name}.ckpt"

    def posterior(self, suffix: str) -> Path:
        return self.dir / f"param-posterior{suffix}.post"

    def adv(self, row: str) -> tuple[Path, Path]:
        return self.dir / "adv" / f"{row}-images.idx", self.dir / "adv" / f"{row}-labels.idx"

    def victims(self) -> dict[str, zoo.Model]:
        names = hn.model_names(self.cfg)[1:]
        return {n: zoo.load_checkpoint(self.model(n)) for n in names}


def cmd_train(cfg, ws: Workspace, args) -> None:
    train, test = hn.load_dataset(cfg, ws.seed)
    models = hn.train_zoo(cfg, train, ws.seed)
    ws.model("substitute").parent.mkdir(parents=True, exist_ok=True)
    for name, m in models.items():
        zoo.save_checkpoint(m, ws.model(name))
        print(f"{name:12s} {m.arch.short():24s} test accuracy {zoo.accuracy(m, test.inputs, test.labels):.4f}")


def cmd_finetune(cfg, ws: Workspace, args) -> None:
    train, _ = hn.load_dataset(cfg, ws.seed)
    res = hn.run_finetune(cfg, zoo.load_checkpoint(ws.model("substitute")), train, ws.seed)
    zoo.save_checkpoint(res.model, ws.model("substitute-ft"))
    hn.write_history(ws.dir / "finetune-history.csv", res.history)
    moments = hn.swag_moments(res)
    if moments is not None:
        post.save_posterior(moments, ws.dir / "swag-moments.post", res.model.arch.to_dict())
    print(f"fine-tuned {len(res.history)} epochs, train accuracy {res.train_accuracy:.4f}, "
          f"{res.collector.count} swag snapshots")


def _columns(cfg, ws: Workspace, finetuned: bool) -> hn.Posteriors:
    substitute = zoo.load_checkpoint(ws.model("substitute"))
    if not finetuned:
        return hn.make_posteriors(cfg, substitute)
    tuned = zoo.load_checkpoint(ws.model("substitute-ft"))
    moments_path = ws.dir / "swag-moments.post"
    moments = post.load_posterior(moments_path)[0] if moments_path.is_file() else None
    return hn.make_posteriors(cfg, substitute, tuned, moments)


def cmd_collect_posterior(cfg, ws: Workspace, args) -> None:
    suffixes = [""] + (["-ft"] if ws.model("substitute-ft").is_file() else [])
    for suffix in suffixes:
        ps = _columns(cfg, ws, suffix == "-ft")
        post.save_posterior(ps.param, ws.posterior(suffix), ps.model.arch.to_dict())
        print(f"wrote {ws.posterior(suffix)} ({ps.param.mode}, {ps.param.mean.size} parameters)")


def _attack_model(cfg, ws: Workspace, finetuned: bool) -> hn.Posteriors:
    suffix = "-ft" if finetuned else ""
    path = ws.posterior(suffix)
    if not path.is_file():
        raise FileNotFoundError(f"{path} is missing; run collect-posterior first")
    param, _ = post.load_posterior(path)
    ps = _columns(cfg, ws, finetuned)
    ps.param = param
    ps.model = ps.model.with_params(param.mean)
    return ps


def cmd_attack(cfg, ws: Workspace, args) -> None:
    row = args.variant + ("-ft" if args.finetuned else "")
    ps = _attack_model(cfg, ws, args.finetuned)
    _, test = hn.load_dataset(cfg, ws.seed)
    others = list(ws.victims().values())
    if cfg.finetune.enabled and ws.model("substitute-ft").is_file():
        others.append(_attack_model(cfg, ws, not args.finetuned).model)
    ids = hn.build_pool(ps.model, others, test, cfg.attack.pool_size, RngStream(ws.seed, "pool"))
    res = hn.run_attack(cfg, ps, hn.bayes_spec(cfg, ps, args.variant), test.inputs[ids], test.labels[ids],
                        ids, ws.seed, row)
    images, labels = ws.adv(row)
    images.parent.mkdir(parents=True, exist_ok=True)
    dat.save_idx(images, labels, res.x_adv, test.labels[ids])
    hn.write_csv(ws.dir / "adv" / f"{row}-pool.csv", ("index",), [{"index": int(i)} for i in ids])
    print(f"attacked {len(ids)} examples ({row}); wrote {images}")


def cmd_evaluate(cfg, ws: Workspace, args) -> None:
    row = args.variant + ("-ft" if args.finetuned else "")
    images, labels = ws.adv(row)
    batch = dat.load_idx(images, labels, cfg.data.classes)
    x = batch.inputs
    victims = ws.victims()
    shape = next(iter(victims.values())).arch.input_shape
    if x.shape[1:] != shape and x[0].size == int(np.prod(shape)):
        x = x.reshape((len(x),) + shape)
    rep = hn.evaluate_transfer(x, victims, batch.labels, row, ws.seed, cfg.fingerprint())
    out = ws.dir / "reports"
    out.mkdir(parents=True, exist_ok=True)
    hn.write_csv(out / f"{row}.csv", hn.RESULT_FIELDS, rep.rows())
    (out / f"{row}.json").write_text(json.dumps(rep.to_json(), indent=1, sort_keys=True))
    for name, rate in rep.rates.items():
        print(f"{name:12s} {rate:.4f}")
    for name, err in rep.errors.items():
        print(f"{name:12s} error: {err}")
    print(f"{'average':12s} {rep.average:.4f}")


def cmd_run(cfg, ws, args) -> None:
    out = hn.run_experiment(cfg)
    print(f"results in {out}")
    _print_summary(out)


def cmd_report(cfg, ws, args) -> None:
    out = Path(args.dir) if args.dir else cfg.out_dir()
    if not (out / "results.csv").is_file():
        raise FileNotFoundError(f"{out / 'results.csv'} not found")
    hn.write_summary(out)
    _print_summary(out)


def _print_summary(out: Path) -> None:
    rows = hn.read_csv(out / "results.csv")
    for r in hn.summarize(rows):
        tag = r["variant"] + (" (fine-tuned)" if r["finetuned"] == "true" else "")
        print(f"{tag:24s} {float(r['avg_success_mean']):.4f} ± {float(r['avg_success_se']):.4f}  "
              f"({r['seeds']} seeds)")
    avg = hn.per_seed_average(rows)
    if "joint" in avg and "plain" in avg:
        gap, se = hn.paired_gap(avg, "joint", "plain")
        print(f"joint - plain: {gap:+.4f} ± {se:.4f}")


COMMANDS = {
    "train": (cmd_train, "train the substitute and victim zoo"),
    "finetune": (cmd_finetune, "flat-minima fine-tuning of the substitute"),
    "collect-posterior": (cmd_collect_posterior, "write parameter posteriors"),
    "attack": (cmd_attack, "attack the pool with one grid variant"),
    "evaluate": (cmd_evaluate, "transfer report for one adversarial batch"),
    "run": (cmd_run, "full grid over all seeds"),
    "report": (cmd_report, "re-aggregate results.csv into summary.csv"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bayesattack", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, help="seed for stage commands (default: first of seeds)")
        if name in ("attack", "evaluate"):
            p.add_argument("--variant", choices=VARIANTS, default="joint")
            p.add_argument("--finetuned", action="store_true")
        if name == "report":
            p.add_argument("--dir", help="results directory (default: the output root)")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, parse_overrides(rest))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    ws = Workspace(cfg, args.seed if args.seed is not None else cfg.seed_list[0])
    fn = COMMANDS[args.command][0]
    try:
        fn(cfg, ws, args)
    except hn.StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except Exception as exc:  # noqa: BLE001 - report any stage error with its command
        print(f"error: stage {args.command!r} failed: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
