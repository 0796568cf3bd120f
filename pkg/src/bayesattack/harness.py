"""End-to-end experiments: zoo training, posteriors, attack grids, transfer reports.

One seed drives everything for a run of the pipeline. Stage streams are
derived from it by label (``train``, ``finetune``, ``pool``, ``attack:<row>``),
so two runs of the same config write identical CSVs.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import attack as atk
from . import data as dat
from . import finetune as ft
from . import posterior as post
from . import zoo
from .config import ExperimentConfig, VARIANTS
from .numcore import RngStream

log = logging.getLogger("bayesattack")

RESULT_FIELDS = ("variant", "victim", "seed", "pool_size", "successes", "success_rate")
SAMPLING_FIELDS = ("M", "S", "seed", "pool_size", "avg_success", "avg_victim_loss", "avg_attack_loss")
SUMMARY_FIELDS = ("variant", "finetuned", "seeds", "avg_success_mean", "avg_success_se")


class StageFailure(RuntimeError):
    """A pipeline stage raised; ``stage`` names it (CLI exit code 3)."""

    def __init__(self, stage: str, cause: BaseException) -> None:
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class EmptyPoolError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# pool and reports


def correct_mask(models, inputs, labels) -> np.ndarray:
    ok = np.ones(len(labels), dtype=bool)
    for m in models:
        ok &= zoo.predict(m, inputs) == labels
    return ok


def build_pool(substitute: zoo.Model, victims, test: dat.Dataset, pool_size: int,
               stream: RngStream) -> np.ndarray:
    """Seeded random subset of test indices that every model classifies correctly.

    Returns the indices sorted ascending. Fewer than ``pool_size`` qualifying
    examples yields a smaller pool and a warning; none at all is an error.
    """
    ok = np.flatnonzero(correct_mask([substitute, *victims], test.inputs, test.labels))
    if len(ok) == 0:
        raise EmptyPoolError("no test example is classified correctly by every model; "
                             "use weaker victims or train the zoo longer")
    if len(ok) < pool_size:
        log.warning("only %d test examples qualify for a pool of %d", len(ok), pool_size)
    pick = ok[stream.permutation(len(ok))[:pool_size]]
    return np.sort(pick)


@dataclass
class TransferReport:
    variant: str
    seed: int
    pool_size: int
    successes: dict[str, int]
    errors: dict[str, str] = field(default_factory=dict)
    victim_loss: dict[str, float] = field(default_factory=dict)
    fingerprint: str = ""

    @property
    def rates(self) -> dict[str, float]:
        return {k: v / self.pool_size for k, v in self.successes.items()}

    @property
    def average(self) -> float:
        r = list(self.rates.values())
        return float(np.mean(r)) if r else float("nan")

    @property
    def average_loss(self) -> float:
        v = list(self.victim_loss.values())
        return float(np.mean(v)) if v else float("nan")

    def rows(self) -> list[dict]:
        return [{"variant": self.variant, "victim": name, "seed": self.seed, "pool_size": self.pool_size,
                 "successes": n, "success_rate": repr(n / self.pool_size)}
                for name, n in self.successes.items()]

    def to_json(self) -> dict:
        return {"variant": self.variant, "seed": self.seed, "pool_size": self.pool_size,
                "successes": self.successes, "success_rate": self.rates, "average": self.average,
                "errors": self.errors, "fingerprint": self.fingerprint}


def evaluate_transfer(x_adv, victims: dict[str, zoo.Model], labels, variant: str = "", seed: int = 0,
                      fingerprint: str = "") -> TransferReport:
    """Untargeted success counts per victim; a victim that cannot take the batch gets an error entry."""
    x_adv = np.asarray(x_adv, dtype=np.float64)
    labels = np.asarray(labels)
    if x_adv.size and (x_adv.min() < 0 or x_adv.max() > 1):
        raise atk.AttackError("adversarial batch leaves the [0, 1] pixel range")
    report = TransferReport(variant, seed, len(labels), {}, fingerprint=fingerprint)
    for name, m in victims.items():
        if tuple(x_adv.shape[1:]) != m.arch.input_shape:
            report.errors[name] = f"input shape {tuple(x_adv.shape[1:])} does not match {m.arch.input_shape}"
            continue
        logits = zoo.forward(m, x_adv).data
        report.successes[name] = int(np.sum(np.argmax(logits, axis=1) != labels))
        report.victim_loss[name] = float(np.mean(zoo.per_example_loss(logits, labels)))
    return report


# --------------------------------------------------------------------------
# stages


def load_dataset(cfg: ExperimentConfig, seed: int) -> tuple[dat.Dataset, dat.Dataset]:
    d = cfg.data
    if d.kind == "idx":
        ds = dat.load_idx(d.images, d.labels, d.classes)
    elif d.kind == "csv":
        ds = dat.load_csv(d.images, d.dim, d.classes)
    else:
        kw = {"contrast": (d.contrast_lo, d.contrast_hi)} if d.kind == "bars-image" else {}
        ds = dat.synth_generate(d.kind, d.n, d.classes, d.noise, seed, **kw)
    return dat.split(ds, d.test_fraction, RngStream(seed, "split"))


def model_names(cfg: ExperimentConfig) -> list[str]:
    return ["substitute"] + [f"victim{i}" for i in range(len(cfg.victim_list))]


def train_zoo(cfg: ExperimentConfig, train: dat.Dataset, seed: int) -> dict[str, zoo.Model]:
    t = cfg.train
    arches = [cfg.zoo.substitute] + cfg.victim_list
    out = {}
    for name, text in zip(model_names(cfg), arches):
        arch = zoo.ArchSpec.parse(text, train.input_shape, train.classes)
        mean, std = zoo.fit_normalization(arch, train.inputs)
        model = zoo.init_model(arch, RngStream(seed, "init").child(name), mean, std)
        tc = zoo.TrainConfig(t.lr, t.momentum, t.weight_decay, t.batch_size, t.epochs, seed)
        res = zoo.train_sgd(model, train.inputs, train.labels, tc, RngStream(seed, "train").child(name))
        log.info("seed %d: trained %s (%s), train accuracy %.3f", seed, name, arch.short(), res.train_accuracy)
        out[name] = res.model
    return out


def finetune_config(cfg: ExperimentConfig, seed: int) -> ft.FinetuneConfig:
    f = cfg.finetune
    return ft.FinetuneConfig(f.lambda_w, f.lambda_e, f.gamma, f.gamma_scaled, f.lr, f.momentum,
                             f.weight_decay, f.batch_size, f.epochs, f.swag_cadence, f.swag_rank, seed)


def run_finetune(cfg: ExperimentConfig, substitute: zoo.Model, train: dat.Dataset,
                 seed: int) -> ft.FinetuneResult:
    return ft.finetune_run(substitute, train.inputs, train.labels, finetune_config(cfg, seed),
                           RngStream(seed, "finetune"))


@dataclass
class Posteriors:
    """The attack-time model and sampling sources for one grid column."""

    model: zoo.Model
    param: post.GaussianPosterior
    input: post.GaussianPosterior
    trajectory_alpha: float | None = None


def make_posteriors(cfg: ExperimentConfig, substitute: zoo.Model, tuned: zoo.Model | None = None,
                    moments: post.GaussianPosterior | None = None) -> Posteriors:
    """Posteriors without fine-tuning (``tuned=None``) or around the fine-tuned model.

    ``moments`` is the raw swag posterior of the fine-tuning trajectory; it is
    needed when ``posterior.param_kind=swag``. With a swag parameter posterior
    the input posterior stays isotropic unless ``posterior.allow_swag_both`` is set.
    """
    p = cfg.posterior
    if tuned is None:
        trajectory = p.input_kind == "trajectory"
        return Posteriors(substitute, post.isotropic_posterior(substitute.params, p.sigma),
                          atk.input_noise_posterior(p.sigma_e), p.input_alpha if trajectory else None)
    if p.param_kind == "swag":
        if moments is None:
            raise ValueError("a swag parameter posterior needs the fine-tuning moments")
        param = replace(moments, alpha=p.swag_alpha, beta=p.swag_beta, meta=dict(moments.meta))
        model = tuned.with_params(param.mean)
        trajectory = p.input_kind == "trajectory" and p.allow_swag_both
    else:
        model = tuned
        param = post.isotropic_posterior(model.params, p.sigma)
        trajectory = p.input_kind == "trajectory"
    return Posteriors(model, param, atk.input_noise_posterior(p.sigma_e_finetuned),
                      p.input_alpha if trajectory else None)


def swag_moments(result: ft.FinetuneResult) -> post.GaussianPosterior | None:
    return post.swag_finalize(result.collector) if result.collector.count else None


def bayes_spec(cfg: ExperimentConfig, ps: Posteriors, variant: str, M: int | None = None,
               S: int | None = None) -> atk.BayesSpec:
    a = cfg.attack
    M = a.M if M is None else M
    S = a.S if S is None else S
    use_w = variant in ("param", "joint")
    use_e = variant in ("input", "joint")
    return atk.BayesSpec(ps.param if use_w else None, ps.input if use_e else None,
                         M if use_w else 1, S if use_e else 1,
                         ps.trajectory_alpha if use_e else None, a.sample_scope)


def run_attack(cfg: ExperimentConfig, ps: Posteriors, spec: atk.BayesSpec, x, y, ids, seed: int,
               row: str) -> atk.AttackResult:
    a = cfg.attack
    budget = atk.AttackBudget(a.epsilon, a.step, a.iterations)
    return atk.attack_run(ps.model, spec, budget, x, y, a.method, RngStream(seed, f"attack:{row}"),
                          a.decay, ids=ids)


def attack_objective(cfg: ExperimentConfig, ps: Posteriors, x_adv, y, ids, seed: int) -> float:
    """Mean Monte-Carlo attack loss at the emitted examples.

    Always estimated with the configured joint spec (``attack.M`` x
    ``attack.S``) on a dedicated stream, so cells of the sample-count grid
    are scored by the same yardstick whatever M and S they attacked with.
    """
    spec = bayes_spec(cfg, ps, "joint")
    base = RngStream(seed, "attack-loss")
    streams = [base.child(f"ex{int(i)}") for i in ids] if spec.sample_scope == "example" else [base]
    _, loss = atk.bayes_loss_grad(ps.model, spec, atk.PerturbationState.fresh(x_adv, y), streams)
    return float(loss.mean())


# --------------------------------------------------------------------------
# whole experiment


@dataclass
class SeedOutcome:
    reports: list[TransferReport]
    sampling: list[dict]


def _stage(name: str, manifest: "Manifest", fn, *args, **kw):
    try:
        out = fn(*args, **kw)
    except Exception as exc:  # noqa: BLE001 - every stage failure is reported by name
        manifest.stage(name, "failed")
        raise StageFailure(name, exc) from exc
    manifest.stage(name, "ok")
    return out


class Manifest:
    """Completeness record: stage statuses plus artifacts written so far."""

    def __init__(self, path: Path) -> None:
        self.path = path
        self.stages: list[tuple[str, str]] = []
        self.artifacts: list[str] = []
        self.complete = False

    def stage(self, name: str, status: str) -> None:
        self.stages.append((name, status))
        self.write()

    def add(self, path: Path) -> None:
        self.artifacts.append(str(path.relative_to(self.path.parent)))

    def write(self) -> None:
        lines = [f"complete={'true' if self.complete else 'false'}"]
        lines += [f"stage {name}={status}" for name, status in self.stages]
        lines += [f"artifact {a}" for a in self.artifacts]
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("\n".join(lines) + "\n")


def run_seed(cfg: ExperimentConfig, seed: int, out: Path, manifest: Manifest) -> SeedOutcome:
    sdir = out / f"seed{seed}"
    (sdir / "models").mkdir(parents=True, exist_ok=True)
    (sdir / "adv").mkdir(parents=True, exist_ok=True)
    fp = cfg.fingerprint()

    train, test = _stage(f"seed{seed}:data", manifest, load_dataset, cfg, seed)
    models = _stage(f"seed{seed}:train", manifest, train_zoo, cfg, train, seed)
    for name, m in models.items():
        path = sdir / "models" / f"{name}.ckpt"
        zoo.save_checkpoint(m, path)
        manifest.add(path)
    substitute = models["substitute"]
    victims = {k: v for k, v in models.items() if k != "substitute"}

    columns = {"": make_posteriors(cfg, substitute)}
    if cfg.finetune.enabled:
        tuned = _stage(f"seed{seed}:finetune", manifest, run_finetune, cfg, substitute, train, seed)
        moments = swag_moments(tuned)
        columns["-ft"] = make_posteriors(cfg, substitute, tuned.model, moments)
        zoo.save_checkpoint(tuned.model, sdir / "models" / "substitute-ft.ckpt")
        if moments is not None:
            post.save_posterior(moments, sdir / "swag-moments.post", tuned.model.arch.to_dict())
        write_history(sdir / "finetune-history.csv", tuned.history)
        manifest.add(sdir / "models" / "substitute-ft.ckpt")
    for suffix, ps in columns.items():
        path = sdir / f"param-posterior{suffix}.post"
        post.save_posterior(ps.param, path, ps.model.arch.to_dict())
        manifest.add(path)

    pool_models = [ps.model for ps in columns.values()]
    ids = _stage(f"seed{seed}:pool", manifest, build_pool, pool_models[0], [*pool_models[1:], *victims.values()],
                 test, cfg.attack.pool_size, RngStream(seed, "pool"))
    x, y = test.inputs[ids], test.labels[ids]

    reports, adv = [], {}
    for suffix, ps in columns.items():
        for variant in cfg.variant_list:
            row = variant + suffix
            res = _stage(f"seed{seed}:attack:{row}", manifest, run_attack, cfg, ps,
                         bayes_spec(cfg, ps, variant), x, y, ids, seed, row)
            path = sdir / "adv" / f"{row}-images.idx"
            dat.save_idx(path, sdir / "adv" / f"{row}-labels.idx", res.x_adv, y)
            manifest.add(path)
            reports.append(evaluate_transfer(res.x_adv, victims, y, row, seed, fp))
            adv[row] = res.x_adv

    sampling = []
    joint = {r.variant: (r, adv[r.variant]) for r in reports}.get("joint")
    for M in cfg.sampling_counts:
        for S in cfg.sampling_counts:
            if joint is not None and (M, S) == (cfg.attack.M, cfg.attack.S):
                rep, x_adv = joint  # same spec and stream as the grid's joint row
            else:
                res = _stage(f"seed{seed}:attack:joint-M{M}-S{S}", manifest, run_attack, cfg, columns[""],
                             bayes_spec(cfg, columns[""], "joint", M, S), x, y, ids, seed, "joint")
                rep, x_adv = evaluate_transfer(res.x_adv, victims, y, f"joint-M{M}-S{S}", seed, fp), res.x_adv
            sampling.append({"M": M, "S": S, "seed": seed, "pool_size": rep.pool_size,
                             "avg_success": repr(rep.average), "avg_victim_loss": repr(rep.average_loss),
                             "avg_attack_loss": repr(attack_objective(cfg, columns[""], x_adv, y, ids, seed))})
    return SeedOutcome(reports, sampling)


def write_history(path: Path, history: list[float]) -> None:
    write_csv(path, ("epoch", "loss"), [{"epoch": i, "loss": repr(v)} for i, v in enumerate(history)])


def write_csv(path: Path, fields, rows) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    path.write_text(buf.getvalue())


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_experiment(cfg: ExperimentConfig) -> Path:
    """Run every seed, then write results, sample-count grid, summary and manifest.

    Returns the output directory. Raises ``StageFailure`` naming the stage that
    broke; whatever was written before that stays, with ``complete=false`` in
    the MANIFEST.
    """
    out = cfg.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    manifest = Manifest(out / "MANIFEST")
    manifest.write()
    reports, sampling = [], []
    t0 = time.perf_counter()
    for seed in cfg.seed_list:
        outcome = run_seed(cfg, seed, out, manifest)
        reports += outcome.reports
        sampling += outcome.sampling
        log.info("seed %d done after %.1f s", seed, time.perf_counter() - t0)
    write_csv(out / "results.csv", RESULT_FIELDS, [r for rep in reports for r in rep.rows()])
    (out / "results.json").write_text(json.dumps(
        {"fingerprint": cfg.fingerprint(), "reports": [r.to_json() for r in reports]}, indent=1, sort_keys=True))
    write_csv(out / "sampling.csv", SAMPLING_FIELDS, sampling)
    write_summary(out)
    (out / "timing.json").write_text(json.dumps({"seconds": time.perf_counter() - t0}))
    for name in ("results.csv", "results.json", "sampling.csv", "summary.csv"):
        manifest.add(out / name)
    manifest.complete = True
    manifest.write()
    return out


# --------------------------------------------------------------------------
# aggregation


def per_seed_average(rows: list[dict]) -> dict[str, dict[int, float]]:
    """``variant -> seed -> unweighted mean success rate over victims``."""
    acc: dict[str, dict[int, list[float]]] = {}
    for r in rows:
        acc.setdefault(r["variant"], {}).setdefault(int(r["seed"]), []).append(float(r["success_rate"]))
    return {v: {s: float(np.mean(x)) for s, x in by_seed.items()} for v, by_seed in acc.items()}


def mean_se(values) -> tuple[float, float]:
    v = np.asarray(list(values), dtype=np.float64)
    if len(v) < 2:
        return float(v.mean()) if len(v) else float("nan"), float("nan")
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(len(v)))


def paired_gap(avg: dict[str, dict[int, float]], a: str, b: str) -> tuple[float, float]:
    """Mean and standard error over seeds of ``a - b``."""
    seeds = sorted(set(avg[a]) & set(avg[b]))
    return mean_se(avg[a][s] - avg[b][s] for s in seeds)


def summarize(rows: list[dict]) -> list[dict]:
    avg = per_seed_average(rows)
    order = [v + s for s in ("", "-ft") for v in VARIANTS]
    out = []
    for variant in [v for v in order if v in avg] + sorted(set(avg) - set(order)):
        m, se = mean_se(avg[variant].values())
        out.append({"variant": variant.removesuffix("-ft"), "finetuned": str(variant.endswith("-ft")).lower(),
                    "seeds": len(avg[variant]), "avg_success_mean": repr(m), "avg_success_se": repr(se)})
    return out


def write_summary(out: Path) -> list[dict]:
    rows = summarize(read_csv(out / "results.csv"))
    write_csv(out / "summary.csv", SUMMARY_FIELDS, rows)
    return rows


def sampling_table(rows: list[dict], key: str = "avg_success") -> dict[tuple[int, int], dict[int, float]]:
    """``(M, S) -> seed -> value`` from ``sampling.csv`` rows."""
    out: dict[tuple[int, int], dict[int, float]] = {}
    for r in rows:
        out.setdefault((int(r["M"]), int(r["S"])), {})[int(r["seed"])] = float(r[key])
    return out
