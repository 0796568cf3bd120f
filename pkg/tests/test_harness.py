import time

import numpy as np
import pytest

from bayesattack import config as cf
from bayesattack import data, zoo
from bayesattack import harness as hn
from bayesattack.numcore import RngStream

MINIMAL = {
    "data.kind": "blobs", "data.n": "600", "zoo.substitute": "mlp:32", "zoo.victims": "mlp:16",
    "train.epochs": "5", "finetune.epochs": "1", "attack.iterations": "10", "attack.pool_size": "100",
    "grid.sampling_counts": "1,2", "seeds": "0",
}


@pytest.fixture(scope="module")
def fitted():
    ds = data.synth_generate("blobs", 300, 3, 0.05, 1)
    arch = zoo.ArchSpec("mlp", (16,), (16,), 3)
    mean, std = zoo.fit_normalization(arch, ds.inputs)
    m = zoo.train_sgd(zoo.init_model(arch, RngStream(0, "i"), mean, std), ds.inputs, ds.labels,
                      zoo.TrainConfig(epochs=10)).model
    assert zoo.accuracy(m, ds.inputs, ds.labels) == 1.0
    return ds, m


def _constant_model(arch, cls):
    params = np.zeros(zoo.param_count(arch))
    params[-arch.classes + cls] = 5.0
    return zoo.Model(arch, params)


def test_pool_of_perfect_model_has_requested_size(fitted):
    ds, m = fitted
    ids = hn.build_pool(m, [m], ds, 120, RngStream(0, "pool"))
    assert len(ids) == 120 and len(set(ids.tolist())) == 120
    again = hn.build_pool(m, [m], ds, 120, RngStream(0, "pool"))
    assert np.array_equal(ids, again)


def test_pool_with_hopeless_victim_is_an_error(fitted):
    ds, m = fitted
    sub = ds.subset(np.flatnonzero(ds.labels != 2))
    with pytest.raises(hn.EmptyPoolError, match="weaker victims"):
        hn.build_pool(m, [_constant_model(m.arch, 2)], sub, 50, RngStream(0, "pool"))


def test_pool_size_matches_brute_force_intersection(fitted, caplog):
    ds, m = fitted
    victims = [_constant_model(m.arch, 0), m.with_params(m.params + 0.3 * RngStream(1, "n").normal(m.params.shape)),
               m.with_params(m.params + 0.5 * RngStream(2, "n").normal(m.params.shape))]
    count = 0
    for i in range(len(ds)):
        xi, yi = ds.inputs[i:i + 1], ds.labels[i]
        count += all(int(np.argmax(zoo.forward(v, xi).data)) == yi for v in [m, *victims])
    ids = hn.build_pool(m, victims, ds, 10_000, RngStream(0, "pool"))
    assert len(ids) == count
    assert "qualify" in caplog.text


def test_transfer_report_examples(fitted):
    ds, m = fitted
    ids = hn.build_pool(m, [m], ds, 60, RngStream(0, "pool"))
    x, y = ds.inputs[ids], ds.labels[ids]
    rep = hn.evaluate_transfer(x, {"a": m, "b": m}, y)
    assert rep.rates == {"a": 0.0, "b": 0.0}
    inverted = 1.0 - x
    fooled = np.flatnonzero(zoo.predict(m, inverted) != y)
    assert len(fooled) > 0
    rep = hn.evaluate_transfer(inverted[fooled], {"a": m}, y[fooled])
    assert rep.rates["a"] == 1.0


def test_transfer_report_arithmetic_and_errors(fitted):
    ds, m = fitted
    other = zoo.init_model(zoo.ArchSpec("mlp", (4,), (5,), 3), RngStream(0, "o"))
    noisy = m.with_params(m.params + 0.5 * RngStream(3, "n").normal(m.params.shape))
    x, y = ds.inputs[:40], ds.labels[:40]
    rep = hn.evaluate_transfer(x, {"good": m, "noisy": noisy, "wrong-shape": other}, y, "v", 0, "fp")
    assert set(rep.successes) == {"good", "noisy"} and "wrong-shape" in rep.errors
    assert abs(rep.average - np.mean(list(rep.rates.values()))) < 1e-12
    assert rep.rows() == hn.evaluate_transfer(x, {"good": m, "noisy": noisy, "wrong-shape": other},
                                              y, "v", 0, "fp").rows()
    with pytest.raises(Exception):
        hn.evaluate_transfer(x + 2.0, {"good": m}, y)


def test_config_parsing_and_precedence(tmp_path, monkeypatch):
    path = tmp_path / "exp.cfg"
    path.write_text("# experiment\nattack.epsilon=0.03137254901960784  # 8/255\n"
                    "attack.M = 3\nfinetune.enabled=false\nseeds=1,2\n\n")
    cfg = cf.load_config(path, {"attack.M": "2", "attack.step": "1/255"})
    assert cfg.attack.epsilon == 8 / 255 and cfg.attack.step == 1 / 255
    assert cfg.attack.M == 2 and cfg.finetune.enabled is False and cfg.seed_list == [1, 2]
    monkeypatch.setenv(cf.OUT_ENV, str(tmp_path / "env-out"))
    assert cfg.out_dir() == tmp_path / "env-out"
    assert cf.load_config(path, {"out": "x"}).out_dir().name == "x"
    moved = cf.load_config(path, {"attack.M": "2", "attack.step": "1/255", "out": "x"})
    assert moved.fingerprint() == cfg.fingerprint()
    assert cf.load_config(path, {"attack.M": "4"}).fingerprint() != cfg.fingerprint()
    assert cf.build_config(cf.parse_lines(cfg.to_text())).to_text() == cfg.to_text()


@pytest.mark.parametrize("pairs", [
    {"attack.bogus": "1"}, {"attack.M": "many"}, {"attack.M": "0"}, {"data.kind": "idx", "data.images": "/nope"},
    {"zoo.victims": "convnet:8x16"}, {"grid.variants": "plain,turbo"}, {"posterior.param_kind": "swag",
                                                                          "finetune.enabled": "false"},
])
def test_config_errors(pairs):
    with pytest.raises(cf.ConfigError):
        cf.load_config(None, pairs)


def test_config_line_without_equals(tmp_path):
    (tmp_path / "c").write_text("attack.M 5\n")
    with pytest.raises(cf.ConfigError, match=":1:"):
        cf.load_config(tmp_path / "c")


def test_minimal_experiment(tmp_path):
    cfg = cf.load_config(None, {**MINIMAL, "out": str(tmp_path / "a")})
    t0 = time.perf_counter()
    out = hn.run_experiment(cfg)
    assert time.perf_counter() - t0 < 60
    summary = hn.read_csv(out / "summary.csv")
    assert len(summary) == 8
    assert {(r["variant"], r["finetuned"]) for r in summary} == {
        (v, f) for v in cf.VARIANTS for f in ("true", "false")}
    rows = hn.read_csv(out / "results.csv")
    assert list(rows[0]) == list(hn.RESULT_FIELDS) and len(rows) == 8
    assert len(hn.read_csv(out / "sampling.csv")) == 4
    assert (out / "MANIFEST").read_text().startswith("complete=true")
    assert (out / "seed0" / "adv" / "joint-ft-images.idx").is_file()
    again = hn.run_experiment(cf.load_config(None, {**MINIMAL, "out": str(tmp_path / "b")}))
    for name in ("results.csv", "sampling.csv", "summary.csv", "results.json"):
        assert (out / name).read_bytes() == (again / name).read_bytes()


def test_stage_failure_is_named_and_partial(tmp_path):
    bad = tmp_path / "bad.idx"
    bad.write_bytes(b"not an idx file")
    cfg = cf.load_config(None, {**MINIMAL, "data.kind": "idx", "data.images": str(bad),
                                "data.labels": str(bad), "out": str(tmp_path / "o")})
    with pytest.raises(hn.StageFailure) as info:
        hn.run_experiment(cfg)
    assert info.value.stage == "seed0:data"
    manifest = (tmp_path / "o" / "MANIFEST").read_text()
    assert manifest.startswith("complete=false") and "seed0:data=failed" in manifest


def test_swag_parameter_posterior_keeps_inputs_isotropic(fitted):
    ds, m = fitted
    cfg = cf.load_config(None, {"posterior.param_kind": "swag", "posterior.input_kind": "trajectory"})
    res = hn.run_finetune(cfg, m, ds, 0)
    ps = hn.make_posteriors(cfg, m, res.model, hn.swag_moments(res))
    assert ps.param.mode == "swag" and ps.trajectory_alpha is None
    assert np.array_equal(ps.model.params, ps.param.mean)
    cfg.posterior.allow_swag_both = True
    assert hn.make_posteriors(cfg, m, res.model, hn.swag_moments(res)).trajectory_alpha == 25.0


def test_paired_gap_and_summary():
    rows = []
    for seed, (a, b) in enumerate([(0.5, 0.2), (0.6, 0.3), (0.4, 0.3)]):
        for variant, rate in (("joint", a), ("plain", b)):
            rows.append({"variant": variant, "victim": "v", "seed": seed, "success_rate": rate})
    avg = hn.per_seed_average(rows)
    gap, se = hn.paired_gap(avg, "joint", "plain")
    assert gap == pytest.approx(0.7 / 3) and se == pytest.approx(np.std([0.3, 0.3, 0.1], ddof=1) / np.sqrt(3))
    assert [r["variant"] for r in hn.summarize(rows)] == ["plain", "joint"]
