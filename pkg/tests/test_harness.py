import json
import sys
import time

import numpy as np
import pytest

from freedom.config import (ConfigError, ExperimentConfig, config_from_text, config_to_text,
                            load_config)
from freedom.harness import checkpoint as ckpt
from freedom.harness import cli, synthetic
from freedom.harness.datafiles import DataError, load_labels, load_matrix
from freedom.harness.experiment import (EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK,
                                        RunPaths, evaluate, resolve_seed, run_experiment)
from freedom.harness.metrics import (MetricsRow, MetricsWriter, read_metrics, read_summary,
                                     write_metrics)
from freedom.harness.probe import fit_softmax_regression, probe_accuracy
from freedom.model import DeployedModel, classify
from freedom.source import LabeledPool, NumericalError, SourceTrainer, build_model
from freedom.target import TargetAdapter

SMOKE = """\
preset = separable3
samples_per_cell = 20
target_samples_per_class = 30
class_dim = 2
style_dim = 2
hidden = 8
batch_size = 16
beta_low = 0.6
epochs = 3
pretrain_epochs = 1
warmup_epochs = 1
adapt_epochs = 2
mc_samples = 4
"""


@pytest.fixture
def smoke_cfg(tmp_path):
    p = tmp_path / "smoke.cfg"
    p.write_text(SMOKE)
    return p


@pytest.fixture(scope="module")
def small_scenario():
    spec = synthetic.preset("separable3", 0)
    spec.samples_per_cell = 15
    spec.target_samples_per_class = 20
    return synthetic.generate(spec)


# -- synthetic generator ---------------------------------------------------------------

def test_degenerate_spec_gives_class_centers():
    d = 4
    st = synthetic.Style(np.eye(d), np.zeros(d), "a")
    spec = synthetic.SyntheticSpec(3, d, 2.0, 0.0, [st], st, samples_per_cell=5,
                                   target_samples_per_class=2, seed=3)
    sc = synthetic.generate(spec)
    centers = sc.oracle["centers"]
    assert np.array_equal(sc.source_x, centers[sc.source_y])
    assert np.array_equal(sc.target_x, centers[sc.oracle["target_y"]])


def test_centers_equidistant():
    c = synthetic.class_centers(3, 8, 2.25, np.random.default_rng(0))
    d = np.linalg.norm(c[:, None] - c[None], axis=-1)[np.triu_indices(3, 1)]
    assert np.allclose(d, 2.25)


def test_generation_deterministic():
    a = synthetic.generate(synthetic.preset("latent4", 4))
    b = synthetic.generate(synthetic.preset("latent4", 4))
    for f in ("source_x", "source_y", "source_test_x", "target_x"):
        assert np.array_equal(getattr(a, f), getattr(b, f))
    c = synthetic.generate(synthetic.preset("latent4", 5))
    assert not np.array_equal(a.source_x, c.source_x)


@pytest.mark.parametrize("name, styles, domains", [("separable3", 3, 3), ("latent4", 4, 3),
                                                   ("hardshift", 3, 3)])
def test_presets(name, styles, domains):
    sc = synthetic.generate(synthetic.preset(name, 0))
    assert sc.oracle["n_latent_styles"] == styles and sc.oracle["n_domains"] == domains
    assert sc.source_x.shape[1] == 8 and set(np.unique(sc.source_y)) == {0, 1, 2}
    assert len(sc.source_test_x) == round(0.2 * 100 * 3 * styles)


def test_n_domains_override():
    spec = synthetic.preset("separable3", 0, n_domains=5)
    assert len(spec.source_styles) == 5


def test_unknown_preset():
    with pytest.raises(ValueError, match="unknown preset"):
        synthetic.preset("nope")


@pytest.mark.parametrize("change, match", [
    (dict(spread=-1.0), "non-negative"),
    (dict(n_classes=1), "at least 2"),
    (dict(holdout_fraction=1.0), "holdout"),
    (dict(samples_per_cell=0), "positive"),
])
def test_invalid_specs(change, match):
    spec = synthetic.preset("separable3", 0)
    for k, v in change.items():
        setattr(spec, k, v)
    with pytest.raises(ValueError, match=match):
        synthetic.generate(spec)


def test_singular_transform_rejected():
    spec = synthetic.preset("separable3", 0)
    spec.source_styles[1].transform = np.zeros((8, 8))
    with pytest.raises(ValueError, match="invertible"):
        synthetic.generate(spec)


def test_trainer_inputs_hide_style_identity(small_scenario):
    # the pool handed to trainers holds inputs and class labels only
    pool = LabeledPool(small_scenario.source_x, small_scenario.source_y)
    assert set(vars(pool)) == {"x", "y"}
    assert "source_styles" in small_scenario.oracle


def test_identical_styles_give_one_component():
    spec = synthetic.preset("separable3", 0)
    same = synthetic.Style(np.eye(8), spec.source_styles[0].offset, "a")
    spec.source_styles = [same, synthetic.Style(same.transform, same.offset, "b")]
    spec.samples_per_cell = 60
    sc = synthetic.generate(spec)
    cfg = ExperimentConfig.desk(epochs=15)
    rng = np.random.default_rng(0)
    tr = SourceTrainer(build_model(8, 3, cfg, rng), LabeledPool(sc.source_x, sc.source_y),
                       cfg, rng).run()
    assert tr.fit_style_prior().effective_components == 1


# -- evaluation and probe --------------------------------------------------------------

def _constant_model(logits):
    from freedom.autodiff import Mlp, Tensor
    k = len(logits)
    enc = Mlp([Tensor(np.zeros((2, 2 * k)), True)], [Tensor(np.zeros(2 * k), True)],
              ["identity"], "class_encoder")
    cls = Mlp([Tensor(np.zeros((k, k)), True)], [Tensor(np.asarray(logits, float), True)],
              ["identity"], "classifier")
    return DeployedModel(enc, cls)


def test_evaluate_all_correct():
    m = _constant_model([0.0, 3.0, 0.0])
    assert evaluate(m, np.zeros((7, 2)), np.ones(7, dtype=int)) == 1.0


def test_evaluate_random_predictor_near_third():
    rng = np.random.default_rng(0)
    m = _constant_model([0.0, 3.0, 0.0])
    y = rng.integers(0, 3, 3000)
    acc = evaluate(m, np.zeros((3000, 2)), y)
    assert abs(acc - 1 / 3) < 3 * np.sqrt(2 / 9 / 3000)


def test_evaluate_length_mismatch():
    with pytest.raises(DataError):
        evaluate(_constant_model([0.0, 1.0]), np.zeros((3, 2)), np.zeros(2, dtype=int))


def test_probe_separable_and_random():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 3, 600)
    z = np.eye(3)[y] * 4 + rng.normal(size=(600, 3))
    assert probe_accuracy(z, y) > 0.95
    noise = rng.normal(size=(600, 3))
    assert abs(probe_accuracy(noise, y) - 1 / 3) < 0.08


def test_probe_solution_is_stationary():
    rng = np.random.default_rng(1)
    z, y = rng.normal(size=(200, 2)), rng.integers(0, 3, 200)
    w, b = fit_softmax_regression(z, y, 3, l2=1e-2)
    logits = z @ w + b
    p = np.exp(logits - logits.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    g = (p - np.eye(3)[y]) / len(y)
    assert np.abs(z.T @ g + 1e-2 * w).max() < 1e-4 and np.abs(g.sum(0)).max() < 1e-4


def test_probe_rejects_bad_split():
    with pytest.raises(ValueError):
        probe_accuracy(np.zeros((4, 2)), np.zeros(4, dtype=int), train_fraction=0.0)


# -- config ------------------------------------------------------------------------------

def test_config_text_round_trip(tmp_path):
    cfg = ExperimentConfig.desk(seed=9, alpha_conf1=(2, 3, 4), refilter_per_batch=True)
    back, extra = config_from_text(config_to_text(cfg))
    assert back == cfg and extra == {}
    p = tmp_path / "c.cfg"
    p.write_text(config_to_text(cfg))
    assert load_config(p)[0] == cfg


@pytest.mark.parametrize("text", ["nonsense_key = 1", "epochs = many", "beta_low = 9",
                                  "style_head = relu", "confidence_level = 2"])
def test_bad_config_rejected(text):
    with pytest.raises(ConfigError):
        config_from_text(text)


def test_desk_overrides():
    cfg = ExperimentConfig.desk(beta_low=0.2)
    assert (cfg.class_dim, cfg.batch_size, cfg.beta_low) == (3, 16, 0.2)
    assert ExperimentConfig().beta_low == 0.1


def test_seed_precedence(monkeypatch):
    monkeypatch.setenv("FREEDOM_SEED", "7")
    assert resolve_seed(3, 5) == 3
    assert resolve_seed(None, 5) == 5
    assert resolve_seed(None, None) == 7
    monkeypatch.delenv("FREEDOM_SEED")
    assert resolve_seed(None, None) == 0
    monkeypatch.setenv("FREEDOM_SEED", "x")
    with pytest.raises(ConfigError):
        resolve_seed(None, None)


# -- metrics -----------------------------------------------------------------------------

def test_metrics_round_trip(tmp_path):
    rows = [MetricsRow("source", 1, {"recon": 1.25, "ratio": float("nan")}),
            MetricsRow("source", 2, {"recon": 1.0 / 3.0, "ratio": 0.5}),
            MetricsRow("adapt", 1, {"ratio": 1e-300})]
    p = tmp_path / "m.csv"
    write_metrics(p, rows)
    back = read_metrics(p)
    assert len(back) == 3 and all(a.same_as(b) for a, b in zip(rows, back))


def test_metrics_schema_is_stable(tmp_path):
    w = MetricsWriter(tmp_path / "m.csv")
    w.append(MetricsRow("source", 1, {"a": 1.0}))
    with pytest.raises(ValueError, match="changed"):
        w.append(MetricsRow("source", 2, {"b": 1.0}))


def test_metrics_bad_header(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("x,y\n")
    with pytest.raises(ValueError):
        read_metrics(p)


# -- checkpoints ------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained(small_scenario):
    cfg = ExperimentConfig.desk(epochs=2, pretrain_epochs=1, warmup_epochs=1, adapt_epochs=1)
    rng = np.random.default_rng(0)
    pool = LabeledPool(small_scenario.source_x, small_scenario.source_y)
    return SourceTrainer(build_model(8, 3, cfg, rng), pool, cfg, rng).run()


def test_source_checkpoint_round_trip_bitwise(tmp_path, trained, small_scenario):
    p = tmp_path / "s.frdm"
    ckpt.save_source_checkpoint(p, trained)
    pool = LabeledPool(small_scenario.source_x, small_scenario.source_y)
    back = ckpt.restore_source_trainer(p, pool)
    for (n1, a), (n2, b) in zip(trained.model.named_tensors(), back.model.named_tensors()):
        assert n1 == n2 and a.data.tobytes() == b.data.tobytes()
    assert back.rng.bit_generator.state == trained.rng.bit_generator.state
    assert back.optimizer.t == trained.optimizer.t
    for a, b in zip(trained.optimizer.m, back.optimizer.m):
        assert np.array_equal(a, b)
    assert back.cfg == trained.cfg and back.epochs_done == trained.epochs_done
    assert np.array_equal(back.posterior.resp, trained.posterior.resp)


def test_save_is_deterministic(tmp_path, trained):
    ckpt.save_source_checkpoint(tmp_path / "a", trained)
    ckpt.save_source_checkpoint(tmp_path / "b", trained)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_deployed_round_trip(tmp_path, trained, small_scenario):
    from freedom.model import deploy
    d = deploy(trained.model)
    ckpt.save_deployed(tmp_path / "d.frdm", d)
    back = ckpt.load_deployed(tmp_path / "d.frdm")
    assert back.num_parameters() == d.num_parameters()
    x = small_scenario.target_x
    assert np.array_equal(classify(back, x), classify(trained.model, x))


def test_adapter_checkpoint_resume(tmp_path, trained, small_scenario):
    cfg = trained.cfg
    x = small_scenario.target_x
    straight = TargetAdapter(trained.model, x, cfg, np.random.default_rng(4)).run(2)
    half = TargetAdapter(trained.model, x, cfg, np.random.default_rng(4)).run(1)
    ckpt.save_adapter_checkpoint(tmp_path / "a.frdm", half)
    resumed = ckpt.restore_adapter(tmp_path / "a.frdm", x).run(2)
    for (_, a), (_, b) in zip(straight.model.named_tensors(), resumed.model.named_tensors()):
        assert a.data.tobytes() == b.data.tobytes()


@pytest.mark.parametrize("blob, match", [(b"XXXX" + bytes(12), "magic"), (b"FR", "truncated"),
                                         (b"FRDM\x09\x00\x00\x00" + bytes(8), "version")])
def test_corrupt_checkpoints(tmp_path, blob, match):
    p = tmp_path / "bad"
    p.write_bytes(blob)
    with pytest.raises(ckpt.CheckpointError, match=match):
        ckpt.load_arrays(p)


def test_wrong_kind_rejected(tmp_path, trained):
    from freedom.model import deploy
    ckpt.save_deployed(tmp_path / "d", deploy(trained.model))
    with pytest.raises(ckpt.CheckpointError, match="expected a source"):
        ckpt.load_source_model(tmp_path / "d")


def test_integer_arrays_survive(tmp_path):
    ckpt.save_arrays(tmp_path / "i", {"k": np.arange(5), "f": np.array([0.1])}, {"x": 1})
    arrays, meta = ckpt.load_arrays(tmp_path / "i")
    assert arrays["k"].dtype == np.int64 and list(arrays["k"]) == list(range(5))
    assert meta == {"x": 1}


# -- data files --------------------------------------------------------------------------

def test_csv_and_npy_inputs(tmp_path):
    np.savetxt(tmp_path / "x.csv", np.arange(6.0).reshape(3, 2), delimiter=",")
    np.save(tmp_path / "y.npy", np.array([0.0, 2.0, 1.0]))
    assert load_matrix(tmp_path / "x.csv").shape == (3, 2)
    assert load_labels(tmp_path / "y.npy").dtype == np.int64


def test_non_finite_and_bad_labels(tmp_path):
    np.save(tmp_path / "x.npy", np.array([[np.nan, 1.0]]))
    np.save(tmp_path / "y.npy", np.array([0.5]))
    with pytest.raises(DataError):
        load_matrix(tmp_path / "x.npy")
    with pytest.raises(DataError):
        load_labels(tmp_path / "y.npy")
    with pytest.raises(DataError):
        load_matrix(tmp_path / "missing.npy")


# -- experiment and CLI ---------------------------------------------------------------------

def test_smoke_run_under_a_minute(tmp_path, smoke_cfg):
    t0 = time.perf_counter()
    res = run_experiment(smoke_cfg, tmp_path / "run")
    assert time.perf_counter() - t0 < 60
    assert res.status == EXIT_OK, res.message
    paths = RunPaths(tmp_path / "run")
    for p in (paths.source_ckpt, paths.adapted_ckpt, paths.deployed_ckpt, paths.metrics,
              paths.summary):
        assert p.exists()
    rec = read_summary(paths.summary)
    assert rec["deployed_parameters"] == res.record["deployed_parameters"]
    phases = {r.phase for r in read_metrics(paths.metrics)}
    assert phases == {"pretrain", "source", "warmup", "adapt"}


def test_same_seed_same_summary(tmp_path, smoke_cfg):
    a = run_experiment(smoke_cfg, tmp_path / "a", seed=2)
    run_experiment(smoke_cfg, tmp_path / "b", seed=2)
    assert (tmp_path / "a" / "summary.json").read_bytes() == (tmp_path / "b" / "summary.json").read_bytes()
    assert (tmp_path / "a" / "deployed.frdm").read_bytes() == (tmp_path / "b" / "deployed.frdm").read_bytes()
    assert a.record["config"]["seed"] == 2


def test_missing_source_checkpoint(tmp_path, smoke_cfg):
    run_experiment(smoke_cfg, tmp_path / "r", stages=("gen",))
    res = run_experiment(smoke_cfg, tmp_path / "r", stages=("adapt-target",))
    assert res.status == EXIT_DATA
    assert res.stage == "adapt-target" and "source checkpoint missing" in res.message


def test_config_error_status(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("epochs = -3\n")
    res = run_experiment(p, tmp_path / "r")
    assert res.status == EXIT_CONFIG and res.stage == "config"


def test_adaptation_never_touches_source_files(tmp_path, smoke_cfg):
    run_experiment(smoke_cfg, tmp_path / "r", stages=("gen", "train-source"))
    opened = []
    watch = {"active": True}

    def hook(event, args):
        if watch["active"] and event == "open" and isinstance(args[0], (str, bytes)):
            opened.append(str(args[0]))
        if watch["active"] and event == "os.listdir":
            opened.append(str(args[0]))

    sys.addaudithook(hook)
    try:
        res = run_experiment(smoke_cfg, tmp_path / "r", stages=("adapt-target",))
    finally:
        watch["active"] = False
    assert res.status == EXIT_OK
    data = str(tmp_path / "r" / "data")
    touched = [p for p in opened if p.startswith(data)]
    assert touched == [str(tmp_path / "r" / "data" / "target_x.npy")]
    assert not any("source_" in p for p in opened)


def _cli(args, capsys):
    code = cli.main([str(a) for a in args])
    return code, capsys.readouterr()


def test_cli_staged_commands(tmp_path, smoke_cfg, capsys):
    spec = tmp_path / "spec.cfg"
    spec.write_text("preset = separable3\nsamples_per_cell = 10\ntarget_samples_per_class = 10\n")
    data, src, adp = tmp_path / "data", tmp_path / "s.frdm", tmp_path / "a.frdm"
    assert _cli(["gen-data", "--spec", spec, "--out", data, "--seed", 1], capsys)[0] == EXIT_OK
    code, out = _cli(["train-source", "--config", smoke_cfg, "--data", data, "--out", src,
                      "--metrics", tmp_path / "sm.csv"], capsys)
    assert code == EXIT_OK and json.loads(out.out)["epochs"] == 3
    code, out = _cli(["adapt-target", "--config", smoke_cfg, "--source-ckpt", src,
                      "--target", data / "target_x.npy", "--out", adp], capsys)
    assert code == EXIT_OK and json.loads(out.out)["regime"] in ("conf1", "conf2")
    code, out = _cli(["deploy", "--ckpt", adp, "--out", tmp_path / "d.frdm"], capsys)
    assert code == EXIT_OK
    code, out = _cli(["eval", "--ckpt", tmp_path / "d.frdm", "--data", data / "target_x.npy",
                      "--labels", data / "oracle" / "target_y.npy"], capsys)
    assert code == EXIT_OK and 0.0 <= json.loads(out.out)["accuracy"] <= 1.0
    code, out = _cli(["export-embeddings", "--ckpt", src, "--data", data / "target_x.npy",
                      "--out", tmp_path / "e.csv"], capsys)
    assert code == EXIT_OK
    header = (tmp_path / "e.csv").read_text().splitlines()[0]
    assert header == "class_0,class_1,style_0,style_1"


def test_cli_resume_equals_straight_through(tmp_path, capsys):
    spec = tmp_path / "spec.cfg"
    spec.write_text("preset = separable3\nsamples_per_cell = 10\n")
    base = SMOKE.replace("epochs = 3\n", "")
    for n in (2, 3):
        (tmp_path / f"e{n}.cfg").write_text(base + f"epochs = {n}\n")
    data = tmp_path / "data"
    _cli(["gen-data", "--spec", spec, "--out", data], capsys)
    _cli(["train-source", "--config", tmp_path / "e3.cfg", "--data", data, "--out", tmp_path / "full"], capsys)
    _cli(["train-source", "--config", tmp_path / "e2.cfg", "--data", data, "--out", tmp_path / "part"], capsys)
    _cli(["train-source", "--config", tmp_path / "e3.cfg", "--data", data, "--out", tmp_path / "res",
          "--resume", tmp_path / "part"], capsys)
    assert (tmp_path / "full").read_bytes() == (tmp_path / "res").read_bytes()


def test_cli_exit_codes(tmp_path, smoke_cfg, capsys, monkeypatch):
    bad = tmp_path / "bad.cfg"
    bad.write_text("what = 1\n")
    code, out = _cli(["run", "--config", bad, "--out", tmp_path / "r"], capsys)
    assert code == EXIT_CONFIG and "unknown config keys" in out.err
    code, out = _cli(["adapt-target", "--config", smoke_cfg, "--source-ckpt", tmp_path / "none",
                      "--target", tmp_path / "t.npy", "--out", tmp_path / "o"], capsys)
    assert code == EXIT_DATA and "source checkpoint missing" in out.err
    code, out = _cli(["train-source", "--config", smoke_cfg, "--data", tmp_path / "nodata",
                      "--out", tmp_path / "o"], capsys)
    assert code == EXIT_DATA

    def explode(self, *a, **k):
        raise NumericalError("non-finite source loss at epoch 1")

    monkeypatch.setattr(SourceTrainer, "run", explode)
    code, out = _cli(["run", "--config", smoke_cfg, "--out", tmp_path / "n"], capsys)
    assert code == EXIT_NUMERIC and "train-source" in out.err


def test_cli_report(tmp_path, smoke_cfg, capsys):
    pytest.importorskip("matplotlib")
    run_experiment(smoke_cfg, tmp_path / "r")
    code, out = _cli(["report", "--run", tmp_path / "r"], capsys)
    assert code == EXIT_OK
    for name in ("source_losses.png", "adaptation.png"):
        assert (tmp_path / "r" / "figures" / name).read_bytes()[:4] == b"\x89PNG"
    code, out = _cli(["report", "--run", tmp_path / "nothing"], capsys)
    assert code == EXIT_DATA


def test_gen_data_accepts_run_config(tmp_path, smoke_cfg, capsys):
    code, _ = _cli(["gen-data", "--spec", smoke_cfg, "--out", tmp_path / "d", "--seed", 4], capsys)
    assert code == EXIT_OK
    ref = synthetic.preset("separable3", 4)
    ref.samples_per_cell, ref.target_samples_per_class = 20, 30
    assert np.array_equal(np.load(tmp_path / "d" / "target_x.npy"), synthetic.generate(ref).target_x)
