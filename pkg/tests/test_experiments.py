import csv
from dataclasses import replace

import numpy as np
import pytest

import tdda.trainer as trainer_mod
from tdda.config import ConfigError, ExperimentConfig, build_config, load_config, parse_lines
from tdda.experiments import (ABLATION_ARMS, ArmSummary, SeedRunError, arm_configs,
                              export_embeddings, load_domains, run_ablation_suite,
                              run_discriminator_comparison, run_experiment)
from tdda.gradcheck import (KINK_MARGIN, check_term, draw_problems, kink_distance,
                            random_problem, run_gradcheck)
from tdda.networks import load_checkpoint
from tdda.autodiff import Tape, finite_diff_grad
from tdda.objectives import LossGraph
from tdda.trainer import Model, TrainConfig, predict, train

TINY = dict(latent_dim=2, encoder_hidden=(8,), classifier_hidden=(6,), task_disc_hidden=(6,),
            binary_disc_hidden=(6,), batch_size=8, epochs=2)


def tiny_experiment(tmp_path, **kw):
    train_kw = {k: kw.pop(k) for k in list(kw) if k in TrainConfig.__dataclass_fields__}
    return ExperimentConfig(train=TrainConfig(**{**TINY, **train_kw}), n_points=64,
                            out=str(tmp_path), **kw)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- config files --------------------------------------------------------------------

def test_parse_lines_types_and_comments():
    values = parse_lines("""
        # comment line
        lambda_q = 0.5   # trailing comment
        encoder_hidden = 32, 16
        source_reg = off
        seeds = 3,4
        dataset = two_moons
    """)
    assert values == {"lambda_q": 0.5, "encoder_hidden": (32, 16), "source_reg": False,
                      "seeds": (3, 4), "dataset": "two_moons"}


@pytest.mark.parametrize("text, match", [
    ("lamda_q = 1", "unknown"),
    ("epochs = many", "bad value"),
    ("just words", "key = value"),
    ("source_reg = maybe", "bad value"),
])
def test_parse_lines_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_lines(text)


def test_flags_override_file(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("epochs = 7\nlambda_h = 2.0\n")
    cfg = load_config(path, {"epochs": 9})
    assert cfg.train.epochs == 9 and cfg.train.lambda_h == 2.0


def test_config_validation():
    with pytest.raises(ConfigError):
        build_config({"seeds": ()})
    with pytest.raises(ConfigError):
        build_config({"dataset": "mnist"})
    with pytest.raises(ConfigError):
        build_config({"dataset": "idx"})
    with pytest.raises(ConfigError):
        build_config({"batch_size": 0})


def test_echo_round_trips():
    cfg = build_config({"lambda_q": 0.25, "seeds": (1, 2), "translation": (0.5, -1.0),
                        "target_reg": False, "update_order": ("F", "D", "h", "Q")})
    assert load_config(None, parse_lines(cfg.echo())) == cfg


# -- experiments ---------------------------------------------------------------------

def test_run_experiment_bookkeeping(tmp_path):
    cfg = tiny_experiment(tmp_path, seeds=(0, 1, 2, 3, 4), save_model=False)
    summary = run_experiment(cfg)
    histories = sorted(p.name for p in tmp_path.glob("history_seed*.csv"))
    assert histories == [f"history_seed{s}.csv" for s in range(5)]
    rows = read_rows(tmp_path / "summary.csv")
    assert len(rows) == 1 and rows[0]["n_seeds"] == "5"
    assert float(rows[0]["mean_target_acc"]) == summary.mean
    echo = (tmp_path / "history_seed3.config").read_text()
    assert "seed = 3\n" in echo and "seeds = 3\n" in echo
    assert load_config(None, parse_lines(echo)).train.seed == 3


def test_rerun_identical(tmp_path):
    a = run_experiment(tiny_experiment(tmp_path / "a", seeds=(0, 1)))
    b = run_experiment(tiny_experiment(tmp_path / "b", seeds=(0, 1)))
    assert a.target_accs == b.target_accs
    for name in ("summary.csv", "history_seed1.csv", "model_seed0.params"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_summary_arithmetic():
    s = ArmSummary("x", (0, 1), (0.9, 1.0), (1.0, 1.0))
    assert abs(s.mean - 0.95) < 1e-15
    assert abs(s.std - np.std([0.9, 1.0], ddof=1)) < 1e-15
    assert ArmSummary("x", (0,), (0.7,), (1.0,)).std == 0.0


def test_seed_context_on_failure(tmp_path):
    cfg = tiny_experiment(tmp_path, seeds=(4,), batch_size=500)
    with pytest.raises(SeedRunError, match="seed 4"):
        run_experiment(cfg)


def test_ablation_arms(tmp_path):
    cfg = tiny_experiment(tmp_path, seeds=(0,), save_model=False)
    summaries = run_ablation_suite(cfg)
    assert [s.arm for s in summaries] == ["full", "wo-s", "wo-t", "wo-st"]
    rows = read_rows(tmp_path / "wo-st" / "history_seed0.csv")
    steps = [r for r in rows if r["kind"] == "step"]
    assert all(float(r[t]) == 0.0 for r in steps for t in ("adv_q", "entropic", "smooth"))
    assert len(read_rows(tmp_path / "summary.csv")) == 4


def test_arms_differ_only_in_switches(tmp_path):
    cfg = tiny_experiment(tmp_path)
    base = cfg.train.to_dict()
    for name, arm in arm_configs(cfg, ABLATION_ARMS).items():
        diff = {k for k, v in arm.train.to_dict().items() if base[k] != v}
        assert diff == set(ABLATION_ARMS[name])
        assert replace(arm, train=cfg.train) == cfg


def test_discriminator_comparison_controlled(tmp_path, monkeypatch):
    seen = []
    real = trainer_mod.batch_iterator

    def recording(n, batch_size, rng):
        batches = real(n, batch_size, rng)
        seen.append(np.concatenate(batches).tolist())
        return batches

    monkeypatch.setattr(trainer_mod, "batch_iterator", recording)
    cfg = tiny_experiment(tmp_path, seeds=(0,), save_model=False)
    summaries = run_discriminator_comparison(cfg)
    assert [s.arm for s in summaries] == ["task-d", "adv-d"]
    half = len(seen) // 2
    assert half > 0 and seen[:half] == seen[half:]


def test_identical_data_across_arms(tmp_path):
    cfg = tiny_experiment(tmp_path)
    for arm_cfg in arm_configs(cfg, ABLATION_ARMS).values():
        s, t = load_domains(arm_cfg, 3)
        s0, t0 = load_domains(cfg, 3)
        assert s.X.tobytes() == s0.X.tobytes() and t.X.tobytes() == t0.X.tobytes()


def test_export_embeddings(tmp_path):
    cfg = tiny_experiment(tmp_path)
    source, target = load_domains(cfg, 0)
    model, _ = train(cfg.train, source, target)
    export_embeddings(model, (source, target), tmp_path / "a.csv")
    export_embeddings(model, (source, target), tmp_path / "b.csv")
    rows = list(csv.reader(open(tmp_path / "a.csv")))
    assert len(rows) == 1 + len(source) + len(target)
    assert all(len(r) == cfg.train.latent_dim + 3 for r in rows)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert {r[-3] for r in rows[1:]} == {"source", "target"}


def test_checkpoint_reproduces_predictions(tmp_path):
    cfg = tiny_experiment(tmp_path, seeds=(0,))
    run_experiment(cfg)
    spec, params = load_checkpoint(tmp_path / "model_seed0.params")
    source, target = load_domains(cfg, 0)
    model, _ = train(cfg.train, source, target)
    assert np.array_equal(predict(Model(spec, params), target.X), predict(model, target.X))


# -- gradient audit ------------------------------------------------------------------

def test_gradcheck_small_run():
    results, _ = run_gradcheck(3, seed=1)
    assert len(results) == 27
    assert all(r.passed() for r in results)


def test_gradcheck_detects_wrong_gradient():
    spec, params, batch = random_problem(0)
    # the pinned oracle must disagree with a gradient that ignores stop-gradients
    g = LossGraph(spec, ("teach",))
    g.gradient("teach", params, batch)
    tape = g.tape
    h = {k: v for k, v in params.items() if k.startswith("h.")}

    def unpinned(p):
        tape.forward({**params, **p, **batch.bindings(spec.n_classes)})
        return tape.value(g.nodes["teach"])[0, 0]

    leaked = finite_diff_grad(unpinned, h)
    assert any(np.abs(v).max() > 1e-6 for v in leaked.values())
    _, err, _ = check_term(spec, params, batch, "teach")
    assert err < 1e-4


def test_kink_distance_flags_breakpoints():
    t = Tape()
    t.l1_diff(t.leaky_relu(t.input("a")), t.input("b"))
    t.forward({"a": np.array([[0.5, -2.0]]), "b": np.array([[0.5, 1.0]])})
    assert t.kink_distance() == 0.0
    t.forward({"a": np.array([[0.5, -2.0]]), "b": np.array([[0.7, 1.0]])})
    assert abs(t.kink_distance() - 0.2) < 1e-12


def test_gradcheck_redraws_near_kinks():
    problems, rejected = draw_problems(20, seed=3)
    assert len(problems) == 20 and rejected >= 0
    assert all(kink_distance(*p) >= KINK_MARGIN for p in problems)
