import numpy as np
import pytest

from tdda.autodiff import AdamState, adam_update, finite_diff_grad, make_rng, relative_error
from tdda.datasets import DomainDataset, gen_gaussian_mixture, two_moons_task
from tdda.networks import flatten, init_model_params
from tdda.objectives import LossGraph
from tdda.trainer import (HISTORY_TERMS, Model, TrainConfig, Trainer, TrainingAborted, _streams,
                          draw_batch, evaluate_accuracy, predict, predict_proba, train)

from conftest import random_batch, tiny_spec, with_constant_head

TINY = dict(latent_dim=2, encoder_hidden=(8,), classifier_hidden=(6,), task_disc_hidden=(6,),
            binary_disc_hidden=(6,), batch_size=8)


def tiny_cfg(**kw):
    return TrainConfig(**{**TINY, "epochs": 2, **kw})


@pytest.fixture(scope="module")
def moons():
    return two_moons_task(64, 0.1, 35.0, seed=0)


def snapshot(params):
    """Bytes of every array, for either grouped or flat parameter dicts."""
    if params and isinstance(next(iter(params.values())), dict):
        params = flatten(params)
    return {k: v.tobytes() for k, v in params.items()}


def test_config_validation():
    for bad in (dict(batch_size=0), dict(lambda_q=-1.0), dict(discriminator="both"),
                dict(update_order=("D", "D", "Q", "h")), dict(epochs=-1)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_epochs_zero_is_initialization(moons):
    cfg = tiny_cfg(epochs=0, seed=3)
    model, history = train(cfg, *moons)
    init = init_model_params(model.spec, _streams(3)[0])
    assert snapshot(model.params) == snapshot(init)
    assert history.steps == [] and history.epochs == []


def test_record_count_matches_steps(moons):
    _, history = train(tiny_cfg(epochs=3), *moons)
    assert len(history.steps) == 3 * (64 // 8)
    assert [r["step"] for r in history.steps] == list(range(24))
    assert len(history.epochs) == 3


def test_determinism(moons, tmp_path):
    cfg = tiny_cfg(seed=11)
    (m1, h1), (m2, h2) = train(cfg, *moons), train(cfg, *moons)
    assert h1 == h2
    assert snapshot(m1.params) == snapshot(m2.params)
    h1.write_csv(tmp_path / "a.csv")
    h2.write_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_seed_changes_run(moons):
    _, a = train(tiny_cfg(seed=0), *moons)
    _, b = train(tiny_cfg(seed=1), *moons)
    assert a.steps != b.steps


def test_dataset_smaller_than_batch(moons):
    s, t = moons
    with pytest.raises(ValueError, match="smaller"):
        train(tiny_cfg(batch_size=100), s, t)


def test_unlabeled_source_rejected(moons):
    s, t = moons
    with pytest.raises(ValueError):
        train(tiny_cfg(), t, t)


def test_non_finite_aborts_with_step(moons):
    # the first update throws every weight out to ~1e300
    with pytest.raises(TrainingAborted) as info:
        train(tiny_cfg(learning_rate=1e300), *moons)
    assert info.value.step == 0


# -- single steps --------------------------------------------------------------------

def _setup(cfg=None, seed=0):
    cfg = cfg or tiny_cfg()
    spec = cfg.model_spec(3, 3)
    trainer = Trainer(cfg, spec)
    return trainer, trainer.init_state(seed), random_batch(spec, n=8, seed=seed)


@pytest.mark.parametrize("discriminator", ["task", "binary"])
@pytest.mark.parametrize("group", ["D", "F", "Q", "h"])
def test_step_freezes_other_groups(group, discriminator):
    trainer, state, batch = _setup(tiny_cfg(discriminator=discriminator))
    new, _ = trainer.step(group, state, batch)
    trained = trainer.trained_group(group)
    before, after = state.params, new.params
    for g in before:
        same = snapshot(before[g]) == snapshot(after[g])
        assert same == (g != trained), g
    # the input state is not mutated
    assert snapshot(state.params) == snapshot(trainer.init_state(0).params)


def test_binary_source_reg_off_returns_state():
    trainer, state, batch = _setup(tiny_cfg(source_reg=False))
    new, values = trainer.step_binary_discriminator(state, batch)
    assert new is state and values == {}


def test_source_reg_off_never_updates_prior_discriminator(moons):
    cfg = tiny_cfg(source_reg=False)
    model, history = train(cfg, *moons)
    init = init_model_params(model.spec, _streams(cfg.seed)[0])
    assert snapshot(model.params["F"]) == snapshot(init["F"])
    assert all(r["adv_f"] == 0.0 and r["adv_q"] == 0.0 for r in history.steps)
    assert any(r["teach"] > 0.0 for r in history.steps)


def test_target_reg_off_bookkeeping(moons):
    _, history = train(tiny_cfg(target_reg=False), *moons)
    assert all(r["entropic"] == 0.0 and r["smooth"] == 0.0 for r in history.steps)
    assert all(r["adv_q"] > 0.0 for r in history.steps)


def test_binary_discriminator_bookkeeping(moons):
    _, history = train(tiny_cfg(discriminator="binary"), *moons)
    assert all(r["disc"] == 0.0 and r["teach"] == 0.0 for r in history.steps)
    assert all(r["bin_disc"] > 0.0 and r["bin_enc"] > 0.0 for r in history.steps)


def test_full_method_bookkeeping(moons):
    _, history = train(tiny_cfg(), *moons)
    active = ("class", "disc", "teach", "adv_f", "adv_q", "entropic", "smooth")
    assert all(all(r[t] > 0.0 for t in active) for r in history.steps)
    assert all(r["bin_disc"] == 0.0 for r in history.steps)


def test_prior_draws_differ_every_step():
    rng = make_rng(0)
    x = np.zeros((4, 2))
    a, b = draw_batch(rng, x, np.zeros(4, int), x, 3), draw_batch(rng, x, np.zeros(4, int), x, 3)
    assert not np.array_equal(a.z_prior, b.z_prior)
    assert not np.array_equal(a.eps_t, a.eps_t2)


def test_encoder_step_descends():
    # objective on the same batch and noise, before and after one update
    hits = 0
    for trial in range(100):
        cfg = tiny_cfg(learning_rate=1e-3)
        trainer, state, batch = _setup(cfg, seed=trial)
        before = trainer.objective("Q", state, batch)
        new, _ = trainer.step_encoder(state, batch)
        hits += trainer.objective("Q", new, batch) <= before
    assert hits >= 80


def _supervised_step(trainer, state, batch, group):
    graph = LossGraph(trainer.spec, (), {"class": 1.0})
    _, grads = graph.gradient("objective", flatten(state.params), batch, wrt=list(state.params[group]))
    return adam_update(state.params[group], grads, state.optim[group])[0]


def test_encoder_step_degenerates_to_supervised():
    trainer, state, batch = _setup(tiny_cfg(lambda_q=0.0, discriminator="none"))
    assert trainer.weights["Q"] == {"class": 1.0}
    new, values = trainer.step_encoder(state, batch)
    expected = _supervised_step(trainer, state, batch, "Q")
    assert snapshot(new.params["Q"]) == snapshot(expected)
    assert values["class"] == LossGraph(trainer.spec, ("class",)).evaluate(
        flatten(state.params), batch)["class"]


def test_classifier_step_degenerates_to_supervised():
    trainer, state, batch = _setup(tiny_cfg(target_reg=False, lambda_h=1.0))
    new, _ = trainer.step_classifier(state, batch)
    assert snapshot(new.params["h"]) == snapshot(_supervised_step(trainer, state, batch, "h"))


def test_classifier_objective_gradient():
    trainer, state, batch = _setup(seed=4)
    graph = trainer.graphs["h"]
    flat = flatten(state.params)
    h = state.params["h"]
    _, analytic = graph.gradient("objective", flat, batch, wrt=list(h))

    def f(p):
        return graph.evaluate({**flat, **p}, batch)["objective"]

    numeric = finite_diff_grad(f, h)
    for k in h:
        assert relative_error(analytic[k], numeric[k], floor=1e-6) < 1e-4, k


@pytest.mark.parametrize("group, term", [("D", "disc"), ("F", "adv_f")])
def test_discriminators_overfit_one_batch(group, term):
    trainer, state, batch = _setup(tiny_cfg(learning_rate=1e-3), seed=2)
    start = trainer.objective(group, state, batch)
    for _ in range(200):
        state, _ = trainer.step(group, state, batch)
    assert trainer.objective(group, state, batch) < start


def test_task_discriminator_has_k_plus_one_outputs():
    spec = TrainConfig(**TINY).model_spec(2, 10)
    assert spec.task_disc.widths[-1] == 11


# -- prediction and scoring -----------------------------------------------------------

def _model(k=3, seed=0):
    spec = tiny_spec(d=3, k=k, p=2)
    return Model(spec, init_model_params(spec, seed))


def test_predict_ties_go_to_lowest_index():
    m = _model()
    m.params = with_constant_head(m.params, m.spec, "h", np.zeros(3))
    assert predict(m, np.random.default_rng(0).normal(size=(6, 3))).tolist() == [0] * 6


def test_predict_permutation_and_repeatability():
    m = _model(seed=1)
    X = np.random.default_rng(1).normal(size=(40, 3))
    perm = np.random.default_rng(2).permutation(40)
    y = predict(m, X)
    assert np.array_equal(predict(m, X[perm]), y[perm])
    assert np.array_equal(predict(m, X), y)
    assert np.array_equal(np.argmax(predict_proba(m, X), axis=1), y)


def test_predict_width_mismatch():
    with pytest.raises(ValueError):
        predict(_model(), np.ones((2, 4)))


def test_accuracy_exact_cases():
    m = _model(seed=2)
    X = np.random.default_rng(3).normal(size=(30, 3))
    y = predict(m, X)
    assert evaluate_accuracy(m, DomainDataset(X, y)) == 1.0
    assert evaluate_accuracy(m, DomainDataset(X, y).as_target()) == 1.0
    wrong = (y + 1) % 3
    assert evaluate_accuracy(m, DomainDataset(X, wrong)) == 0.0


def test_accuracy_errors():
    m = _model()
    with pytest.raises(ValueError):
        evaluate_accuracy(m, DomainDataset(np.zeros((0, 3)), np.zeros(0, int)))
    with pytest.raises(ValueError):
        evaluate_accuracy(m, DomainDataset(np.zeros((2, 3))))


def test_random_predictor_accuracy():
    # labels drawn independently of the inputs: accuracy of any fixed model is 1/K
    m = _model(k=10, seed=5)
    rng = np.random.default_rng(6)
    X = rng.normal(size=(10_000, 3))
    y = rng.permutation(np.repeat(np.arange(10), 1000))
    assert abs(evaluate_accuracy(m, DomainDataset(X, y)) - 0.1) <= 0.01


def test_supervised_only_fits_separable_problem():
    data = gen_gaussian_mixture(2, 100, [[-1.0, -1.0], [1.0, 1.0]], cov_scale=0.15, seed=0)
    cfg = TrainConfig(epochs=200, learning_rate=2e-4).source_only()
    cfg = TrainConfig(**{**cfg.to_dict(), "lambda_q": 0.0, "lambda_h_prime": 0.0})
    _, history = train(cfg, data, data.as_target())
    assert all(r[t] == 0.0 for r in history.steps for t in HISTORY_TERMS if t != "class")
    assert max(e["source_acc"] for e in history.epochs) >= 0.99
