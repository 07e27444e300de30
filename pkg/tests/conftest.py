import numpy as np
import pytest

from tdda.networks import ModelSpec, flatten, init_model_params
from tdda.objectives import Batch


def tiny_spec(d=3, k=3, p=2):
    return ModelSpec.default(d, k, p, encoder_hidden=(4,), classifier_hidden=(3,),
                             task_disc_hidden=(3,), binary_disc_hidden=(3,))


def random_batch(spec, n=4, seed=0, sigma_scale=1.0):
    rng = np.random.default_rng(seed)
    p = spec.latent_dim
    return Batch(xs=rng.normal(size=(n, spec.input_dim)),
                 ys=rng.integers(0, spec.n_classes, size=n),
                 xt=rng.normal(size=(n, spec.input_dim)),
                 eps_s=sigma_scale * rng.normal(size=(n, p)),
                 eps_t=sigma_scale * rng.normal(size=(n, p)),
                 eps_t2=sigma_scale * rng.normal(size=(n, p)),
                 z_prior=rng.normal(size=(n, p)))


def with_constant_head(params, spec, group, logits):
    """Zero the last layer of ``group`` and put ``logits`` in its bias, so the
    head emits the same logits for every row."""
    params = {g: dict(v) for g, v in params.items()}
    last = spec.group(group).n_layers - 1
    W = params[group][f"{group}.W{last}"]
    params[group][f"{group}.W{last}"] = np.zeros_like(W)
    params[group][f"{group}.b{last}"] = np.asarray(logits, dtype=np.float64).reshape(1, -1)
    return params


@pytest.fixture
def spec():
    return tiny_spec()


@pytest.fixture
def params(spec):
    return init_model_params(spec, 0)


@pytest.fixture
def flat_params(params):
    return flatten(params)


# -- acceptance reporting --------------------------------------------------------------

_CRITERIA: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    _CRITERIA[number] = (passed, detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")
