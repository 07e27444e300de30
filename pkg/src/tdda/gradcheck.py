"""Finite-difference audit of every loss term on random small networks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import finite_diff_grad, relative_error
from .networks import ModelSpec, flatten, init_model_params
from .objectives import Batch, LossGraph

CHECKED_TERMS = ("class", "disc", "teach", "adv_f", "adv_q", "entropic", "smooth",
                 "bin_disc", "bin_enc")


# configurations with a piecewise-op argument closer than this to a breakpoint
# (ten finite-difference steps) are redrawn: a central difference straddling
# a kink measures neither side
KINK_MARGIN = 1e-4


@dataclass(frozen=True)
class GradCheckResult:
    config: int
    term: str
    value: float
    max_rel_error: float
    n_params: int

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def random_problem(seed: int) -> tuple[ModelSpec, dict, Batch]:
    """A small network, parameters and batch with fixed noise, all drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    d, k, p = int(rng.integers(1, 5)), int(rng.integers(2, 6)), int(rng.integers(1, 4))
    widths = lambda: tuple(int(w) for w in rng.integers(2, 6, size=rng.integers(1, 3)))
    spec = ModelSpec.default(d, k, p, encoder_hidden=widths(), classifier_hidden=widths(),
                             task_disc_hidden=widths(), binary_disc_hidden=widths())
    params = flatten(init_model_params(spec, int(rng.integers(2**31))))
    params = {n: v + 0.1 * rng.standard_normal(v.shape) for n, v in params.items()}
    n = int(rng.integers(1, 6))
    batch = Batch(xs=rng.uniform(-1, 1, (n, d)), ys=rng.integers(0, k, n),
                  xt=rng.uniform(-1, 1, (n, d)), eps_s=rng.standard_normal((n, p)),
                  eps_t=rng.standard_normal((n, p)), eps_t2=rng.standard_normal((n, p)),
                  z_prior=rng.standard_normal((n, p)))
    return spec, params, batch


def kink_distance(spec: ModelSpec, params: dict, batch: Batch, terms=CHECKED_TERMS) -> float:
    graph = LossGraph(spec, terms)
    graph.evaluate(params, batch)
    return graph.tape.kink_distance()


def check_term(spec: ModelSpec, params: dict, batch: Batch, term: str, h: float = 1e-5,
               floor: float = 1e-6) -> tuple[float, float, int]:
    """Largest elementwise relative error between backprop and central differences.

    Stop-gradient nodes are pinned to their values at ``params`` while
    perturbing, so both routes differentiate the same function.
    """
    graph = LossGraph(spec, (term,))
    value, analytic = graph.gradient(term, params, batch)
    tape, node = graph.tape, graph.nodes[term]
    pinned = {i: tape.value_by_id(i) for i in tape.stop_gradient_ids()}
    bindings = batch.bindings(spec.n_classes)
    used = {k: params[k] for k in analytic}

    def f(p):
        tape.forward({**params, **p, **bindings}, pinned=pinned)
        return tape.value(node)[0, 0]

    numeric = finite_diff_grad(f, used, h=h)
    worst = max(relative_error(analytic[k], numeric[k], floor=floor) for k in used)
    return value, worst, sum(v.size for v in used.values())


def draw_problems(n_configs: int, seed: int = 0, margin: float = KINK_MARGIN):
    """``n_configs`` random problems away from every breakpoint, plus the
    number of draws rejected for sitting too close to one."""
    stream = np.random.SeedSequence(seed)
    problems, rejected = [], 0
    while len(problems) < n_configs:
        (s,) = stream.spawn(1)
        problem = random_problem(int(s.generate_state(1)[0]))
        if kink_distance(*problem) < margin:
            rejected += 1
            continue
        problems.append(problem)
    return problems, rejected


def run_gradcheck(n_configs: int = 100, seed: int = 0, terms=CHECKED_TERMS):
    """Check every term on ``n_configs`` problems; returns the results and the
    count of redrawn near-kink configurations."""
    problems, rejected = draw_problems(n_configs, seed)
    out = []
    for i, (spec, params, batch) in enumerate(problems):
        for term in terms:
            value, err, n = check_term(spec, params, batch, term)
            out.append(GradCheckResult(i, term, value, err, n))
    return out, rejected
