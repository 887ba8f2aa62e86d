"""Independent numerical oracles for the closed-form losses and the autodiff engine.

Each oracle recomputes a quantity by a route that shares no code with the
implementation under test: Monte-Carlo sampling of the Dirichlet for the
Bayes risk, adaptive quadrature over the 1-simplex for the KL term, and
central differences for gradients. ``run_oracle_suite`` runs them all and is
what ``fedeu verify`` prints.
"""
from __future__ import annotations

import time
from collections.abc import Callable, Iterable
from dataclasses import dataclass

import numpy as np
from scipy import integrate, stats

from . import cfe, evidential as E, model, tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class OracleResult:
    name: str
    max_error: float
    tol: float
    seconds: float
    cases: int

    @property
    def passed(self):
        return bool(np.isfinite(self.max_error)) and self.max_error <= self.tol

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.name:<32s} max_err={self.max_error:.3e}  "
                f"tol={self.tol:.0e}"
                f"  cases={self.cases}  {self.seconds:.2f}s")


# ---------------------------------------------------------------------------
# closed forms as plain floats (the default implementations under test)


def closed_bayes_risk(alpha, y):
    alpha = np.asarray(alpha, dtype=np.float64).reshape(1, -1, 1, 1)
    y = np.asarray(y, dtype=np.float64).reshape(1, -1, 1, 1)
    out = E.DirichletOutput.from_evidence(Tensor(alpha - 1.0))
    return E.bayes_risk_loss(out, Tensor(y)).item()


def closed_kl(alpha_tilde):
    a = np.asarray(alpha_tilde, dtype=np.float64).reshape(1, -1, 1, 1)
    return E.kl_to_uniform(Tensor(a)).item()


# ---------------------------------------------------------------------------
# reference computations


def bayes_risk_monte_carlo(alpha, y, samples, rng):
    """Sample average of ||y - p||^2 with p ~ Dir(alpha)."""
    p = rng.dirichlet(np.asarray(alpha, dtype=np.float64), size=samples)
    return float(np.mean(np.sum((np.asarray(y, dtype=np.float64) - p) ** 2, axis=1)))


def kl_quadrature(alpha_tilde):
    """KL(Dir(a, b) || Dir(1, 1)) as the integral of f log f over [0, 1].

    On the 1-simplex Dir(a, b) is Beta(a, b) and the uniform density is 1.
    """
    a, b = (float(v) for v in alpha_tilde)
    dist = stats.beta(a, b)

    def integrand(x):
        lp = dist.logpdf(x)
        return np.exp(lp) * lp

    val, _ = integrate.quad(integrand, 0.0, 1.0, epsabs=1e-12, epsrel=1e-10, limit=200)
    return val


# ---------------------------------------------------------------------------
# oracles


def bayes_risk_oracle(impl: Callable | None = None, *, seed=0, cases=20,
                      samples=1_000_000, tol=1e-2) -> OracleResult:
    impl = impl or closed_bayes_risk
    rng = np.random.default_rng([seed, 101])
    start = time.perf_counter()
    # anchor case: Dir(1, 1) against a hard label has risk 2/3
    err = abs(impl([1.0, 1.0], [1.0, 0.0]) - 2.0 / 3.0)
    err = max(err, abs(bayes_risk_monte_carlo([1.0, 1.0], [1.0, 0.0], samples, rng) - 2.0 / 3.0))
    for _ in range(cases):
        c = int(rng.integers(2, 5))
        alpha = 1.0 + rng.gamma(1.5, 2.0, size=c)
        y = np.eye(c)[rng.integers(c)]
        err = max(err, abs(impl(alpha, y) - bayes_risk_monte_carlo(alpha, y, samples, rng)))
    return OracleResult("bayes_risk_vs_monte_carlo", err, tol,
                        time.perf_counter() - start, cases + 1)


def kl_oracle(impl: Callable | None = None, *, seed=0, cases=10, tol=1e-4) -> OracleResult:
    impl = impl or closed_kl
    rng = np.random.default_rng([seed, 202])
    start = time.perf_counter()
    err = abs(impl([1.0, 3.0]) - (np.log(3.0) - 2.0 / 3.0))
    todo = [np.array([1.0, 3.0])]
    while len(todo) < cases - 1:
        a = 1.0 + rng.gamma(1.2, 3.0, size=2)
        if rng.random() < 0.5:
            a[rng.integers(2)] = 1.0  # true-class entry of alpha-tilde
        todo.append(a)
    for a in todo:
        err = max(err, abs(impl(a) - kl_quadrature(a)))
    return OracleResult("kl_vs_quadrature", err, tol, time.perf_counter() - start, len(todo) + 1)


def kl_zero_oracle(impl: Callable | None = None) -> OracleResult:
    """KL of the uniform Dirichlet to itself must vanish exactly, for C = 2..4."""
    impl = impl or closed_kl
    start = time.perf_counter()
    err = max(abs(impl(np.ones(c))) for c in (2, 3, 4))
    return OracleResult("kl_uniform_exact_zero", err, 0.0, time.perf_counter() - start, 3)


# ---------------------------------------------------------------------------
# gradient suite


def _weighted(rng, shape=None):
    """Random linear functional of an op's output; sized on first use."""
    cache = {}

    def reduce(y):
        if "w" not in cache:
            cache["w"] = rng.normal(size=y.shape if shape is None else shape)
        return T.sum(T.mul(y, Tensor(cache["w"])))
    return reduce


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin * 2, x)


def _unary_case(op, sampler):
    def case(rng):
        x = sampler(rng)
        red = _weighted(rng)
        return (lambda t: red(op(t))), x
    return case


def _tiny_network():
    cfg = model.NetworkConfig(in_channels=1, image_size=(8, 8), widths=(3, 4),
                              adapter_bottleneck=2, cfe_stage=2, num_clients=2)
    return cfg


def _float64_params(params, rng):
    arrays = {}
    for n, v in params.arrays.items():
        v = v.astype(np.float64)
        if np.all(v == 0):
            # zero-initialised layers would hide their downstream gradients
            v = rng.normal(scale=0.1, size=v.shape)
        arrays[n] = v
    return model.ParameterSet(arrays, dict(params.groups), params.config)


def _e2e_case(name, t=12):
    def case(rng):
        cfg = _tiny_network()
        params = _float64_params(model.build_network(cfg, int(rng.integers(1 << 30))), rng)
        batch = rng.normal(size=(2, 1, 8, 8))
        mask = (rng.random((2, 8, 8)) < 0.4).astype(np.int64)
        y = Tensor(E.one_hot_labels(mask, 2).astype(np.float64))
        emb = cfe.one_hot(1, 2).astype(np.float64)
        loss_cfg = E.LossConfig()

        def f(probe):
            out = model.forward(params, batch, emb, overrides={name: probe})
            dirich = E.DirichletOutput.from_evidence(out.evidence)
            return E.combined_loss(out.seg_logits, dirich, y, t, loss_cfg).total
        return f, params[name]
    return case


def _psi_case(rng):
    cfg = _tiny_network()
    params = _float64_params(model.build_network(cfg, int(rng.integers(1 << 30))), rng)
    names = params.names(model.Group.CFE)
    local = {n: params[n] for n in names}
    global_ = {n: params[n] + rng.normal(scale=0.2, size=params[n].shape) for n in names}
    psi = {n: rng.uniform(0.2, 0.8, size=params[n].shape) for n in names}
    target = cfe.GATE_DESC + ".weight"
    batch = rng.normal(size=(2, 1, 8, 8))
    mask = (rng.random((2, 8, 8)) < 0.4).astype(np.int64)
    y = Tensor(E.one_hot_labels(mask, 2).astype(np.float64))

    def f(probe):
        blended = cfe.psi_calibrate(local, global_, {**psi, target: probe})
        out = model.forward(params, batch, cfe.one_hot(0, 2).astype(np.float64),
                            overrides=blended)
        dirich = E.DirichletOutput.from_evidence(out.evidence)
        return E.combined_loss(out.seg_logits, dirich, y, 12, E.LossConfig()).total
    return f, psi[target]


def _evidence_case(kind):
    def case(rng):
        ev = rng.gamma(2.0, 1.5, size=(2, 3, 2, 2))
        y = Tensor(E.one_hot_labels(rng.integers(3, size=(2, 2, 2)), 3).astype(np.float64))
        cfg = E.LossConfig(anneal_rounds=10)

        def f(e):
            out = E.DirichletOutput.from_evidence(e)
            if kind == "bayes":
                return E.bayes_risk_loss(out, y)
            if kind == "kl":
                return E.kl_to_uniform(E.tilde_alpha(out, y))
            return E.evidential_loss(out, y, 7, cfg)
        return f, ev
    return case


def _matmul_case(rng):
    b = rng.normal(size=(4, 2))
    return (lambda a: T.sum(T.matmul(a, Tensor(b)))), rng.normal(size=(3, 4))


def _conv_w_case(stride):
    def case(rng):
        x = rng.normal(size=(1, 2, 5, 5))
        red = _weighted(rng)
        b = Tensor(rng.normal(size=3))
        return (lambda w: red(T.conv2d(Tensor(x), w, b, stride=stride, padding=1))), \
            rng.normal(size=(3, 2, 3, 3))
    return case


def _conv_x_case(rng):
    w = Tensor(rng.normal(size=(3, 2, 3, 3)))
    red = _weighted(rng, (2, 3, 4, 4))
    return (lambda x: red(T.conv2d(x, w, stride=1, padding=1))), rng.normal(size=(2, 2, 4, 4))


def _binary_case(op, sampler_b):
    def case(rng):
        a = rng.normal(size=(3, 4))
        b = sampler_b(rng)
        red = _weighted(rng, (3, 4))
        return (lambda t: red(op(t, Tensor(b)))), a
    return case


def _divisor_case(rng):
    a = rng.normal(size=(3, 4))
    red = _weighted(rng, (3, 4))
    return (lambda t: red(T.div(Tensor(a), t))), rng.uniform(0.5, 2.0, size=(3, 4))


def _concat_case(rng):
    other = Tensor(rng.normal(size=(2, 3)))
    red = _weighted(rng, (2, 5))
    return (lambda t: red(T.concat([t, other], axis=1))), rng.normal(size=(2, 2))


def _bce_case(rng):
    target = Tensor((rng.random((2, 2, 3, 3)) < 0.5).astype(np.float64))
    return (lambda z: T.mean(T.bce_with_logits(z, target))), rng.normal(size=(2, 2, 3, 3)) * 2


def _mlp_case(rng):
    w1 = rng.normal(size=(4, 5))
    w2 = Tensor(rng.normal(size=(5, 2)))
    x = Tensor(rng.normal(size=(3, 4)))
    return (lambda w: T.mean(T.sigmoid(T.matmul(T.tanh(T.matmul(x, w)), w2)))), w1


LINEAR_TOL = 1e-4
NONLINEAR_TOL = 1e-3

# name -> (case factory, tolerance); factories take an rng and return (f, x)
GRADIENT_CASES: dict[str, tuple[Callable, float]] = {
    "add": (_binary_case(T.add, lambda r: r.normal(size=(1, 4))), LINEAR_TOL),
    "sub": (_binary_case(T.sub, lambda r: r.normal(size=(3, 1))), LINEAR_TOL),
    "sum": (_unary_case(lambda t: T.sum(t, axis=1), lambda r: r.normal(size=(3, 4))), LINEAR_TOL),
    "mean": (_unary_case(lambda t: T.mean(t, axis=0, keepdims=True),
                         lambda r: r.normal(size=(3, 4))), LINEAR_TOL),
    "reshape_transpose": (_unary_case(lambda t: T.transpose(T.reshape(t, (2, 6)), (1, 0)),
                                      lambda r: r.normal(size=(3, 4))), LINEAR_TOL),
    "concat": (_concat_case, LINEAR_TOL),
    "matmul": (_matmul_case, LINEAR_TOL),
    "upsample_nearest": (_unary_case(lambda t: T.upsample_nearest(t, 2),
                                     lambda r: r.normal(size=(1, 2, 3, 3))), LINEAR_TOL),
    "global_avg_pool": (_unary_case(T.global_avg_pool,
                                    lambda r: r.normal(size=(2, 3, 4, 4))), LINEAR_TOL),
    "conv2d_input": (_conv_x_case, LINEAR_TOL),
    "mul": (_binary_case(T.mul, lambda r: r.normal(size=(3, 4))), NONLINEAR_TOL),
    "div": (_divisor_case, NONLINEAR_TOL),
    "relu": (_unary_case(T.relu, lambda r: _away_from_zero(r, (3, 4))), NONLINEAR_TOL),
    "sigmoid": (_unary_case(T.sigmoid, lambda r: r.normal(size=(3, 4))), NONLINEAR_TOL),
    "tanh": (_unary_case(T.tanh, lambda r: r.normal(size=(3, 4))), NONLINEAR_TOL),
    "exp": (_unary_case(T.exp, lambda r: r.normal(size=(3, 4))), NONLINEAR_TOL),
    "softplus": (_unary_case(T.softplus, lambda r: r.normal(size=(3, 4)) * 3), NONLINEAR_TOL),
    "log": (_unary_case(T.log, lambda r: r.uniform(0.2, 3.0, size=(3, 4))), NONLINEAR_TOL),
    "lgamma": (_unary_case(T.lgamma, lambda r: r.uniform(0.3, 12.0, size=(3, 4))), NONLINEAR_TOL),
    "digamma": (_unary_case(T.digamma, lambda r: r.uniform(0.3, 12.0, size=(3, 4))), NONLINEAR_TOL),
    "instance_norm": (_unary_case(T.instance_norm, lambda r: r.normal(size=(2, 5))), NONLINEAR_TOL),
    "bce_with_logits": (_bce_case, NONLINEAR_TOL),
    "conv2d_kernel": (_conv_w_case(1), NONLINEAR_TOL),
    "conv2d_kernel_stride2": (_conv_w_case(2), NONLINEAR_TOL),
    "mlp_two_layer": (_mlp_case, LINEAR_TOL),
    "bayes_risk_evidence": (_evidence_case("bayes"), NONLINEAR_TOL),
    "kl_evidence": (_evidence_case("kl"), NONLINEAR_TOL),
    "evidential_loss_evidence": (_evidence_case("total"), NONLINEAR_TOL),
    "combined_loss_eu_head": (_e2e_case("eu_head.weight"), NONLINEAR_TOL),
    "combined_loss_seg_head": (_e2e_case("seg_head.weight"), NONLINEAR_TOL),
    "combined_loss_adapter": (_e2e_case("adapter1.down.weight"), NONLINEAR_TOL),
    "combined_loss_decoder": (_e2e_case("dec0.bias"), NONLINEAR_TOL),
    "combined_loss_cfe": (_e2e_case(cfe.GATE_EMBED + ".weight"), NONLINEAR_TOL),
    "psi_gradient": (_psi_case, NONLINEAR_TOL),
}


def gradient_oracle(name, seeds: Iterable[int] = range(5), step=1e-5) -> OracleResult:
    factory, tol = GRADIENT_CASES[name]
    start = time.perf_counter()
    err, n = 0.0, 0
    for seed in seeds:
        rng = np.random.default_rng([seed, 303])
        f, x = factory(rng)
        report = T.finite_diff_check(f, x, step=step, tol=tol, atol=1e-6)
        err = max(err, report.max_rel_error)
        n += 1
    return OracleResult(f"grad:{name}", err, tol, time.perf_counter() - start, n)


def run_oracle_suite(*, bayes_impl=None, kl_impl=None, seeds=range(5),
                     samples=1_000_000) -> list[OracleResult]:
    results = [bayes_risk_oracle(bayes_impl, samples=samples), kl_oracle(kl_impl),
               kl_zero_oracle(kl_impl)]
    results.extend(gradient_oracle(name, seeds) for name in GRADIENT_CASES)
    return results


def format_report(results):
    lines = [r.line() for r in results]
    failed = sum(not r.passed for r in results)
    lines.append(f"{len(results) - failed}/{len(results)} oracles passed")
    return "\n".join(lines)
