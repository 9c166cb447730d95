"""Empirical-Bayes fitting by Laplace approximation.

The latent field is integrated out with a Laplace approximation around the
posterior mode, found by a damped Newton iteration on the sparse joint
precision. Hyperparameters maximize the approximate log marginal (plus weak
normal penalties on the transformed scale) via Nelder-Mead, warm-starting
the inner Newton across evaluations. Rank-deficient random-walk blocks are
handled with linear constraints by conditioning by kriging.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace as dc_replace

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize
from scipy.special import expit

from .gmrf import (
    Ar1Params,
    MaternParams,
    NotPositiveDefiniteError,
    SparsePrecision,
    build_ar1_precision,
    build_matern_precision,
    kronecker_precision,
)
from .likelihood import ModelDesign, total_loglik
from .model import Hyperparameters, ModelSpec

log = logging.getLogger(__name__)

__all__ = [
    "PriorModel",
    "NewtonResult",
    "FitResult",
    "active_hyper_names",
    "build_prior",
    "inner_newton",
    "laplace_marginal",
    "optimize_hyperparameters",
    "fit_model",
    "posterior_samples",
    "mixture_gibbs_samples",
    "predict_risk",
    "leroux_precision",
]

NEWTON_TOL = 1e-8
NEWTON_MAX_ITER = 600
MAX_BACKTRACK = 30
CONSTRAINT_EPS = 1e-8


def leroux_precision(adjacency: np.ndarray, tau: float, lam: float) -> tuple[np.ndarray, float]:
    """Dense Leroux CAR precision tau * ((1 - lam) I + lam (D - W)) with its
    log-determinant. Proper for lam < 1."""
    w = np.asarray(adjacency, dtype=float)
    deg = w.sum(axis=1)
    r = (1.0 - lam) * np.eye(w.shape[0]) + lam * (np.diag(deg) - w)
    eigs = np.linalg.eigvalsh(r)
    if eigs.min() <= 0:
        raise NotPositiveDefiniteError("Leroux structure matrix is singular")
    return tau * r, w.shape[0] * np.log(tau) + float(np.log(eigs).sum())


@dataclass
class PriorModel:
    """Joint latent prior: sparse precision, generalized log-determinant
    (pseudo log-determinant over the non-null directions), rank, and the
    constraint rows that pin the improper directions."""

    matrix: sp.csc_matrix
    gen_logdet: float
    rank: int
    constraints: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


def active_hyper_names(design: ModelDesign) -> tuple[str, ...]:
    """Hyperparameters that the given design actually uses."""
    names = ["log_rho", "log_sigma"]
    if design.field_times > 1:
        names.append("logit_zeta")
    if "survey" in design.layout:
        names.append("log_sigma_eps")
    if "agetime" in design.layout:
        names.append("log_sigma_phi")
    if "cluster" in design.layout:
        names.append("log_sigma_eta")
    if "strata_effect" in design.layout:
        names.extend(["log_tau_leroux", "logit_lambda"])
    return tuple(names)


def build_prior(design: ModelDesign, hypers: Hyperparameters) -> PriorModel:
    """Assemble the block-diagonal latent prior precision for one design."""
    spec = design.spec
    layout = design.layout
    blocks: list[sp.spmatrix] = []
    gen_logdet = 0.0
    rank = 0
    constraint_rows: list[np.ndarray] = []

    def add_block(name: str, q: sp.spmatrix, logdet: float, q_rank: int,
                  local_constraints: np.ndarray | None = None):
        nonlocal gen_logdet, rank
        if layout.block_size(name) != q.shape[0]:
            raise ValueError(f"prior block {name!r} does not match the layout")
        blocks.append(q)
        gen_logdet += logdet
        rank += q_rank
        if local_constraints is not None:
            off = layout.offset(name)
            for row in local_constraints:
                full = np.zeros(layout.size)
                full[off:off + row.size] = row
                constraint_rows.append(full)

    # spatial / spatio-temporal field
    q_s = build_matern_precision(design.grid,
                                 MaternParams(hypers.rho, hypers.sigma))
    if design.field_times > 1:
        q_t = build_ar1_precision(Ar1Params(hypers.zeta, design.field_times))
        q_u = kronecker_precision(q_s, q_t)
    else:
        q_u = q_s
    add_block("field", q_u.matrix, q_u.logdet, q_u.dim)

    # fixed-effect coefficients: weak normal prior
    m = layout.block_size("coef")
    v = spec.coef_variance
    add_block("coef", sp.identity(m, format="csc") / v,
              -m * np.log(v), m)

    if "survey" in layout:
        m = layout.block_size("survey")
        s2 = hypers.sigma_eps ** 2
        add_block("survey", sp.identity(m, format="csc") / s2,
                  -m * np.log(s2), m)

    if "agetime" in layout:
        from .likelihood import rw2_prior_precision

        walk = rw2_prior_precision(design.n_times, hypers.sigma_phi,
                                   order=spec.rw_order)
        n_bands = spec.n_bands
        q_walk = sp.block_diag([walk.matrix] * n_bands, format="csc")
        per_band_logdet = (walk.structure_pseudo_logdet
                           - 2.0 * walk.rank * np.log(hypers.sigma_phi))
        local = np.zeros((n_bands * walk.constraints.shape[0],
                          n_bands * design.n_times))
        r = 0
        for a in range(n_bands):
            for c in walk.constraints:
                local[r, a * design.n_times:(a + 1) * design.n_times] = c
                r += 1
        add_block("agetime", q_walk, n_bands * per_band_logdet,
                  n_bands * walk.rank, local)

    if "cluster" in layout:
        m = layout.block_size("cluster")
        s2 = hypers.sigma_eta ** 2
        add_block("cluster", sp.identity(m, format="csc") / s2,
                  -m * np.log(s2), m)

    if "strata_effect" in layout:
        q_dense, logdet = leroux_precision(
            design.strata.adjacency(design.grid),
            hypers.tau_leroux, hypers.leroux_lambda)
        add_block("strata_effect", sp.csc_matrix(q_dense), logdet,
                  q_dense.shape[0])

    q = sp.block_diag(blocks, format="csc")
    constraints = np.vstack(constraint_rows) if constraint_rows else None
    if constraints is not None:
        # soft constraints: the rows span the walk null space exactly and are
        # orthogonal to its range, so adding A'A / eps makes the precision
        # proper with log-determinant gen_logdet + logdet(A A') - c log(eps),
        # exactly. Tiny eps pins the improper directions; the residual
        # violation at the mode is O(eps * gradient).
        a = sp.csr_matrix(constraints)
        q = (q + (a.T @ a) / CONSTRAINT_EPS).tocsc()
        c = constraints.shape[0]
        sign, ld = np.linalg.slogdet(constraints @ constraints.T)
        if sign <= 0:
            raise ValueError("constraint rows are degenerate")
        gen_logdet += ld - c * np.log(CONSTRAINT_EPS)
        rank += c
    return PriorModel(matrix=q, gen_logdet=gen_logdet, rank=rank,
                      constraints=constraints)


@dataclass
class NewtonResult:
    x: np.ndarray
    factor: object  # Cholesky-type factor of the posterior precision
    loglik: float
    objective: float
    n_iter: int
    converged: bool


def _krige_to_constraints(x: np.ndarray, factor, a: np.ndarray) -> np.ndarray:
    """Project x onto {a x = 0} along the metric of the factored precision."""
    va = factor.solve(a.T)
    correction = va @ np.linalg.solve(a @ va, a @ x)
    return x - correction


def inner_newton(design: ModelDesign, prior: PriorModel,
                 x0: np.ndarray | None = None, tol: float = NEWTON_TOL,
                 max_iter: int = NEWTON_MAX_ITER) -> NewtonResult:
    """Damped Newton ascent of l(x) - x'Qx/2.

    Backtracks by halving when a step does not improve the objective; inflates
    the diagonal (Levenberg style) when the candidate precision fails to
    factorize. Convergence is max-norm of the gradient below tol. Random-walk
    constraints are already folded softly into the prior precision.
    """
    q = prior.matrix
    n = prior.dim
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    eye = sp.identity(n, format="csc")

    # Steps use the responsibility-weighted (Fisher-style) mixture curvature
    # throughout: for point and ecological binomial terms it coincides with
    # the exact Hessian, and for mixture terms it is negative semidefinite,
    # so q - H is always positive definite and every step ascends after at
    # most a few halvings. (The exact mixture curvature is frequently
    # indefinite away from and even at the mode, which stalls a damped
    # Newton iteration.) The Laplace determinant at the end uses the
    # spec-selected curvature.
    ev = total_loglik(design, x, exact_mixture=False)
    objective = ev.value - 0.5 * x @ (q @ x)
    converged = False
    it = 0
    damp = 0.0
    stalled = 0
    for it in range(1, max_iter + 1):
        grad = ev.gradient - q @ x
        m = (q - ev.hessian_contrib).tocsc()
        while True:
            try:
                factor = SparsePrecision(
                    m + damp * eye if damp else m,
                    validate_symmetry=False).factor()
                break
            except NotPositiveDefiniteError:
                damp = 1e-3 if damp == 0.0 else damp * 8.0
                if damp > 1e8:
                    raise
        gmax = np.max(np.abs(grad))
        if gmax < tol:
            converged = True
            break
        dx = factor.solve(grad)
        step = 1.0
        for _ in range(MAX_BACKTRACK):
            x_new = x + step * dx
            ev_new = total_loglik(design, x_new, exact_mixture=False)
            obj_new = ev_new.value - 0.5 * x_new @ (q @ x_new)
            if obj_new >= objective - 1e-12:
                break
            step *= 0.5
        else:
            # no step improves the objective. If the Newton decrement
            # (the quadratic-model estimate of remaining suboptimality,
            # g'M^{-1}g / 2) is below floating-point noise at the
            # objective's scale, the iterate is the mode to machine
            # precision even though the raw gradient norm sits above tol.
            if 0.5 * float(grad @ dx) <= 1e-9 * (1.0 + abs(objective)):
                converged = True
            else:
                log.warning("Newton backtracking exhausted at iteration %d",
                            it)
            break
        # mixture objectives can have nearly flat valleys between candidate
        # assignment basins where undamped full steps each gain only an
        # amount at double-precision noise for hundreds of iterations while
        # the gradient norm plateaus around 1e-4. Treat ten such consecutive
        # steps with a non-contracting gradient as a numerically converged
        # mode; a healthy tail (even a slow linear one) keeps shrinking the
        # gradient geometrically and is left to reach the gradient test.
        if step == 1.0 and obj_new - objective <= 1e-11 * (1.0 + abs(obj_new)):
            if stalled == 0:
                stall_gmax = gmax
            stalled += 1
            if stalled >= 10 and gmax > 0.5 * stall_gmax:
                converged = True
                x, ev, objective = x_new, ev_new, obj_new
                break
        else:
            stalled = 0
        x, ev, objective = x_new, ev_new, obj_new
        damp = 0.0 if damp < 1e-6 else damp * 0.25
    # curvature at the mode with the spec-selected mixture Hessian, which is
    # what the Laplace determinant and posterior sampling use
    ev_final = total_loglik(design, x)
    m_final = (q - ev_final.hessian_contrib).tocsc()
    damp = 0.0
    while True:
        try:
            factor = SparsePrecision(
                m_final + damp * eye if damp else m_final,
                validate_symmetry=False).factor()
            break
        except NotPositiveDefiniteError:
            damp = 1e-6 if damp == 0.0 else damp * 10.0
            if damp > 1e6:
                raise
    return NewtonResult(x=x, factor=factor, loglik=ev_final.value,
                        objective=objective, n_iter=it, converged=converged)


def laplace_marginal(design: ModelDesign, prior: PriorModel,
                     x0: np.ndarray | None = None) -> tuple[float, NewtonResult]:
    """Laplace approximation of log p(y | hyperparameters).

    Value: l(x^) - x^'Qx^/2 + gen_logdet(Q)/2 - logdet(Q - H)/2; the
    dimension constants (2 pi factors) cancel across hyperparameters and are
    dropped, except that with a proper prior the value is exactly the
    log-integral of the Gaussianized joint.
    """
    res = inner_newton(design, prior, x0=x0)
    value = res.objective + 0.5 * prior.gen_logdet - 0.5 * res.factor.logdet
    return float(value), res


@dataclass
class FitResult:
    """One fitted model: mode, posterior factorization and metadata."""

    spec: ModelSpec
    design: ModelDesign
    prior: PriorModel
    hypers: Hyperparameters
    hyper_names: tuple
    x_hat: np.ndarray
    newton: NewtonResult
    log_marginal: float
    n_marginal_evals: int
    opt_converged: bool

    @property
    def posterior_factor(self):
        return self.newton.factor


def optimize_hyperparameters(
    design: ModelDesign,
    start: Hyperparameters | None = None,
    maxfev: int = 80,
    fixed: dict[str, float] | None = None,
    xatol: float = 1e-4,
) -> FitResult:
    """Nelder-Mead maximization of the penalized Laplace marginal.

    `fixed` pins named transformed hyperparameters at given values, excluding
    them from the search (used to cut runtime in large simulation studies).
    """
    names = active_hyper_names(design)
    fixed = dict(fixed or {})
    free = tuple(n for n in names if n not in fixed)
    defaults = Hyperparameters.default(names)
    if start is None:
        start = defaults
    else:
        # fill names the caller's start (e.g. a fit of another method on
        # the same data) does not carry
        given = {n: getattr(start, n) for n in names
                 if getattr(start, n) is not None}
        start = dc_replace(defaults, **given)
    spec = design.spec
    pen_var = spec.hyper_prior_variance

    # the inner mode anchors warm starts: always restart the Newton iteration
    # from the mode of the best evaluation so far, so the marginal surface
    # stays a function of theta even when the joint posterior is multimodal
    state = {"warm": None, "best": np.inf, "evals": 0}

    def assemble(theta: np.ndarray) -> Hyperparameters:
        vals = dict(zip(free, map(float, theta)))
        vals.update(fixed)
        return Hyperparameters(**vals)

    def neg_penalized(theta: np.ndarray) -> float:
        hyp = assemble(theta)
        state["evals"] += 1
        try:
            prior = build_prior(design, hyp)
            value, res = laplace_marginal(design, prior, x0=state["warm"])
        except (NotPositiveDefiniteError, ValueError):
            # e.g. a proposed range below the grid resolution
            return 1e10
        penalty = 0.0
        if spec.map_priors:
            penalty = -0.5 * float(theta @ theta) / pen_var
        out = -(value + penalty)
        if out < state["best"]:
            state["best"] = out
            state["warm"] = res.x
        return out

    if free:
        theta0 = start.to_vector(free)
        # scipy's default simplex perturbs coordinates at 0.0 by only
        # 0.00025, which freezes them; use a fixed sensible edge instead
        simplex = np.vstack([theta0] + [theta0 + 0.3 * e
                                        for e in np.eye(theta0.size)])
        opt = minimize(neg_penalized, theta0, method="Nelder-Mead",
                       options={"xatol": xatol, "fatol": 1e-3,
                                "maxfev": maxfev,
                                "initial_simplex": simplex})
        theta_hat = opt.x
        opt_converged = bool(opt.success) or opt.status == 1  # maxfev cap
    else:
        theta_hat = np.zeros(0)
        opt_converged = True
    hyp_hat = assemble(theta_hat)
    prior = build_prior(design, hyp_hat)
    value, res = laplace_marginal(design, prior, x0=state["warm"])
    return FitResult(spec=spec, design=design, prior=prior, hypers=hyp_hat,
                     hyper_names=names, x_hat=res.x, newton=res,
                     log_marginal=value, n_marginal_evals=state["evals"],
                     opt_converged=opt_converged and res.converged)


def fit_model(spec, grid, strata, obs, pop=None, covariates=None, n_times=1,
              resample_seed=0, **opt_kwargs) -> FitResult:
    """Compile the design for one method and fit it end to end.

    Mixture fits estimate any free hyperparameters under the point-location
    likelihood of the same data (masked records dropped) and pin the
    mixture fit at that optimum: the mixture's own Laplace marginal is
    biased toward long ranges because its mode commits each masked record
    to one candidate cell, which distorts the curvature term as a function
    of the hyperparameters and ruins interval calibration. Pass `fixed`
    covering every active hyperparameter to bypass the pre-fit.
    """
    from .likelihood import build_design

    design = build_design(spec, grid, strata, obs, pop=pop,
                          covariates=covariates, n_times=n_times,
                          resample_seed=resample_seed)
    if spec.method == "mixture":
        fixed = dict(opt_kwargs.get("fixed") or {})
        free = [n for n in active_hyper_names(design) if n not in fixed]
        if free:
            point_design = build_design(dc_replace(spec, method="ignore"),
                                        grid, strata, obs, pop=pop,
                                        covariates=covariates,
                                        n_times=n_times)
            pre = optimize_hyperparameters(point_design, **opt_kwargs)
            fixed.update({n: float(getattr(pre.hypers, n)) for n in free})
            opt_kwargs = {**opt_kwargs, "fixed": fixed}
    return optimize_hyperparameters(design, **opt_kwargs)


def posterior_samples(fit: FitResult, n_samples: int, seed: int) -> np.ndarray:
    """Posterior draws of the latent field, shape (n_samples, dim).

    For fits without mixture records these come from the Gaussian
    approximation N(x^, (Q - H)^-1), kriged onto the constraint set when the
    prior carries constraints. Mixture fits instead use a blocked Gibbs
    sampler over (assignments, field): the single-Gaussian approximation is
    centered on a mode that commits each masked record to one candidate
    cell, while the Gibbs draws average over assignments.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    if fit.design.mix_ptr.size > 1:
        return mixture_gibbs_samples(fit, n_samples, seed)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((fit.prior.dim, n_samples))
    draws = fit.posterior_factor.sample(z).T + fit.x_hat
    return _apply_constraints(draws, fit)


def _apply_constraints(draws: np.ndarray, fit: FitResult) -> np.ndarray:
    a = fit.prior.constraints
    if a is not None:
        draws = np.array([
            _krige_to_constraints(d, fit.posterior_factor, a) for d in draws
        ])
    return draws


GIBBS_BURN_SWEEPS = 5
GIBBS_DRAWS_PER_SWEEP = 8


def _conditional_point_mode(design: ModelDesign, prior: PriorModel,
                            z_sel: sp.spmatrix,
                            x0: np.ndarray) -> tuple[np.ndarray, object]:
    """Mode and posterior factor of the point model obtained by pinning each
    masked record to one sampled candidate cell (rows of `z_sel`).

    The log posterior is strictly concave (binomial-logit terms plus a
    Gaussian prior), so undamped Newton with the exact Hessian converges
    from any start; the factor of the last iteration is the Laplace factor
    at the conditional mode.
    """
    q = prior.matrix
    x = x0.copy()
    factor = None
    for _ in range(NEWTON_MAX_ITER):
        p_point = expit(design.z_point @ x)
        p_sel = expit(z_sel @ x)
        grad = (design.z_point.T @ (design.y_point - design.n_point * p_point)
                + z_sel.T @ (design.y_mix - design.n_mix * p_sel) - q @ x)
        w_p = design.n_point * p_point * (1.0 - p_point)
        w_s = design.n_mix * p_sel * (1.0 - p_sel)
        h = (design.z_point.multiply(w_p[:, None]).T @ design.z_point
             + z_sel.multiply(w_s[:, None]).T @ z_sel)
        factor = SparsePrecision((q + h).tocsc(),
                                 validate_symmetry=False).factor()
        if np.max(np.abs(grad)) < 1e-6:
            break
        x = x + factor.solve(grad)
    return x, factor


def mixture_gibbs_samples(fit: FitResult, n_samples: int,
                          seed: int) -> np.ndarray:
    """Blocked Gibbs draws for a mixture fit, shape (n_samples, dim).

    Each sweep first samples one candidate cell per masked record from its
    responsibilities at the current field, then redraws the whole field from
    the Gaussian (Laplace) conditional given those assignments — an ordinary
    point-model posterior. Several field draws are kept per sweep; the chain
    advances from the first of them.
    """
    from .likelihood import mixture_responsibilities

    design, prior = fit.design, fit.prior
    rng = np.random.default_rng(seed)
    n_keep_sweeps = -(-n_samples // GIBBS_DRAWS_PER_SWEEP)
    x = fit.x_hat.copy()
    n_rec = design.mix_ptr.size - 1
    kept = []
    for sweep in range(GIBBS_BURN_SWEEPS + n_keep_sweeps):
        resp = mixture_responsibilities(design, x)
        sel = np.empty(n_rec, dtype=np.intp)
        for i in range(n_rec):
            lo, hi = design.mix_ptr[i], design.mix_ptr[i + 1]
            w = resp[lo:hi]
            sel[i] = lo + rng.choice(hi - lo, p=w / w.sum())
        x_cond, factor = _conditional_point_mode(design, prior,
                                                 design.z_mix[sel], x)
        z = rng.standard_normal((prior.dim, GIBBS_DRAWS_PER_SWEEP))
        draws = factor.sample(z).T + x_cond
        if sweep >= GIBBS_BURN_SWEEPS:
            kept.append(draws)
        x = draws[0]
    draws = np.vstack(kept)[:n_samples]
    return _apply_constraints(draws, fit)


def predict_risk(fit: FitResult, n_samples: int = 200, seed: int = 0,
                 age: int | None = None,
                 ci: tuple[float, float] = (0.05, 0.95)) -> dict:
    """Posterior risk surfaces on the grid.

    Returns mean, sd, lower and upper arrays of shape (n_times, n_cells),
    summarizing expit of sampled linear predictors for a new cluster.
    """
    m = fit.design.prediction_matrix(age=age)
    draws = posterior_samples(fit, n_samples, seed)
    p = expit(draws @ m.T)  # (n_samples, n_times * n_cells)
    shape = (fit.design.n_times, fit.design.grid.n_cells)
    lo, hi = np.quantile(p, ci, axis=0)
    return {
        "mean": p.mean(axis=0).reshape(shape),
        "sd": p.std(axis=0, ddof=1).reshape(shape),
        "lower": lo.reshape(shape),
        "upper": hi.reshape(shape),
    }
