"""Constrained nonlinear programming: SQP with an active-set box QP.

Problems carry combined value/derivative callbacks (one value pass, one
derivative pass per iterate — the shooting evaluations behind them are the
hot path). Inequalities follow the h(z) <= 0 convention; box bounds are
handled natively by the QP working set.

The Hessian is either a caller-declared positive-semidefinite structure
callback (analytic stage curvature or Gauss-Newton, used by the shooting
problems) or a damped BFGS matrix (dense fallback for small problems).
Adaptive Levenberg damping covers curvature-free subspaces; an l1 exact
penalty line search globalizes; a Gauss-Newton feasibility restoration
kicks in when steps stall.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import autodiff as ad


class NlpNanError(RuntimeError):
    """A callback produced a non-finite value (diagnostic index included)."""


@dataclass
class SolverOptions:
    tol_stat: float = 1e-6
    tol_feas: float = 1e-8
    max_iter: int = 500
    levenberg0: float = 1e-6
    levenberg_max: float = 1e8
    armijo: float = 1e-4
    ls_max: int = 25
    qp_max_iter: int = 120
    # relative merit-progress floor: when > 0 and feasible, three consecutive
    # iterations below it end the solve ("stalled" unless the refined KKT
    # residual passes tol_stat). Off by default: pure KKT semantics.
    tol_obj_stall: float = 0.0
    log_path: Optional[str] = None
    verbose: bool = False

    def to_dict(self) -> dict:
        return {
            "tol_stat": self.tol_stat,
            "tol_feas": self.tol_feas,
            "max_iter": self.max_iter,
            "levenberg0": self.levenberg0,
            "levenberg_max": self.levenberg_max,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SolverOptions":
        return cls(**d)


@dataclass
class NlpProblem:
    """Smooth NLP: min f(z) s.t. c_eq(z) = 0, c_ineq(z) <= 0, lb <= z <= ub."""

    n: int
    eval_fc: Callable  # z -> (f, c_eq | None, c_ineq | None)
    eval_derivs: Callable  # z -> (grad, jac_eq | None, jac_ineq | None)
    n_eq: int = 0
    n_ineq: int = 0
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None
    hess: Optional[Callable] = None  # (z, lam_eq) -> PSD (sparse or dense)
    damp_scale: Optional[np.ndarray] = None  # per-variable damping metric
    name: str = "nlp"

    def __post_init__(self):
        if self.lb is None:
            self.lb = np.full(self.n, -np.inf)
        if self.ub is None:
            self.ub = np.full(self.n, np.inf)
        self.lb = np.asarray(self.lb, dtype=float)
        self.ub = np.asarray(self.ub, dtype=float)
        if np.any(self.lb > self.ub):
            raise ValueError("box bounds must satisfy lb <= ub")

    @classmethod
    def from_callbacks(cls, f, n, eq=None, ineq=None, lb=None, ub=None,
                       grad=None, jac_eq=None, jac_ineq=None, hess=None,
                       n_eq=None, n_ineq=None, name="nlp") -> "NlpProblem":
        """Build from plain callbacks; missing derivatives come from the
        dual-number engine."""
        grad = grad or (lambda z: ad.gradient(f, z))
        if eq is not None and jac_eq is None:
            jac_eq = lambda z: ad.jacobian(eq, z)
        if ineq is not None and jac_ineq is None:
            jac_ineq = lambda z: ad.jacobian(ineq, z)
        if n_eq is None:
            n_eq = 0 if eq is None else len(np.atleast_1d(eq(np.zeros(n) if lb is None else np.clip(np.zeros(n), lb, ub))))
        if n_ineq is None:
            n_ineq = 0 if ineq is None else len(np.atleast_1d(ineq(np.zeros(n) if lb is None else np.clip(np.zeros(n), lb, ub))))

        def eval_fc(z):
            fv = float(ad.value(f(z)))
            ce = None if eq is None else np.atleast_1d(np.asarray(eq(z), dtype=float))
            ci = None if ineq is None else np.atleast_1d(np.asarray(ineq(z), dtype=float))
            return fv, ce, ci

        def eval_derivs(z):
            g = np.asarray(grad(z), dtype=float)
            je = None if jac_eq is None else np.atleast_2d(np.asarray(jac_eq(z), dtype=float))
            ji = None if jac_ineq is None else np.atleast_2d(np.asarray(jac_ineq(z), dtype=float))
            return g, je, ji

        return cls(n=n, eval_fc=eval_fc, eval_derivs=eval_derivs, n_eq=n_eq,
                   n_ineq=n_ineq, lb=lb, ub=ub, hess=hess, name=name)


@dataclass
class NlpSolution:
    z: np.ndarray
    obj: float
    lam_eq: np.ndarray
    lam_ineq: np.ndarray
    mult_bounds: np.ndarray
    stationarity: float
    feasibility: float
    iterations: int
    status: str
    log: list = field(default_factory=list)
    bound_state: Optional[np.ndarray] = None   # QP working set for warm starts
    active_ineq: Optional[np.ndarray] = None

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def success(self) -> bool:
        """Converged, or feasible with no measurable progress left."""
        return self.status in ("converged", "stalled")

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "objective", "stationarity", "feasibility", "step_norm"])
            w.writerows(self.log)


# -- quadratic subproblem -----------------------------------------------------

_DUAL_REG = 1e-11


def _as_csc(mat) -> sp.csc_matrix:
    if sp.issparse(mat):
        return mat.tocsc()
    return sp.csc_matrix(np.atleast_2d(mat))


class _Coo:
    """Plain coo triplets for fast masked re-assembly."""

    __slots__ = ("row", "col", "data", "shape")

    def __init__(self, mat):
        m = mat.tocoo() if sp.issparse(mat) else sp.coo_matrix(np.atleast_2d(mat))
        self.row = m.row.astype(np.int64)
        self.col = m.col.astype(np.int64)
        self.data = m.data
        self.shape = m.shape

    def matvec(self, x, row_mask=None):
        out = np.zeros(self.shape[0])
        contrib = self.data * x[self.col]
        np.add.at(out, self.row, contrib)
        return out


def solve_box_qp(H, g, A, b, C, d, lb, ub,
                 bound_state=None, active_ineq=None, max_iter=400):
    """min 1/2 p'Hp + g'p s.t. A p = b, C p <= d, lb <= p <= ub.

    Primal active-set method on the bounds and general inequalities with an
    infeasible start (equalities are met once a full step is taken). Returns
    (p, lam_eq, mu_ineq, mult_bounds, bound_state, active_ineq, status).
    """
    n = g.shape[0]
    Hc = _Coo(H)
    me = 0 if A is None else A.shape[0]
    mi = 0 if C is None else C.shape[0]
    Ac = _Coo(A) if A is not None else None
    Cc = _Coo(C) if C is not None else None
    C_csr = _as_csc(C).tocsr() if C is not None else None

    state = np.zeros(n, dtype=np.int8) if bound_state is None else bound_state.copy()
    act = np.zeros(mi, dtype=bool) if active_ineq is None else active_ineq.copy()
    # sanitize the warm-started working set
    state[~np.isfinite(lb) & (state == -1)] = 0
    state[~np.isfinite(ub) & (state == 1)] = 0
    state[lb == ub] = -1

    p = np.where(state == -1, lb, np.where(state == 1, ub, 0.0))
    p = np.clip(p, lb, ub)

    lam = np.zeros(me)
    mu = np.zeros(mi)
    seen = set()
    released: dict = {}      # anti-cycling release quota per item
    bland = False
    status = "optimal"

    for _ in range(max_iter):
        key = (state.tobytes(), act.tobytes())
        if key in seen:
            bland = True
        seen.add(key)

        free_mask = state == 0
        free = np.flatnonzero(free_mask)
        nf = free.size
        pos = np.full(n, -1, dtype=np.int64)
        pos[free] = np.arange(nf)
        pfix = np.where(state == -1, lb, np.where(state == 1, ub, 0.0))
        pfix[free] = 0.0

        act_idx = np.flatnonzero(act)
        mc = me + act_idx.size

        # reduced KKT in raw coo form: [H_FF A_F'; A_F -delta I]
        hm = free_mask[Hc.row] & free_mask[Hc.col]
        rows_list = [pos[Hc.row[hm]]]
        cols_list = [pos[Hc.col[hm]]]
        data_list = [Hc.data[hm]]
        gf = g[free] + Hc.matvec(pfix)[free]
        rhs_con = np.zeros(mc)
        if me:
            am = free_mask[Ac.col]
            ar = Ac.row[am] + nf
            acl = pos[Ac.col[am]]
            ad = Ac.data[am]
            rows_list += [ar, acl]
            cols_list += [acl, ar]
            data_list += [ad, ad]
            rhs_con[:me] = b - Ac.matvec(pfix)
        if act_idx.size:
            sel = np.isin(Cc.row, act_idx)
            rowmap = np.full(mi, -1, dtype=np.int64)
            rowmap[act_idx] = np.arange(act_idx.size)
            cm = sel & free_mask[Cc.col]
            cr = rowmap[Cc.row[cm]] + nf + me
            ccl = pos[Cc.col[cm]]
            cd = Cc.data[cm]
            rows_list += [cr, ccl]
            cols_list += [ccl, cr]
            data_list += [cd, cd]
            rhs_con[me:] = d[act_idx] - (C_csr[act_idx] @ pfix)
        diag_idx = nf + np.arange(mc)
        rows_list.append(diag_idx)
        cols_list.append(diag_idx)
        data_list.append(np.full(mc, -_DUAL_REG))

        dim = nf + mc
        kkt_data = np.concatenate(data_list)
        if not np.all(np.isfinite(kkt_data)):
            raise NlpNanError("non-finite entry in the QP KKT matrix")
        kkt = sp.csc_matrix(
            (kkt_data, (np.concatenate(rows_list), np.concatenate(cols_list))),
            shape=(dim, dim),
        )
        rhs = np.concatenate([-gf, rhs_con])
        try:
            sol = spla.splu(kkt).solve(rhs)
        except RuntimeError:
            kkt_reg = (kkt + 1e-6 * sp.identity(dim, format="csc")).tocsc()
            sol = spla.splu(kkt_reg).solve(rhs)
        if not np.all(np.isfinite(sol)):
            raise NlpNanError("non-finite QP solution (singular KKT)")
        p_target = pfix.copy()
        p_target[free] = sol[:nf]
        lam_all = sol[nf:]
        lam = lam_all[:me] if me else np.zeros(0)
        mu = np.zeros(mi)
        if act_idx.size:
            mu[act_idx] = lam_all[me:]

        # projected-step working-set update: clip the target, activate
        # every clipped bound at once; when feasible, release in batch
        viol_up = p_target > ub + 1e-12
        viol_lo = p_target < lb - 1e-12
        viol_in = np.zeros(0, dtype=np.int64)
        if mi:
            inact = np.flatnonzero(~act)
            if inact.size:
                ci_t = np.asarray(C_csr[inact] @ p_target).ravel() - d[inact]
                viol_in = inact[ci_t > 1e-10]
        if np.any(viol_up) or np.any(viol_lo) or viol_in.size:
            state[viol_up] = 1
            state[viol_lo] = -1
            act[viol_in] = True
            p = np.clip(p_target, lb, ub)
            continue

        p = p_target
        # hysteresis: only clearly wrong multipliers trigger a release
        grad_l = g + Hc.matvec(p)
        if me:
            np.add.at(grad_l, Ac.col, Ac.data * lam[Ac.row])
        if act_idx.size:
            np.add.at(grad_l, Cc.col, Cc.data * mu[Cc.row])
        rel_tol = -1e-7 * (1.0 + float(np.max(np.abs(g))))
        rel_lb = [i for i in np.flatnonzero((state == -1) & (lb != ub))
                  if grad_l[i] < rel_tol and released.get(("b", i), 0) < 30]
        rel_ub = [i for i in np.flatnonzero(state == 1)
                  if -grad_l[i] < rel_tol and released.get(("b", i), 0) < 30]
        rel_in = [jj for jj in np.flatnonzero(act)
                  if mu[jj] < rel_tol and released.get(("i", jj), 0) < 30]
        if bland:
            # anti-cycling: single lowest-index release
            cands = ([("b", i) for i in rel_lb] + [("b", i) for i in rel_ub]
                     + [("i", jj) for jj in rel_in])
            if cands:
                kind_, idx_ = min(cands, key=lambda t: t[1])
                if kind_ == "i":
                    act[idx_] = False
                else:
                    state[idx_] = 0
                released[(kind_, idx_)] = released.get((kind_, idx_), 0) + 1
                continue
        elif rel_lb or rel_ub or rel_in:
            for i in rel_lb + rel_ub:
                state[i] = 0
                released[("b", i)] = released.get(("b", i), 0) + 1
            for jj in rel_in:
                act[jj] = False
                released[("i", jj)] = released.get(("i", jj), 0) + 1
            continue
        break
    else:
        status = "qp_max_iter"

    mult_bounds = np.zeros(n)
    grad_l = g + Hc.matvec(p)
    if me:
        np.add.at(grad_l, Ac.col, Ac.data * lam[Ac.row])
    if mi and np.any(act):
        np.add.at(grad_l, Cc.col, Cc.data * mu[Cc.row])
    on_bound = state != 0
    mult_bounds[on_bound] = grad_l[on_bound]
    return p, lam, mu, mult_bounds, state, act, status


# -- SQP driver ---------------------------------------------------------------

def _check_finite(arr, what: str):
    arr = np.atleast_1d(arr)
    bad = np.flatnonzero(~np.isfinite(arr))
    if bad.size:
        raise NlpNanError(f"non-finite value in {what} at component {int(bad[0])}")


def _violation(ce, ci) -> float:
    v = 0.0
    if ce is not None and ce.size:
        v += float(np.sum(np.abs(ce)))
    if ci is not None and ci.size:
        v += float(np.sum(np.maximum(ci, 0.0)))
    return v


def _feas_inf(ce, ci) -> float:
    v = 0.0
    if ce is not None and ce.size:
        v = max(v, float(np.max(np.abs(ce))))
    if ci is not None and ci.size:
        v = max(v, float(np.max(np.maximum(ci, 0.0))))
    return v


class _Bfgs:
    """Damped BFGS approximation (dense; small problems only)."""

    def __init__(self, n: int):
        self.B = np.eye(n)

    def update(self, s: np.ndarray, y: np.ndarray) -> None:
        Bs = self.B @ s
        sBs = float(s @ Bs)
        if sBs <= 1e-16:
            return
        sy = float(s @ y)
        if sy < 0.2 * sBs:
            theta = 0.8 * sBs / (sBs - sy)
            y = theta * y + (1.0 - theta) * Bs
            sy = float(s @ y)
        if sy <= 1e-16:
            return
        self.B += np.outer(y, y) / sy - np.outer(Bs, Bs) / sBs


def _stationarity(z, grad_l, lb, ub) -> float:
    return float(np.max(np.abs(z - np.clip(z - grad_l, lb, ub)))) if z.size else 0.0


def solve(problem: NlpProblem, z0, opts: SolverOptions | None = None,
          warm: NlpSolution | None = None) -> NlpSolution:
    """SQP solve with warm-start support."""
    opts = opts or SolverOptions()
    lb, ub = problem.lb, problem.ub
    z = np.clip(np.asarray(z0, dtype=float).copy(), lb, ub)
    _check_finite(z, "initial point")

    lam = np.zeros(problem.n_eq)
    mu = np.zeros(problem.n_ineq)
    bound_state = None
    active_ineq = None
    if warm is not None:
        if warm.lam_eq.shape[0] == problem.n_eq:
            lam = warm.lam_eq.copy()
        if warm.lam_ineq.shape[0] == problem.n_ineq:
            mu = warm.lam_ineq.copy()
        if warm.bound_state is not None and warm.bound_state.shape[0] == problem.n:
            bound_state = warm.bound_state.copy()
        if warm.active_ineq is not None and warm.active_ineq.shape[0] == problem.n_ineq:
            active_ineq = warm.active_ineq.copy()

    bfgs = None if problem.hess is not None else _Bfgs(problem.n)
    levenberg = opts.levenberg0
    sigma = 1.0
    log: list[tuple] = []
    status = "max_iter"
    grad_l = np.zeros(problem.n)
    mult_bounds = np.zeros(problem.n)
    stall_count = 0

    f, ce, ci = problem.eval_fc(z)
    try:
        _check_finite([f], "objective")
        if ce is not None:
            _check_finite(ce, "equality constraints")
        if ci is not None:
            _check_finite(ci, "inequality constraints")
    except NlpNanError:
        raise

    g, je, ji = problem.eval_derivs(z)
    stat = np.inf
    feas = _feas_inf(ce, ci)
    it = 0
    prev_g_l = None

    for it in range(1, opts.max_iter + 1):
        # Lagrangian gradient and KKT residuals
        grad_l = g.copy()
        if je is not None and problem.n_eq:
            grad_l += _as_csc(je).T @ lam
        if ji is not None and problem.n_ineq:
            grad_l += _as_csc(ji).T @ mu
        stat = _stationarity(z, grad_l, lb, ub)
        feas = _feas_inf(ce, ci)
        if stat <= opts.tol_stat and feas <= opts.tol_feas:
            status = "converged"
            log.append((it - 1, f, stat, feas, 0.0))
            break

        H = problem.hess(z, lam) if problem.hess is not None else bfgs.B
        H = _as_csc(H)
        if problem.damp_scale is not None:
            Hd = (H + levenberg * sp.diags(problem.damp_scale)).tocsc()
        else:
            Hd = (H + levenberg * sp.identity(problem.n)).tocsc()

        b_eq = -ce if ce is not None else None
        d_in = -ci if ci is not None else None
        try:
            p, lam_new, mu_new, mb, bound_state, active_ineq, qp_status = solve_box_qp(
                Hd, g, je, b_eq, ji, d_in, lb - z, ub - z,
                bound_state=bound_state, active_ineq=active_ineq,
                max_iter=opts.qp_max_iter,
            )
        except NlpNanError:
            bound_state = None
            active_ineq = None
            levenberg = min(max(levenberg * 100.0, 1.0), opts.levenberg_max)
            z, f, ce, ci, g, je, ji, restored = _restoration(problem, z, opts)
            if not restored:
                status = "restoration_failed"
                break
            continue

        mult_inf = max(
            float(np.max(np.abs(lam_new))) if lam_new.size else 0.0,
            float(np.max(np.abs(mu_new))) if mu_new.size else 0.0,
        )
        # penalty weight tracks the current multipliers (no ratchet)
        sigma = max(1.2 * mult_inf, 1e-2)
        viol0 = _violation(ce, ci)
        phi0 = f + sigma * viol0
        descent = float(g @ p) - sigma * viol0

        # a small-step exit: nothing measurable left to gain
        step_scale = float(np.max(np.abs(p), initial=0.0))
        if step_scale <= 1e-10 * (1.0 + float(np.max(np.abs(z)))) and feas <= opts.tol_feas:
            lam, mu, mult_bounds = lam_new, mu_new, mb
            grad_l = g.copy()
            if je is not None and problem.n_eq:
                grad_l += _as_csc(je).T @ lam
            if ji is not None and problem.n_ineq:
                grad_l += _as_csc(ji).T @ mu
            stat = _stationarity(z, grad_l, lb, ub)
            status = "converged" if stat <= opts.tol_stat else "stalled"
            log.append((it, f, stat, feas, step_scale))
            break

        # Armijo backtracking on the l1 merit, with one second-order
        # correction attempt against the Maratos effect. The floating-point
        # noise floor of the merit keeps final Newton steps acceptable.
        t = 1.0
        accepted = False
        soc_tried = False
        noise = 1e-12 * (1.0 + abs(phi0))
        f_t, ce_t, ci_t = f, ce, ci
        for _ in range(opts.ls_max):
            zt = np.clip(z + t * p, lb, ub)
            try:
                f_t, ce_t, ci_t = problem.eval_fc(zt)
                ok = np.isfinite(f_t)
                if ce_t is not None:
                    ok = ok and np.all(np.isfinite(ce_t))
                if ci_t is not None:
                    ok = ok and np.all(np.isfinite(ci_t))
            except FloatingPointError:
                ok = False
            if ok:
                phi_t = f_t + sigma * _violation(ce_t, ci_t)
                slack = noise if t >= 0.5 else 0.0
                if phi_t <= phi0 + opts.armijo * t * min(descent, 0.0) + slack:
                    accepted = True
                    break
                if (not soc_tried and t >= 0.99 and je is not None and problem.n_eq
                        and ce_t is not None):
                    soc_tried = True
                    d = _soc_step(je, ce_t)
                    if d is not None:
                        z_soc = np.clip(z + p + d, lb, ub)
                        try:
                            f_s, ce_s, ci_s = problem.eval_fc(z_soc)
                            phi_s = f_s + sigma * _violation(ce_s, ci_s)
                            if (np.isfinite(phi_s)
                                    and phi_s <= phi0 + opts.armijo * min(descent, 0.0) + noise):
                                f_t, ce_t, ci_t = f_s, ce_s, ci_s
                                p = (z_soc - z)
                                accepted = True
                                break
                        except FloatingPointError:
                            pass
            t *= 0.5
        if not accepted or float(np.max(np.abs(t * p), initial=0.0)) < 1e-14:
            if opts.tol_obj_stall > 0.0 and feas <= opts.tol_feas:
                stall_count += 1
                if stall_count >= 3:
                    lam_ref, stat_ref = _refine_multipliers(g, je, z, lb, ub)
                    if lam_ref is not None and lam_ref.shape[0] == problem.n_eq:
                        lam = lam_ref
                    stat = stat_ref
                    status = "converged" if stat <= opts.tol_stat else "stalled"
                    log.append((it, f, stat, feas, 0.0))
                    break
            levenberg = max(levenberg * 10.0, 1e-8)
            if levenberg > opts.levenberg_max:
                z, f, ce, ci, g, je, ji, restored = _restoration(problem, z, opts)
                if not restored:
                    status = "restoration_failed"
                    break
                levenberg = opts.levenberg0
                lam = np.zeros(problem.n_eq)
                mu = np.zeros(problem.n_ineq)
                if bfgs is not None:
                    bfgs = _Bfgs(problem.n)
                continue
            log.append((it, f, stat, feas, 0.0))
            continue

        z_new = np.clip(z + t * p, lb, ub)
        step_norm = float(np.linalg.norm(z_new - z))
        lam, mu, mult_bounds = lam_new, mu_new, mb

        g_new, je_new, ji_new = problem.eval_derivs(z_new)
        if bfgs is not None:
            gl_old = g.copy()
            gl_new = g_new.copy()
            if je is not None and problem.n_eq:
                gl_old += _as_csc(je).T @ lam
                gl_new += _as_csc(je_new).T @ lam
            if ji is not None and problem.n_ineq:
                gl_old += _as_csc(ji).T @ mu
                gl_new += _as_csc(ji_new).T @ mu
            bfgs.update(z_new - z, gl_new - gl_old)

        phi_new = f_t + sigma * _violation(ce_t, ci_t)
        improvement = phi0 - phi_new
        if (opts.tol_obj_stall > 0.0
                and _feas_inf(ce_t, ci_t) <= opts.tol_feas
                and improvement < opts.tol_obj_stall * (1.0 + abs(phi0))):
            stall_count += 1
        else:
            stall_count = 0

        z, f, ce, ci = z_new, f_t, ce_t, ci_t
        g, je, ji = g_new, je_new, ji_new
        # trust-region flavored damping: expand on full steps, shrink on cuts
        if t >= 0.99:
            levenberg = max(levenberg / 3.0, 1e-10)
        elif t >= 0.24:
            levenberg = min(levenberg * 3.0, opts.levenberg_max / 10.0)
        else:
            levenberg = min(levenberg * 10.0, opts.levenberg_max / 10.0)
        if stall_count >= 3:
            lam_ref, stat_ref = _refine_multipliers(g, je, z, lb, ub)
            if lam_ref is not None and lam_ref.shape[0] == problem.n_eq:
                lam = lam_ref
            stat = stat_ref
            feas = _feas_inf(ce, ci)
            status = "converged" if stat <= opts.tol_stat else "stalled"
            log.append((it, f, stat, feas, float(np.linalg.norm(t * p))))
            break
        log.append((it, f, stat, feas, step_norm))
        if opts.verbose:
            print(f"[{problem.name}] it={it} f={f:.6g} stat={stat:.3g} feas={feas:.3g} t={t:.3g}")

    sol = NlpSolution(
        z=z, obj=f, lam_eq=lam, lam_ineq=mu, mult_bounds=mult_bounds,
        stationarity=stat, feasibility=feas, iterations=it, status=status,
        log=log, bound_state=bound_state, active_ineq=active_ineq,
    )
    if opts.log_path:
        sol.write_log(opts.log_path)
    return sol


def _refine_multipliers(g, je, z, lb, ub):
    """Least-squares equality multipliers on the strictly free variables."""
    if je is None:
        return None, _stationarity(z, g, lb, ub)
    A = _as_csc(je)
    n = z.shape[0]
    tol_b = 1e-9
    free = (z > lb + tol_b) & (z < ub - tol_b)
    fidx = np.flatnonzero(free)
    Af = A[:, fidx]
    me = A.shape[0]
    kkt = sp.bmat(
        [[sp.identity(fidx.size, format="csc"), Af.T],
         [Af, -_DUAL_REG * sp.identity(me, format="csc")]], format="csc"
    )
    try:
        sol = spla.splu(kkt).solve(np.concatenate([-g[fidx], np.zeros(me)]))
    except RuntimeError:
        return None, _stationarity(z, g, lb, ub)
    lam = sol[fidx.size:]
    r = g + A.T @ lam
    return lam, _stationarity(z, r, lb, ub)


def _soc_step(je, ce_trial) -> Optional[np.ndarray]:
    """Minimum-norm equality correction d = -J^T (J J^T)^{-1} c."""
    J = _as_csc(je)
    try:
        JJt = (J @ J.T + _DUAL_REG * sp.identity(J.shape[0])).tocsc()
        y = spla.splu(JJt).solve(ce_trial)
    except RuntimeError:
        return None
    return -np.asarray(J.T @ y).ravel()


def _restoration(problem: NlpProblem, z, opts: SolverOptions):
    """Gauss-Newton feasibility restoration under the box bounds."""
    lb, ub = problem.lb, problem.ub
    z = z.copy()
    improved = False
    for _ in range(25):
        f, ce, ci = problem.eval_fc(z)
        feas = _feas_inf(ce, ci)
        if feas <= 10.0 * opts.tol_feas:
            improved = True
            break
        g, je, ji = problem.eval_derivs(z)
        res_blocks = []
        jac_blocks = []
        if ce is not None and ce.size:
            res_blocks.append(ce)
            jac_blocks.append(_as_csc(je))
        if ci is not None and ci.size:
            act = ci > 0.0
            if np.any(act):
                res_blocks.append(ci[act])
                jac_blocks.append(_as_csc(ji)[np.flatnonzero(act)])
        if not res_blocks:
            improved = True
            break
        r = np.concatenate(res_blocks)
        J = sp.vstack(jac_blocks).tocsc()
        H = (J.T @ J + 1e-6 * sp.identity(problem.n)).tocsc()
        gr = np.asarray(J.T @ r).ravel()
        p, *_ = solve_box_qp(H, gr, None, None, None, None, lb - z, ub - z)
        # backtrack on the residual norm
        base = float(r @ r)
        t = 1.0
        for _ in range(20):
            zt = np.clip(z + t * p, lb, ub)
            _, ce_t, ci_t = problem.eval_fc(zt)
            rt = 0.0
            if ce_t is not None and ce_t.size:
                rt += float(ce_t @ ce_t)
            if ci_t is not None and ci_t.size:
                rt += float(np.sum(np.maximum(ci_t, 0.0) ** 2))
            if np.isfinite(rt) and rt < base * (1.0 - 1e-4 * t):
                z = zt
                improved = True
                break
            t *= 0.5
        else:
            break
    f, ce, ci = problem.eval_fc(z)
    g, je, ji = problem.eval_derivs(z)
    return z, f, ce, ci, g, je, ji, improved


# -- derivative checking ------------------------------------------------------

@dataclass
class DerivReport:
    grad_dev: float
    jac_eq_dev: float
    jac_ineq_dev: float

    @property
    def max_dev(self) -> float:
        return max(self.grad_dev, self.jac_eq_dev, self.jac_ineq_dev)


def check_derivatives(problem: NlpProblem, z) -> DerivReport:
    """Max relative deviation between the problem's derivatives and central
    finite differences (step 1e-6 (1+|z_i|))."""
    z = np.asarray(z, dtype=float)
    g, je, ji = problem.eval_derivs(z)

    def rel(a, b):
        if a is None:
            return 0.0
        a = np.asarray(a if not sp.issparse(a) else a.toarray())
        b = np.asarray(b)
        scale = 1.0 + np.abs(b)
        return float(np.max(np.abs(a - b) / scale))

    g_fd = ad.fd_gradient(lambda x: problem.eval_fc(x)[0], z)
    dev_g = rel(g, g_fd)
    dev_e = 0.0
    if problem.n_eq:
        je_fd = ad.fd_jacobian(lambda x: problem.eval_fc(x)[1], z)
        dev_e = rel(je, je_fd)
    dev_i = 0.0
    if problem.n_ineq:
        ji_fd = ad.fd_jacobian(lambda x: problem.eval_fc(x)[2], z)
        dev_i = rel(ji, ji_fd)
    return DerivReport(dev_g, dev_e, dev_i)
