"""First-order (Adam) and quasi-Newton (L-BFGS) parameter updaters.

Both operate on flat dicts of numpy arrays (scalars are 0-d arrays) so the
pipeline stages can mix field grids, network weights and reparameterized
physical constants freely.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, LineSearchStalledError

ParamDict = dict[str, np.ndarray]


def _like(params: ParamDict) -> ParamDict:
    return {k: np.zeros_like(v) for k, v in params.items()}


@dataclass
class AdamState:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: ParamDict | None = None
    v: ParamDict | None = None

    def ensure(self, params: ParamDict):
        if self.m is None:
            self.m = _like(params)
            self.v = _like(params)


def adam_step(state: AdamState, params: ParamDict, grads: ParamDict, lr: float | None = None):
    """One bias-corrected Adam update; mutates and returns (state, params)."""
    state.ensure(params)
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise InvalidInputError(f"non-finite gradient for {k!r}; no update applied")
    state.step += 1
    t = state.step
    a = (lr if lr is not None else state.lr) * np.sqrt(1.0 - state.beta2**t) / (1.0 - state.beta1**t)
    for k, g in grads.items():
        if k not in params:
            continue
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        params[k] = params[k] - a * state.m[k] / (np.sqrt(state.v[k]) + state.eps)
    return state, params


def _flatten(params: ParamDict, keys):
    return np.concatenate([np.asarray(params[k], dtype=np.float64).ravel() for k in keys])


def _unflatten(vec: np.ndarray, template: ParamDict, keys) -> ParamDict:
    out = {}
    ofs = 0
    for k in keys:
        size = np.asarray(template[k]).size
        out[k] = vec[ofs : ofs + size].reshape(np.asarray(template[k]).shape).copy()
        ofs += size
    return out


@dataclass
class LbfgsState:
    m: int = 10  # history window
    armijo_c: float = 1e-4
    max_halvings: int = 20
    initial_step: float = 1.0
    s_hist: list = field(default_factory=list)
    y_hist: list = field(default_factory=list)


def lbfgs_step(state: LbfgsState, params: ParamDict, loss_grad_fn):
    """One two-loop-recursion step with Armijo backtracking.

    ``loss_grad_fn(params) -> (loss, grads)`` must be pure per evaluation.
    Raises LineSearchStalledError when backtracking fails; curvature pairs
    with s.y <= 0 are dropped.
    """
    keys = sorted(params.keys())
    x0 = _flatten(params, keys)
    f0, g0d = loss_grad_fn(_unflatten(x0, params, keys))
    g0 = _flatten(g0d, keys)
    if np.linalg.norm(g0) == 0.0:
        return state, params, f0

    # two-loop recursion
    q = g0.copy()
    alphas = []
    for s, y in zip(reversed(state.s_hist), reversed(state.y_hist)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        alphas.append((a, rho, s, y))
        q -= a * y
    if state.y_hist:
        s, y = state.s_hist[-1], state.y_hist[-1]
        q *= (s @ y) / (y @ y)
    for a, rho, s, y in reversed(alphas):
        b = rho * (y @ q)
        q += (a - b) * s
    d = -q
    gd = g0 @ d
    if gd >= 0.0:  # not a descent direction; fall back to steepest descent
        d = -g0
        gd = g0 @ d

    step = state.initial_step
    for _ in range(state.max_halvings):
        x1 = x0 + step * d
        f1, g1d = loss_grad_fn(_unflatten(x1, params, keys))
        if np.isfinite(f1) and f1 <= f0 + state.armijo_c * step * gd:
            g1 = _flatten(g1d, keys)
            s = x1 - x0
            y = g1 - g0
            if s @ y > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
                state.s_hist.append(s)
                state.y_hist.append(y)
                if len(state.s_hist) > state.m:
                    state.s_hist.pop(0)
                    state.y_hist.pop(0)
            new_params = _unflatten(x1, params, keys)
            for k in keys:
                params[k] = new_params[k]
            return state, params, f1
        step *= 0.5
    raise LineSearchStalledError(
        f"line search failed after {state.max_halvings} halvings (f0={f0:.6e})"
    )
