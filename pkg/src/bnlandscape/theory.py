"""Randomized numerical checks of the BatchNorm landscape results.

Every check compares a BatchNorm network with the identical network without
it.  The two share the input batch ``X``, the weights ``W`` and a downstream
loss applied to the layer output.  The BN branch uses ``gamma = sigma`` and
``beta = mu``, so both branches evaluate the downstream loss at the same
activations and share its gradient there.

All gradients come from the autodiff core (the BN branch is built from
primitive ops, not from the closed-form backward), and all second-order
quantities from finite-difference Hessian-vector products.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .norm_layers import BatchNormParams, bn_backward, bn_composite, bn_forward, bn_input_jacobian
from .tensor_core import Graph, Node, Rng, fd_grad, hvp

__all__ = [
    "DOWNSTREAM_KINDS",
    "Downstream",
    "CoupledPair",
    "CheckReport",
    "build_coupled_pair",
    "make_downstream",
    "check_lipschitz",
    "check_smoothness",
    "check_minimax_lipschitz",
    "check_minimax_smoothness",
    "check_minimax_smoothness_homogeneity",
    "check_rescaling_observation",
    "check_init_lemma",
    "check_bn_gradient_facts",
    "mixed_error",
]

DOWNSTREAM_KINDS = ("quadratic", "smooth", "softmax_ce", "linear")
PSD_DELTA = 1e-3
_TINY = 1e-300


def mixed_error(a, b) -> float:
    """``max|a - b| / max(|a|, |b|, 1)``: relative for large entries, absolute near zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1.0))


def _rel(x: float, scale: float) -> float:
    return x / scale if scale > _TINY else x


@dataclass
class Downstream:
    """A convex scalar loss of an ``m x d`` activation matrix."""

    kind: str
    arrays: dict = field(default_factory=dict)

    def attach(self, g: Graph, v: Node) -> Node:
        a = self.arrays
        if self.kind == "quadratic":
            return g.apply("quad_form", v - g.const(a["c"]), A=a["A"])
        if self.kind == "smooth":
            return ((v - g.const(a["c"])) @ g.const(a["M"])).logcosh().sum()
        if self.kind == "softmax_ce":
            return g.apply("softmax_ce", v @ g.const(a["V"]), g.const(a["onehot"]))
        if self.kind == "linear":
            return (v * g.const(a["R"])).sum()
        raise ValueError(f"unknown downstream kind {self.kind!r}")


def make_downstream(kind: str, m: int, d: int, rng: Rng) -> Downstream:
    if kind == "quadratic":
        n = m * d
        B = rng.normal(size=(n, n)) / np.sqrt(n)
        return Downstream(kind, {"A": B.T @ B + PSD_DELTA * np.eye(n), "c": rng.normal(size=(m, d))})
    if kind == "smooth":
        return Downstream(kind, {"M": rng.normal(size=(d, d)) / np.sqrt(d),
                                 "c": rng.normal(size=(m, d))})
    if kind == "softmax_ce":
        k = 3
        return Downstream(kind, {"V": rng.normal(size=(d, k)),
                                 "onehot": np.eye(k)[rng.integers(0, k, size=m)]})
    if kind == "linear":
        return Downstream(kind, {"R": rng.normal(size=(m, d))})
    raise ValueError(f"unknown downstream kind {kind!r}; choose from {DOWNSTREAM_KINDS}")


class _GradFn:
    """Loss and gradient of ``Y -> downstream(f(Y))`` for one fixed graph."""

    def __init__(self, build):
        self.g = Graph()
        root = self.g.root("y")
        self.g.set_output(build(self.g, root))

    def loss(self, Y) -> float:
        return self.g.forward({"y": Y})

    def __call__(self, Y) -> np.ndarray:
        self.g.forward({"y": Y})
        return self.g.backward()["y"]


@dataclass
class CoupledPair:
    X: np.ndarray
    W: np.ndarray
    y: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    y_hat: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    downstream: Downstream
    seed: int = 0

    def __post_init__(self):
        ds, gamma, beta = self.downstream, self.gamma, self.beta
        self.vanilla_grad = _GradFn(lambda g, y: ds.attach(g, y))
        self.bn_grad = _GradFn(lambda g, y: ds.attach(
            g, bn_composite(g, y, g.const(gamma), g.const(beta), eps=0.0)))

    @property
    def m(self) -> int:
        return self.y.shape[0]

    @property
    def d(self) -> int:
        return self.y.shape[1]


def _standardize(y):
    m = y.shape[0]
    mu = y.sum(axis=0) / m
    sigma = np.sqrt(((y - mu) ** 2).sum(axis=0) / m)
    return mu, sigma


def build_coupled_pair(m: int, d: int, kind: str = "quadratic", seed: int = 0, *,
                       d_in: int | None = None, max_tries: int = 100,
                       gamma: np.ndarray | None = None) -> CoupledPair:
    """Random coupled vanilla/BN instance.

    ``gamma`` defaults to the batch std (the coupling); passing another
    value keeps ``beta = mu`` and breaks only the scale coupling.  For the
    quadratic downstream the centre ``c`` is chosen so that every unit's
    activation gradient ``g_j`` has ``<g_j, y_hat_j> > 0``.
    """
    if m < 3:
        raise ValueError(f"coupled pair needs m >= 3, got m={m}")
    if d < 1:
        raise ValueError("d must be >= 1")
    d_in = d if d_in is None else d_in
    rng = Rng(seed).split("pair")
    for attempt in range(max_tries):
        r = rng.split("xw", attempt)
        X = r.normal(size=(m, d_in))
        W = r.normal(size=(d_in, d)) / np.sqrt(d_in)
        y = X @ W
        mu, sigma = _standardize(y)
        if sigma.min() > 1e-3 * max(1.0, np.abs(y).max()):
            break
    else:
        raise ValueError(f"no non-degenerate batch after {max_tries} tries")
    y_hat = (y - mu) / sigma
    ds = make_downstream(kind, m, d, rng.split("downstream"))
    if kind == "quadratic":
        target = rng.split("target").normal(size=(m, d))
        flip = np.einsum("bj,bj->j", target, y_hat) < 0
        target[:, flip] *= -1.0
        A = ds.arrays["A"]
        ds.arrays["c"] = y - np.linalg.solve(A, target.reshape(-1)).reshape(m, d)
    g = sigma.copy() if gamma is None else np.asarray(gamma, dtype=np.float64).reshape(d)
    return CoupledPair(X, W, y, mu, sigma, y_hat, g, mu.copy(), ds, seed)


@dataclass
class CheckReport:
    name: str
    lhs: float
    rhs: float
    residual: float | None
    residual_tol: float | None
    slack: float | None
    slack_tol: float | None
    seed: int | None = None
    conditions: list = field(default_factory=list)  # extra (label, value, tol, "max"|"min")
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        ok = True
        if self.residual is not None:
            ok &= abs(self.residual) <= self.residual_tol
        if self.slack is not None:
            ok &= self.slack >= -self.slack_tol
        for _, value, tol, kind in self.conditions:
            ok &= (abs(value) <= tol) if kind == "max" else (value >= -tol)
        return bool(ok)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["passed"] = self.passed
        return out


def _unit_terms(pair: CoupledPair):
    """Activation gradients of both branches at the coupled point."""
    return pair.vanilla_grad(pair.y), pair.bn_grad(pair.y)


def check_lipschitz(pair: CoupledPair, tol: float = 1e-9) -> CheckReport:
    """Gradient-norm reduction by BN, as an inequality and as the exact projection identity."""
    g, gh = _unit_terms(pair)
    m = pair.m
    lhs, rhs, res, slack = [], [], [], []
    for j in range(pair.d):
        gj, yh = g[:, j], pair.y_hat[:, j]
        k = pair.gamma[j] / pair.sigma[j]
        lhs_j = float(gh[:, j] @ gh[:, j])
        rhs_j = k**2 * float(gj @ gj - gj.sum() ** 2 / m - (gj @ yh) ** 2 / m)
        centered = gj - gj.mean()
        predicted = k * (centered - yh * (centered @ yh) / m)
        gnorm = abs(k) * float(np.linalg.norm(gj))
        res.append(_rel(float(np.linalg.norm(gh[:, j] - predicted)), gnorm))
        slack.append(_rel(rhs_j - lhs_j, gnorm**2))
        lhs.append(lhs_j)
        rhs.append(rhs_j)
    return CheckReport("lipschitz", sum(lhs), sum(rhs), max(res), tol, min(slack), tol,
                       pair.seed, details={"lhs_units": lhs, "rhs_units": rhs,
                                           "residual_units": res, "slack_units": slack})


def _smoothness_units(pair: CoupledPair, eps: float):
    """Per aligned unit: BN-branch quadratic form, its predicted value and a scale."""
    g, gh = _unit_terms(pair)
    m, Y = pair.m, pair.y
    out = []
    for j in range(pair.d):
        gj, yh = g[:, j], pair.y_hat[:, j]
        align = float(gj @ yh)
        if not align > 0:
            continue
        gamma, sigma = pair.gamma[j], pair.sigma[j]
        V = np.zeros_like(Y)
        V[:, j] = gh[:, j]
        vv = float(gh[:, j] @ gh[:, j])
        if vv == 0:
            out.append(dict(unit=j, lhs=0.0, vHv=0.0, align=align, vv=0.0, rhs=0.0, scale=0.0,
                            second_rhs=None))
            continue
        lhs = float(np.sum(V * hvp(pair.bn_grad, Y, V, eps)))
        vHv = float(np.sum(V * hvp(pair.vanilla_grad, Y, V, eps)))
        k2 = (gamma / sigma) ** 2
        curv = gamma / (m * sigma**2) * align * vv
        rhs = k2 * vHv - curv
        G = np.zeros_like(Y)
        G[:, j] = gj
        gHg = float(np.sum(G * hvp(pair.vanilla_grad, Y, G, eps))) if gj.any() else 0.0
        second = k2 * (gHg - align * vv / (m * gamma))
        out.append(dict(unit=j, lhs=lhs, vHv=vHv, align=align, vv=vv, rhs=rhs,
                        scale=k2 * abs(vHv) + abs(curv) + abs(lhs), second_rhs=second))
    return out


def check_smoothness(pair: CoupledPair, tol: float = 1e-4, eps: float = 1e-4) -> CheckReport:
    """Curvature along the gradient with BN versus the rescaled vanilla curvature.

    Only units with ``<g_j, y_hat_j> > 0`` are checked.  The right-hand side
    of the bound is also an exact identity, so both are asserted.  The
    second bound (which needs an extra premise on the Hessian) is reported
    in ``details`` without being asserted.
    """
    units = _smoothness_units(pair, eps)
    if not units:
        raise ValueError("no unit satisfies <g, y_hat> > 0")
    res = [_rel(abs(u["lhs"] - u["rhs"]), u["scale"]) for u in units]
    slack = [_rel(u["rhs"] - u["lhs"], u["scale"]) for u in units]
    return CheckReport("smoothness", sum(u["lhs"] for u in units), sum(u["rhs"] for u in units),
                       max(res), tol, min(slack), tol, pair.seed,
                       details={"units": [u["unit"] for u in units],
                                "lhs_units": [u["lhs"] for u in units],
                                "rhs_units": [u["rhs"] for u in units],
                                "second_bound_rhs_units": [u["second_rhs"] for u in units],
                                "skipped_units": sorted(set(range(pair.d)) - {u["unit"] for u in units})})


def check_minimax_lipschitz(pair: CoupledPair, lam: float, tol: float = 1e-9) -> CheckReport:
    """Worst-case weight-gradient norm over inputs with spectral norm <= lam.

    The maximum of ``|X^T v|^2`` over ``|X|_2 <= lam`` is ``lam^2 |v|^2``;
    the bound checked is the per-unit one with ``1/m`` factors.  The
    maximizer is realized explicitly by ``X = lam * v_hat u^T``.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    g, gh = _unit_terms(pair)
    m, d_in = pair.m, pair.X.shape[1]
    rng = Rng(pair.seed).split("minimax_u")
    lhs, rhs, slack, attain = [], [], [], []
    for j in range(pair.d):
        gj, yh, v = g[:, j], pair.y_hat[:, j], gh[:, j]
        k2 = (pair.gamma[j] / pair.sigma[j]) ** 2
        ghat = lam**2 * float(v @ v)
        bound = lam**2 * k2 * float(gj @ gj - gj.sum() ** 2 / m - (gj @ yh) ** 2 / m)
        slack.append(_rel(bound - ghat, lam**2 * k2 * float(gj @ gj)))
        u = rng.split(j).normal(size=d_in)
        u /= np.linalg.norm(u)
        vn = float(np.linalg.norm(v))
        X = lam * np.outer(v / vn, u) if vn > 0 else np.zeros((m, d_in))
        achieved = float(np.sum((X.T @ v) ** 2))
        spec_err = abs(np.linalg.norm(X, 2) - lam) if vn > 0 else 0.0
        attain.append(max(_rel(abs(achieved - ghat), ghat), _rel(spec_err, lam)))
        lhs.append(ghat)
        rhs.append(bound)
    return CheckReport("minimax_lipschitz", sum(lhs), sum(rhs), max(attain), tol, min(slack), tol,
                       pair.seed, details={"lambda": lam, "lhs_units": lhs, "rhs_units": rhs})


def _orthogonal(m: int, rng: Rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(m, m)))
    return q * np.sign(np.diag(r))


def _weight_space_forms(pair: CoupledPair, lam: float, eps: float, units):
    """Weight-space curvature along the weight gradient for inputs ``X = lam * Q``.

    ``W = Q^T Y / lam`` keeps the activations at ``Y``.  The HVP step is
    ``eps / lam`` so the activation-space step is the same for every lam.
    """
    Q = _orthogonal(pair.m, Rng(pair.seed).split("minimax_q"))
    Xl = lam * Q
    Wl = Q.T @ pair.y / lam
    ds, gamma, beta = pair.downstream, pair.gamma, pair.beta
    grad_w = _GradFn(lambda g, w: ds.attach(
        g, bn_composite(g, g.const(Xl) @ w, g.const(gamma), g.const(beta), eps=0.0)))
    G = grad_w(Wl)
    out = []
    for j in units:
        D = np.zeros_like(Wl)
        D[:, j] = G[:, j]
        out.append(float(np.sum(D * hvp(grad_w, Wl, D, eps / lam))) if D.any() else 0.0)
    return out


def check_minimax_smoothness(pair: CoupledPair, lam: float, tol: float = 1e-4,
                             eps: float = 1e-4) -> CheckReport:
    """Weight-space curvature along the gradient at an input attaining the max over ``|X| <= lam``.

    With ``X = lam * Q`` (``Q`` orthogonal) the weight-space form equals
    ``lam^4`` times the activation-space form, so the checked bound is the
    activation-space one scaled by ``lam^4``.
    """
    if not lam > 0:
        raise ValueError("lambda must be > 0")
    units = _smoothness_units(pair, eps)
    if not units:
        raise ValueError("no unit satisfies <g, y_hat> > 0")
    lhs = _weight_space_forms(pair, lam, eps, [u["unit"] for u in units])
    rhs = [lam**4 * u["rhs"] for u in units]
    scale = [lam**4 * u["scale"] for u in units]
    res = [_rel(abs(a - b), s) for a, b, s in zip(lhs, rhs, scale)]
    slack = [_rel(b - a, s) for a, b, s in zip(lhs, rhs, scale)]
    return CheckReport("minimax_smoothness", sum(lhs), sum(rhs), max(res), tol, min(slack), tol,
                       pair.seed, details={"lambda": lam, "units": [u["unit"] for u in units],
                                           "lhs_units": lhs, "rhs_units": rhs})


def check_minimax_smoothness_homogeneity(pair: CoupledPair, lam_a: float = 1.0, lam_b: float = 2.0,
                                         tol: float = 1e-6, eps: float = 1e-4) -> CheckReport:
    """Both sides of the minimax smoothness bound scale as ``lam^4``."""
    a = check_minimax_smoothness(pair, lam_a, eps=eps)
    b = check_minimax_smoothness(pair, lam_b, eps=eps)
    ratio = (lam_b / lam_a) ** 4
    lhs_err = max(_rel(abs(y - ratio * x), abs(ratio * x))
                  for x, y in zip(a.details["lhs_units"], b.details["lhs_units"]))
    rhs_err = max(_rel(abs(y - ratio * x), abs(ratio * x))
                  for x, y in zip(a.details["rhs_units"], b.details["rhs_units"]))
    return CheckReport("minimax_smoothness_homogeneity", b.lhs, ratio * a.lhs, lhs_err, tol,
                       None, None, pair.seed,
                       conditions=[("rhs_homogeneity", rhs_err, tol, "max")],
                       details={"lam_a": lam_a, "lam_b": lam_b, "ratio": ratio})


def check_rescaling_observation(W, X, downstream: Downstream | None = None, seed: int = 0,
                                tol: float = 1e-12) -> CheckReport:
    """BN with ``gamma = sigma``, ``beta = mu`` reproduces the plain activations."""
    W = np.asarray(W, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    y = X @ W
    mu, sigma = _standardize(y)
    if (sigma == 0).any():
        raise ValueError("a unit has zero batch variance")
    z, _ = bn_forward(y, BatchNormParams(sigma, mu, eps=0.0))
    act = mixed_error(z, y)
    if downstream is None:
        downstream = make_downstream("quadratic", *y.shape, Rng(seed).split("rescale"))
    fn = _GradFn(lambda g, v: downstream.attach(g, v))
    ly, gy = fn.loss(y), fn(y)
    lz, gz = fn.loss(z), fn(z)
    loss_err = mixed_error(lz, ly)
    grad_err = mixed_error(gz, gy)
    return CheckReport("rescaling_observation", lz, ly, act, tol, None, None, seed,
                       conditions=[("loss_equal", loss_err, tol, "max"),
                                   ("grad_equal", grad_err, tol, "max")],
                       details={"max_abs_activation_diff": float(np.abs(z - y).max())})


def check_init_lemma(W0, Wstar, tol: float = 1e-10, slack_tol: float = 1e-9,
                     seed: int | None = None) -> CheckReport:
    """Distance from ``W0`` to the closest rescaled optimum ``k W*`` versus to ``W*``."""
    W0 = np.asarray(W0, dtype=np.float64)
    Ws = np.asarray(Wstar, dtype=np.float64)
    inner = float(np.sum(W0 * Ws))
    if not inner > 0:
        raise ValueError("the lemma needs <W0, W*> > 0")
    n2 = float(np.sum(Ws * Ws))
    k = inner / n2
    lhs = float(np.sum((W0 - k * Ws) ** 2))
    base = float(np.sum((W0 - Ws) ** 2))
    rhs = base - (n2 - inner) ** 2 / n2
    gap = n2 * (1 - k) ** 2
    residual = _rel(abs((lhs - base) + gap), base + gap)
    slack = _rel(rhs - lhs, base)
    return CheckReport("init_lemma", lhs, rhs, residual, tol, slack, slack_tol, seed,
                       details={"k": k})


def check_bn_gradient_facts(Y, params: BatchNormParams, downstream: Downstream | None = None,
                            seed: int = 0, auto_tol: float = 1e-10, fd_tol: float = 1e-6,
                            jacobian_max_m: int = 64) -> CheckReport:
    """Closed-form BN backward and Jacobian versus autodiff and finite differences."""
    Y = np.asarray(Y, dtype=np.float64)
    m, d = Y.shape
    Z, cache = bn_forward(Y, params)
    if downstream is None:
        dZ = Rng(seed).split("facts").normal(size=(m, d))
    else:
        dZ = _GradFn(lambda g, v: downstream.attach(g, v))(Z)
    dY, dgamma, dbeta = bn_backward(cache, params, dZ)

    g = Graph()
    y = g.root("y")
    gm = g.root("gamma")
    bt = g.root("beta")
    g.set_output((bn_composite(g, y, gm, bt, eps=params.eps) * g.const(dZ)).sum())
    g.forward({"y": Y, "gamma": params.gamma, "beta": params.beta})
    auto = g.backward()
    auto_err = max(mixed_error(dY, auto["y"]), mixed_error(dgamma, auto["gamma"]),
                   mixed_error(dbeta, auto["beta"]))

    def probe(Yv):
        return float(np.sum(bn_forward(Yv, params)[0] * dZ))

    fd_err = mixed_error(dY, fd_grad(probe, Y))
    conditions = [("fd_backward", fd_err, fd_tol, "max")]
    details = {"m": m, "d": d}
    if m <= jacobian_max_m:
        J = bn_input_jacobian(cache, params, max_m=jacobian_max_m)
        contracted = np.einsum("jbk,bj->kj", J, dZ)
        conditions.append(("jacobian_vs_backward", mixed_error(contracted, dY), auto_tol, "max"))
        jac_fd = np.zeros_like(J)
        for j in range(d):
            for k in range(m):
                def col(v, j=j, k=k):
                    Yv = Y.copy()
                    Yv[k, j] = v[0]
                    return bn_forward(Yv, params)[0][:, j]
                h = 1e-5
                jac_fd[j, :, k] = (col([Y[k, j] + h]) - col([Y[k, j] - h])) / (2 * h)
        conditions.append(("jacobian_fd", mixed_error(J, jac_fd), fd_tol, "max"))
    return CheckReport("bn_gradient_facts", float(np.abs(dY).sum()), float(np.abs(auto["y"]).sum()),
                       auto_err, auto_tol, None, None, seed, conditions=conditions, details=details)
