"""Numerical test of exact linearizability for single-input systems.

For dy/dt = f(y) + g(y) v, a linearizing coordinate change and feedback
exist if and only if the iterated brackets ad_f^0 g, ..., ad_f^{n-1} g are
linearly independent at every point and the distribution spanned by
ad_f^0 g, ..., ad_f^{n-2} g is involutive.  Both conditions are verified
here numerically at sampled points: independence through the singular
values of the bracket matrix, involutivity through the least-squares
residual of each pairwise bracket against the spanning set.  The result is
a report over the sampled box, not a proof for all y.

Vector fields are callables mapping an autodiff tensor to an autodiff
tensor, so Jacobians (and Jacobians of bracket fields, which contain
backward passes themselves) come from the graph engine.  A restricted
expression compiler turns plain text like "y2 + y3**2" into such fields
for the command line.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import NonFiniteError, ValidationError

DEFAULT_SAMPLES = 100
DEFAULT_TOL = 1e-6

# brackets whose norm sits at roundoff scale relative to the spanning set
# count as exactly zero, so cancellation noise cannot fail the check
ZERO_FLOOR = 1e-12


@dataclass(frozen=True)
class VectorFieldPair:
    """Drift and input fields of a single-input input-affine system."""

    f: object
    g: object
    n: int

    def __post_init__(self):
        if not callable(self.f) or not callable(self.g):
            raise ValidationError("vector fields must be callables over autodiff tensors")
        if self.n < 1:
            raise ValidationError("state dimension must be at least 1")


def _jacobian_and_value(field, x):
    out = field(x)
    n_out = out.shape[0]
    rows = []
    for i in range(n_out):
        seed = np.zeros(n_out)
        seed[i] = 1.0
        (gx,) = ad.backward(out, seed, [x])
        rows.append(gx)
    return ad.stack(rows, axis=0), out


def bracket_field(f, g):
    """The field y -> (dg/dy) f(y) - (df/dy) g(y), differentiable again."""

    def field(x):
        jf, fx = _jacobian_and_value(f, x)
        jg, gx = _jacobian_and_value(g, x)
        return ad.sub(ad.matvec(jg, fx), ad.matvec(jf, gx))

    return field


def _eval_field(field, y):
    x = ad.as_tensor(np.asarray(y, dtype=np.float64).reshape(-1))
    value = field(x).data
    if not np.all(np.isfinite(value)):
        raise NonFiniteError("vector field evaluation produced non-finite entries")
    return value


def lie_bracket(f, g, y):
    """[f, g](y) = (dg/dy) f(y) - (df/dy) g(y)."""
    return _eval_field(bracket_field(f, g), y)


def ad_power_field(f, g, k):
    """The iterated bracket field ad_f^k g as a callable."""
    if k < 0:
        raise ValidationError("bracket power must be nonnegative")
    field = g
    for _ in range(k):
        field = bracket_field(f, field)
    return field


def ad_power(f, g, k, y):
    """ad_f^k g evaluated at y (k = 0 gives g(y))."""
    return _eval_field(ad_power_field(f, g, k), y)


@dataclass(frozen=True)
class CheckReport:
    """Sampled linearizability evidence over a box.

    rank_ratios holds sigma_min/sigma_max of the bracket matrix per sample,
    ranks the numerical rank at the construction tolerance, and
    involutivity_residuals the worst relative projection residual per
    sample.  The verdict aggregates the worst sample; verdict_at re-applies
    the thresholds for a different tolerance on the same raw numbers.
    """

    points: np.ndarray
    rank_ratios: np.ndarray
    ranks: np.ndarray
    involutivity_residuals: np.ndarray
    tol: float
    verdict: str
    note: str = ("sampled numerical check on the given box; "
                 "not a proof for all states")

    def verdict_at(self, tol):
        if not tol > 0:
            raise ValidationError("tolerance must be positive")
        if np.any(self.rank_ratios <= tol):
            return "fail-rank"
        if np.any(self.involutivity_residuals >= tol):
            return "fail-involutive"
        return "pass"


def check_linearizable(system, domain, samples=DEFAULT_SAMPLES,
                       tol=DEFAULT_TOL, seed=0):
    """Sample the box and test spanning rank plus involutivity.

    domain is a (low, high) pair, each a scalar or length-n vector.  At each
    sampled point the brackets ad^0 g ... ad^{n-1} g must have numerical
    rank n (sigma_min > tol * sigma_max) and every pairwise bracket of
    ad^0 g ... ad^{n-2} g must project onto their span with relative
    residual below tol.  The verdict reports the first condition that fails
    anywhere ("fail-rank" before "fail-involutive"), else "pass".
    """
    if samples < 1:
        raise ValidationError("at least one sample point is required")
    if not tol > 0:
        raise ValidationError("tolerance must be positive")
    n = system.n
    low, high = domain
    low = np.broadcast_to(np.asarray(low, dtype=np.float64), (n,))
    high = np.broadcast_to(np.asarray(high, dtype=np.float64), (n,))
    if not np.all(low < high):
        raise ValidationError("domain must satisfy low < high per coordinate")

    rng = np.random.default_rng(seed)
    points = rng.uniform(low, high, size=(samples, n))

    powers = [ad_power_field(system.f, system.g, k) for k in range(n)]
    # [a, b] = -[b, a] and [a, a] = 0, so only i < j pairs carry information
    span_count = max(n - 1, 0)
    pair_fields = [bracket_field(powers[i], powers[j])
                   for i in range(span_count) for j in range(i + 1, span_count)]

    rank_ratios = np.empty(samples)
    ranks = np.empty(samples, dtype=int)
    invol = np.zeros(samples)
    for s in range(samples):
        y = points[s]
        D = np.column_stack([_eval_field(p, y) for p in powers])
        sigma = np.linalg.svd(D, compute_uv=False)
        top = sigma[0] if sigma[0] > 0 else 1.0
        rank_ratios[s] = sigma[-1] / top
        ranks[s] = int(np.count_nonzero(sigma > tol * sigma[0]))
        if pair_fields:
            span = D[:, :span_count]
            worst = 0.0
            for field in pair_fields:
                b = _eval_field(field, y)
                norm_b = float(np.linalg.norm(b))
                if norm_b <= ZERO_FLOOR * (1.0 + sigma[0]):
                    continue
                coef = np.linalg.lstsq(span, b, rcond=None)[0]
                worst = max(worst, float(np.linalg.norm(b - span @ coef)) / norm_b)
            invol[s] = worst

    report = CheckReport(points=points, rank_ratios=rank_ratios, ranks=ranks,
                         involutivity_residuals=invol, tol=float(tol), verdict="")
    object.__setattr__(report, "verdict", report.verdict_at(tol))
    return report


# ---------------------------------------------------------------------------
# built-in systems

def integrator_chain(n):
    """y1' = y2, ..., y_{n-1}' = y_n, y_n' = v: linearizable by inspection."""

    def f(x):
        shifted = ad.narrow(x, 0, 1, n - 1)
        return ad.concat([shifted, ad.constant(np.zeros(1))], axis=0)

    def g(x):
        e_last = np.zeros(n)
        e_last[-1] = 1.0
        return ad.constant(e_last)

    if n < 2:
        raise ValidationError("the chain needs at least two states")
    return VectorFieldPair(f=f, g=g, n=n)


def linear_fields(F, G):
    """f(y) = F y, g(y) = G (constant input field)."""
    F = np.atleast_2d(np.asarray(F, dtype=np.float64))
    G = np.asarray(G, dtype=np.float64).reshape(-1)
    n = F.shape[0]
    if F.shape != (n, n) or G.shape != (n,):
        raise ValidationError("linear fields need F (n x n) and G (n,)")

    def f(x):
        return ad.matvec(ad.constant(F), x)

    def g(x):
        return ad.constant(G)

    return VectorFieldPair(f=f, g=g, n=n)


def noninvolutive_chain():
    """A 3-state chain with quadratic cross-feed: full bracket rank at every
    point, but the two-field distribution is not involutive, so no
    linearizing coordinates exist."""
    return VectorFieldPair(f=compile_field(["y2 + y3**2", "y3", "0"], 3),
                           g=compile_field(["0", "0", "1"], 3), n=3)


# ---------------------------------------------------------------------------
# restricted expression compiler

_FUNCS = {"sinh": ad.sinh, "asinh": ad.asinh, "cosh": ad.cosh, "exp": ad.exp,
          "log": ad.log, "softplus": ad.softplus, "relu": ad.relu,
          "square": ad.square}
_BINOPS = {ast.Add: ad.add, ast.Sub: ad.sub, ast.Mult: ad.mul}


def _compile_node(node, n):
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
            and not isinstance(node.value, bool):
        value = float(node.value)
        return lambda x: ad.constant(np.array([value]))
    if isinstance(node, ast.Name):
        name = node.id
        if name.startswith("y") and name[1:].isdigit():
            idx = int(name[1:])
            if 1 <= idx <= n:
                return lambda x: ad.narrow(x, 0, idx - 1, 1)
        raise ValidationError(f"unknown name {name!r}; states are y1..y{n}")
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        inner = _compile_node(node.operand, n)
        if isinstance(node.op, ast.UAdd):
            return inner
        return lambda x: ad.mul(ad.constant(np.array([-1.0])), inner(x))
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        op = _BINOPS[type(node.op)]
        left = _compile_node(node.left, n)
        right = _compile_node(node.right, n)
        return lambda x: op(left(x), right(x))
    if isinstance(node, ast.BinOp) and isinstance(node.op, ast.Pow):
        if not (isinstance(node.right, ast.Constant)
                and isinstance(node.right.value, int) and node.right.value >= 0):
            raise ValidationError("** needs a literal nonnegative integer exponent")
        power = node.right.value
        base = _compile_node(node.left, n)
        if power == 0:
            return lambda x: ad.constant(np.ones(1))

        def repeated(x):
            value = base(x)
            result = value
            for _ in range(power - 1):
                result = ad.mul(result, value)
            return result

        return repeated
    if isinstance(node, ast.Call):
        if (not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS
                or len(node.args) != 1 or node.keywords):
            raise ValidationError(
                f"only single-argument calls to {sorted(_FUNCS)} are allowed")
        fn = _FUNCS[node.func.id]
        inner = _compile_node(node.args[0], n)
        return lambda x: fn(inner(x))
    raise ValidationError(f"expression element {type(node).__name__} is not allowed")


def compile_field(components, n):
    """Compile n expression strings over y1..yn into a vector field.

    The grammar is numbers, state names, + - * and integer **, and the
    elementwise functions of the graph engine; no division, no attribute
    access, no general calls.  Raises ValidationError on anything else.
    """
    if len(components) != n:
        raise ValidationError(f"expected {n} component expressions, got {len(components)}")
    compiled = []
    for text in components:
        try:
            tree = ast.parse(text, mode="eval")
        except SyntaxError as exc:
            raise ValidationError(f"cannot parse {text!r}: {exc.msg}") from exc
        compiled.append(_compile_node(tree.body, n))

    def field(x):
        return ad.concat([comp(x) for comp in compiled], axis=0)

    return field
