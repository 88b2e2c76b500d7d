"""Dense matrix numerics.

Closed-form ridge reconstruction, probability utilities, and a small
reverse-mode gradient tape over recorded matrix computations.  All internal
arithmetic is 64-bit; callers hand in anything array-like and get float64
ndarrays back.

The tape is deliberately narrow: it records only the operations the losses
in this package compose (matmul, the ridge solve, per-channel affine maps,
grouped squared errors, cross-entropy and KL from logits).  A tape lives
inside one computation and is never shared across threads.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from .errors import DimensionMismatch, NonFiniteGradient, SingularSystem

KL_FLOOR = 1e-12


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Validate a 2-D finite float64 array."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def ridge_solve(targets, basis, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form ridge reconstruction of `targets` rows from `basis` rows.

    Solves min_W ||T - W C||_F^2 + lam ||W||_F^2 and returns
    (mapping, reconstruction) with mapping = T C^T (C C^T + lam I)^-1 and
    reconstruction = mapping C.  The Gram-plus-ridge system is solved by
    Cholesky factorization, never an explicit inverse.

    Raises SingularSystem when lam = 0 and the Gram matrix is not
    numerically positive definite.
    """
    T = as_matrix(targets, "targets")
    C = as_matrix(basis, "basis")
    if T.shape[1] != C.shape[1]:
        raise DimensionMismatch(
            f"targets have {T.shape[1]} channels, basis has {C.shape[1]}"
        )
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    gram = C @ C.T
    if lam > 0:
        gram = gram + lam * np.eye(C.shape[0])
    try:
        factor = scipy.linalg.cho_factor(gram, lower=True, check_finite=False)
        mapping = scipy.linalg.cho_solve(factor, C @ T.T, check_finite=False).T
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise SingularSystem(
            f"Gram system not positive definite at lambda={lam}"
        ) from exc
    if not np.all(np.isfinite(mapping)):
        raise SingularSystem(f"solve produced non-finite mapping at lambda={lam}")
    return mapping, mapping @ C


def softmax(logits) -> np.ndarray:
    """Stable softmax over the last axis, with max-subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise ValueError("softmax of empty input")
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax requires finite logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def kl_divergence(p, q) -> float:
    """Forward KL divergence sum p_i log(p_i / q_i).

    Uses the 0 log 0 = 0 convention; q entries are floored at 1e-12 before
    division.  Both inputs must be probability vectors of equal length.
    """
    pa = np.asarray(p, dtype=np.float64)
    qa = np.asarray(q, dtype=np.float64)
    if pa.shape != qa.shape or pa.ndim != 1:
        raise DimensionMismatch(f"KL shapes differ: {pa.shape} vs {qa.shape}")
    for name, v in (("p", pa), ("q", qa)):
        if np.any(v < 0):
            raise ValueError(f"{name} has negative entries")
        if abs(v.sum() - 1.0) > 1e-6:
            raise ValueError(f"{name} does not sum to 1 (sum={v.sum()!r})")
    qa = np.maximum(qa, KL_FLOOR)
    mask = pa > 0
    return float(np.sum(pa[mask] * np.log(pa[mask] / qa[mask])))


# ---------------------------------------------------------------------------
# Reverse-mode tape
# ---------------------------------------------------------------------------


class Node:
    """One recorded value in the computation graph.

    `rule` names the local-gradient rule that produced the node; `_push`
    propagates the accumulated output gradient into the parents.  The graph
    is acyclic by construction and `backward` visits each node exactly once.
    """

    __slots__ = ("value", "parents", "rule", "_push", "grad", "needs_grad")

    def __init__(self, value, parents=(), rule="leaf", push=None, needs_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.rule = rule
        self._push = push
        self.grad = None
        self.needs_grad = needs_grad

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Node({self.rule}, shape={self.value.shape})"


def constant(x) -> Node:
    return Node(x, rule="const", needs_grad=False)


def parameter(x) -> Node:
    return Node(x, rule="param", needs_grad=True)


def _wants(*nodes: Node) -> bool:
    return any(n.needs_grad for n in nodes)


def add(a: Node, b: Node) -> Node:
    out = Node(a.value + b.value, (a, b), "add", needs_grad=_wants(a, b))

    def push():
        if a.needs_grad:
            a.accumulate(out.grad)
        if b.needs_grad:
            b.accumulate(out.grad)

    out._push = push
    return out


def sub(a: Node, b: Node) -> Node:
    out = Node(a.value - b.value, (a, b), "sub", needs_grad=_wants(a, b))

    def push():
        if a.needs_grad:
            a.accumulate(out.grad)
        if b.needs_grad:
            b.accumulate(-out.grad)

    out._push = push
    return out


def scale(a: Node, c: float) -> Node:
    out = Node(a.value * c, (a,), "scale", needs_grad=a.needs_grad)

    def push():
        if a.needs_grad:
            a.accumulate(out.grad * c)

    out._push = push
    return out


def matmul(a: Node, b: Node) -> Node:
    out = Node(a.value @ b.value, (a, b), "matmul", needs_grad=_wants(a, b))

    def push():
        if a.needs_grad:
            a.accumulate(out.grad @ b.value.T)
        if b.needs_grad:
            b.accumulate(a.value.T @ out.grad)

    out._push = push
    return out


def transpose(a: Node) -> Node:
    out = Node(a.value.T, (a,), "transpose", needs_grad=a.needs_grad)

    def push():
        if a.needs_grad:
            a.accumulate(out.grad.T)

    out._push = push
    return out


def add_scaled_identity(a: Node, lam: float) -> Node:
    """A + lam I for a square node."""
    out = Node(
        a.value + lam * np.eye(a.value.shape[0]),
        (a,),
        "add_scaled_identity",
        needs_grad=a.needs_grad,
    )

    def push():
        if a.needs_grad:
            a.accumulate(out.grad)

    out._push = push
    return out


def posdef_solve(a: Node, b: Node) -> Node:
    """X = A^-1 B for symmetric positive definite A (Cholesky).

    Backward reuses the forward factorization:
    gB = A^-1 gX, gA = -gB X^T.
    """
    try:
        factor = scipy.linalg.cho_factor(a.value, lower=True, check_finite=False)
        x = scipy.linalg.cho_solve(factor, b.value, check_finite=False)
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise SingularSystem("posdef_solve: system not positive definite") from exc
    out = Node(x, (a, b), "posdef_solve", needs_grad=_wants(a, b))

    def push():
        gb = scipy.linalg.cho_solve(factor, out.grad, check_finite=False)
        if b.needs_grad:
            b.accumulate(gb)
        if a.needs_grad:
            a.accumulate(-gb @ x.T)

    out._push = push
    return out


def affine_const(x: Node, scale_row, shift_row) -> Node:
    """y = x * scale + shift with constant per-channel rows (broadcast)."""
    s = np.asarray(scale_row, dtype=np.float64)
    t = np.asarray(shift_row, dtype=np.float64)
    out = Node(x.value * s + t, (x,), "affine_const", needs_grad=x.needs_grad)

    def push():
        if x.needs_grad:
            x.accumulate(out.grad * s)

    out._push = push
    return out


def channel_affine(x: Node, gamma: Node, beta: Node) -> Node:
    """y = x * gamma + beta with learnable per-channel vectors."""
    out = Node(
        x.value * gamma.value + beta.value,
        (x, gamma, beta),
        "channel_affine",
        needs_grad=_wants(x, gamma, beta),
    )

    def push():
        if gamma.needs_grad:
            gamma.accumulate((out.grad * x.value).sum(axis=0))
        if beta.needs_grad:
            beta.accumulate(out.grad.sum(axis=0))
        if x.needs_grad:
            x.accumulate(out.grad * gamma.value)

    out._push = push
    return out


def group_mean_sq(x: Node, group_size: int) -> Node:
    """Per-group mean over rows of the squared Frobenius norm.

    Rows of x are split into consecutive groups of `group_size`; the output
    vector holds sum(x_g^2) / group_size per group.
    """
    rows = x.value.shape[0]
    if rows % group_size != 0:
        raise DimensionMismatch(f"{rows} rows not divisible by group {group_size}")
    groups = rows // group_size
    sq = (x.value * x.value).reshape(groups, group_size, -1)
    out = Node(
        sq.sum(axis=(1, 2)) / group_size, (x,), "group_mean_sq", needs_grad=x.needs_grad
    )

    def push():
        if x.needs_grad:
            per_row = np.repeat(out.grad, group_size) * (2.0 / group_size)
            x.accumulate(x.value * per_row[:, None])

    out._push = push
    return out


def stack_columns(vecs: Sequence[Node]) -> Node:
    """Stack 1-D vector nodes as the columns of a matrix node."""
    out = Node(
        np.stack([v.value for v in vecs], axis=1),
        tuple(vecs),
        "stack_columns",
        needs_grad=any(v.needs_grad for v in vecs),
    )

    def push():
        for j, v in enumerate(vecs):
            if v.needs_grad:
                v.accumulate(out.grad[:, j])

    out._push = push
    return out


def mean_ce_logits(logits: Node, labels) -> Node:
    """Mean cross-entropy over rows of a logits matrix.

    labels is an int vector with one class index per row.
    """
    lab = np.asarray(labels, dtype=np.int64)
    z = logits.value
    if lab.shape[0] != z.shape[0]:
        raise DimensionMismatch("one label per logits row required")
    zs = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=1))
    picked = zs[np.arange(z.shape[0]), lab]
    out = Node(
        np.mean(lse - picked), (logits,), "mean_ce_logits", needs_grad=logits.needs_grad
    )

    def push():
        if logits.needs_grad:
            p = softmax(z)
            p[np.arange(z.shape[0]), lab] -= 1.0
            logits.accumulate(out.grad * p / z.shape[0])

    out._push = push
    return out


def mean_kl_logits(p_const, logits: Node) -> Node:
    """Mean over rows of KL(p_row || softmax(logits_row)), p constant."""
    p = np.asarray(p_const, dtype=np.float64)
    z = logits.value
    if p.shape != z.shape:
        raise DimensionMismatch(f"KL shapes differ: {p.shape} vs {z.shape}")
    q = np.maximum(softmax(z), KL_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(np.maximum(p, KL_FLOOR)) - np.log(q)), 0.0)
    out = Node(
        terms.sum(axis=1).mean(), (logits,), "mean_kl_logits", needs_grad=logits.needs_grad
    )

    def push():
        if logits.needs_grad:
            logits.accumulate(out.grad * (softmax(z) - p) / z.shape[0])

    out._push = push
    return out


def sum_squares(x: Node) -> Node:
    out = Node(np.sum(x.value * x.value), (x,), "sum_squares", needs_grad=x.needs_grad)

    def push():
        if x.needs_grad:
            x.accumulate(out.grad * 2.0 * x.value)

    out._push = push
    return out


def weighted_sum(nodes: Sequence[Node], weights: Sequence[float]) -> Node:
    """Weighted sum of scalar nodes."""
    total = float(sum(w * n.value for n, w in zip(nodes, weights)))
    out = Node(
        total, tuple(nodes), "weighted_sum", needs_grad=any(n.needs_grad for n in nodes)
    )

    def push():
        for n, w in zip(nodes, weights):
            if n.needs_grad:
                n.accumulate(out.grad * w)

    out._push = push
    return out


def tape_ridge_reconstruction(targets: Node, basis: Node, lam: float) -> Node:
    """Differentiable ridge reconstruction, same math as `ridge_solve`."""
    if targets.value.shape[1] != basis.value.shape[1]:
        raise DimensionMismatch("targets/basis channel mismatch")
    bt = transpose(basis)
    gram = add_scaled_identity(matmul(basis, bt), lam)
    coeffs = posdef_solve(gram, matmul(basis, transpose(targets)))
    return matmul(transpose(coeffs), basis)


def backward(root: Node) -> None:
    """Reverse pass from a scalar root; visits each node exactly once."""
    if root.value.ndim != 0:
        raise ValueError("backward expects a scalar root")
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.needs_grad:
                stack.append((p, False))
    root.grad = np.asarray(1.0)
    for node in reversed(order):
        if node._push is not None and node.needs_grad:
            node._push()


def grad_of(leaf: Node) -> np.ndarray:
    """Gradient accumulated on a leaf, zeros if the loss never touched it."""
    if leaf.grad is None:
        return np.zeros_like(leaf.value)
    return leaf.grad


def grad_check(
    fn: Callable[[dict[str, Node]], Node],
    params: dict[str, np.ndarray],
    step: float = 1e-5,
) -> float:
    """Worst relative error of reverse-mode gradients vs central differences.

    `fn` builds a scalar loss node from a dict of leaf parameter nodes and
    must be deterministic given those values.  The relative error uses the
    denominator max(|a|, |b|, 1e-8) elementwise.
    """
    leaves = {k: parameter(np.array(v, dtype=np.float64)) for k, v in params.items()}
    loss = fn(leaves)
    backward(loss)
    grads = {k: grad_of(v) for k, v in leaves.items()}
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {k!r}")

    def value_at(vals: dict[str, np.ndarray]) -> float:
        return float(fn({k: parameter(v) for k, v in vals.items()}).value)

    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    worst = 0.0
    for k, arr in base.items():
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = value_at(base)
            flat[i] = orig - step
            down = value_at(base)
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            analytic = grads[k].reshape(-1)[i]
            denom = max(abs(numeric), abs(analytic), 1e-8)
            worst = max(worst, abs(numeric - analytic) / denom)
    return worst
