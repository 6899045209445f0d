"""Dense 2-D tensors with a recording tape for reverse-mode differentiation.

Every value is a float64 ndarray of shape (rows, cols). Ops compute their
forward value eagerly and append an adjoint closure to the tape; ``backward``
walks the tape once, in reverse, and returns gradients for any recorded node
(leaves and intermediates alike). Intermediate gradients are what the
salience module reads, so they are first-class here.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

KL_EPS = 1e-12
PROB_TOL = 1e-8


class ContractError(ValueError):
    """Raised when an op is called outside its contract (shapes, probabilities, tape use)."""


class Node:
    __slots__ = ("tape", "index", "value")

    def __init__(self, tape: "Tape", index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(#{self.index}, shape={self.value.shape}, op={self.tape._ops[self.index]})"


def _as2d(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ContractError(f"tensors are 2-D, got ndim={arr.ndim}")
    return arr


class Tape:
    """Ordered record of primitive ops.

    ``check_finite`` turns on the debug-build NaN/Inf guard after every op.
    """

    def __init__(self, check_finite: bool = False):
        self.check_finite = check_finite
        self._values: list[np.ndarray] = []
        self._parents: list[tuple[int, ...]] = []
        self._adjoints: list[Callable | None] = []
        self._requires: list[bool] = []
        self._ops: list[str] = []
        self.relu_masks: list[np.ndarray] = []
        self._consumed = False

    def __len__(self) -> int:
        return len(self._values)

    # recording -----------------------------------------------------------

    def _push(self, op: str, value: np.ndarray, parents: Sequence[Node], adjoint) -> Node:
        if self._consumed:
            raise ContractError("tape already consumed by backward()")
        if self.check_finite and not np.all(np.isfinite(value)):
            raise ContractError(f"non-finite value produced by {op}")
        req = self._requires
        requires = False
        for p in parents:
            if p.tape is not self:
                raise ContractError("operand recorded on a different tape")
            requires = requires or req[p.index]
        self._values.append(value)
        self._parents.append(tuple(p.index for p in parents))
        self._adjoints.append(adjoint if requires else None)
        self._requires.append(requires)
        self._ops.append(op)
        return Node(self, len(self._values) - 1, value)

    def leaf(self, value, requires_grad: bool = True) -> Node:
        if type(value) is np.ndarray and value.ndim == 2 and value.dtype == np.float64:
            arr = value
        else:
            arr = _as2d(value)
        if self._consumed:
            raise ContractError("tape already consumed by backward()")
        self._values.append(arr)
        self._parents.append(())
        self._adjoints.append(None)
        self._requires.append(requires_grad)
        self._ops.append("leaf" if requires_grad else "const")
        return Node(self, len(self._values) - 1, arr)

    def constant(self, value) -> Node:
        return self.leaf(value, requires_grad=False)

    # primitives ----------------------------------------------------------

    def needs_grad(self, node: Node) -> bool:
        return self._requires[node.index]

    def matmul(self, a: Node, b: Node) -> Node:
        if a.shape[1] != b.shape[0]:
            raise ContractError(f"matmul shape mismatch {a.shape} @ {b.shape}")
        av, bv = a.value, b.value
        ga, gb = self._requires[a.index], self._requires[b.index]

        def adj(g):
            return (g @ bv.T if ga else None), (av.T @ g if gb else None)

        return self._push("matmul", av @ bv, (a, b), adj)

    def add(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ContractError(f"add shape mismatch {a.shape} + {b.shape}")
        return self._push("add", a.value + b.value, (a, b), lambda g: (g, g))

    def add_bias(self, a: Node, bias: Node) -> Node:
        if bias.shape != (1, a.shape[1]):
            raise ContractError(f"bias shape {bias.shape} does not fit {a.shape}")
        return self._push(
            "add_bias", a.value + bias.value, (a, bias), lambda g: (g, g.sum(axis=0, keepdims=True))
        )

    def concat_cols(self, parts: Sequence[Node]) -> Node:
        rows = {p.shape[0] for p in parts}
        if len(rows) != 1:
            raise ContractError(f"concat_cols row mismatch {[p.shape for p in parts]}")
        bounds = np.cumsum([0] + [p.shape[1] for p in parts])

        def adj(g):
            return tuple(g[:, bounds[i]: bounds[i + 1]] for i in range(len(parts)))

        return self._push("concat_cols", np.concatenate([p.value for p in parts], axis=1), parts, adj)

    def concat_rows(self, parts: Sequence[Node]) -> Node:
        cols = {p.shape[1] for p in parts}
        if len(cols) != 1:
            raise ContractError(f"concat_rows column mismatch {[p.shape for p in parts]}")
        if len(parts) == 1:
            return parts[0]
        bounds = np.cumsum([0] + [p.shape[0] for p in parts])

        def adj(g):
            return tuple(g[bounds[i]: bounds[i + 1]] for i in range(len(parts)))

        return self._push("concat_rows", np.concatenate([p.value for p in parts], axis=0), parts, adj)

    def rows(self, a: Node, index) -> Node:
        """Row selection by slice or integer index array (duplicates allowed)."""
        n = a.shape[0]
        if not self._requires[a.index]:
            return self.constant(a.value[index])
        if isinstance(index, slice):
            value = a.value[index]

            def adj(g):
                out = np.zeros_like(a.value)
                out[index] = g
                return (out,)

            return self._push("rows", value, (a,), adj)
        idx = np.asarray(index, dtype=np.intp)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise ContractError(f"row index out of range for {n} rows")

        def adj(g):
            out = np.zeros_like(a.value)
            np.add.at(out, idx, g)
            return (out,)

        return self._push("rows", a.value[idx], (a,), adj)

    def reshape(self, a: Node, shape: tuple[int, int]) -> Node:
        if shape[0] * shape[1] != a.value.size:
            raise ContractError(f"cannot reshape {a.shape} to {shape}")
        old = a.shape
        return self._push("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))

    def transpose(self, a: Node) -> Node:
        return self._push("transpose", a.value.T.copy(), (a,), lambda g: (g.T,))

    def mean_rows(self, a: Node) -> Node:
        n = a.shape[0]
        if n == 0:
            raise ContractError("mean of zero rows")
        return self._push(
            "mean_rows",
            a.value.mean(axis=0, keepdims=True),
            (a,),
            lambda g: (np.broadcast_to(g / n, a.shape).copy(),),
        )

    def scale_by_scalar(self, a: Node, s: Node) -> Node:
        if s.shape != (1, 1):
            raise ContractError(f"scalar operand must be 1x1, got {s.shape}")
        av, sv = a.value, s.value[0, 0]

        def adj(g):
            return g * sv, np.array([[np.sum(g * av)]])

        return self._push("scale_by_scalar", av * sv, (a, s), adj)

    def mul_const(self, a: Node, c: float) -> Node:
        c = float(c)
        return self._push("mul_const", a.value * c, (a,), lambda g: (g * c,))

    def relu(self, a: Node) -> Node:
        mask = a.value > 0
        self.relu_masks.append(mask)
        return self._push("relu", np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))

    def identity(self, a: Node) -> Node:
        return a

    def softmax_row(self, a: Node) -> Node:
        if not np.all(np.isfinite(a.value)):
            raise ContractError("softmax input must be finite")
        z = a.value - a.value.max(axis=1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=1, keepdims=True)

        def adj(g):
            return (y * (g - np.sum(g * y, axis=1, keepdims=True)),)

        return self._push("softmax_row", y, (a,), adj)

    def kl_div(self, target, model: Node) -> Node:
        """KL(target || model); for r > 1 rows, the mean of the row-wise KLs. Target is constant."""
        p = _as2d(target)
        q = model.value
        if p.shape != q.shape:
            raise ContractError(f"kl_div expects matching shapes, got {p.shape} vs {q.shape}")
        _check_probability(p, "target")
        _check_probability(q, "model")
        r = p.shape[0]
        qc = np.maximum(q, KL_EPS)
        pos = p > 0
        # KL >= 0; a tiny negative sum is round-off between near-equal rows
        value = max(0.0, float(np.sum(p[pos] * (np.log(p[pos]) - np.log(qc[pos])))) / r)
        clamped = q < KL_EPS

        def adj(g):
            grad = np.where(clamped, 0.0, -p / qc)
            return (g[0, 0] / r * grad,)

        return self._push("kl_div", np.array([[value]]), (model,), adj)

    def neg_log_pick(self, model: Node, col: int) -> Node:
        """-log p[0, col] with the same clamp as kl_div."""
        q = model.value
        _check_probability(q, "model")
        qj = q[0, col]
        value = -np.log(max(qj, KL_EPS))

        def adj(g):
            out = np.zeros_like(q)
            if qj >= KL_EPS:
                out[0, col] = -g[0, 0] / qj
            return (out,)

        return self._push("neg_log_pick", np.array([[value]]), (model,), adj)

    # fused composites ---------------------------------------------------
    # Same maths as chains of the primitives above, recorded as one tape entry
    # each to keep per-op Python overhead off the training hot path.

    def typed_affine(self, x: Node, slices: Sequence[slice], weights: Sequence[Node],
                     biases: Sequence[Node], relu: bool = True) -> Node:
        """Row block i -> act(x[slice_i] @ W_i + b_i); blocks are contiguous and cover x."""
        xv = x.value
        outs, masks = [], []
        for sl, w, b in zip(slices, weights, biases):
            if xv[sl].shape[1] != w.shape[0] or b.shape != (1, w.shape[1]):
                raise ContractError("typed_affine shape mismatch")
            z = xv[sl] @ w.value + b.value
            if relu:
                m = z > 0
                masks.append(m)
                self.relu_masks.append(m)
                z = np.where(m, z, 0.0)
            outs.append(z)
        value = np.concatenate(outs, axis=0)
        if value.shape[0] != xv.shape[0]:
            raise ContractError("typed_affine slices must cover every row")
        gx = self._requires[x.index]
        wv = [w.value for w in weights]

        def adj(g):
            dx = np.empty_like(xv) if gx else None
            dws, dbs = [], []
            for i, sl in enumerate(slices):
                gi = g[sl]
                if relu:
                    gi = gi * masks[i]
                dws.append(xv[sl].T @ gi)
                dbs.append(gi.sum(axis=0, keepdims=True))
                if gx:
                    dx[sl] = gi @ wv[i].T
            return (dx, *dws, *dbs)

        return self._push("typed_affine", value, (x, *weights, *biases), adj)

    def relational_mean(self, h: Node, structure: Sequence[tuple[np.ndarray, np.ndarray]],
                        weights: Sequence[Node], gates: Sequence[Node], relu: bool = True,
                        stacked=None) -> Node:
        """sum_r gate_r * A_r @ act(h[src_r] @ W_r).

        ``structure`` holds (unique source rows, dst-by-source mean matrix) per
        relation. ``stacked`` may supply the precomputed column-concatenation
        [A_1 | A_2 | ...] (dense or sparse); all relations then go through a
        single product with the stacked messages.
        """
        hv = h.value
        width = weights[0].shape[1] if weights else hv.shape[1]
        if not structure:
            return self.constant(np.zeros((hv.shape[0], width)))
        if stacked is None:
            stacked = _hstack([A for _, A in structure])
        zs, masks = [], []
        for (srcs, A), w, gate in zip(structure, weights, gates):
            if gate.shape != (1, 1):
                raise ContractError("gates are 1x1 scalars")
            z = hv[srcs] @ w.value
            if relu:
                m = z > 0
                self.relu_masks.append(m)
                z *= m
                masks.append(m)
            zs.append(z)
        bounds = np.cumsum([0] + [len(srcs) for srcs, _ in structure])
        if stacked.shape != (hv.shape[0], bounds[-1]):
            raise ContractError("stacked mean matrix does not match the relation structure")
        gv = [gate.value[0, 0] for gate in gates]
        Z = np.concatenate(zs, axis=0)
        scaled = np.concatenate([gv[k] * z for k, z in enumerate(zs)], axis=0)
        out = np.asarray(stacked @ scaled)
        gh = self._requires[h.index]
        wv = [w.value for w in weights]

        def adj(g):
            dh = np.zeros_like(hv) if gh else None
            GT = np.asarray(stacked.T @ g)
            dws, dgs = [], []
            for k, (srcs, _) in enumerate(structure):
                blk = GT[bounds[k]: bounds[k + 1]]
                dgs.append(np.array([[np.vdot(blk, Z[bounds[k]: bounds[k + 1]])]]))
                dz = blk * gv[k]
                if relu:
                    dz *= masks[k]
                dws.append(hv[srcs].T @ dz)
                if gh:
                    dh[srcs] += dz @ wv[k].T
            return (dh, *dws, *dgs)

        return self._push("relational_mean", out, (h, *weights, *gates), adj)

    # reverse pass --------------------------------------------------------

    def backward(self, loss: Node, wrt: Sequence[Node] | None = None) -> dict[int, np.ndarray]:
        """Consume the tape; return {node.index: gradient} for ``wrt`` (default: all leaves).

        Nodes in ``wrt`` that receive no gradient get zeros of their shape.
        """
        if self._consumed:
            raise ContractError("backward() may run only once per tape")
        if loss.tape is not self:
            raise ContractError("loss was not recorded on this tape")
        if loss.shape != (1, 1):
            raise ContractError(f"loss must be scalar (1x1), got {loss.shape}")
        if wrt is None:
            wanted = [i for i, op in enumerate(self._ops) if op == "leaf"]
        else:
            wanted = []
            for node in wrt:
                if node.tape is not self or node.index >= len(self._values):
                    raise ContractError("requested gradient for a node not recorded on this tape")
                wanted.append(node.index)
        self._consumed = True

        grads: list[np.ndarray | None] = [None] * (loss.index + 1)
        grads[loss.index] = np.ones((1, 1))
        for i in range(loss.index, -1, -1):
            g = grads[i]
            adj = self._adjoints[i]
            if g is None or adj is None:
                continue
            parent_grads = adj(g)
            for p, gp in zip(self._parents[i], parent_grads):
                if gp is None or not self._requires[p]:
                    continue
                grads[p] = gp if grads[p] is None else grads[p] + gp
        out = {}
        for i in wanted:
            g = grads[i] if i < len(grads) else None
            out[i] = np.zeros_like(self._values[i]) if g is None else g
        return out


def _hstack(mats):
    if any(hasattr(m, "tocsr") for m in mats):
        from scipy import sparse

        return sparse.hstack(mats, format="csr")
    return np.concatenate(mats, axis=1)


def _check_probability(p: np.ndarray, name: str) -> None:
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ContractError(f"{name} is not a probability vector (negative or non-finite entries)")
    totals = p.sum(axis=1)
    if np.any(np.abs(totals - 1.0) > PROB_TOL):
        raise ContractError(f"{name} rows sum to {totals.tolist()!r}, not 1")


def softmax(x) -> np.ndarray:
    """Plain (untaped) row softmax with max-shift."""
    arr = _as2d(x)
    z = arr - arr.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def kl_divergence(p, q) -> float:
    """Untaped KL(p || q) with the tape's clamp convention."""
    t = Tape()
    return float(t.kl_div(p, t.constant(q)).value[0, 0])
