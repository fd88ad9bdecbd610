"""Binary scenario tree for the common noise.

The driving Brownian motion is discretized by increments +/- sqrt(dt) with
probability 1/2 each, which gives an exact discrete filtration: conditional
expectations are two-point means and every backward equation admits an
exact martingale representation

    child = mean +/- U * sqrt(dt),   U = (u_plus - u_minus) / (2 sqrt(dt)).

Two layouts are supported:

* non-recombining: 2^d nodes at depth d, node index is the path bitstring
  (bit set = up move); capped at K <= 14;
* recombining: d+1 nodes at depth d indexed by the number of up moves,
  with binomial probabilities.  Valid when all coefficients are
  path-independent; allows K up to a few hundred.

The noise is scalar (dW_dim = 1) even in two space dimensions: vector
processes are contracted with the fixed unit direction e_1.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

MAX_NONRECOMBINING_K = 14


class TreeError(ValueError):
    """Structural misuse of the scenario tree."""


class CapacityError(TreeError):
    """Requested tree exceeds the desk-scale node budget."""


@dataclass(frozen=True)
class TreeNode:
    id: int
    depth: int
    level: int
    prob: float
    parent: int | None
    sign: int  # increment sign of the edge from the parent; 0 at the root


@dataclass
class ScenarioTree:
    K: int
    dt: float
    recombining: bool
    dW_dim: int = 1
    _binom: list[np.ndarray] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.K < 1 or self.dt <= 0:
            raise TreeError("need K >= 1 and dt > 0")
        if not self.recombining and self.K > MAX_NONRECOMBINING_K:
            raise CapacityError(
                f"non-recombining tree capped at K <= {MAX_NONRECOMBINING_K}, got {self.K}"
            )
        if self.recombining:
            self._binom = [
                np.array([math.comb(d, j) for j in range(d + 1)], dtype=float) / 2.0**d
                for d in range(self.K + 1)
            ]

    # -- layout ---------------------------------------------------------------

    def levels(self, depth: int) -> int:
        self._check_depth(depth)
        return depth + 1 if self.recombining else 2**depth

    def probabilities(self, depth: int) -> np.ndarray:
        self._check_depth(depth)
        if self.recombining:
            return self._binom[depth]
        m = 2**depth
        return np.full(m, 1.0 / m)

    def brownian_values(self, depth: int) -> np.ndarray:
        """W at every node of a depth, ordered by level index."""
        self._check_depth(depth)
        s = math.sqrt(self.dt)
        if self.recombining:
            j = np.arange(depth + 1)
            return s * (2.0 * j - depth)
        ups = np.array([bin(i).count("1") for i in range(2**depth)])
        return s * (2.0 * ups - depth)

    def node_count(self) -> int:
        return sum(self.levels(d) for d in range(self.K + 1))

    def _check_depth(self, depth: int) -> None:
        if not 0 <= depth <= self.K:
            raise TreeError(f"depth {depth} outside 0..{self.K}")

    # -- conditional expectation and martingale part --------------------------

    def cond_mean(self, child_values, depth: int, xp=np):
        """E[. | F_{t_depth}] of per-level values at depth+1.

        ``child_values`` has leading axis levels(depth + 1); the result has
        leading axis levels(depth).  Weights are 1/2, 1/2 per child pair.
        """
        if depth >= self.K:
            raise TreeError("leaf nodes have no children")
        if self.recombining:
            return 0.5 * (child_values[:-1] + child_values[1:])
        return 0.5 * (child_values[0::2] + child_values[1::2])

    def martingale_part(self, child_values, depth: int, xp=np):
        """U such that child = mean +/- U * sqrt(dt), per parent node."""
        if depth >= self.K:
            raise TreeError("leaf nodes have no children")
        s = 2.0 * math.sqrt(self.dt)
        if self.recombining:
            return (child_values[1:] - child_values[:-1]) / s
        return (child_values[1::2] - child_values[0::2]) / s

    def scatter_children(self, up_values, down_values, depth: int, xp=np):
        """Assemble the depth+1 slice from per-parent up/down branch values.

        Non-recombining: children are simply interleaved (even index =
        down, odd = up).  Recombining: a child is reached by several paths
        and receives the path-count-weighted average of its incoming
        branches; when the branch maps commute (path-independent
        dynamics) the incoming values coincide and the average is exact.
        """
        if depth >= self.K:
            raise TreeError("cannot scatter past the leaves")
        if not self.recombining:
            m = up_values.shape[0]
            out_shape = (2 * m,) + tuple(up_values.shape[1:])
            idx_down = 2 * np.arange(m)
            idx_up = idx_down + 1
            if xp is np:
                out = np.empty(out_shape)
                out[idx_down] = down_values
                out[idx_up] = up_values
                return out
            out = xp.zeros(out_shape)
            out = out.at[idx_down].set(down_values)
            out = out.at[idx_up].set(up_values)
            return out
        k = depth
        j = np.arange(k + 2, dtype=float)
        w_up = (j / (k + 1)).reshape((k + 2,) + (1,) * (up_values.ndim - 1))
        pad = tuple((1, 0) if i == 0 else (0, 0) for i in range(up_values.ndim))
        up_shift = xp.pad(up_values, pad)      # up from parent j-1 lands on child j
        pad2 = tuple((0, 1) if i == 0 else (0, 0) for i in range(down_values.ndim))
        down_ext = xp.pad(down_values, pad2)   # down from parent j lands on child j
        return w_up * up_shift + (1.0 - w_up) * down_ext

    # -- exports --------------------------------------------------------------

    def nodes(self) -> list[TreeNode]:
        out = []
        next_id = 0
        ids: dict[tuple[int, int], int] = {}
        for d in range(self.K + 1):
            probs = self.probabilities(d)
            for lev in range(self.levels(d)):
                if d == 0:
                    parent, sign = None, 0
                elif self.recombining:
                    # canonical parent: same level if it exists (down edge)
                    if lev < self.levels(d - 1):
                        parent, sign = ids[(d - 1, lev)], -1
                    else:
                        parent, sign = ids[(d - 1, lev - 1)], +1
                else:
                    parent, sign = ids[(d - 1, lev >> 1)], +1 if lev & 1 else -1
                node = TreeNode(next_id, d, lev, float(probs[lev]), parent, sign)
                ids[(d, lev)] = next_id
                out.append(node)
                next_id += 1
        return out

    def manifest(self) -> str:
        return json.dumps(
            {
                "K": self.K,
                "dt": self.dt,
                "recombining": self.recombining,
                "nodes": [
                    {"id": n.id, "depth": n.depth, "prob": n.prob,
                     "parent": n.parent, "sign": n.sign}
                    for n in self.nodes()
                ],
            }
        )


def build_tree(K: int, dt: float, recombining: bool = True) -> ScenarioTree:
    return ScenarioTree(K=K, dt=dt, recombining=recombining)


def conditional_expectation(child_plus, child_minus):
    """Two-point conditional expectation: arithmetic mean of the children."""
    return 0.5 * (np.asarray(child_plus) + np.asarray(child_minus))


def martingale_part(child_plus, child_minus, dt: float):
    """The unique U with child = mean +/- U * sqrt(dt)."""
    if dt <= 0:
        raise TreeError("dt must be positive")
    return (np.asarray(child_plus) - np.asarray(child_minus)) / (2.0 * math.sqrt(dt))
