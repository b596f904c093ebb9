"""Time-calibrated typed trees and their birth-death log-likelihoods.

Time runs backward from the present: a branch occupies the half-open
interval (t1, t2] with the terminal event at t1 (a present-day sample, a
fossil, a binary split, or an explicit type change) and its attachment to
the parent at t2. Exactly one branch, the stem, reaches the root age tau.

The likelihood couples three solves: the self-consistent moment field
r (computed forward from the root and read backward here), the
non-observation probabilities p_i(t) that a live particle leaves no sampled
or fossilized descendant, and per-branch propagators q_i. The propagator
equation is linear and scalar per branch, so its log is accumulated as the
time integral of

    c_i(s) = 2 lam_i p_i(s) + gamma_ii - lam_i - mu_i - (w r)_i(s)

plus the log of the boundary value at t1, in a single post-order pass.

Tree files use an annotated Newick dialect: node comments of the form
[&key=value,...] with a required 1-based ``type`` on every node; leaves
carry ``event=sample`` or ``event=fossil``; degree-2 internal nodes carry
``event=typechange,to=<type>`` and their child must carry the target type;
binary split children carry the parent's type (births do not change type).
The root node has exactly one child (the stem) and no branch length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dataclass_field
from enum import Enum
from typing import Callable

import numpy as np
from scipy.integrate import quad

from .model import ModelSpec, SamplingSpec, mu_tilde, require_valid
from .ode import DenseSolution, Tolerances, integrate
from .scf import FieldTrajectory, ScfConfig, solve_scf

__all__ = [
    "EventKind",
    "Branch",
    "PhyloTree",
    "TreeParseError",
    "parse_tree",
    "serialize_tree",
    "NonObservationSolution",
    "solve_nonobs",
    "log_likelihood",
    "log_likelihood_details",
    "propagator_coefficient",
]

_ULTRAMETRIC_TOL = 1e-9


class EventKind(Enum):
    SAMPLE = "sample"
    FOSSIL = "fossil"
    SPLIT = "split"
    TYPE_CHANGE = "typechange"


@dataclass(frozen=True)
class Branch:
    """One branch: type, backward-time interval (t_lower, t_upper], and the
    event terminating it at t_lower. ``length`` preserves the parsed branch
    length verbatim so serialization round-trips bit-exactly."""

    type_index: int                 # 0-based
    t_lower: float
    t_upper: float
    length: float
    event: EventKind
    to_type: int | None = None      # 0-based, TYPE_CHANGE only
    children: tuple[int, ...] = ()
    parent: int | None = None
    label: str | None = None


@dataclass(frozen=True)
class PhyloTree:
    branches: tuple[Branch, ...]
    root: int
    tau: float

    def post_order(self):
        """Branch indices, children before parents."""
        out: list[int] = []
        stack = [self.root]
        while stack:
            i = stack.pop()
            out.append(i)
            stack.extend(self.branches[i].children)
        return reversed(out)

    @property
    def n_tips(self) -> int:
        return sum(1 for b in self.branches
                   if b.event in (EventKind.SAMPLE, EventKind.FOSSIL))

    def max_type_index(self) -> int:
        return max(b.type_index for b in self.branches)


class TreeParseError(ValueError):
    """Syntax or structural error, annotated with the text position."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


# --- parsing -----------------------------------------------------------------


@dataclass
class _Node:
    pos: int
    children: list = dataclass_field(default_factory=list)
    label: str | None = None
    annotations: dict = dataclass_field(default_factory=dict)
    length: float | None = None


_LABEL_STOP = set("():,;[]")


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.i = 0

    def error(self, message: str) -> TreeParseError:
        return TreeParseError(message, self.i)

    def skip_ws(self):
        while self.i < len(self.text) and self.text[self.i].isspace():
            self.i += 1

    def peek(self) -> str:
        self.skip_ws()
        return self.text[self.i] if self.i < len(self.text) else ""

    def expect(self, ch: str):
        if self.peek() != ch:
            raise self.error(f"expected {ch!r}, found {self.peek()!r}")
        self.i += 1

    def parse(self) -> _Node:
        node = self.parse_node()
        if self.peek() != ";":
            raise self.error("expected ';' terminating the tree")
        self.i += 1
        self.skip_ws()
        if self.i < len(self.text):
            raise self.error("trailing characters after ';'")
        return node

    def parse_node(self) -> _Node:
        node = _Node(pos=self.i)
        if self.peek() == "(":
            self.i += 1
            node.children.append(self.parse_node())
            while self.peek() == ",":
                self.i += 1
                node.children.append(self.parse_node())
            self.expect(")")
        node.label = self.parse_label()
        if self.peek() == "[":
            node.annotations = self.parse_comment()
        if self.peek() == ":":
            self.i += 1
            node.length = self.parse_number()
        return node

    def parse_label(self) -> str | None:
        self.skip_ws()
        start = self.i
        while self.i < len(self.text) and not self.text[self.i].isspace() \
                and self.text[self.i] not in _LABEL_STOP:
            self.i += 1
        return self.text[start:self.i] or None

    def parse_comment(self) -> dict:
        start = self.i
        self.expect("[")
        if self.peek() != "&":
            raise self.error("node comment must start with '[&'")
        self.i += 1
        out: dict = {}
        while True:
            key = self._comment_token("=")
            self.expect("=")
            value = self._comment_token(",]")
            if not key:
                raise TreeParseError("empty key in node comment", start)
            out[key] = value
            if self.peek() == ",":
                self.i += 1
                continue
            self.expect("]")
            return out

    def _comment_token(self, stops: str) -> str:
        self.skip_ws()
        start = self.i
        while self.i < len(self.text) and self.text[self.i] not in stops \
                and self.text[self.i] not in "[]":
            self.i += 1
        return self.text[start:self.i].strip()

    def parse_number(self) -> float:
        self.skip_ws()
        start = self.i
        while self.i < len(self.text) and (self.text[self.i] in "+-.eE"
                                           or self.text[self.i].isdigit()):
            self.i += 1
        token = self.text[start:self.i]
        try:
            return float(token)
        except ValueError:
            raise TreeParseError(f"invalid branch length {token!r}", start) from None


def _annotation_type(node: _Node) -> int:
    if "type" not in node.annotations:
        raise TreeParseError("node is missing the required type annotation",
                             node.pos)
    try:
        t = int(node.annotations["type"])
    except ValueError:
        raise TreeParseError(
            f"type annotation {node.annotations['type']!r} is not an integer",
            node.pos) from None
    if t < 1:
        raise TreeParseError(f"type annotation must be >= 1, got {t}", node.pos)
    return t - 1


def parse_tree(text: str) -> PhyloTree:
    """Parse the annotated-Newick dialect into a validated PhyloTree."""
    top = _Parser(text).parse()
    if len(top.children) != 1:
        raise TreeParseError(
            f"root must have exactly one child (the stem), found "
            f"{len(top.children)}", top.pos)
    if top.length is not None:
        raise TreeParseError("root node must not carry a branch length", top.pos)
    root_type = _annotation_type(top)

    # first pass: depths from the root and per-node checks
    depths: dict[int, float] = {}
    order: list[_Node] = []

    def walk(node: _Node, depth: float):
        if node.length is None:
            raise TreeParseError("branch length is required", node.pos)
        if node.length <= 0.0:
            raise TreeParseError(
                f"branch length must be > 0, got {node.length:g}", node.pos)
        depths[id(node)] = depth + node.length
        order.append(node)
        if len(node.children) > 2:
            raise TreeParseError(
                "multifurcations are not supported (binary splits only)",
                node.pos)
        for child in node.children:
            walk(child, depth + node.length)

    walk(top.children[0], 0.0)

    sample_depths = []
    for node in order:
        if not node.children and node.annotations.get("event") == "sample":
            sample_depths.append(depths[id(node)])
    if not sample_depths:
        raise TreeParseError(
            "tree has no present-day sample tips; the present is undefined",
            top.pos)
    tau = max(sample_depths)
    if any(abs(ds - tau) > _ULTRAMETRIC_TOL for ds in sample_depths):
        raise TreeParseError(
            "sample tips must be equidistant from the root (within 1e-9)",
            top.pos)

    branches: list[Branch] = []

    def build(node: _Node, parent: int | None) -> int:
        type_index = _annotation_type(node)
        t_upper = tau - (depths[id(node)] - node.length)
        t_lower = tau - depths[id(node)]
        event_key = node.annotations.get("event")
        my_index = len(branches)
        branches.append(None)  # placeholder, patched below

        if not node.children:
            if event_key == "sample":
                if abs(t_lower) > _ULTRAMETRIC_TOL:
                    raise TreeParseError(
                        f"sample tip not at the present (t={t_lower:g})",
                        node.pos)
                t_lower = 0.0
                event, to_type = EventKind.SAMPLE, None
            elif event_key == "fossil":
                if t_lower <= _ULTRAMETRIC_TOL:
                    raise TreeParseError(
                        "fossil tips must lie strictly before the present",
                        node.pos)
                event, to_type = EventKind.FOSSIL, None
            else:
                raise TreeParseError(
                    "leaf must carry event=sample or event=fossil", node.pos)
            children = ()
        elif len(node.children) == 1:
            if event_key != "typechange":
                raise TreeParseError(
                    "degree-2 node must carry event=typechange,to=<type>",
                    node.pos)
            if "to" not in node.annotations:
                raise TreeParseError("typechange node is missing to=<type>",
                                     node.pos)
            try:
                to_type = int(node.annotations["to"]) - 1
            except ValueError:
                raise TreeParseError(
                    f"typechange target {node.annotations['to']!r} is not an "
                    f"integer", node.pos) from None
            if to_type == type_index:
                raise TreeParseError(
                    "typechange target must differ from the branch type",
                    node.pos)
            child_type = _annotation_type(node.children[0])
            if child_type != to_type:
                raise TreeParseError(
                    f"typechange target is type {to_type + 1} but the child "
                    f"carries type {child_type + 1}", node.children[0].pos)
            event = EventKind.TYPE_CHANGE
            children = (build(node.children[0], my_index),)
        else:
            if event_key is not None:
                raise TreeParseError(
                    f"binary split nodes carry no event annotation, found "
                    f"event={event_key!r}", node.pos)
            for child in node.children:
                if _annotation_type(child) != type_index:
                    raise TreeParseError(
                        "split children must carry the parent's type "
                        "(births do not change type)", child.pos)
            event, to_type = EventKind.SPLIT, None
            children = tuple(build(child, my_index) for child in node.children)

        branches[my_index] = Branch(
            type_index=type_index,
            t_lower=t_lower,
            t_upper=t_upper,
            length=node.length,
            event=event,
            to_type=to_type,
            children=children,
            parent=parent,
            label=node.label,
        )
        return my_index

    stem = build(top.children[0], None)
    if branches[stem].type_index != root_type:
        raise TreeParseError(
            f"root annotation type {root_type + 1} disagrees with the stem "
            f"type {branches[stem].type_index + 1}", top.pos)
    return PhyloTree(branches=tuple(branches), root=stem, tau=tau)


def serialize_tree(tree: PhyloTree) -> str:
    """Render the tree back to the annotated-Newick dialect; parsing the
    output reproduces the tree exactly."""

    def render(idx: int) -> str:
        b = tree.branches[idx]
        if b.event in (EventKind.SAMPLE, EventKind.FOSSIL):
            body = b.label or ""
            comment = f"[&type={b.type_index + 1},event={b.event.value}]"
        elif b.event == EventKind.TYPE_CHANGE:
            body = f"({render(b.children[0])})" + (b.label or "")
            comment = (f"[&type={b.type_index + 1},event=typechange,"
                       f"to={b.to_type + 1}]")
        else:
            body = "(" + ",".join(render(c) for c in b.children) + ")" \
                + (b.label or "")
            comment = f"[&type={b.type_index + 1}]"
        return f"{body}{comment}:{b.length:.17g}"

    stem = tree.branches[tree.root]
    return f"({render(tree.root)})[&type={stem.type_index + 1}];"


# --- non-observation probabilities -------------------------------------------


class NonObservationSolution:
    """Dense solution p(t) of the non-observation system on [0, tau],
    together with the moment field it was computed against.

    Evaluation clamps to [0, 1]; ``raw`` exposes the unclamped solver values
    for diagnostics. p(0) equals 1 - rho exactly.
    """

    def __init__(self, dense: DenseSolution, field: FieldTrajectory,
                 sampling: SamplingSpec, tau: float):
        self.dense = dense
        self.field = field
        self.sampling = sampling
        self.tau = float(tau)

    def __call__(self, t):
        return np.clip(self.dense(t), 0.0, 1.0)

    def raw(self, t):
        return self.dense(t)


def _interaction_term(spec: ModelSpec, field: FieldTrajectory, tau: float
                      ) -> Callable[[float], np.ndarray]:
    # (w r)(t) in backward time, through the same capped form used everywhere
    def wr(t: float) -> np.ndarray:
        return mu_tilde(spec, field(tau - t)) - spec.mu
    return wr


def solve_nonobs(spec: ModelSpec, sampling: SamplingSpec,
                 field: FieldTrajectory, tau: float,
                 tol: Tolerances | None = None) -> NonObservationSolution:
    """Probability p_i(t) that a type-i particle alive at backward time t
    leaves no sampled or fossilized descendant.

    ``field`` is the moment trajectory in forward time from the root; it is
    read backward here. The Riccati system is integrated from
    p(0) = 1 - rho at the present up to the root age tau.
    """
    require_valid(spec)
    if field.tau < tau * (1.0 - 1e-12):
        raise ValueError(f"field defined on [0, {field.tau:g}] but tau={tau:g}")
    lam, mu, gam = spec.lam, spec.mu, spec.gamma
    sig = sampling.sigma
    wr = _interaction_term(spec, field, tau)

    def rhs(t, p):
        loss = mu + wr(t)
        return lam * p * p - (lam + loss) * p + gam @ p + (1.0 - sig) * loss

    p0 = np.full(spec.d, 1.0 - sampling.rho)
    dense = integrate(rhs, p0, (0.0, tau), tol=tol)
    return NonObservationSolution(dense, field, sampling, tau)


# --- likelihood --------------------------------------------------------------


def propagator_coefficient(spec: ModelSpec, nonobs: NonObservationSolution,
                           type_index: int) -> Callable[[float], float]:
    """The scalar coefficient c_i(s) whose time integral is the log branch
    propagator increment for a type-i branch."""
    i = type_index
    lam_i = float(spec.lam[i])
    const = float(spec.gamma[i, i] - spec.lam[i] - spec.mu[i])
    wr = _interaction_term(spec, nonobs.field, nonobs.tau)

    def c(s: float) -> float:
        return 2.0 * lam_i * float(nonobs(s)[i]) + const - float(wr(s)[i])

    return c


def _safe_log(x: float) -> float:
    return math.log(x) if x > 0.0 else -math.inf


def log_likelihood_details(tree: PhyloTree, spec: ModelSpec,
                           sampling: SamplingSpec,
                           condition_on_observation: bool = True,
                           config: ScfConfig | None = None,
                           tol: Tolerances | None = None,
                           fossil_uses_meanfield_rate: bool = False
                           ) -> tuple[float, dict]:
    """Tree log-likelihood plus solver diagnostics (see log_likelihood)."""
    require_valid(spec)
    if tree.max_type_index() >= spec.d:
        raise ValueError(
            f"tree uses type {tree.max_type_index() + 1} but the model has "
            f"d={spec.d} types")

    scf_result = solve_scf(spec, tree.tau, config)
    field = scf_result.field
    nonobs = solve_nonobs(spec, sampling, field, tree.tau, tol=tol)
    wr = _interaction_term(spec, field, tree.tau)

    coeffs = {i: propagator_coefficient(spec, nonobs, i)
              for i in {b.type_index for b in tree.branches}}
    log_q: dict[int, float] = {}
    for idx in tree.post_order():
        b = tree.branches[idx]
        i = b.type_index
        if b.event == EventKind.SAMPLE:
            boundary = _safe_log(sampling.rho)
        elif b.event == EventKind.FOSSIL:
            rate = float(spec.mu[i])
            if fossil_uses_meanfield_rate:
                rate += float(wr(b.t_lower)[i])
            boundary = _safe_log(sampling.sigma * rate)
        elif b.event == EventKind.SPLIT:
            boundary = _safe_log(float(spec.lam[i])) \
                + sum(log_q[c] for c in b.children)
        else:
            boundary = _safe_log(float(spec.gamma[i, b.to_type])) \
                + log_q[b.children[0]]
        if math.isinf(boundary) and boundary < 0:
            log_q[idx] = -math.inf
            continue
        increment, _ = quad(coeffs[i], b.t_lower, b.t_upper,
                            epsabs=1e-10, epsrel=1e-10, limit=200)
        log_q[idx] = boundary + increment

    result = log_q[tree.root]
    root_type = tree.branches[tree.root].type_index
    p_root = float(nonobs(tree.tau)[root_type])
    if condition_on_observation:
        observed = 1.0 - p_root
        result = result - _safe_log(observed) if observed > 0.0 else -math.inf

    details = {
        "tau": tree.tau,
        "conditioned": bool(condition_on_observation),
        "root_type": root_type + 1,
        "root_nonobservation_probability": p_root,
        "scf_iterations": scf_result.iterations,
        "scf_residual": scf_result.residual,
        "n_branches": len(tree.branches),
    }
    return result, details


def log_likelihood(tree: PhyloTree, spec: ModelSpec, sampling: SamplingSpec,
                   condition_on_observation: bool = True,
                   config: ScfConfig | None = None,
                   tol: Tolerances | None = None,
                   fossil_uses_meanfield_rate: bool = False) -> float:
    """Log-likelihood of a typed, time-calibrated tree under the interacting
    birth-death model with sampling.

    The moment field is solved once (self-consistently) on [0, tau] and
    shared by the non-observation and propagator systems. Each branch
    contributes the log of its boundary value at t1 (rho for present-day
    samples, sigma*mu_i for fossils, lam_i q_left q_right for splits,
    gamma_ij q_j for type changes) plus the integral of its log-slope
    c_i over (t1, t2]. Zero boundary values yield an explicit -inf rather
    than an exception. With ``condition_on_observation`` the result is
    normalized by the probability that the stem lineage is observed at all,
    i.e. log(1 - p_i(tau)) is subtracted.

    ``fossil_uses_meanfield_rate`` switches the fossil boundary from the
    baseline sigma*mu_i to sigma*(mu_i + (w r)_i(t1)) for users who read the
    fossilization rate as the full interacting death rate.
    """
    result, _ = log_likelihood_details(
        tree, spec, sampling, condition_on_observation,
        config=config, tol=tol,
        fossil_uses_meanfield_rate=fossil_uses_meanfield_rate)
    return result
