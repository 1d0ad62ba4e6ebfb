"""Density-ratio discriminators and the shared/private information losses.

Each information term is an expectation of a log density ratio
``log p(a, b, ...) / (p(a) p(b) ...)``. A discriminator trained to separate
joint tuples from product-of-marginals tuples gives that ratio as its
log-odds. The same loss code also accepts an exact ratio table
(:class:`ExactRatios`) so the loss algebra can be checked by enumeration.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

PROB_CLAMP = 1e-6
LOGIT_BOUND = math.log((1.0 - PROB_CLAMP) / PROB_CLAMP)


@dataclass
class InfoHyper:
    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.1
    epsilon: float = 0.1
    use_shared: bool = True
    use_private: bool = True

    def validate(self) -> "InfoHyper":
        for name in ("alpha", "gamma", "epsilon"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must be in [0,1], got {self.beta}")
        return self


# ------------------------------------------------------------ term layout


def shared_tags(num_modalities: int = 2) -> list[str]:
    return [f"{kind}_{i}" for i in range(1, num_modalities + 1) for kind in ("JOINT3", "SELF", "CROSS")]


def private_tags(num_modalities: int = 2) -> list[str]:
    return [f"{kind}_{i}" for i in range(1, num_modalities + 1) for kind in ("PRIV_SELF", "PRIV_SHARED")]


def term_arguments(tag: str) -> tuple[str, ...]:
    """Argument names of a term, e.g. ``CROSS_1 -> ("x2", "u1")``."""
    kind, i = tag.rsplit("_", 1)
    i = int(i)
    other = 3 - i
    return {
        "JOINT3": ("x1", "x2", f"u{i}"),
        "SELF": (f"x{i}", f"u{i}"),
        "CROSS": (f"x{other}", f"u{i}"),
        "PRIV_SELF": (f"x{i}", f"v{i}"),
        "PRIV_SHARED": (f"v{i}", f"u{i}"),
    }[kind]


def shuffle_slots(tag: str) -> tuple[int, ...]:
    """Slots permuted to build product samples.

    JOINT3 shuffles only u, so its discriminator estimates
    log p(x1,x2,u)/(p(x1,x2)p(u)). That differs from the fully factorised
    ratio by log p(x1,x2)/(p(x1)p(x2)), which does not depend on the encoders,
    so encoder gradients are unchanged and the estimate avoids modelling the
    large x1-x2 dependence. Every other tag shuffles its second argument.
    """
    return (2,) if tag.startswith("JOINT3") else (1,)


# ---------------------------------------------------------- discriminator


class ConvEmbed(nn.Module):
    def __init__(self, shape, channels: int = 8, dim: int = 16):
        super().__init__()
        c, i, s = shape
        self.net = nn.Sequential(
            nn.Conv2d(c, channels, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(channels, channels, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Flatten(),
            nn.Linear(channels * ((i + 1) // 2) * ((s + 1) // 2), dim),
        )

    def forward(self, x):
        return self.net(x)


class Discriminator(nn.Module):
    """Scores a tuple; its logit is the estimated log density ratio.

    Tensor arguments ``(C, I, S)`` pass through a small conv stack, vector
    arguments ``(d,)`` pass through unchanged; a 5-layer MLP scores the
    concatenation.
    """

    def __init__(self, tag: str, arg_shapes: Sequence[tuple], hidden: int = 64, embed_dim: int = 16):
        super().__init__()
        self.tag = tag
        self.arg_shapes = [tuple(s) for s in arg_shapes]
        self.embeds = nn.ModuleList()
        width = 0
        for shape in self.arg_shapes:
            if len(shape) == 3:
                self.embeds.append(ConvEmbed(shape, dim=embed_dim))
                width += embed_dim
            else:
                self.embeds.append(nn.Identity())
                width += shape[0]
        layers = []
        for _ in range(4):
            layers += [nn.Linear(width, hidden), nn.GELU()]
            width = hidden
        layers.append(nn.Linear(width, 1))
        self.scorer = nn.Sequential(*layers)

    @property
    def arity(self) -> int:
        return len(self.arg_shapes)

    def forward(self, *inputs) -> torch.Tensor:
        if len(inputs) != self.arity:
            raise ValueError(f"{self.tag} takes {self.arity} inputs, got {len(inputs)}")
        feats = [embed(x) for embed, x in zip(self.embeds, inputs)]
        return self.scorer(torch.cat(feats, dim=-1)).squeeze(-1)

    def prob(self, *inputs) -> torch.Tensor:
        return torch.sigmoid(self(*inputs))


def clamp_logit(logit: torch.Tensor) -> torch.Tensor:
    # equivalent to clamping the probability to [1e-6, 1 - 1e-6]
    return logit.clamp(-LOGIT_BOUND, LOGIT_BOUND)


def log_density_ratio(disc: Discriminator, inputs: Sequence[torch.Tensor]) -> torch.Tensor:
    """Per-tuple ``log(p / (1 - p))`` of the clamped discriminator output."""
    if len(inputs) != disc.arity:
        raise ValueError(f"{disc.tag} takes {disc.arity} inputs, got {len(inputs)}")
    return clamp_logit(disc(*inputs))


def discriminator_loss(disc: Discriminator, joint_batch, product_batch) -> torch.Tensor:
    """Binary cross-entropy: joint tuples labelled 1, product tuples labelled 0."""
    if len(joint_batch[0]) == 0 or len(product_batch[0]) == 0:
        raise ValueError("discriminator_loss needs non-empty joint and product batches")
    s_joint = log_density_ratio(disc, joint_batch)
    s_prod = log_density_ratio(disc, product_batch)
    return F.softplus(-s_joint).mean() + F.softplus(s_prod).mean()


def random_cycle(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random cyclic permutation (Sattolo); a derangement for n >= 2."""
    perm = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = rng.integers(0, i)
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def build_product_batch(batch: Sequence, shuffle: Sequence[int], seed) -> list:
    """Permute the given slots across the batch, each by its own derangement."""
    n = len(batch[0])
    if n < 2:
        raise ValueError(f"product batch needs B >= 2, got B={n}")
    rng = np.random.default_rng(seed)
    out = list(batch)
    for slot in sorted(set(shuffle)):
        perm = random_cycle(n, rng)
        item = batch[slot]
        out[slot] = item[torch.as_tensor(perm)] if isinstance(item, torch.Tensor) else item[perm]
    return out


class DiscriminatorSet(nn.Module):
    """Ten discriminators for two modalities, keyed by term tag."""

    def __init__(self, x_shapes: Sequence[tuple], shared_dim: int, private_dim: int, hidden: int = 64):
        super().__init__()
        if len(x_shapes) != 2:
            raise ValueError("information losses are defined for exactly two modalities")
        shapes = {"x1": tuple(x_shapes[0]), "x2": tuple(x_shapes[1])}
        for i in (1, 2):
            shapes[f"u{i}"] = (shared_dim,)
            shapes[f"v{i}"] = (private_dim,)
        self.discs = nn.ModuleDict()
        for tag in shared_tags() + private_tags():
            self.discs[tag] = Discriminator(tag, [shapes[a] for a in term_arguments(tag)], hidden=hidden)

    def __getitem__(self, tag) -> Discriminator:
        return self.discs[tag]

    @property
    def tags(self) -> list[str]:
        return list(self.discs.keys())

    def log_ratio(self, tag: str, inputs) -> torch.Tensor:
        return log_density_ratio(self.discs[tag], inputs)


def term_inputs(tag: str, values: Mapping[str, torch.Tensor]) -> list:
    return [values[a] for a in term_arguments(tag)]


def discriminator_losses(discs: DiscriminatorSet, values: Mapping, tags: Sequence[str], seed) -> dict:
    """Per-tag discriminator losses on one batch of joint samples."""
    rng = np.random.default_rng(seed)
    out = {}
    for tag in tags:
        joint = term_inputs(tag, values)
        product = build_product_batch(joint, shuffle_slots(tag), rng)
        out[tag] = discriminator_loss(discs[tag], joint, product)
    return out


# ------------------------------------------------------------------ losses


def _expect(values: torch.Tensor, weights) -> torch.Tensor:
    if weights is None:
        return values.mean()
    return (values * weights).sum()


def _checked(tag: str, value: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(value).all():
        raise FloatingPointError(f"non-finite information term {tag}")
    return value


def shared_info_loss(u1, u2, x1, x2, discs, hyper: InfoHyper, weights=None):
    """alpha * E||u1 - u2||^2 + sum_i E[T_i - (1 - beta) S_i - C_i].

    ``T_i``, ``S_i``, ``C_i`` are the JOINT3, SELF and CROSS log ratios. This
    equals ``alpha d + sum_i I(X1;X2|U_i) + beta H(U_i)`` whenever U_i is a
    function of X_i. ``weights`` (summing to 1) replace the batch mean, which
    lets exact discrete tables be fed through the same code.
    """
    values = {"x1": x1, "x2": x2, "u1": u1, "u2": u2}
    sq = ((u1 - u2) ** 2).reshape(len(u1), -1).sum(dim=-1) if torch.is_floating_point(u1) else None
    terms = {"distance": _checked("distance", _expect(sq, weights)) if sq is not None else torch.tensor(0.0)}
    total = hyper.alpha * terms["distance"]
    for i in (1, 2):
        t = _checked(f"JOINT3_{i}", _expect(discs.log_ratio(f"JOINT3_{i}", term_inputs(f"JOINT3_{i}", values)), weights))
        s = _checked(f"SELF_{i}", _expect(discs.log_ratio(f"SELF_{i}", term_inputs(f"SELF_{i}", values)), weights))
        c = _checked(f"CROSS_{i}", _expect(discs.log_ratio(f"CROSS_{i}", term_inputs(f"CROSS_{i}", values)), weights))
        terms.update({f"JOINT3_{i}": t, f"SELF_{i}": s, f"CROSS_{i}": c})
        total = total + t - (1.0 - hyper.beta) * s - c
    return total, terms


def private_info_loss(v1, v2, u1, u2, x1, x2, discs, hyper: InfoHyper, weights=None):
    """sum_i gamma E[log p(x_i,v_i)/p p] + epsilon E[log p(v_i,u_i)/p p]."""
    values = {"x1": x1, "x2": x2, "u1": u1, "u2": u2, "v1": v1, "v2": v2}
    terms = {}
    total = torch.zeros(())
    for i in (1, 2):
        for tag, coef in ((f"PRIV_SELF_{i}", hyper.gamma), (f"PRIV_SHARED_{i}", hyper.epsilon)):
            value = _checked(tag, _expect(discs.log_ratio(tag, term_inputs(tag, values)), weights))
            terms[tag] = value
            total = total + coef * value
    return total, terms


# ------------------------------------------------------ discrete oracle


class DiscreteJoint:
    """A probability table over named finite variables."""

    def __init__(self, table, names: Sequence[str], atol: float = 1e-12):
        table = np.asarray(table, dtype=np.float64)
        if table.ndim != len(names):
            raise ValueError(f"table has {table.ndim} axes but {len(names)} names")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate variable names {list(names)}")
        if np.any(table < 0):
            raise ValueError("probability table has negative entries")
        total = table.sum()
        if abs(total - 1.0) > atol:
            raise ValueError(f"probability table sums to {total!r}, not 1")
        self.table = table
        self.names = list(names)

    def marginal(self, vars_: Sequence[str]) -> np.ndarray:
        """Marginal table with axes in the order of ``vars_``."""
        keep = [self.names.index(v) for v in vars_]
        drop = tuple(a for a in range(self.table.ndim) if a not in keep)
        m = self.table.sum(axis=drop)
        ranked = sorted(keep)
        return np.transpose(m, [ranked.index(a) for a in keep])

    def entropy(self, vars_: Sequence[str]) -> float:
        if not vars_:
            return 0.0
        p = self.marginal(vars_).ravel()
        p = p[p > 0]
        return float(-(p * np.log(p)).sum())

    def mutual_information(self, a: Sequence[str], b: Sequence[str], given: Sequence[str] = ()) -> float:
        a, b, c = list(a), list(b), list(given)
        return self.entropy(a + c) + self.entropy(b + c) - self.entropy(a + b + c) - self.entropy(c)

    def log_ratio(self, groups: Sequence[Sequence[str]]):
        """``log p(union) - sum_g log p(g)`` over the union variables.

        Returns ``(ratio, p_union, union)``; ratio is 0 off the support.
        """
        union = [v for g in groups for v in g]
        if len(set(union)) != len(union):
            raise ValueError(f"groups overlap: {groups}")
        p = self.marginal(union)
        support = p > 0
        ratio = np.zeros_like(p)
        ratio[support] = np.log(p[support])
        start = 0
        for g in groups:
            m = self.marginal(list(g))
            shape = [1] * len(union)
            shape[start : start + len(g)] = m.shape
            start += len(g)
            with np.errstate(divide="ignore"):
                lm = np.broadcast_to(np.log(m).reshape(shape), p.shape)
            ratio[support] -= lm[support]
        return ratio, p, union

    def expected_log_ratio(self, groups: Sequence[Sequence[str]]) -> float:
        """E log p(union of groups) / prod_g p(g), by direct summation over the table."""
        ratio, p, _ = self.log_ratio(groups)
        return float((p * ratio).sum())

    def support(self):
        """Support points as per-variable integer arrays plus their probabilities."""
        idx = np.argwhere(self.table > 0)
        return {n: idx[:, k] for k, n in enumerate(self.names)}, self.table[tuple(idx.T)]

    def with_functions(self, functions: Mapping[str, tuple]) -> "DiscreteJoint":
        """Append deterministic variables ``name: (fn, sources, alphabet_size)``."""
        new_names = self.names + list(functions)
        sizes = list(self.table.shape) + [size for _, _, size in functions.values()]
        table = np.zeros(sizes)
        for point in itertools.product(*(range(s) for s in self.table.shape)):
            p = self.table[point]
            if p == 0:
                continue
            env = dict(zip(self.names, point))
            extra = []
            for name, (fn, sources, size) in functions.items():
                value = int(fn(*(env[s] for s in sources)))
                if not 0 <= value < size:
                    raise ValueError(f"{name}={value} outside alphabet of size {size}")
                env[name] = value
                extra.append(value)
            table[point + tuple(extra)] += p
        return DiscreteJoint(table, new_names)


def exact_discrete_information(table, names: Sequence[str] | None = None) -> dict:
    """Entropies, pairwise MIs and single-variable-conditioned CMIs, in nats.

    Keys look like ``"X1"`` / ``"X1,X2"`` (entropy), ``"X1;X2"`` (MI) and
    ``"X1;X2|U"`` (conditional MI).
    """
    dj = table if isinstance(table, DiscreteJoint) else DiscreteJoint(table, names)
    out = {"entropy": {}, "mutual_information": {}, "conditional_mutual_information": {}}
    for a in dj.names:
        out["entropy"][a] = dj.entropy([a])
    for a, b in itertools.combinations(dj.names, 2):
        out["entropy"][f"{a},{b}"] = dj.entropy([a, b])
        out["mutual_information"][f"{a};{b}"] = dj.mutual_information([a], [b])
        for c in dj.names:
            if c not in (a, b):
                out["conditional_mutual_information"][f"{a};{b}|{c}"] = dj.mutual_information([a], [b], [c])
    return out


class ExactRatios:
    """Stands in for a :class:`DiscriminatorSet` with exact log ratios of a table.

    Loss inputs are integer code tensors; ``rename`` maps loss argument names
    (``x1``, ``u2``, ...) to table variable names.
    """

    def __init__(self, dj: DiscreteJoint, rename: Mapping[str, str] | None = None):
        self.dj = dj
        self.rename = dict(rename or {})

    def log_ratio(self, tag: str, inputs) -> torch.Tensor:
        args = [self.rename.get(a, a) for a in term_arguments(tag)]
        ratio, _, _ = self.dj.log_ratio([[a] for a in args])
        idx = tuple(np.asarray(x, dtype=np.int64) for x in inputs)
        return torch.as_tensor(ratio[idx], dtype=torch.float64)


def fit_discriminator(
    disc: Discriminator,
    joint: Sequence[torch.Tensor],
    shuffle: Sequence[int],
    steps: int = 2000,
    batch_size: int = 512,
    lr: float = 1e-3,
    seed: int = 0,
) -> list[float]:
    """Train ``disc`` on fixed joint samples with in-batch product negatives; returns the loss trace."""
    n = len(joint[0])
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(disc.parameters(), lr=lr)
    trace = []
    for _ in range(steps):
        idx = torch.as_tensor(rng.choice(n, size=min(batch_size, n), replace=False))
        batch = [a[idx] for a in joint]
        loss = discriminator_loss(disc, batch, build_product_batch(batch, shuffle, rng))
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(float(loss.detach()))
    return trace
