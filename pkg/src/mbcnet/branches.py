"""Feature-interaction branches, the shared top MLP and the logit heads.

Parameters live in a flat ``{name: ndarray}`` dict. A forward pass receives
the matching dict of tape leaves, so the same arrays can be differentiated,
checkpointed or updated by the optimizer without any module objects.
"""
import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from .errors import ConfigError
from .features import concat_all, embed_batch, group_concat, init_embeddings

BRANCHES = ("efgc", "deep", "cross")
FUSION = "fusion"
DISPLAY = {"efgc": "EFGC", "deep": "Deep", "cross": "Cross", "fusion": "MBC"}


@dataclass
class EfgcConfig:
    hidden: tuple = (64, 16)
    reduce: int = 32


@dataclass
class DeepConfig:
    hidden: tuple = (128, 64, 32)


@dataclass
class CrossConfig:
    num_experts: int = 2
    layers: int = 2
    rank: int = 4
    reduce: int = 32


@dataclass
class SharedTopConfig:
    hidden: tuple = (32, 16, 8)

    @property
    def d(self):
        return self.hidden[-1]


@dataclass
class ModelConfig:
    efgc: EfgcConfig = field(default_factory=EfgcConfig)
    deep: DeepConfig = field(default_factory=DeepConfig)
    cross: CrossConfig = field(default_factory=CrossConfig)
    top: SharedTopConfig = field(default_factory=SharedTopConfig)
    branches: tuple = BRANCHES
    profile: str = "desk"

    def validate(self, schema=None):
        unknown = [b for b in self.branches if b not in BRANCHES]
        if unknown:
            raise ConfigError(f"model.branches: unknown branch ids {unknown}")
        if not self.branches:
            raise ConfigError("model.branches: at least one branch is required")
        sizes = list(self.efgc.hidden) + [self.efgc.reduce] + list(self.deep.hidden) + list(self.top.hidden)
        sizes += [self.cross.reduce, self.cross.rank]
        if any(int(s) < 1 for s in sizes):
            raise ConfigError("model: every layer size must be >= 1")
        if not self.deep.hidden:
            raise ConfigError("model.deep_hidden must be non-empty")
        if not self.efgc.hidden:
            raise ConfigError("model.efgc_hidden must be non-empty")
        if not self.top.hidden or self.top.d < 2:
            raise ConfigError("model.top_hidden must be non-empty with last size >= 2")
        if self.cross.num_experts < 1 or self.cross.layers < 0:
            raise ConfigError("model: cross_experts must be >= 1 and cross_layers >= 0")
        if schema is not None and self.cross.rank > schema.total_width:
            raise ConfigError(f"model.cross_rank {self.cross.rank} exceeds input width {schema.total_width}")
        widths = {b: self.reduction_width(b) for b in self.branches}
        if len(set(widths.values())) > 1:
            raise ConfigError(f"model: branch output widths must agree for the shared top, got {widths}")
        return self

    def reduction_width(self, branch):
        return {"efgc": self.efgc.reduce, "deep": self.deep.hidden[-1], "cross": self.cross.reduce}[branch]


PROFILES = {
    "desk": ModelConfig(),
    "paper": ModelConfig(
        efgc=EfgcConfig(hidden=(1024, 128), reduce=512),
        deep=DeepConfig(hidden=(2048, 1024, 512, 512, 512)),
        cross=CrossConfig(num_experts=2, layers=2, rank=16, reduce=512),
        top=SharedTopConfig(hidden=(512, 256, 128)),
        profile="paper",
    ),
}


def profile_config(name, **overrides):
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r} (expected one of {sorted(PROFILES)})")
    return replace(PROFILES[name], **overrides)


@dataclass
class BranchOutput:
    branch: str
    latent: nx.Node
    logit: nx.Node
    prob: nx.Node


def pair_names(branches):
    """Unordered branch pairs in canonical order; one tied transform per pair."""
    return list(itertools.combinations(branches, 2))


# ---------------------------------------------------------------- building blocks


def he_uniform(rng, fan_in, shape):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape)


def init_mlp(params, prefix, in_dim, sizes, rng):
    for i, size in enumerate(sizes):
        params[f"{prefix}.l{i}.W"] = he_uniform(rng, in_dim, (in_dim, size))
        params[f"{prefix}.l{i}.b"] = np.zeros((1, size))
        in_dim = size
    return in_dim


def mlp_forward(x, leaves, prefix, n_layers):
    """ReLU between layers, linear last."""
    for i in range(n_layers):
        x = nx.affine(x, leaves[f"{prefix}.l{i}.W"], leaves[f"{prefix}.l{i}.b"])
        if i < n_layers - 1:
            x = nx.relu(x)
    return x


def efgc_forward(group_inputs, leaves, config):
    outs = [mlp_forward(g, leaves, f"efgc.g{i}", len(config.hidden)) for i, g in enumerate(group_inputs)]
    h = outs[0] if len(outs) == 1 else nx.concat_cols(outs)
    return nx.affine(h, leaves["efgc.reduce.W"], leaves["efgc.reduce.b"])


def deep_forward(x, leaves, config):
    return mlp_forward(x, leaves, "deep", len(config.hidden))


def cross_layer(x0, xl, leaves, prefix, num_experts):
    """One mixture-of-low-rank-experts cross layer with a residual.

    Expert k computes ``x0 * (xl @ V_k @ U_k + b)`` (``V_k``: F x r,
    ``U_k``: r x F); experts are mixed by a per-row softmax over ``xl @ G``.
    """
    b = leaves[f"{prefix}.b"]
    experts = []
    for k in range(num_experts):
        low = nx.matmul(nx.matmul(xl, leaves[f"{prefix}.e{k}.V"]), leaves[f"{prefix}.e{k}.U"])
        experts.append(nx.mul(x0, nx.add(low, b)))
    if num_experts == 1:
        mixed = experts[0]
    else:
        gate = nx.softmax_rows(nx.matmul(xl, leaves[f"{prefix}.gate"]))
        mixed = None
        for k, e in enumerate(experts):
            term = nx.mul(nx.slice_cols(gate, k, k + 1), e)
            mixed = term if mixed is None else nx.add(mixed, term)
    return nx.add(mixed, xl)


def cross_forward(x, leaves, config):
    xl = x
    for layer in range(config.layers):
        xl = cross_layer(x, xl, leaves, f"cross.l{layer}", config.num_experts)
    return nx.affine(xl, leaves["cross.reduce.W"], leaves["cross.reduce.b"])


def shared_top(h, leaves, config):
    if h.shape[1] != leaves["top.l0.W"].shape[0]:
        raise ConfigError(f"shared top expects width {leaves['top.l0.W'].shape[0]}, got {h.shape[1]}")
    return mlp_forward(h, leaves, "top", len(config.hidden))


def branch_logit(z, leaves, head):
    logit = nx.affine(z, leaves[f"head.{head}.W"], leaves[f"head.{head}.b"])
    return logit, nx.sigmoid(logit)


# ---------------------------------------------------------------- model


class MBCNet:
    """Embeddings, active branches, shared top, four heads and the pair transforms."""

    def __init__(self, schema, groups, config):
        self.schema = schema.validate()
        self.groups = groups.validate(schema) if "efgc" in config.branches else groups
        self.config = config.validate(schema)

    @property
    def branches(self):
        return tuple(self.config.branches)

    @property
    def heads(self):
        return self.branches + ((FUSION,) if len(self.branches) > 1 else ())

    def init_params(self, seed):
        """Seeded initial parameters, in a fixed insertion order."""
        rng = np.random.default_rng(seed)
        cfg = self.config
        params = init_embeddings(self.schema, rng)
        width = self.schema.total_width
        if "efgc" in self.branches:
            outs = 0
            for i in range(len(self.groups)):
                outs += init_mlp(params, f"efgc.g{i}", self.groups.width(self.schema, i), cfg.efgc.hidden, rng)
            params["efgc.reduce.W"] = he_uniform(rng, outs, (outs, cfg.efgc.reduce))
            params["efgc.reduce.b"] = np.zeros((1, cfg.efgc.reduce))
        if "deep" in self.branches:
            init_mlp(params, "deep", width, cfg.deep.hidden, rng)
        if "cross" in self.branches:
            c = cfg.cross
            for layer in range(c.layers):
                p = f"cross.l{layer}"
                for k in range(c.num_experts):
                    params[f"{p}.e{k}.V"] = he_uniform(rng, width, (width, c.rank))
                    params[f"{p}.e{k}.U"] = he_uniform(rng, c.rank, (c.rank, width))
                params[f"{p}.b"] = np.zeros((1, width))
                if c.num_experts > 1:
                    params[f"{p}.gate"] = he_uniform(rng, width, (width, c.num_experts))
            params["cross.reduce.W"] = he_uniform(rng, width, (width, c.reduce))
            params["cross.reduce.b"] = np.zeros((1, c.reduce))
        init_mlp(params, "top", cfg.reduction_width(self.branches[0]), cfg.top.hidden, rng)
        d = cfg.top.d
        for head in self.heads:
            params[f"head.{head}.W"] = he_uniform(rng, d, (d, 1))
            params[f"head.{head}.b"] = np.zeros((1, 1))
        for a, b in pair_names(self.branches):
            params[f"coop.W.{a}.{b}"] = np.eye(d)
        return params

    def branch_hidden(self, leaves, batch):
        """``h`` for every active branch (before the shared top)."""
        per_field = embed_batch(batch, self.schema, leaves)
        x = concat_all(per_field)
        h = {}
        for b in self.branches:
            if b == "efgc":
                h[b] = efgc_forward(group_concat(per_field, self.schema, self.groups), leaves, self.config.efgc)
            elif b == "deep":
                h[b] = deep_forward(x, leaves, self.config.deep)
            else:
                h[b] = cross_forward(x, leaves, self.config.cross)
        return h

    def forward(self, leaves, batch):
        """Return ``{head: BranchOutput}`` for every active branch plus fusion."""
        outputs = {}
        for b, hb in self.branch_hidden(leaves, batch).items():
            z = shared_top(hb, leaves, self.config.top)
            logit, prob = branch_logit(z, leaves, b)
            outputs[b] = BranchOutput(b, z, logit, prob)
        if FUSION in self.heads:
            z = nx.mean_cols_stack([outputs[b].latent for b in self.branches])
            logit, prob = branch_logit(z, leaves, FUSION)
            outputs[FUSION] = BranchOutput(FUSION, z, logit, prob)
        return outputs

    def predict(self, params, batch, chunk=8192):
        """Per-head probabilities and latents (numpy) without building gradients."""
        probs = {h: [] for h in self.heads}
        latents = {h: [] for h in self.heads}
        for part in batch.batches(chunk):
            tape = nx.Tape()
            leaves = {k: tape.leaf(v, name=k, requires_grad=False) for k, v in params.items()}
            out = self.forward(leaves, part)
            for h in self.heads:
                probs[h].append(out[h].prob.value[:, 0])
                latents[h].append(out[h].latent.value)
        return (
            {h: np.concatenate(v) for h, v in probs.items()},
            {h: np.concatenate(v) for h, v in latents.items()},
        )
