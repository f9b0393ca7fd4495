"""Concept encoder: message passing within levels, then top-down propagation.

Stages run in a fixed order on every forward pass:

1. per-level embedding tables (prompt-embedding or random initialisation),
2. horizontal message passing within each level (GAT, or HAT at the leaf level),
3. bottom-up propagation over stacked parent/child subgraphs (HGIP),
4. top-down convex combination of each leaf with its ancestors (GRAM).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import EdgeGraph, GatLayer, HatLayer, HyperGraph, glorot
from .autodiff import Module, Tensor
from .embeddings import DEFAULT_TASK, EmbeddingCache, EmbeddingProvider, build_prompt, remote_embed
from .errors import ConfigError, EmbeddingError
from .metakg import MetaKG, UnifiedIndex

logger = logging.getLogger(__name__)


@dataclass
class EncoderConfig:
    d: int = 256
    heads_h: int = 4
    heads_v: int = 2
    dropout_h: float = 0.1
    dropout_v: float = 0.2
    leaf_hmp_mode: str = "regular_graph"  # or "hypergraph"
    use_hmp_leaf: bool = True
    use_hmp_parent: bool = True
    use_hgip: bool = True
    use_llm_init: bool = True
    taus: list | None = None
    hmp_depth: int = 1
    gram_hidden: int | None = None
    neighborhood: str = "rows"  # "cols" flips the horizontal attention direction
    hgip_carry_children: bool = False
    hgip_init: str = "identity"  # vertical layers start as a plain convex combination; or "glorot"
    hmp_init: str = "glorot"
    gram_source: str = "post_hgip"  # or "pre_hgip"
    prompt_variant: str = "full"
    task_name: str = DEFAULT_TASK

    def validate(self):
        if self.d % self.heads_h or self.d % self.heads_v:
            raise ConfigError(f"d={self.d} must be divisible by heads_h={self.heads_h} and heads_v={self.heads_v}")
        for name in ("dropout_h", "dropout_v"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must be in [0, 1)")
        if self.leaf_hmp_mode not in ("regular_graph", "hypergraph"):
            raise ConfigError(f"unknown leaf_hmp_mode {self.leaf_hmp_mode!r}")
        if self.neighborhood not in ("rows", "cols"):
            raise ConfigError(f"unknown neighborhood {self.neighborhood!r}")
        if self.gram_source not in ("post_hgip", "pre_hgip"):
            raise ConfigError(f"unknown gram_source {self.gram_source!r}")
        for name in ("hgip_init", "hmp_init"):
            if getattr(self, name) not in ("identity", "glorot"):
                raise ConfigError(f"{name} must be identity or glorot")
        if self.hmp_depth < 1:
            raise ConfigError("hmp_depth must be >= 1")
        return self


ABLATIONS = {
    "full": {},
    "w/o HGIP": {"use_hgip": False},
    "w/o LLM": {"use_llm_init": False},
    "w/o leaf-HMP": {"use_hmp_leaf": False},
    "w/o parent-HMP": {"use_hmp_parent": False},
    "w/o HMP": {"use_hmp_leaf": False, "use_hmp_parent": False},
}


@dataclass
class EncoderGraphs:
    """Attention structures derived once from a Meta-KG."""

    horizontal: list
    hypergraph: HyperGraph | None
    vertical: list
    leaf_ancestor: list
    sizes: list = field(default_factory=list)

    @classmethod
    def from_metakg(cls, mkg: MetaKG, cfg: EncoderConfig) -> "EncoderGraphs":
        horizontal = [EdgeGraph.from_adjacency(a, cfg.neighborhood) for a in mkg.horizontal]
        hyper = HyperGraph.from_incidence(mkg.incidence) if cfg.leaf_hmp_mode == "hypergraph" else None
        vertical = [EdgeGraph.from_adjacency(a, "rows") for a in mkg.vertical]
        sizes = [mkg.index.size(level) for level in range(1, mkg.depth + 1)]
        return cls(horizontal, hyper, vertical, list(mkg.index.leaf_ancestor), sizes)


# -- initialisation -----------------------------------------------------------------

def random_tables(index: UnifiedIndex, d: int, rng) -> list[np.ndarray]:
    """Uniform in [-r, r] with r = sqrt(6 / (2d))."""
    r = np.sqrt(6.0 / (2 * d))
    return [rng.uniform(-r, r, size=(index.size(level), d)) for level in range(1, index.depth + 1)]


def init_embeddings(index: UnifiedIndex, cfg: EncoderConfig, rng=None, provider: EmbeddingProvider | None = None,
                    cache: EmbeddingCache | None = None, provider_id: str | None = None) -> list[np.ndarray]:
    """One d-vector per Meta-KG node at every level.

    With prompt initialisation and no provider, vectors come from ``cache``
    under ``provider_id``; a missing entry is an error.
    """
    if not cfg.use_llm_init:
        if rng is None:
            raise ValueError("random initialisation needs an rng")
        return random_tables(index, cfg.d, rng)
    if provider is None and cache is None:
        raise EmbeddingError("prompt initialisation needs a provider or a filled cache")
    if provider is not None:
        provider_id = provider.provider_id
    elif provider_id is None:
        raise EmbeddingError("reading prompt embeddings from a cache needs the provider id")
    tables = []
    for level in range(1, index.depth + 1):
        rows = []
        for c in index.levels[level - 1]:
            rec = build_prompt(c, index.ontologies[c.type_tag], cfg.task_name, cfg.prompt_variant)
            if provider is not None:
                v = remote_embed(provider, rec.prompt_text, cfg.d, cache, rec.template_version)
            else:
                v = cache.get(rec.prompt_text, provider_id, cfg.d)
                if v is None:
                    raise EmbeddingError(f"no cached embedding for {c} and no provider available")
            rows.append(v)
        tables.append(np.vstack(rows))
    return tables


# -- GRAM -----------------------------------------------------------------------------

class GramAttention(Module):
    """Energy MLP ``f(a, b) = u . tanh(W [a; b] + c)`` and the resulting convex combination."""

    def __init__(self, d, hidden, rng):
        self.W = ad.parameter(glorot(rng, (2 * d, hidden)), "gram.W")
        self.c = ad.parameter(np.zeros(hidden), "gram.c")
        self.u = ad.parameter(glorot(rng, (hidden, 1)), "gram.u")
        self.last_alpha = None

    def energies(self, leaf: Tensor, chain: Tensor) -> Tensor:
        # leaf: (N, d); chain: (N, L, d) -> (N, L)
        n, depth, d = chain.shape
        tiled = ad.concat([ad.reshape(leaf, (n, 1, d))] * depth, axis=1)
        pair = ad.concat([tiled, chain], axis=2)
        hidden = ad.tanh(ad.add(ad.matmul(pair, self.W), self.c))
        return ad.reshape(ad.matmul(hidden, self.u), (n, depth))

    def forward(self, leaf: Tensor, chain: Tensor) -> Tensor:
        alpha = ad.masked_softmax(self.energies(leaf, chain), axis=1)
        self.last_alpha = alpha.data
        n, depth, d = chain.shape
        return ad.tsum(ad.mul(ad.reshape(alpha, (n, depth, 1)), chain), axis=1)

    __call__ = forward


def ancestor_stack(tables: list[Tensor], leaf_ancestor: list) -> Tensor:
    """(N_leaf, L, d): row i holds the level-1 .. level-L embeddings on leaf i's chain."""
    depth = len(tables)
    leaf = tables[-1]
    n, d = leaf.shape
    parts = []
    for level in range(1, depth + 1):
        x = leaf if level == depth else ad.embedding_gather(tables[level - 1], leaf_ancestor[level - 1])
        parts.append(ad.reshape(x, (n, 1, d)))
    return ad.concat(parts, axis=1)


# -- encoder ---------------------------------------------------------------------------

class LinkoEncoder(Module):
    def __init__(self, tables: list[np.ndarray], cfg: EncoderConfig, rng_factory):
        """``rng_factory(name)`` returns an independent generator per parameter group."""
        cfg.validate()
        self.cfg = cfg
        self.depth = len(tables)
        d = cfg.d
        for t in tables:
            if t.shape[1] != d:
                raise ConfigError(f"embedding table width {t.shape[1]} != d={d}")
        self.tables = [ad.parameter(t, f"table.l{i + 1}") for i, t in enumerate(tables)]

        self.hmp_layers = []
        rng = rng_factory("init.hmp")
        for level in range(1, self.depth + 1):
            is_leaf = level == self.depth
            enabled = cfg.use_hmp_leaf if is_leaf else cfg.use_hmp_parent
            stack = []
            if enabled:
                for k in range(cfg.hmp_depth):
                    name = f"hmp.l{level}.{k}"
                    if is_leaf and cfg.leaf_hmp_mode == "hypergraph":
                        layer = HatLayer(d, d, cfg.heads_h, rng, dropout=cfg.dropout_h, init=cfg.hmp_init, name=name)
                    else:
                        layer = GatLayer(d, d, cfg.heads_h, rng, dropout=cfg.dropout_h, init=cfg.hmp_init, name=name)
                    stack.append(layer)
            self.hmp_layers.append(stack)

        rng = rng_factory("init.hgip")
        self.hgip_layers = []
        if cfg.use_hgip:
            for level in range(1, self.depth):
                self.hgip_layers.append(
                    GatLayer(d, d, cfg.heads_v, rng, dropout=cfg.dropout_v, init=cfg.hgip_init, name=f"hgip.l{level}")
                )
        self.gram = GramAttention(d, cfg.gram_hidden or d, rng_factory("init.gram"))

    # each stage maps a list of per-level tensors to a new list

    def hmp(self, xs: list[Tensor], graphs: EncoderGraphs, rng=None) -> list[Tensor]:
        out = []
        for level, (x, stack) in enumerate(zip(xs, self.hmp_layers), start=1):
            for layer in stack:
                if isinstance(layer, HatLayer):
                    x = layer(x, graphs.hypergraph, rng)
                else:
                    x = layer(x, graphs.horizontal[level - 1], rng)
            out.append(x)
        return out

    def hgip(self, xs: list[Tensor], graphs: EncoderGraphs, rng=None) -> list[Tensor]:
        if not self.hgip_layers:
            return list(xs)
        xs = list(xs)
        for level in range(self.depth - 1, 0, -1):
            parent, child = xs[level - 1], xs[level]
            n_par = parent.shape[0]
            out = self.hgip_layers[level - 1](ad.concat_rows([parent, child]), graphs.vertical[level - 1], rng)
            xs[level - 1] = out[:n_par]
            if self.cfg.hgip_carry_children:
                xs[level] = out[n_par:]
        return xs

    def gram_stage(self, xs: list[Tensor], graphs: EncoderGraphs) -> Tensor:
        return self.gram(xs[-1], ancestor_stack(xs, graphs.leaf_ancestor))

    def forward(self, graphs: EncoderGraphs, rng=None) -> Tensor:
        xs = self.hmp(list(self.tables), graphs, rng)
        post = self.hgip(xs, graphs, rng)
        return self.gram_stage(post if self.cfg.gram_source == "post_hgip" else xs, graphs)

    __call__ = forward


def encode(mkg: MetaKG, cfg: EncoderConfig, rng_factory, provider=None, cache=None) -> tuple[Tensor, LinkoEncoder]:
    """Convenience: initialise tables, build the encoder and run one forward pass."""
    tables = init_embeddings(mkg.index, cfg, rng_factory("init.tables"), provider, cache)
    enc = LinkoEncoder(tables, cfg, rng_factory)
    graphs = EncoderGraphs.from_metakg(mkg, cfg)
    return enc(graphs, rng_factory("dropout")), enc
