"""Total-variation graph neural networks for clustering and graph pooling."""
from .graph import Graph, gen_grid, gen_ring, gen_sbm, make_rng, sym_norm_adjacency

__version__ = "0.1.0"

__all__ = ["Graph", "gen_grid", "gen_ring", "gen_sbm", "make_rng", "sym_norm_adjacency"]
