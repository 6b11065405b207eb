"""Graph neural network model soups."""

from .counters import PassCounters
from .gnn import ModelParams, ModelSpec, forward, init_params, load_checkpoint, save_checkpoint
from .graph import CsrGraph, Partitioning, assemble_subgraph, choose_partitions, generate_sbm, load_graph, partition, save_graph
from .ingredients import IngredientSet, TrainConfig, train_one, train_population
from .soup import (LSConfig, PLSConfig, SoupReport, build_soup, gis_soup, greedy_soup, learned_soup, pls_soup,
                   uniform_soup)

__version__ = "0.1.0"
