"""Graph-guided routing over a pool of question-answering agents."""

from .config import RunConfig, build_config, load_config
from .ensemble import VoteConfig, majority_vote, prune_topk, weighted_vote
from .graph import AgentSpec, ContextGraph, QueryInstance, RoutedGraph, extend_graph, parse_context_graph
from .hgnn import ModelConfig, RouteDistribution, forward, init_params, predict
from .saliency import RetrievalConfig, entity_salience, retrieve_subgraph
from .synthetic import ScenarioConfig, generate_scenario
from .train import PerformanceRecord, TrainConfig, target_distribution, train

__version__ = "0.1.0"

__all__ = [
    "AgentSpec", "ContextGraph", "ModelConfig", "PerformanceRecord", "QueryInstance", "RetrievalConfig",
    "RouteDistribution", "RoutedGraph", "RunConfig", "ScenarioConfig", "TrainConfig", "VoteConfig",
    "build_config", "entity_salience", "extend_graph", "forward", "generate_scenario", "init_params",
    "load_config", "majority_vote", "parse_context_graph", "predict", "prune_topk", "retrieve_subgraph",
    "target_distribution", "train", "weighted_vote",
]
