"""Graph-based neural operator for learning local solution operators of networked dynamics."""
from .graph import Graph, induced_subgraph, load_graph, random_connected_graph
from .dynamics import SystemSpec, Trajectory, simulate, simulate_many
from .sampling import SamplingConfig, build_triplets, split_trajectories
from .model import DeepGraphONet, ModelConfig, load_params, save_params
from .training import TrainConfig, train
from .evaluation import evaluate, l1_relative_error, rollout_teacher_forced, zero_shot_eval

__version__ = "0.1.0"
