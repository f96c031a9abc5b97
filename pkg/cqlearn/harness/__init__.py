from .config import ExperimentConfig, SearchSpace, config_hash, load_config
from .experiments import (
    run_collect,
    run_evaluation,
    run_fig3_demo,
    run_highway_training,
    run_parallel,
    run_random_search,
    run_tree_sweep,
)
from .plotdata import emit_plot_data
from .search import permutation_test, sample_search_space, select_incumbent
