from .design import (
    Column, DesignError, DesignMatrix, ModelSpec, Term, build_design, cell_left,
    design_rows, default_model_spec,
)
from .episodes import Episode, age_grid, merge_episodes, split_episodes
from .splines import SplineBasis

__all__ = [
    "Column", "DesignError", "DesignMatrix", "Episode", "ModelSpec", "SplineBasis", "Term",
    "age_grid", "build_design", "cell_left", "design_rows", "merge_episodes",
    "default_model_spec", "split_episodes",
]
