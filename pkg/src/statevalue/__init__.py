"""Per-token state value estimation for group-based policy optimization.

Estimators: group mean (GRPO), Monte-Carlo sampling, numeric milestones
(Numca) and hidden-state nearest neighbours (Hista), plus a synthetic
environment with exact values and a benchmark harness.
"""

from .baselines import GaeParams, gae_advantages, grpo_values, mcs_values
from .errors import BundleFormatError, BundleIntegrityError, ConfigError, ValidationError
from .hista import HistaParams, hista_values, min_distance, prefix_distance_grid
from .numca import extract_milestones, numca_values
from .synth import EnvConfig, generate, number_chain
from .trace import Group, Rollout, ValueAssignment, load_bundle, store_bundle

__version__ = "0.1.0"
