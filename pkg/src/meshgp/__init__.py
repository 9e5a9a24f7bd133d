"""Meshed Gaussian processes on cubic domain tessellations.

Library layout:

- :mod:`meshgp.covariance` -- base cross-covariance families
- :mod:`meshgp.tessellation` -- axis-parallel partitions and prototypes
- :mod:`meshgp.mesh` -- the cubic DAG, coloring, Markov blankets
- :mod:`meshgp.mgp` -- block moments, densities, precision, KL checks
- :mod:`meshgp.gibbs` -- the colored-parallel Gibbs sampler
- :mod:`meshgp.predict` -- posterior prediction and diagnostics
- :mod:`meshgp.synth` -- synthetic lattice data with cloud masking
- :mod:`meshgp.cli` -- the end-to-end command-line pipeline
"""

from .covariance import (CovParams, FactorizationError, LatentDistParams,
                         cov_matrix, cross_cov, cross_cov_latent_distance, psi,
                         robust_cholesky)
from .gibbs import (ChainResult, ChainState, GibbsSampler, McmcConfig,
                    PriorSpec, RegressionData, run_chain)
from .mesh import MeshGraph, build_cubic_mesh, markov_blanket, moral_sparsity
from .mgp import (BlockMomentSet, MeshedModel, MgpCovariance, MomentCache,
                  assemble_precision, approx_cov_reference, kl_from_dense,
                  kl_gaussian_zero_mean, log_density_other,
                  log_density_reference, mgp_cross_cov)
from .predict import PredictionResult, effective_sample_size, metrics, predict_at
from .synth import SynthDataset, SynthSpec, apply_clouds, generate, grid_coords
from .tessellation import (AxisPartition, PrototypeMaps, RegionAssignment,
                           assign_region, assign_regions, build_partition,
                           detect_prototypes, split_reference)

__version__ = "0.1.0"
