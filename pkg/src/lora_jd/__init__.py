"""Joint compression of LoRA adapter collections into shared bases."""
from .adapter_store import (AdapterCollection, CompressedCollection, CompressedGroup, FormatError, LoraAdapter,
                            Mode, Sigma, denormalize_sigmas, load_collection, load_compressed,
                            normalize_collection, save_collection, save_compressed)
from .clustering import ClusterOptions, ClusterReport, assign_step, cluster_solve, init_clusters
from .jd_core import (Algorithm, SolveOptions, SolveReport, compress, eig_iteration_step, jd_diag_step,
                      jd_full_step, objective, optimal_sigma_full, solve)
from .metrics import (BoundsReport, CompressionSetting, Setting, gpu_usage_ratio, minimal_lossless_rank,
                      param_count, relative_recon_error, saved_ratio, svd_compress, theorem_bounds,
                      truncated_svd)
from .serving import Batch, flop_estimate, forward_compressed, forward_dense_reference

__version__ = "0.1.0"
