"""evoscan: differential imaging of evolving scatterers from sequential far-field data.

The package covers the full chain: a desk-scale 2D forward simulator for crack
and pore scenes, the discrete far-field operator algebra, trial-signature
libraries, the regularized sampling-equation solver, and the differential
evolution indicators that localize what changed between sensing steps.
"""

from .grids import SamplingGrid
from .scene import (CrackArc, EvolutionGroundTruth, EvolutionSequence, Medium,
                    Pore, Scene, SceneError, SensingConfig, build_table_scene,
                    build_table_sequence, default_step_assignment,
                    rasterize_support, scene_diff)
from .forward import (CrackDensity, ForwardConfig, ForwardError, PlaneWave,
                      PoreExpansion, assemble_far_field_matrix, far_field,
                      incident_trace, solve_cracks, solve_pores)
from .operator import (FarFieldOperator, NoiseRecord, SharpOperator, add_noise,
                       calibrate_epsilon, f_sharp, load_operator, psd_sqrt,
                       save_operator)
from .patterns import (TrialPattern, build_library, dipole_pattern,
                       iter_library_chunks, monopole_pattern)
from .glsm import (BatchSolutions, GlsmSolution, RegularizationConfig,
                   batch_solve, glsm_indicator, morozov_eta, solve_glsm)
from .indicators import (IndicatorMap, assemble_glsm_map, assemble_map,
                         average_maps, diff_indicators,
                         indicators_from_invariants, lambda_invariant,
                         reduce_over_normals, upsilon_invariant)
from .pipeline import (RunConfig, ScoreReport, config_hash, desk_profile,
                       export_map, load_config, paper_profile, run_pipeline,
                       score_map)

__version__ = "0.1.0"
