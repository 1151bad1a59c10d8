"""Scene-grammar inference: factor-graph compilation, loopy BP, sampling, EM."""

from .builders import curve_grammar, face_grammar, simple_face_grammar
from .bp import (
    BpConfig,
    Marginals,
    MessageStore,
    OpCounter,
    brick_evidence,
    categorical_messages,
    noisyor_messages,
    run_lbp,
    uniform_evidence,
    variable_messages,
)
from .em import EmState, TrainingExample, em_step, fit
from .errors import (
    CapacityExceeded,
    CyclicGrammar,
    DegenerateStatistics,
    DimensionMismatch,
    EmptyPoseSpace,
    GrammarError,
    KernelInvalid,
    KernelUnnormalized,
    NoPositives,
    RuleProbabilityMismatch,
    ScopeMismatch,
    SingleClassInput,
    UnknownSymbol,
)
from .evidence import (
    NoisyImage,
    PlattCalibration,
    ScoreField,
    corrupt_contour_map,
    gaussian_evidence,
    platt_fit,
    score_evidence,
    synthetic_scores,
)
from .factorgraph import Factor, FactorGraph, compile_grammar, eval_factor
from .grammar import (
    BrickTable,
    CycleReport,
    ExpansionGraph,
    ExplicitKernel,
    GeometryKernel,
    Grammar,
    OffsetKernel,
    PoseSpace,
    RegionKernel,
    Rule,
    check_grammar,
    topological_order,
    validate_grammar,
)
from .grammar_io import load_grammar, save_grammar
from .metrics import PrCurve, localization_error, localize, pr_auc
from .sampler import (
    Assignment,
    Expansion,
    LogProb,
    Scene,
    SceneSampler,
    enumerate_valid_assignments,
    joint_log_prob,
    sample_scene,
    scene_from_text,
    scene_to_assignment,
    scene_to_text,
    symbol_mask,
)

__version__ = "0.1.0"
